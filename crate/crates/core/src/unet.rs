//! U-shaped encoder-decoder: contracting path with 2x2 max pooling,
//! expanding path with nearest-neighbor upsampling, skip concatenation,
//! two 3x3 conv + relu blocks per level, 1x1 head.

use ndarray::ArrayD;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, TensorId};
use crate::error::{Error, Result};
use crate::params::{he_uniform, ParamSet};

/// Architecture constants of the segmentation network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Number of resolution levels (depth - 1 poolings).
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    /// Segmentation classes; the binary task uses K = 2 softmax.
    pub classes: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 16,
            in_channels: 1,
            classes: 2,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config("network depth must be at least 2".into()));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.classes < 2 {
            return Err(Error::Config("degenerate channel configuration".into()));
        }
        Ok(())
    }

    /// Spatial sizes must be divisible by this for pooling to mirror up.
    pub fn divisor(&self) -> usize {
        1 << (self.depth - 1)
    }
}

/// Shared shape of the U backbone: level channels and head width.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BackboneSpec {
    pub depth: usize,
    pub base: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl BackboneSpec {
    fn enc_ch(&self, level: usize) -> usize {
        self.base << level
    }
}

/// Parameters in the exact order the forward pass consumes them.
pub(crate) fn init_backbone<F: Scalar>(
    spec: &BackboneSpec,
    seed: u64,
    zero_head: bool,
) -> ParamSet<F> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let push_conv = |p: &mut ParamSet<F>,
                         rng: &mut ChaCha12Rng,
                         name: String,
                         cout: usize,
                         cin: usize,
                         k: usize,
                         zero: bool| {
        let fan_in = cin * k * k;
        let w = if zero {
            ArrayD::zeros(ndarray::IxDyn(&[cout, cin, k, k]))
        } else {
            he_uniform(&[cout, cin, k, k], fan_in, rng)
        };
        p.push(format!("{name}.w"), w);
        p.push(format!("{name}.b"), ArrayD::zeros(ndarray::IxDyn(&[cout])));
    };

    let mut prev = spec.in_ch;
    for i in 0..spec.depth {
        let ch = spec.enc_ch(i);
        push_conv(&mut p, &mut rng, format!("enc{i}.conv0"), ch, prev, 3, false);
        push_conv(&mut p, &mut rng, format!("enc{i}.conv1"), ch, ch, 3, false);
        prev = ch;
    }
    for i in (0..spec.depth - 1).rev() {
        let ch = spec.enc_ch(i);
        let cin = ch + spec.enc_ch(i + 1); // skip + upsampled deeper level
        push_conv(&mut p, &mut rng, format!("dec{i}.conv0"), ch, cin, 3, false);
        push_conv(&mut p, &mut rng, format!("dec{i}.conv1"), ch, ch, 3, false);
    }
    push_conv(
        &mut p,
        &mut rng,
        "head".to_string(),
        spec.out_ch,
        spec.base,
        1,
        zero_head,
    );
    p
}

/// Parameter tensors leased into one graph; grads accumulate across every
/// forward that shares the lease.
pub struct Lease {
    pub ids: Vec<TensorId>,
}

pub(crate) fn lease_params<F: Scalar>(g: &mut Graph<F>, params: &ParamSet<F>) -> Lease {
    Lease {
        ids: params.values().iter().map(|v| g.param(v.clone())).collect(),
    }
}

/// Runs the backbone, returning logits (N, out_ch, H, W).
pub(crate) fn forward_backbone<F: Scalar>(
    g: &mut Graph<F>,
    spec: &BackboneSpec,
    lease: &Lease,
    x: TensorId,
) -> Result<TensorId> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Dimension(format!(
            "network input must be NCHW, got {shape:?}"
        )));
    }
    let div = 1 << (spec.depth - 1);
    if !shape[2].is_multiple_of(div) || !shape[3].is_multiple_of(div) {
        return Err(Error::Dimension(format!(
            "spatial dims {}x{} not divisible by {div}",
            shape[2], shape[3]
        )));
    }
    if shape[1] != spec.in_ch {
        return Err(Error::Dimension(format!(
            "expected {} input channels, got {}",
            spec.in_ch, shape[1]
        )));
    }

    let mut next = lease.ids.iter().copied();
    let mut take = || next.next().expect("lease matches architecture");
    let mut conv_relu = |g: &mut Graph<F>, x: TensorId, pad: usize| -> Result<TensorId> {
        let w = take();
        let b = take();
        let y = g.conv2d(x, w, b, 1, pad)?;
        Ok(g.relu(y))
    };

    let mut cur = x;
    let mut skips = Vec::with_capacity(spec.depth - 1);
    for i in 0..spec.depth {
        cur = conv_relu(g, cur, 1)?;
        cur = conv_relu(g, cur, 1)?;
        if i < spec.depth - 1 {
            skips.push(cur);
            cur = g.max_pool2(cur)?;
        }
    }
    for i in (0..spec.depth - 1).rev() {
        let up = g.upsample2(cur)?;
        cur = g.concat_channels(skips[i], up)?;
        cur = conv_relu(g, cur, 1)?;
        cur = conv_relu(g, cur, 1)?;
    }
    // 1x1 linear head.
    let w = take();
    let b = take();
    let logits = g.conv2d(cur, w, b, 1, 0)?;
    debug_assert!(next.next().is_none(), "unused leased parameters");
    Ok(logits)
}

/// Segmentation network: backbone plus per-pixel channel softmax.
#[derive(Debug, Clone)]
pub struct UNet<F: Scalar> {
    pub cfg: UNetConfig,
    pub params: ParamSet<F>,
}

impl<F: Scalar> UNet<F> {
    pub fn new(cfg: UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = init_backbone(&Self::spec_of(&cfg), seed, false);
        Ok(Self { cfg, params })
    }

    fn spec_of(cfg: &UNetConfig) -> BackboneSpec {
        BackboneSpec {
            depth: cfg.depth,
            base: cfg.base_channels,
            in_ch: cfg.in_channels,
            out_ch: cfg.classes,
        }
    }

    fn spec(&self) -> BackboneSpec {
        Self::spec_of(&self.cfg)
    }

    pub fn lease(&self, g: &mut Graph<F>) -> Lease {
        lease_params(g, &self.params)
    }

    /// Forward through leased parameters; returns per-pixel class
    /// probabilities (N, K, H, W).
    pub fn forward(&self, g: &mut Graph<F>, lease: &Lease, x: TensorId) -> Result<TensorId> {
        let logits = forward_backbone(g, &self.spec(), lease, x)?;
        g.softmax_channels(logits)
    }

    /// Forward returning pre-softmax logits (used by gradient checks).
    pub fn forward_logits(
        &self,
        g: &mut Graph<F>,
        lease: &Lease,
        x: TensorId,
    ) -> Result<TensorId> {
        forward_backbone(g, &self.spec(), lease, x)
    }

    /// Reads gradients for every leased parameter after a backward pass.
    pub fn grads(&self, g: &Graph<F>, lease: &Lease) -> Vec<ArrayD<F>> {
        lease
            .ids
            .iter()
            .map(|&id| {
                g.grad(id)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(g.value(id).raw_dim()))
            })
            .collect()
    }
}

/// Inference-only forward pass: batch (N, 1, H, W) to probabilities.
pub fn seg_forward<F: Scalar>(net: &UNet<F>, batch: &ArrayD<F>) -> Result<ArrayD<F>> {
    let mut g = Graph::new();
    let x = g.leaf(batch.clone());
    let lease = Lease {
        ids: net
            .params
            .values()
            .iter()
            .map(|v| g.leaf(v.clone()))
            .collect(),
    };
    let probs = net.forward(&mut g, &lease, x)?;
    Ok(g.value(probs).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn small_cfg() -> UNetConfig {
        UNetConfig {
            depth: 2,
            base_channels: 4,
            in_channels: 1,
            classes: 2,
        }
    }

    #[test]
    fn fresh_net_outputs_valid_probabilities() {
        let net = UNet::<f32>::new(small_cfg(), 1).unwrap();
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 1, 8, 8]), |ix| {
            (ix[2] as f32 - ix[3] as f32) * 0.1
        });
        let probs = seg_forward(&net, &x).unwrap();
        assert_eq!(probs.shape(), &[2, 2, 8, 8]);
        assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
        let p4 = probs.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        for b in 0..2 {
            for r in 0..8 {
                for c in 0..8 {
                    let s = p4[[b, 0, r, c]] + p4[[b, 1, r, c]];
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn duplicated_batch_rows_give_identical_outputs() {
        let net = UNet::<f32>::new(small_cfg(), 2).unwrap();
        let one = ArrayD::from_shape_fn(IxDyn(&[1, 1, 8, 8]), |ix| {
            ((ix[2] * 8 + ix[3]) as f32).sin()
        });
        let mut two = ArrayD::zeros(IxDyn(&[2, 1, 8, 8]));
        for b in 0..2 {
            for r in 0..8 {
                for c in 0..8 {
                    two[[b, 0, r, c]] = one[[0, 0, r, c]];
                }
            }
        }
        let p = seg_forward(&net, &two).unwrap();
        for k in 0..2 {
            for r in 0..8 {
                for c in 0..8 {
                    assert_eq!(
                        p[[0, k, r, c]].to_bits(),
                        p[[1, k, r, c]].to_bits()
                    );
                }
            }
        }
    }

    #[test]
    fn indivisible_input_is_dimension_error() {
        let net = UNet::<f32>::new(UNetConfig::default(), 3).unwrap();
        let x = ArrayD::zeros(IxDyn(&[1, 1, 12, 12])); // 12 % 8 != 0
        assert!(matches!(
            seg_forward(&net, &x),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn same_seed_same_params() {
        let a = UNet::<f32>::new(small_cfg(), 9).unwrap();
        let b = UNet::<f32>::new(small_cfg(), 9).unwrap();
        assert_eq!(a.params.content_hash(), b.params.content_hash());
        let c = UNet::<f32>::new(small_cfg(), 10).unwrap();
        assert_ne!(a.params.content_hash(), c.params.content_hash());
    }
}
