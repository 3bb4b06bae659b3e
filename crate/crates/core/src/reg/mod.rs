//! Self-supervised slice-pair deformable registration: a small U-shaped
//! network maps a stacked (fixed, moving) pair to a dense displacement
//! field, trained with image-similarity plus field-smoothness losses on
//! adjacent slices only — no annotations are consumed anywhere here.

mod train;
pub mod warp;

pub use train::{mean_pair_similarity, propagate_labels, self_pairs, train_registration};
pub use warp::{warp_bilinear, warp_label, DeformationField};

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, LrSchedule, Scalar, TensorId};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::unet::{forward_backbone, lease_params, BackboneSpec, Lease};

/// One registration input: `fixed` is the target grid, `moving` is deformed
/// onto it. Both come from adjacent slices of one volume.
#[derive(Debug, Clone)]
pub struct SlicePair {
    pub fixed: Array2<f32>,
    pub moving: Array2<f32>,
}

impl SlicePair {
    pub fn new(fixed: Array2<f32>, moving: Array2<f32>) -> Result<Self> {
        if fixed.dim() != moving.dim() {
            return Err(Error::Dimension(format!(
                "slice pair shapes differ: {:?} vs {:?}",
                fixed.dim(),
                moving.dim()
            )));
        }
        Ok(Self { fixed, moving })
    }
}

/// Image-similarity term of the registration objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// Mean squared difference (default).
    Mse,
    /// One minus global zero-normalized cross-correlation; invariant to
    /// affine intensity changes between the warped and fixed images.
    Ncc,
}

/// Registration network hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegNetConfig {
    /// Downsampling levels, mirrored up.
    pub levels: usize,
    pub base_channels: usize,
    /// Weight of the smoothness loss.
    pub smoothness_weight: f64,
    pub similarity: Similarity,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub seed: u64,
}

impl Default for RegNetConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            base_channels: 16,
            smoothness_weight: 1.0,
            similarity: Similarity::Mse,
            epochs: 100,
            batch_size: 4,
            lr: LrSchedule::default(),
            seed: 0,
        }
    }
}

impl RegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config("registration levels must be >= 2".into()));
        }
        if self.base_channels == 0 || self.batch_size == 0 {
            return Err(Error::Config("degenerate registration config".into()));
        }
        if self.smoothness_weight < 0.0 {
            return Err(Error::Config("smoothness weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Deformation network: input 2 channels (fixed, moving stacked), output a
/// 2-channel displacement field on the fixed slice's grid. The head is
/// zero-initialized so the untrained network starts at the identity warp.
#[derive(Debug, Clone)]
pub struct RegNet<F: Scalar> {
    pub cfg: RegNetConfig,
    pub params: ParamSet<F>,
}

impl<F: Scalar> RegNet<F> {
    pub fn new(cfg: RegNetConfig) -> Result<Self> {
        cfg.validate()?;
        let params = crate::unet::init_backbone(&Self::spec_of(&cfg), cfg.seed, true);
        Ok(Self { cfg, params })
    }

    fn spec_of(cfg: &RegNetConfig) -> BackboneSpec {
        BackboneSpec {
            depth: cfg.levels,
            base: cfg.base_channels,
            in_ch: 2,
            out_ch: 2,
        }
    }

    pub fn lease(&self, g: &mut Graph<F>) -> Lease {
        lease_params(g, &self.params)
    }

    /// Forward through leased parameters: (B, 2, H, W) input, field output.
    pub fn forward(&self, g: &mut Graph<F>, lease: &Lease, x: TensorId) -> Result<TensorId> {
        forward_backbone(g, &Self::spec_of(&self.cfg), lease, x)
    }
}

/// Stacks pairs into the (B, 2, H, W) network input, channel 0 fixed,
/// channel 1 moving.
pub(crate) fn stack_pairs<F: Scalar>(pairs: &[&SlicePair]) -> ArrayD<F> {
    let (h, w) = pairs[0].fixed.dim();
    let mut x = ArrayD::<F>::zeros(IxDyn(&[pairs.len(), 2, h, w]));
    for (b, p) in pairs.iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                x[[b, 0, r, c]] = F::from_f64(p.fixed[[r, c]] as f64);
                x[[b, 1, r, c]] = F::from_f64(p.moving[[r, c]] as f64);
            }
        }
    }
    x
}

/// Computes the displacement field for one pair (inference only).
pub fn reg_forward(net: &RegNet<f32>, pair: &SlicePair) -> Result<DeformationField> {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(stack_pairs::<f32>(&[pair]));
    let lease = Lease {
        ids: net.params.values().iter().map(|v| g.leaf(v.clone())).collect(),
    };
    let field = net.forward(&mut g, &lease, x)?;
    let v = g.value(field);
    let v3 = v
        .view()
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap()
        .index_axis_move(ndarray::Axis(0), 0);
    warp::field_from_chw(&v3.view())
}

/// Graph composite: mean squared difference between warped and fixed.
pub fn similarity_loss<F: Scalar>(g: &mut Graph<F>, warped: TensorId, fixed: TensorId) -> TensorId {
    let d = g.sub(warped, fixed);
    let sq = g.mul(d, d);
    g.mean_all(sq)
}

/// Graph composite: `1 - ncc(warped, fixed)` with global zero-normalized
/// cross-correlation (optional alternative to the MSE similarity).
pub fn ncc_loss<F: Scalar>(g: &mut Graph<F>, warped: TensorId, fixed: TensorId) -> TensorId {
    let eps = F::from_f64(1e-8);
    let wm = g.mean_all(warped);
    let wc = g.sub_broadcast(warped, wm);
    let fm = g.mean_all(fixed);
    let fc = g.sub_broadcast(fixed, fm);
    let cross = g.mul(wc, fc);
    let num = g.sum_all(cross);
    let wc2 = g.mul(wc, wc);
    let fc2 = g.mul(fc, fc);
    let sw = g.sum_all(wc2);
    let sf = g.sum_all(fc2);
    let prod = g.mul(sw, sf);
    let stabilized = g.add_scalar(prod, eps);
    let den = g.sqrt(stabilized);
    let ncc = g.div(num, den);
    let neg = g.scale(ncc, -F::one());
    g.add_scalar(neg, F::one())
}

/// Dispatches on the configured similarity kind.
pub fn similarity_loss_of<F: Scalar>(
    g: &mut Graph<F>,
    kind: Similarity,
    warped: TensorId,
    fixed: TensorId,
) -> TensorId {
    match kind {
        Similarity::Mse => similarity_loss(g, warped, fixed),
        Similarity::Ncc => ncc_loss(g, warped, fixed),
    }
}

/// Graph composite: mean of squared forward differences of the field over
/// both channels and both spatial directions.
pub fn smoothness_loss<F: Scalar>(g: &mut Graph<F>, field: TensorId) -> TensorId {
    let dr = g.diff_rows(field);
    let dr2 = g.mul(dr, dr);
    let dc = g.diff_cols(field);
    let dc2 = g.mul(dc, dc);
    let n = (g.value(dr2).len() + g.value(dc2).len()) as f64;
    let sr = g.sum_all(dr2);
    let sc = g.sum_all(dc2);
    let total = g.add(sr, sc);
    g.scale(total, F::from_f64(1.0 / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn tiny_cfg() -> RegNetConfig {
        RegNetConfig {
            levels: 2,
            base_channels: 4,
            epochs: 2,
            seed: 3,
            ..RegNetConfig::default()
        }
    }

    #[test]
    fn untrained_net_gives_zero_field() {
        // Zero-initialized head means the identity warp out of the box.
        let net = RegNet::<f32>::new(tiny_cfg()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let a = Array2::from_shape_fn((16, 16), |_| rng.gen_range(-1.0f32..1.0));
        let b = Array2::from_shape_fn((16, 16), |_| rng.gen_range(-1.0f32..1.0));
        let pair = SlicePair::new(a, b).unwrap();
        let field = reg_forward(&net, &pair).unwrap();
        assert!(field.displacements.iter().all(|v| v.is_finite()));
        assert_eq!(field.mean_magnitude(), 0.0);
    }

    #[test]
    fn forward_is_deterministic_given_parameters() {
        let net = RegNet::<f32>::new(tiny_cfg()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let a = Array2::from_shape_fn((16, 16), |_| rng.gen_range(-1.0f32..1.0));
        let b = Array2::from_shape_fn((16, 16), |_| rng.gen_range(-1.0f32..1.0));
        let pair = SlicePair::new(a, b).unwrap();
        let f1 = reg_forward(&net, &pair).unwrap();
        let f2 = reg_forward(&net, &pair).unwrap();
        for (x, y) in f1.displacements.iter().zip(f2.displacements.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn mismatched_pair_is_dimension_error() {
        let a = Array2::<f32>::zeros((8, 8));
        let b = Array2::<f32>::zeros((8, 10));
        assert!(matches!(
            SlicePair::new(a, b),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn graph_losses_match_array_forms() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let (h, w) = (6, 7);
        let warped = Array2::from_shape_fn((h, w), |_| rng.gen_range(-1.0f32..1.0));
        let fixed = Array2::from_shape_fn((h, w), |_| rng.gen_range(-1.0f32..1.0));
        let mut field = warp::DeformationField::zeros(h, w);
        for v in field.displacements.iter_mut() {
            *v = rng.gen_range(-1.5f32..1.5);
        }

        let mut g = Graph::<f64>::new();
        let wa = g.leaf(ArrayD::from_shape_fn(IxDyn(&[1, 1, h, w]), |ix| {
            warped[[ix[2], ix[3]]] as f64
        }));
        let fx = g.leaf(ArrayD::from_shape_fn(IxDyn(&[1, 1, h, w]), |ix| {
            fixed[[ix[2], ix[3]]] as f64
        }));
        let sim = similarity_loss(&mut g, wa, fx);
        let want_sim = warp::similarity_mse(&warped, &fixed).unwrap();
        assert!((g.scalar(sim) - want_sim).abs() < 1e-6);

        let fid = g.leaf(ArrayD::from_shape_fn(IxDyn(&[1, 2, h, w]), |ix| {
            field.displacements[[ix[2], ix[3], ix[1]]] as f64
        }));
        let sm = smoothness_loss(&mut g, fid);
        let want_sm = warp::smoothness(&field);
        assert!((g.scalar(sm) - want_sm).abs() < 1e-6);
    }
}

#[cfg(test)]
mod ncc_tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn tensor_of(img: &Array2<f32>) -> ArrayD<f64> {
        let (h, w) = img.dim();
        ArrayD::from_shape_fn(IxDyn(&[1, 1, h, w]), |ix| img[[ix[2], ix[3]]] as f64)
    }

    #[test]
    fn ncc_of_identical_images_is_near_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let img = Array2::from_shape_fn((8, 8), |_| rng.gen_range(-1.0f32..1.0));
        let mut g = Graph::<f64>::new();
        let a = g.leaf(tensor_of(&img));
        let b = g.leaf(tensor_of(&img));
        let l = ncc_loss(&mut g, a, b);
        assert!(g.scalar(l).abs() < 1e-6, "loss {}", g.scalar(l));
    }

    #[test]
    fn ncc_is_invariant_to_affine_intensity_changes() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let img = Array2::from_shape_fn((8, 8), |_| rng.gen_range(-1.0f32..1.0));
        let scaled = img.mapv(|v| 3.0 * v + 0.7);
        let mut g = Graph::<f64>::new();
        let a = g.leaf(tensor_of(&scaled));
        let b = g.leaf(tensor_of(&img));
        let l = ncc_loss(&mut g, a, b);
        assert!(g.scalar(l).abs() < 1e-6, "loss {}", g.scalar(l));
        // MSE is not invariant, so the switch matters.
        let a2 = g.leaf(tensor_of(&scaled));
        let b2 = g.leaf(tensor_of(&img));
        let m = similarity_loss(&mut g, a2, b2);
        assert!(g.scalar(m) > 0.1);
    }

    #[test]
    fn ncc_training_also_reduces_similarity() {
        // The configured switch is honored end to end.
        let spec = crate::phantom::PhantomSpec {
            noise_sigma: 0.02,
            distractor: None,
            ..crate::phantom::PhantomSpec::tiny(3, 32, 5, 77)
        };
        let volumes: Vec<crate::volume::Volume> = crate::phantom::generate_phantom(&spec)
            .unwrap()
            .into_iter()
            .map(|(v, _)| crate::volume::normalize_intensity(&v))
            .collect();
        let cfg = RegNetConfig {
            levels: 2,
            base_channels: 8,
            epochs: 15,
            similarity: Similarity::Ncc,
            lr: crate::autodiff::LrSchedule {
                base: 1e-3,
                halve_every: 30,
            },
            seed: 5,
            ..RegNetConfig::default()
        };
        let mut net = RegNet::<f32>::new(cfg).unwrap();
        let before = crate::reg::mean_pair_similarity(&net, &volumes).unwrap();
        crate::reg::train_registration(&mut net, &volumes).unwrap();
        let after = crate::reg::mean_pair_similarity(&net, &volumes).unwrap();
        assert!(after < before, "ncc training: {before} -> {after}");
    }
}
