//! Semi-supervised pseudo labeling: supervised warm-up on the labeled
//! central slices, then joint training where every step regenerates argmax
//! pseudo labels for the unlabeled slices from the current network before
//! the gradient update. No gradient flows through target creation.

use ndarray::{Array2, ArrayView3, ArrayViewD};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Graph, LrSchedule};
use crate::error::{Error, Result};
use crate::labels::{Provenance, PseudoMask};
use crate::loss::{one_hot_target, seg_loss, SegLossConfig};
use crate::train_common::{batch_images, fit_supervised, shuffle_indices};
use crate::unet::{seg_forward, UNet};
use crate::volume::{AugTransform, CentralAnnotation, Volume};

/// Schedule of the semi-supervised stage. Warm-up epochs count toward the
/// total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemiTrainConfig {
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    /// Weight of the unlabeled loss term after warm-up.
    pub unlabeled_weight: f64,
    /// When positive, the unlabeled weight ramps linearly from
    /// `unlabeled_weight / ramp` at the first joint epoch up to the full
    /// value over this many epochs. 0 keeps the weight constant (default).
    pub unlabeled_ramp_epochs: usize,
    pub lr: LrSchedule,
    pub seed: u64,
}

impl Default for SemiTrainConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 50,
            total_epochs: 100,
            batch_size: 4,
            unlabeled_weight: 1.0,
            unlabeled_ramp_epochs: 0,
            lr: LrSchedule::default(),
            seed: 0,
        }
    }
}

impl SemiTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "warm-up epochs {} exceed total {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.unlabeled_weight < 0.0 {
            return Err(Error::Config("unlabeled weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// A manually labeled central slice.
#[derive(Debug, Clone)]
pub struct LabeledSlice {
    pub volume_id: String,
    pub slice_index: usize,
    pub image: Array2<f32>,
    pub mask: Array2<u8>,
}

/// An unlabeled (non-central) slice of a training volume.
#[derive(Debug, Clone)]
pub struct UnlabeledSlice {
    pub volume_id: String,
    pub slice_index: usize,
    pub image: Array2<f32>,
}

/// Pairs volumes with their central annotations into the labeled set D_L.
pub fn labeled_set(
    volumes: &[Volume],
    centrals: &[CentralAnnotation],
) -> Result<Vec<LabeledSlice>> {
    let mut out = Vec::with_capacity(volumes.len());
    for v in volumes {
        let ann = centrals
            .iter()
            .find(|a| a.volume_id == v.id)
            .ok_or_else(|| Error::Pairing(format!("no central annotation for {}", v.id)))?;
        let c = v.central_index();
        if ann.central_index != c {
            return Err(Error::Usage(format!(
                "annotation of {} is at slice {}, central is {c}",
                v.id, ann.central_index
            )));
        }
        if ann.mask.dim() != (v.height(), v.width()) {
            return Err(Error::Dimension(format!(
                "annotation shape mismatch for {}",
                v.id
            )));
        }
        out.push(LabeledSlice {
            volume_id: v.id.clone(),
            slice_index: c,
            image: v.slice(c).to_owned(),
            mask: ann.mask.clone(),
        });
    }
    Ok(out)
}

/// Every non-central slice of every volume.
pub fn unlabeled_set(volumes: &[Volume]) -> Vec<UnlabeledSlice> {
    let mut out = Vec::new();
    for v in volumes {
        let c = v.central_index();
        for n in 0..v.depth() {
            if n != c {
                out.push(UnlabeledSlice {
                    volume_id: v.id.clone(),
                    slice_index: n,
                    image: v.slice(n).to_owned(),
                });
            }
        }
    }
    out
}

/// Argmax over classes, per pixel; ties resolve to the lower class index,
/// so an exactly balanced pixel stays background. Returns the binary
/// foreground mask (class != 0).
pub fn pseudo_label(probs: &ArrayView3<'_, f32>) -> Array2<u8> {
    let (k, h, w) = probs.dim();
    let mut mask = Array2::<u8>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut best_k = 0usize;
            let mut best_p = probs[[0, r, c]];
            for ki in 1..k {
                let p = probs[[ki, r, c]];
                if p > best_p {
                    best_p = p;
                    best_k = ki;
                }
            }
            mask[[r, c]] = u8::from(best_k != 0);
        }
    }
    mask
}

/// Per-batch-item pseudo labels from an (N, K, H, W) probability tensor.
pub(crate) fn pseudo_labels_of_batch(probs: &ArrayViewD<'_, f32>) -> Vec<Array2<u8>> {
    let p4 = probs.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    (0..p4.dim().0)
        .map(|b| pseudo_label(&p4.index_axis(ndarray::Axis(0), b)))
        .collect()
}

/// Supervised warm-up on the labeled central slices (epochs
/// `0..warmup_epochs` of the schedule). Returns the per-epoch mean loss.
pub fn warmup_train(
    net: &mut UNet<f32>,
    labeled: &[LabeledSlice],
    cfg: &SemiTrainConfig,
    loss_cfg: &SegLossConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::Usage("warm-up needs a non-empty labeled set".into()));
    }
    if cfg.warmup_epochs == 0 {
        return Ok(Vec::new());
    }
    let samples: Vec<(Array2<f32>, Array2<u8>)> = labeled
        .iter()
        .map(|l| (l.image.clone(), l.mask.clone()))
        .collect();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = AdamState::new(net.params.values());
    fit_supervised(
        net,
        &samples,
        0..cfg.warmup_epochs,
        cfg.batch_size,
        loss_cfg,
        &cfg.lr,
        &mut rng,
        &mut adam,
    )
}

/// Joint phase (epochs `warmup_epochs..total_epochs`): each batch holds
/// labeled and unlabeled slices; immediately before the gradient step the
/// unlabeled targets are recomputed from the current network, and the same
/// loss form applies to both parts, the unlabeled one weighted by
/// `unlabeled_weight`.
pub fn semi_train(
    net: &mut UNet<f32>,
    labeled: &[LabeledSlice],
    unlabeled: &[UnlabeledSlice],
    cfg: &SemiTrainConfig,
    loss_cfg: &SegLossConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::Usage("semi-training needs labeled slices".into()));
    }
    let mut rng_l = ChaCha12Rng::seed_from_u64(cfg.seed);
    rng_l.set_stream(2);
    let mut rng_u = ChaCha12Rng::seed_from_u64(cfg.seed);
    rng_u.set_stream(3);
    let mut adam = AdamState::new(net.params.values());

    let use_unlabeled = !unlabeled.is_empty() && cfg.unlabeled_weight > 0.0;
    if !use_unlabeled {
        // Ablation path: identical to continuing supervised training.
        let samples: Vec<(Array2<f32>, Array2<u8>)> = labeled
            .iter()
            .map(|l| (l.image.clone(), l.mask.clone()))
            .collect();
        return fit_supervised(
            net,
            &samples,
            cfg.warmup_epochs..cfg.total_epochs,
            cfg.batch_size,
            loss_cfg,
            &cfg.lr,
            &mut rng_l,
            &mut adam,
        );
    }

    let per_batch_unlabeled = (cfg.batch_size / 2).max(1);
    let per_batch_labeled = (cfg.batch_size - per_batch_unlabeled).max(1);
    let lambda_at = |epoch: usize| -> f32 {
        let full = cfg.unlabeled_weight as f32;
        if cfg.unlabeled_ramp_epochs == 0 {
            return full;
        }
        let done = (epoch - cfg.warmup_epochs + 1) as f32;
        full * (done / cfg.unlabeled_ramp_epochs as f32).min(1.0)
    };

    // Labeled slices cycle with reshuffles while one epoch sweeps the
    // unlabeled pool once.
    let mut labeled_order = shuffle_indices(labeled.len(), &mut rng_l);
    let mut labeled_pos = 0usize;
    let mut trace = Vec::new();
    for epoch in cfg.warmup_epochs..cfg.total_epochs {
        let lr_now = cfg.lr.at(epoch) as f32;
        let lambda_u = lambda_at(epoch);
        let unlabeled_order = shuffle_indices(unlabeled.len(), &mut rng_u);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for uchunk in unlabeled_order.chunks(per_batch_unlabeled) {
            let labeled_batch: Vec<(Array2<f32>, Array2<u8>)> = (0..per_batch_labeled)
                .map(|_| {
                    if labeled_pos >= labeled_order.len() {
                        labeled_order = shuffle_indices(labeled.len(), &mut rng_l);
                        labeled_pos = 0;
                    }
                    let l = &labeled[labeled_order[labeled_pos]];
                    labeled_pos += 1;
                    let t = AugTransform::sample(&mut rng_l);
                    (t.apply(&l.image), t.apply(&l.mask))
                })
                .collect();
            let unlabeled_batch: Vec<Array2<f32>> = uchunk
                .iter()
                .map(|&i| {
                    let t = AugTransform::sample(&mut rng_u);
                    t.apply(&unlabeled[i].image)
                })
                .collect();

            let loss_val = semi_step(
                net,
                &labeled_batch,
                &unlabeled_batch,
                lambda_u,
                loss_cfg,
                lr_now,
                &mut adam,
            )?;
            epoch_loss += loss_val;
            steps += 1;
        }
        if !net.params.all_finite() {
            return Err(Error::Numeric(format!(
                "parameters diverged at epoch {epoch}"
            )));
        }
        trace.push(epoch_loss / steps.max(1) as f64);
    }
    Ok(trace)
}

fn semi_step(
    net: &mut UNet<f32>,
    labeled_batch: &[(Array2<f32>, Array2<u8>)],
    unlabeled_batch: &[Array2<f32>],
    lambda_u: f32,
    loss_cfg: &SegLossConfig,
    lr: f32,
    adam: &mut AdamState<f32>,
) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let lease = net.lease(&mut g);

    let l_images: Vec<&Array2<f32>> = labeled_batch.iter().map(|(i, _)| i).collect();
    let l_masks: Vec<ndarray::ArrayView2<'_, u8>> =
        labeled_batch.iter().map(|(_, m)| m.view()).collect();
    let xl = g.leaf(batch_images(&l_images));
    let probs_l = net.forward(&mut g, &lease, xl)?;
    let target_l = one_hot_target::<f32>(&l_masks);
    let loss_l = seg_loss(&mut g, probs_l, &target_l, loss_cfg)?;

    let u_images: Vec<&Array2<f32>> = unlabeled_batch.iter().collect();
    let xu = g.leaf(batch_images(&u_images));
    let probs_u = net.forward(&mut g, &lease, xu)?;
    // Targets from the current prediction; argmax detaches them from the
    // graph, so no gradient flows through label creation.
    let targets_u = pseudo_labels_of_batch(&g.value(probs_u).view());
    let target_views: Vec<ndarray::ArrayView2<'_, u8>> =
        targets_u.iter().map(|t| t.view()).collect();
    let target_u = one_hot_target::<f32>(&target_views);
    let loss_u = seg_loss(&mut g, probs_u, &target_u, loss_cfg)?;

    let weighted = g.scale(loss_u, lambda_u);
    let loss = g.add(loss_l, weighted);
    let loss_val = g.scalar(loss) as f64;
    if !loss_val.is_finite() {
        return Err(Error::Numeric("semi-supervised loss is not finite".into()));
    }
    g.backward(loss)?;
    let grads = net.grads(&g, &lease);
    crate::autodiff::adam_step(net.params.values_mut(), &grads, adam, lr);
    Ok(loss_val)
}

/// One pseudo mask (provenance `semi`) per non-central slice of every
/// volume: exactly `pseudo_label(seg_forward(..))` per slice.
pub fn emit_semi_labels(net: &UNet<f32>, volumes: &[Volume]) -> Result<Vec<PseudoMask>> {
    let mut out = Vec::new();
    for v in volumes {
        let c = v.central_index();
        let slices: Vec<usize> = (0..v.depth()).filter(|&n| n != c).collect();
        for chunk in slices.chunks(8) {
            let images: Vec<Array2<f32>> =
                chunk.iter().map(|&n| v.slice(n).to_owned()).collect();
            let refs: Vec<&Array2<f32>> = images.iter().collect();
            let probs = seg_forward(net, &batch_images(&refs))?;
            let masks = pseudo_labels_of_batch(&probs.view());
            for (&n, mask) in chunk.iter().zip(masks) {
                out.push(PseudoMask::new(v.id.clone(), n, mask, Provenance::Semi)?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    #[test]
    fn pseudo_label_prefers_higher_probability() {
        let mut probs = Array3::<f32>::zeros((2, 2, 2));
        probs[[0, 0, 0]] = 0.3;
        probs[[1, 0, 0]] = 0.7;
        probs[[0, 0, 1]] = 0.9;
        probs[[1, 0, 1]] = 0.1;
        probs[[0, 1, 0]] = 0.5;
        probs[[1, 1, 0]] = 0.5; // tie -> background
        probs[[0, 1, 1]] = 0.2;
        probs[[1, 1, 1]] = 0.8;
        let m = pseudo_label(&probs.view());
        assert_eq!(m[[0, 0]], 1);
        assert_eq!(m[[0, 1]], 0);
        assert_eq!(m[[1, 0]], 0);
        assert_eq!(m[[1, 1]], 1);
    }

    #[test]
    fn pseudo_label_matches_argmax_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (h, w) = (rng.gen_range(2..7usize), rng.gen_range(2..7usize));
            let mut probs = Array3::<f32>::zeros((2, h, w));
            for r in 0..h {
                for c in 0..w {
                    let p: f32 = rng.gen_range(0.0..1.0);
                    probs[[0, r, c]] = 1.0 - p;
                    probs[[1, r, c]] = p;
                }
            }
            let m = pseudo_label(&probs.view());
            for r in 0..h {
                for c in 0..w {
                    let expect = u8::from(probs[[1, r, c]] > probs[[0, r, c]]);
                    assert_eq!(m[[r, c]], expect);
                }
            }
        }
    }

    #[test]
    fn pseudo_label_invariant_under_rank_preserving_rescale() {
        // Squaring and renormalizing preserves the per-pixel ranking.
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let (h, w) = (6, 6);
        let mut probs = Array3::<f32>::zeros((2, h, w));
        for r in 0..h {
            for c in 0..w {
                let p: f32 = rng.gen_range(0.01..0.99);
                probs[[0, r, c]] = 1.0 - p;
                probs[[1, r, c]] = p;
            }
        }
        let mut squared = probs.clone();
        for r in 0..h {
            for c in 0..w {
                let a = probs[[0, r, c]] * probs[[0, r, c]];
                let b = probs[[1, r, c]] * probs[[1, r, c]];
                squared[[0, r, c]] = a / (a + b);
                squared[[1, r, c]] = b / (a + b);
            }
        }
        assert_eq!(
            pseudo_label(&probs.view()),
            pseudo_label(&squared.view())
        );
    }

    #[test]
    fn one_hot_property_of_pseudo_labels() {
        // Exactly one class selected per pixel: foreground + background
        // indicators sum to one by construction of the binary mask.
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut probs = Array3::<f32>::zeros((2, 4, 4));
        for r in 0..4 {
            for c in 0..4 {
                let p: f32 = rng.gen_range(0.0..1.0);
                probs[[0, r, c]] = 1.0 - p;
                probs[[1, r, c]] = p;
            }
        }
        let m = pseudo_label(&probs.view());
        assert!(m.iter().all(|&v| v == 0 || v == 1));
    }

    #[test]
    fn targets_follow_current_parameters() {
        // Regeneration freshness: perturbing the parameters changes the
        // generated targets for the same inputs.
        use crate::unet::{UNet, UNetConfig};
        let cfg = UNetConfig {
            depth: 2,
            base_channels: 4,
            in_channels: 1,
            classes: 2,
        };
        let mut net = UNet::<f32>::new(cfg, 11).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let img = Array2::from_shape_fn((16, 16), |_| rng.gen_range(-1.0f32..1.0));
        let x = batch_images(&[&img]);
        let probs = seg_forward(&net, &x).unwrap();
        let t1 = pseudo_labels_of_batch(&probs.view());
        let probs_again = seg_forward(&net, &x).unwrap();
        let t_same = pseudo_labels_of_batch(&probs_again.view());
        assert_eq!(t1, t_same);
        // Push the head bias hard toward foreground.
        let head_b = net.params.len() - 1;
        net.params.values_mut()[head_b][[1]] = 25.0;
        let probs2 = seg_forward(&net, &x).unwrap();
        let t2 = pseudo_labels_of_batch(&probs2.view());
        assert_ne!(t1, t2);
        assert!(t2[0].iter().all(|&v| v == 1));
    }

    #[test]
    fn unlabeled_set_skips_central_slice() {
        let voxels = Array3::from_shape_fn((9, 8, 8), |(n, r, c)| (n + r + c) as f32);
        let v = Volume::new("v0", voxels, [1.0, 1.0, 1.0]).unwrap();
        let u = unlabeled_set(std::slice::from_ref(&v));
        assert_eq!(u.len(), 8);
        assert!(u.iter().all(|s| s.slice_index != 4));
    }

    #[test]
    fn warmup_rejects_empty_labeled_set() {
        let mut net = UNet::<f32>::new(
            crate::unet::UNetConfig {
                depth: 2,
                base_channels: 2,
                in_channels: 1,
                classes: 2,
            },
            0,
        )
        .unwrap();
        let cfg = SemiTrainConfig::default();
        assert!(matches!(
            warmup_train(&mut net, &[], &cfg, &SegLossConfig::default()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn zero_warmup_epochs_leaves_net_unchanged() {
        let cfg_net = crate::unet::UNetConfig {
            depth: 2,
            base_channels: 2,
            in_channels: 1,
            classes: 2,
        };
        let mut net = UNet::<f32>::new(cfg_net, 1).unwrap();
        let before = net.params.content_hash();
        let labeled = vec![LabeledSlice {
            volume_id: "v".into(),
            slice_index: 2,
            image: Array2::zeros((8, 8)),
            mask: Array2::zeros((8, 8)),
        }];
        let cfg = SemiTrainConfig {
            warmup_epochs: 0,
            total_epochs: 0,
            ..SemiTrainConfig::default()
        };
        let trace = warmup_train(&mut net, &labeled, &cfg, &SegLossConfig::default()).unwrap();
        assert!(trace.is_empty());
        assert_eq!(net.params.content_hash(), before);
    }
}
