//! Shared batch assembly and the supervised training loop used by the
//! warm-up phase, the final network, and the FS-LCS baseline.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{adam_step, AdamState, Graph, LrSchedule};
use crate::error::{Error, Result};
use crate::loss::{one_hot_target, seg_loss, SegLossConfig};
use crate::unet::UNet;
use crate::volume::AugTransform;

pub(crate) fn batch_images(images: &[&Array2<f32>]) -> ArrayD<f32> {
    let (h, w) = images[0].dim();
    let mut x = ArrayD::<f32>::zeros(IxDyn(&[images.len(), 1, h, w]));
    for (b, img) in images.iter().enumerate() {
        debug_assert_eq!(img.dim(), (h, w));
        for r in 0..h {
            for c in 0..w {
                x[[b, 0, r, c]] = img[[r, c]];
            }
        }
    }
    x
}

pub(crate) fn shuffle_indices<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// One gradient step on an augmented (image, mask) batch. Returns the loss.
pub(crate) fn supervised_step(
    net: &mut UNet<f32>,
    batch: &[(Array2<f32>, Array2<u8>)],
    loss_cfg: &SegLossConfig,
    lr: f32,
    adam: &mut AdamState<f32>,
) -> Result<f64> {
    let images: Vec<&Array2<f32>> = batch.iter().map(|(i, _)| i).collect();
    let masks: Vec<ndarray::ArrayView2<'_, u8>> = batch.iter().map(|(_, m)| m.view()).collect();
    let x = batch_images(&images);
    let target = one_hot_target::<f32>(&masks);

    let mut g = Graph::<f32>::new();
    let xi = g.leaf(x);
    let lease = net.lease(&mut g);
    let probs = net.forward(&mut g, &lease, xi)?;
    let loss = seg_loss(&mut g, probs, &target, loss_cfg)?;
    let loss_val = g.scalar(loss) as f64;
    if !loss_val.is_finite() {
        return Err(Error::Numeric("segmentation loss is not finite".into()));
    }
    g.backward(loss)?;
    let grads = net.grads(&g, &lease);
    adam_step(net.params.values_mut(), &grads, adam, lr);
    Ok(loss_val)
}

/// Standard supervised loop with paired rotation/flip augmentation.
/// `epoch_range` indexes into the learning-rate schedule so later phases
/// keep decaying from where earlier phases left off.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fit_supervised(
    net: &mut UNet<f32>,
    samples: &[(Array2<f32>, Array2<u8>)],
    epoch_range: std::ops::Range<usize>,
    batch_size: usize,
    loss_cfg: &SegLossConfig,
    lr: &LrSchedule,
    rng: &mut ChaCha12Rng,
    adam: &mut AdamState<f32>,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::Usage("batch size must be positive".into()));
    }
    let mut trace = Vec::new();
    for epoch in epoch_range {
        let lr_now = lr.at(epoch) as f32;
        let order = shuffle_indices(samples.len(), rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<(Array2<f32>, Array2<u8>)> = chunk
                .iter()
                .map(|&i| {
                    let t = AugTransform::sample(rng);
                    (t.apply(&samples[i].0), t.apply(&samples[i].1))
                })
                .collect();
            epoch_loss += supervised_step(net, &batch, loss_cfg, lr_now, adam)?;
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
