//! Registration training over adjacent slice pairs and center-out label
//! propagation. Training takes volumes only; the signature has no mask
//! input, which is the self-supervision contract.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::{reg_forward, similarity_loss_of, smoothness_loss, stack_pairs, RegNet, SlicePair};
use crate::autodiff::{adam_step, AdamState, Graph};
use crate::error::{Error, Result};
use crate::labels::{Provenance, PseudoMask};
use crate::volume::{CentralAnnotation, Volume};

/// (volume index, fixed slice, moving slice) — adjacent ordered pairs.
fn adjacent_pairs(volumes: &[Volume]) -> Vec<(usize, usize, usize)> {
    let mut pairs = Vec::new();
    for (vi, v) in volumes.iter().enumerate() {
        for n in 0..v.depth() - 1 {
            pairs.push((vi, n, n + 1));
            pairs.push((vi, n + 1, n));
        }
    }
    pairs
}

fn pair_of(volumes: &[Volume], key: (usize, usize, usize)) -> SlicePair {
    let (vi, f, m) = key;
    SlicePair {
        fixed: volumes[vi].slice(f).to_owned(),
        moving: volumes[vi].slice(m).to_owned(),
    }
}

fn moving_batch(pairs: &[&SlicePair]) -> ArrayD<f32> {
    let (h, w) = pairs[0].moving.dim();
    let mut x = ArrayD::<f32>::zeros(IxDyn(&[pairs.len(), 1, h, w]));
    for (b, p) in pairs.iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                x[[b, 0, r, c]] = p.moving[[r, c]];
            }
        }
    }
    x
}

fn fixed_batch(pairs: &[&SlicePair]) -> ArrayD<f32> {
    let (h, w) = pairs[0].fixed.dim();
    let mut x = ArrayD::<f32>::zeros(IxDyn(&[pairs.len(), 1, h, w]));
    for (b, p) in pairs.iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                x[[b, 0, r, c]] = p.fixed[[r, c]];
            }
        }
    }
    x
}

/// Minimizes `similarity(warp(M, field), F) + lambda_s * smoothness(field)`
/// over all adjacent ordered pairs of the given volumes. Returns the
/// per-epoch mean loss trace.
pub fn train_registration(net: &mut RegNet<f32>, volumes: &[Volume]) -> Result<Vec<f64>> {
    if volumes.is_empty() {
        return Err(Error::Usage("registration needs at least one volume".into()));
    }
    let cfg = net.cfg.clone();
    let keys = adjacent_pairs(volumes);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut state = AdamState::<f32>::new(net.params.values());
    let lambda = cfg.smoothness_weight as f32;
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..keys.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.at(epoch) as f32;
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0f64;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let pairs: Vec<SlicePair> = chunk.iter().map(|&i| pair_of(volumes, keys[i])).collect();
            let refs: Vec<&SlicePair> = pairs.iter().collect();
            let mut g = Graph::<f32>::new();
            let x = g.leaf(stack_pairs::<f32>(&refs));
            let lease = net.lease(&mut g);
            let field = net.forward(&mut g, &lease, x)?;
            let moving = g.leaf(moving_batch(&refs));
            let warped = g.warp(moving, field)?;
            let fixed = g.leaf(fixed_batch(&refs));
            let sim = similarity_loss_of(&mut g, cfg.similarity, warped, fixed);
            let smooth = smoothness_loss(&mut g, field);
            let weighted = g.scale(smooth, lambda);
            let loss = g.add(sim, weighted);
            let loss_val = g.scalar(loss) as f64;
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "registration loss diverged at epoch {epoch}"
                )));
            }
            g.backward(loss)?;
            let grads: Vec<ArrayD<f32>> = lease
                .ids
                .iter()
                .map(|&id| {
                    g.grad(id)
                        .cloned()
                        .unwrap_or_else(|| ArrayD::zeros(g.value(id).raw_dim()))
                })
                .collect();
            adam_step(net.params.values_mut(), &grads, &mut state, lr);
            epoch_loss += loss_val;
            steps += 1;
        }
        if !net.params.all_finite() {
            return Err(Error::Numeric(format!(
                "registration parameters diverged at epoch {epoch}"
            )));
        }
        trace.push(epoch_loss / steps.max(1) as f64);
    }
    Ok(trace)
}

/// Mean similarity loss over all adjacent pairs with the current network
/// (diagnostic; used to compare pre/post-training registration quality).
pub fn mean_pair_similarity(net: &RegNet<f32>, volumes: &[Volume]) -> Result<f64> {
    let keys = adjacent_pairs(volumes);
    let mut acc = 0.0;
    for key in &keys {
        let pair = pair_of(volumes, *key);
        let field = reg_forward(net, &pair)?;
        let warped = super::warp_bilinear(&pair.moving, &field)?;
        acc += super::warp::similarity_mse(&warped, &pair.fixed)?;
    }
    Ok(acc / keys.len() as f64)
}

/// Center-out chained propagation: the labeled slice is the moving slice,
/// its unlabeled neighbor the fixed slice; the warped label lands on the
/// fixed slice's grid and becomes the next moving label.
pub fn propagate_labels(
    net: &RegNet<f32>,
    volume: &Volume,
    central: &CentralAnnotation,
) -> Result<Vec<PseudoMask>> {
    let c = volume.central_index();
    if central.volume_id != volume.id {
        return Err(Error::Pairing(format!(
            "annotation for {} does not match volume {}",
            central.volume_id, volume.id
        )));
    }
    if central.central_index != c {
        return Err(Error::Usage(format!(
            "central index {} does not equal floor(N/2) = {c}",
            central.central_index
        )));
    }
    if central.mask.dim() != (volume.height(), volume.width()) {
        return Err(Error::Dimension("annotation mask shape mismatch".into()));
    }
    let mut out = Vec::with_capacity(volume.depth() - 1);
    let mut propagate = |range: Box<dyn Iterator<Item = usize>>, step: isize| -> Result<()> {
        let mut cur = central.mask.clone();
        for n in range {
            let neighbor = (n as isize - step) as usize; // already-labeled side
            let pair = SlicePair {
                fixed: volume.slice(n).to_owned(),
                moving: volume.slice(neighbor).to_owned(),
            };
            let field = reg_forward(net, &pair)?;
            cur = super::warp_label(&cur, &field)?;
            out.push(PseudoMask::new(
                volume.id.clone(),
                n,
                cur.clone(),
                Provenance::Ssl,
            )?);
        }
        Ok(())
    };
    propagate(Box::new(c + 1..volume.depth()), 1)?;
    propagate(Box::new((0..c).rev()), -1)?;
    out.sort_by_key(|m| m.slice_index);
    Ok(out)
}

/// Self-labeled pairs (F = M) for sanity runs: registering a slice to
/// itself should keep the field near zero.
pub fn self_pairs(volume: &Volume) -> Vec<SlicePair> {
    (0..volume.depth())
        .map(|n| {
            let s = volume.slice(n).to_owned();
            SlicePair {
                fixed: s.clone(),
                moving: s,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use crate::reg::RegNetConfig;
    use crate::volume::Volume;
    use ndarray::Array3;

    fn constant_volume() -> Volume {
        let mut voxels = Array3::zeros((5, 16, 16));
        for k in 0..5 {
            for r in 4..12 {
                for c in 4..12 {
                    voxels[[k, r, c]] = 1.0;
                }
            }
        }
        Volume::new("const", voxels, [1.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn pair_enumeration_counts_ordered_adjacent() {
        let v = constant_volume();
        let pairs = adjacent_pairs(std::slice::from_ref(&v));
        assert_eq!(pairs.len(), 2 * (5 - 1));
    }

    #[test]
    fn propagation_emits_one_mask_per_noncentral_slice() {
        let cfg = RegNetConfig {
            levels: 2,
            base_channels: 4,
            seed: 1,
            ..RegNetConfig::default()
        };
        let net = RegNet::<f32>::new(cfg).unwrap();
        let v = constant_volume();
        let mask = Array2::from_shape_fn((16, 16), |(r, c)| {
            u8::from((4..12).contains(&r) && (4..12).contains(&c))
        });
        let central = CentralAnnotation::for_volume(&v, mask).unwrap();
        let out = propagate_labels(&net, &v, &central).unwrap();
        assert_eq!(out.len(), 4);
        let slices: Vec<usize> = out.iter().map(|m| m.slice_index).collect();
        assert_eq!(slices, vec![0, 1, 3, 4]);
        assert!(out.iter().all(|m| m.provenance == Provenance::Ssl));
    }

    #[test]
    fn three_slice_volume_yields_two_masks_at_neighbors() {
        let cfg = RegNetConfig {
            levels: 2,
            base_channels: 4,
            seed : 2,
            ..RegNetConfig::default()
        };
        let net = RegNet::<f32>::new(cfg).unwrap();
        let mut voxels = Array3::zeros((3, 16, 16));
        voxels[[1, 8, 8]] = 1.0;
        let v = Volume::new("tri", voxels, [1.0, 1.0, 1.0]).unwrap();
        let mask = Array2::from_shape_fn((16, 16), |(r, c)| u8::from(r == 8 && c == 8));
        let central = CentralAnnotation::for_volume(&v, mask).unwrap();
        let out = propagate_labels(&net, &v, &central).unwrap();
        let slices: Vec<usize> = out.iter().map(|m| m.slice_index).collect();
        assert_eq!(slices, vec![0, 2]);
    }
}
