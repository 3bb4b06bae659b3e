//! Final target-network training on the mixed manual + fused label set,
//! the FS-LCS central-slices-only baseline, and volume inference.

use ndarray::{Array2, Array3};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::autodiff::{AdamState, LrSchedule};
use crate::error::{Error, Result};
use crate::labels::{Provenance, PseudoMask};
use crate::loss::SegLossConfig;
use crate::semi::pseudo_labels_of_batch;
use crate::train_common::{batch_images, fit_supervised};
use crate::unet::{seg_forward, UNet};
use crate::volume::{CentralAnnotation, Volume};

/// Which label supervises a slice in the mixed dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetSource {
    Manual,
    Fused,
}

/// One training entry of the final stage.
#[derive(Debug, Clone)]
pub struct MixedEntry {
    pub volume_id: String,
    pub slice_index: usize,
    pub image: Array2<f32>,
    pub target: Array2<u8>,
    pub source: TargetSource,
}

/// Every slice of every training volume exactly once: the central slice
/// with its manual mask, everything else with its fused pseudo label.
#[derive(Debug, Clone, Default)]
pub struct MixedDataset {
    pub entries: Vec<MixedEntry>,
}

impl MixedDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn manual_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.source == TargetSource::Manual)
            .count()
    }
}

/// Final-stage schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initialize from the semi-stage checkpoint instead of a fresh
    /// network (comparison flag; off by default).
    pub warm_start: bool,
    pub lr: LrSchedule,
    pub seed: u64,
}

impl Default for FinalTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4,
            warm_start: false,
            lr: LrSchedule::default(),
            seed: 0,
        }
    }
}

impl FinalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Assembles the mixed dataset, checking that the fused set covers exactly
/// the non-central slices of every volume.
pub fn build_mixed_dataset(
    volumes: &[Volume],
    centrals: &[CentralAnnotation],
    fused: &[PseudoMask],
) -> Result<MixedDataset> {
    build_mixed_dataset_excluding(volumes, centrals, fused, &[])
}

/// Variant honoring fusion-dropped slices: every non-central slice must be
/// covered by the fused set or listed as excluded.
pub fn build_mixed_dataset_excluding(
    volumes: &[Volume],
    centrals: &[CentralAnnotation],
    fused: &[PseudoMask],
    excluded: &[(String, usize)],
) -> Result<MixedDataset> {
    let mut fused_by_key: BTreeMap<(String, usize), &PseudoMask> = BTreeMap::new();
    for f in fused {
        if f.provenance != Provenance::Fused {
            return Err(Error::Usage(format!(
                "mixed dataset expects fused masks, got {} for ({}, {})",
                f.provenance, f.volume_id, f.slice_index
            )));
        }
        if fused_by_key.insert(f.key(), f).is_some() {
            return Err(Error::Pairing(format!(
                "duplicate fused mask for ({}, {})",
                f.volume_id, f.slice_index
            )));
        }
    }
    let mut entries = Vec::new();
    for v in volumes {
        let c = v.central_index();
        let ann = centrals
            .iter()
            .find(|a| a.volume_id == v.id)
            .ok_or_else(|| Error::Pairing(format!("no central annotation for {}", v.id)))?;
        if ann.mask.dim() != (v.height(), v.width()) {
            return Err(Error::Dimension(format!(
                "annotation shape mismatch for {}",
                v.id
            )));
        }
        entries.push(MixedEntry {
            volume_id: v.id.clone(),
            slice_index: c,
            image: v.slice(c).to_owned(),
            target: ann.mask.clone(),
            source: TargetSource::Manual,
        });
        for n in 0..v.depth() {
            if n == c {
                continue;
            }
            if excluded.iter().any(|(id, k)| id == &v.id && *k == n) {
                continue;
            }
            let f = fused_by_key
                .get(&(v.id.clone(), n))
                .ok_or_else(|| {
                    Error::Pairing(format!("fused set is missing ({}, {n})", v.id))
                })?;
            if f.mask.dim() != (v.height(), v.width()) {
                return Err(Error::Dimension(format!(
                    "fused mask shape mismatch for ({}, {n})",
                    v.id
                )));
            }
            entries.push(MixedEntry {
                volume_id: v.id.clone(),
                slice_index: n,
                image: v.slice(n).to_owned(),
                target: f.mask.clone(),
                source: TargetSource::Fused,
            });
        }
    }
    Ok(MixedDataset { entries })
}

fn fit_on(
    net: &mut UNet<f32>,
    samples: Vec<(Array2<f32>, Array2<u8>)>,
    cfg: &FinalTrainConfig,
    loss_cfg: &SegLossConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    rng.set_stream(4);
    let mut adam = AdamState::new(net.params.values());
    fit_supervised(
        net,
        &samples,
        0..cfg.epochs,
        cfg.batch_size,
        loss_cfg,
        &cfg.lr,
        &mut rng,
        &mut adam,
    )
}

/// Trains the final (freshly initialized) network on the mixed dataset.
pub fn train_final(
    net: &mut UNet<f32>,
    ds: &MixedDataset,
    cfg: &FinalTrainConfig,
    loss_cfg: &SegLossConfig,
) -> Result<Vec<f64>> {
    if ds.is_empty() {
        return Err(Error::Usage("mixed dataset is empty".into()));
    }
    let samples = ds
        .entries
        .iter()
        .map(|e| (e.image.clone(), e.target.clone()))
        .collect();
    fit_on(net, samples, cfg, loss_cfg)
}

/// FS-LCS baseline: identical protocol, dataset = central slices only.
pub fn train_fs_lcs(
    net: &mut UNet<f32>,
    volumes: &[Volume],
    centrals: &[CentralAnnotation],
    cfg: &FinalTrainConfig,
    loss_cfg: &SegLossConfig,
) -> Result<Vec<f64>> {
    let labeled = crate::semi::labeled_set(volumes, centrals)?;
    let samples = labeled
        .into_iter()
        .map(|l| (l.image, l.mask))
        .collect::<Vec<_>>();
    if samples.is_empty() {
        return Err(Error::Usage("baseline needs labeled central slices".into()));
    }
    fit_on(net, samples, cfg, loss_cfg)
}

/// Slice-wise forward + argmax, stacked back into a volume-shaped binary
/// mask. No post-processing. Pure: the network is untouched.
pub fn predict_volume(net: &UNet<f32>, volume: &Volume) -> Result<Array3<u8>> {
    let (n, h, w) = volume.voxels.dim();
    let mut out = Array3::<u8>::zeros((n, h, w));
    let slices: Vec<usize> = (0..n).collect();
    for chunk in slices.chunks(8) {
        let images: Vec<Array2<f32>> = chunk.iter().map(|&k| volume.slice(k).to_owned()).collect();
        let refs: Vec<&Array2<f32>> = images.iter().collect();
        let probs = seg_forward(net, &batch_images(&refs))?;
        let masks = pseudo_labels_of_batch(&probs.view());
        for (&k, mask) in chunk.iter().zip(masks) {
            out.index_axis_mut(ndarray::Axis(0), k).assign(&mask);
        }
    }
    Ok(out)
}
