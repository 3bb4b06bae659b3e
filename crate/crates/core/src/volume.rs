//! Volumetric data model: volumes, central-slice annotations, fold splits,
//! intensity normalization, in-plane resampling, and paired augmentation.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// A 3D scalar image: `voxels[slice][row][col]` plus physical spacing
/// `(mm per row, mm per col, mm per slice)`.
#[derive(Debug, Clone)]
pub struct Volume {
    pub id: String,
    pub voxels: Array3<f32>,
    pub spacing: [f32; 3],
}

impl Volume {
    /// Validates basic invariants: at least 3 slices, finite voxels,
    /// strictly positive spacing.
    pub fn new(id: impl Into<String>, voxels: Array3<f32>, spacing: [f32; 3]) -> Result<Self> {
        let (n, h, w) = voxels.dim();
        if n < 3 {
            return Err(Error::Dimension(format!(
                "volume needs at least 3 slices, got {n}"
            )));
        }
        if h < 1 || w < 1 {
            return Err(Error::Dimension(format!("degenerate slice shape {h}x{w}")));
        }
        if spacing.iter().any(|&s| !s.is_finite() || s <= 0.0) {
            return Err(Error::Dimension(format!("invalid spacing {spacing:?}")));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("volume contains non-finite voxels".into()));
        }
        Ok(Self {
            id: id.into(),
            voxels,
            spacing,
        })
    }

    pub fn depth(&self) -> usize {
        self.voxels.dim().0
    }

    pub fn height(&self) -> usize {
        self.voxels.dim().1
    }

    pub fn width(&self) -> usize {
        self.voxels.dim().2
    }

    /// Index of the single manually annotated slice: `floor(N / 2)`,
    /// zero-based (the later-middle slice for even N).
    pub fn central_index(&self) -> usize {
        self.depth() / 2
    }

    pub fn slice(&self, n: usize) -> ArrayView2<'_, f32> {
        self.voxels.index_axis(Axis(0), n)
    }
}

/// The one manual label available per training volume.
#[derive(Debug, Clone)]
pub struct CentralAnnotation {
    pub volume_id: String,
    pub central_index: usize,
    pub mask: Array2<u8>,
}

impl CentralAnnotation {
    /// Checks the annotation against its volume: central index must be
    /// `floor(N/2)`, mask binary and slice-shaped.
    pub fn for_volume(volume: &Volume, mask: Array2<u8>) -> Result<Self> {
        let c = volume.central_index();
        if mask.dim() != (volume.height(), volume.width()) {
            return Err(Error::Dimension(format!(
                "annotation mask {:?} does not match slice shape {}x{}",
                mask.dim(),
                volume.height(),
                volume.width()
            )));
        }
        if mask.iter().any(|&v| v > 1) {
            return Err(Error::Usage("annotation mask must be binary".into()));
        }
        Ok(Self {
            volume_id: volume.id.clone(),
            central_index: c,
            mask,
        })
    }
}

/// Per-volume z-scoring; constant volumes map to all zeros.
pub fn normalize_intensity(v: &Volume) -> Volume {
    let n = v.voxels.len() as f64;
    let mean = v.voxels.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v
        .voxels
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let voxels = if var <= 1e-12 {
        Array3::zeros(v.voxels.dim())
    } else {
        let sd = var.sqrt();
        v.voxels.mapv(|x| ((x as f64 - mean) / sd) as f32)
    };
    Volume {
        id: v.id.clone(),
        voxels,
        spacing: v.spacing,
    }
}

fn check_target(h: usize, w: usize) -> Result<()> {
    if h < 8 || w < 8 {
        return Err(Error::Dimension(format!(
            "resample target {h}x{w} below minimum 8x8"
        )));
    }
    Ok(())
}

/// Bilinear in-plane resampling of every slice; spacing is rescaled so the
/// physical extent of the volume is preserved.
pub fn resample_inplane(v: &Volume, target: (usize, usize)) -> Result<Volume> {
    let (th, tw) = target;
    check_target(th, tw)?;
    let (n, h, w) = v.voxels.dim();
    let mut out = Array3::zeros((n, th, tw));
    let sy = h as f32 / th as f32;
    let sx = w as f32 / tw as f32;
    for k in 0..n {
        let src = v.voxels.index_axis(Axis(0), k);
        let mut dst = out.index_axis_mut(Axis(0), k);
        for r in 0..th {
            let fy = (r as f32 + 0.5) * sy - 0.5;
            for c in 0..tw {
                let fx = (c as f32 + 0.5) * sx - 0.5;
                dst[[r, c]] = bilinear_at(&src, fy, fx);
            }
        }
    }
    Volume::new(
        v.id.clone(),
        out,
        [
            v.spacing[0] * h as f32 / th as f32,
            v.spacing[1] * w as f32 / tw as f32,
            v.spacing[2],
        ],
    )
}

/// Nearest-neighbor counterpart for binary masks (preserves binariness).
pub fn resample_mask_inplane(mask: &Array2<u8>, target: (usize, usize)) -> Result<Array2<u8>> {
    let (th, tw) = target;
    check_target(th, tw)?;
    let (h, w) = mask.dim();
    let sy = h as f32 / th as f32;
    let sx = w as f32 / tw as f32;
    let mut out = Array2::zeros((th, tw));
    for r in 0..th {
        let fy = (r as f32 + 0.5) * sy - 0.5;
        let iy = (fy.round().max(0.0) as usize).min(h - 1);
        for c in 0..tw {
            let fx = (c as f32 + 0.5) * sx - 0.5;
            let ix = (fx.round().max(0.0) as usize).min(w - 1);
            out[[r, c]] = mask[[iy, ix]];
        }
    }
    Ok(out)
}

fn bilinear_at(img: &ArrayView2<'_, f32>, y: f32, x: f32) -> f32 {
    let (h, w) = img.dim();
    let yc = y.clamp(0.0, (h - 1) as f32);
    let xc = x.clamp(0.0, (w - 1) as f32);
    let y0 = yc.floor() as usize;
    let x0 = xc.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ty = yc - y0 as f32;
    let tx = xc - x0 as f32;
    (1.0 - ty) * (1.0 - tx) * img[[y0, x0]]
        + (1.0 - ty) * tx * img[[y0, x1]]
        + ty * (1.0 - tx) * img[[y1, x0]]
        + ty * tx * img[[y1, x1]]
}

/// One joint spatial transform for an (image, mask) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugTransform {
    /// Number of 90-degree counterclockwise rotations, 0..=3.
    pub quarter_turns: u8,
    /// Horizontal flip (applied after rotation).
    pub hflip: bool,
}

impl AugTransform {
    pub const IDENTITY: Self = Self {
        quarter_turns: 0,
        hflip: false,
    };

    /// Rotation uniform over {0, 90, 180, 270} degrees, flip with p = 0.5.
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            quarter_turns: rng.gen_range(0..4u8),
            hflip: rng.gen_bool(0.5),
        }
    }

    pub fn apply<T: Clone + num_traits::Zero>(&self, a: &Array2<T>) -> Array2<T> {
        let mut v = a.view();
        match self.quarter_turns % 4 {
            0 => {}
            1 => {
                v = v.reversed_axes();
                v.invert_axis(Axis(0));
            }
            2 => {
                v.invert_axis(Axis(0));
                v.invert_axis(Axis(1));
            }
            3 => {
                v = v.reversed_axes();
                v.invert_axis(Axis(1));
            }
            _ => unreachable!(),
        }
        let mut out = v.to_owned();
        if self.hflip {
            out.invert_axis(Axis(1));
        }
        out.as_standard_layout().to_owned()
    }
}

/// Applies one randomly sampled transform to both image and mask so the
/// per-pixel correspondence is preserved.
pub fn augment<R: Rng>(
    image: &Array2<f32>,
    mask: &Array2<u8>,
    rng: &mut R,
) -> Result<(Array2<f32>, Array2<u8>)> {
    if image.dim() != mask.dim() {
        return Err(Error::Dimension(format!(
            "augment shapes differ: image {:?} vs mask {:?}",
            image.dim(),
            mask.dim()
        )));
    }
    let t = AugTransform::sample(rng);
    Ok((t.apply(image), t.apply(mask)))
}

/// Assignment of volume ids to cross-validation folds.
#[derive(Debug, Clone)]
pub struct FoldSplit {
    assignment: BTreeMap<String, usize>,
    fold_count: usize,
}

impl FoldSplit {
    pub fn fold_count(&self) -> usize {
        self.fold_count
    }

    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.get(id).copied()
    }

    /// Ids of the given validation fold, in insertion-independent sorted order.
    pub fn validation_ids(&self, fold: usize) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn training_ids(&self, fold: usize) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.assignment.iter().map(|(id, &f)| (id.as_str(), f))
    }
}

/// Deterministic k-fold partition: shuffle ids with the seeded generator,
/// then deal round-robin so fold sizes differ by at most one.
pub fn split_folds(ids: &[String], k: usize, seed: u64) -> Result<FoldSplit> {
    if k == 0 {
        return Err(Error::Usage("fold count must be positive".into()));
    }
    if ids.len() < k {
        return Err(Error::Usage(format!(
            "need at least {k} ids for {k} folds, got {}",
            ids.len()
        )));
    }
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(Error::Usage("duplicate volume ids in fold split".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    // Fisher-Yates on the sorted list keeps the result independent of input order.
    for i in (1..sorted.len()).rev() {
        let j = rng.gen_range(0..=i);
        sorted.swap(i, j);
    }
    let assignment = sorted
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i % k))
        .collect();
    Ok(FoldSplit {
        assignment,
        fold_count: k,
    })
}
