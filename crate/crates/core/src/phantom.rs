//! Synthetic phantom dataset: per-slice elliptical foreground with bounded
//! slice-to-slice drift, an optional off-center distractor structure, and
//! additive Gaussian noise. Ground-truth masks are exact by construction.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Closed sampling interval; non-degenerate (`lo < hi`).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Interval {
    pub lo: f32,
    pub hi: f32,
}

impl Interval {
    pub fn new(lo: f32, hi: f32) -> Self {
        Self { lo, hi }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f32 {
        self.lo + (self.hi - self.lo) * rng.gen::<f32>()
    }

    fn valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi
    }
}

/// A secondary bright structure that never appears near the central slice.
/// Because it is unlabeled at the center, a model trained on central slices
/// alone has never seen it as background.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DistractorSpec {
    pub radius_px: Interval,
    pub contrast: Interval,
    /// The distractor is absent on slices with |n - c| <= clear_slices.
    pub clear_slices: usize,
}

impl Default for DistractorSpec {
    fn default() -> Self {
        Self {
            radius_px: Interval::new(10.0, 16.0),
            contrast: Interval::new(0.6, 0.75),
            clear_slices: 1,
        }
    }
}

/// Generator parameters for one phantom dataset.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    /// Main ellipse center, as a fraction of (H, W).
    pub center_frac: Interval,
    /// Main ellipse semi-axes in pixels.
    pub radius_px: Interval,
    /// Foreground intensity above background.
    pub contrast: Interval,
    /// Cross-section shrink factor at the outermost slices (0 = cylinder).
    pub pole_shrink: f32,
    /// Maximum per-slice center shift in pixels (deformation amplitude).
    pub drift_px: f32,
    pub noise_sigma: f32,
    pub distractor: Option<DistractorSpec>,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            count: 20,
            height: 128,
            width: 128,
            depth: 9,
            center_frac: Interval::new(0.40, 0.60),
            radius_px: Interval::new(16.0, 26.0),
            contrast: Interval::new(0.9, 1.1),
            pole_shrink: 0.35,
            drift_px: 2.0,
            noise_sigma: 0.08,
            distractor: Some(DistractorSpec::default()),
            seed: 7,
        }
    }
}

impl PhantomSpec {
    /// A small, fast variant for unit tests and smoke runs.
    pub fn tiny(count: usize, hw: usize, depth: usize, seed: u64) -> Self {
        Self {
            count,
            height: hw,
            width: hw,
            depth,
            center_frac: Interval::new(0.40, 0.60),
            radius_px: Interval::new(hw as f32 * 0.14, hw as f32 * 0.22),
            drift_px: 1.0,
            distractor: Some(DistractorSpec {
                radius_px: Interval::new(hw as f32 * 0.08, hw as f32 * 0.12),
                ..DistractorSpec::default()
            }),
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("phantom count must be positive".into()));
        }
        if self.depth < 3 || self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "phantom shape {}x{}x{} below minimum 8x8x3",
                self.height, self.width, self.depth
            )));
        }
        for (name, iv) in [
            ("center_frac", &self.center_frac),
            ("radius_px", &self.radius_px),
            ("contrast", &self.contrast),
        ] {
            if !iv.valid() {
                return Err(Error::Config(format!("degenerate {name} range")));
            }
        }
        let max_r = self.radius_px.hi;
        if max_r > self.height as f32 / 2.0 || max_r > self.width as f32 / 2.0 {
            return Err(Error::Config(format!(
                "radius bound {max_r} exceeds half extent of {}x{}",
                self.height, self.width
            )));
        }
        if let Some(d) = &self.distractor {
            if !d.radius_px.valid() || !d.contrast.valid() {
                return Err(Error::Config("degenerate distractor range".into()));
            }
            if d.radius_px.hi > self.height as f32 / 2.0 || d.radius_px.hi > self.width as f32 / 2.0
            {
                return Err(Error::Config(
                    "distractor radius exceeds half extent".into(),
                ));
            }
        }
        if self.pole_shrink < 0.0 || self.pole_shrink >= 1.0 {
            return Err(Error::Config("pole_shrink must be in [0, 1)".into()));
        }
        if self.drift_px < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Config("negative drift or noise".into()));
        }
        Ok(())
    }
}

struct EllipseTrack {
    centers: Vec<(f32, f32)>,
    radii: Vec<(f32, f32)>,
}

fn paint_ellipse(buf: &mut Array2<f32>, center: (f32, f32), radii: (f32, f32), value: f32) {
    let (h, w) = buf.dim();
    let r0 = ((center.0 - radii.0).floor().max(0.0)) as usize;
    let r1 = ((center.0 + radii.0).ceil() as usize).min(h - 1);
    let c0 = ((center.1 - radii.1).floor().max(0.0)) as usize;
    let c1 = ((center.1 + radii.1).ceil() as usize).min(w - 1);
    for r in r0..=r1 {
        let dy = (r as f32 - center.0) / radii.0;
        for c in c0..=c1 {
            let dx = (c as f32 - center.1) / radii.1;
            if dy * dy + dx * dx <= 1.0 {
                buf[[r, c]] = value;
            }
        }
    }
}

fn drift_track<R: Rng>(
    spec: &PhantomSpec,
    rng: &mut R,
    base_center: (f32, f32),
    base_radii: (f32, f32),
    min_radius: f32,
) -> EllipseTrack {
    let n = spec.depth;
    let c = n / 2;
    // Random walk out from the central slice, one bounded step per slice.
    let mut steps_up: Vec<(f32, f32)> = Vec::new();
    for _ in 0..(n - 1 - c) {
        steps_up.push((
            rng.gen_range(-spec.drift_px..=spec.drift_px),
            rng.gen_range(-spec.drift_px..=spec.drift_px),
        ));
    }
    let mut steps_down: Vec<(f32, f32)> = Vec::new();
    for _ in 0..c {
        steps_down.push((
            rng.gen_range(-spec.drift_px..=spec.drift_px),
            rng.gen_range(-spec.drift_px..=spec.drift_px),
        ));
    }
    let half = c.max(n - 1 - c) as f32;
    let margin = 2.0;
    // Degenerate ranges (ellipse barely fits) pin the center mid-canvas.
    let clamp1 = |x: f32, lo: f32, hi: f32, fallback: f32| {
        if lo <= hi {
            x.clamp(lo, hi)
        } else {
            fallback
        }
    };
    let clamp_center = move |p: (f32, f32), radii: (f32, f32)| -> (f32, f32) {
        (
            clamp1(
                p.0,
                radii.0 + margin,
                spec.height as f32 - 1.0 - radii.0 - margin,
                (spec.height as f32 - 1.0) / 2.0,
            ),
            clamp1(
                p.1,
                radii.1 + margin,
                spec.width as f32 - 1.0 - radii.1 - margin,
                (spec.width as f32 - 1.0) / 2.0,
            ),
        )
    };
    let mut centers = vec![(0.0f32, 0.0f32); n];
    let mut radii = vec![(0.0f32, 0.0f32); n];
    for k in 0..n {
        let t = (k as f32 - c as f32) / half.max(1.0);
        let scale = 1.0 - spec.pole_shrink * t * t;
        radii[k] = (
            (base_radii.0 * scale).max(min_radius),
            (base_radii.1 * scale).max(min_radius),
        );
    }
    centers[c] = clamp_center(base_center, radii[c]);
    for (i, step) in steps_up.iter().enumerate() {
        let k = c + 1 + i;
        let prev = centers[k - 1];
        centers[k] = clamp_center((prev.0 + step.0, prev.1 + step.1), radii[k]);
    }
    for (i, step) in steps_down.iter().enumerate() {
        let k = c - 1 - i;
        let prev = centers[k + 1];
        centers[k] = clamp_center((prev.0 + step.0, prev.1 + step.1), radii[k]);
    }
    EllipseTrack { centers, radii }
}

/// Generates `spec.count` volumes with exact full ground-truth masks.
/// Byte-identical across runs for a fixed seed.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Vec<(Volume, Array3<u8>)>> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0f64, spec.noise_sigma as f64).expect("validated sigma"))
    } else {
        None
    };
    let (h, w, n) = (spec.height, spec.width, spec.depth);
    let mut out = Vec::with_capacity(spec.count);
    for v_idx in 0..spec.count {
        let base_center = (
            spec.center_frac.sample(&mut rng) * h as f32,
            spec.center_frac.sample(&mut rng) * w as f32,
        );
        let base_radii = (spec.radius_px.sample(&mut rng), spec.radius_px.sample(&mut rng));
        let contrast = spec.contrast.sample(&mut rng);
        let main = drift_track(spec, &mut rng, base_center, base_radii, 3.0);

        let distractor = spec.distractor.as_ref().map(|d| {
            let dr = (d.radius_px.sample(&mut rng), d.radius_px.sample(&mut rng));
            let d_contrast = d.contrast.sample(&mut rng);
            // Place the distractor away from the main structure; rejection
            // sampling with a deterministic fallback corner.
            let need = (base_radii.0.max(base_radii.1) + dr.0.max(dr.1) + 8.0).powi(2);
            let mut center = (h as f32 * 0.2, w as f32 * 0.2);
            let mut placed = false;
            for _ in 0..64 {
                let cand = (
                    rng.gen_range(0.15..0.85) * h as f32,
                    rng.gen_range(0.15..0.85) * w as f32,
                );
                let d2 = (cand.0 - base_center.0).powi(2) + (cand.1 - base_center.1).powi(2);
                if d2 >= need {
                    center = cand;
                    placed = true;
                    break;
                }
            }
            if !placed {
                // Farthest corner region from the main center.
                center = (
                    if base_center.0 > h as f32 / 2.0 { h as f32 * 0.18 } else { h as f32 * 0.82 },
                    if base_center.1 > w as f32 / 2.0 { w as f32 * 0.18 } else { w as f32 * 0.82 },
                );
            }
            let track = drift_track(spec, &mut rng, center, dr, 2.0);
            (track, d_contrast, d.clear_slices)
        });

        let mut voxels = Array3::<f32>::zeros((n, h, w));
        let mut gt = Array3::<u8>::zeros((n, h, w));
        let c = n / 2;
        for k in 0..n {
            let mut slice = Array2::<f32>::zeros((h, w));
            paint_ellipse(&mut slice, main.centers[k], main.radii[k], contrast);
            let mut mask = Array2::<u8>::zeros((h, w));
            paint_ellipse_mask(&mut mask, main.centers[k], main.radii[k]);
            if let Some((track, d_contrast, clear)) = &distractor {
                let dist = k.abs_diff(c);
                if dist > *clear {
                    paint_ellipse(&mut slice, track.centers[k], track.radii[k], *d_contrast);
                }
            }
            voxels.index_axis_mut(ndarray::Axis(0), k).assign(&slice);
            gt.index_axis_mut(ndarray::Axis(0), k).assign(&mask);
        }
        if let Some(dist) = &noise {
            for v in voxels.iter_mut() {
                *v += dist.sample(&mut rng) as f32;
            }
        }
        let volume = Volume::new(format!("phantom{v_idx:03}"), voxels, [1.0, 1.0, 1.0])?;
        debug_assert!(gt
            .index_axis(ndarray::Axis(0), c)
            .iter()
            .any(|&m| m == 1));
        out.push((volume, gt));
    }
    Ok(out)
}

fn paint_ellipse_mask(buf: &mut Array2<u8>, center: (f32, f32), radii: (f32, f32)) {
    let (h, w) = buf.dim();
    let r0 = ((center.0 - radii.0).floor().max(0.0)) as usize;
    let r1 = ((center.0 + radii.0).ceil() as usize).min(h - 1);
    let c0 = ((center.1 - radii.1).floor().max(0.0)) as usize;
    let c1 = ((center.1 + radii.1).ceil() as usize).min(w - 1);
    for r in r0..=r1 {
        let dy = (r as f32 - center.0) / radii.0;
        for c in c0..=c1 {
            let dx = (c as f32 - center.1) / radii.1;
            if dy * dy + dx * dx <= 1.0 {
                buf[[r, c]] = 1;
            }
        }
    }
}
