//! Dense displacement fields and bilinear warping of images and labels.

use ndarray::{Array2, Array3};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};

/// Per-pixel 2D displacement map: `displacements[[r, c, 0]]` is the row
/// offset and `[[r, c, 1]]` the column offset, in pixels. The warp samples
/// the source image at `p + displacement(p)`.
#[derive(Debug, Clone)]
pub struct DeformationField {
    pub displacements: Array3<f32>,
}

impl DeformationField {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            displacements: Array3::zeros((h, w, 2)),
        }
    }

    pub fn new(displacements: Array3<f32>) -> Result<Self> {
        let (_, _, ch) = displacements.dim();
        if ch != 2 {
            return Err(Error::Dimension(format!(
                "deformation field needs 2 channels, got {ch}"
            )));
        }
        if displacements.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("deformation field not finite".into()));
        }
        Ok(Self { displacements })
    }

    pub fn shape(&self) -> (usize, usize) {
        let (h, w, _) = self.displacements.dim();
        (h, w)
    }

    pub fn mean_magnitude(&self) -> f64 {
        let (h, w, _) = self.displacements.dim();
        let mut acc = 0.0f64;
        for r in 0..h {
            for c in 0..w {
                let dy = self.displacements[[r, c, 0]] as f64;
                let dx = self.displacements[[r, c, 1]] as f64;
                acc += (dy * dy + dx * dx).sqrt();
            }
        }
        acc / (h * w) as f64
    }
}

/// Bilinear warp with clamp-to-edge sampling: `out(p) = image(p + field(p))`.
/// A zero field reproduces the input bit-exactly.
pub fn warp_bilinear(image: &Array2<f32>, field: &DeformationField) -> Result<Array2<f32>> {
    let (h, w) = image.dim();
    if field.shape() != (h, w) {
        return Err(Error::Dimension(format!(
            "field shape {:?} does not match image {h}x{w}",
            field.shape()
        )));
    }
    let view = image.view();
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let y = r as f32 + field.displacements[[r, c, 0]];
            let x = c as f32 + field.displacements[[r, c, 1]];
            out[[r, c]] = crate::autodiff::sample(&view, y, x);
        }
    }
    Ok(out)
}

/// Warps a binary mask as floats, then thresholds at 0.5.
pub fn warp_label(mask: &Array2<u8>, field: &DeformationField) -> Result<Array2<u8>> {
    if mask.iter().any(|&v| v > 1) {
        return Err(Error::Usage("warp_label expects a binary mask".into()));
    }
    let as_float = mask.mapv(|v| v as f32);
    let warped = warp_bilinear(&as_float, field)?;
    Ok(warped.mapv(|v| u8::from(v >= 0.5)))
}

/// Mean squared difference between the warped moving slice and the fixed
/// slice (array form; the training loop uses the graph composite).
pub fn similarity_mse(warped: &Array2<f32>, fixed: &Array2<f32>) -> Result<f64> {
    if warped.dim() != fixed.dim() {
        return Err(Error::Dimension(format!(
            "similarity operands disagree: {:?} vs {:?}",
            warped.dim(),
            fixed.dim()
        )));
    }
    let n = warped.len() as f64;
    let sum: f64 = warped
        .iter()
        .zip(fixed.iter())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// Mean of squared forward differences of both displacement channels in both
/// spatial directions (array form).
pub fn smoothness(field: &DeformationField) -> f64 {
    let (h, w, _) = field.displacements.dim();
    let d = &field.displacements;
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for ch in 0..2 {
        for r in 0..h.saturating_sub(1) {
            for c in 0..w {
                let diff = (d[[r + 1, c, ch]] - d[[r, c, ch]]) as f64;
                acc += diff * diff;
                count += 1;
            }
        }
        for r in 0..h {
            for c in 0..w.saturating_sub(1) {
                let diff = (d[[r, c + 1, ch]] - d[[r, c, ch]]) as f64;
                acc += diff * diff;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        acc / count as f64
    }
}

/// Converts a (2, H, W) network output plane into a [`DeformationField`].
pub fn field_from_chw<F: Scalar>(plane: &ndarray::ArrayView3<'_, F>) -> Result<DeformationField> {
    let (ch, h, w) = plane.dim();
    if ch != 2 {
        return Err(Error::Dimension(format!(
            "expected 2 displacement channels, got {ch}"
        )));
    }
    let mut d = Array3::zeros((h, w, 2));
    for r in 0..h {
        for c in 0..w {
            d[[r, c, 0]] = plane[[0, r, c]].as_f64() as f32;
            d[[r, c, 1]] = plane[[1, r, c]].as_f64() as f32;
        }
    }
    DeformationField::new(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Array2<f32> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.gen_range(-1.0f32..1.0))
    }

    #[test]
    fn zero_field_is_bit_exact_identity() {
        let img = random_image(9, 13, 1);
        let out = warp_bilinear(&img, &DeformationField::zeros(9, 13)).unwrap();
        for (a, b) in img.iter().zip(out.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn constant_column_shift_on_ramp() {
        // image(r, c) = c and field (0, +1): interior output is c + 1.
        let (h, w) = (6, 8);
        let img = Array2::from_shape_fn((h, w), |(_, c)| c as f32);
        let mut field = DeformationField::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                field.displacements[[r, c, 1]] = 1.0;
            }
        }
        let out = warp_bilinear(&img, &field).unwrap();
        for r in 0..h {
            for c in 0..w - 1 {
                assert!((out[[r, c]] - (c as f32 + 1.0)).abs() < 1e-6);
            }
            // Border clamps to the last column.
            assert!((out[[r, w - 1]] - (w as f32 - 1.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn random_warp_matches_scalar_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for case in 0..20 {
            let (h, w) = (rng.gen_range(4..12usize), rng.gen_range(4..12usize));
            let img = random_image(h, w, 100 + case);
            let mut field = DeformationField::zeros(h, w);
            for v in field.displacements.iter_mut() {
                *v = rng.gen_range(-3.0f32..3.0);
            }
            let out = warp_bilinear(&img, &field).unwrap();
            // Independent per-pixel sampling oracle in f64.
            for r in 0..h {
                for c in 0..w {
                    let y = (r as f64 + field.displacements[[r, c, 0]] as f64)
                        .clamp(0.0, (h - 1) as f64);
                    let x = (c as f64 + field.displacements[[r, c, 1]] as f64)
                        .clamp(0.0, (w - 1) as f64);
                    let y0 = y.floor() as usize;
                    let x0 = x.floor() as usize;
                    let y1 = (y0 + 1).min(h - 1);
                    let x1 = (x0 + 1).min(w - 1);
                    let ty = y - y0 as f64;
                    let tx = x - x0 as f64;
                    let expect = (1.0 - ty) * (1.0 - tx) * img[[y0, x0]] as f64
                        + (1.0 - ty) * tx * img[[y0, x1]] as f64
                        + ty * (1.0 - tx) * img[[y1, x0]] as f64
                        + ty * tx * img[[y1, x1]] as f64;
                    assert!(
                        (out[[r, c]] as f64 - expect).abs() < 1e-6,
                        "mismatch at ({r},{c})"
                    );
                }
            }
        }
    }

    #[test]
    fn label_warp_zero_field_is_identity() {
        let mask = Array2::from_shape_fn((7, 7), |(r, c)| u8::from((r + c) % 2 == 0));
        let out = warp_label(&mask, &DeformationField::zeros(7, 7)).unwrap();
        assert_eq!(out, mask);
    }

    #[test]
    fn label_warp_integer_translation_preserves_interior_area() {
        let mut mask = Array2::<u8>::zeros((16, 16));
        for r in 5..9 {
            for c in 5..9 {
                mask[[r, c]] = 1;
            }
        }
        let mut field = DeformationField::zeros(16, 16);
        for v in field.displacements.index_axis_mut(ndarray::Axis(2), 1).iter_mut() {
            *v = -2.0; // output(r,c) samples c-2: shifts content right
        }
        let out = warp_label(&mask, &field).unwrap();
        assert_eq!(
            out.iter().map(|&v| v as usize).sum::<usize>(),
            16,
            "area preserved"
        );
        for r in 5..9 {
            for c in 7..11 {
                assert_eq!(out[[r, c]], 1);
            }
        }
    }

    #[test]
    fn half_pixel_shift_area_change_bounded_by_perimeter() {
        // 16x16 canvas, solid 6x6 square, half-pixel shift both axes.
        let mut mask = Array2::<u8>::zeros((16, 16));
        for r in 4..10 {
            for c in 4..10 {
                mask[[r, c]] = 1;
            }
        }
        let area: i64 = mask.iter().map(|&v| v as i64).sum();
        let mut field = DeformationField::zeros(16, 16);
        for r in 0..16 {
            for c in 0..16 {
                field.displacements[[r, c, 0]] = 0.5;
                field.displacements[[r, c, 1]] = 0.5;
            }
        }
        let out = warp_label(&mask, &field).unwrap();
        let new_area: i64 = out.iter().map(|&v| v as i64).sum();
        let perimeter = 4 * 6i64;
        assert!(
            (new_area - area).abs() <= perimeter,
            "area {area} -> {new_area}"
        );
    }

    #[test]
    fn composing_smooth_fields_matches_sequential_warps() {
        // Warping by u then by v equals warping by the composed field
        // w(p) = v(p) + u(p + v(p)) up to bilinear interpolation error.
        let (h, w) = (24, 24);
        let img = Array2::from_shape_fn((h, w), |(r, c)| {
            ((r as f32) * 0.35).sin() + ((c as f32) * 0.27).cos()
        });
        let range = img.iter().cloned().fold(f32::MIN, f32::max)
            - img.iter().cloned().fold(f32::MAX, f32::min);
        let smooth_field = |phase: f32| {
            let mut f = DeformationField::zeros(h, w);
            for r in 0..h {
                for c in 0..w {
                    f.displacements[[r, c, 0]] =
                        0.8 * ((c as f32) * 0.2 + phase).sin();
                    f.displacements[[r, c, 1]] =
                        0.8 * ((r as f32) * 0.2 - phase).cos();
                }
            }
            f
        };
        let u = smooth_field(0.3);
        let v = smooth_field(1.1);
        let sequential = warp_bilinear(&warp_bilinear(&img, &u).unwrap(), &v).unwrap();
        // Composed field: v plus u sampled at the v-displaced position.
        let mut composed = DeformationField::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                let y = r as f32 + v.displacements[[r, c, 0]];
                let x = c as f32 + v.displacements[[r, c, 1]];
                let u0 = crate::autodiff::sample(
                    &u.displacements.index_axis(ndarray::Axis(2), 0),
                    y,
                    x,
                );
                let u1 = crate::autodiff::sample(
                    &u.displacements.index_axis(ndarray::Axis(2), 1),
                    y,
                    x,
                );
                composed.displacements[[r, c, 0]] = v.displacements[[r, c, 0]] + u0;
                composed.displacements[[r, c, 1]] = v.displacements[[r, c, 1]] + u1;
            }
        }
        let direct = warp_bilinear(&img, &composed).unwrap();
        // Interior comparison (border clamping differs structurally).
        let mut max_err = 0.0f32;
        for r in 2..h - 2 {
            for c in 2..w - 2 {
                max_err = max_err.max((sequential[[r, c]] - direct[[r, c]]).abs());
            }
        }
        assert!(
            max_err < 0.05 * range,
            "composition error {max_err} vs range {range}"
        );
    }

    #[test]
    fn similarity_of_identical_images_is_zero() {
        let img = random_image(8, 8, 5);
        assert_eq!(similarity_mse(&img, &img).unwrap(), 0.0);
    }

    #[test]
    fn similarity_of_constant_offset_is_offset_squared() {
        let img = random_image(8, 8, 6);
        let shifted = img.mapv(|v| v + 0.3);
        let s = similarity_mse(&shifted, &img).unwrap();
        assert!((s - 0.09).abs() < 1e-6);
    }

    #[test]
    fn similarity_matches_direct_summation() {
        let a = random_image(5, 9, 7);
        let b = random_image(5, 9, 8);
        let mut acc = 0.0;
        for (x, y) in a.iter().zip(b.iter()) {
            acc += ((x - y) as f64).powi(2);
        }
        acc /= a.len() as f64;
        assert!((similarity_mse(&a, &b).unwrap() - acc).abs() < 1e-9);
    }

    #[test]
    fn smoothness_of_constant_field_is_zero() {
        let mut f = DeformationField::zeros(6, 6);
        for v in f.displacements.iter_mut() {
            *v = 2.5;
        }
        assert_eq!(smoothness(&f), 0.0);
    }

    #[test]
    fn smoothness_of_unit_column_gradient() {
        // field(r, c) = (c, 0): column-direction differences are exactly 1.
        let (h, w) = (5, 7);
        let mut f = DeformationField::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                f.displacements[[r, c, 0]] = c as f32;
            }
        }
        // Channel 0: row diffs 0 ((h-1)*w terms), col diffs 1 (h*(w-1) terms);
        // channel 1 contributes zeros.
        let expect = (h * (w - 1)) as f64
            / (2 * ((h - 1) * w + h * (w - 1))) as f64;
        assert!((smoothness(&f) - expect).abs() < 1e-9);
    }

    #[test]
    fn smoothness_zero_iff_constant() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut f = DeformationField::zeros(4, 4);
            for v in f.displacements.iter_mut() {
                *v = rng.gen_range(-1.0f32..1.0);
            }
            let constant = {
                let first0 = f.displacements[[0, 0, 0]];
                let first1 = f.displacements[[0, 0, 1]];
                (0..4).all(|r| {
                    (0..4).all(|c| {
                        f.displacements[[r, c, 0]] == first0
                            && f.displacements[[r, c, 1]] == first1
                    })
                })
            };
            assert_eq!(smoothness(&f) == 0.0, constant);
        }
        // And the constructive direction.
        let mut f = DeformationField::zeros(4, 4);
        for v in f.displacements.iter_mut() {
            *v = -0.75;
        }
        assert_eq!(smoothness(&f), 0.0);
    }

    #[test]
    fn smoothness_matches_finite_difference_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let (h, w) = (6, 5);
        let mut f = DeformationField::zeros(h, w);
        for v in f.displacements.iter_mut() {
            *v = rng.gen_range(-2.0f32..2.0);
        }
        let mut acc = 0.0f64;
        let mut n = 0usize;
        for ch in 0..2 {
            for r in 0..h - 1 {
                for c in 0..w {
                    acc += ((f.displacements[[r + 1, c, ch]] - f.displacements[[r, c, ch]])
                        as f64)
                        .powi(2);
                    n += 1;
                }
            }
            for r in 0..h {
                for c in 0..w - 1 {
                    acc += ((f.displacements[[r, c + 1, ch]] - f.displacements[[r, c, ch]])
                        as f64)
                        .powi(2);
                    n += 1;
                }
            }
        }
        assert!((smoothness(&f) - acc / n as f64).abs() < 1e-9);
    }
}
