//! Spatial operator kernels: softmax over channels, pooling, upsampling,
//! forward differences, and the differentiable bilinear warp.

use ndarray::{ArrayD, ArrayView2, Ix4};

use super::{dims4, Scalar};
use crate::error::Result;

pub(crate) fn softmax_channels_forward<F: Scalar>(x: &ArrayD<F>) -> Result<ArrayD<F>> {
    let (b, k, h, w) = dims4(x, "softmax input")?;
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let mut out = ndarray::Array4::<F>::zeros((b, k, h, w));
    for bi in 0..b {
        for r in 0..h {
            for c in 0..w {
                let mut m = x4[[bi, 0, r, c]];
                for ki in 1..k {
                    m = m.max(x4[[bi, ki, r, c]]);
                }
                let mut denom = F::zero();
                for ki in 0..k {
                    let e = (x4[[bi, ki, r, c]] - m).exp();
                    out[[bi, ki, r, c]] = e;
                    denom += e;
                }
                for ki in 0..k {
                    out[[bi, ki, r, c]] /= denom;
                }
            }
        }
    }
    Ok(out.into_dyn())
}

pub(crate) fn softmax_channels_backward<F: Scalar>(y: &ArrayD<F>, g: &ArrayD<F>) -> ArrayD<F> {
    let (b, k, h, w) = dims4(y, "softmax output").expect("validated in forward");
    let y4 = y.view().into_dimensionality::<Ix4>().unwrap();
    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
    let mut gx = ndarray::Array4::<F>::zeros((b, k, h, w));
    for bi in 0..b {
        for r in 0..h {
            for c in 0..w {
                let mut dot = F::zero();
                for ki in 0..k {
                    dot += y4[[bi, ki, r, c]] * g4[[bi, ki, r, c]];
                }
                for ki in 0..k {
                    gx[[bi, ki, r, c]] = y4[[bi, ki, r, c]] * (g4[[bi, ki, r, c]] - dot);
                }
            }
        }
    }
    gx.into_dyn()
}

pub(crate) fn max_pool2_forward<F: Scalar>(x: &ArrayD<F>) -> Result<(ArrayD<F>, Vec<u32>)> {
    let (b, c, h, w) = dims4(x, "max_pool input")?;
    let oh = h / 2;
    let ow = w / 2;
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let mut out = ndarray::Array4::<F>::zeros((b, c, oh, ow));
    let mut argmax = vec![0u32; b * c * oh * ow];
    debug_assert!(x.len() < u32::MAX as usize);
    let mut idx = 0usize;
    for bi in 0..b {
        for ci in 0..c {
            for r in 0..oh {
                for col in 0..ow {
                    let mut best = x4[[bi, ci, 2 * r, 2 * col]];
                    let mut best_at = ((bi * c + ci) * h + 2 * r) * w + 2 * col;
                    for dr in 0..2 {
                        for dc in 0..2 {
                            let v = x4[[bi, ci, 2 * r + dr, 2 * col + dc]];
                            if v > best {
                                best = v;
                                best_at = ((bi * c + ci) * h + 2 * r + dr) * w + 2 * col + dc;
                            }
                        }
                    }
                    out[[bi, ci, r, col]] = best;
                    argmax[idx] = best_at as u32;
                    idx += 1;
                }
            }
        }
    }
    Ok((out.into_dyn(), argmax))
}

pub(crate) fn max_pool2_backward<F: Scalar>(
    x: &ArrayD<F>,
    g: &ArrayD<F>,
    argmax: &[u32],
) -> ArrayD<F> {
    let mut gx = ArrayD::<F>::zeros(x.raw_dim());
    let gs = gx.as_slice_mut().unwrap();
    for (&at, &gv) in argmax.iter().zip(g.iter()) {
        gs[at as usize] += gv;
    }
    gx
}

pub(crate) fn upsample2_forward<F: Scalar>(x: &ArrayD<F>) -> Result<ArrayD<F>> {
    let (b, c, h, w) = dims4(x, "upsample input")?;
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let mut out = ndarray::Array4::<F>::zeros((b, c, 2 * h, 2 * w));
    for bi in 0..b {
        for ci in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let v = x4[[bi, ci, r, col]];
                    out[[bi, ci, 2 * r, 2 * col]] = v;
                    out[[bi, ci, 2 * r, 2 * col + 1]] = v;
                    out[[bi, ci, 2 * r + 1, 2 * col]] = v;
                    out[[bi, ci, 2 * r + 1, 2 * col + 1]] = v;
                }
            }
        }
    }
    Ok(out.into_dyn())
}

pub(crate) fn upsample2_backward<F: Scalar>(x: &ArrayD<F>, g: &ArrayD<F>) -> ArrayD<F> {
    let (b, c, h, w) = dims4(x, "upsample input").expect("validated in forward");
    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
    let mut gx = ndarray::Array4::<F>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for r in 0..h {
                for col in 0..w {
                    gx[[bi, ci, r, col]] = g4[[bi, ci, 2 * r, 2 * col]]
                        + g4[[bi, ci, 2 * r, 2 * col + 1]]
                        + g4[[bi, ci, 2 * r + 1, 2 * col]]
                        + g4[[bi, ci, 2 * r + 1, 2 * col + 1]];
                }
            }
        }
    }
    gx.into_dyn()
}

pub(crate) fn concat_backward<F: Scalar>(g: &ArrayD<F>, ca: usize) -> (ArrayD<F>, ArrayD<F>) {
    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
    let ga = g4
        .slice(ndarray::s![.., ..ca, .., ..])
        .as_standard_layout()
        .to_owned()
        .into_dyn();
    let gb = g4
        .slice(ndarray::s![.., ca.., .., ..])
        .as_standard_layout()
        .to_owned()
        .into_dyn();
    (ga, gb)
}

/// Forward difference along `axis` (2 = rows, 3 = cols) of an NCHW tensor.
pub(crate) fn diff_forward<F: Scalar>(x: &ArrayD<F>, axis: usize) -> ArrayD<F> {
    let (b, c, h, w) = dims4(x, "diff input").expect("4-d input");
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let (oh, ow) = if axis == 2 { (h - 1, w) } else { (h, w - 1) };
    let mut out = ndarray::Array4::<F>::zeros((b, c, oh, ow));
    for bi in 0..b {
        for ci in 0..c {
            for r in 0..oh {
                for col in 0..ow {
                    let v = if axis == 2 {
                        x4[[bi, ci, r + 1, col]] - x4[[bi, ci, r, col]]
                    } else {
                        x4[[bi, ci, r, col + 1]] - x4[[bi, ci, r, col]]
                    };
                    out[[bi, ci, r, col]] = v;
                }
            }
        }
    }
    out.into_dyn()
}

pub(crate) fn diff_backward<F: Scalar>(x: &ArrayD<F>, g: &ArrayD<F>, axis: usize) -> ArrayD<F> {
    let (b, c, h, w) = dims4(x, "diff input").expect("4-d input");
    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
    let (oh, ow) = if axis == 2 { (h - 1, w) } else { (h, w - 1) };
    let mut gx = ndarray::Array4::<F>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for r in 0..oh {
                for col in 0..ow {
                    let gv = g4[[bi, ci, r, col]];
                    if axis == 2 {
                        gx[[bi, ci, r + 1, col]] += gv;
                        gx[[bi, ci, r, col]] -= gv;
                    } else {
                        gx[[bi, ci, r, col + 1]] += gv;
                        gx[[bi, ci, r, col]] -= gv;
                    }
                }
            }
        }
    }
    gx.into_dyn()
}

/// Bilinear sample with clamp-to-edge semantics. Exact at integer-aligned
/// coordinates: the off-pixel weights are exactly zero.
pub(crate) fn sample_bilinear<F: Scalar>(img: &ArrayView2<'_, F>, y: F, x: F) -> F {
    let (h, w) = img.dim();
    let zero = F::zero();
    let one = F::one();
    let ymax = F::from_f64((h - 1) as f64);
    let xmax = F::from_f64((w - 1) as f64);
    let yc = y.max(zero).min(ymax);
    let xc = x.max(zero).min(xmax);
    let y0f = yc.floor();
    let x0f = xc.floor();
    let y0 = y0f.as_f64() as usize;
    let x0 = x0f.as_f64() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ty = yc - y0f;
    let tx = xc - x0f;
    (one - ty) * (one - tx) * img[[y0, x0]]
        + (one - ty) * tx * img[[y0, x1]]
        + ty * (one - tx) * img[[y1, x0]]
        + ty * tx * img[[y1, x1]]
}

pub(crate) fn warp_forward<F: Scalar>(image: &ArrayD<F>, field: &ArrayD<F>) -> Result<ArrayD<F>> {
    let (b, c, h, w) = dims4(image, "warp image")?;
    let (fb, fc, fh, fw) = dims4(field, "warp field")?;
    if fb != b || fc != 2 || fh != h || fw != w {
        return Err(crate::error::Error::Dimension(format!(
            "warp field must be ({b}, 2, {h}, {w}), got ({fb}, {fc}, {fh}, {fw})"
        )));
    }
    let img4 = image.view().into_dimensionality::<Ix4>().unwrap();
    let f4 = field.view().into_dimensionality::<Ix4>().unwrap();
    let mut out = ndarray::Array4::<F>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let plane = img4.index_axis(ndarray::Axis(0), bi);
            let plane = plane.index_axis(ndarray::Axis(0), ci);
            for r in 0..h {
                for col in 0..w {
                    let y = F::from_f64(r as f64) + f4[[bi, 0, r, col]];
                    let x = F::from_f64(col as f64) + f4[[bi, 1, r, col]];
                    out[[bi, ci, r, col]] = sample_bilinear(&plane, y, x);
                }
            }
        }
    }
    Ok(out.into_dyn())
}

pub(crate) fn warp_backward<F: Scalar>(
    image: &ArrayD<F>,
    field: &ArrayD<F>,
    g: &ArrayD<F>,
    need_gi: bool,
    need_gf: bool,
) -> (Option<ArrayD<F>>, Option<ArrayD<F>>) {
    let (b, c, h, w) = dims4(image, "warp image").expect("validated in forward");
    let img4 = image.view().into_dimensionality::<Ix4>().unwrap();
    let f4 = field.view().into_dimensionality::<Ix4>().unwrap();
    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
    let zero = F::zero();
    let one = F::one();
    let mut gi = need_gi.then(|| ndarray::Array4::<F>::zeros((b, c, h, w)));
    let mut gf = need_gf.then(|| ndarray::Array4::<F>::zeros((b, 2, h, w)));
    let ymax = F::from_f64((h - 1) as f64);
    let xmax = F::from_f64((w - 1) as f64);
    for bi in 0..b {
        for r in 0..h {
            for col in 0..w {
                let yr = F::from_f64(r as f64) + f4[[bi, 0, r, col]];
                let xr = F::from_f64(col as f64) + f4[[bi, 1, r, col]];
                let y_interior = yr > zero && yr < ymax;
                let x_interior = xr > zero && xr < xmax;
                let yc = yr.max(zero).min(ymax);
                let xc = xr.max(zero).min(xmax);
                let y0f = yc.floor();
                let x0f = xc.floor();
                let y0 = y0f.as_f64() as usize;
                let x0 = x0f.as_f64() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let ty = yc - y0f;
                let tx = xc - x0f;
                let mut dfy = zero;
                let mut dfx = zero;
                for ci in 0..c {
                    let gv = g4[[bi, ci, r, col]];
                    let v00 = img4[[bi, ci, y0, x0]];
                    let v01 = img4[[bi, ci, y0, x1]];
                    let v10 = img4[[bi, ci, y1, x0]];
                    let v11 = img4[[bi, ci, y1, x1]];
                    if let Some(gi) = gi.as_mut() {
                        gi[[bi, ci, y0, x0]] += gv * (one - ty) * (one - tx);
                        gi[[bi, ci, y0, x1]] += gv * (one - ty) * tx;
                        gi[[bi, ci, y1, x0]] += gv * ty * (one - tx);
                        gi[[bi, ci, y1, x1]] += gv * ty * tx;
                    }
                    if y_interior {
                        dfy += gv * ((v10 - v00) * (one - tx) + (v11 - v01) * tx);
                    }
                    if x_interior {
                        dfx += gv * ((v01 - v00) * (one - ty) + (v11 - v10) * ty);
                    }
                }
                if let Some(gf) = gf.as_mut() {
                    gf[[bi, 0, r, col]] = dfy;
                    gf[[bi, 1, r, col]] = dfx;
                }
            }
        }
    }
    (gi.map(|a| a.into_dyn()), gf.map(|a| a.into_dyn()))
}
