//! im2col-based convolution kernels. The GEMM runs through `ndarray::dot`
//! (matrixmultiply), batch items are processed in parallel and reduced in a
//! fixed order so results are independent of thread scheduling.

use ndarray::{Array2, Array4, ArrayD, Ix1, Ix4};
use rayon::prelude::*;

use super::Scalar;
use crate::error::{Error, Result};

pub(crate) struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn check_dims<F: Scalar>(
    x: &ArrayD<F>,
    w: &ArrayD<F>,
    b: &ArrayD<F>,
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    let (batch, cin, h, wd) = super::dims4(x, "conv input")?;
    let (cout, wcin, kh, kw) = super::dims4(w, "conv weight")?;
    if b.ndim() != 1 || b.len() != cout {
        return Err(Error::Dimension(format!(
            "conv bias must be a vector of length {cout}, got shape {:?}",
            b.shape()
        )));
    }
    if wcin != cin {
        return Err(Error::Dimension(format!(
            "conv channel mismatch: input has {cin}, weight expects {wcin}"
        )));
    }
    if stride == 0 {
        return Err(Error::Dimension("conv stride must be positive".into()));
    }
    if kh > h + 2 * padding || kw > wd + 2 * padding {
        return Err(Error::Dimension(format!(
            "kernel {kh}x{kw} does not fit padded input {}x{}",
            h + 2 * padding,
            wd + 2 * padding
        )));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wd + 2 * padding - kw) / stride + 1;
    Ok(ConvDims {
        batch,
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        oh,
        ow,
    })
}

/// Unfolds one (C, H, W) item into a (C*kh*kw, oh*ow) matrix.
fn im2col<F: Scalar>(item: &[F], d: &ConvDims, stride: usize, padding: usize) -> Array2<F> {
    let p = d.oh * d.ow;
    let mut cols = Array2::<F>::zeros((d.cin * d.kh * d.kw, p));
    let cols_slice = cols.as_slice_mut().expect("fresh array is contiguous");
    for c in 0..d.cin {
        let chan = &item[c * d.h * d.w..(c + 1) * d.h * d.w];
        for kr in 0..d.kh {
            for kc in 0..d.kw {
                let row = (c * d.kh + kr) * d.kw + kc;
                let row_base = row * p;
                for orow in 0..d.oh {
                    let ir = (orow * stride + kr) as isize - padding as isize;
                    if ir < 0 || ir as usize >= d.h {
                        continue;
                    }
                    let src_base = ir as usize * d.w;
                    let dst_base = row_base + orow * d.ow;
                    if stride == 1 {
                        // Contiguous span: copy the in-bounds window at once.
                        let ic0 = kc as isize - padding as isize;
                        let first = (-ic0).max(0) as usize;
                        let last = (d.w as isize - ic0).min(d.ow as isize).max(0) as usize;
                        if first < last {
                            let src0 = (ic0 + first as isize) as usize;
                            cols_slice[dst_base + first..dst_base + last]
                                .copy_from_slice(&chan[src_base + src0..src_base + src0 + (last - first)]);
                        }
                    } else {
                        for ocol in 0..d.ow {
                            let ic = (ocol * stride + kc) as isize - padding as isize;
                            if ic >= 0 && (ic as usize) < d.w {
                                cols_slice[dst_base + ocol] = chan[src_base + ic as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds a (C*kh*kw, oh*ow) gradient matrix back onto the input grid.
fn col2im_add<F: Scalar>(
    gcols: &Array2<F>,
    gx_item: &mut [F],
    d: &ConvDims,
    stride: usize,
    padding: usize,
) {
    let p = d.oh * d.ow;
    let gslice = gcols.as_slice().expect("dot output is contiguous");
    for c in 0..d.cin {
        let base_in = c * d.h * d.w;
        for kr in 0..d.kh {
            for kc in 0..d.kw {
                let row = (c * d.kh + kr) * d.kw + kc;
                let row_base = row * p;
                for orow in 0..d.oh {
                    let ir = (orow * stride + kr) as isize - padding as isize;
                    if ir < 0 || ir as usize >= d.h {
                        continue;
                    }
                    let dst_row = base_in + ir as usize * d.w;
                    let src_base = row_base + orow * d.ow;
                    for ocol in 0..d.ow {
                        let ic = (ocol * stride + kc) as isize - padding as isize;
                        if ic >= 0 && (ic as usize) < d.w {
                            gx_item[dst_row + ic as usize] += gslice[src_base + ocol];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<F: Scalar>(
    x: &ArrayD<F>,
    w: &ArrayD<F>,
    b: &ArrayD<F>,
    stride: usize,
    padding: usize,
) -> Result<ArrayD<F>> {
    let d = check_dims(x, w, b, stride, padding)?;
    let x_slice = x.as_slice().expect("tensors are standard layout");
    let item_len = d.cin * d.h * d.w;
    let w_mat = w
        .view()
        .into_dimensionality::<Ix4>()
        .unwrap()
        .into_shape_with_order((d.cout, d.cin * d.kh * d.kw))
        .expect("weight is standard layout");
    let bias = b.view().into_dimensionality::<Ix1>().unwrap();

    let per_item: Vec<Array2<F>> = (0..d.batch)
        .into_par_iter()
        .map(|bi| {
            let cols = im2col(&x_slice[bi * item_len..(bi + 1) * item_len], &d, stride, padding);
            let mut out = w_mat.dot(&cols);
            for (mut row, &bv) in out.rows_mut().into_iter().zip(bias.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
            out
        })
        .collect();

    let mut out = Array4::<F>::zeros((d.batch, d.cout, d.oh, d.ow));
    {
        let out_slice = out.as_slice_mut().unwrap();
        let chunk = d.cout * d.oh * d.ow;
        for (bi, m) in per_item.iter().enumerate() {
            out_slice[bi * chunk..(bi + 1) * chunk]
                .copy_from_slice(m.as_slice().expect("contiguous"));
        }
    }
    Ok(out.into_dyn())
}

/// Returns (grad_x, grad_w, grad_b); grad_x is skipped when the input is a
/// constant leaf.
pub(crate) fn backward<F: Scalar>(
    x: &ArrayD<F>,
    w: &ArrayD<F>,
    gout: &ArrayD<F>,
    stride: usize,
    padding: usize,
    need_gx: bool,
) -> (Option<ArrayD<F>>, ArrayD<F>, ArrayD<F>) {
    let bias_placeholder = ArrayD::<F>::zeros(ndarray::IxDyn(&[w.shape()[0]]));
    let d = check_dims(x, w, &bias_placeholder, stride, padding).expect("checked in forward");
    let x_slice = x.as_slice().expect("standard layout");
    let g_slice = gout.as_slice().expect("standard layout");
    let item_len = d.cin * d.h * d.w;
    let out_len = d.cout * d.oh * d.ow;
    let ckk = d.cin * d.kh * d.kw;
    let w_mat = w
        .view()
        .into_dimensionality::<Ix4>()
        .unwrap()
        .into_shape_with_order((d.cout, ckk))
        .expect("standard layout");

    struct ItemGrads<F> {
        gw: Array2<F>,
        gb: Vec<F>,
        gx: Option<Vec<F>>,
    }

    let per_item: Vec<ItemGrads<F>> = (0..d.batch)
        .into_par_iter()
        .map(|bi| {
            let cols = im2col(&x_slice[bi * item_len..(bi + 1) * item_len], &d, stride, padding);
            let g_mat = ndarray::ArrayView2::from_shape(
                (d.cout, d.oh * d.ow),
                &g_slice[bi * out_len..(bi + 1) * out_len],
            )
            .expect("contiguous");
            let gw = g_mat.dot(&cols.t());
            let gb: Vec<F> = g_mat
                .rows()
                .into_iter()
                .map(|r| r.iter().fold(F::zero(), |a, &v| a + v))
                .collect();
            let gx = if need_gx {
                let gcols = w_mat.t().dot(&g_mat);
                let mut gx_item = vec![F::zero(); item_len];
                col2im_add(&gcols, &mut gx_item, &d, stride, padding);
                Some(gx_item)
            } else {
                None
            };
            ItemGrads { gw, gb, gx }
        })
        .collect();

    // Fixed-order reduction keeps gradients bit-identical across runs.
    let mut gw_total = Array2::<F>::zeros((d.cout, ckk));
    let mut gb_total = vec![F::zero(); d.cout];
    let mut gx_total = need_gx.then(|| vec![F::zero(); d.batch * item_len]);
    for (bi, item) in per_item.into_iter().enumerate() {
        gw_total += &item.gw;
        for (acc, v) in gb_total.iter_mut().zip(item.gb) {
            *acc += v;
        }
        if let (Some(total), Some(gx)) = (gx_total.as_mut(), item.gx) {
            total[bi * item_len..(bi + 1) * item_len].copy_from_slice(&gx);
        }
    }

    let gw = gw_total
        .into_shape_with_order((d.cout, d.cin, d.kh, d.kw))
        .unwrap()
        .into_dyn();
    let gb = ndarray::Array1::from_vec(gb_total).into_dyn();
    let gx = gx_total.map(|v| {
        ndarray::Array::from_shape_vec((d.batch, d.cin, d.h, d.w), v)
            .unwrap()
            .into_dyn()
    });
    (gx, gw, gb)
}
