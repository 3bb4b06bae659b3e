//! Segmentation quality metrics: Dice, IoU, average symmetric surface
//! distance (6-connectivity surfaces, anisotropic Euclidean distances),
//! and signed relative volume difference, plus mean +/- SD aggregation and
//! the CSV report format.

use ndarray::Array3;

use crate::error::{Error, Result};

/// Metrics of one predicted volume against its reference.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub volume_id: String,
    pub dice: f64,
    pub iou: f64,
    /// None when either surface is empty (reported, excluded from
    /// aggregates).
    pub assd: Option<f64>,
    pub ravd: Option<f64>,
}

fn check_shapes(pred: &Array3<u8>, reference: &Array3<u8>) -> Result<()> {
    if pred.dim() != reference.dim() {
        return Err(Error::Dimension(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.dim(),
            reference.dim()
        )));
    }
    Ok(())
}

fn counts(pred: &Array3<u8>, reference: &Array3<u8>) -> (f64, f64, f64) {
    let mut inter = 0u64;
    let mut p = 0u64;
    let mut r = 0u64;
    for (&a, &b) in pred.iter().zip(reference.iter()) {
        let a = u64::from(a != 0);
        let b = u64::from(b != 0);
        inter += a & b;
        p += a;
        r += b;
    }
    (inter as f64, p as f64, r as f64)
}

/// Dice overlap `2|P∩R| / (|P|+|R|)`; both-empty pairs score 1.0.
pub fn dice(pred: &Array3<u8>, reference: &Array3<u8>) -> Result<f64> {
    check_shapes(pred, reference)?;
    let (i, p, r) = counts(pred, reference);
    if p + r == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * i / (p + r))
}

/// Jaccard overlap `|P∩R| / |P∪R|`; both-empty pairs score 1.0.
pub fn iou(pred: &Array3<u8>, reference: &Array3<u8>) -> Result<f64> {
    check_shapes(pred, reference)?;
    let (i, p, r) = counts(pred, reference);
    let union = p + r - i;
    if union == 0.0 {
        return Ok(1.0);
    }
    Ok(i / union)
}

/// Foreground precision `|P∩R| / |P|`; an empty prediction has no false
/// positives and scores 1.0. Supports the fusion quality checks.
pub fn precision(pred: &Array3<u8>, reference: &Array3<u8>) -> Result<f64> {
    check_shapes(pred, reference)?;
    let (i, p, _) = counts(pred, reference);
    if p == 0.0 {
        return Ok(1.0);
    }
    Ok(i / p)
}

/// Surface voxels: foreground with at least one face-adjacent background
/// neighbor; the volume border counts as background.
pub fn surface_voxels(mask: &Array3<u8>) -> Vec<[usize; 3]> {
    let (n, h, w) = mask.dim();
    let mut out = Vec::new();
    for k in 0..n {
        for r in 0..h {
            for c in 0..w {
                if mask[[k, r, c]] == 0 {
                    continue;
                }
                let at_border = k == 0 || k == n - 1 || r == 0 || r == h - 1 || c == 0 || c == w - 1;
                let exposed = at_border
                    || mask[[k - 1, r, c]] == 0
                    || mask[[k + 1, r, c]] == 0
                    || mask[[k, r - 1, c]] == 0
                    || mask[[k, r + 1, c]] == 0
                    || mask[[k, r, c - 1]] == 0
                    || mask[[k, r, c + 1]] == 0;
                if exposed {
                    out.push([k, r, c]);
                }
            }
        }
    }
    out
}

fn directed_distance_sum(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f32; 3]) -> f64 {
    // spacing = (mm per row, mm per col, mm per slice); voxel index order is
    // [slice, row, col].
    let sr = spacing[0] as f64;
    let sc = spacing[1] as f64;
    let sn = spacing[2] as f64;
    let mut total = 0.0f64;
    for a in from {
        let mut best = f64::INFINITY;
        for b in to {
            let dk = (a[0] as f64 - b[0] as f64) * sn;
            let dr = (a[1] as f64 - b[1] as f64) * sr;
            let dc = (a[2] as f64 - b[2] as f64) * sc;
            let d2 = dk * dk + dr * dr + dc * dc;
            if d2 < best {
                best = d2;
            }
        }
        total += best.sqrt();
    }
    total
}

/// Average symmetric surface distance in spacing units.
pub fn assd(pred: &Array3<u8>, reference: &Array3<u8>, spacing: [f32; 3]) -> Result<f64> {
    check_shapes(pred, reference)?;
    let sp = surface_voxels(pred);
    let sr = surface_voxels(reference);
    if sp.is_empty() || sr.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "assd undefined: {} prediction surface, {} reference surface",
            sp.len(),
            sr.len()
        )));
    }
    let total = directed_distance_sum(&sp, &sr, spacing) + directed_distance_sum(&sr, &sp, spacing);
    Ok(total / (sp.len() + sr.len()) as f64)
}

/// Signed relative volume difference `(|P| - |R|) / |R|`.
pub fn ravd(pred: &Array3<u8>, reference: &Array3<u8>) -> Result<f64> {
    check_shapes(pred, reference)?;
    let (_, p, r) = counts(pred, reference);
    if r == 0.0 {
        return Err(Error::UndefinedMetric(
            "ravd undefined for an empty reference".into(),
        ));
    }
    Ok((p - r) / r)
}

/// Absolute-value variant of [`ravd`].
pub fn ravd_abs(pred: &Array3<u8>, reference: &Array3<u8>) -> Result<f64> {
    Ok(ravd(pred, reference)?.abs())
}

/// Full per-volume report; undefined metrics are carried as `None`.
pub fn evaluate_volume(
    volume_id: &str,
    pred: &Array3<u8>,
    reference: &Array3<u8>,
    spacing: [f32; 3],
) -> Result<MetricsReport> {
    Ok(MetricsReport {
        volume_id: volume_id.to_string(),
        dice: dice(pred, reference)?,
        iou: iou(pred, reference)?,
        assd: assd(pred, reference, spacing).ok(),
        ravd: ravd(pred, reference).ok(),
    })
}

/// Mean and population standard deviation per metric over volumes;
/// undefined values are excluded with their own count.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub n: usize,
    pub dice_mean: f64,
    pub dice_sd: f64,
    pub iou_mean: f64,
    pub iou_sd: f64,
    pub assd_mean: Option<f64>,
    pub assd_sd: Option<f64>,
    pub assd_defined: usize,
    pub ravd_mean: Option<f64>,
    pub ravd_sd: Option<f64>,
    pub ravd_defined: usize,
    /// Aggregates of |RAVD| (the absolute-value variant).
    pub ravd_abs_mean: Option<f64>,
    pub ravd_abs_sd: Option<f64>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregates per-volume reports (population SD).
pub fn aggregate(reports: &[MetricsReport]) -> Result<Aggregate> {
    if reports.is_empty() {
        return Err(Error::Usage("cannot aggregate zero reports".into()));
    }
    let dices: Vec<f64> = reports.iter().map(|r| r.dice).collect();
    let ious: Vec<f64> = reports.iter().map(|r| r.iou).collect();
    let assds: Vec<f64> = reports.iter().filter_map(|r| r.assd).collect();
    let ravds: Vec<f64> = reports.iter().filter_map(|r| r.ravd).collect();
    let (dice_mean, dice_sd) = mean_sd(&dices);
    let (iou_mean, iou_sd) = mean_sd(&ious);
    let (assd_mean, assd_sd) = if assds.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_sd(&assds);
        (Some(m), Some(s))
    };
    let (ravd_mean, ravd_sd) = if ravds.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_sd(&ravds);
        (Some(m), Some(s))
    };
    let ravd_abs: Vec<f64> = ravds.iter().map(|v| v.abs()).collect();
    let (ravd_abs_mean, ravd_abs_sd) = if ravd_abs.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_sd(&ravd_abs);
        (Some(m), Some(s))
    };
    Ok(Aggregate {
        n: reports.len(),
        dice_mean,
        dice_sd,
        iou_mean,
        iou_sd,
        assd_mean,
        assd_sd,
        assd_defined: assds.len(),
        ravd_mean,
        ravd_sd,
        ravd_defined: ravds.len(),
        ravd_abs_mean,
        ravd_abs_sd,
    })
}

/// Six-significant-digit decimal formatting for the CSV outputs.
pub fn fmt_sig6(v: f64) -> String {
    if !v.is_finite() {
        return "nan".to_string();
    }
    if v == 0.0 {
        return "0.00000".to_string();
    }
    let mag = v.abs().log10().floor() as i32;
    let decimals = (5 - mag).max(0) as usize;
    format!("{v:.decimals$}")
}

fn opt_sig6(v: Option<f64>) -> String {
    v.map(fmt_sig6).unwrap_or_else(|| "nan".to_string())
}

/// CSV with columns `fold,volume_id,dice,iou,assd,ravd`. Aggregate rows are
/// flagged by the `__mean__` / `__sd__` volume ids.
pub fn metrics_csv(fold_label: &str, reports: &[MetricsReport]) -> Result<String> {
    let mut out = String::from("fold,volume_id,dice,iou,assd,ravd\n");
    append_metrics_rows(&mut out, fold_label, reports)?;
    Ok(out)
}

/// Appends per-volume rows plus the flagged aggregate rows for one fold.
pub fn append_metrics_rows(
    out: &mut String,
    fold_label: &str,
    reports: &[MetricsReport],
) -> Result<()> {
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            fold_label,
            r.volume_id,
            fmt_sig6(r.dice),
            fmt_sig6(r.iou),
            opt_sig6(r.assd),
            opt_sig6(r.ravd),
        ));
    }
    let agg = aggregate(reports)?;
    out.push_str(&format!(
        "{},__mean__,{},{},{},{}\n",
        fold_label,
        fmt_sig6(agg.dice_mean),
        fmt_sig6(agg.iou_mean),
        opt_sig6(agg.assd_mean),
        opt_sig6(agg.ravd_mean),
    ));
    out.push_str(&format!(
        "{},__sd__,{},{},{},{}\n",
        fold_label,
        fmt_sig6(agg.dice_sd),
        fmt_sig6(agg.iou_sd),
        opt_sig6(agg.assd_sd),
        opt_sig6(agg.ravd_sd),
    ));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn block(shape: (usize, usize, usize), lo: [usize; 3], hi: [usize; 3]) -> Array3<u8> {
        Array3::from_shape_fn(shape, |(k, r, c)| {
            u8::from(
                (lo[0]..hi[0]).contains(&k)
                    && (lo[1]..hi[1]).contains(&r)
                    && (lo[2]..hi[2]).contains(&c),
            )
        })
    }

    #[test]
    fn dice_identical_and_disjoint() {
        let a = block((3, 8, 8), [0, 1, 1], [2, 4, 4]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let b = block((3, 8, 8), [2, 5, 5], [3, 8, 8]);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn dice_of_half_overlapping_blocks_is_half() {
        // P and R are 2x2 in-plane blocks sharing exactly 2 voxels.
        let p = block((1, 6, 6), [0, 1, 1], [1, 3, 3]);
        let r = block((1, 6, 6), [0, 2, 1], [1, 4, 3]);
        assert_eq!(dice(&p, &r).unwrap(), 0.5);
        assert!((iou(&p, &r).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn both_empty_conventions() {
        let e = Array3::<u8>::zeros((2, 4, 4));
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        let nonempty = block((2, 4, 4), [0, 0, 0], [1, 2, 2]);
        assert_eq!(dice(&e, &nonempty).unwrap(), 0.0);
        assert_eq!(iou(&nonempty, &e).unwrap(), 0.0);
        assert!(assd(&e, &nonempty, [1.0, 1.0, 1.0]).is_err());
        assert!(ravd(&nonempty, &e).is_err());
    }

    #[test]
    fn assd_identical_masks_is_zero() {
        let a = block((3, 8, 8), [0, 2, 2], [2, 6, 6]);
        assert_eq!(assd(&a, &a, [1.0, 1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn assd_two_single_voxels_three_apart() {
        let mut p = Array3::<u8>::zeros((1, 8, 8));
        p[[0, 2, 2]] = 1;
        let mut r = Array3::<u8>::zeros((1, 8, 8));
        r[[0, 2, 5]] = 1;
        assert!((assd(&p, &r, [1.0, 1.0, 1.0]).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn assd_uses_anisotropic_spacing() {
        let mut p = Array3::<u8>::zeros((3, 4, 4));
        p[[0, 1, 1]] = 1;
        let mut r = Array3::<u8>::zeros((3, 4, 4));
        r[[2, 1, 1]] = 1; // two slices apart
        let d = assd(&p, &r, [1.0, 1.0, 3.0]).unwrap();
        assert!((d - 6.0).abs() < 1e-12);
    }

    #[test]
    fn assd_is_symmetric() {
        let p = block((3, 8, 8), [0, 1, 1], [2, 4, 5]);
        let r = block((3, 8, 8), [1, 3, 2], [3, 7, 7]);
        let a = assd(&p, &r, [0.7, 1.1, 2.0]).unwrap();
        let b = assd(&r, &p, [0.7, 1.1, 2.0]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ravd_signs() {
        let r = block((1, 10, 10), [0, 0, 0], [1, 10, 10]); // 100 voxels
        // 100 vs 100 -> 0
        assert_eq!(ravd(&r, &r).unwrap(), 0.0);
        // 80 vs 100 -> -0.2
        let mut p80 = Array3::<u8>::zeros((1, 10, 10));
        for idx in 0..80usize {
            p80[[0, idx / 10, idx % 10]] = 1;
        }
        assert!((ravd(&p80, &r).unwrap() + 0.2).abs() < 1e-12);
        // 120 vs 100 -> +0.2 (use a taller canvas for 120 voxels)
        let r2 = block((2, 10, 10), [0, 0, 0], [1, 10, 10]);
        let mut p120 = Array3::<u8>::zeros((2, 10, 10));
        for idx in 0..120usize {
            p120[[idx / 100, (idx % 100) / 10, idx % 10]] = 1;
        }
        assert!((ravd(&p120, &r2).unwrap() - 0.2).abs() < 1e-12);
        assert!((ravd_abs(&p80, &r).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn iou_dice_identity_holds() {
        let p = block((3, 6, 6), [0, 1, 1], [2, 4, 4]);
        let r = block((3, 6, 6), [1, 2, 2], [3, 5, 5]);
        let d = dice(&p, &r).unwrap();
        let j = iou(&p, &r).unwrap();
        assert!((j - d / (2.0 - d)).abs() < 1e-9);
    }

    #[test]
    fn aggregate_single_volume_has_zero_sd() {
        let reports = vec![MetricsReport {
            volume_id: "v".into(),
            dice: 0.8,
            iou: 0.7,
            assd: Some(1.0),
            ravd: Some(0.1),
        }];
        let a = aggregate(&reports).unwrap();
        assert_eq!(a.dice_sd, 0.0);
        assert_eq!(a.dice_mean, 0.8);
    }

    #[test]
    fn aggregate_two_volumes_mean_and_sd() {
        let reports = vec![
            MetricsReport {
                volume_id: "a".into(),
                dice: 0.8,
                iou: 0.6,
                assd: None,
                ravd: Some(0.0),
            },
            MetricsReport {
                volume_id: "b".into(),
                dice: 0.6,
                iou: 0.4,
                assd: Some(2.0),
                ravd: Some(0.2),
            },
        ];
        let a = aggregate(&reports).unwrap();
        assert!((a.dice_mean - 0.7).abs() < 1e-12);
        assert!((a.dice_sd - 0.1).abs() < 1e-12);
        assert_eq!(a.assd_defined, 1);
        assert_eq!(a.assd_mean, Some(2.0));
        assert!((a.ravd_mean.unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn aggregate_matches_spreadsheet_fixture() {
        // Recomputed externally: dice {0.91, 0.87, 0.95, 0.79} has mean
        // 0.88 and population SD sqrt(0.0035) = 0.0591607978...
        let reports: Vec<MetricsReport> = [0.91, 0.87, 0.95, 0.79]
            .iter()
            .enumerate()
            .map(|(i, &d)| MetricsReport {
                volume_id: format!("v{i}"),
                dice: d,
                iou: d / (2.0 - d),
                assd: Some(1.0),
                ravd: Some(0.0),
            })
            .collect();
        let a = aggregate(&reports).unwrap();
        assert!((a.dice_mean - 0.88).abs() < 1e-12);
        assert!((a.dice_sd - 0.0035f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn csv_format_is_stable() {
        let reports = vec![MetricsReport {
            volume_id: "vol0".into(),
            dice: 0.8123456789,
            iou: 0.6840277,
            assd: Some(2.345678),
            ravd: Some(-0.0123456),
        }];
        let csv = metrics_csv("0", &reports).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "fold,volume_id,dice,iou,assd,ravd");
        assert_eq!(lines[1], "0,vol0,0.812346,0.684028,2.34568,-0.0123456");
        assert!(lines[2].starts_with("0,__mean__,"));
        assert!(lines[3].starts_with("0,__sd__,"));
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(fmt_sig6(0.8123456789), "0.812346");
        assert_eq!(fmt_sig6(2.345678), "2.34568");
        assert_eq!(fmt_sig6(-0.0123456), "-0.0123456");
        assert_eq!(fmt_sig6(12345.6789), "12345.7");
        assert_eq!(fmt_sig6(f64::NAN), "nan");
    }
}
