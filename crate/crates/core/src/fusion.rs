//! Pseudo-label fusion: per-pixel Boolean intersection of the
//! semi-supervised and registration-propagated label sets.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::labels::{Provenance, PseudoMask};

/// Per-pixel logical AND of the two foreground masks. Inputs must describe
/// the same (volume, slice) with provenances `semi` and `ssl`.
pub fn fuse(semi: &PseudoMask, ssl: &PseudoMask) -> Result<PseudoMask> {
    if semi.volume_id != ssl.volume_id || semi.slice_index != ssl.slice_index {
        return Err(Error::Pairing(format!(
            "fuse inputs describe different slices: ({}, {}) vs ({}, {})",
            semi.volume_id, semi.slice_index, ssl.volume_id, ssl.slice_index
        )));
    }
    if semi.mask.dim() != ssl.mask.dim() {
        return Err(Error::Pairing(format!(
            "fuse mask shapes differ for ({}, {}): {:?} vs {:?}",
            semi.volume_id,
            semi.slice_index,
            semi.mask.dim(),
            ssl.mask.dim()
        )));
    }
    if semi.provenance != Provenance::Semi || ssl.provenance != Provenance::Ssl {
        return Err(Error::Usage(format!(
            "fuse expects (semi, ssl) provenances, got ({}, {})",
            semi.provenance, ssl.provenance
        )));
    }
    let mut mask = semi.mask.clone();
    mask.zip_mut_with(&ssl.mask, |a, &b| *a &= b);
    PseudoMask::new(
        semi.volume_id.clone(),
        semi.slice_index,
        mask,
        Provenance::Fused,
    )
}

/// Disagreement handling for [`fuse_dataset_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FusePolicy {
    /// Drop slices whose fused mask is empty while both inputs were
    /// nonempty (the two branches fully disagree). Off by default: empty
    /// fused masks are kept as background-only supervision.
    pub drop_empty_disagreements: bool,
}

/// Fusion result: kept masks plus the keys excluded by the policy.
#[derive(Debug, Clone)]
pub struct FusedSet {
    pub masks: Vec<PseudoMask>,
    pub dropped: Vec<(String, usize)>,
}

/// Fuses two label sets covering identical (volume, slice) keys. Fused
/// masks with empty foreground are retained: they still teach background.
pub fn fuse_dataset(semis: &[PseudoMask], ssls: &[PseudoMask]) -> Result<Vec<PseudoMask>> {
    Ok(fuse_dataset_with(semis, ssls, FusePolicy::default())?.masks)
}

/// Policy-aware fusion over two covering label sets.
pub fn fuse_dataset_with(
    semis: &[PseudoMask],
    ssls: &[PseudoMask],
    policy: FusePolicy,
) -> Result<FusedSet> {
    let mut by_key: BTreeMap<(String, usize), &PseudoMask> = BTreeMap::new();
    for s in ssls {
        if by_key.insert(s.key(), s).is_some() {
            return Err(Error::Pairing(format!(
                "duplicate ssl mask for ({}, {})",
                s.volume_id, s.slice_index
            )));
        }
    }
    let mut seen: BTreeMap<(String, usize), ()> = BTreeMap::new();
    let mut out = Vec::with_capacity(semis.len());
    let mut dropped = Vec::new();
    let mut missing: Vec<String> = Vec::new();
    for s in semis {
        seen.insert(s.key(), ());
        match by_key.get(&s.key()) {
            Some(ssl) => {
                let fused = fuse(s, ssl)?;
                let disagreement = fused.foreground_count() == 0
                    && s.foreground_count() > 0
                    && ssl.foreground_count() > 0;
                if policy.drop_empty_disagreements && disagreement {
                    dropped.push(fused.key());
                } else {
                    out.push(fused);
                }
            }
            None => missing.push(format!("({}, {})", s.volume_id, s.slice_index)),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Pairing(format!(
            "ssl set is missing keys: {}",
            missing.join(", ")
        )));
    }
    let extra: Vec<String> = by_key
        .keys()
        .filter(|k| !seen.contains_key(*k))
        .map(|(v, s)| format!("({v}, {s})"))
        .collect();
    if !extra.is_empty() {
        return Err(Error::Pairing(format!(
            "semi set is missing keys: {}",
            extra.join(", ")
        )));
    }
    Ok(FusedSet {
        masks: out,
        dropped,
    })
}


#[cfg(test)]
mod policy_tests {
    use super::*;
    use ndarray::Array2;

    fn pm(slice: usize, p: Provenance, fg: bool) -> PseudoMask {
        let m = Array2::from_shape_fn((4, 4), |(r, c)| u8::from(fg && r == slice % 4 && c < 2));
        PseudoMask::new("v", slice, m, p).unwrap()
    }

    #[test]
    fn drop_policy_removes_only_true_disagreements() {
        // Slice 0: disjoint nonempty inputs (disagreement, empty fused).
        let semi0 = PseudoMask::new(
            "v",
            0,
            Array2::from_shape_fn((4, 4), |(r, _)| u8::from(r == 0)),
            Provenance::Semi,
        )
        .unwrap();
        let ssl0 = PseudoMask::new(
            "v",
            0,
            Array2::from_shape_fn((4, 4), |(r, _)| u8::from(r == 3)),
            Provenance::Ssl,
        )
        .unwrap();
        // Slice 1: one input empty (fused empty, but not a disagreement).
        let semi1 = pm(1, Provenance::Semi, true);
        let ssl1 = PseudoMask::new("v", 1, Array2::zeros((4, 4)), Provenance::Ssl).unwrap();
        // Slice 2: overlapping inputs (kept).
        let semi2 = pm(2, Provenance::Semi, true);
        let ssl2 = pm(2, Provenance::Ssl, true);

        let semis = vec![semi0.clone(), semi1.clone(), semi2.clone()];
        let ssls = vec![ssl0.clone(), ssl1.clone(), ssl2.clone()];

        let default = fuse_dataset_with(&semis, &ssls, FusePolicy::default()).unwrap();
        assert_eq!(default.masks.len(), 3);
        assert!(default.dropped.is_empty());

        let policy = FusePolicy {
            drop_empty_disagreements: true,
        };
        let strict = fuse_dataset_with(&semis, &ssls, policy).unwrap();
        assert_eq!(strict.masks.len(), 2);
        assert_eq!(strict.dropped, vec![("v".to_string(), 0)]);
        assert!(strict.masks.iter().all(|m| m.slice_index != 0));
    }
}
