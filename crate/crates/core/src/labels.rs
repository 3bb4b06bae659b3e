//! Pseudo-label values and their on-disk form: MetaImage masks plus a
//! plain-text manifest (volume_id, slice, provenance, path).

use ndarray::Array2;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mhd;

/// Where a mask came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Manual,
    Semi,
    Ssl,
    Fused,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Manual => "manual",
            Provenance::Semi => "semi",
            Provenance::Ssl => "ssl",
            Provenance::Fused => "fused",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "manual" => Some(Provenance::Manual),
            "semi" => Some(Provenance::Semi),
            "ssl" => Some(Provenance::Ssl),
            "fused" => Some(Provenance::Fused),
            _ => None,
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A per-slice binary label with provenance.
#[derive(Debug, Clone)]
pub struct PseudoMask {
    pub volume_id: String,
    pub slice_index: usize,
    pub mask: Array2<u8>,
    pub provenance: Provenance,
}

impl PseudoMask {
    pub fn new(
        volume_id: impl Into<String>,
        slice_index: usize,
        mask: Array2<u8>,
        provenance: Provenance,
    ) -> Result<Self> {
        if mask.iter().any(|&v| v > 1) {
            return Err(Error::Usage("pseudo mask must be binary".into()));
        }
        Ok(Self {
            volume_id: volume_id.into(),
            slice_index,
            mask,
            provenance,
        })
    }

    pub fn key(&self) -> (String, usize) {
        (self.volume_id.clone(), self.slice_index)
    }

    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|&&v| v == 1).count()
    }
}

/// Writes masks as depth-1 MetaImages plus `manifest.tsv` into `dir`.
pub fn save_label_set(dir: &Path, masks: &[PseudoMask]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for m in masks {
        let file = format!(
            "{}_s{:03}_{}.mhd",
            m.volume_id,
            m.slice_index,
            m.provenance.as_str()
        );
        mhd::write_mask2(&m.mask, &dir.join(&file))?;
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            m.volume_id,
            m.slice_index,
            m.provenance.as_str(),
            file
        ));
    }
    std::fs::write(dir.join("manifest.tsv"), manifest)?;
    Ok(())
}

/// Reads a label set written by [`save_label_set`].
pub fn load_label_set(dir: &Path) -> Result<Vec<PseudoMask>> {
    let manifest_path = dir.join("manifest.tsv");
    if !manifest_path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "label manifest {} does not exist",
            manifest_path.display()
        )));
    }
    let text = std::fs::read_to_string(&manifest_path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(Error::Format {
                path: manifest_path.clone(),
                message: format!("line {} has {} fields, expected 4", ln + 1, parts.len()),
            });
        }
        let slice_index: usize = parts[1].parse().map_err(|_| Error::Format {
            path: manifest_path.clone(),
            message: format!("bad slice index {:?} on line {}", parts[1], ln + 1),
        })?;
        let provenance = Provenance::parse(parts[2]).ok_or_else(|| Error::Format {
            path: manifest_path.clone(),
            message: format!("unknown provenance {:?} on line {}", parts[2], ln + 1),
        })?;
        let mask = mhd::read_mask2(&dir.join(parts[3]))?;
        out.push(PseudoMask {
            volume_id: parts[0].to_string(),
            slice_index,
            mask,
            provenance,
        });
    }
    Ok(out)
}

/// Manifest path of a label set directory.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.tsv")
}
