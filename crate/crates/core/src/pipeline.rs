//! File-based experiment pipeline. Stages communicate only through files
//! (manifests, MetaImage volumes/masks, checkpoints); each stage writes a
//! machine-readable run record and is skipped when its inputs and config
//! are unchanged, so commands are resumable and idempotent.

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{DatasetKind, ExperimentConfig};
use crate::error::{Error, Result};
use crate::fusion::fuse_dataset_with;
use crate::labels::{load_label_set, save_label_set};
use crate::metrics::{append_metrics_rows, evaluate_volume, fmt_sig6, MetricsReport};
use crate::mhd;
use crate::params::{hex_string, load_checkpoint, save_checkpoint, ParamSet};
use crate::phantom::generate_phantom;
use crate::reg::{propagate_labels, train_registration, RegNet};
use crate::semi::{emit_semi_labels, labeled_set, semi_train, unlabeled_set, warmup_train};
use crate::trainer::{build_mixed_dataset_excluding, predict_volume, train_final, train_fs_lcs};
use crate::unet::UNet;
use crate::volume::{
    normalize_intensity, resample_inplane, resample_mask_inplane, split_folds, CentralAnnotation,
    FoldSplit, Volume,
};

/// Stable per-stage seed derivation from the experiment seed.
pub fn derive_seed(root: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
}

/// Whether a stage actually executed or was already up to date.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    SkippedUpToDate,
}

/// Stage provenance written next to every stage output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub fold: Option<usize>,
    pub seed: u64,
    pub config_hash: String,
    /// Full configuration, sufficient to re-execute bit-identically.
    pub config_toml: String,
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub metrics: BTreeMap<String, f64>,
    pub elapsed_seconds: f64,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(hex_string(&h.finalize()))
}

/// One dataset volume on disk.
#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub id: String,
    pub volume_path: PathBuf,
    pub gt_path: PathBuf,
    pub central_index: usize,
}

/// In-memory view of the dataset a stage works on.
pub struct LoadedDataset {
    /// Normalized volumes at the working resolution.
    pub volumes: Vec<Volume>,
    /// Exact ground-truth masks (full volumes; training stages may only
    /// touch the central slice).
    pub ground_truth: Vec<Array3<u8>>,
    pub spacings: Vec<[f32; 3]>,
}

impl LoadedDataset {
    pub fn central_annotations(&self, ids: &[String]) -> Result<Vec<CentralAnnotation>> {
        let mut out = Vec::new();
        for id in ids {
            let i = self
                .volumes
                .iter()
                .position(|v| &v.id == id)
                .ok_or_else(|| Error::Pairing(format!("unknown volume id {id}")))?;
            let c = self.volumes[i].central_index();
            let mask = self.ground_truth[i]
                .index_axis(ndarray::Axis(0), c)
                .to_owned();
            out.push(CentralAnnotation::for_volume(&self.volumes[i], mask)?);
        }
        Ok(out)
    }

    pub fn subset(&self, ids: &[String]) -> Result<(Vec<Volume>, Vec<Array3<u8>>)> {
        let mut vols = Vec::new();
        let mut gts = Vec::new();
        for id in ids {
            let i = self
                .volumes
                .iter()
                .position(|v| &v.id == id)
                .ok_or_else(|| Error::Pairing(format!("unknown volume id {id}")))?;
            vols.push(self.volumes[i].clone());
            gts.push(self.ground_truth[i].clone());
        }
        Ok((vols, gts))
    }
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    fn out(&self) -> &Path {
        &self.cfg.out_dir
    }

    fn dataset_dir(&self) -> PathBuf {
        self.out().join("dataset")
    }

    fn fold_dir(&self, fold: usize) -> PathBuf {
        self.out().join(format!("fold{fold}"))
    }

    fn check_fold(&self, fold: usize) -> Result<()> {
        if fold >= self.cfg.folds {
            return Err(Error::Config(format!(
                "fold {fold} out of range for {} folds",
                self.cfg.folds
            )));
        }
        Ok(())
    }

    // ---------------------------------------------------------------
    // Stage plumbing
    // ---------------------------------------------------------------

    fn run_stage<T>(
        &self,
        command: &str,
        fold: Option<usize>,
        stage_dir: &Path,
        input_hashes: BTreeMap<String, String>,
        body: impl FnOnce() -> Result<(Vec<String>, BTreeMap<String, f64>, T)>,
        reload: impl FnOnce() -> Result<T>,
    ) -> Result<(StageOutcome, T)> {
        let record_path = stage_dir.join("run.json");
        let config_hash = self.cfg.hash();
        if let Ok(text) = std::fs::read_to_string(&record_path) {
            if let Ok(prev) = serde_json::from_str::<RunRecord>(&text) {
                let outputs_exist = prev
                    .outputs
                    .iter()
                    .all(|rel| stage_dir.join(rel).exists());
                if prev.config_hash == config_hash
                    && prev.input_hashes == input_hashes
                    && outputs_exist
                {
                    return Ok((StageOutcome::SkippedUpToDate, reload()?));
                }
            }
        }
        std::fs::create_dir_all(stage_dir)?;
        let started = Instant::now();
        let (outputs, metrics, value) = body()?;
        let record = RunRecord {
            command: command.to_string(),
            fold,
            seed: self.cfg.seed,
            config_hash,
            config_toml: self.cfg.to_toml(),
            input_hashes,
            outputs,
            metrics,
            elapsed_seconds: started.elapsed().as_secs_f64(),
        };
        std::fs::write(
            &record_path,
            serde_json::to_string_pretty(&record).expect("record serializes"),
        )?;
        Ok((StageOutcome::Ran, value))
    }

    fn dataset_manifest_path(&self) -> PathBuf {
        self.dataset_dir().join("manifest.tsv")
    }

    fn read_manifest(&self) -> Result<Vec<DatasetRecord>> {
        let path = self.dataset_manifest_path();
        if !path.exists() {
            return Err(Error::MissingPrerequisite(format!(
                "dataset manifest {} not found; run `colabseg synth` first",
                path.display()
            )));
        }
        let dir = self.dataset_dir();
        let text = std::fs::read_to_string(&path)?;
        let mut out = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(Error::Format {
                    path: path.clone(),
                    message: format!("line {}: expected 3 fields", ln + 1),
                });
            }
            let central: usize = parts[2].parse().map_err(|_| Error::Format {
                path: path.clone(),
                message: format!("line {}: bad central index", ln + 1),
            })?;
            let volume_path = dir.join(parts[1]);
            let stem = parts[1].trim_end_matches(".mhd");
            out.push(DatasetRecord {
                id: parts[0].to_string(),
                volume_path,
                gt_path: dir.join(format!("{stem}_gt.mhd")),
                central_index: central,
            });
        }
        Ok(out)
    }

    /// Content hash of the dataset: manifest plus every referenced file.
    fn dataset_hash(&self) -> Result<String> {
        match self.cfg.dataset.kind {
            DatasetKind::Phantom => {
                let records = self.read_manifest()?;
                let mut h = Sha256::new();
                h.update(std::fs::read(self.dataset_manifest_path())?);
                for rec in records {
                    for p in [&rec.volume_path, &rec.gt_path] {
                        h.update(std::fs::read(p)?);
                        let raw = p.with_extension("raw");
                        h.update(std::fs::read(raw)?);
                    }
                }
                Ok(hex_string(&h.finalize()))
            }
            DatasetKind::Promise12 => {
                // Real data is immutable input; hash the file listing only.
                let root = self.cfg.dataset.path.clone().expect("validated");
                let mut names: Vec<String> = std::fs::read_dir(&root)?
                    .filter_map(|e| e.ok())
                    .map(|e| e.file_name().to_string_lossy().into_owned())
                    .collect();
                names.sort();
                let mut h = Sha256::new();
                for n in names {
                    h.update(n.as_bytes());
                }
                Ok(hex_string(&h.finalize()))
            }
        }
    }

    /// Loads, resamples, and normalizes the dataset.
    pub fn load_dataset(&self) -> Result<LoadedDataset> {
        let target = (
            self.cfg.dataset.resample_height,
            self.cfg.dataset.resample_width,
        );
        let pairs: Vec<(Volume, Array3<u8>)> = match self.cfg.dataset.kind {
            DatasetKind::Phantom => {
                let records = self.read_manifest()?;
                let mut out = Vec::with_capacity(records.len());
                for rec in records {
                    let v = mhd::read_metaimage(&rec.volume_path)?;
                    let gt = mhd::read_mask3(&rec.gt_path)?;
                    let mut v = Volume { id: rec.id, ..v };
                    if (v.height(), v.width()) != target {
                        let gt2 = resample_gt(&gt, target)?;
                        v = resample_inplane(&v, target)?;
                        out.push((v, gt2));
                    } else {
                        out.push((v, gt));
                    }
                }
                out
            }
            DatasetKind::Promise12 => {
                let root = self.cfg.dataset.path.clone().expect("validated");
                load_promise12(&root, target)?
            }
        };
        let mut volumes = Vec::with_capacity(pairs.len());
        let mut ground_truth = Vec::with_capacity(pairs.len());
        let mut spacings = Vec::with_capacity(pairs.len());
        for (v, gt) in pairs {
            spacings.push(v.spacing);
            ground_truth.push(gt);
            volumes.push(normalize_intensity(&v));
        }
        Ok(LoadedDataset {
            volumes,
            ground_truth,
            spacings,
        })
    }

    /// Deterministic fold assignment for the current config.
    pub fn folds(&self, ids: &[String]) -> Result<FoldSplit> {
        split_folds(ids, self.cfg.folds, derive_seed(self.cfg.seed, "folds"))
    }

    fn training_data(
        &self,
        fold: usize,
    ) -> Result<(LoadedDataset, Vec<String>, Vec<String>)> {
        let ds = self.load_dataset()?;
        let ids: Vec<String> = ds.volumes.iter().map(|v| v.id.clone()).collect();
        let split = self.folds(&ids)?;
        Ok((ds, split.training_ids(fold), split.validation_ids(fold)))
    }

    // ---------------------------------------------------------------
    // Stages
    // ---------------------------------------------------------------

    /// Generates the phantom dataset (MetaImage pairs + manifest).
    pub fn synth(&self) -> Result<StageOutcome> {
        if self.cfg.dataset.kind != DatasetKind::Phantom {
            return Err(Error::Config(
                "synth is only meaningful for the phantom dataset".into(),
            ));
        }
        let dir = self.dataset_dir();
        let mut inputs = BTreeMap::new();
        inputs.insert(
            "phantom_spec".to_string(),
            hash_of_string(&toml::to_string(&self.cfg.dataset.phantom).unwrap()),
        );
        let (outcome, ()) = self.run_stage(
            "synth",
            None,
            &dir,
            inputs,
            || {
                let data = generate_phantom(&self.cfg.dataset.phantom)?;
                let mut manifest = String::new();
                let mut outputs = vec!["manifest.tsv".to_string()];
                for (v, gt) in &data {
                    let vol_file = format!("{}.mhd", v.id);
                    mhd::write_metaimage(v, &dir.join(&vol_file), mhd::ElementType::Float, false)?;
                    let gt_file = format!("{}_gt.mhd", v.id);
                    mhd::write_mask3(gt, v.spacing, &dir.join(&gt_file))?;
                    manifest.push_str(&format!(
                        "{}\t{}\t{}\n",
                        v.id,
                        vol_file,
                        v.central_index()
                    ));
                    outputs.push(vol_file);
                    outputs.push(gt_file);
                }
                std::fs::write(dir.join("manifest.tsv"), manifest)?;
                let mut metrics = BTreeMap::new();
                metrics.insert("volumes".to_string(), data.len() as f64);
                Ok((outputs, metrics, ()))
            },
            || Ok(()),
        )?;
        Ok(outcome)
    }

    /// Warm-up + joint semi-supervised training; emits y_SEMI labels.
    pub fn train_semi(&self, fold: usize) -> Result<StageOutcome> {
        self.check_fold(fold)?;
        let stage_dir = self.fold_dir(fold).join("semi");
        let mut inputs = BTreeMap::new();
        inputs.insert("dataset".into(), self.dataset_hash()?);
        let (outcome, ()) = self.run_stage(
            "train-semi",
            Some(fold),
            &stage_dir,
            inputs,
            || {
                let (ds, train_ids, _) = self.training_data(fold)?;
                let (train_vols, _) = ds.subset(&train_ids)?;
                let centrals = ds.central_annotations(&train_ids)?;
                let labeled = labeled_set(&train_vols, &centrals)?;
                let unlabeled = unlabeled_set(&train_vols);
                let seed = derive_seed(self.cfg.seed, &format!("fold{fold}/semi"));
                let cfg = self.cfg.stamped_semi(seed);
                let loss_cfg = self.cfg.seg.loss_config();
                let mut net = UNet::<f32>::new(
                    self.cfg.seg.unet_config(),
                    derive_seed(self.cfg.seed, &format!("fold{fold}/semi-init")),
                )?;
                let warm_trace = warmup_train(&mut net, &labeled, &cfg, &loss_cfg)?;
                let semi_trace = semi_train(&mut net, &labeled, &unlabeled, &cfg, &loss_cfg)?;
                let labels = emit_semi_labels(&net, &train_vols)?;
                save_label_set(&stage_dir.join("labels"), &labels)?;
                save_checkpoint(&net.params, &stage_dir.join("checkpoint.ckpt"))?;
                write_trace(&stage_dir.join("loss.csv"), &[&warm_trace, &semi_trace])?;
                let mut metrics = BTreeMap::new();
                if let Some(&l) = warm_trace.last() {
                    metrics.insert("warmup_final_loss".into(), l);
                }
                if let Some(&l) = semi_trace.last() {
                    metrics.insert("semi_final_loss".into(), l);
                }
                metrics.insert("labels".into(), labels.len() as f64);
                Ok((
                    vec![
                        "checkpoint.ckpt".into(),
                        "loss.csv".into(),
                        "labels/manifest.tsv".into(),
                    ],
                    metrics,
                    (),
                ))
            },
            || Ok(()),
        )?;
        Ok(outcome)
    }

    /// Trains the registration network on adjacent slice pairs (images
    /// only; no annotation is passed anywhere near this stage).
    pub fn train_reg(&self, fold: usize) -> Result<StageOutcome> {
        self.check_fold(fold)?;
        let stage_dir = self.fold_dir(fold).join("reg");
        let mut inputs = BTreeMap::new();
        inputs.insert("dataset".into(), self.dataset_hash()?);
        let (outcome, ()) = self.run_stage(
            "train-reg",
            Some(fold),
            &stage_dir,
            inputs,
            || {
                let (ds, train_ids, _) = self.training_data(fold)?;
                let (train_vols, _) = ds.subset(&train_ids)?;
                let seed = derive_seed(self.cfg.seed, &format!("fold{fold}/reg"));
                let cfg = self.cfg.stamped_reg(seed);
                let mut net = RegNet::<f32>::new(cfg)?;
                let trace = train_registration(&mut net, &train_vols)?;
                save_checkpoint(&net.params, &stage_dir.join("checkpoint.ckpt"))?;
                write_trace(&stage_dir.join("loss.csv"), &[&trace])?;
                let mut metrics = BTreeMap::new();
                if let Some(&l) = trace.last() {
                    metrics.insert("reg_final_loss".into(), l);
                }
                Ok((
                    vec!["checkpoint.ckpt".into(), "loss.csv".into()],
                    metrics,
                    (),
                ))
            },
            || Ok(()),
        )?;
        Ok(outcome)
    }

    /// Center-out label propagation; emits y_SSL labels.
    pub fn propagate(&self, fold: usize) -> Result<StageOutcome> {
        self.check_fold(fold)?;
        let stage_dir = self.fold_dir(fold).join("ssl");
        let reg_ckpt = self.fold_dir(fold).join("reg").join("checkpoint.ckpt");
        if !reg_ckpt.exists() {
            return Err(Error::MissingPrerequisite(format!(
                "registration checkpoint {} not found; run `colabseg train-reg --fold {fold}` first",
                reg_ckpt.display()
            )));
        }
        let mut inputs = BTreeMap::new();
        inputs.insert("dataset".into(), self.dataset_hash()?);
        inputs.insert("reg_checkpoint".into(), sha256_file(&reg_ckpt)?);
        let (outcome, ()) = self.run_stage(
            "propagate",
            Some(fold),
            &stage_dir,
            inputs,
            || {
                let (ds, train_ids, _) = self.training_data(fold)?;
                let (train_vols, _) = ds.subset(&train_ids)?;
                let centrals = ds.central_annotations(&train_ids)?;
                let seed = derive_seed(self.cfg.seed, &format!("fold{fold}/reg"));
                let net = regnet_from_checkpoint(self.cfg.stamped_reg(seed), &reg_ckpt)?;
                let mut labels = Vec::new();
                for (v, c) in train_vols.iter().zip(centrals.iter()) {
                    labels.extend(propagate_labels(&net, v, c)?);
                }
                save_label_set(&stage_dir.join("labels"), &labels)?;
                let mut metrics = BTreeMap::new();
                metrics.insert("labels".into(), labels.len() as f64);
                Ok((vec!["labels/manifest.tsv".into()], metrics, ()))
            },
            || Ok(()),
        )?;
        Ok(outcome)
    }

    /// Fuses y_SEMI and y_SSL into y_final by intersection.
    pub fn fuse(&self, fold: usize) -> Result<StageOutcome> {
        self.check_fold(fold)?;
        let stage_dir = self.fold_dir(fold).join("fused");
        let semi_dir = self.fold_dir(fold).join("semi").join("labels");
        let ssl_dir = self.fold_dir(fold).join("ssl").join("labels");
        for (dir, cmd) in [(&semi_dir, "train-semi"), (&ssl_dir, "propagate")] {
            if !crate::labels::manifest_path(dir).exists() {
                return Err(Error::MissingPrerequisite(format!(
                    "label set {} not found; run `colabseg {cmd} --fold {fold}` first",
                    dir.display()
                )));
            }
        }
        let mut inputs = BTreeMap::new();
        inputs.insert("semi_labels".into(), label_set_hash(&semi_dir)?);
        inputs.insert("ssl_labels".into(), label_set_hash(&ssl_dir)?);
        let (outcome, ()) = self.run_stage(
            "fuse",
            Some(fold),
            &stage_dir,
            inputs,
            || {
                let semis = load_label_set(&semi_dir)?;
                let ssls = load_label_set(&ssl_dir)?;
                let fused = fuse_dataset_with(&semis, &ssls, self.cfg.fusion)?;
                save_label_set(&stage_dir.join("labels"), &fused.masks)?;
                let mut dropped_tsv = String::new();
                for (id, n) in &fused.dropped {
                    dropped_tsv.push_str(&format!("{id}\t{n}\n"));
                }
                std::fs::write(stage_dir.join("dropped.tsv"), dropped_tsv)?;
                let mut metrics = BTreeMap::new();
                metrics.insert("labels".into(), fused.masks.len() as f64);
                metrics.insert("dropped".into(), fused.dropped.len() as f64);
                let empty = fused
                    .masks
                    .iter()
                    .filter(|m| m.foreground_count() == 0)
                    .count();
                metrics.insert("empty_foreground".into(), empty as f64);
                Ok((
                    vec!["labels/manifest.tsv".into(), "dropped.tsv".into()],
                    metrics,
                    (),
                ))
            },
            || Ok(()),
        )?;
        Ok(outcome)
    }

    /// Trains the final network on manual + fused labels.
    pub fn train_final(&self, fold: usize) -> Result<StageOutcome> {
        self.check_fold(fold)?;
        let stage_dir = self.fold_dir(fold).join("final");
        let fused_dir = self.fold_dir(fold).join("fused").join("labels");
        if !crate::labels::manifest_path(&fused_dir).exists() {
            return Err(Error::MissingPrerequisite(format!(
                "fused labels {} not found; run `colabseg fuse --fold {fold}` first",
                fused_dir.display()
            )));
        }
        let semi_ckpt = self.fold_dir(fold).join("semi").join("checkpoint.ckpt");
        if self.cfg.final_train.warm_start && !semi_ckpt.exists() {
            return Err(Error::MissingPrerequisite(format!(
                "warm start needs {}; run `colabseg train-semi --fold {fold}` first",
                semi_ckpt.display()
            )));
        }
        let mut inputs = BTreeMap::new();
        inputs.insert("dataset".into(), self.dataset_hash()?);
        inputs.insert("fused_labels".into(), label_set_hash(&fused_dir)?);
        if self.cfg.final_train.warm_start {
            inputs.insert("semi_checkpoint".into(), sha256_file(&semi_ckpt)?);
        }
        let (outcome, ()) = self.run_stage(
            "train-final",
            Some(fold),
            &stage_dir,
            inputs,
            || {
                let (ds, train_ids, _) = self.training_data(fold)?;
                let (train_vols, _) = ds.subset(&train_ids)?;
                let centrals = ds.central_annotations(&train_ids)?;
                let fused = load_label_set(&fused_dir)?;
                let excluded = read_dropped(&self.fold_dir(fold).join("fused"))?;
                let mixed =
                    build_mixed_dataset_excluding(&train_vols, &centrals, &fused, &excluded)?;
                let seed = derive_seed(self.cfg.seed, &format!("fold{fold}/final"));
                let cfg = self.cfg.stamped_final(seed);
                let mut net = if self.cfg.final_train.warm_start {
                    unet_from_checkpoint(&self.cfg, &semi_ckpt)?
                } else {
                    UNet::<f32>::new(
                        self.cfg.seg.unet_config(),
                        derive_seed(self.cfg.seed, &format!("fold{fold}/final-init")),
                    )?
                };
                let trace = train_final(&mut net, &mixed, &cfg, &self.cfg.seg.loss_config())?;
                save_checkpoint(&net.params, &stage_dir.join("checkpoint.ckpt"))?;
                write_trace(&stage_dir.join("loss.csv"), &[&trace])?;
                let mut metrics = BTreeMap::new();
                if let Some(&l) = trace.last() {
                    metrics.insert("final_loss".into(), l);
                }
                metrics.insert("entries".into(), mixed.len() as f64);
                Ok((
                    vec!["checkpoint.ckpt".into(), "loss.csv".into()],
                    metrics,
                    (),
                ))
            },
            || Ok(()),
        )?;
        Ok(outcome)
    }

    /// Trains the FS-LCS baseline (central slices only).
    pub fn train_baseline(&self, fold: usize) -> Result<StageOutcome> {
        self.check_fold(fold)?;
        let stage_dir = self.fold_dir(fold).join("baseline");
        let mut inputs = BTreeMap::new();
        inputs.insert("dataset".into(), self.dataset_hash()?);
        let (outcome, ()) = self.run_stage(
            "train-baseline",
            Some(fold),
            &stage_dir,
            inputs,
            || {
                let (ds, train_ids, _) = self.training_data(fold)?;
                let (train_vols, _) = ds.subset(&train_ids)?;
                let centrals = ds.central_annotations(&train_ids)?;
                let seed = derive_seed(self.cfg.seed, &format!("fold{fold}/baseline"));
                let cfg = self.cfg.stamped_final(seed);
                let mut net = UNet::<f32>::new(
                    self.cfg.seg.unet_config(),
                    derive_seed(self.cfg.seed, &format!("fold{fold}/baseline-init")),
                )?;
                let trace =
                    train_fs_lcs(&mut net, &train_vols, &centrals, &cfg, &self.cfg.seg.loss_config())?;
                save_checkpoint(&net.params, &stage_dir.join("checkpoint.ckpt"))?;
                write_trace(&stage_dir.join("loss.csv"), &[&trace])?;
                let mut metrics = BTreeMap::new();
                if let Some(&l) = trace.last() {
                    metrics.insert("baseline_loss".into(), l);
                }
                Ok((
                    vec!["checkpoint.ckpt".into(), "loss.csv".into()],
                    metrics,
                    (),
                ))
            },
            || Ok(()),
        )?;
        Ok(outcome)
    }

    /// Evaluates the final network and the baseline on the validation fold.
    pub fn evaluate(&self, fold: usize) -> Result<(StageOutcome, FoldEval)> {
        self.check_fold(fold)?;
        let stage_dir = self.fold_dir(fold).join("eval");
        let final_ckpt = self.fold_dir(fold).join("final").join("checkpoint.ckpt");
        let base_ckpt = self.fold_dir(fold).join("baseline").join("checkpoint.ckpt");
        for (p, cmd) in [(&final_ckpt, "train-final"), (&base_ckpt, "train-baseline")] {
            if !p.exists() {
                return Err(Error::MissingPrerequisite(format!(
                    "checkpoint {} not found; run `colabseg {cmd} --fold {fold}` first",
                    p.display()
                )));
            }
        }
        let mut inputs = BTreeMap::new();
        inputs.insert("dataset".into(), self.dataset_hash()?);
        inputs.insert("final_checkpoint".into(), sha256_file(&final_ckpt)?);
        inputs.insert("baseline_checkpoint".into(), sha256_file(&base_ckpt)?);
        self.run_stage(
            "evaluate",
            Some(fold),
            &stage_dir,
            inputs,
            || {
                let (ds, _, val_ids) = self.training_data(fold)?;
                let final_net = unet_from_checkpoint(&self.cfg, &final_ckpt)?;
                let base_net = unet_from_checkpoint(&self.cfg, &base_ckpt)?;
                let mut ours = Vec::new();
                let mut fslcs = Vec::new();
                for id in &val_ids {
                    let i = ds.volumes.iter().position(|v| &v.id == id).unwrap();
                    let v = &ds.volumes[i];
                    let gt = &ds.ground_truth[i];
                    let spacing = ds.spacings[i];
                    let pred = predict_volume(&final_net, v)?;
                    ours.push(evaluate_volume(id, &pred, gt, spacing)?);
                    let pred_b = predict_volume(&base_net, v)?;
                    fslcs.push(evaluate_volume(id, &pred_b, gt, spacing)?);
                }
                let fold_label = fold.to_string();
                let mut csv_ours = String::from("fold,volume_id,dice,iou,assd,ravd\n");
                append_metrics_rows(&mut csv_ours, &fold_label, &ours)?;
                std::fs::write(stage_dir.join("metrics_ours.csv"), &csv_ours)?;
                let mut csv_b = String::from("fold,volume_id,dice,iou,assd,ravd\n");
                append_metrics_rows(&mut csv_b, &fold_label, &fslcs)?;
                std::fs::write(stage_dir.join("metrics_fslcs.csv"), &csv_b)?;
                // Full-precision sidecar; the CSVs carry the rounded
                // 6-significant-digit presentation.
                let eval = FoldEval { ours, fslcs };
                std::fs::write(
                    stage_dir.join("reports.json"),
                    serde_json::to_string_pretty(&eval).expect("reports serialize"),
                )?;
                let mut metrics = BTreeMap::new();
                let agg = crate::metrics::aggregate(&eval.ours)?;
                metrics.insert("ours_dice_mean".into(), agg.dice_mean);
                let agg_b = crate::metrics::aggregate(&eval.fslcs)?;
                metrics.insert("fslcs_dice_mean".into(), agg_b.dice_mean);
                Ok((
                    vec![
                        "metrics_ours.csv".into(),
                        "metrics_fslcs.csv".into(),
                        "reports.json".into(),
                    ],
                    metrics,
                    eval,
                ))
            },
            || {
                let text = std::fs::read_to_string(stage_dir.join("reports.json"))?;
                serde_json::from_str(&text).map_err(|e| Error::Format {
                    path: stage_dir.join("reports.json"),
                    message: format!("bad evaluation sidecar: {e}"),
                })
            },
        )
    }

    /// Runs every stage for one fold in order.
    pub fn run_fold(&self, fold: usize) -> Result<FoldEval> {
        self.train_semi(fold)?;
        self.train_reg(fold)?;
        self.propagate(fold)?;
        self.fuse(fold)?;
        self.train_final(fold)?;
        self.train_baseline(fold)?;
        let (_, eval) = self.evaluate(fold)?;
        Ok(eval)
    }

    /// Full cross-validation: all stages per fold, then the summary tables.
    pub fn crossval(&self) -> Result<CrossvalSummary> {
        if self.cfg.dataset.kind == DatasetKind::Phantom {
            self.synth()?;
        }
        let ds = self.load_dataset()?;
        let ids: Vec<String> = ds.volumes.iter().map(|v| v.id.clone()).collect();
        let split = self.folds(&ids)?;
        let mut folds_tsv = String::new();
        for (id, f) in split.iter() {
            folds_tsv.push_str(&format!("{id}\t{f}\n"));
        }
        std::fs::create_dir_all(self.out())?;
        std::fs::write(self.out().join("folds.tsv"), folds_tsv)?;
        drop(ds);

        let mut per_fold = Vec::new();
        for fold in 0..self.cfg.folds {
            per_fold.push(self.run_fold(fold)?);
        }

        let mut csv_ours = String::from("fold,volume_id,dice,iou,assd,ravd\n");
        let mut csv_fslcs = String::from("fold,volume_id,dice,iou,assd,ravd\n");
        let mut all_ours = Vec::new();
        let mut all_fslcs = Vec::new();
        for (fold, eval) in per_fold.iter().enumerate() {
            let label = fold.to_string();
            append_metrics_rows(&mut csv_ours, &label, &eval.ours)?;
            append_metrics_rows(&mut csv_fslcs, &label, &eval.fslcs)?;
            all_ours.extend(eval.ours.iter().cloned());
            all_fslcs.extend(eval.fslcs.iter().cloned());
        }
        append_metrics_rows(&mut csv_ours, "all", &all_ours)?;
        append_metrics_rows(&mut csv_fslcs, "all", &all_fslcs)?;
        std::fs::write(self.out().join("metrics_ours.csv"), &csv_ours)?;
        std::fs::write(self.out().join("metrics_fslcs.csv"), &csv_fslcs)?;

        let summary = CrossvalSummary {
            ours: crate::metrics::aggregate(&all_ours)?,
            fslcs: crate::metrics::aggregate(&all_fslcs)?,
            per_fold,
        };
        std::fs::write(self.out().join("table1.csv"), summary.table_csv())?;
        Ok(summary)
    }
}

/// Per-fold evaluation results for both methods.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FoldEval {
    pub ours: Vec<MetricsReport>,
    pub fslcs: Vec<MetricsReport>,
}

/// Aggregated cross-validation outcome.
#[derive(Debug, Clone)]
pub struct CrossvalSummary {
    pub ours: crate::metrics::Aggregate,
    pub fslcs: crate::metrics::Aggregate,
    pub per_fold: Vec<FoldEval>,
}

impl CrossvalSummary {
    /// Mean +/- SD per method, one row per method.
    pub fn table_csv(&self) -> String {
        let mut out = String::from(
            "method,dice_mean,dice_sd,iou_mean,iou_sd,assd_mean,assd_sd,\
             ravd_mean,ravd_sd,ravd_abs_mean,ravd_abs_sd\n",
        );
        for (name, agg) in [("ours", &self.ours), ("fs_lcs", &self.fslcs)] {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                name,
                fmt_sig6(agg.dice_mean),
                fmt_sig6(agg.dice_sd),
                fmt_sig6(agg.iou_mean),
                fmt_sig6(agg.iou_sd),
                agg.assd_mean.map(fmt_sig6).unwrap_or_else(|| "nan".into()),
                agg.assd_sd.map(fmt_sig6).unwrap_or_else(|| "nan".into()),
                agg.ravd_mean.map(fmt_sig6).unwrap_or_else(|| "nan".into()),
                agg.ravd_sd.map(fmt_sig6).unwrap_or_else(|| "nan".into()),
                agg.ravd_abs_mean.map(fmt_sig6).unwrap_or_else(|| "nan".into()),
                agg.ravd_abs_sd.map(fmt_sig6).unwrap_or_else(|| "nan".into()),
            ));
        }
        out
    }
}

fn hash_of_string(s: &str) -> String {
    let mut h = Sha256::new();
    h.update(s.as_bytes());
    hex_string(&h.finalize())
}

fn read_dropped(fused_stage_dir: &Path) -> Result<Vec<(String, usize)>> {
    let path = fused_stage_dir.join("dropped.tsv");
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for line in std::fs::read_to_string(&path)?.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, n) = line.split_once('\t').ok_or_else(|| Error::Format {
            path: path.clone(),
            message: format!("bad dropped entry {line:?}"),
        })?;
        let n: usize = n.parse().map_err(|_| Error::Format {
            path: path.clone(),
            message: format!("bad slice index {n:?}"),
        })?;
        out.push((id.to_string(), n));
    }
    Ok(out)
}

fn label_set_hash(dir: &Path) -> Result<String> {
    let manifest = crate::labels::manifest_path(dir);
    let text = std::fs::read_to_string(&manifest)?;
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    for line in text.lines() {
        if let Some(file) = line.split('\t').nth(3) {
            h.update(std::fs::read(dir.join(file))?);
            h.update(std::fs::read(dir.join(file).with_extension("raw"))?);
        }
    }
    Ok(hex_string(&h.finalize()))
}

fn write_trace(path: &Path, phases: &[&Vec<f64>]) -> Result<()> {
    let mut out = String::from("epoch,mean_loss\n");
    let mut epoch = 0usize;
    for phase in phases {
        for &l in phase.iter() {
            out.push_str(&format!("{epoch},{}\n", fmt_sig6(l)));
            epoch += 1;
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn resample_gt(gt: &Array3<u8>, target: (usize, usize)) -> Result<Array3<u8>> {
    let (n, _, _) = gt.dim();
    let mut out = Array3::zeros((n, target.0, target.1));
    for k in 0..n {
        let slice = gt.index_axis(ndarray::Axis(0), k).to_owned();
        let r = resample_mask_inplane(&slice, target)?;
        out.index_axis_mut(ndarray::Axis(0), k).assign(&r);
    }
    Ok(out)
}

fn check_params_match<F: crate::autodiff::Scalar>(
    expected: &ParamSet<F>,
    loaded: &ParamSet<f32>,
    path: &Path,
) -> Result<()> {
    if expected.len() != loaded.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!(
                "checkpoint has {} tensors, architecture expects {}",
                loaded.len(),
                expected.len()
            ),
        });
    }
    for ((en, ev), (ln, lv)) in expected.iter().zip(loaded.iter()) {
        if en != ln || ev.shape() != lv.shape() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!(
                    "checkpoint tensor {ln} {:?} does not match architecture {en} {:?}",
                    lv.shape(),
                    ev.shape()
                ),
            });
        }
    }
    Ok(())
}

fn unet_from_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<UNet<f32>> {
    let params = load_checkpoint(path)?;
    let template = UNet::<f32>::new(cfg.seg.unet_config(), 0)?;
    check_params_match(&template.params, &params, path)?;
    Ok(UNet {
        cfg: template.cfg,
        params,
    })
}

fn regnet_from_checkpoint(cfg: crate::reg::RegNetConfig, path: &Path) -> Result<RegNet<f32>> {
    let params = load_checkpoint(path)?;
    let template = RegNet::<f32>::new(cfg)?;
    check_params_match(&template.params, &params, path)?;
    Ok(RegNet {
        cfg: template.cfg,
        params,
    })
}


/// Reads a PROMISE12-style directory: `Case*.mhd` volumes paired with
/// `Case*_segmentation.mhd` references, resampled to the working
/// resolution.
pub fn load_promise12(root: &Path, target: (usize, usize)) -> Result<Vec<(Volume, Array3<u8>)>> {
    let mut cases: Vec<String> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".mhd") && !n.contains("_segmentation"))
        .map(|n| n.trim_end_matches(".mhd").to_string())
        .collect();
    cases.sort();
    if cases.is_empty() {
        return Err(Error::MissingPrerequisite(format!(
            "no .mhd volumes found under {}",
            root.display()
        )));
    }
    let mut out = Vec::with_capacity(cases.len());
    for case in cases {
        let vol_path = root.join(format!("{case}.mhd"));
        let seg_path = root.join(format!("{case}_segmentation.mhd"));
        if !seg_path.exists() {
            return Err(Error::MissingPrerequisite(format!(
                "reference {} not found for volume {case}",
                seg_path.display()
            )));
        }
        let mut v = mhd::read_metaimage(&vol_path)?;
        v.id = case;
        let gt = mhd::read_mask3(&seg_path)?;
        if gt.dim() != v.voxels.dim() {
            return Err(Error::Dimension(format!(
                "volume {} and its reference have different shapes",
                v.id
            )));
        }
        let gt = resample_gt(&gt, target)?;
        let v = resample_inplane(&v, target)?;
        out.push((v, gt));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        let a = derive_seed(7, "fold0/semi");
        let b = derive_seed(7, "fold0/semi");
        assert_eq!(a, b);
        assert_ne!(a, derive_seed(7, "fold1/semi"));
        assert_ne!(a, derive_seed(8, "fold0/semi"));
    }

    #[test]
    fn fuse_before_semi_is_prerequisite_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.out_dir = dir.path().to_path_buf();
        let p = Pipeline::new(cfg).unwrap();
        match p.fuse(0) {
            Err(Error::MissingPrerequisite(msg)) => {
                assert!(msg.contains("train-semi"), "msg: {msg}");
            }
            other => panic!("expected prerequisite error, got {other:?}"),
        }
    }

    #[test]
    fn evaluate_without_checkpoints_names_the_missing_command() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.out_dir = dir.path().to_path_buf();
        let p = Pipeline::new(cfg).unwrap();
        match p.evaluate(0) {
            Err(Error::MissingPrerequisite(msg)) => {
                assert!(msg.contains("train-final"), "msg: {msg}");
            }
            other => panic!("expected prerequisite error, got {other:?}"),
        }
    }

    #[test]
    fn train_semi_without_dataset_points_at_synth() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.out_dir = dir.path().to_path_buf();
        let p = Pipeline::new(cfg).unwrap();
        match p.train_semi(0) {
            Err(Error::MissingPrerequisite(msg)) => assert!(msg.contains("synth")),
            other => panic!("expected prerequisite error, got {other:?}"),
        }
    }

    #[test]
    fn synth_skips_when_up_to_date() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.out_dir = dir.path().to_path_buf();
        cfg.dataset.phantom = crate::phantom::PhantomSpec::tiny(3, 16, 3, 5);
        let p = Pipeline::new(cfg).unwrap();
        assert_eq!(p.synth().unwrap(), StageOutcome::Ran);
        let manifest = p.dataset_manifest_path();
        let mtime = std::fs::metadata(&manifest).unwrap().modified().unwrap();
        assert_eq!(p.synth().unwrap(), StageOutcome::SkippedUpToDate);
        assert_eq!(
            std::fs::metadata(&manifest).unwrap().modified().unwrap(),
            mtime
        );
    }

    #[test]
    fn central_annotation_equals_ground_truth_central_slice() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.out_dir = dir.path().to_path_buf();
        cfg.dataset.resample_height = 16;
        cfg.dataset.resample_width = 16;
        cfg.dataset.phantom = crate::phantom::PhantomSpec::tiny(3, 16, 3, 5);
        cfg.seg.depth = 2;
        cfg.reg.levels = 2;
        let p = Pipeline::new(cfg).unwrap();
        p.synth().unwrap();
        let ds = p.load_dataset().unwrap();
        let ids: Vec<String> = ds.volumes.iter().map(|v| v.id.clone()).collect();
        let anns = ds.central_annotations(&ids).unwrap();
        for (i, ann) in anns.iter().enumerate() {
            let c = ds.volumes[i].central_index();
            assert_eq!(ann.central_index, c);
            assert_eq!(
                ann.mask,
                ds.ground_truth[i].index_axis(ndarray::Axis(0), c).to_owned()
            );
        }
    }

    #[test]
    fn warm_start_uses_the_semi_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.out_dir = dir.path().to_path_buf();
        cfg.folds = 2;
        cfg.dataset.resample_height = 16;
        cfg.dataset.resample_width = 16;
        cfg.dataset.phantom = crate::phantom::PhantomSpec::tiny(4, 16, 3, 5);
        cfg.seg.depth = 2;
        cfg.seg.base_channels = 2;
        cfg.semi.warmup_epochs = 1;
        cfg.semi.total_epochs = 2;
        cfg.reg.levels = 2;
        cfg.reg.base_channels = 2;
        cfg.reg.epochs = 1;
        cfg.final_train.epochs = 0; // isolate initialization
        cfg.final_train.warm_start = true;

        let p = Pipeline::new(cfg.clone()).unwrap();
        p.synth().unwrap();
        p.train_semi(0).unwrap();
        p.train_reg(0).unwrap();
        p.propagate(0).unwrap();
        p.fuse(0).unwrap();

        // Warm start without the semi checkpoint is a prerequisite error
        // (a vanished checkpoint also re-triggers the semi stage).
        let semi_ckpt = dir.path().join("fold0/semi/checkpoint.ckpt");
        std::fs::remove_file(&semi_ckpt).unwrap();
        match p.train_final(0) {
            Err(Error::MissingPrerequisite(msg)) => assert!(msg.contains("train-semi")),
            other => panic!("expected prerequisite error, got {other:?}"),
        }
        assert_eq!(p.train_semi(0).unwrap(), StageOutcome::Ran);
        p.train_final(0).unwrap();
        // Zero-epoch warm start leaves the final checkpoint equal to the
        // semi checkpoint.
        let semi = load_checkpoint(&dir.path().join("fold0/semi/checkpoint.ckpt")).unwrap();
        let fin = load_checkpoint(&dir.path().join("fold0/final/checkpoint.ckpt")).unwrap();
        assert_eq!(semi.content_hash(), fin.content_hash());
    }

    #[test]
    fn synth_reruns_when_spec_changes() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.out_dir = dir.path().to_path_buf();
        cfg.dataset.phantom = crate::phantom::PhantomSpec::tiny(3, 16, 3, 5);
        let p = Pipeline::new(cfg.clone()).unwrap();
        assert_eq!(p.synth().unwrap(), StageOutcome::Ran);
        cfg.dataset.phantom.seed = 6;
        let p2 = Pipeline::new(cfg).unwrap();
        assert_eq!(p2.synth().unwrap(), StageOutcome::Ran);
    }
}
