//! The staged coarse-to-pseudo recipe.
//!
//! Stages run in order and communicate only through files in the run
//! directory: coarsify the target labels, select a diverse subset, train two
//! models, fuse their predictions into pseudo-labels, retrain on those and
//! evaluate. After every stage `provenance.json` is rewritten with the
//! configuration, seeds, inputs and the SHA-256 of every artifact, so a
//! failed run keeps a record of what it produced.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coarsify::{coarsify_manifest, CoarsifyConfig};
use crate::dataio::{self, Split};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::models::{
    extract_cls_embeddings, load_checkpoint_with_encoder, save_checkpoint, DecoderKind, EncoderSpec, ModelConfig,
    VitEncoder,
};
use crate::pseudo::{generate_pseudo_labels, FusionReport, PseudoOptions};
use crate::select::farthest_point_sample;
use crate::trainer::{self, ClassWeightMode, DataRole, DataSource, TrainConfig};

pub const PROVENANCE_FILE: &str = "provenance.json";
pub const CHECKPOINT_FILE: &str = "model.safetensors";
/// Stage names in execution order.
pub const STAGES: [&str; 7] = [
    "coarsify",
    "select",
    "train_a",
    "train_b",
    "pseudolabel",
    "retrain",
    "evaluate",
];

/// Which labels a model is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataConfig {
    CoarseId,
    DenseOod,
    CoarseIdWithDenseOod,
}

impl DataConfig {
    pub fn needs_ood(self) -> bool {
        self != DataConfig::CoarseId
    }

    pub fn label(self) -> &'static str {
        match self {
            DataConfig::CoarseId => "Coarse ID",
            DataConfig::DenseOod => "Dense OOD",
            DataConfig::CoarseIdWithDenseOod => "Coarse ID w/ Dense OOD",
        }
    }
}

/// The two decoders whose agreement forms the pseudo-labels, written
/// `pixel-patch`, `patch-patch` and so on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pairing {
    pub a: DecoderKind,
    pub b: DecoderKind,
}

impl fmt::Display for Pairing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.a, self.b)
    }
}

impl FromStr for Pairing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("pairing `{s}` is not of the form a-b")))?;
        Ok(Pairing {
            a: a.parse()?,
            b: b.parse()?,
        })
    }
}

impl Serialize for Pairing {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Pairing {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn default_pairing() -> Pairing {
    Pairing {
        a: DecoderKind::Pixel,
        b: DecoderKind::Patch,
    }
}
fn default_data_a() -> DataConfig {
    DataConfig::CoarseIdWithDenseOod
}
fn default_data_b() -> DataConfig {
    DataConfig::CoarseId
}
fn default_epochs() -> usize {
    200
}
fn default_lr() -> f64 {
    1e-3
}
fn default_crop() -> usize {
    512
}
fn default_fraction() -> f64 {
    0.9
}
fn default_scale() -> (f64, f64) {
    (0.5, 2.0)
}
fn default_batch() -> usize {
    8
}
fn default_weights() -> ClassWeightMode {
    ClassWeightMode::InverseFrequency
}
fn one() -> usize {
    1
}

/// Optimization settings shared by every training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Epochs of the retraining stage; `epochs` when absent.
    #[serde(default)]
    pub retrain_epochs: Option<usize>,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_crop")]
    pub crop: usize,
    #[serde(default)]
    pub full_res: Option<[usize; 2]>,
    #[serde(default = "default_fraction")]
    pub crop_phase_fraction: f64,
    #[serde(default = "default_scale")]
    pub scale_range: (f64, f64),
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_weights")]
    pub class_weight_mode: ClassWeightMode,
    /// Copies of the OOD set per epoch when mixed with coarse ID data.
    #[serde(default = "one")]
    pub ood_repeat: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: default_epochs(),
            retrain_epochs: None,
            learning_rate: default_lr(),
            crop: default_crop(),
            full_res: None,
            crop_phase_fraction: default_fraction(),
            scale_range: default_scale(),
            batch_size: default_batch(),
            class_weight_mode: default_weights(),
            ood_repeat: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// In-distribution manifest: dense train labels to coarsify, val split
    /// for evaluation.
    pub target: PathBuf,
    /// Dense out-of-distribution manifest.
    #[serde(default)]
    pub auxiliary: Option<PathBuf>,
    #[serde(default)]
    pub coarsify: CoarsifyConfig,
    /// Size of the labeled subset; every coarse image when absent.
    #[serde(default)]
    pub subset_size: Option<usize>,
    #[serde(default)]
    pub encoder: EncoderSpec,
    #[serde(default = "default_pairing")]
    pub pairing: Pairing,
    #[serde(default = "default_data_a")]
    pub data_a: DataConfig,
    #[serde(default = "default_data_b")]
    pub data_b: DataConfig,
    /// Decoder retrained on the pseudo-labels; model A's when absent.
    #[serde(default)]
    pub retrain: Option<DecoderKind>,
    /// Retrain on pseudo-labels together with the coarse subset.
    #[serde(default)]
    pub retrain_with_coarse: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub train: TrainSettings,
}

impl PipelineConfig {
    pub fn new(target: PathBuf, auxiliary: Option<PathBuf>) -> Self {
        PipelineConfig {
            target,
            auxiliary,
            coarsify: CoarsifyConfig::default(),
            subset_size: None,
            encoder: EncoderSpec::default(),
            pairing: default_pairing(),
            data_a: default_data_a(),
            data_b: default_data_b(),
            retrain: None,
            retrain_with_coarse: false,
            seed: 0,
            train: TrainSettings::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(message) => Error::Parse {
                path: path.display().to_string(),
                message,
            },
            e => e,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Relative paths resolve against `base`.
    pub fn validate(&self, base: &Path) -> Result<()> {
        self.coarsify.validate()?;
        for (name, d) in [("data_a", self.data_a), ("data_b", self.data_b)] {
            if d.needs_ood() && self.auxiliary.is_none() {
                return Err(Error::Config(format!("{name} = {:?} needs an auxiliary manifest", d)));
            }
        }
        let mut paths = vec![("target", &self.target)];
        if let Some(a) = &self.auxiliary {
            paths.push(("auxiliary", a));
        }
        for (name, p) in paths {
            if !base.join(p).is_file() {
                return Err(Error::Config(format!(
                    "{name} manifest `{}` does not exist",
                    p.display()
                )));
            }
        }
        if let EncoderSpec::Safetensors { path, .. } = &self.encoder {
            if !base.join(path).is_file() {
                return Err(Error::Config(format!(
                    "encoder weights `{}` do not exist",
                    path.display()
                )));
            }
        }
        if self.subset_size == Some(0) {
            return Err(Error::Config("subset_size must be ≥ 1".into()));
        }
        if let Some(r) = self.retrain {
            if r != self.pairing.a && r != self.pairing.b {
                return Err(Error::Config(format!(
                    "retrain decoder {r} is not part of pairing {}",
                    self.pairing
                )));
            }
        }
        self.schedule(1, ModelConfig::new(DecoderKind::Pixel, 0), Vec::new())
            .validate_schedule()
    }

    fn schedule(&self, epochs: usize, model: ModelConfig, data_mix: Vec<DataSource>) -> TrainConfig {
        let t = &self.train;
        let mut cfg = TrainConfig::new(model, data_mix);
        cfg.learning_rate = t.learning_rate;
        cfg.epochs = epochs;
        cfg.crop = t.crop;
        cfg.full_res = t.full_res;
        cfg.crop_phase_fraction = t.crop_phase_fraction;
        cfg.scale_range = t.scale_range;
        cfg.batch_size = t.batch_size;
        cfg.class_weight_mode = t.class_weight_mode;
        cfg.encoder = self.encoder.clone();
        cfg
    }

    /// Seeds derived from the run seed, recorded in the provenance.
    pub fn seeds(&self) -> Seeds {
        let s = self.seed;
        Seeds {
            coarsify: self.coarsify.seed,
            model_a: s.wrapping_add(1),
            model_b: s.wrapping_add(2),
            retrain: s.wrapping_add(3),
            shuffle_a: s.wrapping_add(11),
            shuffle_b: s.wrapping_add(12),
            shuffle_retrain: s.wrapping_add(13),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub coarsify: u64,
    pub model_a: u64,
    pub model_b: u64,
    pub retrain: u64,
    pub shuffle_a: u64,
    pub shuffle_b: u64,
    pub shuffle_retrain: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub inputs: Vec<PathBuf>,
    pub artifacts: Vec<Artifact>,
    /// Stage-specific numbers (densities, subset indices, scores).
    #[serde(default)]
    pub summary: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config: PipelineConfig,
    pub seeds: Seeds,
    pub stages: Vec<StageRecord>,
    /// Name of the stage that failed, if any.
    #[serde(default)]
    pub failed: Option<String>,
    #[serde(default)]
    pub complete: bool,
}

impl Provenance {
    pub fn read(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(PROVENANCE_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    fn write(&self, run_dir: &Path) -> Result<()> {
        dataio::write_text(
            &run_dir.join(PROVENANCE_FILE),
            &serde_json::to_string_pretty(self).expect("provenance serializes"),
        )
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }
}

/// SHA-256 of a file, hex encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Every file under `dir`, sorted, relative to `root`.
fn collect_artifacts(root: &Path, dir: &Path) -> Result<Vec<Artifact>> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = entry.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    files
        .into_iter()
        .map(|p| {
            Ok(Artifact {
                sha256: file_sha256(&p)?,
                path: p.strip_prefix(root).unwrap_or(&p).to_path_buf(),
            })
        })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    dataio::write_text(path, &serde_json::to_string_pretty(value).expect("value serializes"))
}

/// Stage subdirectory names, numbered in execution order.
pub fn stage_dir(run_dir: &Path, stage: &str) -> PathBuf {
    let dir = match stage {
        "coarsify" => "01_coarsify",
        "select" => "02_select",
        "train_a" => "03_train_a",
        "train_b" => "04_train_b",
        "pseudolabel" => "05_pseudolabel",
        "retrain" => "06_retrain",
        "evaluate" => "07_evaluate",
        other => other,
    };
    run_dir.join(dir)
}

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub coarse_density: f64,
    pub subset: Vec<usize>,
    pub fusion: FusionReport,
    /// Validation scores of model A, model B and the retrained model.
    pub val_a: MetricsReport,
    pub val_b: MetricsReport,
    pub val_retrained: MetricsReport,
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    dir: &'a Path,
    prov: Provenance,
}

impl Run<'_> {
    fn stage<T>(
        &mut self,
        name: &str,
        inputs: Vec<PathBuf>,
        f: impl FnOnce(&Path) -> Result<(T, serde_json::Value)>,
    ) -> Result<T> {
        log::info!("stage {name}");
        let out = stage_dir(self.dir, name);
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        match f(&out) {
            Ok((value, summary)) => {
                let artifacts = collect_artifacts(self.dir, &out)?;
                self.prov.stages.push(StageRecord {
                    name: name.into(),
                    inputs,
                    artifacts,
                    summary,
                });
                self.prov.write(self.dir)?;
                Ok(value)
            }
            Err(e) => {
                self.prov.failed = Some(name.into());
                // Partial artifacts stay on disk and are listed.
                let artifacts = collect_artifacts(self.dir, &out).unwrap_or_default();
                self.prov.stages.push(StageRecord {
                    name: name.into(),
                    inputs,
                    artifacts,
                    summary: serde_json::json!({ "error": e.to_string() }),
                });
                self.prov.write(self.dir)?;
                Err(Error::Stage {
                    stage: name.into(),
                    source: Box::new(e),
                })
            }
        }
    }
}

fn train_stage(
    out: &Path,
    cfg: TrainConfig,
    encoder: Arc<VitEncoder>,
    extra: serde_json::Value,
) -> Result<((), serde_json::Value)> {
    dataio::write_text(&out.join("train_config.toml"), &cfg.to_toml_string())?;
    let (model, history) = trainer::train_with_encoder(&cfg, out, encoder)?;
    dataio::write_text(&out.join("history.csv"), &history.to_csv())?;
    save_checkpoint(&model, &out.join(CHECKPOINT_FILE), extra)?;
    let last = history.epochs.last().map(|r| r.loss);
    Ok((
        (),
        serde_json::json!({ "final_loss": last, "epochs": history.epochs.len() }),
    ))
}

fn source(manifest: PathBuf, role: DataRole, repeat: usize) -> DataSource {
    DataSource { manifest, role, repeat }
}

/// Runs every stage into `run_dir`. Relative paths in `cfg` resolve against
/// `base`.
pub fn run_coarse_pipeline(cfg: &PipelineConfig, base: &Path, run_dir: &Path) -> Result<RunSummary> {
    cfg.validate(base)?;
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let run_dir = &std::path::absolute(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let base = &std::path::absolute(base).map_err(|e| Error::io(base, e))?;
    let seeds = cfg.seeds();
    let mut run = Run {
        cfg,
        dir: run_dir,
        prov: Provenance {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: cfg.clone(),
            seeds: seeds.clone(),
            stages: Vec::new(),
            failed: None,
            complete: false,
        },
    };
    run.prov.write(run_dir)?;
    dataio::write_text(&run_dir.join("pipeline.toml"), &cfg.to_toml_string())?;

    let target_path = base.join(&cfg.target);
    let target = dataio::read_manifest(&target_path).map_err(|e| Error::Stage {
        stage: "coarsify".into(),
        source: Box::new(e),
    })?;
    let target_train = {
        let idx: Vec<usize> = (0..target.samples.len())
            .filter(|&i| target.samples[i].split == Split::Train)
            .collect();
        target.subset(&idx, format!("{}-train", target.name))
    };

    // 1. Coarse labels for the ID training images.
    let coarse_manifest_path = stage_dir(run_dir, "coarsify").join("coarse_manifest.json");
    let coarse_density = run.stage("coarsify", vec![target_path.clone()], |out| {
        let (coarse, report) = coarsify_manifest(&target_train, &run.cfg.coarsify, out)?;
        dataio::write_manifest(&coarse, &coarse_manifest_path)?;
        write_json(&out.join("density_report.json"), &report)?;
        let d = report.aggregate_density;
        Ok((
            d,
            serde_json::json!({ "aggregate_density": d, "images": report.images.len() }),
        ))
    })?;

    let encoder = Arc::new(cfg.encoder.build(base).map_err(|e| Error::Stage {
        stage: "select".into(),
        source: Box::new(e),
    })?);

    // 2. Diverse subset of the coarse images.
    let subset_path = stage_dir(run_dir, "select").join("subset_manifest.json");
    let subset = run.stage("select", vec![coarse_manifest_path.clone()], |out| {
        let coarse = dataio::read_manifest(&coarse_manifest_path)?;
        let n = coarse.samples.len();
        let k = run.cfg.subset_size.unwrap_or(n).min(n);
        let emb = extract_cls_embeddings(&coarse, None, &encoder)?;
        let picked = farthest_point_sample(&emb, k)?;
        let subset = coarse.subset(&picked, format!("{}-subset", coarse.name)).absolutized();
        dataio::write_manifest(&subset, &subset_path)?;
        write_json(&out.join("indices.json"), &picked)?;
        Ok((picked.clone(), serde_json::json!({ "k": k, "n": n, "indices": picked })))
    })?;

    // 3. The two models of the pairing.
    let ood_path = cfg.auxiliary.as_ref().map(|a| base.join(a));
    let mix = |d: DataConfig| -> Vec<DataSource> {
        let coarse = source(subset_path.clone(), DataRole::CoarseId, 1);
        let ood = || {
            source(
                ood_path.clone().expect("validated"),
                DataRole::DenseOod,
                cfg.train.ood_repeat,
            )
        };
        match d {
            DataConfig::CoarseId => vec![coarse],
            DataConfig::DenseOod => vec![ood()],
            DataConfig::CoarseIdWithDenseOod => vec![coarse, ood()],
        }
    };
    for (tag, kind, data, mseed, sseed) in [
        ("train_a", cfg.pairing.a, cfg.data_a, seeds.model_a, seeds.shuffle_a),
        ("train_b", cfg.pairing.b, cfg.data_b, seeds.model_b, seeds.shuffle_b),
    ] {
        let mut tc = cfg.schedule(cfg.train.epochs, ModelConfig::new(kind, mseed), mix(data));
        tc.seed = sseed;
        let inputs = tc.data_mix.iter().map(|d| d.manifest.clone()).collect();
        let enc = encoder.clone();
        let extra = serde_json::json!({ "stage": tag, "data": data, "pairing": cfg.pairing.to_string() });
        run.stage(tag, inputs, |out| train_stage(out, tc, enc, extra))?;
    }

    // 4. Pseudo-labels where the two models agree. The models are read back
    // from their checkpoints so the stage depends only on files.
    let ckpt_a = stage_dir(run_dir, "train_a").join(CHECKPOINT_FILE);
    let ckpt_b = stage_dir(run_dir, "train_b").join(CHECKPOINT_FILE);
    let pseudo_manifest_path = stage_dir(run_dir, "pseudolabel").join("pseudo_manifest.json");
    let inputs = vec![target_path.clone(), ckpt_a.clone(), ckpt_b.clone()];
    let fusion = run.stage("pseudolabel", inputs, |out| {
        let (model_a, _) = load_checkpoint_with_encoder(&ckpt_a, encoder.clone())?;
        let (model_b, _) = load_checkpoint_with_encoder(&ckpt_b, encoder.clone())?;
        let opts = PseudoOptions {
            use_ground_truth: true,
            split: Some(Split::Train),
        };
        let (_, report) = generate_pseudo_labels(&target_train, &model_a, &model_b, out, &opts)?;
        let summary = serde_json::json!({
            "density": report.density,
            "quality_miou": report.quality_miou,
            "quality_miou_strict": report.quality_miou_strict,
            "model_a_miou": report.model_a_miou,
            "model_b_miou": report.model_b_miou,
            "model_a_region_miou": report.model_a_region_miou,
            "model_b_region_miou": report.model_b_region_miou,
        });
        Ok((report, summary))
    })?;

    // 5. Retrain the target decoder on the pseudo-labels.
    let retrain_kind = cfg.retrain.unwrap_or(cfg.pairing.a);
    let mut data = vec![source(pseudo_manifest_path.clone(), DataRole::Pseudo, 1)];
    if cfg.retrain_with_coarse {
        data.push(source(subset_path.clone(), DataRole::CoarseId, 1));
    }
    let mut tc = cfg.schedule(
        cfg.train.retrain_epochs.unwrap_or(cfg.train.epochs),
        ModelConfig::new(retrain_kind, seeds.retrain),
        data,
    );
    tc.seed = seeds.shuffle_retrain;
    let inputs = tc.data_mix.iter().map(|d| d.manifest.clone()).collect();
    let enc = encoder.clone();
    let extra = serde_json::json!({ "stage": "retrain", "pairing": cfg.pairing.to_string() });
    run.stage("retrain", inputs, |out| train_stage(out, tc, enc, extra))?;

    // 6. Validation scores of all three models.
    let ckpts = vec![
        ckpt_a,
        ckpt_b,
        stage_dir(run_dir, "retrain").join(CHECKPOINT_FILE),
        target_path.clone(),
    ];
    let (val_a, val_b, val_retrained) = run.stage("evaluate", ckpts.clone(), |out| {
        // Scored from the checkpoints so the numbers belong to the files.
        let has_val = target.samples.iter().any(|s| s.split == Split::Val && s.labeled);
        let split = if has_val { Split::Val } else { Split::Train };
        let mut reports = Vec::new();
        for (name, ckpt) in ["model_a", "model_b", "retrained"].iter().zip(&ckpts) {
            let (model, _) = load_checkpoint_with_encoder(ckpt, encoder.clone())?;
            let report = trainer::evaluate(&model, &target, Some(split))?;
            write_json(&out.join(format!("{name}_metrics.json")), &report)?;
            dataio::write_text(&out.join(format!("{name}_metrics.txt")), &report.to_text())?;
            reports.push(report);
        }
        let summary = serde_json::json!({
            "split": split,
            "model_a_miou": reports[0].miou,
            "model_b_miou": reports[1].miou,
            "retrained_miou": reports[2].miou,
        });
        let r = reports.pop().expect("three reports");
        let b = reports.pop().expect("three reports");
        let a = reports.pop().expect("three reports");
        Ok(((a, b, r), summary))
    })?;

    run.prov.complete = true;
    run.prov.write(run_dir)?;
    Ok(RunSummary {
        run_dir: run_dir.to_path_buf(),
        coarse_density,
        subset,
        fusion,
        val_a,
        val_b,
        val_retrained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairing_roundtrip() {
        for s in ["pixel-pixel", "patch-patch", "pixel-patch", "patch-pixel"] {
            assert_eq!(s.parse::<Pairing>().unwrap().to_string(), s);
        }
        assert!("pixel".parse::<Pairing>().is_err());
        assert!("pixel-dense".parse::<Pairing>().is_err());
    }

    #[test]
    fn ood_configs_need_auxiliary() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("t.json"), "{}").unwrap();
        let cfg = PipelineConfig::new("t.json".into(), None);
        assert!(matches!(cfg.validate(dir.path()), Err(Error::Config(m)) if m.contains("auxiliary")));
        let mut ok = cfg.clone();
        ok.data_a = DataConfig::CoarseId;
        ok.validate(dir.path()).unwrap();
        let mut missing = ok.clone();
        missing.target = "nope.json".into();
        assert!(missing.validate(dir.path()).is_err());
    }

    #[test]
    fn config_toml_roundtrip() {
        let mut cfg = PipelineConfig::new("id/manifest.json".into(), Some("ood/manifest.json".into()));
        cfg.pairing = "patch-pixel".parse().unwrap();
        cfg.subset_size = Some(8);
        let back = PipelineConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }
}
