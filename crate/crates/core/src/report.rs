//! Summaries of finished (or partial) pipeline runs.
//!
//! A report collects the validation scores of every model and the
//! pseudo-label quality of every pairing found under the given directories,
//! checks each run's artifacts against its provenance record and renders
//! palette rasters and overlays. Anything missing or modified is listed as a
//! gap; runs without a provenance record are reported as unverified.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::dataio::{self, encode_label_rgb, ColorMatch, LabelMask, Split};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::models::{load_checkpoint, Segmenter};
use crate::pipeline::{file_sha256, stage_dir, DataConfig, PipelineConfig, Provenance, PROVENANCE_FILE, STAGES};
use crate::pseudo::FusionReport;

/// Files every completed stage is expected to leave behind.
pub fn expected_artifacts(stage: &str) -> &'static [&'static str] {
    match stage {
        "coarsify" => &["coarse_manifest.json", "density_report.json"],
        "select" => &["subset_manifest.json", "indices.json"],
        "train_a" | "train_b" | "retrain" => &["model.safetensors", "history.csv", "train_config.toml"],
        "pseudolabel" => &["pseudo_manifest.json", "fusion_report.json"],
        "evaluate" => &["model_a_metrics.json", "model_b_metrics.json", "retrained_metrics.json"],
        _ => &[],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub run: String,
    pub what: String,
}

/// What a report could recover from one run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunEntry {
    pub name: String,
    pub dir: PathBuf,
    /// True when a provenance record exists and every artifact matches it.
    pub verified: bool,
    pub config: Option<PipelineConfig>,
    pub fusion: Option<FusionReport>,
    pub val_a: Option<MetricsReport>,
    pub val_b: Option<MetricsReport>,
    pub val_retrained: Option<MetricsReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub runs: Vec<RunEntry>,
    pub gaps: Vec<Gap>,
    /// False when any run lacks a provenance record or fails its checks.
    pub conclusive: bool,
}

fn is_run_dir(dir: &Path) -> bool {
    dir.join(PROVENANCE_FILE).is_file()
        || dir.join("pipeline.toml").is_file()
        || STAGES.iter().any(|s| stage_dir(dir, s).is_dir())
}

/// The directories themselves if they are runs, otherwise their run
/// subdirectories.
pub fn discover_runs(dirs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut runs = Vec::new();
    for d in dirs {
        if !d.is_dir() {
            return Err(Error::Config(format!("`{}` is not a directory", d.display())));
        }
        if is_run_dir(d) {
            runs.push(d.clone());
            continue;
        }
        let mut subs = Vec::new();
        for entry in std::fs::read_dir(d).map_err(|e| Error::io(d, e))? {
            let p = entry.map_err(|e| Error::io(d, e))?.path();
            if p.is_dir() && is_run_dir(&p) {
                subs.push(p);
            }
        }
        subs.sort();
        runs.extend(subs);
    }
    if runs.is_empty() {
        return Err(Error::Empty(format!(
            "no pipeline runs under {}",
            dirs.iter()
                .map(|d| format!("`{}`", d.display()))
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    Ok(runs)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) {
    if let Ok(rd) = std::fs::read_dir(dir) {
        for e in rd.flatten() {
            let p = e.path();
            if p.is_dir() {
                files_under(&p, out);
            } else {
                out.push(p);
            }
        }
    }
}

fn collect_run(dir: &Path, gaps: &mut Vec<Gap>) -> RunEntry {
    let name = dir
        .file_name()
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    let mut gap = |what: String| {
        gaps.push(Gap {
            run: name.clone(),
            what,
        })
    };

    let prov = match Provenance::read(dir) {
        Ok(p) => Some(p),
        Err(Error::Io { .. }) => {
            gap(format!("no {PROVENANCE_FILE}; results are unverified"));
            None
        }
        Err(e) => {
            gap(format!("unreadable {PROVENANCE_FILE}: {e}"));
            None
        }
    };
    let mut verified = prov.is_some();
    let config = match &prov {
        Some(p) => Some(p.config.clone()),
        None => std::fs::read_to_string(dir.join("pipeline.toml"))
            .ok()
            .and_then(|t| PipelineConfig::from_toml_str(&t).ok()),
    };

    if let Some(p) = &prov {
        if let Some(stage) = &p.failed {
            gap(format!("stage {stage} failed"));
            verified = false;
        } else if !p.complete {
            gap("run did not finish".into());
        }
        let mut tracked = BTreeSet::new();
        for s in &p.stages {
            for a in &s.artifacts {
                let path = dir.join(&a.path);
                tracked.insert(path.clone());
                match file_sha256(&path) {
                    Ok(h) if h == a.sha256 => {}
                    Ok(_) => {
                        gap(format!("{} differs from its recorded hash", a.path.display()));
                        verified = false;
                    }
                    Err(_) => {
                        gap(format!("{} is recorded but missing", a.path.display()));
                        verified = false;
                    }
                }
            }
        }
        let mut on_disk = Vec::new();
        for s in STAGES {
            files_under(&stage_dir(dir, s), &mut on_disk);
        }
        for f in on_disk {
            if !tracked.contains(&f) {
                let rel = f.strip_prefix(dir).unwrap_or(&f);
                gap(format!("{} is not in the provenance record", rel.display()));
                verified = false;
            }
        }
    }

    for s in STAGES {
        for f in expected_artifacts(s) {
            if !stage_dir(dir, s).join(f).is_file() {
                gap(format!("missing {s} artifact {f}"));
            }
        }
    }

    let eval = stage_dir(dir, "evaluate");
    let metrics = |n: &str| read_json::<MetricsReport>(&eval.join(format!("{n}_metrics.json"))).ok();
    RunEntry {
        name,
        dir: dir.to_path_buf(),
        verified,
        config,
        fusion: read_json(&stage_dir(dir, "pseudolabel").join("fusion_report.json")).ok(),
        val_a: metrics("model_a"),
        val_b: metrics("model_b"),
        val_retrained: metrics("retrained"),
    }
}

/// Reads every run under `dirs`. Fails only when no run is found.
pub fn build_report(dirs: &[PathBuf]) -> Result<RunReport> {
    let mut gaps = Vec::new();
    let runs: Vec<RunEntry> = discover_runs(dirs)?.iter().map(|d| collect_run(d, &mut gaps)).collect();
    let conclusive = runs.iter().all(|r| r.verified);
    Ok(RunReport { runs, gaps, conclusive })
}

fn score(m: &Option<MetricsReport>) -> String {
    m.as_ref().map_or_else(|| "gap".into(), |m| format!("{:.4}", m.miou))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "gap".into(), |v| format!("{v:.4}"))
}

fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut s = line(header.to_vec());
    s.push_str(&format!(
        "|{}|\n",
        widths.iter().map(|w| "-".repeat(w + 2)).collect::<Vec<_>>().join("|")
    ));
    for r in rows {
        s.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    s
}

impl RunReport {
    /// Validation mIoU per model and training data, one row per model.
    pub fn strategy_rows(&self) -> Vec<Vec<String>> {
        let mut rows = Vec::new();
        for r in &self.runs {
            let Some(c) = &r.config else {
                rows.push(vec!["?".into(), "?".into(), score(&r.val_retrained), r.name.clone()]);
                continue;
            };
            let retrain = c.retrain.unwrap_or(c.pairing.a);
            let pseudo = if c.retrain_with_coarse {
                format!("Pseudo-Labels + Coarse ID ({})", c.pairing)
            } else {
                format!("Pseudo-Labels ({})", c.pairing)
            };
            let data_label = |d: DataConfig| d.label().to_string();
            rows.push(vec![
                c.pairing.a.to_string(),
                data_label(c.data_a),
                score(&r.val_a),
                r.name.clone(),
            ]);
            rows.push(vec![
                c.pairing.b.to_string(),
                data_label(c.data_b),
                score(&r.val_b),
                r.name.clone(),
            ]);
            rows.push(vec![
                retrain.to_string(),
                pseudo,
                score(&r.val_retrained),
                r.name.clone(),
            ]);
        }
        rows
    }

    /// Pseudo-label density and quality, one row per run (pairing).
    pub fn quality_rows(&self) -> Vec<Vec<String>> {
        self.runs
            .iter()
            .map(|r| {
                let (pairing, data) = match &r.config {
                    Some(c) => (
                        c.pairing.to_string(),
                        format!("{} / {}", c.data_a.label(), c.data_b.label()),
                    ),
                    None => ("?".into(), "?".into()),
                };
                let f = r.fusion.as_ref();
                vec![
                    pairing,
                    data,
                    opt(f.map(|f| f.density)),
                    opt(f.and_then(|f| f.quality_miou)),
                    opt(f.and_then(|f| f.quality_miou_strict)),
                    opt(f.and_then(|f| f.model_a_region_miou)),
                    opt(f.and_then(|f| f.model_b_region_miou)),
                    r.name.clone(),
                ]
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if !self.conclusive {
            s.push_str(
                "UNVERIFIED: at least one run has no valid provenance record or failed its artifact checks.\n\
                 The numbers below are listed for inspection only; draw no conclusions from them.\n\n",
            );
        }
        s.push_str("Validation mIoU by training data\n");
        s.push_str(&table(
            &["model", "training data", "val mIoU", "run"],
            &self.strategy_rows(),
        ));
        s.push_str("\nPseudo-label quality on the training images\n");
        s.push_str(&table(
            &[
                "pairing",
                "data (A / B)",
                "density",
                "mIoU",
                "strict mIoU",
                "A on agreement",
                "B on agreement",
                "run",
            ],
            &self.quality_rows(),
        ));
        s.push_str("\nZero-union classes are excluded from every mean. Pseudo-label mIoU counts labeled pixels only;\nthe strict column counts ignore pixels as misses.\n");
        if self.gaps.is_empty() {
            s.push_str("\nNo gaps.\n");
        } else {
            s.push_str("\nGaps\n");
            for g in &self.gaps {
                s.push_str(&format!("  [{}] {}\n", g.run, g.what));
            }
        }
        s
    }
}

/// Blends the palette colors of labeled pixels over the image; ignore pixels
/// keep the image color.
pub fn overlay(image: &RgbImage, mask: &LabelMask, alpha: f64) -> Result<RgbImage> {
    if image.width() as usize != mask.width() || image.height() as usize != mask.height() {
        return Err(Error::Shape(format!(
            "overlay image is {}x{}, mask is {}x{}",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        )));
    }
    let palette = encode_label_rgb(mask);
    let mut out = image.clone();
    for (i, p) in out.pixels_mut().enumerate() {
        if mask.is_ignore(i) {
            continue;
        }
        let c = palette.as_raw()[3 * i..3 * i + 3].to_vec();
        for k in 0..3 {
            p.0[k] = ((1.0 - alpha) * p.0[k] as f64 + alpha * c[k] as f64).round() as u8;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportOptions {
    /// Images rendered per run and kind (pseudo-labels, predictions).
    pub max_overlays: usize,
    pub overlay_alpha: f64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            max_overlays: 4,
            overlay_alpha: 0.5,
        }
    }
}

fn save_pair(out: &Path, stem: &str, image: &RgbImage, mask: &LabelMask, alpha: f64) -> Result<Vec<PathBuf>> {
    let palette = out.join(format!("{stem}_palette.png"));
    let blended = out.join(format!("{stem}_overlay.png"));
    dataio::save_rgb(&encode_label_rgb(mask), &palette)?;
    dataio::save_rgb(&overlay(image, mask, alpha)?, &blended)?;
    Ok(vec![palette, blended])
}

fn render_run(run: &RunEntry, out: &Path, opts: &ReportOptions, gaps: &mut Vec<Gap>) -> Vec<PathBuf> {
    let mut written = Vec::new();
    let dir = out.join(&run.name);
    let mut gap = |what: String| {
        gaps.push(Gap {
            run: run.name.clone(),
            what,
        })
    };

    match dataio::read_manifest(&stage_dir(&run.dir, "pseudolabel").join("pseudo_manifest.json")) {
        Ok(pm) => {
            let tax = std::sync::Arc::new(pm.taxonomy.clone());
            for s in pm.samples.iter().take(opts.max_overlays) {
                let res = (|| -> Result<Vec<PathBuf>> {
                    let image = dataio::load_rgb(&pm.image_path(s))?;
                    let label = pm
                        .label_path(s)
                        .ok_or_else(|| Error::Empty("pseudo sample without label".into()))?;
                    let (mask, _) = dataio::load_label_png(&label, tax.clone(), ColorMatch::Strict)?;
                    save_pair(&dir, &format!("pseudo_{}", s.id()), &image, &mask, opts.overlay_alpha)
                })();
                match res {
                    Ok(p) => written.extend(p),
                    Err(e) => gap(format!("pseudo overlay for {}: {e}", s.id())),
                }
            }
        }
        Err(_) => gap("no pseudo-labels to overlay".into()),
    }

    // Predictions of the retrained model on validation images of the target
    // manifest recorded as the pseudo-label stage's first input.
    let ckpt = stage_dir(&run.dir, "retrain").join(crate::pipeline::CHECKPOINT_FILE);
    let target = Provenance::read(&run.dir)
        .ok()
        .and_then(|p| p.stage("pseudolabel").and_then(|s| s.inputs.first().cloned()));
    let (Some(target), true) = (target, ckpt.is_file()) else {
        gap("no retrained model or target manifest for prediction overlays".into());
        return written;
    };
    let res = (|| -> Result<Vec<PathBuf>> {
        let manifest = dataio::read_manifest(&target)?;
        let (model, _) = load_checkpoint(&ckpt)?;
        let mut files = Vec::new();
        let mut val: Vec<_> = manifest.split(Split::Val).collect();
        if val.is_empty() {
            val = manifest.samples.iter().collect();
        }
        for s in val.into_iter().take(opts.max_overlays) {
            let image = dataio::load_rgb(&manifest.image_path(s))?;
            let pred = model.predict(&image)?;
            files.extend(save_pair(
                &dir,
                &format!("pred_{}", s.id()),
                &image,
                &pred,
                opts.overlay_alpha,
            )?);
        }
        Ok(files)
    })();
    match res {
        Ok(p) => written.extend(p),
        Err(e) => gap(format!("prediction overlays: {e}")),
    }
    written
}

/// Builds the report for `dirs` and writes `report.txt`, `report.json` and
/// `overlays/<run>/` into `out`. Returns the report and the overlay files.
pub fn write_report(dirs: &[PathBuf], out: &Path, opts: &ReportOptions) -> Result<(RunReport, Vec<PathBuf>)> {
    let mut report = build_report(dirs)?;
    let mut files = Vec::new();
    let mut gaps = Vec::new();
    for r in &report.runs {
        files.extend(render_run(r, &out.join("overlays"), opts, &mut gaps));
    }
    report.gaps.extend(gaps);
    dataio::write_text(&out.join("report.txt"), &report.to_text())?;
    dataio::write_text(
        &out.join("report.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    Ok((report, files))
}
