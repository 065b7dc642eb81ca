//! Pseudo-labels from the agreement of two models' predictions.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{self, ColorMatch, DatasetManifest, LabelMask, Provenance, Split};
use crate::error::{Error, Result};
use crate::metrics::{miou, ConfusionMatrix, IgnoredPrediction};
use crate::models::Segmenter;

/// Keeps `a`'s label where `a` and `b` agree and marks the rest ignore.
pub fn fuse_by_disagreement(a: &LabelMask, b: &LabelMask) -> Result<LabelMask> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    if a.taxonomy() != b.taxonomy() {
        return Err(Error::TaxonomyMismatch(
            a.taxonomy().name().into(),
            b.taxonomy().name().into(),
        ));
    }
    let ignore = a.ignore_index();
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| if x == y { x } else { ignore })
        .collect();
    Ok(a.with_data(data)?.with_provenance(Provenance::Pseudo))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFusion {
    pub image: PathBuf,
    pub label: PathBuf,
    pub kept_pixels: u64,
    pub total_pixels: u64,
    pub density: f64,
}

/// Aggregate statistics of one pseudo-labeling pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub class_names: Vec<String>,
    /// Fraction of non-ignore pseudo pixels over all images.
    pub density: f64,
    pub per_class_kept: Vec<u64>,
    pub total_pixels: u64,
    pub images: Vec<ImageFusion>,
    /// mIoU of pseudo-labels against dense ground truth, counted on the
    /// pseudo-labeled pixels only.
    pub quality_miou: Option<f64>,
    /// Same, but every ground-truth pixel left ignore counts as a miss.
    pub quality_miou_strict: Option<f64>,
    /// Each model's own mIoU over every ground-truth pixel.
    pub model_a_miou: Option<f64>,
    pub model_b_miou: Option<f64>,
    /// Each model's mIoU restricted to the agreement region.
    pub model_a_region_miou: Option<f64>,
    pub model_b_region_miou: Option<f64>,
    /// Number of images that had ground truth.
    pub gt_images: usize,
}

impl FusionReport {
    pub fn to_text(&self) -> String {
        let f = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let mut s = format!(
            "pseudo-label density {:.4} over {} images ({} px)\n",
            self.density,
            self.images.len(),
            self.total_pixels
        );
        s.push_str(&format!(
            "quality mIoU {} (strict {}) on {} images with ground truth\n",
            f(self.quality_miou),
            f(self.quality_miou_strict),
            self.gt_images
        ));
        s.push_str(&format!(
            "model A mIoU {} (agreement region {}), model B mIoU {} (agreement region {})\n",
            f(self.model_a_miou),
            f(self.model_a_region_miou),
            f(self.model_b_miou),
            f(self.model_b_region_miou)
        ));
        for (n, k) in self.class_names.iter().zip(&self.per_class_kept) {
            s.push_str(&format!("  {n:<18} {k}\n"));
        }
        s
    }

    /// Per-image density table as CSV.
    pub fn density_csv(&self) -> String {
        let mut s = String::from("image,label,kept_pixels,total_pixels,density\n");
        for r in &self.images {
            s.push_str(&format!(
                "{},{},{},{},{:.6}\n",
                r.image.display(),
                r.label.display(),
                r.kept_pixels,
                r.total_pixels,
                r.density
            ));
        }
        s
    }
}

#[derive(Default)]
struct GtTally {
    pseudo: Option<ConfusionMatrix>,
    strict: Option<ConfusionMatrix>,
    a: Option<ConfusionMatrix>,
    b: Option<ConfusionMatrix>,
    a_region: Option<ConfusionMatrix>,
    b_region: Option<ConfusionMatrix>,
    images: usize,
}

fn merge(into: &mut Option<ConfusionMatrix>, cm: Option<ConfusionMatrix>) {
    match (into.as_mut(), cm) {
        (Some(x), Some(y)) => *x += &y,
        (None, y) => *into = y,
        _ => {}
    }
}

impl GtTally {
    fn merge(mut self, other: GtTally) -> GtTally {
        merge(&mut self.pseudo, other.pseudo);
        merge(&mut self.strict, other.strict);
        merge(&mut self.a, other.a);
        merge(&mut self.b, other.b);
        merge(&mut self.a_region, other.a_region);
        merge(&mut self.b_region, other.b_region);
        self.images += other.images;
        self
    }
}

/// Restricts `mask` to the labeled pixels of `region`.
fn restrict(mask: &LabelMask, region: &LabelMask) -> Result<LabelMask> {
    let ig = mask.ignore_index();
    let data = mask
        .data()
        .iter()
        .zip(region.data())
        .map(|(&v, &r)| if r == region.ignore_index() { ig } else { v })
        .collect();
    mask.with_data(data)
}

fn tally(pseudo: &LabelMask, a: &LabelMask, b: &LabelMask, gt: &LabelMask) -> Result<GtTally> {
    use crate::metrics::confusion_with;
    let gt_region = restrict(gt, pseudo)?;
    Ok(GtTally {
        pseudo: Some(confusion_with(pseudo, &gt_region, IgnoredPrediction::Reject)?),
        strict: Some(confusion_with(pseudo, gt, IgnoredPrediction::CountAsMiss)?),
        a: Some(confusion_with(a, gt, IgnoredPrediction::Reject)?),
        b: Some(confusion_with(b, gt, IgnoredPrediction::Reject)?),
        a_region: Some(confusion_with(a, &gt_region, IgnoredPrediction::Reject)?),
        b_region: Some(confusion_with(b, &gt_region, IgnoredPrediction::Reject)?),
        images: 1,
    })
}

fn score(cm: &Option<ConfusionMatrix>) -> Option<f64> {
    cm.as_ref().and_then(|cm| miou(cm).ok()).map(|m| m.miou)
}

/// Options for [`generate_pseudo_labels`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoOptions {
    /// Compare against the manifest's labels when they exist.
    pub use_ground_truth: bool,
    /// Restrict generation to this split; `None` uses every sample.
    pub split: Option<Split>,
}

impl Default for PseudoOptions {
    fn default() -> Self {
        PseudoOptions {
            use_ground_truth: true,
            split: Some(Split::Train),
        }
    }
}

/// Predicts every selected image with both models, fuses the predictions
/// and writes the pseudo rasters to `out_dir/labels/`. Writes
/// `pseudo_manifest.json`, `fusion_report.json`, `fusion_report.txt` and
/// `densities.csv` into `out_dir`.
pub fn generate_pseudo_labels(
    manifest: &DatasetManifest,
    model_a: &dyn Segmenter,
    model_b: &dyn Segmenter,
    out_dir: &Path,
    opts: &PseudoOptions,
) -> Result<(DatasetManifest, FusionReport)> {
    let tax = Arc::new(manifest.taxonomy.clone());
    for m in [model_a, model_b] {
        if m.taxonomy().names() != tax.names() {
            return Err(Error::TaxonomyMismatch(m.taxonomy().name().into(), tax.name().into()));
        }
    }
    let selected: Vec<(usize, &dataio::ImageSample)> = manifest
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| opts.split.is_none_or(|sp| s.split == sp))
        .collect();
    if selected.is_empty() {
        return Err(Error::Empty("no samples to pseudo-label".into()));
    }

    let per_image = selected
        .par_iter()
        .map(|&(i, s)| -> Result<(ImageFusion, Vec<u64>, GtTally)> {
            let image = dataio::load_rgb(&manifest.image_path(s))?;
            let a = model_a.predict(&image)?;
            let b = model_b.predict(&image)?;
            let pseudo = fuse_by_disagreement(&a, &b)?;
            let rel = PathBuf::from("labels").join(format!("{i:05}_{}.png", s.id()));
            dataio::save_label_png(&pseudo, &out_dir.join(&rel))?;
            let counts = crate::taxonomy::class_counts(&pseudo);
            let kept = pseudo.labeled_count() as u64;
            let gt = match manifest.label_path(s) {
                Some(p) if opts.use_ground_truth => {
                    let (gt, _) = dataio::load_label_png(&p, tax.clone(), ColorMatch::Strict)?;
                    tally(&pseudo, &a, &b, &gt)?
                }
                _ => GtTally::default(),
            };
            Ok((
                ImageFusion {
                    image: manifest.image_path(s),
                    label: rel,
                    kept_pixels: kept,
                    total_pixels: pseudo.len() as u64,
                    density: kept as f64 / pseudo.len() as f64,
                },
                counts,
                gt,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut images = Vec::with_capacity(per_image.len());
    let mut per_class_kept = vec![0u64; tax.len()];
    let mut gt = GtTally::default();
    for (img, counts, t) in per_image {
        for (a, c) in per_class_kept.iter_mut().zip(counts) {
            *a += c;
        }
        images.push(img);
        gt = gt.merge(t);
    }
    let total_pixels: u64 = images.iter().map(|r| r.total_pixels).sum();
    let kept: u64 = per_class_kept.iter().sum();
    let report = FusionReport {
        class_names: tax.names().to_vec(),
        density: kept as f64 / total_pixels as f64,
        per_class_kept,
        total_pixels,
        quality_miou: score(&gt.pseudo),
        quality_miou_strict: score(&gt.strict),
        model_a_miou: score(&gt.a),
        model_b_miou: score(&gt.b),
        model_a_region_miou: score(&gt.a_region),
        model_b_region_miou: score(&gt.b_region),
        gt_images: gt.images,
        images,
    };

    let mut out = DatasetManifest::new(format!("{}-pseudo", manifest.name), manifest.taxonomy.clone(), out_dir);
    for ((_, s), r) in selected.iter().zip(&report.images) {
        let mut s = (*s).clone();
        s.image = r.image.clone();
        s.label = Some(r.label.clone());
        s.labeled = true;
        out.samples.push(s);
    }
    dataio::write_manifest(&out, &out_dir.join("pseudo_manifest.json"))?;
    dataio::write_text(
        &out_dir.join("fusion_report.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    dataio::write_text(&out_dir.join("fusion_report.txt"), &report.to_text())?;
    dataio::write_text(&out_dir.join("densities.csv"), &report.density_csv())?;
    Ok((out, report))
}
