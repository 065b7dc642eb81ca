//! Confusion matrices and mean intersection-over-union.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::dataio::LabelMask;
use crate::error::{Error, Result};

/// What to do with pixels that have a ground-truth class but an ignored
/// prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IgnoredPrediction {
    /// Treat as an error; predictions are expected to be dense.
    Reject,
    /// Leave the pixel out of the matrix.
    Exclude,
    /// Count as a false negative of the ground-truth class.
    CountAsMiss,
}

/// C×C counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
    /// Per ground-truth class, pixels whose prediction was ignore
    /// (only under [`IgnoredPrediction::CountAsMiss`]).
    missed: Vec<u64>,
    valid_pixels: u64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
            missed: vec![0; num_classes],
            valid_pixels: 0,
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::Shape(format!(
                "{} counts for {num_classes} classes",
                counts.len()
            )));
        }
        let valid_pixels = counts.iter().sum();
        Ok(ConfusionMatrix {
            num_classes,
            counts,
            missed: vec![0; num_classes],
            valid_pixels,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn missed(&self) -> &[u64] {
        &self.missed
    }

    pub fn valid_pixels(&self) -> u64 {
        self.valid_pixels
    }

    /// Ground-truth pixel count per class.
    pub fn gt_pixels(&self) -> Vec<u64> {
        (0..self.num_classes)
            .map(|g| (0..self.num_classes).map(|p| self.get(g, p)).sum::<u64>() + self.missed[g])
            .collect()
    }

    pub fn add(&mut self, pred: &LabelMask, gt: &LabelMask, policy: IgnoredPrediction) -> Result<()> {
        if !pred.same_shape(gt) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        if pred.taxonomy().names() != gt.taxonomy().names() {
            return Err(Error::TaxonomyMismatch(
                pred.taxonomy().name().into(),
                gt.taxonomy().name().into(),
            ));
        }
        if gt.taxonomy().len() != self.num_classes {
            return Err(Error::Shape(format!(
                "matrix has {} classes, taxonomy {}",
                self.num_classes,
                gt.taxonomy().len()
            )));
        }
        let (gi, pi) = (gt.ignore_index(), pred.ignore_index());
        let c = self.num_classes;
        for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
            if g == gi {
                continue;
            }
            if p == pi {
                match policy {
                    IgnoredPrediction::Reject => {
                        return Err(Error::Shape(format!(
                            "prediction is ignore at (x={}, y={}) where ground truth is labeled",
                            i % gt.width(),
                            i / gt.width()
                        )))
                    }
                    IgnoredPrediction::Exclude => continue,
                    IgnoredPrediction::CountAsMiss => {
                        self.missed[g as usize] += 1;
                        self.valid_pixels += 1;
                        continue;
                    }
                }
            }
            self.counts[g as usize * c + p as usize] += 1;
            self.valid_pixels += 1;
        }
        Ok(())
    }
}

impl AddAssign<&ConfusionMatrix> for ConfusionMatrix {
    fn add_assign(&mut self, rhs: &ConfusionMatrix) {
        assert_eq!(self.num_classes, rhs.num_classes, "class count mismatch");
        for (a, b) in self.counts.iter_mut().zip(&rhs.counts) {
            *a += b;
        }
        for (a, b) in self.missed.iter_mut().zip(&rhs.missed) {
            *a += b;
        }
        self.valid_pixels += rhs.valid_pixels;
    }
}

/// Confusion of a dense prediction against ground truth; ground-truth
/// ignore pixels are skipped.
pub fn confusion(pred: &LabelMask, gt: &LabelMask) -> Result<ConfusionMatrix> {
    confusion_with(pred, gt, IgnoredPrediction::Reject)
}

pub fn confusion_with(pred: &LabelMask, gt: &LabelMask, policy: IgnoredPrediction) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(gt.taxonomy().len());
    cm.add(pred, gt, policy)?;
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Miou {
    pub miou: f64,
    /// `None` for classes with an empty union; those are left out of the mean.
    pub per_class: Vec<Option<f64>>,
}

/// IoU(c) = TP / (TP + FP + FN), averaged over classes with a non-empty union.
pub fn miou(cm: &ConfusionMatrix) -> Result<Miou> {
    if cm.valid_pixels == 0 {
        return Err(Error::Empty("confusion matrix has no valid pixels".into()));
    }
    let c = cm.num_classes;
    let mut per_class = Vec::with_capacity(c);
    let mut fractions = Vec::with_capacity(c);
    for k in 0..c {
        let tp = cm.get(k, k);
        let row: u64 = (0..c).map(|p| cm.get(k, p)).sum::<u64>() + cm.missed[k];
        let col: u64 = (0..c).map(|g| cm.get(g, k)).sum();
        let union = row + col - tp;
        per_class.push((union > 0).then(|| tp as f64 / union as f64));
        if union > 0 {
            fractions.push((tp as u128, union as u128));
        }
    }
    if fractions.is_empty() {
        return Err(Error::NoScoredClass);
    }
    let miou = exact_mean(&fractions).unwrap_or_else(|| {
        let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
        scored.iter().sum::<f64>() / scored.len() as f64
    });
    Ok(Miou { miou, per_class })
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Mean of `p/q` fractions rounded once to f64, when the reduced result has
/// numerator and denominator exactly representable; `None` otherwise.
fn exact_mean(fractions: &[(u128, u128)]) -> Option<f64> {
    let (mut num, mut den) = (0u128, 1u128);
    for &(p, q) in fractions {
        let g = gcd(den, q);
        let l = (den / g).checked_mul(q)?;
        num = num.checked_mul(l / den)?.checked_add(p.checked_mul(l / q)?)?;
        den = l;
        let r = gcd(num, den).max(1);
        (num, den) = (num / r, den / r);
    }
    den = den.checked_mul(fractions.len() as u128)?;
    let r = gcd(num, den).max(1);
    (num, den) = (num / r, den / r);
    const EXACT: u128 = 1 << 53;
    (num <= EXACT && den <= EXACT).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub iou: Option<f64>,
    pub gt_pixels: u64,
}

/// Serializable evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub miou: f64,
    pub classes: Vec<ClassScore>,
    pub valid_pixels: u64,
    pub images: usize,
    /// How classes absent from both prediction and ground truth are treated.
    pub zero_union: String,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn new(cm: &ConfusionMatrix, class_names: &[String], images: usize, config: serde_json::Value) -> Result<Self> {
        let m = miou(cm)?;
        let gt = cm.gt_pixels();
        Ok(MetricsReport {
            miou: m.miou,
            classes: class_names
                .iter()
                .zip(m.per_class)
                .zip(gt)
                .map(|((n, iou), g)| ClassScore {
                    class: n.clone(),
                    iou,
                    gt_pixels: g,
                })
                .collect(),
            valid_pixels: cm.valid_pixels(),
            images,
            zero_union: "excluded from mean".into(),
            config,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "mIoU {:.4} over {} images ({} px)\n",
            self.miou, self.images, self.valid_pixels
        );
        for c in &self.classes {
            match c.iou {
                Some(v) => s.push_str(&format!("  {:<18} {:.4}  ({} px)\n", c.class, v, c.gt_pixels)),
                None => s.push_str(&format!("  {:<18}    n/a  (empty union)\n", c.class)),
            }
        }
        s
    }
}
