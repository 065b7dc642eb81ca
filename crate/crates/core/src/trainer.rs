//! Loss, augmentation, the two-phase training schedule and evaluation.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{self, DatasetManifest, LabelMask, Split};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, IgnoredPrediction, MetricsReport};
use crate::models::layers::{log_softmax, reflect_index};
use crate::models::{images_to_tensor, EncoderSpec, ModelConfig, SegModel, Segmenter, VitEncoder};
use crate::taxonomy::{class_frequencies_of, ClassFrequencyTable, ClassTaxonomy};

/// Frequencies below this are clipped before inversion.
pub const FREQUENCY_FLOOR: f64 = 1e-3;
/// Scale redraws before falling back to reflect padding.
pub const CROP_RETRIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeightMode {
    Uniform,
    InverseFrequency,
}

/// Per-class loss weights. Inverse-frequency weights are `1 / max(f, 1e-3)`
/// rescaled to mean 1.
pub fn class_weights(freq: &ClassFrequencyTable, mode: ClassWeightMode) -> Vec<f64> {
    let n = freq.fractions.len();
    match mode {
        ClassWeightMode::Uniform => vec![1.0; n],
        ClassWeightMode::InverseFrequency => {
            let raw: Vec<f64> = freq.fractions.iter().map(|&f| 1.0 / f.max(FREQUENCY_FLOOR)).collect();
            let mean = raw.iter().sum::<f64>() / n as f64;
            raw.into_iter().map(|w| w / mean).collect()
        }
    }
}

/// Numerator `Σ w·(−log p)` as a scalar tensor and the weight sum over valid
/// pixels. `target` is row-major `(B, H, W)`.
pub fn weighted_ce_parts(logits: &Tensor, target: &[u8], weights: &[f64], ignore: u8) -> Result<(Tensor, f64)> {
    let (b, c, h, w) = logits.dims4()?;
    if target.len() != b * h * w {
        return Err(Error::Shape(format!(
            "target has {} pixels, logits {b}x{h}x{w}",
            target.len()
        )));
    }
    if weights.len() != c {
        return Err(Error::Shape(format!("{} weights for {c} classes", weights.len())));
    }
    let mut idx = Vec::new();
    let mut cls = Vec::new();
    let mut wv = Vec::new();
    for (i, &t) in target.iter().enumerate() {
        if t == ignore {
            continue;
        }
        if t as usize >= c {
            return Err(Error::Shape(format!("target class {t} with {c} logit channels")));
        }
        idx.push(i as u32);
        cls.push(t as u32);
        wv.push(weights[t as usize]);
    }
    let dtype = logits.dtype();
    if idx.is_empty() {
        return Ok((Tensor::zeros((), dtype, logits.device())?, 0.0));
    }
    let m = idx.len();
    let dev = logits.device();
    let logp = log_softmax(logits, 1)?
        .permute((0, 2, 3, 1))?
        .reshape((b * h * w, c))?
        .index_select(&Tensor::new(idx, dev)?, 0)?
        .gather(&Tensor::new(cls, dev)?.reshape((m, 1))?, 1)?
        .squeeze(1)?;
    let denom: f64 = wv.iter().sum();
    let wt = Tensor::new(wv, dev)?.to_dtype(dtype)?;
    let num = (logp * wt)?.sum_all()?.neg()?;
    Ok((num, denom))
}

/// Weighted mean cross-entropy over non-ignore pixels; 0 when every pixel
/// is ignore.
pub fn weighted_ce_loss(logits: &Tensor, target: &[u8], weights: &[f64], ignore: u8) -> Result<Tensor> {
    let (num, denom) = weighted_ce_parts(logits, target, weights, ignore)?;
    if denom == 0.0 {
        return Ok(num);
    }
    let loss = (num / denom)?;
    let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Err(Error::NonFiniteLogits);
    }
    Ok(loss)
}

fn reshaped(mask: &LabelMask, h: usize, w: usize, data: Vec<u8>) -> Result<LabelMask> {
    LabelMask::new(h, w, data, mask.taxonomy().clone(), mask.provenance())
}

fn resize_mask_nearest(mask: &LabelMask, nh: usize, nw: usize) -> Result<LabelMask> {
    let (h, w) = (mask.height(), mask.width());
    let src = |i: usize, n: usize, m: usize| (((i as f64 + 0.5) * m as f64 / n as f64) as usize).min(m - 1);
    let mut data = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        let sy = src(y, nh, h);
        for x in 0..nw {
            data.push(mask.get(src(x, nw, w), sy));
        }
    }
    reshaped(mask, nh, nw, data)
}

/// Resizes image (bilinear) and mask (nearest) to `nh × nw`.
pub fn resize_pair(image: &RgbImage, mask: &LabelMask, nh: usize, nw: usize) -> Result<(RgbImage, LabelMask)> {
    if (mask.height(), mask.width()) == (nh, nw) {
        return Ok((image.clone(), mask.clone()));
    }
    let img = image::imageops::resize(image, nw as u32, nh as u32, image::imageops::FilterType::Triangle);
    Ok((img, resize_mask_nearest(mask, nh, nw)?))
}

fn reflect_pad_pair(image: &RgbImage, mask: &LabelMask, th: usize, tw: usize) -> Result<(RgbImage, LabelMask)> {
    let (h, w) = (mask.height(), mask.width());
    let (nh, nw) = (h.max(th), w.max(tw));
    let img = RgbImage::from_fn(nw as u32, nh as u32, |x, y| {
        *image.get_pixel(reflect_index(x as usize, w) as u32, reflect_index(y as usize, h) as u32)
    });
    let data = (0..nh * nw)
        .map(|i| mask.get(reflect_index(i % nw, w), reflect_index(i / nw, h)))
        .collect();
    Ok((img, reshaped(mask, nh, nw, data)?))
}

/// Random rescale by a factor uniform in `scale_range`, then a uniform
/// `out × out` crop. Scales that leave the image too small are redrawn up to
/// [`CROP_RETRIES`] times; after that the image is reflect-padded.
pub fn random_resize_crop<R: Rng + ?Sized>(
    image: &RgbImage,
    mask: &LabelMask,
    out: usize,
    scale_range: (f64, f64),
    rng: &mut R,
) -> Result<(RgbImage, LabelMask)> {
    let (h, w) = (mask.height(), mask.width());
    if image.dimensions() != (w as u32, h as u32) {
        return Err(Error::Shape("image and mask sizes differ".into()));
    }
    let (lo, hi) = scale_range;
    let mut dims = (h, w);
    for _ in 0..CROP_RETRIES {
        let s = if lo == hi { lo } else { rng.random_range(lo..=hi) };
        dims = (
            ((h as f64) * s).round().max(1.0) as usize,
            ((w as f64) * s).round().max(1.0) as usize,
        );
        if dims.0 >= out && dims.1 >= out {
            break;
        }
    }
    let (mut img, mut m) = resize_pair(image, mask, dims.0, dims.1)?;
    if dims.0 < out || dims.1 < out {
        (img, m) = reflect_pad_pair(&img, &m, out, out)?;
    }
    let (rh, rw) = (m.height(), m.width());
    let y0 = rng.random_range(0..=rh - out);
    let x0 = rng.random_range(0..=rw - out);
    let cropped = image::imageops::crop_imm(&img, x0 as u32, y0 as u32, out as u32, out as u32).to_image();
    let data = (0..out * out).map(|i| m.get(x0 + i % out, y0 + i / out)).collect();
    Ok((cropped, reshaped(&m, out, out, data)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataRole {
    CoarseId,
    DenseOod,
    Pseudo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub manifest: PathBuf,
    pub role: DataRole,
    /// Copies of this source per epoch; sets the mixing ratio.
    #[serde(default = "one")]
    pub repeat: usize,
}

fn one() -> usize {
    1
}

fn default_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    200
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
fn default_weights() -> ClassWeightMode {
    ClassWeightMode::InverseFrequency
}
fn default_batch() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Side of the square crops used in the first phase.
    #[serde(default = "default_crop")]
    pub crop: usize,
    /// `[width, height]` of the second phase; native size when absent.
    #[serde(default)]
    pub full_res: Option<[usize; 2]>,
    #[serde(default = "default_fraction")]
    pub crop_phase_fraction: f64,
    #[serde(default = "default_scale")]
    pub scale_range: (f64, f64),
    #[serde(default = "default_weights")]
    pub class_weight_mode: ClassWeightMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub data_mix: Vec<DataSource>,
    pub model: ModelConfig,
    #[serde(default)]
    pub encoder: EncoderSpec,
    /// Manifest whose validation split is scored during training.
    #[serde(default)]
    pub validation: Option<PathBuf>,
    /// Score validation every this many epochs (0 = only after the last).
    #[serde(default)]
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, data_mix: Vec<DataSource>) -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            epochs: default_epochs(),
            crop: default_crop(),
            full_res: None,
            crop_phase_fraction: default_fraction(),
            scale_range: default_scale(),
            class_weight_mode: default_weights(),
            seed: 0,
            batch_size: default_batch(),
            data_mix,
            model,
            encoder: EncoderSpec::default(),
            validation: None,
            eval_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_schedule()?;
        if self.data_mix.is_empty() {
            return Err(Error::Config("data_mix is empty".into()));
        }
        if self.data_mix.iter().any(|d| d.repeat == 0) {
            return Err(Error::Config("data_mix repeat must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Checks everything except the data sources.
    pub fn validate_schedule(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be > 0");
        }
        if !(self.crop_phase_fraction > 0.0 && self.crop_phase_fraction < 1.0) {
            return bad("crop_phase_fraction must lie in (0, 1)");
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("scale_range must satisfy 0 < lo ≤ hi");
        }
        if self.batch_size == 0 || self.crop == 0 {
            return bad("batch_size and crop must be ≥ 1");
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Parse {
                path: path.display().to_string(),
                message: m,
            },
            e => e,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Number of random-crop epochs; the rest run at full resolution.
    pub fn crop_epochs(&self) -> usize {
        ((self.epochs as f64 * self.crop_phase_fraction).round() as usize).min(self.epochs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Crop,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean of the step losses.
    pub loss: f64,
    pub steps: usize,
    pub val_miou: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,phase,loss,steps,val_miou\n");
        for r in &self.epochs {
            let phase = match r.phase {
                Phase::Crop => "crop",
                Phase::Full => "full",
            };
            let val = r.val_miou.map(|v| format!("{v:.6}")).unwrap_or_default();
            s.push_str(&format!("{},{phase},{:.8},{},{val}\n", r.epoch, r.loss, r.steps));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let err = |m: String| Error::Parse {
            path: "history.csv".into(),
            message: m,
        };
        let mut epochs = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(err(format!("line {}: expected 5 fields", n + 1)));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("line {}: {e}", n + 1)));
            epochs.push(EpochRecord {
                epoch: num(f[0])? as usize,
                phase: if f[1] == "crop" { Phase::Crop } else { Phase::Full },
                loss: num(f[2])?,
                steps: num(f[3])? as usize,
                val_miou: if f[4].is_empty() { None } else { Some(num(f[4])?) },
            });
        }
        Ok(TrainHistory { epochs })
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|r| r.loss).collect()
    }
}

/// One in-memory training pair.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: RgbImage,
    pub mask: LabelMask,
}

/// Loads the labeled training-split samples of every data source, repeated
/// per its `repeat`. Relative manifest paths resolve against `base`.
pub fn load_training_data(cfg: &TrainConfig, base: &Path) -> Result<(Arc<ClassTaxonomy>, Vec<TrainSample>)> {
    let mut taxonomy: Option<Arc<ClassTaxonomy>> = None;
    let mut out = Vec::new();
    for src in &cfg.data_mix {
        let manifest = dataio::read_manifest(&base.join(&src.manifest))?;
        let tax = match &taxonomy {
            Some(t) if **t != manifest.taxonomy => {
                return Err(Error::TaxonomyMismatch(
                    t.name().into(),
                    manifest.taxonomy.name().into(),
                ))
            }
            Some(t) => t.clone(),
            None => {
                let t = Arc::new(manifest.taxonomy.clone());
                taxonomy = Some(t.clone());
                t
            }
        };
        let samples = load_manifest_samples(&manifest, tax)?;
        for _ in 0..src.repeat {
            out.extend(samples.iter().cloned());
        }
    }
    if out.is_empty() {
        return Err(Error::Empty("data_mix has no labeled training samples".into()));
    }
    Ok((taxonomy.expect("at least one source"), out))
}

/// Labeled samples of the training split.
pub fn load_manifest_samples(manifest: &DatasetManifest, tax: Arc<ClassTaxonomy>) -> Result<Vec<TrainSample>> {
    manifest
        .samples
        .par_iter()
        .filter(|s| s.split == Split::Train && s.labeled && s.label.is_some())
        .map(|s| {
            let (image, mask) = dataio::load_labeled_sample(manifest, s, tax.clone())?;
            Ok(TrainSample { image, mask })
        })
        .collect()
}

fn mix(seed: u64, k: u64) -> u64 {
    // SplitMix64 step: decorrelates derived seeds.
    let mut z = seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of epoch `epoch` derived from the run seed.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    mix(seed, epoch as u64 + 1)
}

fn prepare(sample: &TrainSample, cfg: &TrainConfig, phase: Phase, seed: u64) -> Result<(RgbImage, LabelMask)> {
    match phase {
        Phase::Crop => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            random_resize_crop(&sample.image, &sample.mask, cfg.crop, cfg.scale_range, &mut rng)
        }
        Phase::Full => match cfg.full_res {
            Some([w, h]) => resize_pair(&sample.image, &sample.mask, h, w),
            None => Ok((sample.image.clone(), sample.mask.clone())),
        },
    }
}

/// Loss of one batch; images of different sizes go through separate
/// forward passes and their terms are pooled.
pub fn batch_loss(model: &SegModel, batch: &[(RgbImage, LabelMask)], weights: &[f64]) -> Result<Option<Tensor>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, (img, _)) in batch.iter().enumerate() {
        match groups
            .iter_mut()
            .find(|g| batch[g[0]].0.dimensions() == img.dimensions())
        {
            Some(g) => g.push(i),
            None => groups.push(vec![i]),
        }
    }
    let mut num: Option<Tensor> = None;
    let mut denom = 0.0;
    for g in groups {
        let imgs: Vec<&RgbImage> = g.iter().map(|&i| &batch[i].0).collect();
        let x = images_to_tensor(&imgs, model.dtype())?;
        let logits = model.training_logits(&x)?;
        let target: Vec<u8> = g.iter().flat_map(|&i| model.training_target(&batch[i].1)).collect();
        let ignore = batch[g[0]].1.ignore_index();
        let (n, d) = weighted_ce_parts(&logits, &target, weights, ignore)?;
        denom += d;
        num = Some(match num {
            Some(acc) => (acc + n)?,
            None => n,
        });
    }
    if denom == 0.0 {
        return Ok(None);
    }
    Ok(Some((num.expect("non-empty batch") / denom)?))
}

/// Trains `model`'s decoder in place on `data`. The encoder is never touched.
pub fn train_on(
    model: &SegModel,
    data: &[TrainSample],
    cfg: &TrainConfig,
    validation: Option<&DatasetManifest>,
) -> Result<TrainHistory> {
    cfg.validate_schedule()?;
    if data.is_empty() {
        return Err(Error::Empty("no training samples".into()));
    }
    let tax = model.taxonomy().clone();
    if data[0].mask.taxonomy().names() != tax.names() {
        return Err(Error::TaxonomyMismatch(
            data[0].mask.taxonomy().name().into(),
            tax.name().into(),
        ));
    }
    let freq = class_frequencies_of(data.iter().map(|s| &s.mask))?;
    let weights = class_weights(&freq, cfg.class_weight_mode);
    let mut opt = AdamW::new(
        model.trainable_vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;

    let crop_epochs = cfg.crop_epochs();
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let phase = if epoch < crop_epochs { Phase::Crop } else { Phase::Full };
        let seed = epoch_seed(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut losses = Vec::new();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = chunk
                .par_iter()
                .enumerate()
                .map(|(j, &i)| prepare(&data[i], cfg, phase, mix(seed, (b * cfg.batch_size + j) as u64)))
                .collect::<Result<Vec<_>>>()?;
            let Some(loss) = batch_loss(model, &batch, &weights)? else {
                continue;
            };
            let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !v.is_finite() {
                return Err(Error::Divergence { epoch, loss: v });
            }
            opt.backward_step(&loss)?;
            losses.push(v);
        }
        let loss = if losses.is_empty() {
            0.0
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        let last = epoch + 1 == cfg.epochs;
        let due = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        let val_miou = match validation {
            Some(v) if last || due => Some(evaluate(model, v, Some(Split::Val))?.miou),
            _ => None,
        };
        log::info!("epoch {epoch} ({phase:?}) loss {loss:.5} val {val_miou:?}");
        history.epochs.push(EpochRecord {
            epoch,
            phase,
            loss,
            steps: losses.len(),
            val_miou,
        });
    }
    Ok(history)
}

/// Builds encoder and model from `cfg`, loads the data mix and trains.
/// Relative paths resolve against `base`.
pub fn train(cfg: &TrainConfig, base: &Path) -> Result<(SegModel, TrainHistory)> {
    cfg.validate()?;
    let encoder = Arc::new(cfg.encoder.build(base)?);
    train_with_encoder(cfg, base, encoder)
}

pub fn train_with_encoder(
    cfg: &TrainConfig,
    base: &Path,
    encoder: Arc<VitEncoder>,
) -> Result<(SegModel, TrainHistory)> {
    let (tax, data) = load_training_data(cfg, base)?;
    let model = SegModel::new(cfg.model.clone(), tax, encoder)?;
    let val = cfg
        .validation
        .as_ref()
        .map(|p| dataio::read_manifest(&base.join(p)))
        .transpose()?;
    let history = train_on(&model, &data, cfg, val.as_ref())?;
    Ok((model, history))
}

/// Full-resolution prediction of every labeled sample (of `split`, when
/// given), shard-summed into one confusion matrix.
pub fn evaluate(model: &dyn Segmenter, manifest: &DatasetManifest, split: Option<Split>) -> Result<MetricsReport> {
    let tax = model.taxonomy().clone();
    let samples: Vec<_> = manifest
        .samples
        .iter()
        .filter(|s| s.labeled && s.label.is_some() && split.is_none_or(|sp| s.split == sp))
        .collect();
    if samples.is_empty() {
        return Err(Error::Empty(format!(
            "`{}` has no labeled samples to evaluate",
            manifest.name
        )));
    }
    let cm = samples
        .par_iter()
        .map(|s| -> Result<ConfusionMatrix> {
            let (img, gt) = dataio::load_labeled_sample(manifest, s, tax.clone())?;
            let pred = model.predict(&img)?;
            crate::metrics::confusion_with(&pred, &gt, IgnoredPrediction::Reject)
        })
        .try_reduce(
            || ConfusionMatrix::new(tax.len()),
            |mut a, b| {
                a += &b;
                Ok(a)
            },
        )?;
    MetricsReport::new(
        &cm,
        tax.names(),
        samples.len(),
        serde_json::json!({ "manifest": manifest.name, "split": split }),
    )
}
