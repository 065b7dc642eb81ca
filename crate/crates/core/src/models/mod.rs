//! Frozen encoder plus the two trainable decoders.

pub mod checkpoint;
pub mod encoder;
pub mod kernels;
pub mod layers;
pub mod params;
pub mod patch;
pub mod pixel;

use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{self, DatasetManifest, LabelMask, Provenance};
use crate::error::{Error, Result};
use crate::select::EmbeddingMatrix;
use crate::taxonomy::ClassTaxonomy;

pub use checkpoint::{load_checkpoint, load_checkpoint_with_encoder, save_checkpoint, CheckpointHeader};
pub use encoder::{EncoderDescriptor, EncoderOutput, EncoderSource, EncoderSpec, VitConfig, VitEncoder};
pub use params::ParamStore;
pub use patch::{PatchDecoder, PatchDecoderConfig};
pub use pixel::PixelDecoder;

/// Per-channel normalization applied to images in [0, 1].
pub const IMAGE_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGE_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Pixel,
    Patch,
}

impl std::fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecoderKind::Pixel => "pixel",
            DecoderKind::Patch => "patch",
        })
    }
}

impl std::str::FromStr for DecoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(DecoderKind::Pixel),
            "patch" => Ok(DecoderKind::Patch),
            _ => Err(Error::Config(format!(
                "unknown decoder `{s}` (expected pixel or patch)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub decoder: DecoderKind,
    /// Seed of the decoder initialization.
    pub seed: u64,
    #[serde(default)]
    pub patch: PatchDecoderConfig,
}

impl ModelConfig {
    pub fn new(decoder: DecoderKind, seed: u64) -> Self {
        ModelConfig {
            decoder,
            seed,
            patch: PatchDecoderConfig::default(),
        }
    }
}

/// Anything that turns an image into a dense label mask.
pub trait Segmenter: Sync {
    fn taxonomy(&self) -> &Arc<ClassTaxonomy>;
    fn predict(&self, image: &RgbImage) -> Result<LabelMask>;
}

/// Class scores on an `H'×W'` grid, stored `H'×W'×C` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Source pixels per grid cell along each axis.
    pub scale: usize,
    pub data: Vec<f32>,
}

/// How a logit grid is brought back to image resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Upsample {
    /// Bilinear on logits, then argmax.
    Bilinear,
    /// Argmax on the grid, then nearest on labels.
    Nearest,
}

fn argmax(scores: &[f32]) -> u8 {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best as u8
}

impl LogitMap {
    pub fn new(height: usize, width: usize, classes: usize, scale: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * classes || classes == 0 || scale == 0 {
            return Err(Error::Shape(format!(
                "{} logits for a {height}x{width}x{classes} grid",
                data.len()
            )));
        }
        Ok(LogitMap {
            height,
            width,
            classes,
            scale,
            data,
        })
    }

    /// From a `(1, C, H', W')` or `(C, H', W')` tensor.
    pub fn from_tensor(t: &Tensor, scale: usize) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            _ => t.clone(),
        };
        let (c, h, w) = t.dims3()?;
        let data = t
            .permute((1, 2, 0))?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::new(h, w, c, scale, data)
    }

    pub fn at(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.classes;
        &self.data[i..i + self.classes]
    }

    /// Per-cell argmax; ties go to the lowest class index.
    pub fn argmax_grid(&self) -> Vec<u8> {
        self.data.chunks(self.classes).map(argmax).collect()
    }

    /// Labels at `out_h × out_w` (the top-left crop of the upsampled grid).
    pub fn to_labels(
        &self,
        mode: Upsample,
        out_h: usize,
        out_w: usize,
        taxonomy: Arc<ClassTaxonomy>,
    ) -> Result<LabelMask> {
        if self.classes != taxonomy.len() {
            return Err(Error::Shape(format!(
                "{} logit channels for {} classes",
                self.classes,
                taxonomy.len()
            )));
        }
        let (fh, fw) = (self.height * self.scale, self.width * self.scale);
        if out_h > fh || out_w > fw {
            return Err(Error::Shape(format!(
                "{out_h}x{out_w} exceeds upsampled grid {fh}x{fw}"
            )));
        }
        let data = match mode {
            Upsample::Nearest => {
                let grid = self.argmax_grid();
                (0..out_h * out_w)
                    .map(|i| grid[(i / out_w / self.scale) * self.width + (i % out_w) / self.scale])
                    .collect()
            }
            Upsample::Bilinear => {
                let taps = |out: usize, input: usize| -> Vec<(usize, usize, f32)> {
                    let s = input as f64 / out as f64;
                    (0..out)
                        .map(|i| {
                            let src = ((i as f64 + 0.5) * s - 0.5).max(0.0);
                            let i0 = (src.floor() as usize).min(input - 1);
                            (i0, (i0 + 1).min(input - 1), (src - i0 as f64) as f32)
                        })
                        .collect()
                };
                let ty = taps(fh, self.height);
                let tx = taps(fw, self.width);
                let c = self.classes;
                let mut out = Vec::with_capacity(out_h * out_w);
                let mut buf = vec![0f32; c];
                for &(y0, y1, wy) in &ty[..out_h] {
                    for &(x0, x1, wx) in &tx[..out_w] {
                        let (a, b, cc, d) = (self.at(x0, y0), self.at(x1, y0), self.at(x0, y1), self.at(x1, y1));
                        for k in 0..c {
                            let top = a[k] * (1.0 - wx) + b[k] * wx;
                            let bot = cc[k] * (1.0 - wx) + d[k] * wx;
                            buf[k] = top * (1.0 - wy) + bot * wy;
                        }
                        out.push(argmax(&buf));
                    }
                }
                out
            }
        };
        LabelMask::new(out_h, out_w, data, taxonomy, Provenance::Dense)
    }
}

/// `(B, 3, H, W)` normalized tensor from equally sized images.
pub fn images_to_tensor(images: &[&RgbImage], dtype: DType) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Empty("no images".into()))?;
    let (w, h) = first.dimensions();
    let plane = (w * h) as usize;
    let mut data = vec![0f32; images.len() * 3 * plane];
    for (b, img) in images.iter().enumerate() {
        if img.dimensions() != (w, h) {
            return Err(Error::Shape("images in a batch must share a size".into()));
        }
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[(b * 3 + c) * plane + i] = (px.0[c] as f32 / 255.0 - IMAGE_MEAN[c]) / IMAGE_STD[c];
            }
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h as usize, w as usize), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
enum Decoder {
    Pixel(PixelDecoder),
    Patch(PatchDecoder),
}

/// Encoder plus decoder over one taxonomy.
pub struct SegModel {
    cfg: ModelConfig,
    taxonomy: Arc<ClassTaxonomy>,
    encoder: Arc<VitEncoder>,
    decoder: Decoder,
    params: ParamStore,
}

impl SegModel {
    /// A freshly initialized decoder on top of `encoder`, in the encoder's
    /// dtype.
    pub fn new(cfg: ModelConfig, taxonomy: Arc<ClassTaxonomy>, encoder: Arc<VitEncoder>) -> Result<Self> {
        let mut params = ParamStore::new(cfg.seed, encoder.dtype());
        let (d, c) = (encoder.dim(), taxonomy.len());
        let decoder = match cfg.decoder {
            DecoderKind::Pixel => Decoder::Pixel(PixelDecoder::new(&mut params, d, c)?),
            DecoderKind::Patch => Decoder::Patch(PatchDecoder::new(&mut params, d, c, &cfg.patch)?),
        };
        Ok(SegModel {
            cfg,
            taxonomy,
            encoder,
            decoder,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn kind(&self) -> DecoderKind {
        self.cfg.decoder
    }

    pub fn encoder(&self) -> &Arc<VitEncoder> {
        &self.encoder
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.params.vars()
    }

    pub fn num_trainable(&self) -> usize {
        self.params.num_params()
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Output stride of the raw logits.
    pub fn scale(&self) -> usize {
        match self.decoder {
            Decoder::Pixel(_) => pixel::SCALE,
            Decoder::Patch(_) => self.encoder.patch_size(),
        }
    }

    /// Inputs are reflect-padded up to a multiple of this.
    pub fn pad_multiple(&self) -> usize {
        layers::lcm(self.encoder.patch_size(), pixel::SCALE)
    }

    fn padded(&self, n: usize) -> usize {
        n.div_ceil(self.pad_multiple()) * self.pad_multiple()
    }

    /// Raw logits for normalized images whose sides are multiples of
    /// [`Self::pad_multiple`].
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let enc = self.encoder.encode(x)?;
        match &self.decoder {
            Decoder::Pixel(d) => d.forward(&enc, x),
            Decoder::Patch(d) => d.forward(&enc),
        }
    }

    pub fn pixel_decoder(&self) -> Option<&PixelDecoder> {
        match &self.decoder {
            Decoder::Pixel(d) => Some(d),
            Decoder::Patch(_) => None,
        }
    }

    /// Logits at the supervision resolution for normalized images of any
    /// size: full resolution for the pixel decoder (bilinear ×4 of the raw
    /// logits, cropped), the patch grid of the padded input for the patch
    /// decoder.
    pub fn training_logits(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let xp = layers::reflect_pad(x, self.padded(h) - h, self.padded(w) - w)?;
        let logits = self.forward(&xp)?;
        match self.decoder {
            Decoder::Pixel(_) => {
                let (_, _, ph, pw) = xp.dims4()?;
                Ok(layers::resize_bilinear(&logits, ph, pw)?
                    .narrow(2, 0, h)?
                    .narrow(3, 0, w)?)
            }
            Decoder::Patch(_) => Ok(logits),
        }
    }

    /// The target raster matching [`Self::training_logits`]. For the patch
    /// decoder each cell takes the label at its center pixel; centers that
    /// fall in the padding are ignore.
    pub fn training_target(&self, mask: &LabelMask) -> Vec<u8> {
        match self.decoder {
            Decoder::Pixel(_) => mask.data().to_vec(),
            Decoder::Patch(_) => {
                let p = self.encoder.patch_size();
                let (h, w) = (mask.height(), mask.width());
                let (gh, gw) = (self.padded(h) / p, self.padded(w) / p);
                let mut out = Vec::with_capacity(gh * gw);
                for gy in 0..gh {
                    for gx in 0..gw {
                        let (y, x) = (gy * p + p / 2, gx * p + p / 2);
                        out.push(if y < h && x < w {
                            mask.get(x, y)
                        } else {
                            mask.ignore_index()
                        });
                    }
                }
                out
            }
        }
    }

    /// Raw logit map for one image, with the padded size it refers to.
    pub fn logit_map(&self, image: &RgbImage) -> Result<LogitMap> {
        let x = images_to_tensor(&[image], self.dtype())?;
        let (h, w) = (image.height() as usize, image.width() as usize);
        let xp = layers::reflect_pad(&x, self.padded(h) - h, self.padded(w) - w)?;
        LogitMap::from_tensor(&self.forward(&xp)?, self.scale())
    }

    pub fn upsample_mode(&self) -> Upsample {
        match self.decoder {
            Decoder::Pixel(_) => Upsample::Bilinear,
            Decoder::Patch(_) => Upsample::Nearest,
        }
    }
}

impl Segmenter for SegModel {
    fn taxonomy(&self) -> &Arc<ClassTaxonomy> {
        &self.taxonomy
    }

    fn predict(&self, image: &RgbImage) -> Result<LabelMask> {
        let map = self.logit_map(image)?;
        map.to_labels(
            self.upsample_mode(),
            image.height() as usize,
            image.width() as usize,
            self.taxonomy.clone(),
        )
    }
}

/// CLS embedding of every listed manifest sample (all samples when
/// `indices` is `None`).
pub fn extract_cls_embeddings(
    manifest: &DatasetManifest,
    indices: Option<&[usize]>,
    encoder: &VitEncoder,
) -> Result<EmbeddingMatrix> {
    let all: Vec<usize> = (0..manifest.samples.len()).collect();
    let ids = indices.unwrap_or(&all);
    let m = layers::lcm(encoder.patch_size(), pixel::SCALE);
    let rows = ids
        .par_iter()
        .map(|&i| -> Result<Vec<f64>> {
            let s = manifest
                .samples
                .get(i)
                .ok_or_else(|| Error::Empty(format!("sample index {i} out of range")))?;
            let wrap = |e: Error| Error::Encoder {
                sample: s.id(),
                message: e.to_string(),
            };
            let img = dataio::load_rgb(&manifest.image_path(s))?;
            let x = images_to_tensor(&[&img], encoder.dtype()).map_err(wrap)?;
            let (h, w) = (img.height() as usize, img.width() as usize);
            let x = layers::reflect_pad(&x, h.div_ceil(m) * m - h, w.div_ceil(m) * m - w).map_err(wrap)?;
            let out = encoder.encode(&x).map_err(wrap)?;
            Ok(out.cls.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
        })
        .collect::<Result<Vec<_>>>()?;
    let d = rows.first().map_or(0, Vec::len);
    EmbeddingMatrix::new(ids.len(), d, rows.concat(), ids.to_vec())
}
