//! Frozen ViT-style encoder.
//!
//! Weights use the Hugging Face DINOv2 tensor layout, so a pretrained
//! `model.safetensors` in that layout loads directly. The toy encoder is the
//! same network with small, seeded weights.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{layer_norm, resize_bilinear, Attention, Block};
use super::params::Initializer;
use crate::error::{Error, Result};

/// Number of feature grids handed to the decoders.
pub const NUM_TAPS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub mlp_hidden: usize,
    /// Side of the square grid the position embeddings were trained at.
    pub pos_grid: usize,
    pub eps: f64,
}

impl VitConfig {
    /// Small encoder for tests and desk-scale runs.
    pub fn toy(patch_size: usize) -> Self {
        VitConfig {
            depth: 4,
            dim: 32,
            heads: 4,
            patch_size,
            mlp_hidden: 128,
            pos_grid: 8,
            eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < NUM_TAPS {
            return Err(Error::Config(format!("encoder depth {} < {NUM_TAPS}", self.depth)));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide dim {}",
                self.heads, self.dim
            )));
        }
        if self.patch_size == 0 || self.pos_grid == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        Ok(())
    }

    /// 1-based block indices whose outputs are tapped: evenly spaced, ending
    /// at the last block (3, 6, 9, 12 for a 12-block encoder).
    pub fn taps(&self) -> [usize; NUM_TAPS] {
        std::array::from_fn(|k| ((self.depth * (k + 1)) as f64 / NUM_TAPS as f64).round() as usize)
    }
}

/// Where the encoder weights come from; stored in checkpoints so the encoder
/// can be rebuilt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EncoderSource {
    Toy { seed: u64 },
    Safetensors { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderDescriptor {
    pub source: EncoderSource,
    pub config: VitConfig,
    /// SHA-256 over all weights; checked when the encoder is rebuilt.
    pub fingerprint: String,
}

fn default_patch() -> usize {
    7
}

/// Encoder choice as written in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EncoderSpec {
    Toy {
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_patch")]
        patch_size: usize,
    },
    Safetensors {
        path: PathBuf,
        #[serde(default)]
        heads: Option<usize>,
    },
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::Toy {
            seed: 0,
            patch_size: default_patch(),
        }
    }
}

impl EncoderSpec {
    /// Builds the encoder; relative weight paths resolve against `base`.
    pub fn build(&self, base: &Path) -> Result<VitEncoder> {
        match self {
            EncoderSpec::Toy { seed, patch_size } => VitEncoder::toy(VitConfig::toy(*patch_size), *seed),
            EncoderSpec::Safetensors { path, heads } => VitEncoder::from_safetensors(&base.join(path), *heads),
        }
    }

    pub fn patch_size(&self) -> Option<usize> {
        match self {
            EncoderSpec::Toy { patch_size, .. } => Some(*patch_size),
            EncoderSpec::Safetensors { .. } => None,
        }
    }
}

/// Four equally shaped `(B, d, H/P, W/P)` grids plus the `(B, d)` CLS token.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub layer_features: Vec<Tensor>,
    pub cls: Tensor,
    pub patch_size: usize,
}

pub struct VitEncoder {
    cfg: VitConfig,
    source: EncoderSource,
    weights: BTreeMap<String, Tensor>,
    patch: (Tensor, Tensor),
    cls_token: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    norm: (Tensor, Tensor),
    fingerprint: String,
}

fn layer_key(i: usize, rest: &str) -> String {
    format!("encoder.layer.{i}.{rest}")
}

fn toy_weights(cfg: &VitConfig, seed: u64, layer_scale: f64) -> Result<BTreeMap<String, Tensor>> {
    let mut init = Initializer::new(seed, DType::F32);
    let (d, p) = (cfg.dim, cfg.patch_size);
    let mut w = BTreeMap::new();
    let bound = 1.0 / ((3 * p * p) as f64).sqrt();
    w.insert(
        "embeddings.patch_embeddings.projection.weight".into(),
        init.uniform(&[d, 3, p, p], bound)?,
    );
    w.insert(
        "embeddings.patch_embeddings.projection.bias".into(),
        init.uniform(&[d], bound)?,
    );
    w.insert("embeddings.cls_token".into(), init.normal(&[1, 1, d], 0.5)?);
    w.insert(
        "embeddings.position_embeddings".into(),
        init.normal(&[1, 1 + cfg.pos_grid * cfg.pos_grid, d], 0.5)?,
    );
    for i in 0..cfg.depth {
        for (name, out, input) in [
            ("attention.attention.query", d, d),
            ("attention.attention.key", d, d),
            ("attention.attention.value", d, d),
            ("attention.output.dense", d, d),
            ("mlp.fc1", cfg.mlp_hidden, d),
            ("mlp.fc2", d, cfg.mlp_hidden),
        ] {
            let (lw, lb) = init.linear(out, input)?;
            w.insert(layer_key(i, &format!("{name}.weight")), lw);
            w.insert(layer_key(i, &format!("{name}.bias")), lb);
        }
        for n in ["norm1", "norm2"] {
            let (g, b) = init.norm(d)?;
            w.insert(layer_key(i, &format!("{n}.weight")), g);
            w.insert(layer_key(i, &format!("{n}.bias")), b);
        }
        for n in ["layer_scale1.lambda1", "layer_scale2.lambda1"] {
            w.insert(layer_key(i, n), init.constant(&[d], layer_scale)?);
        }
    }
    let (g, b) = init.norm(d)?;
    w.insert("layernorm.weight".into(), g);
    w.insert("layernorm.bias".into(), b);
    Ok(w)
}

/// SHA-256 over names, shapes and f32 little-endian values in name order.
pub fn fingerprint(weights: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in weights {
        h.update(name.as_bytes());
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
            h.update(v.to_le_bytes());
        }
    }
    Ok(format!("{:x}", h.finalize()))
}

impl VitEncoder {
    /// Seeded toy encoder.
    pub fn toy(cfg: VitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let w = toy_weights(&cfg, seed, 1.0)?;
        Self::from_weights(cfg, EncoderSource::Toy { seed }, w)
    }

    /// Toy encoder whose residual branches are switched off (layer scale 0),
    /// so every block is the identity.
    pub fn toy_identity(cfg: VitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let w = toy_weights(&cfg, seed, 0.0)?;
        Self::from_weights(cfg, EncoderSource::Toy { seed }, w)
    }

    /// Loads DINOv2-layout weights. `heads` defaults to `dim / 64`.
    pub fn from_safetensors(path: &Path, heads: Option<usize>) -> Result<Self> {
        let raw = candle_core::safetensors::load(path, &Device::Cpu)
            .map_err(|e| Error::Checkpoint(format!("`{}`: {e}", path.display())))?;
        let strip = raw.keys().all(|k| k.starts_with("dinov2."));
        let weights: BTreeMap<String, Tensor> = raw
            .into_iter()
            .filter(|(k, _)| !k.ends_with("mask_token"))
            .map(|(k, v)| {
                let k = if strip { k["dinov2.".len()..].to_string() } else { k };
                Ok((k, v.to_dtype(DType::F32)?))
            })
            .collect::<Result<_>>()?;
        let get = |k: &str| {
            weights
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("`{}` lacks tensor `{k}`", path.display())))
        };
        let proj = get("embeddings.patch_embeddings.projection.weight")?;
        let (dim, _, patch_size, _) = proj.dims4()?;
        let npos = get("embeddings.position_embeddings")?.dim(1)? - 1;
        let pos_grid = (npos as f64).sqrt().round() as usize;
        if pos_grid * pos_grid != npos {
            return Err(Error::Checkpoint(format!(
                "{npos} position embeddings are not a square grid"
            )));
        }
        let depth = (0..)
            .take_while(|i| weights.contains_key(&layer_key(*i, "norm1.weight")))
            .count();
        let mlp_hidden = get(&layer_key(0, "mlp.fc1.weight"))?.dim(0)?;
        let cfg = VitConfig {
            depth,
            dim,
            heads: heads.unwrap_or((dim / 64).max(1)),
            patch_size,
            mlp_hidden,
            pos_grid,
            eps: 1e-6,
        };
        cfg.validate()?;
        Self::from_weights(
            cfg,
            EncoderSource::Safetensors {
                path: path.to_path_buf(),
            },
            weights,
        )
    }

    /// Rebuilds an encoder from its descriptor and checks the fingerprint.
    pub fn from_descriptor(desc: &EncoderDescriptor) -> Result<Self> {
        let enc = match &desc.source {
            EncoderSource::Toy { seed } => Self::toy(desc.config.clone(), *seed)?,
            EncoderSource::Safetensors { path } => Self::from_safetensors(path, Some(desc.config.heads))?,
        };
        if enc.fingerprint != desc.fingerprint {
            return Err(Error::Checkpoint(format!(
                "encoder fingerprint mismatch: expected {}, rebuilt {}",
                desc.fingerprint, enc.fingerprint
            )));
        }
        Ok(enc)
    }

    fn from_weights(cfg: VitConfig, source: EncoderSource, weights: BTreeMap<String, Tensor>) -> Result<Self> {
        let get = |k: &str| -> Result<Tensor> {
            weights
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("encoder lacks tensor `{k}`")))
        };
        let pair =
            |k: &str| -> Result<(Tensor, Tensor)> { Ok((get(&format!("{k}.weight"))?, get(&format!("{k}.bias"))?)) };
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let l = |rest: &str| layer_key(i, rest);
            blocks.push(Block {
                norm1: pair(&l("norm1"))?,
                attn: Attention {
                    q: pair(&l("attention.attention.query"))?,
                    k: pair(&l("attention.attention.key"))?,
                    v: pair(&l("attention.attention.value"))?,
                    out: pair(&l("attention.output.dense"))?,
                    heads: cfg.heads,
                },
                ls1: weights.get(&l("layer_scale1.lambda1")).cloned(),
                norm2: pair(&l("norm2"))?,
                fc1: pair(&l("mlp.fc1"))?,
                fc2: pair(&l("mlp.fc2"))?,
                ls2: weights.get(&l("layer_scale2.lambda1")).cloned(),
                eps: cfg.eps,
            });
        }
        Ok(VitEncoder {
            patch: pair("embeddings.patch_embeddings.projection")?,
            cls_token: get("embeddings.cls_token")?,
            pos: get("embeddings.position_embeddings")?,
            norm: pair("layernorm")?,
            blocks,
            fingerprint: fingerprint(&weights)?,
            weights,
            source,
            cfg,
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    pub fn patch_size(&self) -> usize {
        self.cfg.patch_size
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    pub fn dtype(&self) -> DType {
        self.patch.0.dtype()
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn descriptor(&self) -> EncoderDescriptor {
        EncoderDescriptor {
            source: self.source.clone(),
            config: self.cfg.clone(),
            fingerprint: self.fingerprint.clone(),
        }
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    /// Writes the weights in the layout `from_safetensors` reads.
    pub fn save_safetensors(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self.weights.clone().into_iter().collect();
        candle_core::safetensors::save(&map, path).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    /// Copy of this encoder in another dtype (the gradient check runs in f64).
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let w = self
            .weights
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.to_dtype(dtype)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let mut enc = Self::from_weights(self.cfg.clone(), self.source.clone(), w)?;
        enc.fingerprint = self.fingerprint.clone();
        Ok(enc)
    }

    /// Encodes normalized images `(B, 3, H, W)` with H and W multiples of P.
    pub fn encode(&self, x: &Tensor) -> Result<EncoderOutput> {
        let (b, c, h, w) = x.dims4()?;
        let p = self.cfg.patch_size;
        if c != 3 || h % p != 0 || w % p != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "encoder input {c}x{h}x{w} must be 3 channels with sides divisible by P={p}"
            )));
        }
        let d = self.cfg.dim;
        let (gh, gw) = (h / p, w / p);
        let n = gh * gw;
        let x = x.to_dtype(self.patch.0.dtype())?;
        let patches = super::layers::conv2d(&x, &self.patch.0, &self.patch.1, p, 0)?
            .flatten_from(2)?
            .transpose(1, 2)?;

        let g0 = self.cfg.pos_grid;
        let patch_pos = self
            .pos
            .narrow(1, 1, g0 * g0)?
            .reshape((1, g0, g0, d))?
            .permute((0, 3, 1, 2))?;
        let patch_pos = resize_bilinear(&patch_pos, gh, gw)?.flatten_from(2)?.transpose(1, 2)?;
        let patches = patches.broadcast_add(&patch_pos)?;
        let cls = (&self.cls_token + self.pos.narrow(1, 0, 1)?)?.broadcast_as((b, 1, d))?;
        let mut tokens = Tensor::cat(&[&cls, &patches], 1)?.contiguous()?;

        let taps = self.cfg.taps();
        let mut features = Vec::with_capacity(NUM_TAPS);
        let mut last = None;
        for (i, blk) in self.blocks.iter().enumerate() {
            tokens = blk.forward(&tokens)?;
            if taps.contains(&(i + 1)) {
                let normed = layer_norm(&tokens, &self.norm.0, &self.norm.1, self.cfg.eps)?;
                features.push(
                    normed
                        .narrow(1, 1, n)?
                        .transpose(1, 2)?
                        .contiguous()?
                        .reshape((b, d, gh, gw))?,
                );
                last = Some(normed);
            }
        }
        let cls = last.expect("last block is tapped").narrow(1, 0, 1)?.squeeze(1)?;
        Ok(EncoderOutput {
            layer_features: features,
            cls,
            patch_size: p,
        })
    }
}
