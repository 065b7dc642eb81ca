//! Patch-level decoder: class tokens attend jointly with the final-layer
//! patch tokens; logits are scaled patch·class dot products.

use candle_core::Tensor;

use super::encoder::EncoderOutput;
use super::layers::{layer_norm, Attention, Block};
use super::params::ParamStore;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchDecoderConfig {
    pub depth: usize,
    /// `None` picks 6, or the largest divisor of d below 6.
    pub heads: Option<usize>,
    /// Hidden width of the block MLP as a multiple of d.
    pub mlp_ratio: usize,
}

impl Default for PatchDecoderConfig {
    fn default() -> Self {
        PatchDecoderConfig {
            depth: 2,
            heads: None,
            mlp_ratio: 2,
        }
    }
}

impl PatchDecoderConfig {
    pub fn heads_for(&self, dim: usize) -> usize {
        self.heads
            .unwrap_or_else(|| (1..=6).rev().find(|h| dim % h == 0).unwrap_or(1))
    }
}

#[derive(Debug, Clone)]
pub struct PatchDecoder {
    class_tokens: Tensor,
    blocks: Vec<Block>,
    norm: (Tensor, Tensor),
    dim: usize,
    num_classes: usize,
}

impl PatchDecoder {
    pub fn new(ps: &mut ParamStore, dim: usize, num_classes: usize, cfg: &PatchDecoderConfig) -> Result<Self> {
        let heads = cfg.heads_for(dim);
        if dim % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide d = {dim}")));
        }
        let class_tokens = ps.normal("patch.class_tokens", &[1, num_classes, dim], 0.02)?;
        let hidden = cfg.mlp_ratio * dim;
        let blocks = (0..cfg.depth)
            .map(|i| -> Result<Block> {
                let n = |s: &str| format!("patch.block{i}.{s}");
                Ok(Block {
                    norm1: ps.norm(&n("norm1"), dim)?,
                    attn: Attention {
                        q: ps.linear(&n("q"), dim, dim)?,
                        k: ps.linear(&n("k"), dim, dim)?,
                        v: ps.linear(&n("v"), dim, dim)?,
                        out: ps.linear(&n("proj"), dim, dim)?,
                        heads,
                    },
                    ls1: None,
                    norm2: ps.norm(&n("norm2"), dim)?,
                    fc1: ps.linear(&n("fc1"), hidden, dim)?,
                    fc2: ps.linear(&n("fc2"), dim, hidden)?,
                    ls2: None,
                    eps: LN_EPS,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = ps.norm("patch.norm", dim)?;
        Ok(PatchDecoder {
            class_tokens,
            blocks,
            norm,
            dim,
            num_classes,
        })
    }

    /// Logits `(B, C, H/P, W/P)`.
    pub fn forward(&self, enc: &EncoderOutput) -> Result<Tensor> {
        let last = enc
            .layer_features
            .last()
            .ok_or_else(|| Error::Shape("encoder output has no feature grids".into()))?;
        let (b, d, gh, gw) = last.dims4()?;
        if d != self.dim {
            return Err(Error::Shape(format!("encoder width {d}, decoder expects {}", self.dim)));
        }
        let n = gh * gw;
        let c = self.num_classes;
        let patches = last.flatten_from(2)?.transpose(1, 2)?;
        let classes = self.class_tokens.broadcast_as((b, c, d))?;
        let mut x = Tensor::cat(&[&patches, &classes], 1)?.contiguous()?;
        for blk in &self.blocks {
            x = blk.forward(&x)?;
        }
        let x = layer_norm(&x, &self.norm.0, &self.norm.1, LN_EPS)?;
        let p = x.narrow(1, 0, n)?;
        let k = x.narrow(1, n, c)?;
        let scores = (p.matmul(&k.t()?.contiguous()?)? * (1.0 / (d as f64).sqrt()))?;
        Ok(scores.transpose(1, 2)?.contiguous()?.reshape((b, c, gh, gw))?)
    }
}
