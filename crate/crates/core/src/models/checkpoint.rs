//! Versioned checkpoint container.
//!
//! A safetensors file whose metadata carries a JSON header: format version,
//! architecture hash, taxonomy, decoder kind, model config and the encoder
//! descriptor. Decoder weights are stored as f32 tensors.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{pixel, DecoderKind, EncoderDescriptor, ModelConfig, SegModel, VitEncoder};
use crate::error::{Error, Result};
use crate::taxonomy::ClassTaxonomy;

pub const FORMAT_VERSION: u32 = 1;
const HEADER_KEY: &str = "terrainseg.header";

/// Hash of the decoder architecture definition. Changing layer widths or
/// wiring changes the hash and invalidates old checkpoints.
pub fn spec_hash(kind: DecoderKind) -> String {
    let desc = match kind {
        DecoderKind::Pixel => format!(
            "pixel-decoder v1; neck {:?} 1x1; fuser {} 1x1; compressor {} 1x1; skip kernels {:?} x{}; \
             skip fuser {}->{} 3x3/2 x2; late {}:5x5,3x3,3x3; classifier 1x1; groupnorm gcd(c,8); gelu-erf; \
             bilinear half-pixel",
            pixel::NECK_WIDTHS,
            pixel::FUSER_OUT,
            pixel::COMPRESSOR_OUT,
            pixel::SKIP_KERNELS,
            pixel::SKIP_BRANCH_OUT,
            pixel::SKIP_BRANCH_OUT * pixel::SKIP_KERNELS.len(),
            pixel::SKIP_OUT,
            pixel::LATE_WIDTH,
        ),
        DecoderKind::Patch => "patch-decoder v1; class tokens joined with last-layer patch tokens; pre-norm blocks \
             with q/k/v/proj and gelu-erf mlp; final layernorm; scores = patch.class / sqrt(d)"
            .to_string(),
    };
    format!("{:x}", Sha256::digest(desc.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub spec_hash: String,
    pub taxonomy: ClassTaxonomy,
    pub decoder: DecoderKind,
    pub model: ModelConfig,
    pub encoder: EncoderDescriptor,
    /// Free-form record of how the weights were produced.
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn save_checkpoint(model: &SegModel, path: &Path, extra: serde_json::Value) -> Result<CheckpointHeader> {
    use super::Segmenter;
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        spec_hash: spec_hash(model.kind()),
        taxonomy: (**model.taxonomy()).clone(),
        decoder: model.kind(),
        model: model.config().clone(),
        encoder: model.encoder().descriptor(),
        extra,
    };
    let tensors = model
        .params()
        .entries()
        .iter()
        .map(|(n, v)| Ok((n.clone(), v.as_tensor().to_dtype(DType::F32)?)))
        .collect::<Result<Vec<(String, Tensor)>>>()?;
    let meta = HashMap::from([(
        HEADER_KEY.to_string(),
        serde_json::to_string(&header).expect("header serializes"),
    )]);
    let bytes = safetensors::serialize(tensors.iter().map(|(n, t)| (n.as_str(), t)), Some(meta))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(header)
}

fn read(path: &Path) -> Result<(CheckpointHeader, HashMap<String, Tensor>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Checkpoint(format!("`{}`: {m}", path.display()));
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let text = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(HEADER_KEY))
        .ok_or_else(|| bad("not a checkpoint (missing header)".into()))?;
    let header: CheckpointHeader = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "format version {} (this build reads {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let expected = spec_hash(header.decoder);
    if header.spec_hash != expected {
        return Err(bad(format!(
            "architecture hash {} does not match this build ({expected})",
            header.spec_hash
        )));
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu).map_err(|e| bad(e.to_string()))?;
    Ok((header, tensors))
}

fn build(header: CheckpointHeader, tensors: HashMap<String, Tensor>, encoder: Arc<VitEncoder>) -> Result<SegModel> {
    let model = SegModel::new(header.model.clone(), Arc::new(header.taxonomy.clone()), encoder)?;
    model.params().load(&tensors)?;
    Ok(model)
}

/// Loads a checkpoint, rebuilding its encoder from the stored descriptor.
pub fn load_checkpoint(path: &Path) -> Result<(SegModel, CheckpointHeader)> {
    let (header, tensors) = read(path)?;
    let encoder = Arc::new(VitEncoder::from_descriptor(&header.encoder)?);
    Ok((build(header.clone(), tensors, encoder)?, header))
}

/// Loads a checkpoint on top of an already built encoder, which must have
/// the recorded fingerprint.
pub fn load_checkpoint_with_encoder(path: &Path, encoder: Arc<VitEncoder>) -> Result<(SegModel, CheckpointHeader)> {
    let (header, tensors) = read(path)?;
    if encoder.fingerprint() != header.encoder.fingerprint {
        return Err(Error::Checkpoint(format!(
            "`{}` was trained on encoder {}, given {}",
            path.display(),
            header.encoder.fingerprint,
            encoder.fingerprint()
        )));
    }
    Ok((build(header.clone(), tensors, encoder)?, header))
}
