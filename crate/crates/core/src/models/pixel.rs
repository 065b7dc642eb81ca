//! Pixel-level CNN decoder: a multi-layer feature neck fused with shallow
//! image features at 1/4 resolution.

use candle_core::Tensor;

use super::encoder::EncoderOutput;
use super::kernels::gelu_erf;
use super::layers::{conv2d, gcd, group_norm, resize_bilinear};
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const NECK_WIDTHS: [usize; 4] = [64, 128, 192, 256];
pub const FUSER_OUT: usize = 128;
pub const COMPRESSOR_OUT: usize = 64;
pub const SKIP_KERNELS: [usize; 5] = [3, 5, 7, 9, 11];
pub const SKIP_BRANCH_OUT: usize = 9;
pub const SKIP_OUT: usize = 64;
pub const LATE_WIDTH: usize = 64;
/// Output stride of the logits.
pub const SCALE: usize = 4;

const GN_EPS: f64 = 1e-5;

/// Convolution followed by group norm and GELU.
#[derive(Debug, Clone)]
struct ConvBlock {
    w: Tensor,
    b: Tensor,
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    stride: usize,
    pad: usize,
}

impl ConvBlock {
    fn new(ps: &mut ParamStore, name: &str, input: usize, out: usize, k: usize, stride: usize) -> Result<Self> {
        let (w, b) = ps.conv(&format!("{name}.conv"), out, input, k)?;
        let (gamma, beta) = ps.norm(&format!("{name}.norm"), out)?;
        Ok(ConvBlock {
            w,
            b,
            gamma,
            beta,
            groups: gcd(out, 8),
            stride,
            pad: k / 2,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.w, &self.b, self.stride, self.pad)?;
        Ok(gelu_erf(&group_norm(
            &y,
            self.groups,
            &self.gamma,
            &self.beta,
            GN_EPS,
        )?)?)
    }

    fn out_channels(&self) -> usize {
        self.b.dims1().unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct PixelDecoder {
    neck: Vec<ConvBlock>,
    fuser: ConvBlock,
    compressor: ConvBlock,
    skip: Vec<ConvBlock>,
    skip_fuser: [ConvBlock; 2],
    late: [ConvBlock; 3],
    classifier: (Tensor, Tensor),
    dim: usize,
}

/// Channel counts recorded during a forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelTrace {
    pub neck_concat: usize,
    pub fuser: usize,
    pub compressor: usize,
    pub skip_concat: usize,
    pub skip: usize,
    pub late_input: usize,
    pub logits: usize,
}

impl PixelDecoder {
    pub fn new(ps: &mut ParamStore, dim: usize, num_classes: usize) -> Result<Self> {
        let neck = NECK_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &c)| ConvBlock::new(ps, &format!("pixel.neck{i}"), dim, c, 1, 1))
            .collect::<Result<Vec<_>>>()?;
        let neck_total: usize = NECK_WIDTHS.iter().sum();
        let fuser = ConvBlock::new(ps, "pixel.fuser", neck_total, FUSER_OUT, 1, 1)?;
        let compressor = ConvBlock::new(ps, "pixel.compressor", FUSER_OUT, COMPRESSOR_OUT, 1, 1)?;
        let skip = SKIP_KERNELS
            .iter()
            .map(|&k| ConvBlock::new(ps, &format!("pixel.skip{k}"), 3, SKIP_BRANCH_OUT, k, 1))
            .collect::<Result<Vec<_>>>()?;
        let skip_total = SKIP_BRANCH_OUT * SKIP_KERNELS.len();
        let skip_fuser = [
            ConvBlock::new(ps, "pixel.skip_fuser0", skip_total, SKIP_OUT, 3, 2)?,
            ConvBlock::new(ps, "pixel.skip_fuser1", SKIP_OUT, SKIP_OUT, 3, 2)?,
        ];
        let late = [
            ConvBlock::new(ps, "pixel.late0", COMPRESSOR_OUT + SKIP_OUT, LATE_WIDTH, 5, 1)?,
            ConvBlock::new(ps, "pixel.late1", LATE_WIDTH, LATE_WIDTH, 3, 1)?,
            ConvBlock::new(ps, "pixel.late2", LATE_WIDTH, LATE_WIDTH, 3, 1)?,
        ];
        let classifier = ps.conv("pixel.classifier", num_classes, LATE_WIDTH, 1)?;
        Ok(PixelDecoder {
            neck,
            fuser,
            compressor,
            skip,
            skip_fuser,
            late,
            classifier,
            dim,
        })
    }

    /// Logits `(B, C, H/4, W/4)` for normalized images `(B, 3, H, W)` with
    /// sides divisible by 4.
    pub fn forward(&self, enc: &EncoderOutput, image: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(enc, image)?.0)
    }

    pub fn forward_traced(&self, enc: &EncoderOutput, image: &Tensor) -> Result<(Tensor, ChannelTrace)> {
        let (b, _, h, w) = image.dims4()?;
        if h % SCALE != 0 || w % SCALE != 0 {
            return Err(Error::Shape(format!("image {h}x{w} not divisible by {SCALE}")));
        }
        let p = enc.patch_size;
        for f in &enc.layer_features {
            let (fb, fd, fh, fw) = f.dims4()?;
            if fb != b || fd != self.dim || fh * p != h || fw * p != w {
                return Err(Error::Shape(format!(
                    "encoder grid {fb}x{fd}x{fh}x{fw} does not match image {b}x{h}x{w} at P={p}, d={}",
                    self.dim
                )));
            }
        }
        let (qh, qw) = (h / SCALE, w / SCALE);
        let neck = self
            .neck
            .iter()
            .zip(&enc.layer_features)
            .map(|(blk, f)| resize_bilinear(&blk.forward(f)?, qh, qw))
            .collect::<Result<Vec<_>>>()?;
        let neck = Tensor::cat(&neck, 1)?;
        let neck_concat = neck.dim(1)?;
        let fused = self.fuser.forward(&neck)?;
        let compressed = self.compressor.forward(&fused)?;

        let branches = self
            .skip
            .iter()
            .map(|blk| blk.forward(image))
            .collect::<Result<Vec<_>>>()?;
        let skip = Tensor::cat(&branches, 1)?;
        let skip_concat = skip.dim(1)?;
        let skip = self.skip_fuser[1].forward(&self.skip_fuser[0].forward(&skip)?)?;

        let mut x = Tensor::cat(&[&compressed, &skip], 1)?;
        let late_input = x.dim(1)?;
        for blk in &self.late {
            x = blk.forward(&x)?;
        }
        let logits = conv2d(&x, &self.classifier.0, &self.classifier.1, 1, 0)?;
        let trace = ChannelTrace {
            neck_concat,
            fuser: self.fuser.out_channels(),
            compressor: compressed.dim(1)?,
            skip_concat,
            skip: skip.dim(1)?,
            late_input,
            logits: logits.dim(1)?,
        };
        Ok((logits, trace))
    }
}
