//! Differentiable building blocks written from tensor primitives so that
//! every op used in training has a backward pass.

use candle_core::{DType, Device, Tensor, D};

use crate::error::Result;

/// Zero-padded 2-D convolution lowered to im2col and a matmul, which is much
/// faster on CPU than the direct convolution backward for these kernel sizes.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (bs, c, h, wd) = x.dims4()?;
    let (co, ci, kh, kw) = w.dims4()?;
    if ci != c {
        return Err(crate::Error::Shape(format!(
            "conv expects {ci} input channels, got {c}"
        )));
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(crate::Error::Shape(format!(
            "{h}x{wd} input is smaller than a {kh}x{kw} kernel"
        )));
    }
    let (cols, ho, wo) = if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
        (x.reshape((bs, c, h * wd))?, h, wd)
    } else {
        super::kernels::im2col(x, kh, kw, stride, pad)?
    };
    // A stride-0 batch on the left of `matmul` gives wrong results in the CPU
    // backend; `broadcast_matmul` takes a correct path.
    let wm = w.reshape((co, ci * kh * kw))?;
    let y = wm.broadcast_matmul(&cols)?;
    Ok(super::kernels::add_channel_bias(&y, b)?.reshape((bs, co, ho, wo))?)
}

pub use super::kernels::group_norm;

/// Layer normalization over the last dimension.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered
        .broadcast_div(&(var + eps)?.sqrt()?)?
        .broadcast_mul(gamma)?
        .broadcast_add(beta)?)
}

/// `x · wᵀ + b` with `w` of shape `(out, in)`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_matmul(&w.t()?)?.broadcast_add(b)?)
}

/// Softmax over the last dimension. The max shift is detached; it cancels
/// analytically.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Row-stochastic `(out, in)` matrix for half-pixel-centered linear
/// interpolation with edge clamping.
pub fn interp_matrix(out: usize, input: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut m = vec![0f64; out * input];
    let scale = input as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let t = src - i0 as f64;
        m[i * input + i0] += 1.0 - t;
        m[i * input + i1] += t;
    }
    Ok(Tensor::from_vec(m, (out, input), device)?.to_dtype(dtype)?)
}

/// Bilinear resize of `(B, C, H, W)` as two matrix products.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (oh, ow) {
        return Ok(x.clone());
    }
    let (dt, dev) = (x.dtype(), x.device());
    let aw = interp_matrix(ow, w, dt, dev)?.t()?.contiguous()?;
    let ah = interp_matrix(oh, h, dt, dev)?;
    let y = x.contiguous()?.broadcast_matmul(&aw)?;
    Ok(ah.broadcast_matmul(&y)?)
}

/// Reflected index for position `i` of an axis of length `n`.
pub fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Pads `(B, C, H, W)` at the bottom and right by reflection.
pub fn reflect_pad(x: &Tensor, ph: usize, pw: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let mut out = x.clone();
    if ph > 0 {
        let idx: Vec<u32> = (0..h + ph).map(|i| reflect_index(i, h) as u32).collect();
        out = out.index_select(&Tensor::new(idx, x.device())?, 2)?;
    }
    if pw > 0 {
        let idx: Vec<u32> = (0..w + pw).map(|i| reflect_index(i, w) as u32).collect();
        out = out.index_select(&Tensor::new(idx, x.device())?, 3)?;
    }
    Ok(out)
}

pub fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Multi-head self-attention weights (separate q, k, v projections).
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: (Tensor, Tensor),
    pub k: (Tensor, Tensor),
    pub v: (Tensor, Tensor),
    pub out: (Tensor, Tensor),
    pub heads: usize,
}

impl Attention {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let hd = d / self.heads;
        let split = |p: &(Tensor, Tensor)| -> Result<Tensor> {
            Ok(linear(x, &p.0, &p.1)?
                .reshape((b, n, self.heads, hd))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let (q, k, v) = (split(&self.q)?, split(&self.k)?, split(&self.v)?);
        let att = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (hd as f64).sqrt()))?;
        let y = softmax_last(&att)?
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, d))?;
        linear(&y, &self.out.0, &self.out.1)
    }
}

/// Pre-norm transformer block with optional per-channel layer scale.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: (Tensor, Tensor),
    pub attn: Attention,
    pub ls1: Option<Tensor>,
    pub norm2: (Tensor, Tensor),
    pub fc1: (Tensor, Tensor),
    pub fc2: (Tensor, Tensor),
    pub ls2: Option<Tensor>,
    pub eps: f64,
}

impl Block {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let scale = |y: Tensor, ls: &Option<Tensor>| -> Result<Tensor> {
            Ok(match ls {
                Some(l) => y.broadcast_mul(l)?,
                None => y,
            })
        };
        let h = layer_norm(x, &self.norm1.0, &self.norm1.1, self.eps)?;
        let x = (x + scale(self.attn.forward(&h)?, &self.ls1)?)?;
        let h = layer_norm(&x, &self.norm2.0, &self.norm2.1, self.eps)?;
        let h = linear(&h, &self.fc1.0, &self.fc1.1)?.gelu_erf()?;
        let h = linear(&h, &self.fc2.0, &self.fc2.1)?;
        Ok((&x + scale(h, &self.ls2)?)?)
    }
}
