//! Hand-written CPU kernels for the hot spots of the convolutional decoder.
//! Each is a candle custom op with an explicit backward.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor};

use crate::error::Result;

/// Geometry of a zero-padded, strided sliding window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Window {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Window {
    fn cols_shape(&self) -> Shape {
        Shape::from((self.b, self.c * self.kh * self.kw, self.ho * self.wo))
    }

    fn image_shape(&self) -> Shape {
        Shape::from((self.b, self.c, self.h, self.w))
    }

    /// Valid output columns `[lo, hi)` for kernel column `dx`.
    fn col_span(&self, dx: usize) -> (usize, usize) {
        let (p, s) = (self.pad, self.stride);
        // x = ox·s + dx − p must lie in [0, w).
        let lo = if dx >= p { 0 } else { (p - dx).div_ceil(s) };
        let hi = if self.w + p > dx {
            ((self.w + p - dx - 1) / s + 1).min(self.wo)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Calls `f(image_offset, column_offset, count)` for every run of
    /// in-bounds taps; within a run both offsets advance together, the
    /// image one by `stride`.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let l = self.ho * self.wo;
        for bc in 0..self.b * self.c {
            let img = bc * self.h * self.w;
            for dy in 0..self.kh {
                for dx in 0..self.kw {
                    let (lo, hi) = self.col_span(dx);
                    if lo >= hi {
                        continue;
                    }
                    let row0 = (bc * self.kh * self.kw + dy * self.kw + dx) * l;
                    for oy in 0..self.ho {
                        let y = (oy * self.stride + dy) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let x0 = lo * self.stride + dx - self.pad;
                        f(img + y as usize * self.w + x0, row0 + oy * self.wo + lo, hi - lo);
                    }
                }
            }
        }
    }

    fn gather<T: Copy + Default>(&self, src: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); self.cols_shape().elem_count()];
        let s = self.stride;
        self.for_each_run(|i, o, n| {
            if s == 1 {
                out[o..o + n].copy_from_slice(&src[i..i + n]);
            } else {
                for (k, v) in out[o..o + n].iter_mut().enumerate() {
                    *v = src[i + k * s];
                }
            }
        });
        out
    }

    fn scatter_add<T: Copy + Default + std::ops::AddAssign>(&self, cols: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); self.image_shape().elem_count()];
        let s = self.stride;
        self.for_each_run(|i, o, n| {
            for (k, &v) in cols[o..o + n].iter().enumerate() {
                out[i + k * s] += v;
            }
        });
        out
    }
}

fn slice<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => Err(candle_core::Error::Msg("kernel input must be contiguous".into())),
    }
}

struct Im2Col(Window);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(self.0.gather(slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(self.0.gather(slice(v, layout)?)),
            _ => return Err(candle_core::Error::Msg("im2col supports f32 and f64".into())),
        };
        Ok((out, self.0.cols_shape()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

struct Col2Im(Window);

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(self.0.scatter_add(slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(self.0.scatter_add(slice(v, layout)?)),
            _ => return Err(candle_core::Error::Msg("col2im supports f32 and f64".into())),
        };
        Ok((out, self.0.image_shape()))
    }
}

/// Unfolds `(B, C, H, W)` into `(B, C·kh·kw, Ho·Wo)` columns with implicit
/// zero padding; rows are ordered channel-major, then kernel row, then
/// kernel column, matching a `(Co, C, kh, kw)` weight reshaped to 2-D.
pub fn im2col(x: &Tensor, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<(Tensor, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    let (ho, wo) = ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1);
    let win = Window {
        b,
        c,
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        ho,
        wo,
    };
    Ok((x.contiguous()?.apply_op1(Im2Col(win))?, ho, wo))
}

fn to_f64(s: &CpuStorage, layout: &Layout) -> candle_core::Result<Vec<f64>> {
    match s {
        CpuStorage::F32(v) => Ok(slice(v, layout)?.iter().map(|&x| x as f64).collect()),
        CpuStorage::F64(v) => Ok(slice(v, layout)?.to_vec()),
        _ => Err(candle_core::Error::Msg("kernels support f32 and f64".into())),
    }
}

fn from_f64(v: Vec<f64>, like: &CpuStorage) -> CpuStorage {
    match like {
        CpuStorage::F32(_) => CpuStorage::F32(v.into_iter().map(|x| x as f32).collect()),
        _ => CpuStorage::F64(v),
    }
}

fn values(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()
}

fn tensor(v: Vec<f64>, like: &Tensor) -> candle_core::Result<Tensor> {
    Tensor::from_vec(v, like.shape(), like.device())?.to_dtype(like.dtype())
}

const SQRT_HALF: f64 = std::f64::consts::FRAC_1_SQRT_2;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + candle_core::cpu::erf::erf_f64(x * SQRT_HALF))
}

fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    0.5 * (1.0 + candle_core::cpu::erf::erf_f64(x * SQRT_HALF)) + x * pdf
}

/// Exact (erf) GELU.
struct Gelu;

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu-erf"
    }

    fn cpu_fwd(&self, s: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(slice(v, layout)?.iter().map(|&x| gelu(x as f64) as f32).collect()),
            _ => from_f64(to_f64(s, layout)?.into_iter().map(gelu).collect(), s),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g: Vec<f64> = values(arg)?
            .into_iter()
            .zip(values(grad)?)
            .map(|(x, g)| g * gelu_grad(x))
            .collect();
        Ok(Some(tensor(g, arg)?))
    }
}

pub fn gelu_erf(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Gelu)?)
}

/// `x + b[c]` for `x` of shape `(B, C, …)`.
struct ChannelBias {
    channels: usize,
    inner: usize,
}

impl CustomOp2 for ChannelBias {
    fn name(&self) -> &'static str {
        "channel-bias"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (c, inner) = (self.channels, self.inner);
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(b)) => {
                let (x, b) = (slice(x, l1)?, slice(b, l2)?);
                CpuStorage::F32(x.iter().enumerate().map(|(i, &v)| v + b[(i / inner) % c]).collect())
            }
            _ => {
                let (x, b) = (to_f64(s1, l1)?, to_f64(s2, l2)?);
                from_f64(x.iter().enumerate().map(|(i, &v)| v + b[(i / inner) % c]).collect(), s1)
            }
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        _x: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let mut gb = vec![0.0; self.channels];
        for (i, g) in values(grad)?.into_iter().enumerate() {
            gb[(i / self.inner) % self.channels] += g;
        }
        Ok((Some(grad.clone()), Some(tensor(gb, b)?)))
    }
}

/// Adds a per-channel bias to `(B, C, …)`.
pub fn add_channel_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dims = x.dims();
    let channels = b.dims1()?;
    if dims.len() < 2 || dims[1] != channels {
        return Err(crate::Error::Shape(format!("bias of {channels} for input {dims:?}")));
    }
    let inner = dims[2..].iter().product();
    Ok(x.contiguous()?
        .apply_op2(&b.contiguous()?, ChannelBias { channels, inner })?)
}

/// Group normalization of `(B, C, …)` with per-channel affine.
struct GroupNorm {
    batch: usize,
    channels: usize,
    groups: usize,
    inner: usize,
    eps: f64,
}

impl GroupNorm {
    /// Per-(batch, group) mean and reciprocal standard deviation.
    fn stats(&self, x: &[f64]) -> Vec<(f64, f64)> {
        let n = self.channels / self.groups * self.inner;
        x.chunks(n)
            .map(|g| {
                let mean = g.iter().sum::<f64>() / n as f64;
                let var = g.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                (mean, 1.0 / (var + self.eps).sqrt())
            })
            .collect()
    }
}

impl CustomOp3 for GroupNorm {
    fn name(&self) -> &'static str {
        "group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = to_f64(s1, l1)?;
        let (gamma, beta) = (to_f64(s2, l2)?, to_f64(s3, l3)?);
        let stats = self.stats(&x);
        let per_group = self.channels / self.groups * self.inner;
        let out = x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let (mean, rstd) = stats[i / per_group];
                let c = (i / self.inner) % self.channels;
                (v - mean) * rstd * gamma[c] + beta[c]
            })
            .collect();
        Ok((from_f64(out, s1), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let xv = values(x)?;
        let gv = values(grad)?;
        let gam = values(gamma)?;
        let stats = self.stats(&xv);
        let per_group = self.channels / self.groups * self.inner;
        let mut dgamma = vec![0.0; self.channels];
        let mut dbeta = vec![0.0; self.channels];
        let mut dx = vec![0.0; xv.len()];
        for (gi, &(mean, rstd)) in stats.iter().enumerate().take(self.batch * self.groups) {
            let range = gi * per_group..(gi + 1) * per_group;
            // dx = rstd·(dxhat − mean(dxhat) − xhat·mean(dxhat·xhat))
            let (mut m1, mut m2) = (0.0, 0.0);
            for i in range.clone() {
                let c = (i / self.inner) % self.channels;
                let xhat = (xv[i] - mean) * rstd;
                let dxhat = gv[i] * gam[c];
                dgamma[c] += gv[i] * xhat;
                dbeta[c] += gv[i];
                m1 += dxhat;
                m2 += dxhat * xhat;
            }
            let (m1, m2) = (m1 / per_group as f64, m2 / per_group as f64);
            for i in range {
                let c = (i / self.inner) % self.channels;
                let xhat = (xv[i] - mean) * rstd;
                dx[i] = rstd * (gv[i] * gam[c] - m1 - xhat * m2);
            }
        }
        Ok((
            Some(tensor(dx, x)?),
            Some(tensor(dgamma, gamma)?),
            Some(tensor(dbeta, beta)?),
        ))
    }
}

/// Group normalization over `(B, C, …)`; statistics in f64.
pub fn group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let dims = x.dims();
    let channels = gamma.dims1()?;
    if dims.len() < 2 || dims[1] != channels || groups == 0 || channels % groups != 0 {
        return Err(crate::Error::Shape(format!(
            "group norm with {groups} groups and {channels} channels on {dims:?}"
        )));
    }
    let op = GroupNorm {
        batch: dims[0],
        channels,
        groups,
        inner: dims[2..].iter().product(),
        eps,
    };
    Ok(x.contiguous()?
        .apply_op3(&gamma.contiguous()?, &beta.contiguous()?, op)?)
}
