//! Seeded parameter initialization and a named store of trainable variables.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Deterministic tensor initializer. Values are drawn in f64 and cast, so
/// the same seed yields the same weights regardless of dtype.
pub struct Initializer {
    rng: ChaCha8Rng,
    dtype: DType,
}

impl Initializer {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn build(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let v = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.build(v, shape)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        let v = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.build(v, shape)
    }

    pub fn constant(&mut self, shape: &[usize], value: f64) -> Result<Tensor> {
        self.build(vec![value; shape.iter().product()], shape)
    }

    /// Weight `(out, in, kh, kw)` and bias `(out)`, both `U(±1/√fan_in)`.
    pub fn conv(&mut self, out: usize, input: usize, k: usize) -> Result<(Tensor, Tensor)> {
        let bound = 1.0 / ((input * k * k) as f64).sqrt();
        Ok((self.uniform(&[out, input, k, k], bound)?, self.uniform(&[out], bound)?))
    }

    /// Weight `(out, in)` and bias `(out)`, both `U(±1/√in)`.
    pub fn linear(&mut self, out: usize, input: usize) -> Result<(Tensor, Tensor)> {
        let bound = 1.0 / (input as f64).sqrt();
        Ok((self.uniform(&[out, input], bound)?, self.uniform(&[out], bound)?))
    }

    pub fn norm(&mut self, c: usize) -> Result<(Tensor, Tensor)> {
        Ok((self.constant(&[c], 1.0)?, self.constant(&[c], 0.0)?))
    }
}

/// Named trainable variables in registration order.
pub struct ParamStore {
    init: Initializer,
    entries: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        ParamStore {
            init: Initializer::new(seed, dtype),
            entries: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.init.dtype()
    }

    fn register(&mut self, name: String, t: Tensor) -> Result<Tensor> {
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.entries.push((name, var));
        Ok(handle)
    }

    pub fn conv(&mut self, name: &str, out: usize, input: usize, k: usize) -> Result<(Tensor, Tensor)> {
        let (w, b) = self.init.conv(out, input, k)?;
        Ok((
            self.register(format!("{name}.weight"), w)?,
            self.register(format!("{name}.bias"), b)?,
        ))
    }

    pub fn linear(&mut self, name: &str, out: usize, input: usize) -> Result<(Tensor, Tensor)> {
        let (w, b) = self.init.linear(out, input)?;
        Ok((
            self.register(format!("{name}.weight"), w)?,
            self.register(format!("{name}.bias"), b)?,
        ))
    }

    pub fn norm(&mut self, name: &str, c: usize) -> Result<(Tensor, Tensor)> {
        let (g, b) = self.init.norm(c)?;
        Ok((
            self.register(format!("{name}.weight"), g)?,
            self.register(format!("{name}.bias"), b)?,
        ))
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let t = self.init.normal(shape, std)?;
        self.register(name.to_string(), t)
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrites every variable from `tensors`; names and shapes must match
    /// exactly.
    pub fn load(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.entries.len(),
                tensors.len()
            )));
        }
        for (name, var) in &self.entries {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}
