//! Criteria 7–8: decoder gradients and output shapes.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use terrainseg::models::{DecoderKind, ModelConfig, SegModel, Segmenter, VitConfig, VitEncoder};
use terrainseg::taxonomy::{ClassTaxonomy, IGNORE_INDEX};
use terrainseg::trainer::weighted_ce_loss;

use crate::Outcome;

const GRAD_TOL: f64 = 1e-4;
/// Relative errors are taken against max(|analytic|, |numeric|, this floor).
const GRAD_FLOOR: f64 = 1e-6;
const STEP: f64 = 1e-5;
const DIRECTIONS: usize = 4;
const COORDS_PER_TENSOR: usize = 2;
const TOY_PATCH: usize = 7;

fn offroad() -> Arc<ClassTaxonomy> {
    Arc::new(ClassTaxonomy::offroad9())
}

fn random_input(rng: &mut ChaCha8Rng, h: usize, w: usize, dtype: DType) -> Tensor {
    let v: Vec<f64> = (0..3 * h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::from_vec(v, (1, 3, h, w), &Device::Cpu)
        .unwrap()
        .to_dtype(dtype)
        .unwrap()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn set(var: &Var, data: Vec<f64>) {
    var.set(&Tensor::from_vec(data, var.shape(), &Device::Cpu).unwrap())
        .unwrap();
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

/// Worst relative error between backprop and central differences, along
/// random directions through all parameters and at sampled coordinates of
/// every parameter tensor. Returns (worst, number of checks).
fn gradient_check(kind: DecoderKind) -> (f64, usize) {
    let enc = VitEncoder::toy(VitConfig::toy(TOY_PATCH), 0)
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap();
    let model = SegModel::new(ModelConfig::new(kind, 3), offroad(), Arc::new(enc)).unwrap();
    assert_eq!(model.dtype(), DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(kind as u64 + 100);
    let x = random_input(&mut rng, 28, 28, DType::F64);
    let cells = match kind {
        DecoderKind::Pixel => 28 * 28,
        DecoderKind::Patch => (28 / TOY_PATCH).pow(2),
    };
    let target: Vec<u8> = (0..cells)
        .map(|_| {
            if rng.random_bool(0.1) {
                IGNORE_INDEX
            } else {
                rng.random_range(0..9)
            }
        })
        .collect();
    let weights: Vec<f64> = (0..9).map(|_| rng.random_range(0.5..2.0)).collect();
    let loss =
        |m: &SegModel| weighted_ce_loss(&m.training_logits(&x).unwrap(), &target, &weights, IGNORE_INDEX).unwrap();
    let scalar = |t: Tensor| t.to_scalar::<f64>().unwrap();

    let vars = model.trainable_vars();
    let grads = loss(&model).backward().unwrap();
    let g: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| values(&grads.get(v.as_tensor()).unwrap()))
        .collect();
    let theta: Vec<Vec<f64>> = vars.iter().map(|v| values(v.as_tensor())).collect();
    let mut worst: f64 = 0.0;
    let mut checks = 0;

    for _ in 0..DIRECTIONS {
        let dir: Vec<Vec<f64>> = theta
            .iter()
            .map(|t| t.iter().map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let analytic: f64 = g
            .iter()
            .zip(&dir)
            .flat_map(|(g, d)| g.iter().zip(d).map(|(a, b)| a * b))
            .sum();
        let at = |s: f64| {
            for ((v, t), d) in vars.iter().zip(&theta).zip(&dir) {
                set(v, t.iter().zip(d).map(|(t, d)| t + s * d).collect());
            }
            scalar(loss(&model))
        };
        let numeric = (at(STEP) - at(-STEP)) / (2.0 * STEP);
        at(0.0);
        worst = worst.max(rel_err(analytic, numeric));
        checks += 1;
    }
    for (i, v) in vars.iter().enumerate() {
        for _ in 0..COORDS_PER_TENSOR {
            let j = rng.random_range(0..theta[i].len());
            let at = |s: f64| {
                let mut t = theta[i].clone();
                t[j] += s;
                set(v, t);
                scalar(loss(&model))
            };
            let numeric = (at(STEP) - at(-STEP)) / (2.0 * STEP);
            at(0.0);
            worst = worst.max(rel_err(g[i][j], numeric));
            checks += 1;
        }
    }
    (worst, checks)
}

/// Criterion 7.
pub fn gradients() -> Outcome {
    let (pixel, np) = gradient_check(DecoderKind::Pixel);
    let (patch, nq) = gradient_check(DecoderKind::Patch);
    let detail =
        format!("pixel max rel err {pixel:.2e} ({np} checks), patch {patch:.2e} ({nq} checks), tol {GRAD_TOL:.0e}");
    if pixel <= GRAD_TOL && patch <= GRAD_TOL {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Criterion 8.
pub fn shapes() -> Outcome {
    let p = TOY_PATCH;
    let enc = Arc::new(VitEncoder::toy(VitConfig::toy(p), 0).unwrap());
    let pixel = SegModel::new(ModelConfig::new(DecoderKind::Pixel, 0), offroad(), enc.clone()).unwrap();
    let patch = SegModel::new(ModelConfig::new(DecoderKind::Patch, 0), offroad(), enc).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut sizes = Vec::new();
    for _ in 0..10 {
        let h = 4 * p * rng.random_range(1..=4);
        let w = 4 * p * rng.random_range(1..=4);
        let x = random_input(&mut rng, h, w, DType::F32);
        let a = pixel.forward(&x).map_err(|e| e.to_string())?.dims4().unwrap();
        let b = patch.forward(&x).map_err(|e| e.to_string())?.dims4().unwrap();
        if a != (1, 9, h / 4, w / 4) {
            return Err(format!("pixel decoder on {h}x{w} gave {a:?}"));
        }
        if b != (1, 9, h / p, w / p) {
            return Err(format!("patch decoder on {h}x{w} gave {b:?}"));
        }
        // Full-resolution predictions come back at the input size.
        let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| image::Rgb([x as u8, y as u8, 7]));
        for m in [&pixel, &patch] {
            let pred = m.predict(&img).map_err(|e| e.to_string())?;
            if (pred.height(), pred.width()) != (h, w) {
                return Err(format!("prediction on {h}x{w} is {}x{}", pred.height(), pred.width()));
            }
        }
        sizes.push(format!("{h}x{w}"));
    }
    Ok(format!("pixel at 1/4, patch at 1/{p}, C=9 for {}", sizes.join(" ")))
}
