//! Criteria 1–6: label algebra, selection, metrics and loss against oracles.

use std::sync::Arc;

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use terrainseg::coarsify::{boundary_band, coarsify_mask, label_density, sample_polygon, CoarsifyConfig, ExemptScope};
use terrainseg::dataio::{LabelMask, Provenance};
use terrainseg::metrics::{confusion, miou, ConfusionMatrix};
use terrainseg::pseudo::fuse_by_disagreement;
use terrainseg::select::{farthest_point_sample, EmbeddingMatrix};
use terrainseg::taxonomy::{ClassTaxonomy, IGNORE_INDEX};
use terrainseg::trainer::weighted_ce_loss;

use crate::oracles;
use crate::Outcome;

const MIOU_TOL: f64 = 1e-12;
const LOSS_TOL: f64 = 1e-9;

fn tax() -> Arc<ClassTaxonomy> {
    Arc::new(ClassTaxonomy::offroad9())
}

/// Voronoi regions of a few random sites, each painted with a random class.
/// Exempt classes are drawn often so that exemption is exercised.
fn random_mask(rng: &mut ChaCha8Rng, max_side: usize) -> LabelMask {
    let h = rng.random_range(16..=max_side);
    let w = rng.random_range(16..=max_side);
    let sites: Vec<(f64, f64, u8)> = (0..rng.random_range(2..=6))
        .map(|_| {
            let class = if rng.random_bool(0.4) {
                [3u8, 7, 8][rng.random_range(0..3)]
            } else {
                rng.random_range(0..9)
            };
            (rng.random::<f64>() * w as f64, rng.random::<f64>() * h as f64, class)
        })
        .collect();
    let data = (0..h * w)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            sites
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - x).powi(2) + (a.1 - y).powi(2);
                    let db = (b.0 - x).powi(2) + (b.1 - y).powi(2);
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap()
                .2
        })
        .collect();
    LabelMask::new(h, w, data, tax(), Provenance::Dense).unwrap()
}

fn exempt_indices(cfg: &CoarsifyConfig) -> Vec<u8> {
    cfg.exempt_classes.iter().map(|n| tax().index_of(n).unwrap()).collect()
}

/// Criterion 1.
pub fn coarsify_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut band_px = 0usize;
    for case in 0..50 {
        let mask = random_mask(&mut rng, 64);
        let (h, w) = (mask.height(), mask.width());
        let radius = rng.random_range(0..=8);
        let band = boundary_band(&mask, radius);
        let want = oracles::band(mask.data(), h, w, radius);
        if band.data != want {
            return Err(format!(
                "case {case}: boundary band differs from brute force ({h}x{w}, r={radius})"
            ));
        }
        band_px += want.iter().filter(|&&b| b).count();

        let cfg = CoarsifyConfig {
            boundary_radius_px: radius,
            polygon_area_fraction: [0.1, 0.2, 0.4][case % 3],
            polygon_count: rng.random_range(0..=4),
            exempt_scope: if case % 2 == 0 {
                ExemptScope::PolygonOnly
            } else {
                ExemptScope::PolygonAndBand
            },
            seed: case as u64,
            ..CoarsifyConfig::default()
        };
        let mut replay = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut polygons = vec![false; h * w];
        for _ in 0..cfg.polygon_count {
            let p = sample_polygon(h, w, cfg.polygon_area_fraction, &mut replay).map_err(|e| e.to_string())?;
            for i in 0..h * w {
                let inside = oracles::inside_polygon(&p.vertices, (i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
                if inside != p.raster.data[i] {
                    return Err(format!("case {case}: polygon raster differs from ray casting at {i}"));
                }
                polygons[i] |= inside;
            }
        }
        let want = oracles::coarse(
            mask.data(),
            &want,
            &polygons,
            &exempt_indices(&cfg),
            cfg.exempt_scope == ExemptScope::PolygonAndBand,
            IGNORE_INDEX,
        );
        let (got, density) =
            coarsify_mask(&mask, &cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).map_err(|e| e.to_string())?;
        if got.data() != want.as_slice() {
            return Err(format!("case {case}: coarse mask differs from set algebra"));
        }
        let kept = want.iter().filter(|&&v| v != IGNORE_INDEX).count();
        if density != kept as f64 / (h * w) as f64 {
            return Err(format!("case {case}: density {density} vs {kept}/{}", h * w));
        }
    }
    Ok(format!("50 masks, {band_px} band pixels, bands and coarse masks exact"))
}

/// Criterion 2.
pub fn coarsify_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cases = 100;
    for case in 0..cases {
        let mask = random_mask(&mut rng, 48);
        let base = CoarsifyConfig {
            polygon_count: rng.random_range(0..=4),
            seed: rng.random(),
            ..CoarsifyConfig::default()
        };
        let exempt = exempt_indices(&base);
        let mut last = f64::INFINITY;
        for n in [0u32, 1, 3, 7, 15] {
            let cfg = CoarsifyConfig {
                boundary_radius_px: n,
                ..base.clone()
            };
            let (out, d) =
                coarsify_mask(&mask, &cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).map_err(|e| e.to_string())?;
            if d > last {
                return Err(format!("case {case}: density rose from {last} to {d} at N={n}"));
            }
            last = d;
            let band = boundary_band(&mask, n);
            for (i, (&o, &m)) in out.data().iter().zip(mask.data()).enumerate() {
                if o != m && o != IGNORE_INDEX {
                    return Err(format!("case {case}: invented label {o} at {i} (dense {m})"));
                }
                if exempt.contains(&m) && !band.data[i] && o != m {
                    return Err(format!(
                        "case {case}: exempt pixel {i} outside the band was dropped at N={n}"
                    ));
                }
            }
        }
    }
    Ok(format!("{cases}/{cases} cases over N in {{0,1,3,7,15}}"))
}

/// Criterion 3.
pub fn fps_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut steps = 0;
    for set in 0..20 {
        let n = rng.random_range(2..=200);
        let d = rng.random_range(1..=16);
        // Every fourth set lies on a small integer grid, which forces ties.
        let grid = set % 4 == 0;
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..d)
                    .map(|_| {
                        if grid {
                            rng.random_range(0..3) as f64
                        } else {
                            rng.random_range(-5.0..5.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let emb = EmbeddingMatrix::from_rows(points.clone()).map_err(|e| e.to_string())?;
        let full = farthest_point_sample(&emb, n).map_err(|e| e.to_string())?;
        for t in 0..n {
            let best = oracles::fps_step_argmaxes(&points, &full[..t]);
            // Ties go to the lowest index.
            if full[t] != best[0] {
                return Err(format!(
                    "set {set}: step {t} picked {} but the exhaustive scan gives {:?}",
                    full[t], best
                ));
            }
            steps += 1;
        }
        for k in 1..=n {
            if farthest_point_sample(&emb, k).map_err(|e| e.to_string())? != full[..k] {
                return Err(format!("set {set}: k={k} is not a prefix of k=n"));
            }
        }
    }
    Ok(format!("20 sets, {steps} greedy steps optimal, prefix property holds"))
}

fn random_pair(rng: &mut ChaCha8Rng) -> (LabelMask, LabelMask) {
    let (h, w) = (rng.random_range(1..=24), rng.random_range(1..=24));
    let classes = rng.random_range(1..=9);
    let a: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..classes)).collect();
    let b: Vec<u8> = a
        .iter()
        .map(|&v| {
            if rng.random_bool(0.4) {
                rng.random_range(0..classes)
            } else {
                v
            }
        })
        .collect();
    let m = |d| LabelMask::new(h, w, d, tax(), Provenance::Dense).unwrap();
    (m(a), m(b))
}

/// Criterion 4.
pub fn fusion_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let fuse = |a: &LabelMask, b: &LabelMask| fuse_by_disagreement(a, b).map_err(|e| e.to_string());
    for case in 0..200 {
        let (a, b) = random_pair(&mut rng);
        if fuse(&a, &a)?.data() != a.data() {
            return Err(format!("case {case}: fuse(p, p) != p"));
        }
        let ab = fuse(&a, &b)?;
        let ba = fuse(&b, &a)?;
        let pattern = |m: &LabelMask| m.data().iter().map(|&v| v == IGNORE_INDEX).collect::<Vec<_>>();
        if pattern(&ab) != pattern(&ba) {
            return Err(format!(
                "case {case}: ignore patterns of fuse(a,b) and fuse(b,a) differ"
            ));
        }

        // Extra disagreement can only lower density.
        let mut more = b.data().to_vec();
        for (i, v) in more.iter_mut().enumerate() {
            if rng.random_bool(0.2) {
                *v = (a.data()[i] + 1) % 9;
            }
        }
        let b2 = b.with_data(more).unwrap();
        if label_density(&fuse(&a, &b2)?) > label_density(&ab) {
            return Err(format!("case {case}: density rose after adding disagreement"));
        }

        // Planted errors: disjoint sets E_A, E_B of wrong labels on top of gt.
        let gt = &a;
        let n = gt.len();
        let owner: Vec<u8> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let wrong = |v: u8, k: u8| (v + k) % 9;
        let pa: Vec<u8> = (0..n)
            .map(|i| {
                if owner[i] == 1 {
                    wrong(gt.data()[i], 1)
                } else {
                    gt.data()[i]
                }
            })
            .collect();
        let pb: Vec<u8> = (0..n)
            .map(|i| {
                if owner[i] == 2 {
                    wrong(gt.data()[i], 2)
                } else {
                    gt.data()[i]
                }
            })
            .collect();
        let pseudo = fuse(&gt.with_data(pa).unwrap(), &gt.with_data(pb).unwrap())?;
        let errors = owner.iter().filter(|&&o| o == 1 || o == 2).count();
        for i in 0..n {
            let v = pseudo.data()[i];
            let planted = owner[i] == 1 || owner[i] == 2;
            if (planted && v != IGNORE_INDEX) || (!planted && v != gt.data()[i]) {
                return Err(format!("case {case}: planted-error pixel {i} fused to {v}"));
            }
        }
        if label_density(&pseudo) != (n - errors) as f64 / n as f64 {
            return Err(format!("case {case}: density is not 1 - |E_A ∪ E_B| / N"));
        }
    }
    Ok("200/200 cases: idempotence, commutativity, monotonicity, planted errors".into())
}

/// Criterion 5.
pub fn miou_oracle() -> Outcome {
    let hand = ConfusionMatrix::from_counts(2, vec![2, 1, 0, 3]).map_err(|e| e.to_string())?;
    let m = miou(&hand).map_err(|e| e.to_string())?.miou;
    if m != 17.0 / 24.0 {
        return Err(format!("[[2,1],[0,3]] gave {m:?}, not 17/24"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let n = rng.random_range(1..=400);
        let classes = rng.random_range(1..=9u8);
        let pred: Vec<u8> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        // At least one labeled pixel so the mean is defined.
        let gt: Vec<u8> = (0..n)
            .map(|i| {
                if i > 0 && rng.random_bool(0.15) {
                    IGNORE_INDEX
                } else {
                    rng.random_range(0..classes)
                }
            })
            .collect();
        let want = oracles::miou(&pred, &gt, 9, IGNORE_INDEX);
        let m = |d: Vec<u8>| LabelMask::new(1, n, d, tax(), Provenance::Dense).unwrap();
        let got = miou(&confusion(&m(pred), &m(gt)).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?
            .miou;
        let err = (got - want).abs();
        if err > MIOU_TOL {
            return Err(format!("case {case}: {got} vs brute force {want}"));
        }
        worst = worst.max(err);
    }
    Ok(format!(
        "17/24 exact, 100 pairs max |err| {worst:.1e} (tol {MIOU_TOL:.0e})"
    ))
}

fn loss_of(logits: &[f64], c: usize, h: usize, w: usize, target: &[u8], weights: &[f64]) -> Result<f64, String> {
    let t = Tensor::from_vec(logits.to_vec(), (1, c, h, w), &Device::Cpu).map_err(|e| e.to_string())?;
    weighted_ce_loss(&t, target, weights, IGNORE_INDEX)
        .and_then(|l| Ok(l.to_scalar::<f64>()?))
        .map_err(|e| e.to_string())
}

/// Criterion 6.
pub fn loss_correctness() -> Outcome {
    let single = loss_of(&[0.0, 0.0], 2, 1, 1, &[0], &[1.0, 1.0])?;
    if (single - std::f64::consts::LN_2).abs() > LOSS_TOL {
        return Err(format!("single pixel gave {single}, expected ln 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let (c, h, w) = (
            rng.random_range(2..=9),
            rng.random_range(1..=6),
            rng.random_range(1..=6),
        );
        let logits: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-6.0..6.0)).collect();
        let target: Vec<u8> = (0..h * w)
            .map(|i| {
                if i > 0 && rng.random_bool(0.2) {
                    IGNORE_INDEX
                } else {
                    rng.random_range(0..c as u8)
                }
            })
            .collect();
        let weights: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..3.0)).collect();
        let scale = rng.random_range(0.01..100.0);
        let scaled: Vec<f64> = weights.iter().map(|w| w * scale).collect();
        let l = loss_of(&logits, c, h, w, &target, &weights)?;
        let ls = loss_of(&logits, c, h, w, &target, &scaled)?;
        let brute = oracles::weighted_ce(&logits, c, &target, &weights, IGNORE_INDEX);
        let err = (l - ls).abs().max((l - brute).abs());
        if err > LOSS_TOL {
            return Err(format!(
                "case {case}: loss {l}, scaled weights {ls}, brute force {brute}"
            ));
        }
        worst = worst.max(err);
    }
    let ignored = loss_of(
        &[1.0, -2.0, 0.5, 3.0],
        2,
        1,
        2,
        &[IGNORE_INDEX, IGNORE_INDEX],
        &[1.0, 1.0],
    )?;
    if ignored != 0.0 {
        return Err(format!("all-ignore gave {ignored}, expected exactly 0"));
    }
    Ok(format!(
        "ln 2 exact to {LOSS_TOL:.0e}, 20 random cases scale-invariant and match brute force (max {worst:.1e}), all-ignore = 0"
    ))
}
