//! Brute-force references. Deliberately naive: every function here follows
//! a definition directly and shares no code with the library.

/// Pixels with a 4-neighbor of a different value.
pub fn boundary(data: &[u8], h: usize, w: usize) -> Vec<bool> {
    let at = |x: usize, y: usize| data[y * w + x];
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = at(x, y);
            let mut diff = false;
            if x > 0 {
                diff |= at(x - 1, y) != v;
            }
            if x + 1 < w {
                diff |= at(x + 1, y) != v;
            }
            if y > 0 {
                diff |= at(x, y - 1) != v;
            }
            if y + 1 < h {
                diff |= at(x, y + 1) != v;
            }
            out[y * w + x] = diff;
        }
    }
    out
}

/// Band of pixels whose squared Euclidean distance to some boundary pixel is
/// below r², found by scanning every boundary pixel. Radius 0 is the
/// boundary itself.
pub fn band(data: &[u8], h: usize, w: usize, radius: u32) -> Vec<bool> {
    let b = boundary(data, h, w);
    if radius == 0 {
        return b;
    }
    let seeds: Vec<(i64, i64)> = (0..h * w)
        .filter(|&i| b[i])
        .map(|i| ((i % w) as i64, (i / w) as i64))
        .collect();
    let r2 = (radius as i64).pow(2);
    (0..h * w)
        .map(|i| {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            seeds.iter().any(|&(sx, sy)| (x - sx).pow(2) + (y - sy).pow(2) < r2)
        })
        .collect()
}

/// Even-odd ray casting for a pixel center.
pub fn inside_polygon(vertices: &[(f64, f64)], px: f64, py: f64) -> bool {
    let n = vertices.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = vertices[i];
        let (xj, yj) = vertices[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Coarse labels by set algebra: keep `dense(x)` iff x is outside the band
/// (or exempt when exempt pixels also bypass the band) and inside a polygon
/// or exempt.
pub fn coarse(
    dense: &[u8],
    band: &[bool],
    polygons: &[bool],
    exempt: &[u8],
    exempt_bypasses_band: bool,
    ignore: u8,
) -> Vec<u8> {
    (0..dense.len())
        .map(|i| {
            let is_exempt = exempt.contains(&dense[i]);
            let outside_band = !band[i] || (is_exempt && exempt_bypasses_band);
            if outside_band && (polygons[i] || is_exempt) {
                dense[i]
            } else {
                ignore
            }
        })
        .collect()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Every unselected index attaining the maximum min-distance to `selected`
/// (or the maximum distance to the centroid when nothing is selected).
pub fn fps_step_argmaxes(points: &[Vec<f64>], selected: &[usize]) -> Vec<usize> {
    let n = points.len();
    let d = points[0].len();
    let score = |i: usize| -> f64 {
        if selected.is_empty() {
            let centroid: Vec<f64> = (0..d)
                .map(|k| points.iter().map(|p| p[k]).sum::<f64>() / n as f64)
                .collect();
            sq_dist(&points[i], &centroid)
        } else {
            selected
                .iter()
                .map(|&j| sq_dist(&points[i], &points[j]))
                .fold(f64::INFINITY, f64::min)
        }
    };
    let candidates: Vec<(usize, f64)> = (0..n)
        .filter(|i| !selected.contains(i))
        .map(|i| (i, score(i)))
        .collect();
    let best = candidates.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    candidates.into_iter().filter(|c| c.1 == best).map(|c| c.0).collect()
}

/// Mean IoU from per-class intersection and union counts; classes with an
/// empty union are left out.
pub fn miou(pred: &[u8], gt: &[u8], classes: u8, ignore: u8) -> f64 {
    let mut ious = Vec::new();
    for c in 0..classes {
        let mut inter = 0u64;
        let mut union = 0u64;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore {
                continue;
            }
            if p == c && g == c {
                inter += 1;
            }
            if p == c || g == c {
                union += 1;
            }
        }
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

/// Weighted mean cross-entropy over non-ignore pixels of `(C, N)` logits
/// stored class-major.
pub fn weighted_ce(logits: &[f64], classes: usize, target: &[u8], weights: &[f64], ignore: u8) -> f64 {
    let n = target.len();
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &t) in target.iter().enumerate() {
        if t == ignore {
            continue;
        }
        let z: Vec<f64> = (0..classes).map(|c| logits[c * n + i]).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        num += weights[t as usize] * (lse - z[t as usize]);
        den += weights[t as usize];
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}
