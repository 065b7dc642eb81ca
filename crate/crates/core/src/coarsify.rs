//! Turns dense label rasters into coarse ones.
//!
//! Labels within a Euclidean radius of any class boundary are erased, then
//! only the labels inside a few random convex polygons are kept. Pixels of
//! the exempt (rare) classes skip the polygon step.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{self, ColorMatch, DatasetManifest, LabelMask, Provenance};
use crate::error::{Error, Result};
use crate::taxonomy::ClassTaxonomy;

/// Attempts allowed per polygon before giving up.
pub const POLYGON_ATTEMPTS: usize = 100;

/// A boolean raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, value: bool) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn union_with(&mut self, other: &BinaryMask) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

/// Which steps the exempt classes bypass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExemptScope {
    /// Exempt pixels skip polygon masking but are still eroded near boundaries.
    #[default]
    PolygonOnly,
    /// Exempt pixels survive both steps.
    PolygonAndBand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoarsifyConfig {
    /// Erosion radius in pixels.
    pub boundary_radius_px: u32,
    /// Target area of each polygon as a fraction of the image.
    pub polygon_area_fraction: f64,
    pub polygon_count: usize,
    pub exempt_classes: Vec<String>,
    pub exempt_scope: ExemptScope,
    pub seed: u64,
}

impl Default for CoarsifyConfig {
    fn default() -> Self {
        CoarsifyConfig {
            boundary_radius_px: 7,
            polygon_area_fraction: 0.1,
            polygon_count: 3,
            exempt_classes: vec!["water".into(), "wall-like".into(), "diverse-obstacle".into()],
            exempt_scope: ExemptScope::PolygonOnly,
            seed: 0,
        }
    }
}

impl CoarsifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.polygon_area_fraction > 0.0 && self.polygon_area_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "polygon_area_fraction must be in (0, 1], got {}",
                self.polygon_area_fraction
            )));
        }
        Ok(())
    }
}

/// Pixels with a 4-neighbor of a different label. Ignore counts as a label.
pub fn boundary_pixels(mask: &LabelMask) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let d = mask.data();
    let mut out = BinaryMask::new(h, w, false);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let v = d[i];
            out.data[i] = (x > 0 && d[i - 1] != v)
                || (x + 1 < w && d[i + 1] != v)
                || (y > 0 && d[i - w] != v)
                || (y + 1 < h && d[i + w] != v);
        }
    }
    out
}

/// Exact squared Euclidean distance from every pixel to the nearest `true`
/// pixel of `seeds`, by Meijster's two-pass algorithm. Returns `None` when
/// there are no seeds.
pub fn squared_distance_transform(seeds: &BinaryMask) -> Option<Vec<i64>> {
    let (h, w) = (seeds.height, seeds.width);
    if !seeds.data.iter().any(|&b| b) {
        return None;
    }
    let inf = (h + w) as i64;

    // Column pass: vertical distance to the nearest seed in the same column.
    let mut g = vec![0i64; h * w];
    for x in 0..w {
        g[x] = if seeds.data[x] { 0 } else { inf };
        for y in 1..h {
            let i = y * w + x;
            g[i] = if seeds.data[i] { 0 } else { (g[i - w] + 1).min(inf) };
        }
        for y in (0..h.saturating_sub(1)).rev() {
            let i = y * w + x;
            if g[i + w] < g[i] {
                g[i] = g[i + w] + 1;
            }
        }
    }

    // Row pass: lower envelope of parabolas.
    let mut dt = vec![0i64; h * w];
    let mut s = vec![0i64; w];
    let mut t = vec![0i64; w];
    for y in 0..h {
        let row = &g[y * w..(y + 1) * w];
        let f = |x: i64, i: i64| (x - i) * (x - i) + row[i as usize] * row[i as usize];
        let sep = |i: i64, u: i64| {
            let gi = row[i as usize];
            let gu = row[u as usize];
            (u * u - i * i + gu * gu - gi * gi).div_euclid(2 * (u - i))
        };
        let mut q: i64 = 0;
        s[0] = 0;
        t[0] = 0;
        for u in 1..w as i64 {
            while q >= 0 && f(t[q as usize], s[q as usize]) > f(t[q as usize], u) {
                q -= 1;
            }
            if q < 0 {
                q = 0;
                s[0] = u;
            } else {
                let ww = 1 + sep(s[q as usize], u);
                if ww < w as i64 {
                    q += 1;
                    s[q as usize] = u;
                    t[q as usize] = ww;
                }
            }
        }
        for u in (0..w as i64).rev() {
            dt[y * w + u as usize] = f(u, s[q as usize]);
            if u == t[q as usize] {
                q -= 1;
            }
        }
    }
    Some(dt)
}

/// Pixels strictly closer than `radius` to a boundary pixel, so a two-class
/// edge loses `radius` columns on each side. Radius 0 is the boundary itself.
pub fn boundary_band(mask: &LabelMask, radius: u32) -> BinaryMask {
    let boundary = boundary_pixels(mask);
    if radius == 0 {
        return boundary;
    }
    let Some(dt) = squared_distance_transform(&boundary) else {
        return boundary;
    };
    let r2 = radius as i64 * radius as i64;
    BinaryMask {
        height: boundary.height,
        width: boundary.width,
        data: dt.into_iter().map(|d| d < r2).collect(),
    }
}

/// A sampled polygon and its raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    /// Convex hull vertices in counter-clockwise order, in pixel units.
    pub vertices: Vec<(f64, f64)>,
    pub raster: BinaryMask,
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Convex hull (Andrew's monotone chain), counter-clockwise in a y-up frame.
pub fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite vertices"));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

fn shoelace(v: &[(f64, f64)]) -> f64 {
    let n = v.len();
    (0..n)
        .map(|i| {
            let (a, b) = (v[i], v[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

/// Rasterizes a convex polygon: a pixel is inside when its center is inside
/// or on the boundary.
pub fn rasterize_convex(vertices: &[(f64, f64)], height: usize, width: usize) -> BinaryMask {
    let mut out = BinaryMask::new(height, width, false);
    if vertices.len() < 3 {
        return out;
    }
    let n = vertices.len();
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in vertices {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let clamp = |v: f64, hi: usize| (v.max(0.0) as usize).min(hi);
    for py in clamp(y0.floor(), height)..clamp(y1.ceil() + 1.0, height) {
        for px in clamp(x0.floor(), width)..clamp(x1.ceil() + 1.0, width) {
            let c = (px as f64 + 0.5, py as f64 + 0.5);
            if (0..n).all(|i| cross(vertices[i], vertices[(i + 1) % n], c) >= 0.0) {
                out.data[py * width + px] = true;
            }
        }
    }
    out
}

/// Samples a filled convex polygon of 3–8 uniform in-frame vertices whose
/// pixel area is within [0.5, 1.5] × `area_fraction` × H × W. An area
/// fraction of 1 yields the whole frame.
pub fn sample_polygon<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    area_fraction: f64,
    rng: &mut R,
) -> Result<Polygon> {
    if !(area_fraction > 0.0 && area_fraction <= 1.0) {
        return Err(Error::Config(format!("area fraction {area_fraction} not in (0, 1]")));
    }
    let (hf, wf) = (height as f64, width as f64);
    if area_fraction >= 1.0 {
        return Ok(Polygon {
            vertices: vec![(0.0, 0.0), (wf, 0.0), (wf, hf), (0.0, hf)],
            raster: BinaryMask::new(height, width, true),
        });
    }
    let target = area_fraction * hf * wf;
    let (lo, hi) = (0.5 * target, 1.5 * target);
    for _ in 0..POLYGON_ATTEMPTS {
        let k = rng.random_range(3..=8);
        let pts: Vec<(f64, f64)> = (0..k)
            .map(|_| (rng.random::<f64>() * wf, rng.random::<f64>() * hf))
            .collect();
        let hull = convex_hull(pts);
        if hull.len() < 3 {
            continue;
        }
        // The continuous area is within one perimeter of the pixel count;
        // skip rasterizing hulls that are far outside the window.
        let area = shoelace(&hull);
        if area < 0.25 * target || area > 2.0 * target + 2.0 * (hf + wf) {
            continue;
        }
        let raster = rasterize_convex(&hull, height, width);
        let n = raster.count() as f64;
        if n >= lo && n <= hi {
            return Ok(Polygon { vertices: hull, raster });
        }
    }
    Err(Error::PolygonBudget {
        attempts: POLYGON_ATTEMPTS,
        target_px: target,
    })
}

/// Fraction of non-ignore pixels.
pub fn label_density(mask: &LabelMask) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    mask.labeled_count() as f64 / mask.len() as f64
}

/// Exempt names the taxonomy does not define are skipped, so the default
/// list works with any class set.
fn exempt_indices(tax: &ClassTaxonomy, cfg: &CoarsifyConfig) -> Vec<u8> {
    cfg.exempt_classes.iter().filter_map(|n| tax.index_of(n).ok()).collect()
}

/// Coarsifies one dense mask. Returns the coarse mask and its density.
pub fn coarsify_mask<R: Rng + ?Sized>(mask: &LabelMask, cfg: &CoarsifyConfig, rng: &mut R) -> Result<(LabelMask, f64)> {
    if !matches!(mask.provenance(), Provenance::Dense | Provenance::Augmented) {
        return Err(Error::Provenance(mask.provenance()));
    }
    cfg.validate()?;
    let (h, w) = (mask.height(), mask.width());
    let exempt = exempt_indices(mask.taxonomy(), cfg);
    let band = boundary_band(mask, cfg.boundary_radius_px);
    let mut keep = BinaryMask::new(h, w, false);
    for _ in 0..cfg.polygon_count {
        keep.union_with(&sample_polygon(h, w, cfg.polygon_area_fraction, rng)?.raster);
    }
    let ignore = mask.ignore_index();
    let data = mask
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let is_exempt = exempt.contains(&v);
            let survives_band = !band.data[i] || (is_exempt && cfg.exempt_scope == ExemptScope::PolygonAndBand);
            if survives_band && (keep.data[i] || is_exempt) {
                v
            } else {
                ignore
            }
        })
        .collect();
    let out = mask.with_data(data)?.with_provenance(Provenance::Coarse);
    let density = label_density(&out);
    Ok((out, density))
}

/// Seed used for the `index`-th image of a batch.
pub fn image_seed(seed: u64, index: usize) -> u64 {
    seed ^ index as u64
}

/// `coarsify_mask` with an RNG seeded from `cfg.seed`.
pub fn coarsify_seeded(mask: &LabelMask, cfg: &CoarsifyConfig, seed: u64) -> Result<(LabelMask, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    coarsify_mask(mask, cfg, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDensity {
    pub image: PathBuf,
    pub label: PathBuf,
    pub labeled_pixels: u64,
    pub total_pixels: u64,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub config: CoarsifyConfig,
    pub images: Vec<ImageDensity>,
    pub labeled_pixels: u64,
    pub total_pixels: u64,
    /// Pixel-weighted density over all images.
    pub aggregate_density: f64,
}

/// Coarsifies every labeled sample of `manifest` into `out_dir/labels/` and
/// returns the coarse manifest (unlabeled samples are carried over) with a
/// density report. Image `i` uses seed `cfg.seed ^ i`.
pub fn coarsify_manifest(
    manifest: &DatasetManifest,
    cfg: &CoarsifyConfig,
    out_dir: &Path,
) -> Result<(DatasetManifest, DensityReport)> {
    cfg.validate()?;
    let tax = Arc::new(manifest.taxonomy.clone());
    for name in &cfg.exempt_classes {
        if tax.index_of(name).is_err() {
            log::warn!("exempt class `{name}` is not in taxonomy `{}`", tax.name());
        }
    }
    let results = manifest
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| -> Result<Option<ImageDensity>> {
            let Some(label) = manifest.label_path(s) else {
                return Ok(None);
            };
            let (dense, _) = dataio::load_label_png(&label, tax.clone(), ColorMatch::Strict)?;
            let (coarse, density) = coarsify_seeded(&dense, cfg, image_seed(cfg.seed, i))?;
            let rel = PathBuf::from("labels").join(format!("{i:05}_{}.png", s.id()));
            dataio::save_label_png(&coarse, &out_dir.join(&rel))?;
            Ok(Some(ImageDensity {
                image: manifest.image_path(s),
                label: rel,
                labeled_pixels: coarse.labeled_count() as u64,
                total_pixels: coarse.len() as u64,
                density,
            }))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = DatasetManifest::new(format!("{}-coarse", manifest.name), manifest.taxonomy.clone(), out_dir);
    let mut images = Vec::new();
    for (s, r) in manifest.samples.iter().zip(results) {
        let mut s = s.clone();
        s.image = manifest.resolve(&s.image);
        if let Some(r) = r {
            s.label = Some(r.label.clone());
            images.push(r);
        }
        out.samples.push(s);
    }
    let labeled_pixels = images.iter().map(|r| r.labeled_pixels).sum();
    let total_pixels: u64 = images.iter().map(|r| r.total_pixels).sum();
    let report = DensityReport {
        config: cfg.clone(),
        images,
        labeled_pixels,
        total_pixels,
        aggregate_density: if total_pixels == 0 {
            0.0
        } else {
            labeled_pixels as f64 / total_pixels as f64
        },
    };
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::ClassTaxonomy;

    fn tax() -> Arc<ClassTaxonomy> {
        Arc::new(ClassTaxonomy::offroad9())
    }

    fn mask(h: usize, w: usize, data: Vec<u8>) -> LabelMask {
        LabelMask::new(h, w, data, tax(), Provenance::Dense).unwrap()
    }

    fn halves(h: usize, w: usize) -> LabelMask {
        mask(h, w, (0..h * w).map(|i| if i % w < w / 2 { 2 } else { 4 }).collect())
    }

    #[test]
    fn uniform_mask_has_empty_band() {
        let band = boundary_band(&mask(6, 7, vec![2; 42]), 5);
        assert_eq!(band.count(), 0);
    }

    #[test]
    fn split_halves_radius_two() {
        let band = boundary_band(&halves(8, 8), 2);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(band.get(x, y), (2..=5).contains(&x), "({x},{y})");
            }
        }
    }

    #[test]
    fn radius_zero_is_the_boundary() {
        let m = mask(
            5,
            5,
            vec![
                2, 2, 2, 2, 2, 2, 3, 3, 2, 2, 2, 3, 3, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 255,
            ],
        );
        assert_eq!(boundary_band(&m, 0), boundary_pixels(&m));
    }

    #[test]
    fn ignore_transitions_are_boundaries() {
        let m = mask(1, 4, vec![2, 2, 255, 255]);
        let b = boundary_pixels(&m);
        assert_eq!(b.data, vec![false, true, true, false]);
    }

    #[test]
    fn convex_hull_of_square_with_center() {
        let hull = convex_hull(vec![(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (0.0, 2.0), (2.0, 0.0)]);
        assert_eq!(hull.len(), 4);
        assert!((shoelace(&hull) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn full_frame_polygon() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = sample_polygon(13, 17, 1.0, &mut rng).unwrap();
        assert!(p.raster.data.iter().all(|&b| b));
    }

    #[test]
    fn polygon_area_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = sample_polygon(100, 100, 0.1, &mut rng).unwrap();
            let n = p.raster.count();
            assert!((500..=1500).contains(&n), "{n}");
            // Direct point-in-polygon count against the stored hull.
            let v = &p.vertices;
            let mut direct = 0;
            for y in 0..100 {
                for x in 0..100 {
                    let c = (x as f64 + 0.5, y as f64 + 0.5);
                    if (0..v.len()).all(|i| cross(v[i], v[(i + 1) % v.len()], c) >= 0.0) {
                        direct += 1;
                    }
                }
            }
            assert_eq!(direct, n);
        }
    }

    #[test]
    fn polygon_deterministic_and_validated() {
        let a = sample_polygon(40, 60, 0.1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_polygon(40, 60, 0.1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_polygon(10, 10, 0.0, &mut rng).is_err());
        assert!(sample_polygon(10, 10, 1.5, &mut rng).is_err());
        // A single pixel cannot host a polygon of half a pixel.
        assert!(matches!(
            sample_polygon(1, 1, 0.01, &mut rng),
            Err(Error::PolygonBudget {
                attempts: POLYGON_ATTEMPTS,
                ..
            })
        ));
    }

    #[test]
    fn density_counts() {
        assert_eq!(label_density(&mask(2, 2, vec![255; 4])), 0.0);
        assert_eq!(label_density(&mask(2, 2, vec![1; 4])), 1.0);
        let data = (0..100).map(|i| if i < 13 { 2 } else { 255 }).collect();
        assert!((label_density(&mask(10, 10, data)) - 0.13).abs() < 1e-15);
    }

    #[test]
    fn no_op_configuration_keeps_input() {
        let mut data: Vec<u8> = (0..64).map(|i| (i % 5) as u8).collect();
        data[10] = 255;
        let m = mask(8, 8, data);
        let cfg = CoarsifyConfig {
            boundary_radius_px: 0,
            polygon_area_fraction: 1.0,
            polygon_count: 1,
            exempt_classes: vec![],
            ..Default::default()
        };
        // N = 0 still erases the boundary pixels themselves, so use a
        // uniform mask for the identity case.
        let uniform = mask(8, 8, vec![6; 64]);
        let (out, d) = coarsify_seeded(&uniform, &cfg, 1).unwrap();
        assert_eq!(out.data(), uniform.data());
        assert_eq!(d, 1.0);
        let (out, _) = coarsify_seeded(&m, &cfg, 1).unwrap();
        let band = boundary_band(&m, 0);
        for i in 0..64 {
            let expect = if band.data[i] { 255 } else { m.data()[i] };
            assert_eq!(out.data()[i], expect);
        }
    }

    #[test]
    fn sixteen_square_set_algebra() {
        // Left half grass, right half water (exempt); radius 2; one polygon.
        let m = mask(16, 16, (0..256).map(|i| if i % 16 < 8 { 2 } else { 3 }).collect());
        let cfg = CoarsifyConfig {
            boundary_radius_px: 2,
            polygon_count: 1,
            polygon_area_fraction: 0.1,
            ..Default::default()
        };
        let (out, density) = coarsify_seeded(&m, &cfg, 5).unwrap();
        let poly = sample_polygon(16, 16, 0.1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut labeled = 0;
        for y in 0..16 {
            for x in 0..16 {
                let in_band = (6..=9).contains(&x);
                let v = m.get(x, y);
                let keep = !in_band && (poly.raster.get(x, y) || v == 3);
                assert_eq!(out.get(x, y), if keep { v } else { 255 }, "({x},{y})");
                labeled += keep as usize;
            }
        }
        assert_eq!(density, labeled as f64 / 256.0);
        assert_eq!(out.provenance(), Provenance::Coarse);
    }

    #[test]
    fn exempt_scope_variant_keeps_band_pixels() {
        let m = halves(8, 8)
            .with_data((0..64).map(|i| if i % 8 < 4 { 2 } else { 3 }).collect())
            .unwrap();
        let cfg = CoarsifyConfig {
            boundary_radius_px: 1,
            polygon_count: 0,
            exempt_scope: ExemptScope::PolygonAndBand,
            ..Default::default()
        };
        let (out, _) = coarsify_seeded(&m, &cfg, 0).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(out.get(x, y), if x < 4 { 255 } else { 3 });
            }
        }
    }

    #[test]
    fn rejects_non_dense_input() {
        let m = halves(4, 4).with_provenance(Provenance::Pseudo);
        assert!(matches!(
            coarsify_seeded(&m, &CoarsifyConfig::default(), 0),
            Err(Error::Provenance(Provenance::Pseudo))
        ));
    }
}
