//! Deterministic colored-blob scenes with exact dense labels.
//!
//! Each class has a fixed appearance color. A scene is a background class
//! overlaid with hard-edged ellipses and star polygons; the mask is
//! rasterized from the same shapes that paint the image. The OOD variant
//! rotates every appearance hue by a fixed angle.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{self, DatasetManifest, Domain, ImageSample, LabelMask, Provenance, Split};
use crate::error::{Error, Result};
use crate::taxonomy::ClassTaxonomy;

fn default_noise() -> u8 {
    12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub name: String,
    /// Training images.
    pub images: usize,
    /// Validation images, appended after the training ones.
    #[serde(default)]
    pub val_images: usize,
    pub width: usize,
    pub height: usize,
    /// The first `classes` classes of offroad9 are used.
    pub classes: usize,
    /// Inclusive range of extra blobs per image.
    pub blobs: (usize, usize),
    /// Hue rotation applied to the OOD variant, in degrees.
    #[serde(default)]
    pub hue_shift_deg: f64,
    pub domain: SynthDomain,
    #[serde(default)]
    pub seed: u64,
    /// Sizes must be multiples of 4 times this.
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    /// Per-pixel uniform noise amplitude.
    #[serde(default = "default_noise")]
    pub noise: u8,
}

fn default_patch() -> usize {
    7
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthDomain {
    Id,
    Ood,
}

impl SynthConfig {
    pub fn new(name: &str, images: usize, size: usize, domain: SynthDomain, seed: u64) -> Self {
        SynthConfig {
            name: name.into(),
            images,
            val_images: 0,
            width: size,
            height: size,
            classes: 4,
            blobs: (2, 4),
            hue_shift_deg: 90.0,
            domain,
            seed,
            patch_size: default_patch(),
            noise: default_noise(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let unit = 4 * self.patch_size;
        if self.patch_size == 0 || self.width == 0 || self.height == 0 {
            return bad("sizes must be positive".into());
        }
        if self.width % unit != 0 || self.height % unit != 0 {
            return bad(format!("{}x{} is not a multiple of {unit}", self.width, self.height));
        }
        if !(2..=9).contains(&self.classes) {
            return bad(format!("class count {} outside 2..=9", self.classes));
        }
        if self.blobs.0 > self.blobs.1 {
            return bad("blob range is empty".into());
        }
        if self.images + self.val_images == 0 {
            return bad("no images requested".into());
        }
        if !self.hue_shift_deg.is_finite() {
            return bad("hue shift must be finite".into());
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SynthConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn taxonomy(&self) -> Result<ClassTaxonomy> {
        synth_taxonomy(self.classes)
    }
}

/// The first `classes` offroad9 classes with their palette.
pub fn synth_taxonomy(classes: usize) -> Result<ClassTaxonomy> {
    let base = ClassTaxonomy::offroad9();
    if classes > base.len() {
        return Err(Error::Config(format!("at most {} classes", base.len())));
    }
    ClassTaxonomy::new(
        format!("synth{classes}"),
        base.names()[..classes].to_vec(),
        base.colors()[..classes].to_vec(),
        base.ignore_index(),
    )
}

/// Appearance of class `c` as (hue°, saturation, value).
fn appearance(c: usize) -> (f64, f64, f64) {
    const HUES: [f64; 9] = [25.0, 0.0, 110.0, 210.0, 190.0, 45.0, 140.0, 330.0, 280.0];
    const VALUES: [f64; 9] = [0.55, 0.45, 0.70, 0.80, 0.95, 0.85, 0.40, 0.60, 0.90];
    (HUES[c], 0.75, VALUES[c])
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

/// Appearance colors of every class after a hue rotation of `shift` degrees.
pub fn class_colors(classes: usize, shift: f64) -> Vec<[f64; 3]> {
    (0..classes)
        .map(|c| {
            let (h, s, v) = appearance(c);
            hsv_to_rgb(h + shift, s, v)
        })
        .collect()
}

enum Shape {
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        cos: f64,
        sin: f64,
    },
    Polygon(Vec<(f64, f64)>),
}

impl Shape {
    fn random<R: Rng>(rng: &mut R, x0: f64, x1: f64, w: f64, h: f64) -> Shape {
        let cx = rng.random_range(x0..x1);
        let cy = rng.random_range(0.0..h);
        let r = w.min(h);
        if rng.random_bool(0.5) {
            let a: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Shape::Ellipse {
                cx,
                cy,
                rx: rng.random_range(0.12 * r..0.3 * r),
                ry: rng.random_range(0.08 * r..0.25 * r),
                cos: a.cos(),
                sin: a.sin(),
            }
        } else {
            let n = rng.random_range(5..=9);
            let pts = (0..n)
                .map(|i| {
                    let t = (i as f64 + rng.random_range(0.0..0.6)) * std::f64::consts::TAU / n as f64;
                    let rad = rng.random_range(0.1 * r..0.3 * r);
                    (cx + rad * t.cos(), cy + rad * t.sin())
                })
                .collect();
            Shape::Polygon(pts)
        }
    }

    /// Tests the pixel center `(x + 0.5, y + 0.5)`.
    fn contains(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        match self {
            Shape::Ellipse {
                cx,
                cy,
                rx,
                ry,
                cos,
                sin,
            } => {
                let (dx, dy) = (px - cx, py - cy);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Polygon(pts) => {
                let mut inside = false;
                let mut j = pts.len() - 1;
                for i in 0..pts.len() {
                    let (xi, yi) = pts[i];
                    let (xj, yj) = pts[j];
                    if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
        }
    }
}

fn image_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Renders scene `index`. Classes congruent to `index` modulo `total` are
/// drawn last in disjoint vertical strips, so every class appears somewhere
/// in any set of at least one image per residue.
pub fn render_scene(
    cfg: &SynthConfig,
    index: usize,
    total: usize,
    tax: Arc<ClassTaxonomy>,
) -> Result<(RgbImage, LabelMask)> {
    let (w, h) = (cfg.width, cfg.height);
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(cfg.seed, index));
    let background = rng.random_range(0..cfg.classes) as u8;
    let mut labels = vec![background; w * h];
    let paint = |shape: &Shape, class: u8, labels: &mut [u8]| {
        for y in 0..h {
            for x in 0..w {
                if shape.contains(x, y) {
                    labels[y * w + x] = class;
                }
            }
        }
    };
    let extra = rng.random_range(cfg.blobs.0..=cfg.blobs.1);
    for _ in 0..extra {
        let class = rng.random_range(0..cfg.classes) as u8;
        let shape = Shape::random(&mut rng, 0.0, w as f64, w as f64, h as f64);
        paint(&shape, class, &mut labels);
    }
    let guaranteed: Vec<usize> = (0..cfg.classes)
        .filter(|c| c % total.max(1) == index % total.max(1))
        .collect();
    let strip = w as f64 / guaranteed.len().max(1) as f64;
    for (k, &c) in guaranteed.iter().enumerate() {
        // A disc centered in its own strip always covers its center pixel.
        let cx = (k as f64 + 0.5) * strip;
        let cy = rng.random_range(0.3..0.7) * h as f64;
        let r = (0.4 * strip).min(0.2 * h as f64).max(1.0);
        let shape = Shape::Ellipse {
            cx,
            cy,
            rx: r,
            ry: r,
            cos: 1.0,
            sin: 0.0,
        };
        paint(&shape, c as u8, &mut labels);
    }

    let shift = match cfg.domain {
        SynthDomain::Id => 0.0,
        SynthDomain::Ood => cfg.hue_shift_deg,
    };
    let colors = class_colors(cfg.classes, shift);
    let amp = cfg.noise as i32;
    let mut img = RgbImage::new(w as u32, h as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let base = colors[labels[i] as usize];
        let mut out = [0u8; 3];
        for ch in 0..3 {
            let n = if amp > 0 { rng.random_range(-amp..=amp) } else { 0 };
            out[ch] = (base[ch].round() as i32 + n).clamp(0, 255) as u8;
        }
        *px = Rgb(out);
    }
    let mask = LabelMask::new(h, w, labels, tax, Provenance::Dense)?;
    Ok((img, mask))
}

/// Writes `images/`, `labels/` and `manifest.json` under `out_dir`.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let tax = cfg.taxonomy()?;
    let shared = Arc::new(tax.clone());
    let total = cfg.images + cfg.val_images;
    let domain = match cfg.domain {
        SynthDomain::Id => Domain::InDistribution,
        SynthDomain::Ood => Domain::OutOfDistribution,
    };
    let samples = (0..total)
        .into_par_iter()
        .map(|i| -> Result<ImageSample> {
            let (img, mask) = render_scene(cfg, i, total, shared.clone())?;
            let image = PathBuf::from("images").join(format!("{i:05}.png"));
            let label = PathBuf::from("labels").join(format!("{i:05}.png"));
            dataio::save_rgb(&img, &out_dir.join(&image))?;
            dataio::save_label_png(&mask, &out_dir.join(&label))?;
            Ok(ImageSample {
                image,
                label: Some(label),
                domain,
                split: if i < cfg.images { Split::Train } else { Split::Val },
                labeled: true,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = DatasetManifest::new(cfg.name.clone(), tax, out_dir);
    manifest.samples = samples;
    dataio::write_manifest(&manifest, &out_dir.join("manifest.json"))?;
    Ok(manifest)
}
