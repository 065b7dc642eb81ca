//! Cut-and-paste augmentation: copies connected components of selected
//! classes from a donor scene into a host scene.

use std::sync::Arc;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{load_label_png, load_rgb, ColorMatch, DatasetManifest, ImageSample, LabelMask, Provenance};
use crate::error::{Error, Result};
use crate::taxonomy::ClassTaxonomy;

/// A 4-connected region of one class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub class: u8,
    /// `(x, y)` pixel coordinates in scan order of discovery.
    pub pixels: Vec<(usize, usize)>,
    /// Inclusive bounding box `(x0, y0, x1, y1)`.
    pub bbox: (usize, usize, usize, usize),
}

impl Component {
    pub fn center(&self) -> (usize, usize) {
        let (x0, y0, x1, y1) = self.bbox;
        ((x0 + x1) / 2, (y0 + y1) / 2)
    }
}

/// 4-connected components of the given classes, ordered by their first pixel
/// in row-major scan order.
pub fn connected_components(mask: &LabelMask, classes: &[u8]) -> Vec<Component> {
    let (h, w) = (mask.height(), mask.width());
    let data = mask.data();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        let class = data[start];
        if seen[start] || !classes.contains(&class) {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            pixels.push((x, y));
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            let mut visit = |j: usize| {
                if !seen[j] && data[j] == class {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        out.push(Component {
            class,
            pixels,
            bbox: (x0, y0, x1, y1),
        });
    }
    out
}

/// Pastes every component of `classes` found in the donor at a uniformly
/// random position of the host (bounding-box center in frame), clipping to
/// the host bounds. Later components overwrite earlier ones. Host pixels
/// outside pasted components are untouched.
pub fn cut_and_paste(
    donor_image: &RgbImage,
    donor_mask: &LabelMask,
    host_image: &RgbImage,
    host_mask: &LabelMask,
    classes: &[u8],
    seed: u64,
) -> Result<(RgbImage, LabelMask)> {
    if classes.is_empty() {
        return Err(Error::Config("cut-and-paste needs at least one class".into()));
    }
    if donor_mask.taxonomy() != host_mask.taxonomy() {
        return Err(Error::TaxonomyMismatch(
            donor_mask.taxonomy().name().into(),
            host_mask.taxonomy().name().into(),
        ));
    }
    if donor_image.width() as usize != donor_mask.width()
        || donor_image.height() as usize != donor_mask.height()
        || host_image.width() as usize != host_mask.width()
        || host_image.height() as usize != host_mask.height()
    {
        return Err(Error::Shape("image and label sizes differ".into()));
    }
    let components = connected_components(donor_mask, classes);
    if components.is_empty() {
        let tax = donor_mask.taxonomy();
        return Err(Error::NoDonorPixels(
            classes
                .iter()
                .map(|&c| tax.class_name(c).unwrap_or("?").to_string())
                .collect(),
        ));
    }

    let (hw, hh) = (host_mask.width() as i64, host_mask.height() as i64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = host_image.clone();
    let mut labels = host_mask.data().to_vec();
    for comp in &components {
        let (cx, cy) = comp.center();
        let nx = rng.random_range(0..hw);
        let ny = rng.random_range(0..hh);
        let (dx, dy) = (nx - cx as i64, ny - cy as i64);
        for &(x, y) in &comp.pixels {
            let (tx, ty) = (x as i64 + dx, y as i64 + dy);
            if tx < 0 || ty < 0 || tx >= hw || ty >= hh {
                continue;
            }
            let (tx, ty) = (tx as usize, ty as usize);
            labels[ty * hw as usize + tx] = comp.class;
            image.put_pixel(tx as u32, ty as u32, *donor_image.get_pixel(x as u32, y as u32));
        }
    }
    let mask = host_mask.with_data(labels)?.with_provenance(Provenance::Augmented);
    Ok((image, mask))
}

/// File-backed variant: loads both samples from their manifests. An
/// unlabeled host contributes an all-ignore mask.
pub fn cut_and_paste_files(
    donor_manifest: &DatasetManifest,
    donor: &ImageSample,
    host_manifest: &DatasetManifest,
    host: &ImageSample,
    classes: &[&str],
    seed: u64,
) -> Result<(RgbImage, LabelMask)> {
    let tax: Arc<ClassTaxonomy> = Arc::new(donor_manifest.taxonomy.clone());
    let class_ids = tax.indices_of(classes)?;
    let donor_label = donor_manifest.label_path(donor).ok_or_else(|| Error::Manifest {
        path: donor.image.display().to_string(),
        message: "donor must be labeled".into(),
    })?;
    let donor_image = load_rgb(&donor_manifest.image_path(donor))?;
    let (donor_mask, _) = load_label_png(&donor_label, tax.clone(), ColorMatch::Strict)?;
    let host_image = load_rgb(&host_manifest.image_path(host))?;
    let host_mask = match host_manifest.label_path(host) {
        Some(p) => load_label_png(&p, tax.clone(), ColorMatch::Strict)?.0,
        None => LabelMask::filled(
            host_image.height() as usize,
            host_image.width() as usize,
            tax.ignore_index(),
            tax.clone(),
            Provenance::Dense,
        )?,
    };
    cut_and_paste(&donor_image, &donor_mask, &host_image, &host_mask, &class_ids, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tax() -> Arc<ClassTaxonomy> {
        Arc::new(ClassTaxonomy::offroad9())
    }

    fn scene(h: usize, w: usize, fill: u8, rgb: [u8; 3]) -> (RgbImage, LabelMask) {
        (
            RgbImage::from_pixel(w as u32, h as u32, image::Rgb(rgb)),
            LabelMask::filled(h, w, fill, tax(), Provenance::Dense).unwrap(),
        )
    }

    const OBSTACLE: u8 = 8;
    const GRASS: u8 = 2;
    const WATER: u8 = 3;

    /// Donor with a single 10-pixel obstacle blob (2×5) painted red.
    fn donor() -> (RgbImage, LabelMask) {
        let (mut img, m) = scene(20, 20, GRASS, [0, 120, 0]);
        let mut data = m.data().to_vec();
        for y in 4..6 {
            for x in 7..12 {
                data[y * 20 + x] = OBSTACLE;
                img.put_pixel(x as u32, y as u32, image::Rgb([200, 10, 10]));
            }
        }
        (img, m.with_data(data).unwrap())
    }

    #[test]
    fn components_are_four_connected() {
        let t = tax();
        // Diagonal neighbors are separate components.
        let m = LabelMask::new(2, 2, vec![8, 2, 2, 8], t, Provenance::Dense).unwrap();
        let comps = connected_components(&m, &[8]);
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0].pixels, vec![(0, 0)]);
        assert_eq!(comps[1].pixels, vec![(1, 1)]);
    }

    #[test]
    fn pasted_pixel_bookkeeping() {
        let (dimg, dmask) = donor();
        let (himg, hmask) = scene(16, 24, GRASS, [0, 90, 0]);
        for seed in 0..50 {
            let (img, out) = cut_and_paste(&dimg, &dmask, &himg, &hmask, &[OBSTACLE], seed).unwrap();
            // Independent recomputation of the placement and the in-frame overlap.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nx = rng.random_range(0..24i64);
            let ny = rng.random_range(0..16i64);
            let (dx, dy) = (nx - 9, ny - 4);
            let mut in_frame = 0;
            for y in 4..6i64 {
                for x in 7..12i64 {
                    let (tx, ty) = (x + dx, y + dy);
                    if (0..24).contains(&tx) && (0..16).contains(&ty) {
                        in_frame += 1;
                        assert_eq!(out.get(tx as usize, ty as usize), OBSTACLE);
                        assert_eq!(img.get_pixel(tx as u32, ty as u32).0, [200, 10, 10]);
                    }
                }
            }
            let obstacles = out.data().iter().filter(|&&v| v == OBSTACLE).count();
            assert_eq!(obstacles, in_frame, "seed {seed}");
            assert!(in_frame > 0);
            // Untouched host pixels.
            for (i, (&a, &b)) in out.data().iter().zip(hmask.data()).enumerate() {
                if a != OBSTACLE {
                    assert_eq!(a, b);
                    let (x, y) = ((i % 24) as u32, (i / 24) as u32);
                    assert_eq!(img.get_pixel(x, y), himg.get_pixel(x, y));
                }
            }
            assert_eq!(out.provenance(), Provenance::Augmented);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let (dimg, dmask) = donor();
        let (himg, hmask) = scene(16, 24, GRASS, [0, 90, 0]);
        let a = cut_and_paste(&dimg, &dmask, &himg, &hmask, &[OBSTACLE], 11).unwrap();
        let b = cut_and_paste(&dimg, &dmask, &himg, &hmask, &[OBSTACLE], 11).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn missing_class_and_empty_set_are_errors() {
        let (dimg, dmask) = donor();
        let (himg, hmask) = scene(8, 8, GRASS, [0, 90, 0]);
        match cut_and_paste(&dimg, &dmask, &himg, &hmask, &[WATER], 0) {
            Err(Error::NoDonorPixels(names)) => assert_eq!(names, vec!["water".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
        assert!(cut_and_paste(&dimg, &dmask, &himg, &hmask, &[], 0).is_err());
    }
}
