//! Label rasters, dataset manifests and image I/O.

mod augment;
pub mod layouts;

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{ClassTaxonomy, Rgb};

pub use augment::{connected_components, cut_and_paste, cut_and_paste_files, Component};

/// Where a label raster came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Dense,
    Coarse,
    Pseudo,
    /// Produced by cut-and-paste augmentation.
    Augmented,
}

/// An H×W raster of class indices (or the taxonomy's ignore index).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
    taxonomy: Arc<ClassTaxonomy>,
    provenance: Provenance,
}

impl LabelMask {
    pub fn new(
        height: usize,
        width: usize,
        data: Vec<u8>,
        taxonomy: Arc<ClassTaxonomy>,
        provenance: Provenance,
    ) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask data has {} values for a {height}x{width} raster",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|&v| !taxonomy.is_valid_label(v)) {
            return Err(Error::LabelOutOfRange {
                x: i % width.max(1),
                y: i / width.max(1),
                value: data[i],
                taxonomy: taxonomy.name().into(),
            });
        }
        Ok(LabelMask {
            height,
            width,
            data,
            taxonomy,
            provenance,
        })
    }

    /// Skips value validation. Only for constructing deliberately invalid
    /// inputs in tests.
    #[doc(hidden)]
    pub fn new_unchecked(
        height: usize,
        width: usize,
        data: Vec<u8>,
        taxonomy: Arc<ClassTaxonomy>,
        provenance: Provenance,
    ) -> Self {
        assert_eq!(data.len(), height * width);
        LabelMask {
            height,
            width,
            data,
            taxonomy,
            provenance,
        }
    }

    pub fn filled(
        height: usize,
        width: usize,
        value: u8,
        taxonomy: Arc<ClassTaxonomy>,
        provenance: Provenance,
    ) -> Result<Self> {
        Self::new(height, width, vec![value; height * width], taxonomy, provenance)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn taxonomy(&self) -> &Arc<ClassTaxonomy> {
        &self.taxonomy
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn ignore_index(&self) -> u8 {
        self.taxonomy.ignore_index()
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn is_ignore(&self, i: usize) -> bool {
        self.data[i] == self.taxonomy.ignore_index()
    }

    pub fn labeled_count(&self) -> usize {
        let ignore = self.ignore_index();
        self.data.iter().filter(|&&v| v != ignore).count()
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    /// Same shape, taxonomy and provenance, new data.
    pub fn with_data(&self, data: Vec<u8>) -> Result<Self> {
        Self::new(self.height, self.width, data, self.taxonomy.clone(), self.provenance)
    }

    pub fn same_shape(&self, other: &LabelMask) -> bool {
        self.height == other.height && self.width == other.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "id")]
    InDistribution,
    #[serde(rename = "ood")]
    OutOfDistribution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// One manifest entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSample {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
    pub domain: Domain,
    pub split: Split,
    pub labeled: bool,
}

impl ImageSample {
    /// Identifier used in error messages and output file names.
    pub fn id(&self) -> String {
        self.image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.image.display().to_string())
    }
}

/// A named list of samples over one taxonomy.
///
/// Relative paths are resolved against `root`, which `read_manifest` sets to
/// the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub taxonomy: ClassTaxonomy,
    pub samples: Vec<ImageSample>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl PartialEq for DatasetManifest {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.taxonomy == other.taxonomy && self.samples == other.samples
    }
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, taxonomy: ClassTaxonomy, root: impl Into<PathBuf>) -> Self {
        DatasetManifest {
            name: name.into(),
            taxonomy,
            samples: Vec::new(),
            root: root.into(),
        }
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    pub fn image_path(&self, sample: &ImageSample) -> PathBuf {
        self.resolve(&sample.image)
    }

    pub fn label_path(&self, sample: &ImageSample) -> Option<PathBuf> {
        sample.label.as_deref().map(|p| self.resolve(p))
    }

    /// Samples matching `split`, in manifest order.
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// A copy restricted to the given sample positions, in that order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> DatasetManifest {
        DatasetManifest {
            name: name.into(),
            taxonomy: self.taxonomy.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            root: self.root.clone(),
        }
    }

    /// A copy whose paths are absolute, so it can be written anywhere.
    pub fn absolutized(&self) -> DatasetManifest {
        let mut m = self.clone();
        for s in &mut m.samples {
            s.image = self.resolve(&s.image);
            s.label = s.label.as_deref().map(|p| self.resolve(p));
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, s) in self.samples.iter().enumerate() {
            if !seen.insert(&s.image) {
                return Err(Error::Manifest {
                    path: format!("samples[{i}].image"),
                    message: format!("duplicate image path `{}`", s.image.display()),
                });
            }
            if s.labeled && s.label.is_none() {
                return Err(Error::Manifest {
                    path: format!("samples[{i}].label"),
                    message: "labeled sample without a label path".into(),
                });
            }
        }
        Ok(())
    }
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let mut manifest: DatasetManifest = serde_path_to_error::deserialize(de).map_err(|e| Error::Manifest {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    manifest.validate()?;
    manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    write_text(path, &text)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// How label colors that are not in the palette are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorMatch {
    Strict,
    /// Off-palette pixels become ignore and are counted.
    Lenient,
}

/// Decodes an RGB raster into a mask by exact palette lookup. Black is
/// ignore. Returns the mask and the number of off-palette pixels.
pub fn decode_label_rgb(
    raster: &RgbImage,
    taxonomy: Arc<ClassTaxonomy>,
    mode: ColorMatch,
) -> Result<(LabelMask, usize)> {
    let lookup = taxonomy.color_lookup();
    let ignore = taxonomy.ignore_index();
    let (w, h) = raster.dimensions();
    let mut data = Vec::with_capacity((w * h) as usize);
    let mut unmatched = 0;
    for (x, y, p) in raster.enumerate_pixels() {
        let c = Rgb(p.0);
        if c == Rgb::BLACK {
            data.push(ignore);
        } else if let Some(&i) = lookup.get(&c) {
            data.push(i);
        } else {
            match mode {
                ColorMatch::Strict => {
                    return Err(Error::UnknownColor {
                        color: p.0,
                        x: x as usize,
                        y: y as usize,
                    })
                }
                ColorMatch::Lenient => {
                    unmatched += 1;
                    data.push(ignore);
                }
            }
        }
    }
    let mask = LabelMask::new(h as usize, w as usize, data, taxonomy, Provenance::Dense)?;
    Ok((mask, unmatched))
}

/// Encodes a mask as an RGB raster; ignore is black.
pub fn encode_label_rgb(mask: &LabelMask) -> RgbImage {
    let colors = mask.taxonomy().colors();
    let ignore = mask.ignore_index();
    let mut img = RgbImage::new(mask.width() as u32, mask.height() as u32);
    for (i, p) in img.pixels_mut().enumerate() {
        let v = mask.data()[i];
        p.0 = if v == ignore {
            Rgb::BLACK.0
        } else {
            colors[v as usize].0
        };
    }
    img
}

/// Loads a color-encoded label raster (RGB or palette PNG).
pub fn load_label_png(path: &Path, taxonomy: Arc<ClassTaxonomy>, mode: ColorMatch) -> Result<(LabelMask, usize)> {
    let raster = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
    decode_label_rgb(&raster, taxonomy, mode).map_err(|e| match e {
        Error::UnknownColor { color, x, y } => Error::Parse {
            path: path.display().to_string(),
            message: Error::UnknownColor { color, x, y }.to_string(),
        },
        e => e,
    })
}

/// Loads a single-channel raster of raw dataset ids using the taxonomy's id
/// table. Id 0 is void and loads as ignore; unknown ids follow `mode`.
pub fn load_label_ids(path: &Path, taxonomy: Arc<ClassTaxonomy>, mode: ColorMatch) -> Result<(LabelMask, usize)> {
    let table = taxonomy
        .raw_id_lookup()
        .ok_or_else(|| Error::Taxonomy(format!("`{}` declares no raw ids", taxonomy.name())))?;
    let raster = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
    let ignore = taxonomy.ignore_index();
    let (w, h) = raster.dimensions();
    let mut unmatched = 0;
    let mut data = Vec::with_capacity((w * h) as usize);
    for (x, y, p) in raster.enumerate_pixels() {
        let id = p.0[0];
        match table[id as usize] {
            Some(c) => data.push(c),
            None if id == 0 => data.push(ignore),
            None => match mode {
                ColorMatch::Strict => {
                    return Err(Error::Parse {
                        path: path.display().to_string(),
                        message: format!("unknown id {id} at (x={x}, y={y})"),
                    })
                }
                ColorMatch::Lenient => {
                    unmatched += 1;
                    data.push(ignore);
                }
            },
        }
    }
    let mask = LabelMask::new(h as usize, w as usize, data, taxonomy, Provenance::Dense)?;
    Ok((mask, unmatched))
}

pub fn save_label_png(mask: &LabelMask, path: &Path) -> Result<()> {
    save_rgb(&encode_label_rgb(mask), path)
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8())
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| Error::image(path, e))
}

/// Loads a labeled sample's image and mask and checks their sizes agree.
pub fn load_labeled_sample(
    manifest: &DatasetManifest,
    sample: &ImageSample,
    taxonomy: Arc<ClassTaxonomy>,
) -> Result<(RgbImage, LabelMask)> {
    let image = load_rgb(&manifest.image_path(sample))?;
    let label_path = manifest.label_path(sample).ok_or_else(|| Error::Manifest {
        path: sample.image.display().to_string(),
        message: "sample has no label".into(),
    })?;
    let (mask, _) = load_label_png(&label_path, taxonomy, ColorMatch::Strict)?;
    if mask.width() != image.width() as usize || mask.height() != image.height() as usize {
        return Err(Error::Shape(format!(
            "`{}`: image {}x{} but label {}x{}",
            sample.id(),
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        )));
    }
    Ok((image, mask))
}
