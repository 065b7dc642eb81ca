//! Class sets, cross-dataset remapping and class-frequency statistics.
//!
//! A [`ClassTaxonomy`] is an ordered list of classes; a class index is its
//! position in that list. Label rasters store one byte per pixel, with the
//! taxonomy's `ignore_index` (255 by default) marking unlabeled pixels.
//! Taxonomies and mappings are stored as TOML; the 9-class off-road set and
//! the Rellis-3D / RUGD source ontologies ship with the crate.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{DatasetManifest, LabelMask};
use crate::error::{Error, Result};

/// Label value reserved for unlabeled pixels.
pub const IGNORE_INDEX: u8 = 255;

const OFFROAD9_TOML: &str = include_str!("../configs/offroad9.toml");
const RELLIS3D_TOML: &str = include_str!("../configs/rellis3d.toml");
const RUGD_TOML: &str = include_str!("../configs/rugd.toml");
const RELLIS3D_MAPPING_TOML: &str = include_str!("../configs/rellis3d_to_offroad9.toml");
const RUGD_MAPPING_TOML: &str = include_str!("../configs/rugd_to_offroad9.toml");

/// An 8-bit RGB color, serialized as `#RRGGBB`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Rgb(pub [u8; 3]);

impl Rgb {
    pub const BLACK: Rgb = Rgb([0, 0, 0]);

    pub fn parse_hex(s: &str) -> Option<Rgb> {
        let s = s.strip_prefix('#').unwrap_or(s);
        if s.len() != 6 || !s.is_ascii() {
            return None;
        }
        let byte = |i: usize| u8::from_str_radix(&s[i..i + 2], 16).ok();
        Some(Rgb([byte(0)?, byte(2)?, byte(4)?]))
    }
}

impl fmt::Display for Rgb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{:02X}{:02X}{:02X}", self.0[0], self.0[1], self.0[2])
    }
}

impl Serialize for Rgb {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Rgb {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Rgb::parse_hex(&s).ok_or_else(|| serde::de::Error::custom(format!("bad color `{s}`")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClassDef {
    name: String,
    color: Rgb,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TaxonomyDef {
    name: String,
    #[serde(default = "default_ignore")]
    ignore_index: u8,
    classes: Vec<ClassDef>,
}

fn default_ignore() -> u8 {
    IGNORE_INDEX
}

/// Ordered class set with display colors and an ignore index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TaxonomyDef", into = "TaxonomyDef")]
pub struct ClassTaxonomy {
    name: String,
    names: Vec<String>,
    colors: Vec<Rgb>,
    raw_ids: Vec<Option<u8>>,
    ignore_index: u8,
}

impl TryFrom<TaxonomyDef> for ClassTaxonomy {
    type Error = Error;

    fn try_from(def: TaxonomyDef) -> Result<Self> {
        let mut names = Vec::with_capacity(def.classes.len());
        let mut colors = Vec::with_capacity(def.classes.len());
        let mut raw_ids = Vec::with_capacity(def.classes.len());
        for c in def.classes {
            names.push(c.name);
            colors.push(c.color);
            raw_ids.push(c.id);
        }
        let mut tax = ClassTaxonomy::new(def.name, names, colors, def.ignore_index)?;
        if raw_ids.iter().any(Option::is_some) {
            tax = tax.with_raw_ids(raw_ids)?;
        }
        Ok(tax)
    }
}

impl From<ClassTaxonomy> for TaxonomyDef {
    fn from(t: ClassTaxonomy) -> Self {
        TaxonomyDef {
            name: t.name,
            ignore_index: t.ignore_index,
            classes: t
                .names
                .into_iter()
                .zip(t.colors)
                .zip(t.raw_ids)
                .map(|((name, color), id)| ClassDef { name, color, id })
                .collect(),
        }
    }
}

impl ClassTaxonomy {
    /// Builds a taxonomy, rejecting duplicate names or colors, a black class
    /// color (black encodes ignore on disk) and an ignore index inside the
    /// class range.
    pub fn new(name: impl Into<String>, names: Vec<String>, colors: Vec<Rgb>, ignore_index: u8) -> Result<Self> {
        let name = name.into();
        if names.is_empty() {
            return Err(Error::Taxonomy(format!("`{name}` has no classes")));
        }
        if names.len() != colors.len() {
            return Err(Error::Taxonomy(format!(
                "`{name}`: {} names but {} colors",
                names.len(),
                colors.len()
            )));
        }
        if (ignore_index as usize) < names.len() {
            return Err(Error::Taxonomy(format!(
                "`{name}`: ignore index {ignore_index} collides with a class index"
            )));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::Taxonomy(format!("`{name}`: duplicate class `{n}`")));
            }
        }
        let mut seen = HashSet::new();
        for (n, c) in names.iter().zip(&colors) {
            if *c == Rgb::BLACK {
                return Err(Error::Taxonomy(format!(
                    "`{name}`: class `{n}` uses black, which is reserved for ignore"
                )));
            }
            if !seen.insert(*c) {
                return Err(Error::Taxonomy(format!("`{name}`: duplicate color {c}")));
            }
        }
        let raw_ids = vec![None; names.len()];
        Ok(ClassTaxonomy {
            name,
            names,
            colors,
            raw_ids,
            ignore_index,
        })
    }

    fn with_raw_ids(mut self, raw_ids: Vec<Option<u8>>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (n, id) in self.names.iter().zip(&raw_ids) {
            let Some(id) = id else {
                return Err(Error::Taxonomy(format!(
                    "`{}`: class `{n}` lacks a raw id while others have one",
                    self.name
                )));
            };
            if !seen.insert(*id) {
                return Err(Error::Taxonomy(format!("`{}`: duplicate raw id {id}", self.name)));
            }
        }
        self.raw_ids = raw_ids;
        Ok(self)
    }

    /// The 9-class off-road taxonomy.
    pub fn offroad9() -> Self {
        Self::from_toml_str(OFFROAD9_TOML).expect("shipped offroad9 taxonomy is valid")
    }

    /// Rellis-3D source ontology.
    pub fn rellis3d() -> Self {
        Self::from_toml_str(RELLIS3D_TOML).expect("shipped rellis3d taxonomy is valid")
    }

    /// RUGD source ontology.
    pub fn rugd() -> Self {
        Self::from_toml_str(RUGD_TOML).expect("shipped rugd taxonomy is valid")
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Parse {
            path: "<taxonomy>".into(),
            message: e.to_string(),
        })
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&s).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("taxonomy serializes")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn colors(&self) -> &[Rgb] {
        &self.colors
    }

    pub fn ignore_index(&self) -> u8 {
        self.ignore_index
    }

    pub fn class_name(&self, index: u8) -> Option<&str> {
        self.names.get(index as usize).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Result<u8> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| i as u8)
            .ok_or_else(|| Error::UnknownClass {
                name: name.to_string(),
                taxonomy: self.name.clone(),
            })
    }

    /// Resolves a list of class names to indices.
    pub fn indices_of<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<u8>> {
        names.iter().map(|n| self.index_of(n.as_ref())).collect()
    }

    /// Whether `value` is a class index or the ignore index.
    pub fn is_valid_label(&self, value: u8) -> bool {
        (value as usize) < self.names.len() || value == self.ignore_index
    }

    /// Lookup table from color to class index.
    pub fn color_lookup(&self) -> HashMap<Rgb, u8> {
        self.colors.iter().enumerate().map(|(i, c)| (*c, i as u8)).collect()
    }

    /// Lookup table from raw on-disk id to class index, when ids are declared.
    pub fn raw_id_lookup(&self) -> Option<[Option<u8>; 256]> {
        if self.raw_ids.iter().any(Option::is_none) {
            return None;
        }
        let mut table = [None; 256];
        for (i, id) in self.raw_ids.iter().enumerate() {
            table[id.unwrap() as usize] = Some(i as u8);
        }
        Some(table)
    }

    /// A copy of this taxonomy with different display colors.
    pub fn with_colors(&self, colors: Vec<Rgb>) -> Result<Self> {
        let raw = self.raw_ids.clone();
        let tax = ClassTaxonomy::new(self.name.clone(), self.names.clone(), colors, self.ignore_index)?;
        if raw.iter().any(Option::is_some) {
            tax.with_raw_ids(raw)
        } else {
            Ok(tax)
        }
    }
}

impl Default for ClassTaxonomy {
    fn default() -> Self {
        Self::offroad9()
    }
}

/// A total, single-valued map from the classes of one taxonomy to another.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMapping {
    source: Arc<ClassTaxonomy>,
    target: Arc<ClassTaxonomy>,
    table: Vec<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MappingDef {
    source: String,
    target: String,
    pairs: Vec<(String, String)>,
}

impl ClassMapping {
    pub fn source(&self) -> &Arc<ClassTaxonomy> {
        &self.source
    }

    pub fn target(&self) -> &Arc<ClassTaxonomy> {
        &self.target
    }

    /// Target index for each source index.
    pub fn table(&self) -> &[u8] {
        &self.table
    }

    pub fn map(&self, source_class: u8) -> u8 {
        self.table[source_class as usize]
    }

    pub fn identity(tax: Arc<ClassTaxonomy>) -> Self {
        ClassMapping {
            table: (0..tax.len() as u8).collect(),
            source: tax.clone(),
            target: tax,
        }
    }

    /// `other ∘ self`: maps through `self` then `other`.
    pub fn then(&self, other: &ClassMapping) -> Result<ClassMapping> {
        if *self.target != *other.source {
            return Err(Error::TaxonomyMismatch(
                self.target.name().into(),
                other.source.name().into(),
            ));
        }
        Ok(ClassMapping {
            source: self.source.clone(),
            target: other.target.clone(),
            table: self.table.iter().map(|&t| other.table[t as usize]).collect(),
        })
    }

    /// Rellis-3D → offroad9, as shipped.
    pub fn rellis3d() -> Self {
        Self::from_toml_str(
            RELLIS3D_MAPPING_TOML,
            Arc::new(ClassTaxonomy::rellis3d()),
            Arc::new(ClassTaxonomy::offroad9()),
        )
        .expect("shipped rellis3d mapping is valid")
    }

    /// RUGD → offroad9, as shipped.
    pub fn rugd() -> Self {
        Self::from_toml_str(
            RUGD_MAPPING_TOML,
            Arc::new(ClassTaxonomy::rugd()),
            Arc::new(ClassTaxonomy::offroad9()),
        )
        .expect("shipped rugd mapping is valid")
    }

    /// Parses a mapping file (`source`, `target`, `pairs = [[src, dst], ...]`)
    /// against the given taxonomies.
    pub fn from_toml_str(s: &str, source: Arc<ClassTaxonomy>, target: Arc<ClassTaxonomy>) -> Result<Self> {
        let def: MappingDef = toml::from_str(s).map_err(|e| Error::Parse {
            path: "<mapping>".into(),
            message: e.to_string(),
        })?;
        if def.source != source.name() || def.target != target.name() {
            return Err(Error::TaxonomyMismatch(
                format!("{} -> {}", def.source, def.target),
                format!("{} -> {}", source.name(), target.name()),
            ));
        }
        let pairs: Vec<(&str, &str)> = def.pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        build_mapping(&pairs, source, target)
    }

    pub fn to_toml_string(&self) -> String {
        let def = MappingDef {
            source: self.source.name().into(),
            target: self.target.name().into(),
            pairs: self
                .table
                .iter()
                .enumerate()
                .map(|(s, &t)| (self.source.names()[s].clone(), self.target.names()[t as usize].clone()))
                .collect(),
        };
        toml::to_string_pretty(&def).expect("mapping serializes")
    }
}

/// Builds a validated total mapping from `(source, target)` class-name pairs.
pub fn build_mapping(
    pairs: &[(&str, &str)],
    source: Arc<ClassTaxonomy>,
    target: Arc<ClassTaxonomy>,
) -> Result<ClassMapping> {
    let mut table: Vec<Option<u8>> = vec![None; source.len()];
    for (s, t) in pairs {
        let si = source.index_of(s)? as usize;
        let ti = target.index_of(t)?;
        if table[si].is_some() {
            return Err(Error::DuplicateSource((*s).to_string()));
        }
        table[si] = Some(ti);
    }
    let table = table
        .into_iter()
        .enumerate()
        .map(|(i, t)| t.ok_or_else(|| Error::UnmappedClass(source.names()[i].clone())))
        .collect::<Result<Vec<u8>>>()?;
    Ok(ClassMapping { source, target, table })
}

/// Replaces each class index by its mapped target; ignore stays ignore.
pub fn remap_mask(mask: &LabelMask, mapping: &ClassMapping) -> Result<LabelMask> {
    if **mask.taxonomy() != **mapping.source() {
        return Err(Error::TaxonomyMismatch(
            mask.taxonomy().name().into(),
            mapping.source().name().into(),
        ));
    }
    let src_ignore = mask.taxonomy().ignore_index();
    let dst_ignore = mapping.target().ignore_index();
    let w = mask.width();
    let data = mask
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v == src_ignore {
                Ok(dst_ignore)
            } else if (v as usize) < mapping.table.len() {
                Ok(mapping.table[v as usize])
            } else {
                Err(Error::LabelOutOfRange {
                    x: i % w,
                    y: i / w,
                    value: v,
                    taxonomy: mask.taxonomy().name().into(),
                })
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    LabelMask::new(
        mask.height(),
        mask.width(),
        data,
        mapping.target().clone(),
        mask.provenance(),
    )
}

/// Per-class share of labeled pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFrequencyTable {
    pub class_names: Vec<String>,
    pub counts: Vec<u64>,
    pub fractions: Vec<f64>,
}

impl ClassFrequencyTable {
    pub fn from_counts(class_names: Vec<String>, counts: Vec<u64>) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Empty("no labeled pixels".into()));
        }
        let fractions = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Ok(ClassFrequencyTable {
            class_names,
            counts,
            fractions,
        })
    }

    fn from_percent(tax: &ClassTaxonomy, percent: &[f64]) -> Self {
        ClassFrequencyTable {
            class_names: tax.names().to_vec(),
            counts: Vec::new(),
            fractions: percent.iter().map(|p| p / 100.0).collect(),
        }
    }

    /// Published Rellis-3D class distribution over the offroad9 classes.
    pub fn rellis3d_reference() -> Self {
        Self::from_percent(
            &ClassTaxonomy::offroad9(),
            &[2.86, 1.06, 33.59, 0.65, 30.02, 15.83, 15.03, 0.50, 0.46],
        )
    }

    /// Published RUGD class distribution over the offroad9 classes.
    pub fn rugd_reference() -> Self {
        Self::from_percent(
            &ClassTaxonomy::offroad9(),
            &[11.71, 10.95, 23.85, 0.11, 8.22, 2.37, 39.33, 2.02, 1.45],
        )
    }

    pub fn labeled_pixels(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn fraction(&self, class: &str) -> Option<f64> {
        self.class_names
            .iter()
            .position(|n| n == class)
            .map(|i| self.fractions[i])
    }
}

/// Per-class pixel counts of one mask (ignore excluded).
pub fn class_counts(mask: &LabelMask) -> Vec<u64> {
    let mut counts = vec![0u64; mask.taxonomy().len()];
    let ignore = mask.taxonomy().ignore_index();
    for &v in mask.data() {
        if v != ignore {
            counts[v as usize] += 1;
        }
    }
    counts
}

/// Class frequencies over a set of in-memory masks sharing one taxonomy.
pub fn class_frequencies_of<'a>(masks: impl IntoIterator<Item = &'a LabelMask>) -> Result<ClassFrequencyTable> {
    let mut names: Option<Vec<String>> = None;
    let mut counts: Vec<u64> = Vec::new();
    for mask in masks {
        match &names {
            None => {
                names = Some(mask.taxonomy().names().to_vec());
                counts = vec![0; mask.taxonomy().len()];
            }
            Some(n) if n.as_slice() != mask.taxonomy().names() => {
                return Err(Error::TaxonomyMismatch(n.join(","), mask.taxonomy().names().join(",")))
            }
            _ => {}
        }
        for (c, k) in counts.iter_mut().zip(class_counts(mask)) {
            *c += k;
        }
    }
    let names = names.ok_or_else(|| Error::Empty("no masks".into()))?;
    ClassFrequencyTable::from_counts(names, counts)
}

/// Class frequencies over every labeled sample of a manifest.
pub fn class_frequencies(manifest: &DatasetManifest) -> Result<ClassFrequencyTable> {
    let labeled: Vec<_> = manifest.samples.iter().filter(|s| s.labeled).collect();
    if labeled.is_empty() {
        return Err(Error::Empty(format!(
            "manifest `{}` has no labeled samples",
            manifest.name
        )));
    }
    let tax = Arc::new(manifest.taxonomy.clone());
    let per_file = labeled
        .par_iter()
        .map(|s| {
            let path = manifest.resolve(s.label.as_ref().expect("labeled sample has a label"));
            let (mask, _) = crate::dataio::load_label_png(&path, tax.clone(), crate::dataio::ColorMatch::Strict)?;
            Ok(class_counts(&mask))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut counts = vec![0u64; tax.len()];
    for c in per_file {
        for (a, b) in counts.iter_mut().zip(c) {
            *a += b;
        }
    }
    ClassFrequencyTable::from_counts(tax.names().to_vec(), counts)
}
