//! Importers for RUGD-style and Rellis-3D-style directory trees.
//!
//! Both importers remap the source labels to the offroad9 taxonomy, write the
//! remapped rasters under `out/labels/` and return a manifest that points at
//! the original images.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use super::{load_label_ids, load_label_png, save_label_png, ColorMatch, DatasetManifest, Domain, ImageSample, Split};
use crate::error::{Error, Result};
use crate::taxonomy::{remap_mask, ClassMapping, ClassTaxonomy, Rgb};

const RUGD_FRAMES: &str = "RUGD_frames-with-annotations";
const RUGD_ANNOTATIONS: &str = "RUGD_annotations";
const RUGD_COLORMAP: &str = "RUGD_annotation-colormap.txt";

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Replaces the shipped RUGD colors with the ones from the dataset's own
/// colormap file (`id name r g b` per line).
pub fn rugd_taxonomy_from_colormap(text: &str) -> Result<ClassTaxonomy> {
    let base = ClassTaxonomy::rugd();
    let mut colors: Vec<Option<Rgb>> = vec![None; base.len()];
    for (lineno, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let parse_err = || Error::Parse {
            path: RUGD_COLORMAP.into(),
            message: format!("line {}: expected `id name r g b`", lineno + 1),
        };
        if fields.len() != 5 {
            return Err(parse_err());
        }
        let name = match fields[1] {
            "void" => continue,
            "container/generic-object" => "object",
            n => n,
        };
        let c: Vec<u8> = fields[2..]
            .iter()
            .map(|v| v.parse::<u8>().map_err(|_| parse_err()))
            .collect::<Result<_>>()?;
        let idx = base.index_of(name)? as usize;
        colors[idx] = Some(Rgb([c[0], c[1], c[2]]));
    }
    let colors = colors
        .into_iter()
        .enumerate()
        .map(|(i, c)| c.ok_or_else(|| Error::UnmappedClass(base.names()[i].clone())))
        .collect::<Result<Vec<_>>>()?;
    base.with_colors(colors)
}

struct Pending {
    image: PathBuf,
    label: Option<(PathBuf, PathBuf)>,
    split: Split,
}

fn finish(
    name: &str,
    out: &Path,
    domain: Domain,
    pending: Vec<Pending>,
    load: impl Fn(&Path) -> Result<super::LabelMask> + Sync,
    mapping: &ClassMapping,
) -> Result<DatasetManifest> {
    pending
        .par_iter()
        .filter_map(|p| p.label.as_ref())
        .try_for_each(|(src, dst)| {
            let mask = remap_mask(&load(src)?, mapping)?;
            save_label_png(&mask, &out.join(dst))
        })?;
    let mut manifest = DatasetManifest::new(name, (**mapping.target()).clone(), out);
    manifest.samples = pending
        .into_iter()
        .map(|p| ImageSample {
            image: p.image,
            labeled: p.label.is_some(),
            label: p.label.map(|(_, dst)| dst),
            domain,
            split: p.split,
        })
        .collect();
    manifest.validate()?;
    Ok(manifest)
}

/// Imports a RUGD tree. Sequences listed in `val_sequences` go to the
/// validation split.
pub fn import_rugd(root: &Path, out: &Path, val_sequences: &[String], domain: Domain) -> Result<DatasetManifest> {
    let ann_root = root.join(RUGD_ANNOTATIONS);
    let colormap = ann_root.join(RUGD_COLORMAP);
    let source = if colormap.exists() {
        let text = std::fs::read_to_string(&colormap).map_err(|e| Error::io(&colormap, e))?;
        rugd_taxonomy_from_colormap(&text)?
    } else {
        ClassTaxonomy::rugd()
    };
    let source = Arc::new(source);
    let shipped = ClassMapping::rugd();
    let mapping = crate::taxonomy::build_mapping(
        &shipped
            .table()
            .iter()
            .enumerate()
            .map(|(s, &t)| {
                (
                    shipped.source().names()[s].as_str(),
                    shipped.target().names()[t as usize].as_str(),
                )
            })
            .collect::<Vec<_>>(),
        source.clone(),
        shipped.target().clone(),
    )?;
    let val: HashSet<&str> = val_sequences.iter().map(String::as_str).collect();

    let mut pending = Vec::new();
    for seq_dir in list_dir(&root.join(RUGD_FRAMES))? {
        if !seq_dir.is_dir() {
            continue;
        }
        let seq = seq_dir.file_name().unwrap().to_string_lossy().into_owned();
        let split = if val.contains(seq.as_str()) {
            Split::Val
        } else {
            Split::Train
        };
        for img in list_dir(&seq_dir)?.into_iter().filter(|p| is_image(p)) {
            let stem = img.file_stem().unwrap().to_string_lossy().into_owned();
            let ann = ann_root.join(&seq).join(format!("{stem}.png"));
            let label = ann
                .exists()
                .then(|| (ann, PathBuf::from("labels").join(&seq).join(format!("{stem}.png"))));
            pending.push(Pending {
                image: img,
                label,
                split,
            });
        }
    }
    if pending.is_empty() {
        return Err(Error::Empty(format!("no RUGD frames under `{}`", root.display())));
    }
    let tax = source.clone();
    finish(
        "rugd",
        out,
        domain,
        pending,
        move |p| Ok(load_label_png(p, tax.clone(), ColorMatch::Lenient)?.0),
        &mapping,
    )
}

/// Imports a Rellis-3D tree (`<seq>/pylon_camera_node/*.jpg` with id labels
/// in `<seq>/pylon_camera_node_label_id/*.png`). Frames listed in
/// `root/val.lst` go to the validation split.
pub fn import_rellis3d(root: &Path, out: &Path, domain: Domain) -> Result<DatasetManifest> {
    let mapping = ClassMapping::rellis3d();
    let val_list = root.join("val.lst");
    let val: HashSet<String> = if val_list.exists() {
        std::fs::read_to_string(&val_list)
            .map_err(|e| Error::io(&val_list, e))?
            .lines()
            .filter_map(|l| l.split_whitespace().next())
            .filter_map(|p| Path::new(p).file_stem().map(|s| s.to_string_lossy().into_owned()))
            .collect()
    } else {
        HashSet::new()
    };

    let mut pending = Vec::new();
    for seq_dir in list_dir(root)? {
        let cam = seq_dir.join("pylon_camera_node");
        if !cam.is_dir() {
            continue;
        }
        let seq = seq_dir.file_name().unwrap().to_string_lossy().into_owned();
        for img in list_dir(&cam)?.into_iter().filter(|p| is_image(p)) {
            let stem = img.file_stem().unwrap().to_string_lossy().into_owned();
            let ann = seq_dir.join("pylon_camera_node_label_id").join(format!("{stem}.png"));
            let split = if val.contains(&stem) { Split::Val } else { Split::Train };
            let label = ann
                .exists()
                .then(|| (ann, PathBuf::from("labels").join(&seq).join(format!("{stem}.png"))));
            pending.push(Pending {
                image: img,
                label,
                split,
            });
        }
    }
    if pending.is_empty() {
        return Err(Error::Empty(format!("no Rellis-3D frames under `{}`", root.display())));
    }
    let tax = mapping.source().clone();
    finish(
        "rellis3d",
        out,
        domain,
        pending,
        move |p| Ok(load_label_ids(p, tax.clone(), ColorMatch::Lenient)?.0),
        &mapping,
    )
}
