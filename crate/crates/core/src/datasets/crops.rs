use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{ClassId, DatasetManifest, ImageStore};
use crate::error::{Error, Result};
use crate::geometry::{clip, BBox};
use crate::patch::{pixel_rect, Patch};
use crate::rng::{rng_for, stream};

/// A proxy training sample. Labels run `1..=K` for objects of interest and
/// `K + 1` for out-of-distribution content.
#[derive(Debug, Clone, PartialEq)]
pub struct CropRecord {
    pub patch: Patch,
    pub label: u32,
    pub source: String,
}

#[derive(Debug, Clone, Default)]
pub struct CropSet {
    pub crops: Vec<CropRecord>,
    /// Number of classes of interest (`K`).
    pub num_classes: usize,
    /// Boxes that rounded to an empty pixel rectangle.
    pub skipped: usize,
}

/// Extras on top of the plain ground-truth crops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropOptions {
    /// Extra randomly shifted and rescaled copies of every box.
    pub jitter_copies: usize,
    /// Maximum relative shift / rescale of a jittered copy.
    pub jitter: f64,
    /// Background crops per image (labelled `K + 1`).
    pub background_per_image: usize,
    pub seed: u64,
}

impl Default for CropOptions {
    fn default() -> Self {
        Self {
            jitter_copies: 0,
            jitter: 0.15,
            background_per_image: 0,
            seed: 0,
        }
    }
}

/// Cuts one crop per annotation of `in_classes` or `ood_classes` out of the
/// images of `full`.
pub fn proxy_crops(
    full: &DatasetManifest,
    store: &ImageStore,
    in_classes: &BTreeSet<ClassId>,
    ood_classes: &BTreeSet<ClassId>,
    options: &CropOptions,
) -> Result<CropSet> {
    if let Some(c) = in_classes.intersection(ood_classes).next() {
        return Err(Error::Dataset(format!("class {c} is both in- and out-of-distribution")));
    }
    let reindex: HashMap<ClassId, u32> = in_classes
        .iter()
        .enumerate()
        .map(|(i, c)| (*c, i as u32 + 1))
        .collect();
    let k = in_classes.len() as u32;
    let mut out = CropSet {
        num_classes: k as usize,
        ..Default::default()
    };
    for (idx, rec) in full.records.iter().enumerate() {
        let img = store.load(&rec.path)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut rng = rng_for(options.seed, stream::CROP_JITTER, idx as u64);
        let push = |bbox: &BBox, label: u32, out: &mut CropSet| match clip(bbox)
            .ok()
            .and_then(|b| pixel_rect(&b, w, h))
        {
            Some((x0, y0, x1, y1)) => out.crops.push(CropRecord {
                patch: Patch::crop_rgb(&img, x0, y0, x1, y1),
                label,
                source: rec.id.clone(),
            }),
            None => out.skipped += 1,
        };
        for a in &rec.annotations {
            let label = if let Some(l) = reindex.get(&a.class_id) {
                *l
            } else if ood_classes.contains(&a.class_id) {
                k + 1
            } else {
                continue;
            };
            push(&a.bbox, label, &mut out);
            for _ in 0..options.jitter_copies {
                let j = options.jitter;
                let b = BBox::new(
                    a.bbox.cx + a.bbox.w * rng.random_range(-j..=j),
                    a.bbox.cy + a.bbox.h * rng.random_range(-j..=j),
                    a.bbox.w * (1.0 + rng.random_range(-j..=j)),
                    a.bbox.h * (1.0 + rng.random_range(-j..=j)),
                );
                push(&b, label, &mut out);
            }
        }
        let sizes: Vec<(f64, f64)> = rec.annotations.iter().map(|a| (a.bbox.w, a.bbox.h)).collect();
        if sizes.is_empty() {
            continue;
        }
        let mut made = 0;
        for _ in 0..options.background_per_image * 20 {
            if made == options.background_per_image {
                break;
            }
            let (bw, bh) = sizes[rng.random_range(0..sizes.len())];
            let b = BBox::new(
                rng.random_range(bw / 2.0..=1.0 - bw / 2.0),
                rng.random_range(bh / 2.0..=1.0 - bh / 2.0),
                bw,
                bh,
            );
            if rec.annotations.iter().all(|a| a.bbox.iou(&b) < 0.1) {
                push(&b, k + 1, &mut out);
                made += 1;
            }
        }
    }
    if out.skipped > 0 {
        log::warn!("proxy_crops: skipped {} degenerate boxes", out.skipped);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CropIndexLine {
    file: String,
    label: u32,
    w: usize,
    h: usize,
    source: String,
}

#[derive(Serialize, Deserialize)]
struct CropIndexHeader {
    schema: String,
    num_classes: usize,
}

const CROP_SCHEMA: &str = "mergetrain-crops-v1";

/// Writes the patches as PNG files plus an `index.jsonl` next to them.
pub fn save_crops(set: &CropSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index_path = dir.join("index.jsonl");
    let mut index = Vec::new();
    writeln!(
        index,
        "{}",
        serde_json::to_string(&CropIndexHeader {
            schema: CROP_SCHEMA.into(),
            num_classes: set.num_classes,
        })?
    )
    .expect("write to Vec");
    for (i, c) in set.crops.iter().enumerate() {
        let file = format!("crop-{i:06}.png");
        let dest = dir.join(&file);
        c.patch.to_rgb().save(&dest).map_err(|source| Error::Image {
            path: dest.clone(),
            source,
        })?;
        let line = CropIndexLine {
            file,
            label: c.label,
            w: c.patch.width,
            h: c.patch.height,
            source: c.source.clone(),
        };
        writeln!(index, "{}", serde_json::to_string(&line)?).expect("write to Vec");
    }
    fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))
}

pub fn load_crops(dir: &Path) -> Result<CropSet> {
    let index_path = dir.join("index.jsonl");
    let file = fs::File::open(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let bad = |message: String| Error::Manifest {
        path: index_path.clone(),
        message,
    };
    let mut lines = BufReader::new(file).lines();
    let header: CropIndexHeader = match lines.next() {
        Some(l) => serde_json::from_str(&l.map_err(|e| Error::io(&index_path, e))?)
            .map_err(|e| bad(format!("bad header: {e}")))?,
        None => return Err(bad("empty crop index".into())),
    };
    if header.schema != CROP_SCHEMA {
        return Err(bad(format!("unknown schema '{}'", header.schema)));
    }
    let store = ImageStore::on_disk(dir);
    let mut set = CropSet {
        num_classes: header.num_classes,
        ..Default::default()
    };
    for line in lines {
        let line = line.map_err(|e| Error::io(&index_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: CropIndexLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if l.label == 0 || l.label as usize > header.num_classes + 1 {
            return Err(bad(format!("crop {} has label {} outside 1..=K+1", l.file, l.label)));
        }
        let patch = Patch::from_rgb(&store.load(&l.file)?);
        if patch.size() != (l.w, l.h) {
            return Err(bad(format!("crop {} size disagrees with the index", l.file)));
        }
        set.crops.push(CropRecord {
            patch,
            label: l.label,
            source: l.source,
        });
    }
    Ok(set)
}
