//! Detection manifests and the merged-dataset construction: split a fully
//! labelled dataset by class set, strip foreign annotations, merge the halves,
//! and count how many instances the merge left unlabelled.

mod crops;
mod io;
mod store;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub use crops::{load_crops, proxy_crops, save_crops, CropOptions, CropRecord, CropSet};
pub use io::{load_manifest, save_manifest, MANIFEST_SCHEMA};
pub use store::ImageStore;
pub use synth::{synth_generate, ShapeKind, SynthConfig};

pub type ClassId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BBox,
    pub class_id: ClassId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub path: String,
    pub width: u32,
    pub height: u32,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: BTreeMap<ClassId, String>,
    pub records: Vec<ImageRecord>,
    pub provenance: Vec<String>,
}

impl DatasetManifest {
    pub fn num_annotations(&self) -> usize {
        self.records.iter().map(|r| r.annotations.len()).sum()
    }

    pub fn class_ids(&self) -> BTreeSet<ClassId> {
        self.classes.keys().copied().collect()
    }

    /// Checks the manifest invariants: unique ids, positive sizes, known classes.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate record id {}", r.id)));
            }
            if r.width == 0 || r.height == 0 {
                return Err(Error::Dataset(format!("record {} has zero size", r.id)));
            }
            for a in &r.annotations {
                if !self.classes.contains_key(&a.class_id) {
                    return Err(Error::Dataset(format!(
                        "record {}: class {} not in class table",
                        r.id, a.class_id
                    )));
                }
                a.bbox
                    .validate()
                    .map_err(|e| Error::Dataset(format!("record {}: {e}", r.id)))?;
            }
        }
        Ok(())
    }

    /// Training entry points refuse empty manifests.
    pub fn require_records(&self, what: &str) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::Dataset(format!("{what} manifest has no records")));
        }
        Ok(())
    }
}

/// Keeps the records holding at least one annotation from `class_set` and drops
/// every annotation outside it.
pub fn split_and_strip(full: &DatasetManifest, class_set: &BTreeSet<ClassId>) -> Result<DatasetManifest> {
    if class_set.is_empty() {
        return Err(Error::Dataset("empty class set".into()));
    }
    if let Some(c) = class_set.iter().find(|c| !full.classes.contains_key(c)) {
        return Err(Error::Dataset(format!("class {c} not in the manifest's class table")));
    }
    let records: Vec<ImageRecord> = full
        .records
        .iter()
        .filter(|r| r.annotations.iter().any(|a| class_set.contains(&a.class_id)))
        .map(|r| ImageRecord {
            annotations: r
                .annotations
                .iter()
                .filter(|a| class_set.contains(&a.class_id))
                .copied()
                .collect(),
            ..r.clone()
        })
        .collect();
    if records.is_empty() {
        return Err(Error::Dataset(format!("no record contains classes {class_set:?}")));
    }
    let mut provenance = full.provenance.clone();
    provenance.push(format!(
        "split_and_strip keep={:?} records {}->{}",
        class_set,
        full.records.len(),
        records.len()
    ));
    Ok(DatasetManifest {
        classes: full.classes.clone(),
        records,
        provenance,
    })
}

/// Union of two manifests. Ids of `b` that collide with ids of `a` are
/// re-prefixed with `b:` until unique.
pub fn merge(a: &DatasetManifest, b: &DatasetManifest) -> Result<DatasetManifest> {
    let mut classes = a.classes.clone();
    for (id, name) in &b.classes {
        match classes.get(id) {
            Some(existing) if existing != name => {
                return Err(Error::Dataset(format!(
                    "class {id} is '{existing}' in one manifest and '{name}' in the other"
                )))
            }
            _ => {
                classes.insert(*id, name.clone());
            }
        }
    }
    let mut ids: BTreeSet<String> = a.records.iter().map(|r| r.id.clone()).collect();
    let mut records = a.records.clone();
    let mut renamed = 0usize;
    for r in &b.records {
        let mut rec = r.clone();
        while ids.contains(&rec.id) {
            rec.id = format!("b:{}", rec.id);
            renamed += 1;
        }
        ids.insert(rec.id.clone());
        records.push(rec);
    }
    let mut provenance = a.provenance.clone();
    provenance.extend(b.provenance.iter().cloned());
    if !b.records.is_empty() || !b.provenance.is_empty() {
        provenance.push(format!(
            "merge {}+{} records ({} renamed)",
            a.records.len(),
            b.records.len(),
            renamed
        ));
    }
    Ok(DatasetManifest {
        classes,
        records,
        provenance,
    })
}

/// Fraction of annotation instances of `full` (restricted to the images and
/// class set of `partial`) that carry no label in `partial`.
pub fn missing_rate(partial: &DatasetManifest, full: &DatasetManifest) -> Result<f64> {
    let by_id: HashMap<&str, &ImageRecord> =
        full.records.iter().map(|r| (r.id.as_str(), r)).collect();
    let class_set = partial.class_ids();
    let mut labelled = 0usize;
    let mut total = 0usize;
    for r in &partial.records {
        let f = by_id.get(r.id.as_str()).ok_or_else(|| {
            Error::Dataset(format!("record {} of the partial manifest is not in the full one", r.id))
        })?;
        labelled += r.annotations.len();
        total += f
            .annotations
            .iter()
            .filter(|a| class_set.contains(&a.class_id))
            .count();
    }
    if total == 0 {
        return Err(Error::Dataset("missing rate undefined: no reference annotations".into()));
    }
    if labelled > total {
        return Err(Error::Dataset(
            "partial manifest has more annotations than the full one".into(),
        ));
    }
    Ok(1.0 - labelled as f64 / total as f64)
}
