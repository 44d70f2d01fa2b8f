use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Annotation, ClassId, DatasetManifest, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const MANIFEST_SCHEMA: &str = "mergetrain-manifest-v1";

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    classes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    provenance: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct AnnLine {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    cls: ClassId,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: String,
    path: String,
    w: u32,
    h: u32,
    ann: Vec<AnnLine>,
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = Header {
        schema: MANIFEST_SCHEMA.to_string(),
        classes: manifest
            .classes
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect(),
        provenance: manifest.provenance.clone(),
    };
    let mut write_line = |value: String| -> Result<()> {
        out.write_all(value.as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))
    };
    write_line(serde_json::to_string(&header)?)?;
    for r in &manifest.records {
        let line = RecordLine {
            id: r.id.clone(),
            path: r.path.clone(),
            w: r.width,
            h: r.height,
            ann: r
                .annotations
                .iter()
                .map(|a| AnnLine {
                    cx: a.bbox.cx,
                    cy: a.bbox.cy,
                    w: a.bbox.w,
                    h: a.bbox.h,
                    cls: a.class_id,
                })
                .collect(),
        };
        write_line(serde_json::to_string(&line)?)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let err = |message: String| Error::Manifest {
        path: path.to_path_buf(),
        message,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| err("empty file".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: Header =
        serde_json::from_str(&first).map_err(|e| err(format!("bad header: {e}")))?;
    if header.schema != MANIFEST_SCHEMA {
        return Err(err(format!("unknown schema version '{}'", header.schema)));
    }
    let mut classes = BTreeMap::new();
    for (k, v) in header.classes {
        let id: ClassId = k
            .parse()
            .map_err(|_| err(format!("class id '{k}' is not an integer")))?;
        classes.insert(id, v);
    }

    let mut records = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| err(format!("line {}: {e}", n + 2)))?;
        let id = value
            .get("id")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .unwrap_or_else(|| format!("<line {}>", n + 2));
        let rec: RecordLine =
            serde_json::from_value(value).map_err(|e| err(format!("record {id}: {e}")))?;
        records.push(ImageRecord {
            id: rec.id,
            path: rec.path,
            width: rec.w,
            height: rec.h,
            annotations: rec
                .ann
                .into_iter()
                .map(|a| Annotation {
                    bbox: BBox::new(a.cx, a.cy, a.w, a.h),
                    class_id: a.cls,
                })
                .collect(),
        });
    }
    let manifest = DatasetManifest {
        classes,
        records,
        provenance: header.provenance,
    };
    manifest.validate().map_err(|e| err(e.to_string()))?;
    if manifest.records.is_empty() {
        log::warn!("manifest {} has no records", path.display());
    }
    Ok(manifest)
}
