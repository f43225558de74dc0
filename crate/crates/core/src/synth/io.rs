//! Dataset directory: `manifest.json` plus one tensor-record file per case
//! (the image, then one mask per lesion).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Case, Dataset, DatasetSpec, Label, Lesion, LesionShape, Phantom, Split};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Mask};
use crate::tensor::{RecordReader, Shape};

pub const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct LesionEntry {
    #[serde(flatten)]
    shape: LesionShape,
    #[serde(rename = "box")]
    bbox: BBox,
}

#[derive(Serialize, Deserialize)]
struct CaseEntry {
    seed_id: u64,
    label: Label,
    split: Split,
    file: String,
    lesions: Vec<LesionEntry>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: DatasetSpec,
    cases: Vec<CaseEntry>,
}

fn case_file(seed_id: u64) -> String {
    format!("case_{seed_id:04}.bin")
}

/// Writes the manifest (keys sorted, so the bytes are canonical) and the
/// per-case records.
pub fn export_dataset(d: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut cases = Vec::with_capacity(d.len());
    let tagged = d
        .train
        .iter()
        .map(|c| (Split::Train, c))
        .chain(d.validation.iter().map(|c| (Split::Validation, c)));
    for (split, case) in tagged {
        let p = &case.phantom;
        let file = case_file(p.seed_id);
        let mut bytes = p.image.to_record_bytes();
        for l in &p.lesions {
            l.mask.to_tensor().write_record(&mut bytes)?;
        }
        fs::write(dir.join(&file), bytes)?;
        cases.push(CaseEntry {
            seed_id: p.seed_id,
            label: case.label,
            split,
            file,
            lesions: p
                .lesions
                .iter()
                .map(|l| LesionEntry {
                    shape: l.shape.clone(),
                    bbox: l.bbox,
                })
                .collect(),
        });
    }
    let manifest = Manifest {
        spec: d.spec.clone(),
        cases,
    };
    let value = serde_json::to_value(&manifest)?;
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let before: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (before + column.saturating_sub(1)) as u64
}

fn parse_error(file: &str, offset: usize, message: impl std::fmt::Display) -> Error {
    Error::Parse {
        offset: offset as u64,
        message: format!("{file}: {message}"),
    }
}

pub fn import_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        offset: byte_offset(&text, e.line(), e.column()),
        message: format!("{MANIFEST}: {e}"),
    })?;
    manifest.spec.validate()?;
    let size = manifest.spec.image_size;
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for entry in manifest.cases {
        let bytes = fs::read(dir.join(&entry.file))?;
        let mut r = RecordReader::new(&bytes);
        let at = r.position();
        let image = r.read_tensor().map_err(|e| match e {
            Error::Parse { offset, message } => parse_error(&entry.file, offset as usize, message),
            other => other,
        })?;
        if image.shape() != Shape::new(1, 1, size, size) {
            return Err(parse_error(&entry.file, at, format!("image shape {}", image.shape())));
        }
        let mut lesions = Vec::with_capacity(entry.lesions.len());
        for le in entry.lesions {
            let at = r.position();
            let t = r.read_tensor().map_err(|e| match e {
                Error::Parse { offset, message } => parse_error(&entry.file, offset as usize, message),
                other => other,
            })?;
            if t.shape() != Shape::new(1, 1, size, size) {
                return Err(parse_error(&entry.file, at, format!("mask shape {}", t.shape())));
            }
            let mask = Mask::from_tensor(&t, 0.5);
            if mask.tight_box() != Some(le.bbox) {
                return Err(parse_error(&entry.file, at, "mask disagrees with its manifest box"));
            }
            lesions.push(Lesion {
                shape: le.shape,
                mask,
                bbox: le.bbox,
            });
        }
        if !r.is_at_end() {
            return Err(parse_error(&entry.file, r.position(), "trailing bytes"));
        }
        let case = Case {
            label: entry.label,
            phantom: Phantom {
                image,
                lesions,
                seed_id: entry.seed_id,
            },
        };
        match entry.split {
            Split::Train => train.push(case),
            Split::Validation => validation.push(case),
        }
    }
    Ok(Dataset {
        spec: manifest.spec,
        train,
        validation,
    })
}
