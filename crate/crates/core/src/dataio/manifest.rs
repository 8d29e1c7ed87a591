//! Line-delimited JSON manifest: one image pair per line, patient metadata
//! inlined on every row.
//!
//! ```text
//! {"patient_id":"P001","label":"B","image_id":"P001_0","bmode_path":"b/P001_0.png","elasto_path":"se/P001_0.png","roi":"12,30,96,80"}
//! ```
//!
//! Relative image paths resolve against the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Label, Roi};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub label: Label,
    pub histological_type: Option<String>,
    pub strain_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub patient_id: String,
    pub bmode_path: PathBuf,
    pub elasto_path: PathBuf,
    pub roi: Option<Roi>,
}

/// One manifest line as written on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub patient_id: String,
    #[serde(default)]
    pub label: Option<Label>,
    pub image_id: String,
    pub bmode_path: PathBuf,
    pub elasto_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi: Option<Roi>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histological_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strain_ratio: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub patients: BTreeMap<String, PatientRecord>,
    pub images: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn n_patients(&self) -> usize {
        self.patients.len()
    }

    /// Number of B-mode images; every row pairs exactly one of each modality.
    pub fn n_bmode(&self) -> usize {
        self.images.len()
    }

    pub fn n_elasto(&self) -> usize {
        self.images.len()
    }

    pub fn label_of(&self, patient_id: &str) -> Option<Label> {
        self.patients.get(patient_id).map(|p| p.label)
    }

    pub fn images_of<'a>(&'a self, patient_id: &'a str) -> impl Iterator<Item = &'a ImageRecord> {
        self.images.iter().filter(move |r| r.patient_id == patient_id)
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|r| r.image_id == image_id)
    }

    pub fn patients_with_label(&self, label: Label) -> Vec<&str> {
        self.patients
            .values()
            .filter(|p| p.label == label)
            .map(|p| p.patient_id.as_str())
            .collect()
    }
}

/// Parse and validate a manifest file.
pub fn parse_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.is_file() {
        return Err(Error::ManifestNotFound(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let mut patients: BTreeMap<String, PatientRecord> = BTreeMap::new();
    let mut images = Vec::new();
    let mut seen_images = HashSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(raw).map_err(|e| Error::ManifestSyntax {
            line,
            msg: e.to_string(),
        })?;
        let label = row.label.ok_or(Error::MissingLabel { line })?;

        if !seen_images.insert(row.image_id.clone()) {
            return Err(Error::DuplicateImageId(row.image_id));
        }

        let patient = PatientRecord {
            patient_id: row.patient_id.clone(),
            label,
            histological_type: row.histological_type.clone(),
            strain_ratio: row.strain_ratio,
        };
        if let Some(sr) = patient.strain_ratio {
            if !(sr.is_finite() && sr >= 0.0) {
                return Err(Error::ManifestSyntax {
                    line,
                    msg: format!("strain_ratio must be nonnegative, got {sr}"),
                });
            }
        }
        match patients.get(&row.patient_id) {
            Some(existing) if *existing != patient => {
                return Err(Error::DuplicatePatientId(row.patient_id));
            }
            Some(_) => {}
            None => {
                patients.insert(row.patient_id.clone(), patient);
            }
        }

        let bmode_path = resolve(&root, &row.bmode_path, line)?;
        let elasto_path = resolve(&root, &row.elasto_path, line)?;
        if let Some(roi) = row.roi {
            for p in [&bmode_path, &elasto_path] {
                let (w, h) = image::image_dimensions(p).map_err(|e| Error::Decode {
                    path: p.clone(),
                    msg: e.to_string(),
                })?;
                if !roi.fits(w as usize, h as usize) {
                    return Err(Error::RoiOutOfBounds {
                        image_id: row.image_id.clone(),
                        roi: roi.to_string(),
                        width: w as usize,
                        height: h as usize,
                    });
                }
            }
        }
        images.push(ImageRecord {
            image_id: row.image_id,
            patient_id: row.patient_id,
            bmode_path,
            elasto_path,
            roi: row.roi,
        });
    }

    if images.is_empty() {
        return Err(Error::EmptyManifest);
    }
    Ok(DatasetManifest {
        root,
        patients,
        images,
    })
}

fn resolve(root: &Path, p: &Path, line: usize) -> Result<PathBuf> {
    let full = if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    };
    if full.is_file() {
        Ok(full)
    } else {
        Err(Error::UnresolvablePath { line, path: full })
    }
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
