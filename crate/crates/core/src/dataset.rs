//! Labeled cases and the on-disk dataset layout.
//!
//! A dataset directory holds `manifest.json` and, per case, `<id>_t1.raw`
//! plus an optional `<id>_t0.raw`. Raw files are little-endian f32 voxels in
//! z-major order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataprep::Texture;
use crate::error::{Error, Result};
use crate::hloss::EvolutionLabel;
use crate::volume::Volume3D;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCase {
    pub id: String,
    pub split: Split,
    pub label: EvolutionLabel,
    pub texture: Texture,
    pub roi_t0: Option<Volume3D>,
    pub roi_t1: Volume3D,
    pub d_t0_mm: Option<f64>,
    pub d_t1_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: String,
    pub split: Split,
    /// Label code: 0 stability, 1 dilatation, 2 shrinkage.
    pub label: usize,
    pub texture: Texture,
    pub roi_t0: Option<String>,
    pub roi_t1: String,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub d_t0_mm: Option<f64>,
    pub d_t1_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub cases: Vec<CaseRecord>,
}

fn read_raw(dir: &Path, file: &str, dims: [usize; 3], spacing: [f64; 3]) -> Result<Volume3D> {
    let path = dir.join(file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Volume3D::from_le_bytes(dims, spacing, &bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn write_file(path: PathBuf, bytes: &[u8]) -> Result<()> {
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

/// Writes `cases` under `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, cases: &[LabeledCase]) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(cases.len());
    for c in cases {
        if c.id.is_empty() || c.id.contains(['/', '\\']) {
            return Err(Error::Data(format!("case id {:?} is not a plain file stem", c.id)));
        }
        let t1 = format!("{}_t1.raw", c.id);
        write_file(dir.join(&t1), &c.roi_t1.to_le_bytes())?;
        let t0 = match &c.roi_t0 {
            Some(v) => {
                if v.dims() != c.roi_t1.dims() {
                    return Err(Error::Data(format!("case {}: T0 and T1 ROI dims differ", c.id)));
                }
                let name = format!("{}_t0.raw", c.id);
                write_file(dir.join(&name), &v.to_le_bytes())?;
                Some(name)
            }
            None => None,
        };
        records.push(CaseRecord {
            id: c.id.clone(),
            split: c.split,
            label: c.label.code(),
            texture: c.texture,
            roi_t0: t0,
            roi_t1: t1,
            dims: c.roi_t1.dims(),
            spacing: c.roi_t1.spacing(),
            d_t0_mm: c.d_t0_mm,
            d_t1_mm: c.d_t1_mm,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        cases: records,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    json.push('\n');
    write_file(path, json.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json { path: path.clone(), source })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported manifest version {}",
            path.display(),
            manifest.version
        )));
    }
    Ok(manifest)
}

/// Loads every case of the dataset at `dir`, checking file sizes against the
/// recorded dims.
pub fn load_dataset(dir: &Path) -> Result<Vec<LabeledCase>> {
    let manifest = read_manifest(dir)?;
    manifest
        .cases
        .iter()
        .map(|r| {
            Ok(LabeledCase {
                id: r.id.clone(),
                split: r.split,
                label: EvolutionLabel::from_code(r.label).map_err(|e| Error::Data(format!("case {}: {e}", r.id)))?,
                texture: r.texture,
                roi_t0: r.roi_t0.as_deref().map(|f| read_raw(dir, f, r.dims, r.spacing)).transpose()?,
                roi_t1: read_raw(dir, &r.roi_t1, r.dims, r.spacing)?,
                d_t0_mm: r.d_t0_mm,
                d_t1_mm: r.d_t1_mm,
            })
        })
        .collect()
}

pub fn split_of(cases: &[LabeledCase], split: Split) -> Vec<&LabeledCase> {
    cases.iter().filter(|c| c.split == split).collect()
}
