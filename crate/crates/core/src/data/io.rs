//! On-disk corpus layout:
//!
//! ```text
//! root/manifest.csv          id,fundus_path,heightmap_path (paths relative to root)
//! root/fundus/<id>.png       8-bit RGB
//! root/heightmap/<id>.png    8-bit RGB, color-coded heights
//! root/prep.json             present once the corpus has been preprocessed
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ClaheConfig, FundusImage, SamplePair, ValueDomain};
use crate::codec::HeightmapImage;
use crate::error::{Error, Result};
use crate::image::RgbImage;

pub const MANIFEST: &str = "manifest.csv";
pub const PREP_RECORD: &str = "prep.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub fundus_path: String,
    pub heightmap_path: String,
}

/// Written next to a preprocessed corpus; `digests` maps each id to the
/// SHA-256 of its source fundus and heightmap files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepRecord {
    pub image_size: usize,
    /// `None` when contrast enhancement was skipped.
    pub clahe: Option<ClaheConfig>,
    pub digests: BTreeMap<String, String>,
}

impl PrepRecord {
    pub fn load(root: &Path) -> Result<Option<Self>> {
        let path = root.join(PREP_RECORD);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join(PREP_RECORD);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}

/// Reads and validates `root/manifest.csv`. Errors name the offending line.
pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join(MANIFEST);
    if !path.exists() {
        return Err(Error::Data(format!("{} not found", path.display())));
    }
    let mut reader = csv::Reader::from_path(&path)?;
    let headers = reader.headers()?.clone();
    let expected = ["id", "fundus_path", "heightmap_path"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Data(format!(
            "{}: header must be {}, found {}",
            path.display(),
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<ManifestEntry>().enumerate() {
        let line = i + 2;
        let entry = row.map_err(|e| Error::Data(format!("{} line {line}: {e}", path.display())))?;
        if entry.id.is_empty() {
            return Err(Error::Data(format!("{} line {line}: empty id", path.display())));
        }
        if let Some(prev) = seen.insert(entry.id.clone(), line) {
            return Err(Error::Data(format!(
                "{} line {line}: duplicate id {} (first on line {prev})",
                path.display(),
                entry.id
            )));
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn write_manifest(root: &Path, entries: &[ManifestEntry]) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut w = csv::Writer::from_path(root.join(MANIFEST))?;
    for e in entries {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(root.join(MANIFEST), e))?;
    Ok(())
}

pub fn entry_for(id: &str) -> ManifestEntry {
    ManifestEntry {
        id: id.to_string(),
        fundus_path: format!("fundus/{id}.png"),
        heightmap_path: format!("heightmap/{id}.png"),
    }
}

/// Writes pairs in the standard layout. Normalized fundus images are scaled
/// back to bytes.
pub fn write_dataset(root: &Path, pairs: &[SamplePair]) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::with_capacity(pairs.len());
    for p in pairs {
        let e = entry_for(&p.id);
        let scale = match p.fundus.domain() {
            ValueDomain::Raw0To255 => 1.0,
            ValueDomain::Normalized0To1 => 255.0,
        };
        p.fundus.pixels().save_png(&root.join(&e.fundus_path), scale)?;
        p.target.pixels.save_png(&root.join(&e.heightmap_path), 255.0)?;
        entries.push(e);
    }
    write_manifest(root, &entries)?;
    Ok(entries)
}

pub fn resolve(root: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

pub fn load_pair(root: &Path, entry: &ManifestEntry, preprocessed: bool) -> Result<SamplePair> {
    let fundus = RgbImage::load_png_raw(&resolve(root, &entry.fundus_path))?;
    let target = RgbImage::load_png_raw(&resolve(root, &entry.heightmap_path))?.map(|v| v / 255.0);
    let mut fundus = FundusImage::raw(fundus)?;
    fundus.preprocessed = preprocessed;
    SamplePair::new(entry.id.clone(), fundus, HeightmapImage::new(target)?)
}

/// Loads every manifest entry as a raw pair. If the corpus carries a prep
/// record, fundus images are flagged as already contrast-enhanced.
pub fn load_dataset(root: &Path) -> Result<Vec<SamplePair>> {
    let preprocessed = PrepRecord::load(root)?.is_some();
    read_manifest(root)?
        .iter()
        .map(|e| load_pair(root, e, preprocessed))
        .collect()
}
