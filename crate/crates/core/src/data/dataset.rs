//! Generated datasets: one binary PLY per object plus a JSON manifest per
//! split.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ply::{self, PlyData, PlyEncoding};
use super::{gen_object, Category, DEFAULT_POINTS};
use crate::error::{Error, Result};
use crate::geom::{ContactLabels, PointCloud, SaliencyMap};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub categories: Vec<Category>,
    pub train_per_category: usize,
    pub test_per_category: usize,
    pub num_points: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            categories: vec![Category::Mug, Category::Pot, Category::Pan, Category::Tool],
            train_per_category: 2,
            test_per_category: 2,
            num_points: DEFAULT_POINTS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub object_id: String,
    pub category: Category,
    pub seed: u64,
    /// Relative to the manifest's directory.
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub split: String,
    pub num_points: usize,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Manifest,
    pub test: Manifest,
}

/// One object ready for training or evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSample {
    pub id: String,
    pub cloud: PointCloud,
    pub labels: ContactLabels,
    /// Single-handed saliency.
    pub saliency: SaliencyMap,
}

/// Train seeds are even and test seeds odd, so the splits never share an
/// object.
fn object_seed(base: u64, category: usize, index: usize, test: bool) -> u64 {
    let k = base.wrapping_mul(1 << 20).wrapping_add((category as u64) << 12).wrapping_add(index as u64);
    k.wrapping_mul(2).wrapping_add(test as u64)
}

fn manifest_for(cfg: &DatasetConfig, test: bool) -> Manifest {
    let split = if test { "test" } else { "train" };
    let per = if test { cfg.test_per_category } else { cfg.train_per_category };
    let mut entries = Vec::new();
    for (ci, &c) in cfg.categories.iter().enumerate() {
        for i in 0..per {
            let object_id = format!("{split}-{}-{i}", c.name());
            entries.push(ManifestEntry {
                file: format!("objects/{object_id}.ply"),
                object_id,
                category: c,
                seed: object_seed(cfg.seed, ci, i, test),
            });
        }
    }
    Manifest {
        version: MANIFEST_FORMAT_VERSION,
        split: split.into(),
        num_points: cfg.num_points,
        entries,
    }
}

/// Writes every object listed in `manifest` under `dir`.
pub fn write_objects(manifest: &Manifest, dir: &Path) -> Result<()> {
    for e in &manifest.entries {
        let o = gen_object(e.category, e.seed, manifest.num_points)?;
        let path = dir.join(&e.file);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let data = PlyData {
            cloud: o.cloud,
            saliency: Some(o.s_o),
            labels: Some(o.labels),
            colors: None,
        };
        ply::save_ply(&path, &data, PlyEncoding::BinaryLittleEndian)?;
    }
    Ok(())
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(manifest)? + "\n")?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::format("manifest", e.to_string()))?;
    if m.version != MANIFEST_FORMAT_VERSION {
        return Err(Error::format("manifest", format!("unsupported version {}", m.version)));
    }
    Ok(m)
}

/// Generates both splits into `dir` (`train.json`, `test.json`, `objects/`).
pub fn make_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<DatasetSplit> {
    if cfg.categories.is_empty() || cfg.train_per_category == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one category and one training object".into()));
    }
    fs::create_dir_all(dir)?;
    let split = DatasetSplit {
        train: manifest_for(cfg, false),
        test: manifest_for(cfg, true),
    };
    for (m, name) in [(&split.train, "train.json"), (&split.test, "test.json")] {
        write_objects(m, dir)?;
        save_manifest(m, &dir.join(name))?;
    }
    Ok(split)
}

/// Reads every object of a manifest file. Objects without stored saliency
/// or labels are rejected.
pub fn load_split(manifest_path: &Path) -> Result<Vec<ObjectSample>> {
    let m = load_manifest(manifest_path)?;
    let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    m.entries.iter().map(|e| load_sample(&dir.join(&e.file), &e.object_id)).collect()
}

pub fn load_sample(path: &Path, id: &str) -> Result<ObjectSample> {
    let d = ply::load_ply(path)?;
    let missing = |what: &str| Error::format("PLY", format!("{}: no {what} property", path.display()));
    Ok(ObjectSample {
        id: id.to_string(),
        saliency: d.saliency.ok_or_else(|| missing("saliency"))?,
        labels: d.labels.ok_or_else(|| missing("label"))?,
        cloud: d.cloud,
    })
}
