//! On-disk datasets: one phantom and one few-view sinogram raster per
//! sample, grouped by split, plus a manifest with seeds and file digests.
//! Derived network inputs are recomputed on load.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, Geometry, Sample, Split};
use crate::error::{Error, Result};
use crate::io::raster::RasterFile;

pub const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub seeds: Vec<u64>,
    /// SHA-256 of every file of the split, keyed by path relative to the
    /// dataset root.
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub geometry: Geometry,
    pub base_seed: u64,
    pub splits: BTreeMap<Split, SplitEntry>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// SHA-256 of the serialized manifest; equal for identical datasets.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
            path: path.clone(),
            reason: format!("bad manifest: {e}"),
        })?;
        if m.version != FORMAT_VERSION {
            return Err(Error::Corrupt {
                path,
                reason: format!("unsupported manifest version {}", m.version),
            });
        }
        Ok(m)
    }
}

fn sample_paths(split: Split, index: usize) -> (String, String) {
    let stem = format!("{}/{index:06}", split.name());
    (format!("{stem}.phantom.raw"), format!("{stem}.sino.raw"))
}

/// True when `dir` exists and holds at least one entry.
pub fn is_non_empty(dir: &Path) -> Result<bool> {
    match fs::read_dir(dir) {
        Ok(mut entries) => Ok(entries.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(dir, e)),
    }
}

/// Simulates `counts` samples per split and writes them under `dir`.
/// A non-empty `dir` is refused unless `force`, in which case only the
/// manifest and the split folders are replaced.
pub fn write_dataset(
    dir: &Path,
    geometry: Geometry,
    base_seed: u64,
    counts: &[(Split, usize)],
    force: bool,
) -> Result<Manifest> {
    geometry.validate()?;
    if is_non_empty(dir)? {
        if !force {
            return Err(Error::Invalid(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        for name in Split::ALL.iter().map(|s| s.name()).chain([MANIFEST]) {
            let p = dir.join(name);
            let removed = if p.is_dir() {
                fs::remove_dir_all(&p)
            } else {
                fs::remove_file(&p)
            };
            match removed {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(Error::io(&p, e)),
                _ => {}
            }
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut splits = BTreeMap::new();
    for &(split, count) in counts {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let data = Dataset::simulate(geometry, split, base_seed, count)?;
        let mut entry = SplitEntry {
            seeds: Vec::with_capacity(count),
            files: BTreeMap::new(),
        };
        for (i, s) in data.samples().iter().enumerate() {
            let (phantom, sino) = sample_paths(split, i);
            let files = [
                (
                    phantom,
                    RasterFile::from_image(&s.target).with_meta("seed", s.seed),
                ),
                (
                    sino,
                    RasterFile::from_sinogram(&s.fewview)
                        .with_meta("seed", s.seed)
                        .with_meta("nv_few", geometry.nv_few)
                        .with_meta("nv_dense", geometry.nv_dense),
                ),
            ];
            for (rel, file) in files {
                let bytes = file.to_bytes()?;
                let path = dir.join(&rel);
                fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
                entry.files.insert(rel, hex::encode(Sha256::digest(&bytes)));
            }
            entry.seeds.push(s.seed);
        }
        splits.insert(split, entry);
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        geometry,
        base_seed,
        splits,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads one split, checking every file against the manifest digest.
pub fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    let manifest = Manifest::load(dir)?;
    let entry = manifest.splits.get(&split).ok_or_else(|| {
        Error::Invalid(format!(
            "dataset {} has no {} split",
            dir.display(),
            split.name()
        ))
    })?;
    let geometry = manifest.geometry;
    let read = |rel: &str| -> Result<(PathBuf, RasterFile)> {
        let path = dir.join(rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if entry.files.get(rel).map(String::as_str)
            != Some(hex::encode(Sha256::digest(&bytes)).as_str())
        {
            return Err(Error::Corrupt {
                path,
                reason: "digest does not match the manifest".into(),
            });
        }
        let file = RasterFile::from_bytes(&bytes, &path)?;
        Ok((path, file))
    };
    let samples = entry
        .seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| {
            let (phantom, sino) = sample_paths(split, i);
            let (_, target) = read(&phantom)?;
            let (path, fewview) = read(&sino)?;
            let fewview = fewview.to_sinogram()?;
            if fewview.n_views() != geometry.nv_few {
                return Err(Error::Corrupt {
                    path,
                    reason: format!(
                        "{} views, manifest says {}",
                        fewview.n_views(),
                        geometry.nv_few
                    ),
                });
            }
            Sample::from_parts(seed, target.to_image()?, fewview, &geometry)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(geometry, samples)
}
