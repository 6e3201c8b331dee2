//! Dataset manifests: CSV loading, predefined k-fold splits, stratified
//! label-fraction subsets and mismatched-class unlabeled pools.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment variable naming the directory relative clip paths resolve against.
pub const DATA_ROOT_ENV: &str = "SSACL_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    /// `None` for unlabeled clips.
    pub label: Option<String>,
    pub fold: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Class name to index, assigned in sorted name order.
    pub class_map: BTreeMap<String, usize>,
    /// Directory of the CSV file, used when no data root is configured.
    pub base_dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
struct Row {
    filepath: String,
    #[serde(default)]
    label: Option<String>,
    fold: String,
}

impl DatasetManifest {
    /// Builds a manifest from entries, validating paths and fold numbering.
    pub fn from_entries(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if let Some(prev) = seen.insert(e.path.clone(), i) {
                return Err(Error::InvalidManifest(format!(
                    "duplicate filepath {} (entries {prev} and {i})",
                    e.path.display()
                )));
            }
        }
        let manifest = Self {
            class_map: class_map(&entries),
            entries,
            base_dir: None,
        };
        manifest.check_folds()?;
        Ok(manifest)
    }

    fn check_folds(&self) -> Result<()> {
        let folds: BTreeSet<u32> = self.entries.iter().map(|e| e.fold).collect();
        if let Some(&max) = folds.last() {
            let expected: BTreeSet<u32> = (1..=max).collect();
            if folds != expected {
                return Err(Error::InvalidManifest(format!(
                    "folds must be contiguous from 1, found {folds:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn n_folds(&self) -> u32 {
        self.entries.iter().map(|e| e.fold).max().unwrap_or(0)
    }

    pub fn n_classes(&self) -> usize {
        self.class_map.len()
    }

    pub fn is_unlabeled(&self) -> bool {
        self.entries.iter().all(|e| e.label.is_none())
    }

    pub fn label_index(&self, entry: &ManifestEntry) -> Option<usize> {
        entry.label.as_ref().and_then(|l| self.class_map.get(l).copied())
    }

    /// Resolves a clip path: absolute paths are kept, relative ones are joined
    /// to `data_root` when given, else to the manifest's directory.
    pub fn resolve(&self, entry: &ManifestEntry, data_root: Option<&Path>) -> PathBuf {
        if entry.path.is_absolute() {
            return entry.path.clone();
        }
        match (data_root, &self.base_dir) {
            (Some(root), _) => root.join(&entry.path),
            (None, Some(base)) => base.join(&entry.path),
            (None, None) => entry.path.clone(),
        }
    }
}

fn class_map(entries: &[ManifestEntry]) -> BTreeMap<String, usize> {
    let names: BTreeSet<&String> = entries.iter().filter_map(|e| e.label.as_ref()).collect();
    names
        .into_iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), i))
        .collect()
}

/// Loads a UTF-8 CSV with header `filepath,label,fold`. An empty label marks
/// the clip as unlabeled.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: 1,
            reason: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    for required in ["filepath", "label", "fold"] {
        if !headers.iter().any(|h| h == required) {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: 1,
                reason: format!("missing column {required:?}; expected header filepath,label,fold"),
            });
        }
    }

    let mut entries = Vec::new();
    let mut seen: HashMap<PathBuf, usize> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            reason: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let fail = |reason: String| Error::Manifest {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let row: Row = record
            .deserialize(Some(&headers))
            .map_err(|e| fail(e.to_string()))?;
        if row.filepath.is_empty() {
            return Err(fail("empty filepath".into()));
        }
        let fold: u32 = row
            .fold
            .parse()
            .ok()
            .filter(|&f| f >= 1)
            .ok_or_else(|| fail(format!("fold must be a positive integer, got {:?}", row.fold)))?;
        let clip = PathBuf::from(&row.filepath);
        if let Some(prev) = seen.insert(clip.clone(), line) {
            return Err(fail(format!(
                "duplicate filepath {} (first seen on line {prev})",
                row.filepath
            )));
        }
        entries.push(ManifestEntry {
            path: clip,
            label: row.label.filter(|l| !l.is_empty()),
            fold,
        });
    }
    let mut manifest = DatasetManifest::from_entries(entries).map_err(|e| match e {
        Error::InvalidManifest(reason) => Error::Manifest {
            path: path.to_path_buf(),
            line: 0,
            reason,
        },
        other => other,
    })?;
    manifest.base_dir = path.parent().map(Path::to_path_buf);
    Ok(manifest)
}

/// Partitions entries into (train, test) by fold id.
pub fn fold_split(
    manifest: &DatasetManifest,
    test_fold: u32,
) -> Result<(Vec<ManifestEntry>, Vec<ManifestEntry>)> {
    let n = manifest.n_folds();
    if test_fold < 1 || test_fold > n {
        return Err(Error::OutOfRange(format!(
            "test fold {test_fold} outside 1..={n}"
        )));
    }
    let (test, train): (Vec<_>, Vec<_>) = manifest
        .entries
        .iter()
        .cloned()
        .partition(|e| e.fold == test_fold);
    let test_paths: BTreeSet<&PathBuf> = test.iter().map(|e| &e.path).collect();
    if let Some(leak) = train.iter().find(|e| test_paths.contains(&e.path)) {
        return Err(Error::InvalidManifest(format!(
            "clip {} appears in both train and test",
            leak.path.display()
        )));
    }
    Ok((train, test))
}

/// Stratified subset keeping `floor(fraction * n_c)` clips of each class
/// (at least one). Selected clips keep their original order.
pub fn fraction_subset(entries: &[ManifestEntry], fraction: f64, seed: u64) -> Result<Vec<ManifestEntry>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "label fraction must be in (0, 1], got {fraction}"
        )));
    }
    if fraction == 1.0 {
        return Ok(entries.to_vec());
    }
    let mut by_class: BTreeMap<Option<&String>, Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        by_class.entry(e.label.as_ref()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = BTreeSet::new();
    for (_, mut idx) in by_class {
        // Guard against 0.29 * 100 = 28.999999999999996.
        let n = ((fraction * idx.len() as f64) + 1e-9).floor() as usize;
        idx.shuffle(&mut rng);
        keep.extend(idx.into_iter().take(n.max(1)));
    }
    Ok(keep.into_iter().map(|i| entries[i].clone()).collect())
}

/// Unlabeled pool of every clip whose class is not in `excluded`, with labels
/// stripped.
pub fn derive_mismatched_pool(manifest: &DatasetManifest, excluded: &[String]) -> Result<DatasetManifest> {
    if let Some(unknown) = excluded.iter().find(|c| !manifest.class_map.contains_key(*c)) {
        return Err(Error::InvalidConfig(format!("unknown class name {unknown:?}")));
    }
    let excluded: BTreeSet<&String> = excluded.iter().collect();
    let entries: Vec<ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| e.label.as_ref().is_none_or(|l| !excluded.contains(l)))
        .map(|e| ManifestEntry {
            label: None,
            ..e.clone()
        })
        .collect();
    if entries.is_empty() {
        return Err(Error::InvalidManifest(
            "excluding these classes leaves an empty unlabeled pool".into(),
        ));
    }
    Ok(DatasetManifest {
        entries,
        class_map: BTreeMap::new(),
        base_dir: manifest.base_dir.clone(),
    })
}

/// Strips every label, keeping paths and folds.
pub fn strip_labels(manifest: &DatasetManifest) -> DatasetManifest {
    DatasetManifest {
        entries: manifest
            .entries
            .iter()
            .map(|e| ManifestEntry {
                label: None,
                ..e.clone()
            })
            .collect(),
        class_map: BTreeMap::new(),
        base_dir: manifest.base_dir.clone(),
    }
}

/// Writes entries as a `filepath,label,fold` CSV.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let to_err = |e: csv::Error| Error::InvalidManifest(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record(["filepath", "label", "fold"]).map_err(to_err)?;
    for e in entries {
        let fold = e.fold.to_string();
        w.write_record([
            e.path.to_string_lossy().as_ref(),
            e.label.as_deref().unwrap_or(""),
            fold.as_str(),
        ])
        .map_err(to_err)?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
