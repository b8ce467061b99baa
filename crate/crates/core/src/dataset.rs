//! Labeled image inventories, stratified splits and cross-dataset pairing.
//!
//! Manifests are CSV files with the header `id,path,label`, where `label` is
//! `glaucoma` or `normal` and `path` is relative to the manifest's directory.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path} line {line}: malformed row: {detail}")]
    MalformedRow { path: String, line: u64, detail: String },
    #[error("manifest {path} line {line}: unknown label `{token}` (expected glaucoma or normal)")]
    UnknownLabel { path: String, line: u64, token: String },
    #[error("manifest {path} line {line}: duplicate id `{id}`")]
    DuplicateId { path: String, line: u64, id: String },
    #[error("manifest {path} line {line}: image file {file} does not exist")]
    MissingImage { path: String, line: u64, file: String },
    #[error("manifest {path} has no entries")]
    Empty { path: String },
    #[error("split error: {0}")]
    Split(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("split file {path}: {detail}")]
    SplitFile { path: String, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal = 0,
    Glaucoma = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::Normal),
            1 => Some(Label::Glaucoma),
            _ => None,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Glaucoma => "glaucoma",
        }
    }

    fn parse(token: &str) -> Option<Self> {
        match token.trim() {
            "glaucoma" => Some(Label::Glaucoma),
            "normal" => Some(Label::Normal),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Deserialize)]
struct Row {
    id: String,
    path: String,
    label: String,
}

impl DatasetManifest {
    /// Parses a manifest; the dataset name is the file stem.
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let display = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: display.clone(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for record in reader.deserialize::<Row>() {
            let row = record.map_err(|e| DatasetError::MalformedRow {
                path: display.clone(),
                line: e.position().map(|p| p.line()).unwrap_or(0),
                detail: e.to_string(),
            })?;
            // Header is line 1.
            let line = entries.len() as u64 + 2;
            let label = Label::parse(&row.label).ok_or_else(|| DatasetError::UnknownLabel {
                path: display.clone(),
                line,
                token: row.label.clone(),
            })?;
            if row.id.is_empty() || row.path.is_empty() {
                return Err(DatasetError::MalformedRow {
                    path: display.clone(),
                    line,
                    detail: "empty id or path".into(),
                });
            }
            if !seen.insert(row.id.clone()) {
                return Err(DatasetError::DuplicateId {
                    path: display.clone(),
                    line,
                    id: row.id,
                });
            }
            let file = base.join(&row.path);
            if !file.exists() {
                return Err(DatasetError::MissingImage {
                    path: display.clone(),
                    line,
                    file: file.display().to_string(),
                });
            }
            entries.push(ManifestEntry {
                id: row.id,
                path: file,
                label,
            });
        }
        if entries.is_empty() {
            return Err(DatasetError::Empty { path: display });
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        Ok(Self { name, entries })
    }

    /// Writes a manifest CSV with paths relative to the file's directory
    /// when possible.
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut out = String::from("id,path,label\n");
        for e in &self.entries {
            let rel = e.path.strip_prefix(base).unwrap_or(&e.path);
            out.push_str(&format!("{},{},{}\n", e.id, rel.display(), e.label.token()));
        }
        fs::write(path, out).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    /// Stratified hold-out split. Per class: shuffle, take
    /// `floor(train_frac * n)` for training (remainder to test), then move
    /// `floor(val_frac_of_train * n_train)` of those into validation.
    pub fn stratified_split(
        &self,
        train_frac: f64,
        val_frac_of_train: f64,
        seed: u64,
    ) -> Result<SplitAssignment, DatasetError> {
        if !(train_frac > 0.0 && train_frac < 1.0) {
            return Err(DatasetError::Split(format!("train fraction must lie in (0, 1), got {train_frac}")));
        }
        if !(0.0..1.0).contains(&val_frac_of_train) {
            return Err(DatasetError::Split(format!(
                "validation fraction must lie in [0, 1), got {val_frac_of_train}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut split = SplitAssignment {
            seed,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for label in [Label::Glaucoma, Label::Normal] {
            let mut ids: Vec<&str> = self
                .entries
                .iter()
                .filter(|e| e.label == label)
                .map(|e| e.id.as_str())
                .collect();
            if val_frac_of_train > 0.0 && ids.len() < 2 {
                return Err(DatasetError::Split(format!(
                    "class {} has {} item(s); validation needs at least 2",
                    label.token(),
                    ids.len()
                )));
            }
            ids.shuffle(&mut rng);
            let n_train = floor_count(train_frac, ids.len());
            let n_val = floor_count(val_frac_of_train, n_train);
            let (train, test) = ids.split_at(n_train);
            let (val, train) = train.split_at(n_val);
            split.train.extend(train.iter().map(|s| s.to_string()));
            split.val.extend(val.iter().map(|s| s.to_string()));
            split.test.extend(test.iter().map(|s| s.to_string()));
        }
        Ok(split)
    }

    pub fn subset(&self, ids: &[String]) -> Result<DatasetManifest, DatasetError> {
        let entries = ids
            .iter()
            .map(|id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| DatasetError::Split(format!("id `{id}` not in manifest {}", self.name)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(DatasetManifest {
            name: self.name.clone(),
            entries,
        })
    }
}

/// `floor(frac * n)` robust to representation error (0.7 * 10 is 7).
fn floor_count(frac: f64, n: usize) -> usize {
    ((frac * n as f64) + 1e-9).floor() as usize
}

/// Disjoint train/val/test id sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitPart {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitPart::Train),
            "val" => Ok(SplitPart::Val),
            "test" => Ok(SplitPart::Test),
            other => Err(format!("unknown split part `{other}` (train, val, test)")),
        }
    }
}

impl SplitAssignment {
    pub fn part(&self, part: SplitPart) -> &[String] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Val => &self.val,
            SplitPart::Test => &self.test,
        }
    }

    /// Checks disjointness and that the parts cover exactly the manifest.
    pub fn validate_against(&self, m: &DatasetManifest) -> Result<(), DatasetError> {
        let mut seen = BTreeSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(id.as_str()) {
                return Err(DatasetError::Split(format!("id `{id}` appears in two parts")));
            }
            if m.get(id).is_none() {
                return Err(DatasetError::Split(format!("id `{id}` not in manifest {}", m.name)));
            }
        }
        if seen.len() != m.len() {
            return Err(DatasetError::Split(format!(
                "split covers {} of {} manifest ids",
                seen.len(),
                m.len()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain data")
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_json()).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| DatasetError::SplitFile {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }
}

/// Train on one full dataset, evaluate on another.
#[derive(Debug, Clone)]
pub struct CrossDatasetPair {
    pub train: DatasetManifest,
    pub test: DatasetManifest,
}

impl CrossDatasetPair {
    pub fn train_name(&self) -> &str {
        &self.train.name
    }

    pub fn test_name(&self) -> &str {
        &self.test.name
    }
}

pub fn cross_dataset_pair(train: DatasetManifest, test: DatasetManifest) -> Result<CrossDatasetPair, DatasetError> {
    if train.name == test.name {
        return Err(DatasetError::Usage(format!(
            "cross-dataset evaluation needs two different datasets, both are `{}`",
            train.name
        )));
    }
    if test.is_empty() {
        return Err(DatasetError::Usage(format!("test dataset `{}` is empty", test.name)));
    }
    if train.is_empty() {
        return Err(DatasetError::Usage(format!("train dataset `{}` is empty", train.name)));
    }
    Ok(CrossDatasetPair { train, test })
}
