//! Dataset manifests: a palette plus (image, mask, split) records.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::palette::LabelPalette;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

/// Paths in records are relative to the manifest's directory unless absolute.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub palette: LabelPalette,
    pub records: Vec<ManifestRecord>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.palette.validate()?;
        let mut seen = HashSet::new();
        for r in &self.records {
            for p in [&r.image, &r.mask] {
                if !seen.insert(p) {
                    return Err(Error::Config(format!(
                        "path {} appears more than once in the manifest",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn records(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Record counts in (train, val, test) order.
    pub fn split_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for r in &self.records {
            c[r.split as usize] += 1;
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_counts() {
        let json = r#"{
            "palette": [{"name": "background", "rgb": [0, 0, 0]}, {"name": "road", "rgb": [0, 255, 0]}],
            "records": [
                {"image": "a.png", "mask": "a_mask.png", "split": "train"},
                {"image": "b.png", "mask": "b_mask.png", "split": "val"},
                {"image": "c.png", "mask": "c_mask.png", "split": "train"}
            ]
        }"#;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, json).unwrap();
        let m = DatasetManifest::load(&path).unwrap();
        assert_eq!(m.split_counts(), [2, 1, 0]);
        assert_eq!(m.resolve(Path::new("a.png")), dir.path().join("a.png"));
        assert_eq!(m.palette.len(), 2);
    }

    #[test]
    fn rejects_duplicates_and_bad_split() {
        let dup = r#"{"palette": [{"name": "bg", "rgb": [0,0,0]}],
            "records": [{"image": "a.png", "mask": "m.png", "split": "train"},
                        {"image": "a.png", "mask": "n.png", "split": "val"}]}"#;
        let m: DatasetManifest = serde_json::from_str(dup).unwrap();
        assert!(matches!(m.validate(), Err(Error::Config(_))));
        let bad = r#"{"palette": [{"name": "bg", "rgb": [0,0,0]}],
            "records": [{"image": "a.png", "mask": "m.png", "split": "holdout"}]}"#;
        assert!(serde_json::from_str::<DatasetManifest>(bad).is_err());
    }
}
