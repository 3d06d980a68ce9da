use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{normalize_score, read_container, FeatureBundle, FeatureDims};
use crate::error::{PamfnError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = PamfnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(PamfnError::Validation(format!(
                "unknown split `{other}` (expected train or test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    pub raw_score: f64,
    pub split: Split,
    /// Container path, relative to the manifest's directory unless absolute.
    pub path: String,
}

/// Dataset index stored as `manifest.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Task name used in evaluation reports.
    #[serde(default = "default_task")]
    pub name: String,
    pub score_ceiling_c: f64,
    #[serde(default)]
    pub feature_dims: FeatureDims,
    pub videos: Vec<VideoEntry>,
    #[serde(skip)]
    root: PathBuf,
}

fn default_task() -> String {
    "default".to_string()
}

impl Manifest {
    pub fn new(name: impl Into<String>, score_ceiling_c: f64, feature_dims: FeatureDims, videos: Vec<VideoEntry>) -> Self {
        Self {
            name: name.into(),
            score_ceiling_c,
            feature_dims,
            videos,
            root: PathBuf::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PamfnError::io(path, e))?;
        let mut m: Manifest =
            toml::from_str(&text).map_err(|e| PamfnError::format(path, e.to_string()))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PamfnError::Config(format!("manifest serialization: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| PamfnError::io(path, e))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn set_root(&mut self, root: impl Into<PathBuf>) {
        self.root = root.into();
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.score_ceiling_c > 0.0 && self.score_ceiling_c.is_finite()) {
            return Err(PamfnError::Validation(format!(
                "score_ceiling_c must be positive, got {}",
                self.score_ceiling_c
            )));
        }
        self.feature_dims.validate()?;
        let mut seen = HashSet::new();
        for v in &self.videos {
            if !seen.insert(v.id.as_str()) {
                return Err(PamfnError::Validation(format!("duplicate video id `{}`", v.id)));
            }
            normalize_score(v.raw_score, self.score_ceiling_c)
                .map_err(|e| PamfnError::Validation(format!("video `{}`: {e}", v.id)))?;
        }
        Ok(())
    }

    /// Training runs need at least one video in each split.
    pub fn require_both_splits(&self) -> Result<()> {
        for split in [Split::Train, Split::Test] {
            if !self.videos.iter().any(|v| v.split == split) {
                return Err(PamfnError::Validation(format!("the {split} split is empty")));
            }
        }
        Ok(())
    }

    pub fn entry(&self, id: &str) -> Result<&VideoEntry> {
        self.videos
            .iter()
            .find(|v| v.id == id)
            .ok_or_else(|| PamfnError::UnknownVideo(id.to_string()))
    }

    pub fn container_path(&self, entry: &VideoEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn load_bundle(&self, id: &str) -> Result<FeatureBundle> {
        let entry = self.entry(id)?;
        let path = self.container_path(entry);
        let [rgb, flow, audio] = read_container(&path)?;
        let label = normalize_score(entry.raw_score, self.score_ceiling_c)?;
        let bundle = FeatureBundle::new(entry.id.clone(), rgb, flow, audio, label)?;
        bundle.check_dims(&self.feature_dims)?;
        Ok(bundle)
    }

    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.videos
            .iter()
            .filter(|v| v.split == split)
            .map(|v| v.id.as_str())
            .collect()
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<FeatureBundle>> {
        self.ids(split).into_iter().map(|id| self.load_bundle(id)).collect()
    }

    /// `id,raw_score,split` rows for interoperability with other tooling.
    pub fn write_labels_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| PamfnError::format(path, e.to_string()))?;
        let err = |e: csv::Error| PamfnError::format(path, e.to_string());
        w.write_record(["id", "raw_score", "split"]).map_err(err)?;
        for v in &self.videos {
            w.write_record([v.id.clone(), v.raw_score.to_string(), v.split.to_string()])
                .map_err(err)?;
        }
        w.flush().map_err(|e| PamfnError::io(path, e))
    }
}

/// Both splits of one task, loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub task: String,
    pub dims: FeatureDims,
    pub train: Vec<FeatureBundle>,
    pub test: Vec<FeatureBundle>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = Manifest::load(manifest_path)?;
        Self::from_manifest(&manifest)
    }

    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        manifest.require_both_splits()?;
        Ok(Self {
            task: manifest.name.clone(),
            dims: manifest.feature_dims,
            train: manifest.load_split(Split::Train)?,
            test: manifest.load_split(Split::Test)?,
        })
    }

    pub fn split(&self, split: Split) -> &[FeatureBundle] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}
