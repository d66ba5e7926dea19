//! Corpus manifest: which clips exist, where their frames and landmark files
//! live, and which split they belong to.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::list_frames;
use super::synthetic::CorpusConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub name: String,
    /// Frame directory, relative to the manifest.
    pub frames: PathBuf,
    /// Landmark file, relative to the manifest.
    pub landmarks: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipManifest {
    /// Minimum frame count of every clip.
    pub clip_length: usize,
    pub height: usize,
    pub width: usize,
    pub clips: Vec<ClipEntry>,
    /// Generator settings when the corpus is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<CorpusConfig>,
    #[serde(skip)]
    root: PathBuf,
}

impl ClipManifest {
    pub fn new(root: impl Into<PathBuf>, clip_length: usize, height: usize, width: usize, clips: Vec<ClipEntry>) -> Self {
        Self {
            clip_length,
            height,
            width,
            clips,
            synthetic: None,
            root: root.into(),
        }
    }

    pub fn file_name() -> &'static str {
        "manifest.toml"
    }

    /// Loads `path`, or `path/manifest.toml` when `path` is a directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(Self::file_name())
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut m: Self = toml::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", file.display())))?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self) -> Result<()> {
        let file = self.root.join(Self::file_name());
        let text = toml::to_string(self).map_err(|e| Error::Manifest(e.to_string()))?;
        std::fs::write(&file, text).map_err(|e| Error::io(&file, e))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn frames_dir(&self, entry: &ClipEntry) -> PathBuf {
        self.root.join(&entry.frames)
    }

    pub fn landmarks_path(&self, entry: &ClipEntry) -> PathBuf {
        self.root.join(&entry.landmarks)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ClipEntry> {
        self.clips.iter().filter(move |c| c.split == split)
    }

    /// Checks that every clip directory holds at least `clip_length` frames
    /// and that every landmark file exists.
    pub fn validate(&self) -> Result<()> {
        if self.clips.is_empty() {
            return Err(Error::Manifest("manifest lists no clips".into()));
        }
        for c in &self.clips {
            let n = list_frames(&self.frames_dir(c))?.len();
            if n < self.clip_length {
                return Err(Error::Manifest(format!(
                    "clip {} has {n} frames, manifest requires {}",
                    c.name, self.clip_length
                )));
            }
            let lm = self.landmarks_path(c);
            if !lm.is_file() {
                return Err(Error::Manifest(format!("clip {}: missing landmark file {}", c.name, lm.display())));
            }
        }
        Ok(())
    }
}
