//! Run configuration: one TOML file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use evi_core::data::synthetic::CorpusConfig;
use evi_core::data::MaskGeometry;
use evi_core::metrics::Region;
use evi_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset manifest (file or directory).
    pub manifest: Option<PathBuf>,
    /// Where a command writes its outputs.
    pub out_dir: Option<PathBuf>,
    /// Mask image; the geometry below is used when absent.
    pub mask_file: Option<PathBuf>,
    pub mask: MaskGeometry,
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub region: Region,
    /// Pixel value range of the stored frames.
    pub peak: f64,
    pub per_clip: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            region: Region::Full,
            peak: 1.0,
            per_clip: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.mask.validate()?;
        self.train.validate()?;
        if !(self.eval.peak.is_finite() && self.eval.peak > 0.0) {
            return Err(CliError::config(format!("peak {} must be positive", self.eval.peak)));
        }
        Ok(())
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| CliError::config("no output directory (use --out or out_dir)"))
    }

    pub fn manifest(&self) -> Result<&Path, CliError> {
        self.manifest
            .as_deref()
            .ok_or_else(|| CliError::config("no dataset manifest (use --manifest or manifest)"))
    }

    /// Writes the config to `dir/resolved_config.toml`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))?;
        let text = toml::to_string(self).map_err(|e| CliError::config(format!("config serialization: {e}")))?;
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, text).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

/// Sets `$dst` from an `Option` flag when the flag was given.
macro_rules! apply {
    ($($dst:expr => $src:expr),* $(,)?) => {
        $(if let Some(v) = $src.clone() {
            $dst = v.into();
        })*
    };
}
pub(crate) use apply;
