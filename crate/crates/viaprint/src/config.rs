// SPDX-License-Identifier: Apache-2.0

//! Run configuration: one TOML file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use viaprint_core::detection::DetectionConfig;
use viaprint_core::extract::ExtractionConfig;
use viaprint_core::representative::RepresentativeConfig;
use viaprint_core::synthetic::{DatasetSpec, NoiseSpec, SynthLibrarySpec};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    /// Overrides every seed below when set.
    pub seed: Option<u64>,
    /// Crop margin in pixels; one unit when unset.
    pub margin: Option<u32>,
    pub extraction: ExtractionConfig,
    pub representatives: RepresentativeConfig,
    pub verification: VerificationConfig,
    pub analysis: AnalysisConfig,
    pub detection: DetectionConfig,
    pub synthetic: SyntheticConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerificationConfig {
    /// Overlays rendered per type, taken from the front of the holdout.
    pub overlays_per_type: usize,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        Self { overlays_per_type: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub top_k: usize,
    /// Padding added around every via when fitting scoring boxes, in units.
    pub box_pad: f64,
    pub dont_use_threshold: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            top_k: 20,
            box_pad: viaprint_core::MATCHING_RADIUS / 2.0,
            dont_use_threshold: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub library: SynthLibrarySpec,
    pub noise: NoiseSpec,
    pub dataset: DatasetSpec,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Usage(format!("{}: {e}", origin.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    /// Copies the global seed into every seeded section.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.representatives.seed = seed;
        self.synthetic.library.seed = seed;
        self.synthetic.dataset.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |e: viaprint_core::Error| Error::Usage(format!("config: {e}"));
        if self.workers == Some(0) {
            return Err(Error::Usage("workers must be at least 1".into()));
        }
        self.extraction.validate().map_err(usage)?;
        self.representatives.validate().map_err(usage)?;
        self.synthetic.noise.validate().map_err(usage)?;
        let d = &self.detection;
        if !(d.delta >= 0.0) || !(d.tie_epsilon >= 0.0) || d.max_shift.is_some_and(|s| !(s >= 0.0)) {
            return Err(Error::Usage("config: detection delta, tie_epsilon and max_shift must be nonnegative".into()));
        }
        if !(self.analysis.box_pad >= 0.0) {
            return Err(Error::Usage("config: analysis.box_pad must be nonnegative".into()));
        }
        Ok(())
    }
}
