use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detection::{CandidateConfig, ClassifierConfig, FRSTParams};
use crate::evaluation::{BootstrapConfig, OperatingPoints};
use crate::mask_sampler::LesionPrior;
use crate::phantom::PhantomConfig;
use crate::synthesis::SynthConfig;
use crate::volume::PatchSpec;

use super::ExperimentError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Existing dataset directory; phantoms are generated when unset.
    pub dataset_dir: Option<PathBuf>,
    /// Synthetic dataset directory used by the synthetic and combined arms.
    pub synthetic_dir: Option<PathBuf>,
    pub n_healthy: usize,
    pub n_pathological: usize,
    /// Share of real pathological subjects held out for evaluation.
    pub test_fraction: f64,
    pub low_percentile: f64,
    pub high_percentile: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset_dir: None,
            synthetic_dir: None,
            n_healthy: 6,
            n_pathological: 12,
            test_fraction: 0.5,
            low_percentile: 0.0,
            high_percentile: 99.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisTraining {
    pub steps: usize,
    /// Healthy-volume foreground used for lesion placement: intensity above this value.
    pub foreground_threshold: f64,
    /// Synthetic pathological volumes generated from each healthy volume.
    pub synthetic_per_healthy: usize,
}

impl Default for SynthesisTraining {
    fn default() -> Self {
        Self { steps: 2000, foreground_threshold: 0.1, synthetic_per_healthy: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub hit_radius_mm: f64,
    pub bootstrap: BootstrapConfig,
    pub operating_points: OperatingPoints,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { hit_radius_mm: 5.0, bootstrap: BootstrapConfig::default(), operating_points: OperatingPoints::default() }
    }
}

/// Every setting of a run. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub phantom: PhantomConfig,
    pub patch: PatchSpec,
    /// Prior for masks sampled on healthy volumes.
    pub lesion_prior: LesionPrior,
    pub synthesis: SynthConfig,
    pub synthesis_training: SynthesisTraining,
    pub frst: FRSTParams,
    pub candidates: CandidateConfig,
    pub classifier: ClassifierConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let patch = PatchSpec::default();
        Self {
            seed: 0,
            data: DataConfig::default(),
            phantom: PhantomConfig { shape: patch.patch_shape, ..PhantomConfig::default() },
            patch,
            lesion_prior: LesionPrior::default(),
            synthesis: SynthConfig::default(),
            synthesis_training: SynthesisTraining::default(),
            frst: FRSTParams::default(),
            candidates: CandidateConfig::default(),
            classifier: ClassifierConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(s).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the fully-resolved config as `effective_config.toml` in `dir`.
    pub fn write_effective(&self, dir: &Path) -> Result<(), ExperimentError> {
        let path = dir.join("effective_config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| ExperimentError::io(&path, e))
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        let d = &self.data;
        if !(0.0..1.0).contains(&d.test_fraction) {
            return bad(format!("test_fraction {} outside [0, 1)", d.test_fraction));
        }
        if !(0.0 <= d.low_percentile && d.low_percentile < d.high_percentile && d.high_percentile <= 100.0) {
            return bad(format!("percentiles [{}, {}] invalid", d.low_percentile, d.high_percentile));
        }
        self.phantom.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.patch.validate()?;
        self.lesion_prior.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.synthesis.validate(self.patch.patch_shape)?;
        let spacing = self.phantom.spacing;
        let min_spacing = spacing.iter().copied().fold(f64::INFINITY, f64::min);
        self.synthesis.generator.check_receptive_field(2.0 * self.lesion_prior.radius_range_mm[1] / min_spacing)?;
        let t = &self.synthesis_training;
        if !(0.0..1.0).contains(&t.foreground_threshold) {
            return bad(format!("foreground threshold {} outside [0, 1)", t.foreground_threshold));
        }
        self.frst.validate()?;
        self.candidates.validate()?;
        self.classifier.validate()?;
        let ps = self.phantom.shape;
        if self.data.dataset_dir.is_none() {
            let [px, py, pz] = self.patch.patch_shape;
            if ps[0] != px || ps[1] != py || ps[2] < pz {
                return bad(format!("phantom shape {ps:?} does not fit the patch shape {:?}", self.patch.patch_shape));
            }
        }
        if 2 * self.classifier.patch_radius + 1 > ps.iter().copied().min().unwrap_or(0) {
            return bad(format!("classifier patch radius {} too large for volumes of {ps:?}", self.classifier.patch_radius));
        }
        let e = &self.evaluation;
        if !(e.hit_radius_mm.is_finite() && e.hit_radius_mm >= 0.0) {
            return bad(format!("hit radius {} mm", e.hit_radius_mm));
        }
        e.bootstrap.validate()?;
        e.operating_points.validate()?;
        Ok(())
    }
}
