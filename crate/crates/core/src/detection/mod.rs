//! Two-stage lesion detector: radial-symmetry candidate proposal followed by a
//! patch classifier, plus classical data augmentation for classifier training.

mod candidates;
mod cda;
mod classifier;
mod frst;

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use candidates::{extract_candidate_patch, non_max_suppression, propose_candidates, voxel_distance, Candidate};
pub use cda::{apply_cda, apply_transform, CdaParams, CdaTransform};
pub use classifier::{draw_batch, train_classifier, Classifier, ClassifierConfig, CHECKPOINT_KIND};
pub use frst::{frst3d, gradient, FRSTParams};

use crate::checkpoint::CheckpointError;
use crate::volume::{Volume, VolumeError};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("invalid detection configuration: {0}")]
    Config(String),
    #[error("no {0} training patches")]
    EmptyClass(&'static str),
    #[error("classifier patches must be {expected}^3 voxels, got {got:?}")]
    PatchShape { expected: usize, got: [usize; 3] },
    #[error("non-finite classifier loss or parameters at step {step}")]
    NonFinite { step: u64 },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("detections CSV: {0}")]
    Csv(#[from] csv::Error),
}

/// Peak extraction settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CandidateConfig {
    /// Peaks must exceed this fraction of the symmetry map maximum.
    pub threshold_fraction: f64,
    pub min_separation_vox: f64,
    /// Keep at most this many of the strongest candidates per volume.
    pub max_candidates: usize,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        Self { threshold_fraction: 0.01, min_separation_vox: 3.0, max_candidates: 100 }
    }
}

impl CandidateConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        let ok = (0.0..1.0).contains(&self.threshold_fraction)
            && self.min_separation_vox.is_finite()
            && self.min_separation_vox >= 0.0
            && self.max_candidates > 0;
        if ok {
            Ok(())
        } else {
            Err(DetectError::Config(format!("invalid candidate settings {self:?}")))
        }
    }

    /// Candidates of `v`, strongest first.
    pub fn propose<T: Scalar>(&self, v: &Volume<T>, frst: &FRSTParams) -> Result<Vec<Candidate>, DetectError> {
        self.validate()?;
        let s = frst3d(v, frst)?;
        let max = s.data().iter().map(|x| x.as_f64()).fold(0.0, f64::max);
        if max <= 0.0 {
            return Ok(Vec::new());
        }
        let mut c = propose_candidates(&s, self.threshold_fraction * max, self.min_separation_vox);
        c.truncate(self.max_candidates);
        Ok(c)
    }
}

/// A scored detection; `position` is in voxel coordinates `(x, y, z)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub subject_id: String,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub score: f64,
}

impl Detection {
    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// Proposes candidates on `v` and scores each with the classifier.
pub fn detect<T: Scalar>(
    v: &Volume<T>,
    subject_id: &str,
    frst: &FRSTParams,
    model: &Classifier<T>,
    cfg: &CandidateConfig,
) -> Result<Vec<Detection>, DetectError> {
    let candidates = cfg.propose(v, frst)?;
    let radius = model.config.patch_radius;
    let patches: Vec<Volume<T>> = candidates.iter().map(|c| extract_candidate_patch(v, c.position, radius)).collect();
    let scores = model.predict(&patches)?;
    Ok(candidates
        .iter()
        .zip(scores)
        .map(|(c, score)| Detection {
            subject_id: subject_id.to_string(),
            x: c.position[0] as f64,
            y: c.position[1] as f64,
            z: c.position[2] as f64,
            score,
        })
        .collect())
}

pub fn write_detections_csv<W: Write>(dets: &[Detection], w: W) -> Result<(), DetectError> {
    let mut wr = csv::Writer::from_writer(w);
    for d in dets {
        wr.serialize(d)?;
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_detections_csv<R: Read>(r: R) -> Result<Vec<Detection>, DetectError> {
    let dets: Vec<Detection> = csv::Reader::from_reader(r).deserialize().collect::<csv::Result<_>>()?;
    if let Some(d) = dets.iter().find(|d| !(0.0..=1.0).contains(&d.score)) {
        return Err(DetectError::Config(format!("detection score {} outside [0, 1]", d.score)));
    }
    Ok(dets)
}
