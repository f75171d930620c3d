//! The experiment pipeline behind the command-line tool: phantom generation,
//! synthesis training and inference, per-arm detector training, detection and
//! FROC evaluation. Every stage reads its inputs from disk, derives its random
//! streams from the global seed and a stage label, and writes the effective
//! config next to its outputs.

mod config;
mod dataset;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{DataConfig, EvaluationConfig, ExperimentConfig, SynthesisTraining};
pub use dataset::{lesions_from_mask, split_train_test, Dataset, ManifestEntry, Origin, MANIFEST};

use crate::detection::{
    detect, extract_candidate_patch, read_detections_csv, train_classifier, write_detections_csv, Classifier,
    DetectError, Detection,
};
use crate::evaluation::{
    bootstrap_froc, compare_runs, physical_distance, read_ground_truth_csv, render_froc_svg, write_froc_csv,
    write_ground_truth_csv, write_report_csv, EvalError, FrocCurve, GroundTruthLesion, ReportRow, SubjectEval,
};
use crate::mask_sampler::{intensity_foreground, sample_pathology_mask, SamplerError};
use crate::phantom::{generate_dataset, PhantomError};
use crate::record::{Domain, SampleRecord};
use crate::seed::{derive_seed, rng_from_seed};
use crate::synthesis::{
    synthesize_healthy, synthesize_pathological, train, Direction, HealthyPool, LossHistory, PathologicalPool,
    SynthError, SynthModel,
};
use crate::volume::{clip_and_rescale, extract_patches, PathologyMask, Volume, VolumeError};

/// Working precision of the pipeline.
pub type S = f32;

pub const SYNTH_CHECKPOINT: &str = "synthesis.ckpt";
pub const CLASSIFIER_CHECKPOINT: &str = "classifier.ckpt";
pub const DETECTIONS: &str = "detections.csv";
pub const GROUND_TRUTH: &str = "ground_truth.csv";
pub const REPORT: &str = "report.csv";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Data(String),
}

impl ExperimentError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_owned(), source }
    }
}

type Result<T, E = ExperimentError> = std::result::Result<T, E>;

/// Training data mix of a detector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Real,
    Synthetic,
    Combined,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Real, Arm::Synthetic, Arm::Combined];

    /// Row label, e.g. `combined+cda`.
    pub fn label(self, cda: bool) -> String {
        if cda {
            format!("{self}+cda")
        } else {
            self.to_string()
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Real => "real",
            Arm::Synthetic => "synthetic",
            Arm::Combined => "combined",
        })
    }
}

impl FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "real" => Ok(Arm::Real),
            "synthetic" => Ok(Arm::Synthetic),
            "combined" => Ok(Arm::Combined),
            other => Err(format!("unknown arm `{other}` (expected real, synthetic or combined)")),
        }
    }
}

/// Parses `h2p` / `p2h`.
pub fn parse_direction(s: &str) -> Result<Direction, String> {
    match s {
        "h2p" => Ok(Direction::HealthyToPathological),
        "p2h" => Ok(Direction::PathologicalToHealthy),
        other => Err(format!("unknown direction `{other}` (expected h2p or p2h)")),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))
}

fn create_file(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| ExperimentError::io(path, e))
}

fn open_file(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| ExperimentError::io(path, e))
}

fn write_ground_truth(path: &Path, gts: &[GroundTruthLesion]) -> Result<()> {
    write_ground_truth_csv(gts, create_file(path)?)?;
    Ok(())
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruthLesion>> {
    Ok(read_ground_truth_csv(open_file(path)?)?)
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    Ok(read_detections_csv(open_file(path)?)?)
}

fn write_history(path: &Path, h: &LossHistory) -> Result<()> {
    h.write_csv(create_file(path)?)?;
    Ok(())
}

/// Intensity normalization applied to every volume a stage reads.
pub fn preprocess(cfg: &ExperimentConfig, mut r: SampleRecord<S>) -> Result<SampleRecord<S>> {
    r.volume = clip_and_rescale(&r.volume, cfg.data.low_percentile, cfg.data.high_percentile)?;
    Ok(r)
}

fn load_all(cfg: &ExperimentConfig, ds: &Dataset, entries: &[&ManifestEntry]) -> Result<Vec<SampleRecord<S>>> {
    entries.iter().map(|e| preprocess(cfg, ds.load(e)?)).collect()
}

/// Real pathological subjects split into (train, test).
pub fn real_split<'a>(cfg: &ExperimentConfig, ds: &'a Dataset) -> (Vec<&'a ManifestEntry>, Vec<&'a ManifestEntry>) {
    split_train_test(&ds.select(Domain::Pathological, Origin::Real), cfg.data.test_fraction)
}

/// Generates the phantom dataset into `out` with a ground-truth CSV of every lesion.
pub fn make_phantoms(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    cfg.validate()?;
    create_dir(out)?;
    let records =
        generate_dataset::<S>(cfg.data.n_healthy, cfg.data.n_pathological, &cfg.phantom, derive_seed(cfg.seed, "phantoms"))?;
    let gts: Vec<GroundTruthLesion> = records.iter().flat_map(lesions_from_mask).collect();
    let tagged: Vec<(SampleRecord<S>, Origin)> = records.into_iter().map(|r| (r, Origin::Real)).collect();
    let ds = Dataset::write(out, &tagged)?;
    write_ground_truth(&out.join(GROUND_TRUTH), &gts)?;
    let mut eff = cfg.clone();
    eff.data.dataset_dir = Some(out.to_owned());
    eff.write_effective(out)?;
    Ok(ds)
}

/// Trains (or, given `resume`, continues training) the synthesis model on the
/// healthy subjects and the real pathological training split.
pub fn train_synth(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    resume: Option<&Path>,
    out: &Path,
) -> Result<(SynthModel<S>, LossHistory)> {
    cfg.validate()?;
    create_dir(out)?;
    let spec = &cfg.patch;
    let healthy = load_all(cfg, ds, &ds.select(Domain::Healthy, Origin::Real))?;
    let (train_entries, _) = real_split(cfg, ds);
    let pathological = load_all(cfg, ds, &train_entries)?;
    if healthy.is_empty() {
        return Err(ExperimentError::Data("synthesis training needs healthy subjects".into()));
    }
    if pathological.is_empty() {
        return Err(ExperimentError::Data("synthesis training needs real pathological training subjects".into()));
    }
    let mut h_patches = Vec::new();
    for r in &healthy {
        h_patches.extend(extract_patches(&r.volume, &PathologyMask::empty(r.volume.shape()), spec)?.into_iter().map(|p| p.volume));
    }
    let mut p_patches = Vec::new();
    for r in &pathological {
        p_patches.extend(extract_patches(&r.volume, &r.mask, spec)?);
    }
    let h_pool = HealthyPool::new(h_patches, cfg.lesion_prior.clone(), cfg.synthesis_training.foreground_threshold)?;
    let p_pool = PathologicalPool::new(p_patches)?;
    let mut model = match resume {
        Some(path) => SynthModel::load(path)?,
        None => SynthModel::new(cfg.synthesis, spec.patch_shape, derive_seed(cfg.seed, "synthesis"))?,
    };
    let mut rng = rng_from_seed(derive_seed(cfg.seed, &format!("synthesis-train/{}", model.steps_done)));
    let history = train(&mut model, &h_pool, &p_pool, cfg.synthesis_training.steps, &mut rng)?;
    model.save(&out.join(SYNTH_CHECKPOINT))?;
    write_history(&out.join("synthesis_loss.csv"), &history)?;
    cfg.write_effective(out)?;
    Ok((model, history))
}

/// Applies a trained synthesis model to build a synthetic dataset.
///
/// `h2p` samples a lesion mask on every healthy subject (at least one lesion)
/// and inserts lesions there; `p2h` removes the annotated lesions of the real
/// pathological training subjects.
pub fn synthesize_dataset(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    model: &SynthModel<S>,
    direction: Direction,
    out: &Path,
) -> Result<Dataset> {
    cfg.validate()?;
    create_dir(out)?;
    let mut records = Vec::new();
    match direction {
        Direction::HealthyToPathological => {
            let mut prior = cfg.lesion_prior.clone();
            prior.count_range = [prior.count_range[0].max(1), prior.count_range[1].max(1)];
            for e in ds.select(Domain::Healthy, Origin::Real) {
                let r = preprocess(cfg, ds.load(e)?)?;
                for k in 0..cfg.synthesis_training.synthetic_per_healthy {
                    let id = format!("synthetic-{}-{k}", r.subject_id);
                    let mut rng = rng_from_seed(derive_seed(cfg.seed, &format!("synthesize/{id}")));
                    let fg = intensity_foreground(&r.volume, cfg.synthesis_training.foreground_threshold);
                    let mask = sample_pathology_mask(&fg, r.volume.spacing(), &prior, &mut rng)?;
                    let volume = synthesize_pathological(model, &r.volume, &mask, &cfg.patch)?;
                    records.push(SampleRecord { volume, mask, domain: Domain::Pathological, subject_id: id });
                }
            }
        }
        Direction::PathologicalToHealthy => {
            let (train_entries, _) = real_split(cfg, ds);
            for e in train_entries {
                let r = preprocess(cfg, ds.load(e)?)?;
                let volume = synthesize_healthy(model, &r.volume, &r.mask, &cfg.patch)?;
                let mask = PathologyMask::empty(volume.shape());
                records.push(SampleRecord { volume, mask, domain: Domain::Healthy, subject_id: format!("synthetic-{}", r.subject_id) });
            }
        }
    }
    let gts: Vec<GroundTruthLesion> = records.iter().flat_map(lesions_from_mask).collect();
    let tagged: Vec<(SampleRecord<S>, Origin)> = records.into_iter().map(|r| (r, Origin::Synthetic)).collect();
    let out_ds = Dataset::write(out, &tagged)?;
    write_ground_truth(&out.join(GROUND_TRUTH), &gts)?;
    let mut eff = cfg.clone();
    eff.data.synthetic_dir = Some(out.to_owned());
    eff.write_effective(out)?;
    Ok(out_ds)
}

/// Candidate patches of `records`, split by the hit criterion into lesion
/// (positive) and non-lesion (negative) patches.
pub fn labeled_candidate_patches(
    cfg: &ExperimentConfig,
    records: &[SampleRecord<S>],
) -> Result<(Vec<Volume<S>>, Vec<Volume<S>>)> {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    let radius = cfg.classifier.patch_radius;
    for r in records {
        let gts = lesions_from_mask(r);
        let spacing = r.volume.spacing();
        for c in cfg.candidates.propose(&r.volume, &cfg.frst)? {
            let p = c.position.map(|v| v as f64);
            let hit = gts.iter().any(|g| physical_distance(p, g.centroid(), spacing) <= cfg.evaluation.hit_radius_mm);
            let patch = extract_candidate_patch(&r.volume, c.position, radius);
            if hit {
                pos.push(patch);
            } else {
                neg.push(patch);
            }
        }
    }
    Ok((pos, neg))
}

/// The classifier training set of one arm.
#[derive(Clone, Debug)]
pub struct TrainingPool {
    pub positives: Vec<Volume<S>>,
    pub negatives: Vec<Volume<S>>,
    pub real_positives: usize,
    pub synthetic_positives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolSummary {
    pub arm: Arm,
    pub cda: bool,
    pub real_positives: usize,
    pub synthetic_positives: usize,
    pub negatives: usize,
}

/// Assembles an arm's pool. The combined arm keeps `a*k` real and `b*k`
/// synthetic positives for the `a:b` ratio, with `k` as large as both sources
/// allow; negatives come from all of the arm's volumes.
pub fn assemble_pool(
    cfg: &ExperimentConfig,
    arm: Arm,
    real: &[SampleRecord<S>],
    synthetic: &[SampleRecord<S>],
) -> Result<TrainingPool> {
    let need = |records: &[SampleRecord<S>], what: &str| {
        if records.is_empty() {
            Err(ExperimentError::Data(format!("arm `{arm}` needs {what} training subjects, found none")))
        } else {
            Ok(())
        }
    };
    match arm {
        Arm::Real => {
            need(real, "real pathological")?;
            let (positives, negatives) = labeled_candidate_patches(cfg, real)?;
            Ok(TrainingPool { real_positives: positives.len(), synthetic_positives: 0, positives, negatives })
        }
        Arm::Synthetic => {
            need(synthetic, "synthetic pathological")?;
            let (positives, negatives) = labeled_candidate_patches(cfg, synthetic)?;
            Ok(TrainingPool { real_positives: 0, synthetic_positives: positives.len(), positives, negatives })
        }
        Arm::Combined => {
            need(real, "real pathological")?;
            need(synthetic, "synthetic pathological")?;
            let (mut pr, nr) = labeled_candidate_patches(cfg, real)?;
            let (mut ps, ns) = labeled_candidate_patches(cfg, synthetic)?;
            let [a, b] = cfg.classifier.real_synthetic_ratio;
            let units = |n: usize, w: usize| if w == 0 { usize::MAX } else { n / w };
            let k = units(pr.len(), a).min(units(ps.len(), b));
            let mut rng = rng_from_seed(derive_seed(cfg.seed, "pool/combined"));
            pr.shuffle(&mut rng);
            ps.shuffle(&mut rng);
            pr.truncate(a * k);
            ps.truncate(b * k);
            let (real_positives, synthetic_positives) = (pr.len(), ps.len());
            let mut positives = pr;
            positives.extend(ps);
            let mut negatives = nr;
            negatives.extend(ns);
            Ok(TrainingPool { positives, negatives, real_positives, synthetic_positives })
        }
    }
}

/// Loads the pathological training subjects an arm draws from.
pub fn arm_sources(
    cfg: &ExperimentConfig,
    arm: Arm,
    real_ds: &Dataset,
    synth_ds: Option<&Dataset>,
) -> Result<(Vec<SampleRecord<S>>, Vec<SampleRecord<S>>)> {
    let real = if arm == Arm::Synthetic {
        Vec::new()
    } else {
        load_all(cfg, real_ds, &real_split(cfg, real_ds).0)?
    };
    let synthetic = if arm == Arm::Real {
        Vec::new()
    } else {
        let ds = synth_ds.ok_or_else(|| {
            ExperimentError::Data(format!("arm `{arm}` needs a synthetic dataset (data.synthetic_dir)"))
        })?;
        load_all(cfg, ds, &ds.select(Domain::Pathological, Origin::Synthetic))?
    };
    Ok((real, synthetic))
}

/// Trains the classifier of one arm, with augmentation iff `cda`.
pub fn train_detect(
    cfg: &ExperimentConfig,
    real_ds: &Dataset,
    synth_ds: Option<&Dataset>,
    arm: Arm,
    cda: bool,
    out: &Path,
) -> Result<(Classifier<S>, LossHistory, PoolSummary)> {
    cfg.validate()?;
    create_dir(out)?;
    let label = arm.label(cda);
    let (real, synthetic) = arm_sources(cfg, arm, real_ds, synth_ds)?;
    let pool = assemble_pool(cfg, arm, &real, &synthetic)?;
    let mut eff = cfg.clone();
    eff.classifier.cda_enabled = cda;
    let seed = derive_seed(cfg.seed, &format!("classifier/{label}"));
    let mut init_rng = rng_from_seed(derive_seed(seed, "init"));
    let mut model = Classifier::new(eff.classifier.clone(), seed, &mut init_rng)?;
    let mut rng = rng_from_seed(derive_seed(seed, "train"));
    let history = train_classifier(&mut model, &pool.positives, &pool.negatives, &mut rng)?;
    let summary = PoolSummary {
        arm,
        cda,
        real_positives: pool.real_positives,
        synthetic_positives: pool.synthetic_positives,
        negatives: pool.negatives.len(),
    };
    model.save(&out.join(CLASSIFIER_CHECKPOINT))?;
    write_history(&out.join("classifier_loss.csv"), &history)?;
    let path = out.join("training_pool.json");
    fs::write(&path, serde_json::to_string_pretty(&summary).expect("summary serializes"))
        .map_err(|e| ExperimentError::io(&path, e))?;
    eff.write_effective(out)?;
    Ok((model, history, summary))
}

/// Runs the detector on the held-out real pathological subjects and writes
/// their detections and ground truth.
pub fn detect_dataset(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    model: &Classifier<S>,
    out: &Path,
) -> Result<(Vec<Detection>, Vec<GroundTruthLesion>)> {
    cfg.validate()?;
    create_dir(out)?;
    let (_, test) = real_split(cfg, ds);
    if test.is_empty() {
        return Err(ExperimentError::Data("no held-out pathological subjects to run detection on".into()));
    }
    let (mut dets, mut gts) = (Vec::new(), Vec::new());
    for e in test {
        let r = preprocess(cfg, ds.load(e)?)?;
        dets.extend(detect(&r.volume, &r.subject_id, &cfg.frst, model, &cfg.candidates)?);
        gts.extend(lesions_from_mask(&r));
    }
    write_detections_csv(&dets, create_file(&out.join(DETECTIONS))?)?;
    write_ground_truth(&out.join(GROUND_TRUTH), &gts)?;
    cfg.write_effective(out)?;
    Ok((dets, gts))
}

/// Groups detections and lesions by subject. The evaluated subjects are every
/// id that appears in the ground truth or in any run's detections.
pub fn subject_evals(
    runs: &[(String, Vec<Detection>)],
    gts: &[GroundTruthLesion],
    spacing: &dyn Fn(&str) -> [f64; 3],
) -> Vec<Vec<SubjectEval>> {
    let ids: BTreeSet<&str> = gts
        .iter()
        .map(|g| g.subject_id.as_str())
        .chain(runs.iter().flat_map(|(_, d)| d.iter().map(|d| d.subject_id.as_str())))
        .collect();
    runs.iter()
        .map(|(_, dets)| {
            ids.iter()
                .map(|&id| SubjectEval {
                    subject_id: id.to_string(),
                    spacing: spacing(id),
                    detections: dets.iter().filter(|d| d.subject_id == id).cloned().collect(),
                    lesions: gts.iter().filter(|g| g.subject_id == id).cloned().collect(),
                })
                .collect()
        })
        .collect()
}

fn file_label(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// FROC curves with bootstrap bands for each labeled run, the comparison table
/// and the plot. Writes `froc_<label>.csv`, `report.csv` and `froc.svg`.
pub fn evaluate_runs(
    cfg: &ExperimentConfig,
    runs: &[(String, Vec<Detection>)],
    gts: &[GroundTruthLesion],
    spacing: &dyn Fn(&str) -> [f64; 3],
    out: &Path,
) -> Result<(Vec<(String, FrocCurve)>, Vec<ReportRow>)> {
    cfg.validate()?;
    create_dir(out)?;
    let ev = &cfg.evaluation;
    let mut curves = Vec::with_capacity(runs.len());
    for ((label, _), subjects) in runs.iter().zip(subject_evals(runs, gts, spacing)) {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, &format!("bootstrap/{label}")));
        let curve = bootstrap_froc(&subjects, ev.hit_radius_mm, &ev.bootstrap, &mut rng)?;
        write_froc_csv(&curve, create_file(&out.join(format!("froc_{}.csv", file_label(label))))?)?;
        curves.push((label.clone(), curve));
    }
    let rows = compare_runs(&curves, &ev.operating_points);
    write_report_csv(&rows, &ev.operating_points, create_file(&out.join(REPORT))?)?;
    let svg = out.join("froc.svg");
    fs::write(&svg, render_froc_svg(&curves)).map_err(|e| ExperimentError::io(&svg, e))?;
    cfg.write_effective(out)?;
    Ok((curves, rows))
}

/// Voxel spacing per subject: the manifest's when known, else the phantom spacing.
pub fn spacing_lookup<'a>(cfg: &'a ExperimentConfig, ds: Option<&'a Dataset>) -> impl Fn(&str) -> [f64; 3] + 'a {
    move |id| ds.and_then(|d| d.spacing_of(id)).unwrap_or(cfg.phantom.spacing)
}

/// All stages end to end: dataset (generated unless configured), synthesis
/// training, `h2p` synthesis, the six detector arms and the comparison report.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ReportRow>> {
    cfg.validate()?;
    create_dir(out)?;
    let mut eff = cfg.clone();
    let ds = match &cfg.data.dataset_dir {
        Some(dir) => Dataset::open(dir)?,
        None => {
            let dir = out.join("dataset");
            let ds = make_phantoms(cfg, &dir)?;
            eff.data.dataset_dir = Some(dir);
            ds
        }
    };
    let synth_ds = match &cfg.data.synthetic_dir {
        Some(dir) => Dataset::open(dir)?,
        None => {
            let (model, _) = train_synth(&eff, &ds, None, &out.join("synthesis"))?;
            let dir = out.join("synthetic");
            let s = synthesize_dataset(&eff, &ds, &model, Direction::HealthyToPathological, &dir)?;
            eff.data.synthetic_dir = Some(dir);
            s
        }
    };
    let mut runs = Vec::new();
    let mut gts = Vec::new();
    for cda in [false, true] {
        for arm in Arm::ALL {
            let label = arm.label(cda);
            let dir = out.join("arms").join(file_label(&label));
            let (model, _, _) = train_detect(&eff, &ds, Some(&synth_ds), arm, cda, &dir)?;
            let (dets, g) = detect_dataset(&eff, &ds, &model, &dir)?;
            gts = g;
            runs.push((label, dets));
        }
    }
    let (_, rows) = evaluate_runs(&eff, &runs, &gts, &spacing_lookup(&eff, Some(&ds)), out)?;
    eff.write_effective(out)?;
    Ok(rows)
}
