//! FROC analysis: detection-to-lesion matching, the threshold sweep, operating
//! points, subject-level bootstrap bands and the comparison report.

mod plot;

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use plot::render_froc_svg;

use crate::detection::Detection;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("sensitivity {0} unreachable: the curve peaks at {1}")]
    SensitivityUnreachable(f64, f64),
    #[error("no ground-truth lesions in the evaluated subjects")]
    NoLesions,
    #[error("no subjects to evaluate")]
    NoSubjects,
    #[error("invalid evaluation setting: {0}")]
    Config(String),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// A reference lesion; the centroid is in voxel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLesion {
    pub subject_id: String,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    #[serde(skip)]
    pub voxels: Option<Vec<[usize; 3]>>,
}

impl GroundTruthLesion {
    pub fn new(subject_id: &str, centroid: [f64; 3]) -> Self {
        Self { subject_id: subject_id.into(), x: centroid[0], y: centroid[1], z: centroid[2], voxels: None }
    }

    pub fn centroid(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// Everything needed to score one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectEval {
    pub subject_id: String,
    /// Voxel size in mm, for the physical hit distance.
    pub spacing: [f64; 3],
    pub detections: Vec<Detection>,
    pub lesions: Vec<GroundTruthLesion>,
}

/// Distance in mm between two voxel-space points.
pub fn physical_distance(a: [f64; 3], b: [f64; 3], spacing: [f64; 3]) -> f64 {
    (0..3).map(|i| ((a[i] - b[i]) * spacing[i]).powi(2)).sum::<f64>().sqrt()
}

/// Indices into the detection and lesion lists.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchResult {
    /// `(detection, lesion)` pairs.
    pub tp: Vec<(usize, usize)>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
}

/// Detection order used for matching and sweeping: descending score, then input order.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Matches detections to lesions in descending score order. A detection is a
/// TP iff it lies within `hit_radius_mm` of a lesion that can be assigned to it,
/// where earlier (higher-scoring) TPs may be moved to another lesion in their
/// own radius but never dropped. The TPs among the top `k` detections then form
/// a maximum matching of those `k` for every `k`.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruthLesion],
    hit_radius_mm: f64,
    spacing: [f64; 3],
) -> MatchResult {
    let near: Vec<Vec<usize>> = dets
        .iter()
        .map(|d| {
            (0..gts.len())
                .filter(|&j| physical_distance(d.position(), gts[j].centroid(), spacing) <= hit_radius_mm)
                .collect()
        })
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; gts.len()];
    let mut fp = Vec::new();
    for i in score_order(dets) {
        let mut seen = vec![false; gts.len()];
        if !augment(i, &near, &mut owner, &mut seen) {
            fp.push(i);
        }
    }
    let mut tp: Vec<(usize, usize)> = owner.iter().enumerate().filter_map(|(j, o)| o.map(|i| (i, j))).collect();
    tp.sort_unstable();
    fp.sort_unstable();
    let fn_ = (0..gts.len()).filter(|&j| owner[j].is_none()).collect();
    MatchResult { tp, fp, fn_ }
}

fn augment(i: usize, near: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
    for &j in &near[i] {
        if seen[j] {
            continue;
        }
        seen[j] = true;
        if owner[j].map_or(true, |k| augment(k, near, owner, seen)) {
            owner[j] = Some(i);
            return true;
        }
    }
    false
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub fp_per_patient: f64,
    pub sensitivity: f64,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
}

/// Points sorted by FPs per patient (and sensitivity within equal FP rates).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrocCurve {
    pub points: Vec<FrocPoint>,
}

/// Scored hit/miss flags of a subject, from its matching.
#[derive(Clone, Debug)]
struct ScoredSubject {
    /// `(score, is_tp)`
    flags: Vec<(f64, bool)>,
    lesions: usize,
}

fn score_subject(s: &SubjectEval, hit_radius_mm: f64) -> ScoredSubject {
    let m = match_detections(&s.detections, &s.lesions, hit_radius_mm, s.spacing);
    let mut is_tp = vec![false; s.detections.len()];
    for &(i, _) in &m.tp {
        is_tp[i] = true;
    }
    ScoredSubject {
        flags: s.detections.iter().zip(is_tp).map(|(d, t)| (d.score, t)).collect(),
        lesions: s.lesions.len(),
    }
}

/// Threshold sweep over the pooled flags of `subjects` (duplicates allowed).
fn sweep(subjects: &[&ScoredSubject]) -> Option<Vec<(f64, f64)>> {
    let lesions: usize = subjects.iter().map(|s| s.lesions).sum();
    if lesions == 0 {
        return None;
    }
    let n = subjects.len() as f64;
    let mut flags: Vec<(f64, bool)> = subjects.iter().flat_map(|s| s.flags.iter().copied()).collect();
    flags.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &(score, hit)) in flags.iter().enumerate() {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_at_threshold = flags.get(k + 1).map_or(true, |next| next.0 != score);
        if last_at_threshold {
            let p = (fp as f64 / n, tp as f64 / lesions as f64);
            if points.last() != Some(&p) {
                points.push(p);
            }
        }
    }
    if points.is_empty() {
        points.push((0.0, 0.0));
    }
    Some(points)
}

fn to_curve(points: Vec<(f64, f64)>) -> FrocCurve {
    FrocCurve {
        points: points
            .into_iter()
            .map(|(f, s)| FrocPoint { fp_per_patient: f, sensitivity: s, ci_lo: None, ci_hi: None })
            .collect(),
    }
}

fn check_radius(hit_radius_mm: f64) -> Result<(), EvalError> {
    if hit_radius_mm.is_finite() && hit_radius_mm >= 0.0 {
        Ok(())
    } else {
        Err(EvalError::Config(format!("hit radius {hit_radius_mm} mm")))
    }
}

/// FROC curve with one point per distinct score threshold (descending). A
/// set with no detections yields the single point `(0, 0)`.
pub fn froc(subjects: &[SubjectEval], hit_radius_mm: f64) -> Result<FrocCurve, EvalError> {
    check_radius(hit_radius_mm)?;
    if subjects.is_empty() {
        return Err(EvalError::NoSubjects);
    }
    let scored: Vec<ScoredSubject> = subjects.iter().map(|s| score_subject(s, hit_radius_mm)).collect();
    let refs: Vec<&ScoredSubject> = scored.iter().collect();
    sweep(&refs).map(to_curve).ok_or(EvalError::NoLesions)
}

fn interp_sensitivity(points: &[(f64, f64)], fp: f64) -> f64 {
    let first = points[0];
    if fp < first.0 {
        return first.1;
    }
    // last point at or below the query, taking the highest sensitivity reached there
    let k = points.partition_point(|p| p.0 <= fp) - 1;
    match points.get(k + 1) {
        None => points[k].1,
        Some(&(f1, s1)) => {
            let (f0, s0) = points[k];
            s0 + (fp - f0) / (f1 - f0) * (s1 - s0)
        }
    }
}

/// Sensitivity at `fp_rate` FPs per patient by linear interpolation, clamped to
/// the curve's end points.
pub fn sensitivity_at_fp(curve: &FrocCurve, fp_rate: f64) -> f64 {
    let pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.fp_per_patient, p.sensitivity)).collect();
    if pts.is_empty() {
        return 0.0;
    }
    interp_sensitivity(&pts, fp_rate)
}

/// Smallest interpolated FP rate at which the curve reaches `sens`. Queries at
/// or below zero sensitivity return 0.
pub fn fp_at_sensitivity(curve: &FrocCurve, sens: f64) -> Result<f64, EvalError> {
    if sens <= 0.0 {
        return Ok(0.0);
    }
    let pts = &curve.points;
    let Some(k) = pts.iter().position(|p| p.sensitivity >= sens) else {
        let max = pts.iter().map(|p| p.sensitivity).fold(0.0, f64::max);
        return Err(EvalError::SensitivityUnreachable(sens, max));
    };
    if k == 0 {
        return Ok(pts[0].fp_per_patient);
    }
    let (a, b) = (pts[k - 1], pts[k]);
    Ok(a.fp_per_patient + (sens - a.sensitivity) / (b.sensitivity - a.sensitivity) * (b.fp_per_patient - a.fp_per_patient))
}

/// Inverse-CDF empirical quantile of sorted samples: the smallest value whose
/// cumulative share reaches `q`.
pub fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let k = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapConfig {
    pub n_boot: usize,
    pub level: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { n_boot: 1000, level: 0.95 }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.n_boot == 0 || !(self.level > 0.0 && self.level < 1.0) {
            return Err(EvalError::Config(format!("bootstrap settings {self:?}")));
        }
        Ok(())
    }
}

/// `(fp rate, relative height)` of each point within the vertical run of
/// points sharing its FP rate; a lone point sits at the top (1).
fn run_positions(curve: &FrocCurve) -> Vec<(f64, f64)> {
    let pts = &curve.points;
    pts.iter()
        .map(|p| {
            let run = pts.iter().filter(|q| q.fp_per_patient == p.fp_per_patient).map(|q| q.sensitivity);
            let (lo, hi) = run.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), s| (a.min(s), b.max(s)));
            let frac = if hi > lo { (p.sensitivity - lo) / (hi - lo) } else { 1.0 };
            (p.fp_per_patient, frac)
        })
        .collect()
}

/// Lowest and highest sensitivity of the piecewise-linear curve at FP rate `fp`.
fn vertical_extent(points: &[(f64, f64)], fp: f64) -> (f64, f64) {
    let hi = interp_sensitivity(points, fp);
    // points are sorted, so the first one at `fp` is the bottom of any vertical run
    points.iter().find(|p| p.0 == fp).map_or((hi, hi), |p| (p.1, hi))
}

/// Point-estimate FROC with a subject-level bootstrap band. Each resample draws
/// subjects with replacement and is evaluated at the point estimate's FP rates,
/// at the same relative height where several points share a rate; resamples
/// without any lesion are skipped. The band is the empirical
/// `(1-level)/2` and `1-(1-level)/2` quantiles, widened where needed to contain
/// the point estimate.
pub fn bootstrap_froc<R: Rng + ?Sized>(
    subjects: &[SubjectEval],
    hit_radius_mm: f64,
    cfg: &BootstrapConfig,
    rng: &mut R,
) -> Result<FrocCurve, EvalError> {
    cfg.validate()?;
    let mut curve = froc(subjects, hit_radius_mm)?;
    let scored: Vec<ScoredSubject> = subjects.iter().map(|s| score_subject(s, hit_radius_mm)).collect();
    let grid = run_positions(&curve);
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.n_boot); grid.len()];
    for _ in 0..cfg.n_boot {
        let pick: Vec<&ScoredSubject> = (0..scored.len()).map(|_| &scored[rng.gen_range(0..scored.len())]).collect();
        if let Some(points) = sweep(&pick) {
            for (&(g, frac), s) in grid.iter().zip(samples.iter_mut()) {
                let (lo, hi) = vertical_extent(&points, g);
                s.push(lo + frac * (hi - lo));
            }
        }
    }
    let (lo_q, hi_q) = ((1.0 - cfg.level) / 2.0, 1.0 - (1.0 - cfg.level) / 2.0);
    for (p, mut s) in curve.points.iter_mut().zip(samples) {
        if s.is_empty() {
            (p.ci_lo, p.ci_hi) = (Some(p.sensitivity), Some(p.sensitivity));
            continue;
        }
        s.sort_by(f64::total_cmp);
        let lo = empirical_quantile(&s, lo_q).min(p.sensitivity);
        let hi = empirical_quantile(&s, hi_q).max(p.sensitivity);
        (p.ci_lo, p.ci_hi) = (Some(lo), Some(hi));
    }
    Ok(curve)
}

pub fn write_froc_csv<W: Write>(curve: &FrocCurve, w: W) -> Result<(), EvalError> {
    let mut wr = csv::Writer::from_writer(w);
    for p in &curve.points {
        wr.serialize(p)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_froc_csv<R: Read>(r: R) -> Result<FrocCurve, EvalError> {
    let points = csv::Reader::from_reader(r).deserialize().collect::<csv::Result<_>>()?;
    Ok(FrocCurve { points })
}

pub fn write_ground_truth_csv<W: Write>(gts: &[GroundTruthLesion], w: W) -> Result<(), EvalError> {
    let mut wr = csv::Writer::from_writer(w);
    for g in gts {
        wr.serialize(g)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_ground_truth_csv<R: Read>(r: R) -> Result<Vec<GroundTruthLesion>, EvalError> {
    Ok(csv::Reader::from_reader(r).deserialize().collect::<csv::Result<_>>()?)
}

/// Fixed operating points reported per run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatingPoints {
    pub fp_rate: f64,
    pub sensitivity: f64,
}

impl Default for OperatingPoints {
    fn default() -> Self {
        Self { fp_rate: 10.0, sensitivity: 0.9 }
    }
}

impl OperatingPoints {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.fp_rate.is_finite() && self.fp_rate >= 0.0 && (0.0..=1.0).contains(&self.sensitivity)) {
            return Err(EvalError::Config(format!("operating points {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub sens_at_fp: f64,
    /// `None` when the run never reaches the target sensitivity.
    pub fp_at_sens: Option<f64>,
}

pub fn compare_runs(runs: &[(String, FrocCurve)], ops: &OperatingPoints) -> Vec<ReportRow> {
    runs.iter()
        .map(|(label, c)| ReportRow {
            label: label.clone(),
            sens_at_fp: sensitivity_at_fp(c, ops.fp_rate),
            fp_at_sens: fp_at_sensitivity(c, ops.sensitivity).ok(),
        })
        .collect()
}

fn trim_number(v: f64) -> String {
    let s = format!("{v}");
    s.strip_suffix(".0").map(str::to_string).unwrap_or(s)
}

/// Column headers, e.g. `label, sens@10FP, FP@90%sens`.
pub fn report_header(ops: &OperatingPoints) -> [String; 3] {
    [
        "label".into(),
        format!("sens@{}FP", trim_number(ops.fp_rate)),
        format!("FP@{}%sens", trim_number((ops.sensitivity * 100.0 * 1e9).round() / 1e9)),
    ]
}

/// Unreachable operating points are written as empty cells.
pub fn write_report_csv<W: Write>(rows: &[ReportRow], ops: &OperatingPoints, w: W) -> Result<(), EvalError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(report_header(ops))?;
    for r in rows {
        let fp = r.fp_at_sens.map(|v| v.to_string()).unwrap_or_default();
        wr.write_record([r.label.clone(), r.sens_at_fp.to_string(), fp])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_report_csv<R: Read>(r: R) -> Result<Vec<ReportRow>, EvalError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<Option<f64>, EvalError> {
            let s = rec.get(i).unwrap_or("");
            if s.is_empty() {
                return Ok(None);
            }
            s.parse().map(Some).map_err(|_| EvalError::Config(format!("bad report value `{s}`")))
        };
        let sens = num(1)?.ok_or_else(|| EvalError::Config("missing sensitivity".into()))?;
        rows.push(ReportRow { label: rec.get(0).unwrap_or("").to_string(), sens_at_fp: sens, fp_at_sens: num(2)? });
    }
    Ok(rows)
}
