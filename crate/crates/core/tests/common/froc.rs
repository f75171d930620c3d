//! Hand-built FROC cases, a brute-force matching oracle and an exact bootstrap enumeration.

use pathosynth::detection::Detection;
use pathosynth::evaluation::{
    bootstrap_froc, froc, fp_at_sensitivity, match_detections, physical_distance, sensitivity_at_fp,
    BootstrapConfig, FrocCurve, FrocPoint, GroundTruthLesion, SubjectEval,
};
use pathosynth::seed::{rng_from_seed, SeededRng};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn det(id: &str, p: [f64; 3], score: f64) -> Detection {
    Detection { subject_id: id.into(), x: p[0], y: p[1], z: p[2], score }
}

pub fn subject(id: &str, dets: Vec<Detection>, lesions: &[[f64; 3]]) -> SubjectEval {
    SubjectEval {
        subject_id: id.into(),
        spacing: [1.0; 3],
        detections: dets,
        lesions: lesions.iter().map(|&c| GroundTruthLesion::new(id, c)).collect(),
    }
}

/// Subject A: one lesion, a hit at 0.9 and a far miss at 0.8. Subject B: one
/// lesion, a far miss at 0.7.
pub fn hand_case() -> Vec<SubjectEval> {
    vec![
        subject("A", vec![det("A", [10.0; 3], 0.9), det("A", [40.0; 3], 0.8)], &[[10.0; 3]]),
        subject("B", vec![det("B", [40.0; 3], 0.7)], &[[10.0; 3]]),
    ]
}

pub fn hand_case_points() -> Vec<(f64, f64)> {
    froc(&hand_case(), 5.0).unwrap().points.iter().map(|p| (p.fp_per_patient, p.sensitivity)).collect()
}

pub fn curve(points: &[(f64, f64)]) -> FrocCurve {
    FrocCurve {
        points: points
            .iter()
            .map(|&(f, s)| FrocPoint { fp_per_patient: f, sensitivity: s, ci_lo: None, ci_hi: None })
            .collect(),
    }
}

/// Largest deviation of the operating-point queries from hand interpolation on
/// `{(0, 0.5), (20, 1.0)}`, plus whether the unreachable query errors.
pub fn interpolation_max_error() -> (f64, bool) {
    let c = curve(&[(0.0, 0.5), (20.0, 1.0)]);
    let errs = [
        (sensitivity_at_fp(&c, 10.0) - 0.75).abs(),
        (sensitivity_at_fp(&c, -1.0) - 0.5).abs(),
        (sensitivity_at_fp(&c, 50.0) - 1.0).abs(),
        (fp_at_sensitivity(&c, 0.9).unwrap() - 16.0).abs(),
        fp_at_sensitivity(&c, 0.0).unwrap().abs(),
    ];
    let unreachable = fp_at_sensitivity(&curve(&[(0.0, 0.2), (5.0, 0.8)]), 0.9).is_err();
    (errs.into_iter().fold(0.0, f64::max), unreachable)
}

/// Size of a maximum matching between detections and lesions by exhaustive search.
fn brute_max_matching(near: &[Vec<bool>], i: usize, used: &mut Vec<bool>) -> usize {
    if i == near.len() {
        return 0;
    }
    let mut best = brute_max_matching(near, i + 1, used);
    for j in 0..used.len() {
        if near[i][j] && !used[j] {
            used[j] = true;
            best = best.max(1 + brute_max_matching(near, i + 1, used));
            used[j] = false;
        }
    }
    best
}

/// Number of random instances (up to 5 detections, 4 lesions) where the
/// matching is inconsistent or its TP count over any score prefix differs from
/// the maximum matching of that prefix.
pub fn matching_oracle_disagreements(trials: usize, seed: u64) -> usize {
    let mut rng = rng_from_seed(seed);
    let mut bad = 0;
    for _ in 0..trials {
        let nd = rng.gen_range(0..=5);
        let ng = rng.gen_range(0..=4);
        let spacing = [rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)];
        let radius = rng.gen_range(1.0..4.0);
        let pt = |rng: &mut SeededRng| [0; 3].map(|_: i32| rng.gen_range(0..6) as f64);
        let mut scores: Vec<f64> = (0..nd).map(|k| (k + 1) as f64 / 10.0).collect();
        scores.shuffle(&mut rng);
        let dets: Vec<Detection> = scores.iter().map(|&s| det("s", pt(&mut rng), s)).collect();
        let gts: Vec<GroundTruthLesion> = (0..ng).map(|_| GroundTruthLesion::new("s", pt(&mut rng))).collect();
        let m = match_detections(&dets, &gts, radius, spacing);
        let within = |i: usize, j: usize| physical_distance(dets[i].position(), gts[j].centroid(), spacing) <= radius;

        let mut is_tp = vec![false; nd];
        let mut lesion_used = vec![false; ng];
        let mut ok = true;
        for &(i, j) in &m.tp {
            ok &= within(i, j) && !is_tp[i] && !lesion_used[j];
            is_tp[i] = true;
            lesion_used[j] = true;
        }
        ok &= m.fp.len() + m.tp.len() == nd && m.fp.iter().all(|&i| !is_tp[i]);
        ok &= m.fn_ == (0..ng).filter(|&j| !lesion_used[j]).collect::<Vec<_>>();

        let mut order: Vec<usize> = (0..nd).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        for k in 0..=nd {
            let top = &order[..k];
            let near: Vec<Vec<bool>> = top.iter().map(|&i| (0..ng).map(|j| within(i, j)).collect()).collect();
            let tps = top.iter().filter(|&&i| is_tp[i]).count();
            ok &= tps == brute_max_matching(&near, 0, &mut vec![false; ng]);
        }
        if !ok {
            bad += 1;
        }
    }
    bad
}

/// Largest CI width over a one-subject bootstrap.
pub fn single_subject_ci_width(seed: u64) -> f64 {
    let s = vec![subject(
        "A",
        vec![det("A", [3.0; 3], 0.9), det("A", [20.0; 3], 0.6), det("A", [8.0; 3], 0.4)],
        &[[3.0; 3], [8.0; 3]],
    )];
    let c = bootstrap_froc(&s, 2.0, &BootstrapConfig { n_boot: 500, level: 0.95 }, &mut rng_from_seed(seed)).unwrap();
    c.points.iter().map(|p| p.ci_hi.unwrap() - p.ci_lo.unwrap()).fold(0.0, f64::max)
}

/// Subject A: one lesion, hit at 0.9 and miss at 0.6. Subject B: two lesions,
/// one hit at 0.8 and a miss at 0.7.
fn toy_pair() -> Vec<SubjectEval> {
    vec![
        subject("A", vec![det("A", [10.0; 3], 0.9), det("A", [30.0; 3], 0.6)], &[[10.0; 3]]),
        subject("B", vec![det("B", [5.0; 3], 0.8), det("B", [40.0; 3], 0.7)], &[[5.0; 3], [20.0; 3]]),
    ]
}

/// `(score, hit)` flags and lesion count of the toy subjects, by construction.
const TOY_FLAGS: [(&[(f64, bool)], usize); 2] = [(&[(0.9, true), (0.6, false)], 1), (&[(0.8, true), (0.7, false)], 2)];

fn oracle_curve(members: &[usize]) -> Vec<(f64, f64)> {
    let lesions: usize = members.iter().map(|&m| TOY_FLAGS[m].1).sum();
    let flags: Vec<(f64, bool)> = members.iter().flat_map(|&m| TOY_FLAGS[m].0.iter().copied()).collect();
    let mut thresholds: Vec<f64> = flags.iter().map(|f| f.0).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    thresholds
        .iter()
        .map(|&t| {
            let tp = flags.iter().filter(|f| f.0 >= t && f.1).count() as f64;
            let fp = flags.iter().filter(|f| f.0 >= t && !f.1).count() as f64;
            (fp / members.len() as f64, tp / lesions as f64)
        })
        .collect()
}

/// Sensitivity of `points` at FP rate `g`, at relative height `frac` of any vertical step there.
fn oracle_at(points: &[(f64, f64)], g: f64, frac: f64) -> f64 {
    let at: Vec<f64> = points.iter().filter(|p| p.0 == g).map(|p| p.1).collect();
    if at.is_empty() {
        return oracle_interp(points, g);
    }
    let (lo, hi) = (at[0], at[at.len() - 1]);
    lo + frac * (hi - lo)
}

fn oracle_interp(points: &[(f64, f64)], g: f64) -> f64 {
    if g < points[0].0 {
        return points[0].1;
    }
    let mut k = 0;
    while k + 1 < points.len() && points[k + 1].0 <= g {
        k += 1;
    }
    if k + 1 == points.len() {
        return points[k].1;
    }
    let ((f0, s0), (f1, s1)) = (points[k], points[k + 1]);
    s0 + (s1 - s0) * (g - f0) / (f1 - f0)
}

/// Quantile of a discrete distribution: the smallest value whose cumulative probability reaches `q`.
fn weighted_quantile(mut atoms: Vec<(f64, f64)>, q: f64) -> f64 {
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut acc = 0.0;
    for (v, p) in &atoms {
        acc += p;
        if acc >= q - 1e-12 {
            return *v;
        }
    }
    atoms.last().unwrap().0
}

/// Largest gap between the bootstrap band of the toy pair at `n_boot` and the
/// band from the exact distribution over the three resample multisets.
pub fn two_subject_enumeration_error(n_boot: usize, seed: u64) -> f64 {
    let level = 0.9;
    let c = bootstrap_froc(&toy_pair(), 5.0, &BootstrapConfig { n_boot, level }, &mut rng_from_seed(seed)).unwrap();
    let multisets: [(&[usize], f64); 3] = [(&[0, 0], 0.25), (&[0, 1], 0.5), (&[1, 1], 0.25)];
    let estimate = oracle_curve(&[0, 1]);
    let mut worst = 0.0f64;
    for (p, &(g, s)) in c.points.iter().zip(&estimate) {
        let run: Vec<f64> = estimate.iter().filter(|q| q.0 == g).map(|q| q.1).collect();
        let (bottom, top) = (run[0], run[run.len() - 1]);
        let frac = if top > bottom { (s - bottom) / (top - bottom) } else { 1.0 };
        let atoms: Vec<(f64, f64)> = multisets.iter().map(|&(m, w)| (oracle_at(&oracle_curve(m), g, frac), w)).collect();
        let lo = weighted_quantile(atoms.clone(), (1.0 - level) / 2.0).min(s);
        let hi = weighted_quantile(atoms, 1.0 - (1.0 - level) / 2.0).max(s);
        worst = worst.max((p.ci_lo.unwrap() - lo).abs()).max((p.ci_hi.unwrap() - hi).abs());
        worst = worst.max((p.fp_per_patient - g).abs()).max((p.sensitivity - s).abs());
    }
    if c.points.len() != estimate.len() {
        return f64::INFINITY;
    }
    worst
}
