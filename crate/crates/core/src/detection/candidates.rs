//! Peak extraction from the symmetry map and candidate patch cutting.

use serde::{Deserialize, Serialize};

use crate::morphology::for_each_neighbor;
use crate::volume::Volume;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// `(x, y, z)` voxel coordinates.
    pub position: [usize; 3],
    pub symmetry_score: f64,
}

/// Local maxima (26-neighbourhood, ties allowed) strictly above `threshold`,
/// thinned by greedy non-maximum suppression: in descending score order, a
/// peak is kept unless it lies closer than `min_separation_vox` to a kept one.
/// Equal scores are ordered by scan position.
pub fn propose_candidates<T: Scalar>(s: &Volume<T>, threshold: f64, min_separation_vox: f64) -> Vec<Candidate> {
    let shape = s.shape();
    let mut peaks = Vec::new();
    for z in 0..shape[2] {
        for y in 0..shape[1] {
            for x in 0..shape[0] {
                let v = s.get(x, y, z).as_f64();
                if !(v > threshold) {
                    continue;
                }
                let mut is_max = true;
                for_each_neighbor([x, y, z], shape, 1, |q| is_max &= s.get(q[0], q[1], q[2]).as_f64() <= v);
                if is_max {
                    peaks.push(Candidate { position: [x, y, z], symmetry_score: v });
                }
            }
        }
    }
    // stable sort keeps scan order among equal scores
    peaks.sort_by(|a, b| b.symmetry_score.total_cmp(&a.symmetry_score));
    non_max_suppression(peaks, min_separation_vox)
}

/// Greedy suppression of score-sorted candidates.
pub fn non_max_suppression(sorted: Vec<Candidate>, min_separation_vox: f64) -> Vec<Candidate> {
    let mut kept: Vec<Candidate> = Vec::new();
    for c in sorted {
        if kept.iter().all(|k| voxel_distance(k.position, c.position) >= min_separation_vox) {
            kept.push(c);
        }
    }
    kept
}

pub fn voxel_distance(a: [usize; 3], b: [usize; 3]) -> f64 {
    (0..3).map(|i| (a[i] as f64 - b[i] as f64).powi(2)).sum::<f64>().sqrt()
}

/// The `(2r+1)^3` cube centred on `center`, zero outside the volume.
pub fn extract_candidate_patch<T: Scalar>(v: &Volume<T>, center: [usize; 3], radius: usize) -> Volume<T> {
    let side = 2 * radius + 1;
    let shape = v.shape();
    Volume::from_fn([side; 3], v.spacing(), |x, y, z| {
        let p = [x, y, z];
        let mut q = [0usize; 3];
        for a in 0..3 {
            let c = center[a] as isize + p[a] as isize - radius as isize;
            if c < 0 || c >= shape[a] as isize {
                return T::zero();
            }
            q[a] = c as usize;
        }
        v.get(q[0], q[1], q[2])
    })
}
