//! Binary morphology on masks: connected components, erosion, dilation.

use std::collections::VecDeque;

use crate::volume::PathologyMask;

/// 26-connected components, each as a list of `[x, y, z]` voxel coordinates.
/// Components are ordered by their first voxel in x-fastest scan order.
pub fn connected_components(mask: &PathologyMask) -> Vec<Vec<[usize; 3]>> {
    let [sx, sy, sz] = mask.shape();
    let mut seen = vec![false; mask.data().len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for z in 0..sz {
        for y in 0..sy {
            for x in 0..sx {
                let i = mask.index(x, y, z);
                if seen[i] || mask.data()[i] == 0 {
                    continue;
                }
                seen[i] = true;
                queue.push_back([x, y, z]);
                let mut comp = Vec::new();
                while let Some(p) = queue.pop_front() {
                    comp.push(p);
                    for_each_neighbor(p, [sx, sy, sz], 1, |q| {
                        let j = mask.index(q[0], q[1], q[2]);
                        if !seen[j] && mask.data()[j] != 0 {
                            seen[j] = true;
                            queue.push_back(q);
                        }
                    });
                }
                out.push(comp);
            }
        }
    }
    out
}

/// Calls `f` for every in-bounds voxel within Chebyshev distance `r` of `p`, excluding `p`.
pub fn for_each_neighbor(p: [usize; 3], shape: [usize; 3], r: usize, mut f: impl FnMut([usize; 3])) {
    let lo = |a: usize| p[a].saturating_sub(r);
    let hi = |a: usize| (p[a] + r).min(shape[a] - 1);
    for z in lo(2)..=hi(2) {
        for y in lo(1)..=hi(1) {
            for x in lo(0)..=hi(0) {
                if [x, y, z] != p {
                    f([x, y, z]);
                }
            }
        }
    }
}

/// Erosion by a cube of half-width `r`. Voxels outside the volume count as background.
pub fn erode(mask: &PathologyMask, r: usize) -> PathologyMask {
    cube_filter(mask, r, true)
}

/// Dilation by a cube of half-width `r`.
pub fn dilate(mask: &PathologyMask, r: usize) -> PathologyMask {
    cube_filter(mask, r, false)
}

/// Separable cube min (`erode`) or max filter, one axis at a time.
fn cube_filter(mask: &PathologyMask, r: usize, erode: bool) -> PathologyMask {
    let shape = mask.shape();
    let mut cur: Vec<u8> = mask.data().to_vec();
    if r == 0 {
        return mask.clone();
    }
    let strides = [1, shape[0], shape[0] * shape[1]];
    for axis in 0..3 {
        let (n, st) = (shape[axis], strides[axis]);
        let mut next = cur.clone();
        for start in 0..cur.len() {
            if (start / st) % n != 0 {
                continue;
            }
            // prefix counts of set voxels along this line
            let mut prefix = Vec::with_capacity(n + 1);
            prefix.push(0usize);
            for i in 0..n {
                prefix.push(prefix[i] + usize::from(cur[start + i * st] != 0));
            }
            for i in 0..n {
                let (lo, hi) = (i.saturating_sub(r), (i + r).min(n - 1));
                let set = prefix[hi + 1] - prefix[lo];
                next[start + i * st] = u8::from(if erode {
                    i >= r && i + r < n && set == 2 * r + 1
                } else {
                    set > 0
                });
            }
        }
        cur = next;
    }
    PathologyMask::new(shape, cur).expect("binary")
}

/// Centroid of a voxel set in voxel coordinates.
pub fn centroid(voxels: &[[usize; 3]]) -> [f64; 3] {
    let n = voxels.len().max(1) as f64;
    let mut c = [0.0; 3];
    for v in voxels {
        for a in 0..3 {
            c[a] += v[a] as f64;
        }
    }
    c.map(|s| s / n)
}
