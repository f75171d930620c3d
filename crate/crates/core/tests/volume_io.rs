mod common;

use pathosynth::volume::{
    clip_and_rescale, extract_patches, load_mask, load_raw, load_volume, percentile_sorted, save_mask, save_raw,
    save_volume, stitch_patches, PatchSpec, PathologyMask, Volume, VolumeError,
};
use pathosynth::Volume32;
use proptest::prelude::*;
use pathosynth::seed::rng_from_seed;
use rand::Rng;

fn random_volume(shape: [usize; 3], seed: u64) -> Volume<f64> {
    let mut rng = rng_from_seed(seed);
    Volume::from_fn(shape, [0.9, 1.1, 2.0], |_, _, _| rng.gen_range(-3.0..5.0))
}

#[test]
fn nifti_zeros_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("zeros.nii");
    let v = Volume32::zeros([4, 4, 4], [1.0; 3]);
    save_volume(&v, &path).unwrap();
    let back: Volume32 = load_volume(&path).unwrap();
    assert_eq!(back.shape(), [4, 4, 4]);
    assert!(back.data().iter().all(|&x| x == 0.0));
}

#[test]
fn nifti_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    for (name, shape) in [("a.nii", [5, 3, 7]), ("b.nii.gz", [8, 6, 4])] {
        let path = dir.path().join(name);
        let v = random_volume(shape, 3);
        save_volume(&v, &path).unwrap();
        let back: Volume<f64> = load_volume(&path).unwrap();
        assert_eq!(back, v);

        let v32: Volume<f32> = v.cast();
        save_volume(&v32, &path).unwrap();
        let back32: Volume<f32> = load_volume(&path).unwrap();
        assert_eq!(back32, v32);
    }
}

#[test]
fn mask_round_trip_as_u8() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.nii.gz");
    let m = PathologyMask::from_fn([6, 5, 4], |x, y, z| (x + 2 * y + z) % 3 == 0);
    save_mask(&m, [0.98, 0.98, 1.0], &path).unwrap();
    assert_eq!(load_mask(&path).unwrap(), m);
}

#[test]
fn time_dimension_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.nii");
    let arr = ndarray::Array4::<f32>::zeros((4, 4, 4, 2));
    nifti::writer::WriterOptions::new(&path).write_nifti(&arr).unwrap();
    let err = load_volume::<f32>(&path).unwrap_err();
    assert!(matches!(err, VolumeError::NotThreeD(_)), "{err}");
    assert!(err.to_string().contains("non-3D payload"));
}

#[test]
fn missing_and_corrupt_files_are_distinct_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.nii");
    assert!(matches!(load_volume::<f32>(&missing), Err(VolumeError::Missing(_))));
    let junk = dir.path().join("junk.nii");
    std::fs::write(&junk, b"definitely not a nifti header").unwrap();
    assert!(matches!(load_volume::<f32>(&junk), Err(VolumeError::CorruptHeader { .. })));
}

#[test]
fn raw_format_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.raw");
    let v: Volume<f32> = random_volume([3, 4, 5], 8).cast();
    save_raw(&v, &path).unwrap();
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("v.json")).unwrap()).unwrap();
    assert_eq!(side["shape"], serde_json::json!([3, 4, 5]));
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 60 * 4);
    // x-fastest little-endian
    assert_eq!(f32::from_le_bytes(bytes[4..8].try_into().unwrap()), v.get(1, 0, 0));
    assert_eq!(load_raw::<f32>(&path).unwrap(), v);
}

#[test]
fn rescale_of_ramp_uses_interpolated_percentile() {
    let v = Volume::new([10, 10, 10], [1.0; 3], (0..1000).map(|i| i as f64).collect()).unwrap();
    let sorted: Vec<f64> = (0..1000).map(|i| i as f64).collect();
    let hi = percentile_sorted(&sorted, 99.5);
    assert!((hi - 994.005).abs() < 1e-9);
    let out = clip_and_rescale(&v, 0.0, 99.5).unwrap();
    let (lo, top) = out.min_max();
    assert_eq!(lo, 0.0);
    assert_eq!(top, 1.0);
    assert_eq!(out.data()[0], 0.0);
    assert!((out.data()[994] - 994.0 / 994.005).abs() < 1e-12);
}

#[test]
fn constant_volume_rescales_to_zero() {
    let v = Volume::filled([3, 3, 3], [1.0; 3], 7.0f32);
    assert!(clip_and_rescale(&v, 0.0, 99.5).unwrap().data().iter().all(|&x| x == 0.0));
}

/// Independent percentile: rank r = p/100 * (n-1), interpolate the two neighbours.
fn oracle_percentile(values: &[f64], p: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let r = p / 100.0 * (s.len() as f64 - 1.0);
    let (i, f) = (r as usize, r - (r as usize) as f64);
    if i + 1 < s.len() {
        s[i] * (1.0 - f) + s[i + 1] * f
    } else {
        s[i]
    }
}

proptest! {
    #[test]
    fn rescale_matches_direct_formula(data in prop::collection::vec(-50.0f64..50.0, 125), lo_p in 0.0f64..40.0, hi_p in 60.0f64..=100.0) {
        let v = Volume::new([5, 5, 5], [1.0; 3], data.clone()).unwrap();
        let out = clip_and_rescale(&v, lo_p, hi_p).unwrap();
        let (lo, hi) = (oracle_percentile(&data, lo_p), oracle_percentile(&data, hi_p));
        for (o, d) in out.data().iter().zip(&data) {
            let expect = if hi > lo { (d.clamp(lo, hi) - lo) / (hi - lo) } else { 0.0 };
            prop_assert!((o - expect).abs() < 1e-9);
        }
        if data.iter().any(|&d| d >= hi) && hi > lo {
            prop_assert_eq!(out.min_max().1, 1.0);
        }
    }

    #[test]
    fn rescale_is_idempotent_on_unit_data(data in prop::collection::vec(0.0f64..=1.0, 27)) {
        let mut data = data;
        data[0] = 0.0;
        data[1] = 1.0;
        let v = Volume::new([3, 3, 3], [1.0; 3], data).unwrap();
        let out = clip_and_rescale(&v, 0.0, 100.0).unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn patch_origins_cover_every_slice(z in 1usize..80, pz in 1usize..40, overlap in 0.0f64..0.95) {
        prop_assume!(z >= pz);
        let spec = PatchSpec { patch_shape: [2, 2, pz], z_overlap_fraction: overlap };
        prop_assume!(spec.validate().is_ok());
        let origins = spec.z_origins(z).unwrap();
        prop_assert!(origins.windows(2).all(|w| w[0] < w[1]));
        let mut covered = vec![false; z];
        for o in &origins {
            for c in covered.iter_mut().skip(*o).take(pz) {
                *c = true;
            }
        }
        prop_assert!(covered.iter().all(|&c| c));
        let stride = spec.stride_z();
        let regular = (z - pz) / stride + 1;
        let tail = usize::from((regular - 1) * stride + pz < z);
        prop_assert_eq!(origins.len(), regular + tail);
    }

    #[test]
    fn extracted_mask_patches_stay_binary(seed in 0u64..1000) {
        let v = random_volume([4, 3, 20], seed);
        let mut rng = rng_from_seed(seed);
        let m = PathologyMask::from_fn([4, 3, 20], |_, _, _| rng.gen_bool(0.3));
        let spec = PatchSpec::new([4, 3, 8], 0.5).unwrap();
        for p in extract_patches(&v, &m, &spec).unwrap() {
            prop_assert!(p.mask.data().iter().all(|&b| b <= 1));
            prop_assert_eq!(p.mask, m.crop(p.origin, [4, 3, 8]));
        }
    }

    #[test]
    fn nifti_round_trip_property(seed in 0u64..10_000, x in 1usize..6, y in 1usize..6, z in 1usize..6) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.nii");
        let v = random_volume([x, y, z], seed);
        save_volume(&v, &path).unwrap();
        let back: Volume<f64> = load_volume(&path).unwrap();
        prop_assert_eq!(back, v);
    }
}

#[test]
fn patch_counts_follow_stride_and_tail_rule() {
    let spec = PatchSpec::new([2, 2, 32], 0.5).unwrap();
    assert_eq!(spec.stride_z(), 16);
    assert_eq!(spec.z_origins(32).unwrap(), vec![0]);
    assert_eq!(spec.z_origins(48).unwrap(), vec![0, 16]);
    assert_eq!(spec.z_origins(40).unwrap(), vec![0, 8]);
    assert!(matches!(spec.z_origins(31), Err(VolumeError::ZExtent { .. })));
}

#[test]
fn stitch_inverts_extract() {
    let v = random_volume([6, 5, 40], 11);
    let m = PathologyMask::empty(v.shape());
    let spec = PatchSpec::new([6, 5, 32], 0.5).unwrap();
    let patches = extract_patches(&v, &m, &spec).unwrap();
    let vols: Vec<_> = patches.iter().map(|p| p.volume.clone()).collect();
    let origins: Vec<_> = patches.iter().map(|p| p.origin).collect();
    let back = stitch_patches(&vols, &origins, v.shape()).unwrap();
    for (a, b) in back.data().iter().zip(v.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn stitch_half_overlap_of_zero_and_one() {
    let a = Volume::filled([2, 2, 4], [1.0; 3], 0.0f64);
    let b = Volume::filled([2, 2, 4], [1.0; 3], 1.0f64);
    let out = stitch_patches(&[a, b], &[[0, 0, 0], [0, 0, 2]], [2, 2, 6]).unwrap();
    let column: Vec<f64> = (0..6).map(|z| out.get(1, 1, z)).collect();
    assert_eq!(column, vec![0.0, 0.0, 0.5, 0.5, 1.0, 1.0]);
}

#[test]
fn stitch_of_perturbed_patches_matches_accumulation_oracle() {
    let shape = [3, 4, 20];
    let v = random_volume(shape, 5);
    let spec = PatchSpec::new([3, 4, 8], 0.5).unwrap();
    let patches = extract_patches(&v, &PathologyMask::empty(shape), &spec).unwrap();
    let mut rng = rng_from_seed(9);
    let perturbed: Vec<Volume<f64>> = patches
        .iter()
        .map(|p| {
            let mut v = p.volume.clone();
            v.data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-1.0..1.0));
            v
        })
        .collect();
    let origins: Vec<[usize; 3]> = patches.iter().map(|p| p.origin).collect();
    let out = stitch_patches(&perturbed, &origins, shape).unwrap();
    for z in 0..shape[2] {
        for y in 0..shape[1] {
            for x in 0..shape[0] {
                let (mut sum, mut n) = (0.0, 0);
                for (p, o) in perturbed.iter().zip(&origins) {
                    if z >= o[2] && z < o[2] + 8 {
                        sum += p.get(x, y, z - o[2]);
                        n += 1;
                    }
                }
                assert!((out.get(x, y, z) - sum / n as f64).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn preprocessing_arithmetic_is_exact() {
    for (name, ok) in common::prep::preprocessing_checks() {
        assert!(ok, "{name}");
    }
}
