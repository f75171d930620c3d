//! Exact preprocessing arithmetic: percentile, patch origins and stitching.

use pathosynth::seed::rng_from_seed;
use pathosynth::volume::{clip_and_rescale, extract_patches, percentile_sorted, stitch_patches, PatchSpec, PathologyMask, Volume};
use rand::Rng;

/// Named pass/fail results of the preprocessing checks.
pub fn preprocessing_checks() -> Vec<(&'static str, bool)> {
    let ramp: Vec<f64> = (0..1000).map(|i| i as f64).collect();
    let hi = percentile_sorted(&ramp, 99.5);
    let v = Volume::new([10, 10, 10], [1.0; 3], ramp.clone()).unwrap();
    let out = clip_and_rescale(&v, 0.0, 99.5).unwrap();
    let rescale_ok = out.data().iter().zip(&ramp).all(|(&o, &r)| o == r.min(hi) / hi);

    let spec = PatchSpec::new([2, 2, 32], 0.5).unwrap();
    let origins = |z| spec.z_origins(z).unwrap();

    let mut rng = rng_from_seed(4);
    let vol = Volume::from_fn([5, 4, 40], [1.0; 3], |_, _, _| rng.gen_range(0.0..1.0f64));
    let pspec = PatchSpec::new([5, 4, 32], 0.5).unwrap();
    let patches = extract_patches(&vol, &PathologyMask::empty(vol.shape()), &pspec).unwrap();
    let vols: Vec<Volume<f64>> = patches.iter().map(|p| p.volume.clone()).collect();
    let starts: Vec<[usize; 3]> = patches.iter().map(|p| p.origin).collect();
    let back = stitch_patches(&vols, &starts, vol.shape()).unwrap();

    vec![
        ("percentile 99.5 of 0..999 is 994.005", (hi - 994.005).abs() < 1e-9),
        ("rescale clips at the percentile", rescale_ok),
        ("Z=32 gives origins [0]", origins(32) == vec![0]),
        ("Z=48 gives origins [0, 16]", origins(48) == vec![0, 16]),
        ("Z=40 gives origins [0, 8]", origins(40) == vec![0, 8]),
        ("stitch of extracted patches is exact", back.data() == vol.data()),
    ]
}
