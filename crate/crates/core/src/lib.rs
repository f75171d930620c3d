//! Mask-guided lesion synthesis for cerebral microbleed detection, with a
//! radial-symmetry candidate detector, a 3D CNN classifier and FROC evaluation.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the working precision used by the command-line tool.

pub mod autodiff;
pub mod checkpoint;
pub mod detection;
pub mod evaluation;
pub mod experiment;
pub mod filters;
pub mod mask_sampler;
pub mod morphology;
pub mod nn;
pub mod phantom;
pub mod record;
pub mod scalar;
pub mod seed;
pub mod synthesis;
pub mod tensor;
pub mod volume;

pub use scalar::Scalar;

pub type Volume32 = volume::Volume<f32>;
pub type Volume64 = volume::Volume<f64>;
pub type SynthModel32 = synthesis::SynthModel<f32>;
pub type SampleRecord32 = record::SampleRecord<f32>;
