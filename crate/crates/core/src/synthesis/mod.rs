//! Mask-guided dual-cycle lesion synthesis.
//!
//! `G_HP` turns a healthy patch plus a lesion mask into a pathological patch;
//! `G_PH` removes the lesions marked by a mask. Two Wasserstein critics, `D_P`
//! and `D_H`, judge the pathological and healthy domains. The HPH cycle
//! (healthy → pathological → healthy) is trained with cycle, identity and
//! adversarial losses; the PHP cycle replaces identity with the abnormality mask
//! loss that keeps tissue outside the mask unchanged.

mod losses;
mod networks;
mod train;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use losses::{
    abnormality_mask_loss, critic_loss, cycle_loss, gen_adv_loss, identity_loss, interpolate, l1, CriticLoss,
};
pub use networks::{Critic, DiscriminatorConfig, Generator, GeneratorConfig};
pub use train::{train, HealthyPool, LossHistory, LossRecord, PathologicalPool};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
use crate::mask_sampler::SamplerError;
use crate::nn::{leaves, Adam, AdamConfig};
use crate::seed::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;
use crate::volume::{extract_patches, stitch_patches, PatchSpec, PathologyMask, Volume, VolumeError};
use crate::Scalar;

pub const CHECKPOINT_KIND: &str = "synthesis";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthesis configuration: {0}")]
    Config(String),
    #[error("patch shape {got:?} does not match the model patch shape {expected:?}")]
    Shape { expected: [usize; 3], got: [usize; 3] },
    #[error("the {0} pool is empty")]
    EmptyPool(&'static str),
    #[error("non-finite value in loss term `{term}` at step {step}")]
    NonFinite { step: u64, term: String },
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cc: f64,
    pub lambda_id: f64,
    pub lambda_am: f64,
    pub lambda_gp: f64,
    pub critic_steps_per_gen_step: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_cc: 10.0, lambda_id: 5.0, lambda_am: 10.0, lambda_gp: 10.0, critic_steps_per_gen_step: 5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), SynthError> {
        let w = [self.lambda_cc, self.lambda_id, self.lambda_am, self.lambda_gp];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || self.critic_steps_per_gen_step == 0 {
            return Err(SynthError::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub generator: GeneratorConfig,
    pub critic: DiscriminatorConfig,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub batch_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            critic: DiscriminatorConfig::default(),
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            batch_size: 4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self, patch_xyz: [usize; 3]) -> Result<(), SynthError> {
        self.generator.validate()?;
        self.generator.check_patch(patch_xyz)?;
        self.critic.validate()?;
        self.critic.check_patch(patch_xyz)?;
        self.weights.validate()?;
        self.adam.validate().map_err(SynthError::Config)?;
        if self.batch_size == 0 {
            return Err(SynthError::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which generator to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// `G_HP`: insert lesions.
    HealthyToPathological,
    /// `G_PH`: remove lesions.
    PathologicalToHealthy,
}

/// The four networks, their optimizer state and the training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SynthModel<T> {
    pub config: SynthConfig,
    /// Training patch shape `(px, py, pz)`.
    pub patch_shape: [usize; 3],
    pub g_hp: Generator<T>,
    pub g_ph: Generator<T>,
    pub d_p: Critic<T>,
    pub d_h: Critic<T>,
    /// Adam state over `g_hp` then `g_ph` parameters.
    pub opt_gen: Adam<T>,
    /// Adam state over `d_p` then `d_h` parameters.
    pub opt_critic: Adam<T>,
    pub seed: u64,
    pub steps_done: u64,
}

/// Model parameters placed on a tape.
pub struct ModelVars<'t, T> {
    pub g_hp: Vec<Var<'t, T>>,
    pub g_ph: Vec<Var<'t, T>>,
    pub d_p: Vec<Var<'t, T>>,
    pub d_h: Vec<Var<'t, T>>,
}

pub struct LossTerm<'t, T> {
    pub name: &'static str,
    pub weight: f64,
    /// Unweighted value.
    pub value: Var<'t, T>,
}

/// Named loss terms and their weighted sum.
pub struct LossBreakdown<'t, T> {
    pub terms: Vec<LossTerm<'t, T>>,
    pub total: Var<'t, T>,
}

impl<'t, T: Scalar> LossBreakdown<'t, T> {
    fn new(terms: Vec<LossTerm<'t, T>>) -> Self {
        let total = terms
            .iter()
            .map(|t| t.value.scale(T::of(t.weight)))
            .reduce(|a, b| a + b)
            .expect("at least one loss term");
        Self { terms, total }
    }

    /// `(name, unweighted value)` pairs.
    pub fn values(&self) -> Vec<(&'static str, f64)> {
        self.terms.iter().map(|t| (t.name, t.value.item().as_f64())).collect()
    }
}

impl<T: Scalar> SynthModel<T> {
    pub fn new(config: SynthConfig, patch_shape: [usize; 3], seed: u64) -> Result<Self, SynthError> {
        config.validate(patch_shape)?;
        let mut rng = rng_from_seed(derive_seed(seed, "synthesis-init"));
        let g_hp = Generator::new(config.generator, &mut rng)?;
        let g_ph = Generator::new(config.generator, &mut rng)?;
        let d_p = Critic::new(config.critic, &mut rng)?;
        let d_h = Critic::new(config.critic, &mut rng)?;
        let opt_gen = Adam::new(config.adam, &[g_hp.params.clone(), g_ph.params.clone()].concat());
        let opt_critic = Adam::new(config.adam, &[d_p.params.clone(), d_h.params.clone()].concat());
        Ok(Self { config, patch_shape, g_hp, g_ph, d_p, d_h, opt_gen, opt_critic, seed, steps_done: 0 })
    }

    pub fn vars<'t>(&self, tape: &'t Tape<T>) -> ModelVars<'t, T> {
        ModelVars {
            g_hp: leaves(tape, &self.g_hp.params),
            g_ph: leaves(tape, &self.g_ph.params),
            d_p: leaves(tape, &self.d_p.params),
            d_h: leaves(tape, &self.d_h.params),
        }
    }

    pub fn generator(&self, direction: Direction) -> &Generator<T> {
        match direction {
            Direction::HealthyToPathological => &self.g_hp,
            Direction::PathologicalToHealthy => &self.g_ph,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.g_hp.all_finite() && self.g_ph.all_finite() && self.d_p.all_finite() && self.d_h.all_finite()
    }

    fn check_patch(&self, shape: [usize; 3]) -> Result<(), SynthError> {
        if shape != self.patch_shape {
            return Err(SynthError::Shape { expected: self.patch_shape, got: shape });
        }
        Ok(())
    }

    /// Applies one generator to a single patch.
    pub fn gen_forward(
        &self,
        direction: Direction,
        image: &Volume<T>,
        mask: &PathologyMask,
    ) -> Result<Volume<T>, SynthError> {
        mask.check_pairs_with(image)?;
        self.check_patch(image.shape())?;
        let x = Tensor::from_volumes(&[image]);
        let m = Tensor::from_channels(mask.shape(), &[mask.to_scalars()]);
        let out = self.generator(direction).apply(&x, &m);
        Ok(out.to_volume(0, 0, image.spacing()))
    }

    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        save_checkpoint(path, &Checkpoint::new(CHECKPOINT_KIND, T::NAME, self.seed, self))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let ckpt: Checkpoint<Self> = load_checkpoint(path, CHECKPOINT_KIND, T::NAME)?;
        let model = ckpt.payload;
        model.config.validate(model.patch_shape)?;
        if !model.all_finite() {
            return Err(SynthError::Config(format!("{}: non-finite parameters", path.display())));
        }
        Ok(model)
    }
}

/// Healthy → pathological → healthy cycle for `[N, 1, Z, Y, X]` batches.
///
/// Terms: `hph_cycle`, `hph_identity`, `hph_adversarial`.
pub fn hph_step<'t, T: Scalar>(
    model: &SynthModel<T>,
    vars: &ModelVars<'t, T>,
    x_h: Var<'t, T>,
    y_p: &Tensor<T>,
) -> LossBreakdown<'t, T> {
    let tape = x_h.tape();
    let y = tape.leaf(y_p.clone());
    let empty = tape.leaf(Tensor::zeros(y_p.shape().to_vec()));
    let x_tilde_p = model.g_hp.forward(&vars.g_hp, x_h, y);
    let recon = model.g_ph.forward(&vars.g_ph, x_tilde_p, y);
    let kept = model.g_ph.forward(&vars.g_ph, x_h, empty);
    let w = model.config.weights;
    LossBreakdown::new(vec![
        LossTerm { name: "hph_cycle", weight: w.lambda_cc, value: cycle_loss(x_h, recon) },
        LossTerm { name: "hph_identity", weight: w.lambda_id, value: identity_loss(x_h, kept) },
        LossTerm {
            name: "hph_adversarial",
            weight: 1.0,
            value: gen_adv_loss(model.d_p.forward(&vars.d_p, x_tilde_p)),
        },
    ])
}

/// Pathological → healthy → pathological cycle.
///
/// Terms: `php_cycle`, `php_abnormality_mask`, `php_adversarial`.
pub fn php_step<'t, T: Scalar>(
    model: &SynthModel<T>,
    vars: &ModelVars<'t, T>,
    x_p: Var<'t, T>,
    y_p: &Tensor<T>,
) -> LossBreakdown<'t, T> {
    let tape = x_p.tape();
    let y = tape.leaf(y_p.clone());
    let x_tilde_h = model.g_ph.forward(&vars.g_ph, x_p, y);
    let recon = model.g_hp.forward(&vars.g_hp, x_tilde_h, y);
    let w = model.config.weights;
    LossBreakdown::new(vec![
        LossTerm { name: "php_cycle", weight: w.lambda_cc, value: cycle_loss(x_p, recon) },
        LossTerm {
            name: "php_abnormality_mask",
            weight: w.lambda_am,
            value: abnormality_mask_loss(x_p, x_tilde_h, y_p),
        },
        LossTerm {
            name: "php_adversarial",
            weight: 1.0,
            value: gen_adv_loss(model.d_h.forward(&vars.d_h, x_tilde_h)),
        },
    ])
}

fn synthesize<T: Scalar>(
    model: &SynthModel<T>,
    direction: Direction,
    image: &Volume<T>,
    mask: &PathologyMask,
    spec: &PatchSpec,
) -> Result<Volume<T>, SynthError> {
    model.check_patch(spec.patch_shape)?;
    let patches = extract_patches(image, mask, spec)?;
    let mut outs = Vec::with_capacity(patches.len());
    let mut origins = Vec::with_capacity(patches.len());
    for p in &patches {
        outs.push(model.gen_forward(direction, &p.volume, &p.mask)?);
        origins.push(p.origin);
    }
    let stitched = stitch_patches(&outs, &origins, image.shape())?;
    Ok(stitched.map(|v| v.max(T::zero()).min(T::one())))
}

/// Inserts lesions where `y_p` is set, patch by patch.
pub fn synthesize_pathological<T: Scalar>(
    model: &SynthModel<T>,
    x_h: &Volume<T>,
    y_p: &PathologyMask,
    spec: &PatchSpec,
) -> Result<Volume<T>, SynthError> {
    synthesize(model, Direction::HealthyToPathological, x_h, y_p, spec)
}

/// Removes the lesions marked by `y_p`, patch by patch.
pub fn synthesize_healthy<T: Scalar>(
    model: &SynthModel<T>,
    x_p: &Volume<T>,
    y_p: &PathologyMask,
    spec: &PatchSpec,
) -> Result<Volume<T>, SynthError> {
    synthesize(model, Direction::PathologicalToHealthy, x_p, y_p, spec)
}

/// Draws `n` indices uniformly with replacement.
pub(crate) fn draw<R: Rng + ?Sized>(len: usize, n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..len)).collect()
}
