//! Patch classifier: four conv blocks, global average pooling and a linear head.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::nn::{leaves, Adam, AdamConfig, ConvLayer};
use crate::synthesis::LossHistory;
use crate::tensor::Tensor;
use crate::volume::{PathologyMask, Volume};
use crate::Scalar;

use super::cda::{apply_cda, CdaParams};
use super::DetectError;

pub const CHECKPOINT_KIND: &str = "classifier";

/// Patches scored per forward pass in [`Classifier::predict`].
const PREDICT_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    /// Patches are `(2r+1)^3` cubes around each candidate.
    pub patch_radius: usize,
    /// Output channels of the four conv blocks (strides 1, 2, 2, 1).
    pub channels: [usize; 4],
    pub leaky_slope: f64,
    pub adam: AdamConfig,
    pub steps: usize,
    /// Half positives, half negatives per batch.
    pub batch_size: usize,
    /// Real to synthetic positives when both are used.
    pub real_synthetic_ratio: [usize; 2],
    pub cda_enabled: bool,
    pub cda: CdaParams,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            patch_radius: 8,
            channels: [8, 16, 16, 32],
            leaky_slope: 0.2,
            adam: AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            steps: 300,
            batch_size: 16,
            real_synthetic_ratio: [1, 1],
            cda_enabled: false,
            cda: CdaParams::default(),
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        let bad = |m: String| Err(DetectError::Config(m));
        if self.patch_radius == 0 {
            return bad("classifier patch radius must be >= 1".into());
        }
        if self.channels.contains(&0) {
            return bad(format!("classifier channel widths must be >= 1: {:?}", self.channels));
        }
        if self.batch_size < 2 {
            return bad("classifier batch size must be >= 2".into());
        }
        if self.real_synthetic_ratio.iter().all(|&r| r == 0) {
            return bad("real:synthetic ratio cannot be 0:0".into());
        }
        if !self.leaky_slope.is_finite() {
            return bad("leaky slope must be finite".into());
        }
        self.adam.validate().map_err(DetectError::Config)?;
        self.cda.validate()
    }

    pub fn patch_side(&self) -> usize {
        2 * self.patch_radius + 1
    }

    /// Conv blocks then the 1x1x1 head applied after pooling.
    pub fn layers(&self) -> Vec<ConvLayer> {
        let c = self.channels;
        vec![
            ConvLayer::conv(1, c[0], 3, 1, 1),
            ConvLayer::conv(c[0], c[1], 3, 2, 1),
            ConvLayer::conv(c[1], c[2], 3, 2, 1),
            ConvLayer::conv(c[2], c[3], 3, 1, 1),
            ConvLayer::conv(c[3], 1, 1, 1, 0),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Classifier<T> {
    pub config: ClassifierConfig,
    pub params: Vec<Tensor<T>>,
    pub opt: Adam<T>,
    pub seed: u64,
    pub steps_done: u64,
}

impl<T: Scalar> Classifier<T> {
    pub fn new<R: Rng + ?Sized>(config: ClassifierConfig, seed: u64, rng: &mut R) -> Result<Self, DetectError> {
        config.validate()?;
        let params: Vec<Tensor<T>> = config.layers().iter().flat_map(|l| l.init(None, rng)).collect();
        let opt = Adam::new(config.adam, &params);
        Ok(Self { config, params, opt, seed, steps_done: 0 })
    }

    /// Logits `[N]` for a `[N, 1, D, D, D]` batch.
    pub fn forward<'t>(&self, params: &[Var<'t, T>], x: Var<'t, T>) -> Var<'t, T> {
        let layers = self.config.layers();
        let slope = T::of(self.config.leaky_slope);
        let mut h = x;
        for (i, l) in layers[..4].iter().enumerate() {
            h = l.apply(h, params[2 * i], params[2 * i + 1]).leaky_relu(slope);
        }
        layers[4].apply(h.spatial_mean(), params[8], params[9]).sum_per_sample()
    }

    /// Lesion probability of each patch.
    pub fn predict(&self, patches: &[Volume<T>]) -> Result<Vec<f64>, DetectError> {
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(PREDICT_BATCH) {
            self.check_shapes(chunk.iter())?;
            let tape = Tape::new();
            let p = leaves(&tape, &self.params);
            let refs: Vec<&Volume<T>> = chunk.iter().collect();
            let logits = self.forward(&p, tape.leaf(Tensor::from_volumes(&refs)));
            out.extend(logits.value().data().iter().map(|z| sigmoid(z.as_f64())));
        }
        Ok(out)
    }

    fn check_shapes<'a>(&self, mut patches: impl Iterator<Item = &'a Volume<T>>) -> Result<(), DetectError> {
        let side = self.config.patch_side();
        match patches.find(|p| p.shape() != [side; 3]) {
            Some(p) => Err(DetectError::PatchShape { expected: side, got: p.shape() }),
            None => Ok(()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(Tensor::all_finite)
    }

    pub fn save(&self, path: &Path) -> Result<(), DetectError> {
        save_checkpoint(path, &Checkpoint::new(CHECKPOINT_KIND, T::NAME, self.seed, self))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DetectError> {
        let ckpt: Checkpoint<Self> = load_checkpoint(path, CHECKPOINT_KIND, T::NAME)?;
        let model = ckpt.payload;
        model.config.validate()?;
        let expected: Vec<Vec<usize>> = model.config.layers().iter().flat_map(|l| [l.weight_shape(), vec![l.cout]]).collect();
        let got: Vec<Vec<usize>> = model.params.iter().map(|p| p.shape().to_vec()).collect();
        if expected != got {
            return Err(DetectError::Config(format!("classifier checkpoint parameter shapes {got:?} do not match its config")));
        }
        Ok(model)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One balanced training batch (positives first) and its 0/1 targets. Patches
/// are drawn with replacement and, with `cda_enabled`, augmented independently;
/// otherwise they are exact copies of pool entries.
pub fn draw_batch<T: Scalar, R: Rng + ?Sized>(
    cfg: &ClassifierConfig,
    positives: &[Volume<T>],
    negatives: &[Volume<T>],
    rng: &mut R,
) -> Result<(Vec<Volume<T>>, Vec<T>), DetectError> {
    let n_pos = cfg.batch_size / 2;
    let empty = PathologyMask::empty([cfg.patch_side(); 3]);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut targets = Vec::with_capacity(cfg.batch_size);
    for (pool, n, y) in [(positives, n_pos, 1.0), (negatives, cfg.batch_size - n_pos, 0.0)] {
        if pool.is_empty() {
            return Err(DetectError::EmptyClass(if y > 0.5 { "positive" } else { "negative" }));
        }
        for _ in 0..n {
            let p = &pool[rng.gen_range(0..pool.len())];
            batch.push(if cfg.cda_enabled { apply_cda(p, &empty, rng, &cfg.cda)?.0 } else { p.clone() });
            targets.push(T::of(y));
        }
    }
    Ok((batch, targets))
}

/// Trains `model` for `config.steps` steps on balanced batches and returns the
/// per-step `bce` and `accuracy` history. With `cda_enabled`, every drawn patch
/// is augmented independently.
pub fn train_classifier<T: Scalar, R: Rng + ?Sized>(
    model: &mut Classifier<T>,
    positives: &[Volume<T>],
    negatives: &[Volume<T>],
    rng: &mut R,
) -> Result<LossHistory, DetectError> {
    if positives.is_empty() {
        return Err(DetectError::EmptyClass("positive"));
    }
    if negatives.is_empty() {
        return Err(DetectError::EmptyClass("negative"));
    }
    model.check_shapes(positives.iter().chain(negatives))?;
    let cfg = model.config.clone();
    let mut history = LossHistory::default();
    for _ in 0..cfg.steps {
        let (batch, targets) = draw_batch(&cfg, positives, negatives, rng)?;
        let refs: Vec<&Volume<T>> = batch.iter().collect();
        let tape = Tape::new();
        let p = leaves(&tape, &model.params);
        let logits = model.forward(&p, tape.leaf(Tensor::from_volumes(&refs)));
        let correct = logits
            .value()
            .data()
            .iter()
            .zip(&targets)
            .filter(|(z, y)| (z.as_f64() > 0.0) == (y.as_f64() > 0.5))
            .count();
        let loss = logits.bce_with_logits(Tensor::new(vec![targets.len()], targets).into());
        let value = loss.item().as_f64();
        let step = model.steps_done;
        if !value.is_finite() {
            return Err(DetectError::NonFinite { step });
        }
        let grads: Vec<Tensor<T>> = tape.grad(loss, &p).iter().map(|g| (*g.value()).clone()).collect();
        model.opt.step(&mut model.params, &grads);
        if !model.all_finite() {
            return Err(DetectError::NonFinite { step });
        }
        history.push(step, "bce", value);
        history.push(step, "accuracy", correct as f64 / cfg.batch_size as f64);
        model.steps_done += 1;
    }
    Ok(history)
}
