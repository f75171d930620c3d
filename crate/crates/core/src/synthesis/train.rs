//! Sample pools, the alternating critic/generator loop and the loss history.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::mask_sampler::{intensity_foreground, placement_region, sample_in_region, LesionPrior};
use crate::tensor::Tensor;
use crate::volume::{Patch, PathologyMask, Volume};
use crate::Scalar;

use super::{critic_loss, draw, hph_step, php_step, SynthError, SynthModel};

/// Sampling attempts before a mask-sampling failure is reported.
const MASK_RETRIES: usize = 16;

/// Healthy patches with their lesion placement regions.
#[derive(Clone, Debug)]
pub struct HealthyPool<T> {
    patches: Vec<Volume<T>>,
    regions: Vec<PathologyMask>,
    prior: LesionPrior,
}

impl<T: Scalar> HealthyPool<T> {
    /// The placement region of each patch is the intensity foreground (`> threshold`)
    /// eroded by the prior margin. Patches with no room for a lesion are dropped.
    pub fn new(patches: Vec<Volume<T>>, prior: LesionPrior, foreground_threshold: f64) -> Result<Self, SynthError> {
        prior.validate()?;
        let (mut kept, mut regions) = (Vec::new(), Vec::new());
        for p in patches {
            let region = placement_region(&intensity_foreground(&p, foreground_threshold), &prior);
            if !region.is_empty() {
                kept.push(p);
                regions.push(region);
            }
        }
        if kept.is_empty() {
            return Err(SynthError::EmptyPool("healthy"));
        }
        Ok(Self { patches: kept, regions, prior })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patch_shape(&self) -> [usize; 3] {
        self.patches[0].shape()
    }

    /// `n` random patches, each with a freshly sampled lesion mask.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<(&Volume<T>, PathologyMask)>, SynthError> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut last = None;
            for _ in 0..MASK_RETRIES {
                let i = rng.gen_range(0..self.patches.len());
                let p = &self.patches[i];
                match sample_in_region(&self.regions[i], p.spacing(), &self.prior, rng) {
                    Ok(m) => {
                        last = Some(Ok((p, m)));
                        break;
                    }
                    Err(e) => last = Some(Err(e)),
                }
            }
            out.push(last.expect("at least one attempt")?);
        }
        Ok(out)
    }
}

/// Pathological patches with their annotated masks.
#[derive(Clone, Debug)]
pub struct PathologicalPool<T> {
    patches: Vec<(Volume<T>, PathologyMask)>,
}

impl<T: Scalar> PathologicalPool<T> {
    /// Keeps the patches that contain lesion voxels, or all of them if none do.
    pub fn new(patches: Vec<Patch<T>>) -> Result<Self, SynthError> {
        if patches.is_empty() {
            return Err(SynthError::EmptyPool("pathological"));
        }
        let any = patches.iter().any(|p| !p.mask.is_empty());
        let patches = patches
            .into_iter()
            .filter(|p| !any || !p.mask.is_empty())
            .map(|p| (p.volume, p.mask))
            .collect();
        Ok(Self { patches })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patch_shape(&self) -> [usize; 3] {
        self.patches[0].0.shape()
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&(Volume<T>, PathologyMask)> {
        draw(self.patches.len(), n, rng).into_iter().map(|i| &self.patches[i]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub term: String,
    pub value: f64,
}

/// Per-step loss values in the order they were recorded.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory {
    pub records: Vec<LossRecord>,
}

impl LossHistory {
    pub fn push(&mut self, step: u64, term: &str, value: f64) {
        self.records.push(LossRecord { step, term: term.to_string(), value });
    }

    pub fn values(&self, term: &str) -> Vec<f64> {
        self.records.iter().filter(|r| r.term == term).map(|r| r.value).collect()
    }

    pub fn terms(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.term) {
                out.push(r.term.clone());
            }
        }
        out
    }

    /// CSV with header `step,term,value`.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.records {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> csv::Result<Self> {
        let records = csv::Reader::from_reader(r).deserialize().collect::<csv::Result<_>>()?;
        Ok(Self { records })
    }
}

fn stack<T: Scalar>(vols: &[&Volume<T>]) -> Tensor<T> {
    Tensor::from_volumes(vols)
}

fn stack_masks<T: Scalar>(masks: &[&PathologyMask]) -> Tensor<T> {
    let items: Vec<Vec<T>> = masks.iter().map(|m| m.to_scalars()).collect();
    Tensor::from_channels(masks[0].shape(), &items)
}

fn check(step: u64, term: &str, value: f64) -> Result<f64, SynthError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(SynthError::NonFinite { step, term: term.to_string() })
    }
}

/// Runs `steps` generator updates, each preceded by
/// `critic_steps_per_gen_step` critic updates.
///
/// Every step records the critic terms of its last critic update, the
/// generator terms of both cycles and the two totals. A non-finite loss or
/// parameter aborts training with an error naming it.
pub fn train<T: Scalar, R: Rng + ?Sized>(
    model: &mut SynthModel<T>,
    healthy: &HealthyPool<T>,
    pathological: &PathologicalPool<T>,
    steps: usize,
    rng: &mut R,
) -> Result<LossHistory, SynthError> {
    for shape in [healthy.patch_shape(), pathological.patch_shape()] {
        model.check_patch(shape)?;
    }
    let n = model.config.batch_size;
    let weights = model.config.weights;
    let mut history = LossHistory::default();
    for _ in 0..steps {
        let step = model.steps_done;
        let mut critic_terms = Vec::new();
        for _ in 0..weights.critic_steps_per_gen_step {
            let hs = healthy.sample(n, rng)?;
            let ps = pathological.sample(n, rng);
            let reals_p = pathological.sample(n, rng);
            let x_h = stack(&hs.iter().map(|h| h.0).collect::<Vec<_>>());
            let y_s: Tensor<T> = stack_masks(&hs.iter().map(|h| &h.1).collect::<Vec<_>>());
            let x_p = stack(&ps.iter().map(|p| &p.0).collect::<Vec<_>>());
            let y_p: Tensor<T> = stack_masks(&ps.iter().map(|p| &p.1).collect::<Vec<_>>());
            let real_p = stack(&reals_p.iter().map(|p| &p.0).collect::<Vec<_>>());
            let fake_p = model.g_hp.apply(&x_h, &y_s);
            let fake_h = model.g_ph.apply(&x_p, &y_p);

            let tape = Tape::new();
            let vars = model.vars(&tape);
            let lp = critic_loss(&tape, |x| model.d_p.forward(&vars.d_p, x), &real_p, &fake_p, weights.lambda_gp, rng);
            let lh = critic_loss(&tape, |x| model.d_h.forward(&vars.d_h, x), &x_h, &fake_h, weights.lambda_gp, rng);
            let total = lp.total + lh.total;
            critic_terms = vec![
                ("critic_p_wasserstein", lp.wasserstein.item().as_f64()),
                ("critic_p_gradient_penalty", lp.penalty.item().as_f64()),
                ("critic_h_wasserstein", lh.wasserstein.item().as_f64()),
                ("critic_h_gradient_penalty", lh.penalty.item().as_f64()),
                ("critic_total", total.item().as_f64()),
            ];
            for (name, v) in &critic_terms {
                check(step, name, *v)?;
            }
            let wrt: Vec<_> = vars.d_p.iter().chain(&vars.d_h).copied().collect();
            let grads: Vec<Tensor<T>> = tape.grad(total, &wrt).iter().map(|g| (*g.value()).clone()).collect();
            let mut params = [model.d_p.params.clone(), model.d_h.params.clone()].concat();
            model.opt_critic.step(&mut params, &grads);
            let split = model.d_p.params.len();
            model.d_h.params = params.split_off(split);
            model.d_p.params = params;
        }

        let hs = healthy.sample(n, rng)?;
        let ps = pathological.sample(n, rng);
        let x_h = stack(&hs.iter().map(|h| h.0).collect::<Vec<_>>());
        let y_s: Tensor<T> = stack_masks(&hs.iter().map(|h| &h.1).collect::<Vec<_>>());
        let x_p = stack(&ps.iter().map(|p| &p.0).collect::<Vec<_>>());
        let y_p: Tensor<T> = stack_masks(&ps.iter().map(|p| &p.1).collect::<Vec<_>>());
        let tape = Tape::new();
        let vars = model.vars(&tape);
        let hph = hph_step(model, &vars, tape.leaf(x_h), &y_s);
        let php = php_step(model, &vars, tape.leaf(x_p), &y_p);
        let total = hph.total + php.total;
        let mut gen_terms = hph.values();
        gen_terms.extend(php.values());
        gen_terms.push(("generator_total", total.item().as_f64()));
        for (name, v) in &gen_terms {
            check(step, name, *v)?;
        }
        let wrt: Vec<_> = vars.g_hp.iter().chain(&vars.g_ph).copied().collect();
        let grads: Vec<Tensor<T>> = tape.grad(total, &wrt).iter().map(|g| (*g.value()).clone()).collect();
        let mut params = [model.g_hp.params.clone(), model.g_ph.params.clone()].concat();
        model.opt_gen.step(&mut params, &grads);
        let split = model.g_hp.params.len();
        model.g_ph.params = params.split_off(split);
        model.g_hp.params = params;
        if !model.all_finite() {
            return Err(SynthError::NonFinite { step, term: "parameters".into() });
        }

        for (name, v) in critic_terms.into_iter().chain(gen_terms) {
            history.push(step, name, v);
        }
        model.steps_done += 1;
    }
    Ok(history)
}
