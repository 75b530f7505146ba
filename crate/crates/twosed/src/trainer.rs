//! Desk-scale training of the deterministic block maps with a softmax
//! cross-entropy head and Adam updates.

use crate::data::Dataset;
use crate::netmodel::{
    block_backward, block_forward_cached, param_count, sample_params, Activation, BlockCache,
    ModelError, ModelSpec, SamplingScheme,
};
use crate::rng::{self, tag};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("incompatible training setup: {0}")]
    Incompatible(String),
}

/// Optimizer and loop configuration.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Subsample size drawn from the dataset before training; 0 keeps all.
    pub n_train: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 10,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            n_train: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate >= 0.0) || self.batch_size == 0 {
            return Err(TrainError::Incompatible(
                "learning rate must be >= 0 and batch size >= 1".into(),
            ));
        }
        for beta in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&beta) {
                return Err(TrainError::Incompatible(format!(
                    "Adam betas must lie in (0,1), got {beta}"
                )));
            }
        }
        Ok(())
    }
}

/// Adam with bias correction over one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One optimizer step; moment buffers are sized on first use.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Per-epoch mean training cross-entropy plus final accuracy on the
/// training subset.
#[derive(Debug, Clone, PartialEq)]
pub struct LossCurve {
    pub epoch_losses: Vec<f64>,
    pub final_accuracy: f64,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss\n");
        for (i, loss) in self.epoch_losses.iter().enumerate() {
            let _ = writeln!(out, "{},{loss:.16e}", i + 1);
        }
        let _ = writeln!(out, "accuracy,{:.16e}", self.final_accuracy);
        out
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv())
    }
}

/// Numerically stable softmax cross-entropy: loss and logits gradient.
fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    let log_z = max + sum.ln();
    let loss = log_z - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|&l| (l - max).exp() / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

struct FlatParams {
    values: Vec<f64>,
    offsets: Vec<usize>, // block j occupies offsets[j]..offsets[j+1]
}

impl FlatParams {
    fn from_spec(spec: &ModelSpec, seed: u64) -> Self {
        let pv = sample_params(spec, seed, SamplingScheme::FanInUniform);
        let mut offsets = vec![0usize];
        let mut values = Vec::with_capacity(param_count(spec));
        for slice in pv.slices() {
            values.extend_from_slice(slice);
            offsets.push(values.len());
        }
        FlatParams { values, offsets }
    }

    fn block(&self, j: usize) -> &[f64] {
        &self.values[self.offsets[j]..self.offsets[j + 1]]
    }
}

fn forward_all(
    spec: &ModelSpec,
    params: &FlatParams,
    x0: &Activation,
) -> Result<(Vec<Activation>, Vec<BlockCache>), ModelError> {
    let mut acts = Vec::with_capacity(spec.block_count() + 1);
    let mut caches = Vec::with_capacity(spec.block_count());
    acts.push(x0.clone());
    for (j, block) in spec.blocks().iter().enumerate() {
        let (out, cache) = block_forward_cached(block, params.block(j), acts.last().unwrap())?;
        acts.push(out);
        caches.push(cache);
    }
    Ok((acts, caches))
}

/// Loss and parameter gradient of one sample, via full backpropagation.
fn sample_grad(
    spec: &ModelSpec,
    params: &FlatParams,
    x0: &Activation,
    label: usize,
    grad_out: &mut [f64],
    weight: f64,
) -> Result<f64, ModelError> {
    let (acts, caches) = forward_all(spec, params, x0)?;
    let logits = acts.last().unwrap().as_slice();
    let (loss, dlogits) = cross_entropy(logits, label);
    let mut cot = Activation::Flat(dlogits.iter().map(|&g| g * weight).collect());
    for j in (0..spec.block_count()).rev() {
        let (dtheta, cot_in) = block_backward(
            &spec.blocks()[j],
            params.block(j),
            &acts[j],
            &caches[j],
            &cot,
        )?;
        let range = params.offsets[j]..params.offsets[j + 1];
        for (slot, d) in grad_out[range].iter_mut().zip(dtheta) {
            *slot += d;
        }
        cot = cot_in;
    }
    Ok(loss)
}

/// Trains the deterministic model (noise ignored) with Adam and a softmax
/// cross-entropy head. Deterministic given `cfg.seed`.
pub fn train(spec: &ModelSpec, ds: &Dataset, cfg: &TrainConfig) -> Result<LossCurve, TrainError> {
    cfg.validate()?;
    let out_width = spec
        .output_width()
        .ok_or_else(|| TrainError::Incompatible("model output is not flat".into()))?;
    if out_width != ds.n_classes {
        return Err(TrainError::Incompatible(format!(
            "model outputs {out_width} logits for {} classes",
            ds.n_classes
        )));
    }
    if ds.is_empty() {
        return Err(TrainError::Incompatible("empty dataset".into()));
    }
    if ds.input_shape() != Some(spec.input_shape()) {
        return Err(TrainError::Incompatible(format!(
            "dataset inputs {:?} do not match model input {}",
            ds.input_shape(),
            spec.input_shape()
        )));
    }
    let ds = if cfg.n_train > 0 && cfg.n_train < ds.len() {
        ds.subsample(cfg.seed, cfg.n_train)
    } else {
        ds.clone()
    };
    let mut params = FlatParams::from_spec(spec, cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let n = ds.len();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut grad = vec![0.0f64; params.values.len()];
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = rng::keyed_rng(cfg.seed, &[tag::SHUFFLE, epoch as u64]);
        rng::shuffle(&mut shuffle_rng, &mut order);
        let mut loss_sum = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let weight = 1.0 / batch.len() as f64;
            for &i in batch {
                let loss = sample_grad(spec, &params, &ds.inputs[i], ds.labels[i], &mut grad, weight)?;
                if !loss.is_finite() {
                    return Err(TrainError::Diverged {
                        epoch,
                        batch: batch_idx,
                    });
                }
                loss_sum += loss;
            }
            adam.step(&mut params.values, &grad);
        }
        epoch_losses.push(loss_sum / n as f64);
    }
    let mut correct = 0usize;
    for (x, &label) in ds.inputs.iter().zip(&ds.labels) {
        let (acts, _) = forward_all(spec, &params, x)?;
        let logits = acts.last().unwrap().as_slice();
        let best = logits
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if best == label {
            correct += 1;
        }
    }
    Ok(LossCurve {
        epoch_losses,
        final_accuracy: correct as f64 / n as f64,
    })
}
