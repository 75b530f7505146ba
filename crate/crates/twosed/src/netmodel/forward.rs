//! Deterministic block maps and forward sampling of noisy trajectories.

use super::grad::block_forward_cached;
use super::{Activation, BlockSpec, ModelError, ModelSpec, ParamVector, Tensor3, Trajectory};
use crate::rng::{self, tag};

/// Applies one block's deterministic map `O_j`.
pub fn block_forward(
    block: &BlockSpec,
    theta_j: &[f64],
    input: &Activation,
) -> Result<Activation, ModelError> {
    Ok(block_forward_cached(block, theta_j, input)?.0)
}

/// Per-channel Frobenius inner product with a shared `k x k` kernel:
/// `out[l] = Σ_{i,j} a[l,i,j] · kernel[i,j]`.
pub fn flatten_conv(a: &Tensor3, kernel: &[f64]) -> Result<Vec<f64>, ModelError> {
    if a.height != a.width {
        return Err(ModelError::ShapeError(format!(
            "flatten input must be square, got {}",
            a.shape()
        )));
    }
    let k = a.height;
    if kernel.len() != k * k {
        return Err(ModelError::ShapeError(format!(
            "flatten kernel has {} entries, expected {}",
            kernel.len(),
            k * k
        )));
    }
    let mut out = Vec::with_capacity(a.channels);
    for c in 0..a.channels {
        let plane = &a.data[c * k * k..(c + 1) * k * k];
        out.push(plane.iter().zip(kernel).map(|(&x, &w)| x * w).sum());
    }
    Ok(out)
}

/// How sampled noise feeds the chain when estimating deep-block gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropagationMode {
    /// Each block consumes the previous block's noisy sample.
    NoisyChain,
    /// Each block consumes the previous deterministic mean; outputs are
    /// still sampled so residuals stay stochastic.
    MeanChain,
}

/// Samples one trajectory `x_j = O_j(x_{j-1}) + ν_j`, `ν_j ~ N(0, σ²I)`,
/// recording both the noisy samples and the deterministic outputs.
/// Deterministic given `seed`; noise streams are keyed per block.
pub fn forward_sample(
    spec: &ModelSpec,
    theta: &ParamVector,
    x0: &Activation,
    seed: u64,
) -> Result<Trajectory, ModelError> {
    forward_sample_with_mode(spec, theta, x0, seed, PropagationMode::NoisyChain)
}

pub fn forward_sample_with_mode(
    spec: &ModelSpec,
    theta: &ParamVector,
    x0: &Activation,
    seed: u64,
    mode: PropagationMode,
) -> Result<Trajectory, ModelError> {
    if x0.shape() != spec.input_shape() {
        return Err(ModelError::ShapeError(format!(
            "input shape {} does not match model input {}",
            x0.shape(),
            spec.input_shape()
        )));
    }
    let frozen = spec.frozen().then(|| ParamVector::zeros_like(spec));
    let effective = frozen.as_ref().unwrap_or(theta);
    if effective.slices().len() != spec.block_count() {
        return Err(ModelError::ShapeError(format!(
            "{} parameter slices for {} blocks",
            effective.slices().len(),
            spec.block_count()
        )));
    }
    let sigma = spec.sigma2().sqrt();
    let mut os = Vec::with_capacity(spec.block_count());
    let mut xs = Vec::with_capacity(spec.block_count());
    let mut prev = x0.clone();
    for (j, block) in spec.blocks().iter().enumerate() {
        let o = block_forward(block, effective.slice(j), &prev)?;
        let mut x = o.clone();
        if sigma > 0.0 {
            let mut noise_rng = rng::keyed_rng(seed, &[tag::NOISE, j as u64]);
            for slot in x.as_mut_slice() {
                *slot += sigma * rng::standard_normal(&mut noise_rng);
            }
        }
        prev = match mode {
            PropagationMode::NoisyChain => x.clone(),
            PropagationMode::MeanChain => o.clone(),
        };
        os.push(o);
        xs.push(x);
    }
    Ok(Trajectory {
        x0: x0.clone(),
        xs,
        os,
    })
}
