//! Monte Carlo estimation of the block-diagonal empirical Fisher matrix and
//! its trace normalization.
//!
//! For each data input one noisy trajectory is sampled and every block's
//! log-likelihood gradient is accumulated into its own dense block
//! `F_j += g_j g_jᵀ / N`. Off-diagonal cross-block terms vanish by the
//! Markov factorization and are never stored. The per-sample gradient rows
//! are retained alongside the dense blocks: an empirical block of rank at
//! most N has the same nonzero spectrum as its N x N Gram matrix, so wide
//! blocks are eigendecomposed through the Gram route at a fraction of the
//! dense cost (same cyclic Jacobi solver either way).

use crate::effdim::SpectrumEnsemble;
use crate::linalg::{psd_clamp, sym_eigen, LinalgError, Spectrum, SymMatrix, DEFAULT_PSD_REL_TOL};
use crate::netmodel::{
    block_grad_loglik, forward_sample_with_mode, Activation, ModelError, ModelSpec, ParamVector,
    PropagationMode,
};
use crate::rng;
use rayon::prelude::*;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::OnceLock;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FisherError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad ensemble dump: {0}")]
    Format(String),
}

/// Estimator knobs beyond the defaults (one noisy trajectory per input).
#[derive(Debug, Clone)]
pub struct EstimatorOptions {
    pub trajectories_per_input: usize,
    pub mode: PropagationMode,
    /// Retain per-sample gradient rows for the fast Gram spectra route.
    pub keep_factors: bool,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions {
            trajectories_per_input: 1,
            mode: PropagationMode::NoisyChain,
            keep_factors: true,
        }
    }
}

/// The block-diagonal empirical Fisher matrix at one parameter point.
#[derive(Debug, Clone)]
pub struct BlockFisher {
    blocks: Vec<SymMatrix>,
    n_samples: usize,
    /// Per block: `n_samples` gradient rows of length `d_j`, sample-major.
    factors: Option<Vec<Vec<f64>>>,
}

impl BlockFisher {
    /// Wraps precomputed dense blocks (no gradient factors retained).
    pub fn from_blocks(blocks: Vec<SymMatrix>, n_samples: usize) -> Self {
        BlockFisher {
            blocks,
            n_samples,
            factors: None,
        }
    }

    pub fn blocks(&self) -> &[SymMatrix] {
        &self.blocks
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn total_trace(&self) -> f64 {
        self.blocks.iter().map(|b| b.trace()).sum()
    }

    pub fn block_dims(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.dim()).collect()
    }
}

/// Seed for the trajectory of data input `input_idx`, resample `traj_idx`.
/// Exposed so independent re-computations can reproduce the exact draws.
pub fn trajectory_seed(seed: u64, input_idx: usize, traj_idx: usize) -> u64 {
    use rand_chacha::rand_core::RngCore;
    rng::keyed_rng(seed, &[rng::tag::NOISE, input_idx as u64, traj_idx as u64]).next_u64()
}

/// Estimates the block-diagonal empirical Fisher matrix at `theta` from a
/// batch of inputs, one sampled trajectory per input.
pub fn block_fim(
    spec: &ModelSpec,
    theta: &ParamVector,
    inputs: &[Activation],
    seed: u64,
) -> Result<BlockFisher, FisherError> {
    block_fim_with(spec, theta, inputs, seed, &EstimatorOptions::default())
}

pub fn block_fim_with(
    spec: &ModelSpec,
    theta: &ParamVector,
    inputs: &[Activation],
    seed: u64,
    opts: &EstimatorOptions,
) -> Result<BlockFisher, FisherError> {
    if inputs.is_empty() {
        return Err(ModelError::ShapeError("empty input batch".into()).into());
    }
    if opts.trajectories_per_input == 0 {
        return Err(ModelError::ShapeError("trajectories_per_input must be >= 1".into()).into());
    }
    let dims: Vec<usize> = spec.blocks().iter().map(|b| b.param_count()).collect();
    let total = inputs.len() * opts.trajectories_per_input;
    // per-sample gradients, computed in parallel, indexed by sample
    let grads: Vec<Result<Vec<Vec<f64>>, FisherError>> = (0..total)
        .into_par_iter()
        .map(|s| {
            let (i, t) = (s / opts.trajectories_per_input, s % opts.trajectories_per_input);
            let tseed = trajectory_seed(seed, i, t);
            let traj = forward_sample_with_mode(spec, theta, &inputs[i], tseed, opts.mode)?;
            let mut per_block = Vec::with_capacity(spec.block_count());
            for (j, block) in spec.blocks().iter().enumerate() {
                if spec.frozen() {
                    per_block.push(vec![0.0; dims[j]]);
                    continue;
                }
                let prev = if j == 0 {
                    &traj.x0
                } else {
                    match opts.mode {
                        PropagationMode::NoisyChain => &traj.xs[j - 1],
                        PropagationMode::MeanChain => &traj.os[j - 1],
                    }
                };
                per_block.push(block_grad_loglik(
                    block,
                    theta.slice(j),
                    prev,
                    &traj.xs[j],
                    spec.sigma2(),
                )?);
            }
            Ok(per_block)
        })
        .collect();
    let mut all: Vec<Vec<Vec<f64>>> = Vec::with_capacity(total);
    for g in grads {
        all.push(g?);
    }
    // fixed ascending-sample reduction into the dense blocks
    let weight = 1.0 / total as f64;
    let mut blocks: Vec<SymMatrix> = dims.iter().map(|&d| SymMatrix::zeros(d)).collect();
    for sample in &all {
        for (block, g) in blocks.iter_mut().zip(sample) {
            block.add_scaled_outer(g, weight);
        }
    }
    let factors = opts.keep_factors.then(|| {
        let mut per_block: Vec<Vec<f64>> =
            dims.iter().map(|&d| Vec::with_capacity(d * total)).collect();
        for sample in &all {
            for (rows, g) in per_block.iter_mut().zip(sample) {
                rows.extend_from_slice(g);
            }
        }
        per_block
    });
    Ok(BlockFisher {
        blocks,
        n_samples: total,
        factors,
    })
}

/// A normalized ensemble of block Fisher matrices over sampled θ, with the
/// spectra cache feeding the effective-dimension formulas.
#[derive(Debug)]
pub struct FisherEnsemble {
    per_theta: Vec<BlockFisher>,
    normalization: f64,
    d: usize,
    spectra: OnceLock<SpectrumEnsemble>,
}

/// Rescales every block of every sample by `d / mean_k(Σ_j tr F_j)` so the
/// mean total trace equals the parameter dimension; a zero-trace (trivial)
/// ensemble maps to the all-zero ensemble.
pub fn normalize_ensemble(mut raw: Vec<BlockFisher>, d: usize) -> FisherEnsemble {
    let k = raw.len();
    let mean_trace = if k == 0 {
        0.0
    } else {
        raw.iter().map(|bf| bf.total_trace()).sum::<f64>() / k as f64
    };
    let c = if mean_trace > 0.0 {
        d as f64 / mean_trace
    } else {
        0.0
    };
    for bf in &mut raw {
        for block in &mut bf.blocks {
            block.scale(c);
        }
    }
    FisherEnsemble {
        per_theta: raw,
        normalization: c,
        d,
        spectra: OnceLock::new(),
    }
}

impl FisherEnsemble {
    pub fn per_theta(&self) -> &[BlockFisher] {
        &self.per_theta
    }

    pub fn normalization(&self) -> f64 {
        self.normalization
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn theta_count(&self) -> usize {
        self.per_theta.len()
    }

    /// Mean over θ of the total trace; equals `d` after normalization unless
    /// the ensemble is trivial.
    pub fn mean_total_trace(&self) -> f64 {
        if self.per_theta.is_empty() {
            return 0.0;
        }
        self.per_theta.iter().map(|bf| bf.total_trace()).sum::<f64>() / self.per_theta.len() as f64
    }
}

fn spectrum_for_block(
    bf: &BlockFisher,
    j: usize,
    normalization: f64,
) -> Result<Spectrum, LinalgError> {
    let dense = &bf.blocks[j];
    let d_j = dense.dim();
    if let Some(factors) = &bf.factors {
        let n = bf.n_samples;
        if n < d_j {
            // Gram route: nonzero eigenvalues of (1/N)·Σ g gᵀ equal those of
            // the N x N matrix G Gᵀ/N built from the raw gradient rows; the
            // normalization scalar multiplies the spectrum afterwards.
            let rows = &factors[j];
            debug_assert_eq!(rows.len(), n * d_j);
            let mut gram = SymMatrix::zeros(n);
            for a in 0..n {
                let ra = &rows[a * d_j..(a + 1) * d_j];
                for b in a..n {
                    let rb = &rows[b * d_j..(b + 1) * d_j];
                    let dot: f64 = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
                    gram.set_sym(a, b, dot / n as f64);
                }
            }
            let clamped = psd_clamp(&sym_eigen(&gram)?, DEFAULT_PSD_REL_TOL)?;
            let mut evs = vec![0.0; d_j - n];
            evs.extend(clamped.eigenvalues().iter().map(|&ev| normalization * ev));
            return Ok(Spectrum::from_eigenvalues(evs));
        }
    }
    psd_clamp(&sym_eigen(dense)?, DEFAULT_PSD_REL_TOL)
}

/// Eigendecomposes every (θ-sample, block) pair of the normalized ensemble;
/// results are cached on the ensemble.
pub fn ensemble_spectra(fe: &FisherEnsemble) -> Result<&SpectrumEnsemble, FisherError> {
    if let Some(s) = fe.spectra.get() {
        return Ok(s);
    }
    let computed: Vec<Result<Vec<Spectrum>, LinalgError>> = fe
        .per_theta
        .par_iter()
        .map(|bf| {
            (0..bf.blocks.len())
                .map(|j| spectrum_for_block(bf, j, fe.normalization))
                .collect()
        })
        .collect();
    let mut spectra = Vec::with_capacity(computed.len());
    for row in computed {
        spectra.push(row?);
    }
    let ens = SpectrumEnsemble::new(spectra, fe.d)
        .map_err(|e| FisherError::Format(format!("inconsistent ensemble: {e}")))?;
    Ok(fe.spectra.get_or_init(|| ens))
}

const DUMP_HEADER_FIXED: usize = 8 * 4;

impl FisherEnsemble {
    /// Binary dump, little-endian: `K`, `L`, `n_samples`, the normalization
    /// scalar, the `L` block dims, then `K·L` row-major double blocks.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<(), FisherError> {
        let k = self.per_theta.len() as u64;
        let dims = self
            .per_theta
            .first()
            .map(|bf| bf.block_dims())
            .unwrap_or_default();
        let n_samples = self.per_theta.first().map_or(0, |bf| bf.n_samples) as u64;
        w.write_all(&k.to_le_bytes())?;
        w.write_all(&(dims.len() as u64).to_le_bytes())?;
        w.write_all(&n_samples.to_le_bytes())?;
        w.write_all(&self.normalization.to_le_bytes())?;
        for &d in &dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for bf in &self.per_theta {
            for block in &bf.blocks {
                for &v in block.entries() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn write_dump_file(&self, path: &Path) -> Result<(), FisherError> {
        let file = std::fs::File::create(path)?;
        self.write_dump(std::io::BufWriter::new(file))
    }

    /// Reads a dump produced by [`Self::write_dump`]. Gradient factors are
    /// not persisted, so spectra of a loaded ensemble always use the dense
    /// eigensolver path.
    pub fn read_dump<R: Read>(mut r: R) -> Result<FisherEnsemble, FisherError> {
        let mut fixed = [0u8; DUMP_HEADER_FIXED];
        r.read_exact(&mut fixed)
            .map_err(|_| FisherError::Format("truncated header".into()))?;
        let read_u64 = |b: &[u8]| u64::from_le_bytes(b.try_into().unwrap());
        let k = read_u64(&fixed[0..8]) as usize;
        let l = read_u64(&fixed[8..16]) as usize;
        let n_samples = read_u64(&fixed[16..24]) as usize;
        let normalization = f64::from_le_bytes(fixed[24..32].try_into().unwrap());
        if k > 1_000_000 || l > 1_000_000 {
            return Err(FisherError::Format("implausible header counts".into()));
        }
        let mut dims = Vec::with_capacity(l);
        let mut buf8 = [0u8; 8];
        for _ in 0..l {
            r.read_exact(&mut buf8)
                .map_err(|_| FisherError::Format("truncated dims".into()))?;
            dims.push(read_u64(&buf8) as usize);
        }
        let d: usize = dims.iter().sum();
        let mut per_theta = Vec::with_capacity(k);
        for _ in 0..k {
            let mut blocks = Vec::with_capacity(l);
            for &dim in &dims {
                let mut entries = vec![0.0f64; dim * dim];
                for slot in &mut entries {
                    r.read_exact(&mut buf8)
                        .map_err(|_| FisherError::Format("truncated block data".into()))?;
                    *slot = f64::from_le_bytes(buf8);
                }
                blocks.push(SymMatrix::new(dim, entries)?);
            }
            per_theta.push(BlockFisher {
                blocks,
                n_samples,
                factors: None,
            });
        }
        Ok(FisherEnsemble {
            per_theta,
            normalization,
            d,
            spectra: OnceLock::new(),
        })
    }

    pub fn read_dump_file(path: &Path) -> Result<FisherEnsemble, FisherError> {
        let file = std::fs::File::open(path)?;
        Self::read_dump(std::io::BufReader::new(file))
    }
}
