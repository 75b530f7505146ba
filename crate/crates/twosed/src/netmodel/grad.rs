//! Reverse-mode derivatives through the block maps.
//!
//! [`block_grad_loglik`] is the per-block gradient of the Gaussian
//! log-likelihood, `(1/σ²)·Jᵀ(x_j − O_j(x_prev))`, used by the Fisher
//! estimator. The cached forward/backward pair is also what the trainer
//! chains into full backpropagation.

use super::{Activation, BlockSpec, ModelError, Tensor3, NORM_EPS};

#[derive(Debug, Clone)]
pub struct NormCache {
    xhat: Tensor3,
    inv_std: Vec<f64>,
}

/// Intermediate values a block's backward pass needs.
#[derive(Debug, Clone)]
pub enum BlockCache {
    Linear {
        pre: Vec<f64>,
    },
    Conv {
        norm: Option<NormCache>,
        pre_relu: Tensor3,
        /// Flat index into the pre-pool tensor per pooled slot.
        argmax: Option<Vec<usize>>,
        conv_h: usize,
        conv_w: usize,
    },
    Flatten,
}

fn check_theta_len(block: &BlockSpec, theta: &[f64]) -> Result<(), ModelError> {
    if theta.len() != block.param_count() {
        return Err(ModelError::ShapeError(format!(
            "block expects {} parameters, got {}",
            block.param_count(),
            theta.len()
        )));
    }
    Ok(())
}

/// Applies `O_j` and retains what the backward pass needs.
pub fn block_forward_cached(
    block: &BlockSpec,
    theta: &[f64],
    input: &Activation,
) -> Result<(Activation, BlockCache), ModelError> {
    check_theta_len(block, theta)?;
    match *block {
        BlockSpec::Linear {
            in_width,
            out_width,
            relu,
            bias,
        } => {
            let x = input.expect_flat("linear block")?;
            if x.len() != in_width {
                return Err(ModelError::ShapeError(format!(
                    "linear block expects ({in_width}), got ({})",
                    x.len()
                )));
            }
            let mut pre = Vec::with_capacity(out_width);
            for i in 0..out_width {
                let row = &theta[i * in_width..(i + 1) * in_width];
                let mut acc = if bias {
                    theta[in_width * out_width + i]
                } else {
                    0.0
                };
                for (&w, &xj) in row.iter().zip(x) {
                    acc += w * xj;
                }
                pre.push(acc);
            }
            let out = if relu {
                pre.iter().map(|&v| v.max(0.0)).collect()
            } else {
                pre.clone()
            };
            Ok((Activation::Flat(out), BlockCache::Linear { pre }))
        }
        BlockSpec::Conv {
            kernel,
            in_channels,
            out_channels,
            with_pool,
            with_norm,
        } => {
            let t = input.expect_image("conv block")?;
            if t.channels != in_channels || t.height < kernel || t.width < kernel {
                return Err(ModelError::ShapeError(format!(
                    "conv (k={kernel}, in={in_channels}) cannot consume {}",
                    t.shape()
                )));
            }
            let (h1, w1) = (t.height - kernel + 1, t.width - kernel + 1);
            let mut z = Tensor3::zeros(out_channels, h1, w1);
            for o in 0..out_channels {
                for i in 0..in_channels {
                    for u in 0..kernel {
                        for v in 0..kernel {
                            let w = theta[((o * in_channels + i) * kernel + u) * kernel + v];
                            if w == 0.0 {
                                continue;
                            }
                            for y in 0..h1 {
                                for x in 0..w1 {
                                    let val = w * t.get(i, y + u, x + v);
                                    let idx = z.idx(o, y, x);
                                    z.data[idx] += val;
                                }
                            }
                        }
                    }
                }
            }
            let weight_len = kernel * kernel * in_channels * out_channels;
            let norm = if with_norm {
                let m = (h1 * w1) as f64;
                let mut xhat = Tensor3::zeros(out_channels, h1, w1);
                let mut inv_std = Vec::with_capacity(out_channels);
                for c in 0..out_channels {
                    let plane = &z.data[c * h1 * w1..(c + 1) * h1 * w1];
                    let mean: f64 = plane.iter().sum::<f64>() / m;
                    let var: f64 = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
                    let istd = 1.0 / (var + NORM_EPS).sqrt();
                    inv_std.push(istd);
                    let gamma = theta[weight_len + c];
                    let beta = theta[weight_len + out_channels + c];
                    for (slot, &v) in xhat.data[c * h1 * w1..(c + 1) * h1 * w1]
                        .iter_mut()
                        .zip(plane)
                    {
                        *slot = (v - mean) * istd;
                    }
                    for (zslot, &xh) in z.data[c * h1 * w1..(c + 1) * h1 * w1]
                        .iter_mut()
                        .zip(&xhat.data[c * h1 * w1..(c + 1) * h1 * w1])
                    {
                        *zslot = gamma * xh + beta;
                    }
                }
                Some(NormCache { xhat, inv_std })
            } else {
                None
            };
            let pre_relu = z.clone();
            for v in &mut z.data {
                *v = v.max(0.0);
            }
            let (out, argmax) = if with_pool {
                let (ph, pw) = (h1 / 2, w1 / 2);
                let mut pooled = Tensor3::zeros(out_channels, ph, pw);
                let mut arg = Vec::with_capacity(out_channels * ph * pw);
                for c in 0..out_channels {
                    for y in 0..ph {
                        for x in 0..pw {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = 0usize;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let idx = z.idx(c, 2 * y + dy, 2 * x + dx);
                                    if z.data[idx] > best {
                                        best = z.data[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            pooled.set(c, y, x, best);
                            arg.push(best_idx);
                        }
                    }
                }
                (Activation::Image(pooled), Some(arg))
            } else {
                (Activation::Image(z), None)
            };
            Ok((
                out,
                BlockCache::Conv {
                    norm,
                    pre_relu,
                    argmax,
                    conv_h: h1,
                    conv_w: w1,
                },
            ))
        }
        BlockSpec::Flatten { spatial } => {
            let t = input.expect_image("flatten block")?;
            if t.height != spatial || t.width != spatial {
                return Err(ModelError::ShapeError(format!(
                    "flatten expects {spatial}x{spatial}, got {}",
                    t.shape()
                )));
            }
            let out = super::forward::flatten_conv(t, theta)?;
            Ok((Activation::Flat(out), BlockCache::Flatten))
        }
    }
}

/// Pulls an output cotangent back through one block, returning the gradient
/// with respect to the block parameters and the input cotangent.
pub fn block_backward(
    block: &BlockSpec,
    theta: &[f64],
    input: &Activation,
    cache: &BlockCache,
    cot_out: &Activation,
) -> Result<(Vec<f64>, Activation), ModelError> {
    match (*block, cache) {
        (
            BlockSpec::Linear {
                in_width,
                out_width,
                relu,
                bias,
            },
            BlockCache::Linear { pre },
        ) => {
            let x = input.expect_flat("linear backward")?;
            let cot = cot_out.expect_flat("linear backward cotangent")?;
            let mut dtheta = vec![0.0; block.param_count()];
            let mut dx = vec![0.0; in_width];
            for i in 0..out_width {
                let h = if relu && pre[i] <= 0.0 { 0.0 } else { cot[i] };
                if h == 0.0 {
                    continue;
                }
                let drow = &mut dtheta[i * in_width..(i + 1) * in_width];
                for (slot, &xj) in drow.iter_mut().zip(x) {
                    *slot += h * xj;
                }
                if bias {
                    dtheta[in_width * out_width + i] += h;
                }
                let wrow = &theta[i * in_width..(i + 1) * in_width];
                for (dslot, &w) in dx.iter_mut().zip(wrow) {
                    *dslot += h * w;
                }
            }
            Ok((dtheta, Activation::Flat(dx)))
        }
        (
            BlockSpec::Conv {
                kernel,
                in_channels,
                out_channels,
                with_pool,
                with_norm,
            },
            BlockCache::Conv {
                norm,
                pre_relu,
                argmax,
                conv_h,
                conv_w,
            },
        ) => {
            let t = input.expect_image("conv backward")?;
            let cot = cot_out.expect_image("conv backward cotangent")?;
            let (h1, w1) = (*conv_h, *conv_w);
            // un-pool
            let mut d = Tensor3::zeros(out_channels, h1, w1);
            if with_pool {
                let arg = argmax.as_ref().expect("pool cache");
                for (slot, &idx) in cot.data.iter().zip(arg) {
                    d.data[idx] += *slot;
                }
            } else {
                d.data.copy_from_slice(&cot.data);
            }
            // relu mask (derivative 0 at exactly 0)
            for (dv, &pv) in d.data.iter_mut().zip(&pre_relu.data) {
                if pv <= 0.0 {
                    *dv = 0.0;
                }
            }
            let weight_len = kernel * kernel * in_channels * out_channels;
            let mut dtheta = vec![0.0; block.param_count()];
            // norm backward
            if with_norm {
                let nc = norm.as_ref().expect("norm cache");
                let m = (h1 * w1) as f64;
                for c in 0..out_channels {
                    let gamma = theta[weight_len + c];
                    let range = c * h1 * w1..(c + 1) * h1 * w1;
                    let xh = &nc.xhat.data[range.clone()];
                    let dz2: Vec<f64> = d.data[range.clone()].to_vec();
                    let dgamma: f64 = dz2.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                    let dbeta: f64 = dz2.iter().sum();
                    dtheta[weight_len + c] = dgamma;
                    dtheta[weight_len + out_channels + c] = dbeta;
                    let mean_dxhat = gamma * dbeta / m;
                    let mean_dxhat_xhat = gamma * dgamma / m;
                    let istd = nc.inv_std[c];
                    for ((slot, &dz), &x) in d.data[range].iter_mut().zip(&dz2).zip(xh) {
                        *slot = istd * (gamma * dz - mean_dxhat - x * mean_dxhat_xhat);
                    }
                }
            }
            // conv backward: kernel gradient and input cotangent
            let mut dinput = Tensor3::zeros(t.channels, t.height, t.width);
            for o in 0..out_channels {
                for y in 0..h1 {
                    for x in 0..w1 {
                        let g = d.get(o, y, x);
                        if g == 0.0 {
                            continue;
                        }
                        for i in 0..in_channels {
                            for u in 0..kernel {
                                for v in 0..kernel {
                                    let widx = ((o * in_channels + i) * kernel + u) * kernel + v;
                                    dtheta[widx] += g * t.get(i, y + u, x + v);
                                    let didx = dinput.idx(i, y + u, x + v);
                                    dinput.data[didx] += g * theta[widx];
                                }
                            }
                        }
                    }
                }
            }
            Ok((dtheta, Activation::Image(dinput)))
        }
        (BlockSpec::Flatten { spatial }, BlockCache::Flatten) => {
            let t = input.expect_image("flatten backward")?;
            let cot = cot_out.expect_flat("flatten backward cotangent")?;
            let k = spatial;
            let mut dtheta = vec![0.0; k * k];
            let mut dinput = Tensor3::zeros(t.channels, k, k);
            for (l, &g) in cot.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                for i in 0..k {
                    for j in 0..k {
                        dtheta[i * k + j] += g * t.get(l, i, j);
                        let didx = dinput.idx(l, i, j);
                        dinput.data[didx] += g * theta[i * k + j];
                    }
                }
            }
            Ok((dtheta, Activation::Image(dinput)))
        }
        _ => Err(ModelError::ShapeError(
            "block cache does not match block kind".into(),
        )),
    }
}

/// Gradient of the block's Gaussian log-likelihood with respect to its own
/// parameters: `(1/σ²)·Jᵀ(x_j − O_j(x_prev))`.
pub fn block_grad_loglik(
    block: &BlockSpec,
    theta_j: &[f64],
    x_prev: &Activation,
    x_j: &Activation,
    sigma2: f64,
) -> Result<Vec<f64>, ModelError> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(ModelError::InvalidVariance(sigma2));
    }
    let (o, cache) = block_forward_cached(block, theta_j, x_prev)?;
    if x_j.shape() != o.shape() {
        return Err(ModelError::ShapeError(format!(
            "sampled output shape {} does not match block output {}",
            x_j.shape(),
            o.shape()
        )));
    }
    let mut cot = o.clone();
    for (slot, (&xv, &ov)) in cot
        .as_mut_slice()
        .iter_mut()
        .zip(x_j.as_slice().iter().zip(o.as_slice()))
    {
        *slot = (xv - ov) / sigma2;
    }
    let (dtheta, _) = block_backward(block, theta_j, x_prev, &cache, &cot)?;
    Ok(dtheta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let block = BlockSpec::Linear {
            in_width: 3,
            out_width: 2,
            relu: true,
            bias: false,
        };
        let theta = vec![0.4, -0.2, 0.1, 0.0, 0.3, -0.5];
        let x_prev = Activation::Flat(vec![1.0, 2.0, -1.0]);
        let (o, _) = block_forward_cached(&block, &theta, &x_prev).unwrap();
        let g = block_grad_loglik(&block, &theta, &x_prev, &o, 1e-2).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_linear_block_matches_closed_form() {
        // O(a) = w·a, so d/dw log p = a(b - wa)/σ²
        let block = BlockSpec::Linear {
            in_width: 1,
            out_width: 1,
            relu: false,
            bias: false,
        };
        let (w, a, b, s2) = (0.7, 1.3, 2.1, 1e-2);
        let g = block_grad_loglik(
            &block,
            &[w],
            &Activation::Flat(vec![a]),
            &Activation::Flat(vec![b]),
            s2,
        )
        .unwrap();
        let expect = a * (b - w * a) / s2;
        assert!((g[0] - expect).abs() < 1e-12 * expect.abs());
    }

    #[test]
    fn invalid_variance_is_rejected() {
        let block = BlockSpec::Linear {
            in_width: 1,
            out_width: 1,
            relu: false,
            bias: false,
        };
        for bad in [0.0, -1.0, f64::NAN] {
            let r = block_grad_loglik(
                &block,
                &[0.5],
                &Activation::Flat(vec![1.0]),
                &Activation::Flat(vec![1.0]),
                bad,
            );
            assert!(matches!(r, Err(ModelError::InvalidVariance(_))));
        }
    }

    #[test]
    fn gradient_scales_exactly_as_inverse_variance() {
        let block = BlockSpec::Linear {
            in_width: 2,
            out_width: 2,
            relu: false,
            bias: false,
        };
        let theta = vec![0.5, -0.25, 0.125, 1.0];
        let x_prev = Activation::Flat(vec![0.75, -0.5]);
        let x_j = Activation::Flat(vec![1.0, 0.5]);
        let g1 = block_grad_loglik(&block, &theta, &x_prev, &x_j, 1.0).unwrap();
        // power-of-two variance: the 1/σ² rescaling is exact in binary
        let s = 0.25;
        let gs = block_grad_loglik(&block, &theta, &x_prev, &x_j, s).unwrap();
        for (a, b) in g1.iter().zip(&gs) {
            assert_eq!(*a, b * s);
        }
    }
}
