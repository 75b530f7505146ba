//! Log-space accumulation and jackknife error helpers.

/// log(Σ exp(x_i)), stable under large magnitudes; -inf on empty input.
pub fn logsumexp(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NEG_INFINITY;
    }
    let max = xs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// log of the arithmetic mean of exp(x_i).
pub fn logmeanexp(xs: &[f64]) -> f64 {
    logsumexp(xs) - (xs.len() as f64).ln()
}

/// Delete-one jackknife standard error of an estimator over its per-sample
/// leave-one-out replicates. Returns 0 for fewer than two replicates.
pub fn jackknife_se(replicates: &[f64]) -> f64 {
    let k = replicates.len();
    if k < 2 {
        return 0.0;
    }
    let mean = replicates.iter().sum::<f64>() / k as f64;
    let ss: f64 = replicates.iter().map(|r| (r - mean) * (r - mean)).sum();
    ((k - 1) as f64 / k as f64 * ss).sqrt()
}
