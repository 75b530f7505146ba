//! Executable oracles for the theoretical properties behind the effective
//! dimension: brute-force Fisher-ball coverings of the unit cube, the
//! covering-growth inequality, empirical generalization gaps on toy
//! Bernoulli models with closed-form Fisher information, the rate-shape
//! envelope, and the rank/upper-bound checks on synthetic ensembles.
//!
//! Toy Fisher fields are evaluated in closed form (quadrature over the unit
//! cube), never through the Monte Carlo estimator, so these checks are
//! independent of the estimation pipeline they validate.

use crate::effdim::{rank_estimate, two_sed, SpectrumEnsemble};
use crate::fisher::{block_fim, normalize_ensemble};
use crate::linalg::{sym_eigen, Spectrum, SymMatrix};
use crate::netmodel::{param_count, parse_model_string, sample_params, Activation, SamplingScheme};
use crate::rng::{self, tag};
use crate::stats::logmeanexp;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("problem too large: {0}")]
    TooLarge(String),
    #[error("unsupported toy model: {0}")]
    Unsupported(String),
}

/// Loss bound `2b` of the bounded loss `L(a,b) = min(|a-b|, 2b0)`.
const LOSS_B0: f64 = 0.5;

fn bounded_loss(a: f64, b: f64) -> f64 {
    (a - b).abs().min(2.0 * LOSS_B0)
}

/// A Bernoulli toy: `p_θ(y=1|x) = s(θᵀx)` with a smooth squash into
/// `[α₁, 1-α₁]`, a finite input distribution, and a known true conditional.
#[derive(Debug, Clone)]
pub struct BernoulliToy {
    pub dim: usize,
    /// `(x, p(x))` atoms; probabilities sum to 1.
    pub atoms: Vec<(Vec<f64>, f64)>,
    /// True `p(y=1|x)` per atom.
    pub true_cond: Vec<f64>,
    pub alpha1: f64,
    /// Scalar applied to the closed-form Fisher field so that the field is
    /// trace-normalized over the unit cube.
    pub fisher_scale: f64,
}

impl BernoulliToy {
    fn squash(&self, t: f64) -> f64 {
        self.alpha1 + (1.0 - 2.0 * self.alpha1) / (1.0 + (-t).exp())
    }

    fn squash_deriv(&self, t: f64) -> f64 {
        let s = 1.0 / (1.0 + (-t).exp());
        (1.0 - 2.0 * self.alpha1) * s * (1.0 - s)
    }

    pub fn cond_prob(&self, theta: &[f64], atom: usize) -> f64 {
        let t: f64 = theta
            .iter()
            .zip(&self.atoms[atom].0)
            .map(|(&a, &b)| a * b)
            .sum();
        self.squash(t)
    }

    /// Closed-form Fisher information at θ:
    /// `Σ_x p(x) · s'(θᵀx)² / (q(1-q)) · x xᵀ`, times the trace scale.
    pub fn fisher_at(&self, theta: &[f64]) -> SymMatrix {
        let mut m = SymMatrix::zeros(self.dim);
        for (atom, (x, px)) in self.atoms.iter().enumerate() {
            let t: f64 = theta.iter().zip(x).map(|(&a, &b)| a * b).sum();
            let q = self.squash(t);
            let dq = self.squash_deriv(t);
            let w = self.fisher_scale * px * dq * dq / (q * (1.0 - q));
            m.add_scaled_outer(x, w);
            let _ = atom;
        }
        m
    }

    /// Monte Carlo empirical Fisher `(1/N) Σ ∇l ∇lᵀ` with `(x,y) ~ p_θ`.
    pub fn fisher_mc(&self, theta: &[f64], n: usize, seed: u64) -> SymMatrix {
        let mut r = rng::keyed_rng(seed, &[tag::DATA]);
        let mut m = SymMatrix::zeros(self.dim);
        for _ in 0..n {
            let mut u = rng::next_f64(&mut r);
            let mut atom = 0;
            for (i, (_, px)) in self.atoms.iter().enumerate() {
                if u < *px || i + 1 == self.atoms.len() {
                    atom = i;
                    break;
                }
                u -= px;
            }
            let x = &self.atoms[atom].0;
            let t: f64 = theta.iter().zip(x).map(|(&a, &b)| a * b).sum();
            let q = self.squash(t);
            let y = rng::next_f64(&mut r) < q;
            let dq = self.squash_deriv(t);
            let coeff = if y { dq / q } else { -dq / (1.0 - q) };
            m.add_scaled_outer(x, self.fisher_scale * coeff * coeff / n as f64);
        }
        m
    }
}

/// The Fisher field a toy model exposes on `Θ = [0,1]^d`.
#[derive(Debug, Clone)]
pub enum ToyKind {
    ZeroField,
    ConstantField(SymMatrix),
    Bernoulli(BernoulliToy),
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    pub name: String,
    pub dim: usize,
    pub kind: ToyKind,
}

impl ToyModel {
    pub fn fisher_at(&self, theta: &[f64]) -> SymMatrix {
        match &self.kind {
            ToyKind::ZeroField => SymMatrix::zeros(self.dim),
            ToyKind::ConstantField(m) => m.clone(),
            ToyKind::Bernoulli(b) => b.fisher_at(theta),
        }
    }

    pub fn bernoulli(&self) -> Option<&BernoulliToy> {
        match &self.kind {
            ToyKind::Bernoulli(b) => Some(b),
            _ => None,
        }
    }
}

/// The three toy models the covering checks run on: a trivial zero field, a
/// unit constant field in 1-D, and a rank-one constant field in 2-D.
pub fn bundled_covering_toys() -> Vec<ToyModel> {
    vec![
        ToyModel {
            name: "trivial-2d".into(),
            dim: 2,
            kind: ToyKind::ZeroField,
        },
        ToyModel {
            name: "const-1d".into(),
            dim: 1,
            kind: ToyKind::ConstantField(SymMatrix::identity(1)),
        },
        ToyModel {
            name: "rank1-2d".into(),
            dim: 2,
            kind: ToyKind::ConstantField(
                SymMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap(),
            ),
        },
    ]
}

/// The Bernoulli toy used by the generalization-gap checks, trace-normalized
/// over the default θ-grid.
pub fn bundled_bernoulli_toy() -> ToyModel {
    let mut toy = BernoulliToy {
        dim: 1,
        atoms: vec![
            (vec![-2.0], 0.25),
            (vec![-0.5], 0.25),
            (vec![1.0], 0.25),
            (vec![2.5], 0.25),
        ],
        true_cond: vec![0.25, 0.5, 0.75, 0.25],
        alpha1: 0.05,
        fisher_scale: 1.0,
    };
    // normalize E_θ[tr F] to d over the unit interval
    let res = 101;
    let mut mean_tr = 0.0;
    for i in 0..res {
        let theta = [i as f64 / (res - 1) as f64];
        mean_tr += toy.fisher_at(&theta).trace() / res as f64;
    }
    toy.fisher_scale = toy.dim as f64 / mean_tr;
    ToyModel {
        name: "bernoulli-1d".into(),
        dim: 1,
        kind: ToyKind::Bernoulli(toy),
    }
}

fn grid_point(idx: usize, dim: usize, res: usize, out: &mut [f64; 3]) {
    let mut rem = idx;
    for axis in (0..dim).rev() {
        out[axis] = (rem % res) as f64 / (res - 1) as f64;
        rem /= res;
    }
}

fn quad_norm(m: &SymMatrix, v: &[f64]) -> f64 {
    let d = m.dim();
    let mut quad = 0.0;
    for i in 0..d {
        let mut dot = 0.0;
        for j in 0..d {
            dot += m.get(i, j) * v[j];
        }
        quad += v[i] * dot;
    }
    quad.max(0.0).sqrt()
}

fn check_grid(tm: &ToyModel, grid_res: usize) -> Result<usize, VerifyError> {
    if tm.dim > 3 {
        return Err(VerifyError::TooLarge(format!(
            "{} parameters (max 3)",
            tm.dim
        )));
    }
    if grid_res < 2 {
        return Err(VerifyError::TooLarge("grid_res must be >= 2".into()));
    }
    let total = grid_res.pow(tm.dim as u32);
    if total > 10_000_000 {
        return Err(VerifyError::TooLarge(format!(
            "grid of {total} points exceeds 1e7"
        )));
    }
    Ok(total)
}

/// Greedy Fisher-ball covering of the unit-cube grid; an upper bound on the
/// covering number within grid resolution. In 1-D each ball is centered on
/// the farthest uncovered point whose ball still reaches the first uncovered
/// point, which recovers the `1/(2ε)` interval count exactly; in higher
/// dimensions the first uncovered point itself is the center (the slope
/// checks carry a dimensional slack that absorbs the difference).
pub fn covering_count(tm: &ToyModel, epsilon: f64, grid_res: usize) -> Result<usize, VerifyError> {
    let total = check_grid(tm, grid_res)?;
    let dim = tm.dim;
    let constant_field = match &tm.kind {
        ToyKind::ZeroField => Some(SymMatrix::zeros(dim)),
        ToyKind::ConstantField(m) => Some(m.clone()),
        ToyKind::Bernoulli(_) => None,
    };
    let mut uncovered: Vec<u32> = (0..total as u32).collect();
    let mut count = 0usize;
    let mut u_pt = [0.0f64; 3];
    let mut c_pt = [0.0f64; 3];
    let mut q_pt = [0.0f64; 3];
    let mut diff = [0.0f64; 3];
    while let Some(&first) = uncovered.first() {
        grid_point(first as usize, dim, grid_res, &mut u_pt);
        let mut center = first;
        if dim == 1 {
            for &p in uncovered.iter().rev() {
                grid_point(p as usize, dim, grid_res, &mut c_pt);
                for a in 0..dim {
                    diff[a] = u_pt[a] - c_pt[a];
                }
                let field_at_p;
                let field = match &constant_field {
                    Some(f) => f,
                    None => {
                        field_at_p = tm.fisher_at(&c_pt[..dim]);
                        &field_at_p
                    }
                };
                if quad_norm(field, &diff[..dim]) < epsilon {
                    center = p;
                    break;
                }
            }
        }
        count += 1;
        grid_point(center as usize, dim, grid_res, &mut c_pt);
        let field = match &constant_field {
            Some(f) => f.clone(),
            None => tm.fisher_at(&c_pt[..dim]),
        };
        uncovered.retain(|&q| {
            grid_point(q as usize, dim, grid_res, &mut q_pt);
            for a in 0..dim {
                diff[a] = q_pt[a] - c_pt[a];
            }
            quad_norm(&field, &diff[..dim]) >= epsilon
        });
    }
    Ok(count)
}

/// `d_0(ε)` for a toy: trace-normalized quadrature over the θ-grid of the
/// spectral log-determinants, evaluated with the same log-space machinery
/// as the main measure but on the closed-form field.
pub fn toy_two_sed_zero(
    tm: &ToyModel,
    epsilon: f64,
    theta_grid_res: usize,
) -> Result<f64, VerifyError> {
    let total = check_grid(tm, theta_grid_res)?;
    let mut spectra = Vec::with_capacity(total);
    let mut mean_trace = 0.0;
    let mut theta = [0.0f64; 3];
    for idx in 0..total {
        grid_point(idx, tm.dim, theta_grid_res, &mut theta);
        let f = tm.fisher_at(&theta[..tm.dim]);
        mean_trace += f.trace() / total as f64;
        spectra.push(sym_eigen(&f).expect("toy field eigen"));
    }
    if mean_trace <= 0.0 {
        return Ok(0.0);
    }
    let c_norm = tm.dim as f64 / mean_trace;
    let scale = 1.0 / epsilon;
    let logdets: Vec<f64> = spectra
        .iter()
        .map(|s| {
            s.eigenvalues()
                .iter()
                .map(|&ev| (scale * (c_norm * ev.max(0.0)).sqrt()).ln_1p())
                .sum()
        })
        .collect();
    Ok(logmeanexp(&logdets) / epsilon.ln().abs())
}

/// One row of a verification report.
#[derive(Debug, Clone)]
pub struct CheckRow {
    pub check: String,
    pub param: String,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub pass: bool,
}

impl CheckRow {
    fn leq(check: &str, param: String, lhs: f64, rhs: f64) -> CheckRow {
        CheckRow {
            check: check.into(),
            param,
            lhs,
            rhs,
            margin: rhs - lhs,
            pass: lhs <= rhs,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub rows: Vec<CheckRow>,
}

impl Report {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn merge(&mut self, other: Report) {
        self.rows.extend(other.rows);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("check,param,lhs,rhs,margin,pass\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.16e},{:.16e},{:.16e},{}",
                r.check, r.param, r.lhs, r.rhs, r.margin, r.pass
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv())
    }
}

fn default_cover_res(dim: usize) -> usize {
    // the 1-D grid must resolve the smallest ball radius well below the
    // ball diameter or discretization inflates the count
    match dim {
        1 => 100_001,
        2 => 1_001,
        _ => 101,
    }
}

fn default_theta_res(dim: usize) -> usize {
    match dim {
        1 => 101,
        2 => 51,
        _ => 17,
    }
}

/// Checks `log N(ε)/|log ε| ≤ d_0(ε) + log(C_slack)/|log ε|` with
/// `C_slack = 10^d` on every ε; the slack absorbs the dimensional constant
/// of the covering bound, so this validates growth order, not the constant.
pub fn covering_slope_check(tm: &ToyModel, eps_list: &[f64]) -> Result<Report, VerifyError> {
    let c_slack = 10f64.powi(tm.dim as i32);
    let mut report = Report::default();
    for &eps in eps_list {
        let count = covering_count(tm, eps, default_cover_res(tm.dim))?;
        let lhs = (count as f64).ln() / eps.ln().abs();
        let d0 = toy_two_sed_zero(tm, eps, default_theta_res(tm.dim))?;
        let rhs = d0 + c_slack.ln() / eps.ln().abs();
        report.rows.push(CheckRow::leq(
            "covering_slope",
            format!("{}:eps={eps:.0e}", tm.name),
            lhs,
            rhs,
        ));
    }
    Ok(report)
}

/// Draws `(x, y) ~ p` and tallies per-(atom, y) counts.
pub fn draw_counts(toy: &BernoulliToy, n: usize, seed: u64) -> Vec<[u64; 2]> {
    let mut counts = vec![[0u64; 2]; toy.atoms.len()];
    let mut r = rng::keyed_rng(seed, &[tag::DATA]);
    for _ in 0..n {
        let mut u = rng::next_f64(&mut r);
        let mut atom = toy.atoms.len() - 1;
        for (i, (_, px)) in toy.atoms.iter().enumerate() {
            if u < *px {
                atom = i;
                break;
            }
            u -= px;
        }
        let y = rng::next_f64(&mut r) < toy.true_cond[atom];
        counts[atom][usize::from(y)] += 1;
    }
    counts
}

/// `sup_θ |R(θ) - R_n(θ)|` over the θ-grid, with `R` by exact enumeration
/// and `R_n` from the supplied per-(atom, y) counts.
pub fn gap_from_counts(
    tm: &ToyModel,
    counts: &[[u64; 2]],
    n: usize,
    theta_grid_res: usize,
) -> Result<f64, VerifyError> {
    let toy = tm
        .bernoulli()
        .ok_or_else(|| VerifyError::Unsupported(format!("{} has no likelihood", tm.name)))?;
    let total = check_grid(tm, theta_grid_res)?;
    let mut sup = 0.0f64;
    let mut theta = [0.0f64; 3];
    for idx in 0..total {
        grid_point(idx, tm.dim, theta_grid_res, &mut theta);
        let mut risk = 0.0;
        let mut emp = 0.0;
        for (a, (_, px)) in toy.atoms.iter().enumerate() {
            let q_model = toy.cond_prob(&theta[..tm.dim], a);
            let q_true = toy.true_cond[a];
            let loss1 = bounded_loss(q_model, q_true);
            let loss0 = bounded_loss(1.0 - q_model, 1.0 - q_true);
            risk += px * (q_true * loss1 + (1.0 - q_true) * loss0);
            emp += (counts[a][1] as f64 * loss1 + counts[a][0] as f64 * loss0) / n as f64;
        }
        sup = sup.max((risk - emp).abs());
    }
    Ok(sup)
}

/// Generalization gap from `n` seeded draws.
pub fn generalization_gap(
    tm: &ToyModel,
    n: usize,
    seed: u64,
    theta_grid_res: usize,
) -> Result<f64, VerifyError> {
    let toy = tm
        .bernoulli()
        .ok_or_else(|| VerifyError::Unsupported(format!("{} has no likelihood", tm.name)))?;
    let counts = draw_counts(toy, n, seed);
    gap_from_counts(tm, &counts, n, theta_grid_res)
}

/// The micro-scale tied to `n` samples: `(log n / (γ n))^{3/8}`.
pub fn rate_epsilon(n: f64, gamma: f64) -> f64 {
    (n.ln() / (gamma * n)).powf(3.0 / 8.0)
}

/// Envelope rows from `(n, gap)` pairs: the smallest half of the `n` values
/// fits `ĉ = max gap/ε_n`, the larger half must stay below `ĉ·ε_n`.
pub fn rate_envelope_rows(pairs: &[(f64, f64)], gamma: f64) -> Report {
    let mut sorted: Vec<(f64, f64)> = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let fit_len = sorted.len().div_ceil(2);
    let c_hat = sorted[..fit_len]
        .iter()
        .map(|&(n, gap)| gap / rate_epsilon(n, gamma))
        .fold(0.0, f64::max);
    let mut report = Report::default();
    for (i, &(n, gap)) in sorted.iter().enumerate() {
        let envelope = c_hat * rate_epsilon(n, gamma);
        if i < fit_len {
            report.rows.push(CheckRow {
                check: "rate_fit".into(),
                param: format!("n={n:.0}"),
                lhs: gap,
                rhs: envelope,
                margin: envelope - gap,
                pass: true,
            });
        } else {
            report
                .rows
                .push(CheckRow::leq("rate_envelope", format!("n={n:.0}"), gap, envelope));
        }
    }
    report
}

/// Mean-gap rate check over seeded repetitions: the envelope fitted on the
/// small-`n` half must dominate the large-`n` half.
pub fn rate_shape_check(
    tm: &ToyModel,
    n_list: &[usize],
    gamma: f64,
    seeds: usize,
    theta_grid_res: usize,
) -> Result<Report, VerifyError> {
    let mut pairs = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let mut mean = 0.0;
        for s in 0..seeds {
            mean += generalization_gap(tm, n, s as u64, theta_grid_res)? / seeds as f64;
        }
        pairs.push((n as f64, mean));
    }
    Ok(rate_envelope_rows(&pairs, gamma))
}

/// Asymptotic rank check at ε = 1e-10:
/// `|d_ζ(ε) - (ζd + (1-ζ)r̂)| ≤ r̂·log(1+√μ)/|log ε| + 1e-9`.
pub fn rank_limit_check(ens: &SpectrumEnsemble, zeta: f64) -> Report {
    let eps = 1e-10;
    let r_hat = rank_estimate(ens, 1e-8) as f64;
    let mu = ens.max_eigenvalue();
    let d_val = two_sed(ens, eps, zeta).expect("valid ensemble");
    let limit = zeta * ens.d() as f64 + (1.0 - zeta) * r_hat;
    let lhs = (d_val - limit).abs();
    let rhs = r_hat * (1.0 + mu.sqrt()).ln() / eps.ln().abs() + 1e-9;
    Report {
        rows: vec![CheckRow::leq(
            "rank_limit",
            format!("zeta={zeta}"),
            lhs,
            rhs,
        )],
    }
}

/// Spectral upper bound on every grid ε:
/// `d_ζ(ε) ≤ ζd + r̂(1-ζ + log(1+√μ)/|log ε|)`.
pub fn upper_bound_check(ens: &SpectrumEnsemble, eps_grid: &[f64], zeta: f64) -> Report {
    let r_hat = rank_estimate(ens, 1e-8) as f64;
    let mu = ens.max_eigenvalue();
    let mut report = Report::default();
    for &eps in eps_grid {
        let lhs = two_sed(ens, eps, zeta).expect("valid ensemble");
        let rhs =
            zeta * ens.d() as f64 + r_hat * (1.0 - zeta + (1.0 + mu.sqrt()).ln() / eps.ln().abs());
        report
            .rows
            .push(CheckRow::leq("upper_bound", format!("eps={eps:.0e}"), lhs, rhs));
    }
    report
}

/// A constant full-rank single-block ensemble with eigenvalues in
/// `[0.5, 2]`, trace-normalized to `d`.
pub fn synthetic_full_rank_ensemble(d: usize, k: usize, seed: u64) -> SpectrumEnsemble {
    let mut r = rng::keyed_rng(seed, &[tag::PARAMS]);
    let mut evs: Vec<f64> = (0..d).map(|_| rng::uniform(&mut r, 0.5, 2.0)).collect();
    let tr: f64 = evs.iter().sum();
    for ev in &mut evs {
        *ev *= d as f64 / tr;
    }
    let spectra = (0..k)
        .map(|_| vec![Spectrum::from_eigenvalues(evs.clone())])
        .collect();
    SpectrumEnsemble::new(spectra, d).expect("well-formed synthetic ensemble")
}

/// Bounds suite: rank-limit and spectral upper bound on a constant
/// full-rank synthetic ensemble (d = 10) and on a rank-deficient variant.
pub fn bounds_suite(seed: u64) -> Report {
    let eps_grid: Vec<f64> = (1..=6).map(|i| 10f64.powi(-i)).collect();
    let mut report = Report::default();
    let full = synthetic_full_rank_ensemble(10, 5, seed);
    report.merge(rank_limit_check(&full, 0.0));
    report.merge(rank_limit_check(&full, 0.5));
    report.merge(upper_bound_check(&full, &eps_grid, 0.0));
    // rank-deficient: two blocks, one entirely zero
    let mut r = rng::keyed_rng(seed, &[tag::PARAMS, 1]);
    let spectra = (0..5)
        .map(|_| {
            vec![
                Spectrum::from_eigenvalues((0..4).map(|_| rng::uniform(&mut r, 0.1, 3.0)).collect()),
                Spectrum::from_eigenvalues(vec![0.0; 6]),
            ]
        })
        .collect();
    let deficient = SpectrumEnsemble::new(spectra, 10).unwrap();
    report.merge(upper_bound_check(&deficient, &eps_grid, 0.0));
    report.merge(rank_limit_check(&deficient, 0.0));
    report
}

/// Covering suite on the bundled toys over the standard ε list.
pub fn covering_suite() -> Result<Report, VerifyError> {
    let eps_list = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3];
    let mut report = Report::default();
    for toy in bundled_covering_toys() {
        report.merge(covering_slope_check(&toy, &eps_list)?);
    }
    Ok(report)
}

/// Generalization-gap suite on the bundled Bernoulli toy: rate envelope
/// over two decades of `n` plus the concentration comparison.
pub fn genbound_suite(seeds: usize) -> Result<Report, VerifyError> {
    let toy = bundled_bernoulli_toy();
    let n_list = [100, 1_000, 10_000, 100_000];
    let res = 101;
    let mut report = rate_shape_check(&toy, &n_list, 1.0, seeds, res)?;
    let mean_gap = |n: usize| -> Result<f64, VerifyError> {
        let mut m = 0.0;
        for s in 0..seeds {
            m += generalization_gap(&toy, n, s as u64, res)? / seeds as f64;
        }
        Ok(m)
    };
    let small = mean_gap(100)?;
    let large = mean_gap(10_000)?;
    report
        .rows
        .push(CheckRow::leq("gap_concentration", "n=1e4<n=1e2".into(), large, small));
    Ok(report)
}

/// σ² suite: exact single-block invariance of the normalized Fisher under
/// matched noise, plus a small shared-seed two-block comparison where the
/// effective dimension must move by less than two combined jackknife
/// standard errors.
pub fn sigma_suite(seed: u64) -> Report {
    let mut report = Report::default();
    // single block, matched noise, σ² separated by 100x
    {
        let mut spec_hi = parse_model_string("MLP 8-4").unwrap();
        spec_hi.set_sigma2(1e-2).unwrap();
        let mut spec_lo = spec_hi.clone();
        spec_lo.set_sigma2(1e-4).unwrap();
        let d = param_count(&spec_hi);
        let mut r = rng::keyed_rng(seed, &[tag::DATA]);
        let inputs: Vec<Activation> = (0..20)
            .map(|_| Activation::Flat((0..8).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect()))
            .collect();
        let mut max_rel = 0.0f64;
        for k in 0..5u64 {
            let theta = sample_params(&spec_hi, seed ^ k, SamplingScheme::FanInUniform);
            let hi = normalize_ensemble(
                vec![block_fim(&spec_hi, &theta, &inputs, seed + k).unwrap()],
                d,
            );
            let lo = normalize_ensemble(
                vec![block_fim(&spec_lo, &theta, &inputs, seed + k).unwrap()],
                d,
            );
            let (bh, bl) = (
                &hi.per_theta()[0].blocks()[0],
                &lo.per_theta()[0].blocks()[0],
            );
            for (a, b) in bh.entries().iter().zip(bl.entries()) {
                max_rel = max_rel.max((a - b).abs() / (1.0 + a.abs()));
            }
        }
        report
            .rows
            .push(CheckRow::leq("sigma_single_block", "1e-2_vs_1e-4".into(), max_rel, 1e-6));
    }
    // two blocks, three variances, shared seeds; input scale keeps the
    // noise well below the signal for every tested variance
    {
        let base = parse_model_string("MLP 6-5-3").unwrap();
        let d = param_count(&base);
        let mut r = rng::keyed_rng(seed, &[tag::DATA, 1]);
        let inputs: Vec<Activation> = (0..30)
            .map(|_| Activation::Flat((0..6).map(|_| rng::uniform(&mut r, -4.0, 4.0)).collect()))
            .collect();
        let eps_grid = [1e-1, 1e-3, 1e-5];
        let sigmas = [1e-1, 1e-2, 1e-3];
        let mut curves = Vec::new();
        for &s2 in &sigmas {
            let mut spec = base.clone();
            spec.set_sigma2(s2).unwrap();
            let raw: Vec<_> = (0..30u64)
                .map(|k| {
                    let theta = sample_params(&spec, seed ^ (1000 + k), SamplingScheme::FanInUniform);
                    block_fim(&spec, &theta, &inputs, seed + k).unwrap()
                })
                .collect();
            let fe = normalize_ensemble(raw, d);
            let ens = crate::fisher::ensemble_spectra(&fe).unwrap();
            curves.push(crate::effdim::sweep(ens, &eps_grid, 0.0).unwrap());
        }
        for (i, &eps) in eps_grid.iter().enumerate() {
            for a in 0..sigmas.len() {
                for b in (a + 1)..sigmas.len() {
                    let (ra, rb) = (&curves[a].rows[i], &curves[b].rows[i]);
                    let diff = (ra.d_zeta - rb.d_zeta).abs();
                    let budget =
                        2.0 * (ra.se_upper * ra.se_upper + rb.se_upper * rb.se_upper).sqrt();
                    report.rows.push(CheckRow::leq(
                        "sigma_two_block",
                        format!("eps={eps:.0e}:s{a}{b}"),
                        diff,
                        budget,
                    ));
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_field_needs_one_ball() {
        let toy = &bundled_covering_toys()[0];
        for eps in [0.5, 1e-2, 1e-4] {
            assert_eq!(covering_count(toy, eps, 51).unwrap(), 1);
        }
    }

    #[test]
    fn unit_interval_count_matches_arithmetic() {
        let toy = &bundled_covering_toys()[1];
        for eps in [0.05, 0.01, 3e-3] {
            let count = covering_count(toy, eps, 100_001).unwrap() as f64;
            let expect = (1.0 / (2.0 * eps)).ceil();
            assert!(
                (count - expect).abs() <= 1.0,
                "eps {eps}: {count} vs {expect}"
            );
        }
    }

    #[test]
    fn planar_disk_count_is_near_the_area_estimate() {
        let toy = ToyModel {
            name: "iso-2d".into(),
            dim: 2,
            kind: ToyKind::ConstantField(SymMatrix::identity(2)),
        };
        let eps = 0.1;
        let count = covering_count(&toy, eps, 201).unwrap() as f64;
        let estimate = (1.0 / (2.0 * eps)).powi(2) * std::f64::consts::PI;
        assert!(count <= 4.0 * estimate && count >= estimate / 4.0, "{count} vs {estimate}");
    }

    #[test]
    fn covering_count_is_antitone_in_eps() {
        let toy = &bundled_covering_toys()[1];
        let counts: Vec<usize> = [1e-1, 3e-2, 1e-2]
            .iter()
            .map(|&e| covering_count(toy, e, 5_001).unwrap())
            .collect();
        assert!(counts[0] <= counts[1] && counts[1] <= counts[2]);
    }

    #[test]
    fn dimension_cap_is_enforced() {
        let toy = ToyModel {
            name: "big".into(),
            dim: 4,
            kind: ToyKind::ZeroField,
        };
        assert!(matches!(
            covering_count(&toy, 0.1, 11),
            Err(VerifyError::TooLarge(_))
        ));
    }

    #[test]
    fn slope_check_passes_on_bundled_toys() {
        for toy in bundled_covering_toys() {
            let report = covering_slope_check(&toy, &[1e-1, 3e-2, 1e-2]).unwrap();
            assert!(report.all_pass(), "{}: {:?}", toy.name, report.rows);
        }
    }

    #[test]
    fn exact_empirical_frequencies_give_zero_gap() {
        let tm = bundled_bernoulli_toy();
        let toy = tm.bernoulli().unwrap();
        // counts exactly proportional to p(x, y)
        let n = 1600;
        let counts: Vec<[u64; 2]> = toy
            .atoms
            .iter()
            .enumerate()
            .map(|(a, (_, px))| {
                let total = px * n as f64;
                let ones = total * toy.true_cond[a];
                [(total - ones) as u64, ones as u64]
            })
            .collect();
        assert_eq!(counts.iter().map(|c| c[0] + c[1]).sum::<u64>(), n as u64);
        let gap = gap_from_counts(&tm, &counts, n, 101).unwrap();
        assert!(gap <= 1e-12, "gap {gap}");
    }

    #[test]
    fn gap_is_deterministic_given_seed() {
        let tm = bundled_bernoulli_toy();
        let a = generalization_gap(&tm, 500, 3, 101).unwrap();
        let b = generalization_gap(&tm, 500, 3, 101).unwrap();
        assert_eq!(a, b);
        assert!(a >= 0.0);
    }

    #[test]
    fn gap_concentrates_with_sample_size() {
        let tm = bundled_bernoulli_toy();
        let mean = |n: usize| -> f64 {
            (0..20)
                .map(|s| generalization_gap(&tm, n, s, 101).unwrap())
                .sum::<f64>()
                / 20.0
        };
        assert!(mean(10_000) < mean(100));
    }

    #[test]
    fn rate_epsilon_spot_value() {
        let e = std::f64::consts::E;
        let got = rate_epsilon(e, 1.0);
        let expect = (-3.0 / 8.0f64).exp();
        assert!((got - expect).abs() < 1e-14);
    }

    #[test]
    fn zero_gap_stub_sits_inside_the_envelope() {
        let pairs = [(100.0, 0.0), (1000.0, 0.0), (10_000.0, 0.0)];
        let report = rate_envelope_rows(&pairs, 1.0);
        assert!(report.all_pass());
    }

    #[test]
    fn closed_form_fisher_matches_monte_carlo() {
        let tm = bundled_bernoulli_toy();
        let toy = tm.bernoulli().unwrap();
        let theta = [0.4];
        let exact = toy.fisher_at(&theta);
        let n = 100_000;
        let mc = toy.fisher_mc(&theta, n, 5);
        // the entry is a mean of i.i.d. squared scores; bound the deviation
        // by 3 standard errors estimated from the spread of the estimator
        let spread = exact.get(0, 0).abs().max(1e-6);
        let se = 3.0 * spread / (n as f64).sqrt() * 3.0;
        assert!(
            (mc.get(0, 0) - exact.get(0, 0)).abs() <= se,
            "{} vs {}",
            mc.get(0, 0),
            exact.get(0, 0)
        );
    }

    #[test]
    fn scalar_gaussian_block_fim_matches_closed_form() {
        // for a 1-parameter linear Gaussian block the exact Fisher is
        // E[x₀²]/σ²; the Monte Carlo estimator must land within 3 SE
        let mut spec = parse_model_string("MLP 1-1").unwrap();
        spec.set_sigma2(1e-2).unwrap();
        let theta = crate::netmodel::ParamVector::new(vec![vec![0.5]], &spec).unwrap();
        let mut r = rng::keyed_rng(8, &[tag::DATA]);
        let inputs: Vec<Activation> = (0..20_000)
            .map(|_| Activation::Flat(vec![rng::uniform(&mut r, -1.0, 1.0)]))
            .collect();
        let ex2: f64 =
            inputs.iter().map(|a| a.as_slice()[0].powi(2)).sum::<f64>() / inputs.len() as f64;
        let exact = ex2 / spec.sigma2();
        let bf = block_fim(&spec, &theta, &inputs, 3).unwrap();
        let got = bf.blocks()[0].get(0, 0);
        // var of the per-sample estimate x²z²/σ² is ~2·E[x⁴]/σ⁴
        let se = (2.0 * ex2 * ex2).sqrt() / spec.sigma2() / (inputs.len() as f64).sqrt();
        assert!((got - exact).abs() <= 3.0 * se, "{got} vs {exact} (se {se})");
    }

    #[test]
    fn bounds_suite_is_green() {
        let report = bounds_suite(1);
        assert!(report.all_pass(), "{:?}", report.rows);
    }

    #[test]
    fn report_csv_has_header() {
        let report = bounds_suite(2);
        let csv = report.to_csv();
        assert!(csv.starts_with("check,param,lhs,rhs,margin,pass\n"));
        assert!(csv.lines().count() > 1);
    }
}
