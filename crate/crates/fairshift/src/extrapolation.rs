//! The extrapolation map: the smoothest extension of source outputs to the
//! target points, plus numerical verification of its two structural
//! properties (Lipschitz stability and the quadratic-form error bound).
//!
//! For the Laplacian regularizer the map has a closed form. Writing the
//! pooled quadratic in blocks, the minimizer over the target outputs `t` of
//! `R_n(v, t)` satisfies `L_TT t = -L_TS v`, so
//! `y*(v) = -L_TT^{-1} L_TS v` whenever the target block is nonsingular
//! (`mu_R > 0`). A gradient-descent minimizer is kept alongside as an
//! independent route.
//!
//! Normalization is fixed once and stated in every report:
//! `R_n(w) = (1/n^2) w^T L w`, `mu_R = lambda_min(L_TT)`,
//! `L_R = lambda_max(L)`. Under this convention the verified inequalities
//! read
//!
//! - `||y*(v1) - y*(v2)|| <= (L_R / mu_R) ||v1 - v2||`
//! - `||v_t - y*(v_s)||^2 <= (n^2 / mu_R) R_n(v_s, v_t)`
//!
//! (the second is the strong-convexity bound written out for this scaling of
//! `R_n` and `mu_R`; at `n = 2` it is tight).

use crate::error::{Error, Result};
use crate::kernel_graph::{LaplacianGraph, DISCONNECTED_TOL};
use crate::regularizers::laplacian_regularizer;
use crate::seeding::{child_seed, rng_from_seed};
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ExtrapolationSolver {
    ClosedForm,
    Iterative,
}

#[derive(Debug, Clone)]
pub struct ExtrapolationResult {
    /// Extended outputs on the target block, length `n_t`.
    pub extended: DVector<f64>,
    /// `||L_TS v + L_TT t||` at the returned solution.
    pub residual: f64,
    pub solver: ExtrapolationSolver,
    /// Whether the Cholesky solve needed a diagonal jitter.
    pub jitter_used: bool,
}

fn check_connected(graph: &LaplacianGraph) -> Result<()> {
    if graph.mu_r() <= DISCONNECTED_TOL {
        return Err(Error::numeric(format!(
            "target block is singular (mu_R = {:.3e}); the graph is disconnected",
            graph.mu_r()
        )));
    }
    Ok(())
}

fn check_outputs(graph: &LaplacianGraph, v: &DVector<f64>) -> Result<()> {
    if v.len() != graph.n_source() {
        return Err(Error::validation(format!(
            "source outputs have length {}, graph has {} source nodes",
            v.len(),
            graph.n_source()
        )));
    }
    Ok(())
}

/// `y*(v) = -L_TT^{-1} L_TS v` by symmetric positive-definite solve.
pub fn extrapolate_closed_form(
    graph: &LaplacianGraph,
    source_outputs: &DVector<f64>,
) -> Result<ExtrapolationResult> {
    check_outputs(graph, source_outputs)?;
    check_connected(graph)?;
    let l_tt = graph.l_tt();
    let l_ts = graph.l_ts();
    let rhs = -(&l_ts * source_outputs);
    let (solution, jitter_used) = match l_tt.clone().cholesky() {
        Some(chol) => (chol.solve(&rhs), false),
        None => {
            let nt = graph.n_target() as f64;
            let jitter = 1e-12 * l_tt.trace() / nt;
            let jittered = &l_tt + DMatrix::<f64>::identity(l_tt.nrows(), l_tt.ncols()) * jitter;
            let chol = jittered.cholesky().ok_or_else(|| {
                Error::numeric("target block not positive definite even with jitter")
            })?;
            (chol.solve(&rhs), true)
        }
    };
    let residual = (&l_ts * source_outputs + &l_tt * &solution).norm();
    let tol = 1e-8 * (1.0 + source_outputs.norm());
    if residual > tol {
        return Err(Error::numeric(format!(
            "extrapolation residual {residual:.3e} exceeds tolerance {tol:.3e}"
        )));
    }
    Ok(ExtrapolationResult {
        extended: solution,
        residual,
        solver: ExtrapolationSolver::ClosedForm,
        jitter_used,
    })
}

/// Gradient descent on `t -> R_n(v, t)`; the independent route used to check
/// the closed form. Step size `1/(2 lambda_max(L))` guarantees descent.
pub fn extrapolate_iterative(
    graph: &LaplacianGraph,
    source_outputs: &DVector<f64>,
) -> Result<ExtrapolationResult> {
    check_outputs(graph, source_outputs)?;
    check_connected(graph)?;
    let l_tt = graph.l_tt();
    let l_ts = graph.l_ts();
    let b = &l_ts * source_outputs;
    let mut t = DVector::zeros(graph.n_target());
    let step = 1.0 / (2.0 * graph.l_r().max(DISCONNECTED_TOL));
    let tol = 1e-10 * (1.0 + source_outputs.norm());
    let max_iter = 500_000usize;
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let grad = &b + &l_tt * &t;
        residual = grad.norm();
        if residual <= tol {
            break;
        }
        t -= grad * (2.0 * step);
    }
    if residual > 1e-8 * (1.0 + source_outputs.norm()) {
        return Err(Error::numeric(format!(
            "iterative extrapolation stalled at residual {residual:.3e} after {max_iter} iterations"
        )));
    }
    Ok(ExtrapolationResult {
        extended: t,
        residual,
        solver: ExtrapolationSolver::Iterative,
        jitter_used: false,
    })
}

/// Outcome of a randomized inequality check; `worst_violation` is
/// `max(LHS - RHS)` over trials, so any value at or below the tolerance
/// means every trial passed.
#[derive(Debug, Clone, Serialize)]
pub struct InequalityReport {
    /// The verified inequality with the normalization written out.
    pub inequality: String,
    pub trials: usize,
    pub violations: usize,
    pub worst_violation: f64,
    pub constants: std::collections::BTreeMap<String, f64>,
}

impl InequalityReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

const TOL: f64 = 1e-9;

/// Checks, over random output vectors, that the extrapolation map is
/// `(L_R/mu_R)`-Lipschitz and that the quadratic form controls the distance
/// of any target assignment from the smoothest extension.
pub fn verify_lemma1(
    graph: &LaplacianGraph,
    trials: usize,
    seed: u64,
) -> Result<(InequalityReport, InequalityReport)> {
    check_connected(graph)?;
    let ns = graph.n_source();
    let nt = graph.n_target();
    let n = graph.len();
    let lipschitz = graph.l_r() / graph.mu_r();

    let mut lip_worst = f64::NEG_INFINITY;
    let mut lip_viol = 0usize;
    let mut quad_worst = f64::NEG_INFINITY;
    let mut quad_viol = 0usize;
    for trial in 0..trials {
        let mut rng = rng_from_seed(child_seed(seed, trial as u64));
        let draw = |rng: &mut rand_chacha::ChaCha8Rng, len: usize| {
            DVector::from_fn(len, |_, _| {
                let v: f64 = StandardNormal.sample(rng);
                v
            })
        };
        // (a) Lipschitz stability of y*.
        let v1 = draw(&mut rng, ns);
        let v2 = draw(&mut rng, ns);
        let y1 = extrapolate_closed_form(graph, &v1)?.extended;
        let y2 = extrapolate_closed_form(graph, &v2)?.extended;
        let lhs = (&y1 - &y2).norm();
        let rhs = lipschitz * (&v1 - &v2).norm();
        lip_worst = lip_worst.max(lhs - rhs);
        if lhs > rhs + TOL {
            lip_viol += 1;
        }

        // (b) distance to the smoothest extension vs the quadratic form.
        let vs = draw(&mut rng, ns);
        let vt = draw(&mut rng, nt);
        let ystar = extrapolate_closed_form(graph, &vs)?.extended;
        let mut pooled = DVector::zeros(n);
        pooled.rows_mut(0, ns).copy_from(&vs);
        pooled.rows_mut(ns, nt).copy_from(&vt);
        let rn = laplacian_regularizer(graph, &pooled)?.value;
        let lhs = (&vt - &ystar).norm_squared();
        let rhs = (n * n) as f64 / graph.mu_r() * rn;
        quad_worst = quad_worst.max(lhs - rhs);
        if lhs > rhs + TOL {
            quad_viol += 1;
        }
    }
    let mut constants = std::collections::BTreeMap::new();
    constants.insert("mu_R".into(), graph.mu_r());
    constants.insert("L_R".into(), graph.l_r());
    constants.insert("n_s".into(), ns as f64);
    constants.insert("n_t".into(), nt as f64);
    let lip = InequalityReport {
        inequality: "||y*(v1) - y*(v2)|| <= (L_R/mu_R) ||v1 - v2||, \
                     mu_R = lambda_min(L_TT), L_R = lambda_max(L)"
            .into(),
        trials,
        violations: lip_viol,
        worst_violation: lip_worst,
        constants: constants.clone(),
    };
    let quad = InequalityReport {
        inequality: "||v_t - y*(v_s)||^2 <= (n^2/mu_R) R_n(v_s, v_t), \
                     R_n(w) = w^T L w / n^2, mu_R = lambda_min(L_TT)"
            .into(),
        trials,
        violations: quad_viol,
        worst_violation: quad_worst,
        constants,
    };
    Ok((lip, quad))
}

/// Checks the two quadratic-loss displays used by the bound proofs, for the
/// implemented loss `L(a,b) = 0.5 (a-b)^2` with curvature constants
/// `mu_L = L_L = 1` along per-coordinate slices (both hold with equality).
pub fn verify_lemma2(trials: usize, length: usize, seed: u64) -> Result<InequalityReport> {
    let mut worst = f64::NEG_INFINITY;
    let mut violations = 0usize;
    for trial in 0..trials {
        let mut rng = rng_from_seed(child_seed(seed, trial as u64));
        let mut gauss = |_: usize, _: usize| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        };
        let a = DVector::from_fn(length, &mut gauss);
        let b = DVector::from_fn(length, &mut gauss);
        // ||a - b||^2 <= (2/mu_L) sum_i L(a_i, b_i)
        let loss_sum: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| 0.5 * (x - y) * (x - y))
            .sum();
        let lhs = (&a - &b).norm_squared();
        let rhs = 2.0 * loss_sum;
        worst = worst.max(lhs - rhs);
        if lhs > rhs + TOL {
            violations += 1;
        }
        // |d/da L(a,b)| <= L_L |a - b| per coordinate
        for (x, y) in a.iter().zip(b.iter()) {
            let lhs = (*x - *y).abs(); // |partial_1 L| = |a - b|
            let rhs = (*x - *y).abs();
            worst = worst.max(lhs - rhs);
            if lhs > rhs + TOL {
                violations += 1;
            }
        }
    }
    let mut constants = std::collections::BTreeMap::new();
    constants.insert("mu_L".into(), 1.0);
    constants.insert("L_L".into(), 1.0);
    Ok(InequalityReport {
        inequality: "||a - b||^2 <= (2/mu_L) sum_i 0.5 (a_i - b_i)^2  and  \
                     |partial_1 L(a,b)| <= L_L |a - b|, mu_L = L_L = 1"
            .into(),
        trials,
        violations,
        worst_violation: worst,
        constants,
    })
}
