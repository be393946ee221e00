//! Model classes and regularized risk minimization under quadratic loss.
//!
//! Three fits are provided:
//!
//! - [`fit_erm`]: plain least squares on the labeled source sample;
//! - [`fit_regularized`]: least squares plus `lambda * R_n(f(X))` with the
//!   graph-Laplacian regularizer over pooled source and target inputs — the
//!   objective stays quadratic, so the normal equations are solved directly;
//! - [`fit_adversarial`]: least squares plus a transport-constrained
//!   adversarial penalty, solved by alternating inner ascent on the
//!   displacements with outer gradient steps on the weights.
//!
//! Only the quadratic loss is implemented; its curvature constants under the
//! per-coordinate slice convention are `mu_L = L_L = 1` and are what the
//! bound reports use.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel_graph::{KernelFamily, KernelSpec, LaplacianGraph};
use crate::regularizers::{self, AdversaryConfig};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Anything that maps a feature vector to a scalar output.
///
/// `input_gradient` is the derivative with respect to the input where it is
/// defined; families that are not differentiable return `None` and are
/// rejected by the adversarial routines.
pub trait Predictor {
    fn predict(&self, x: &[f64]) -> f64;

    fn input_gradient(&self, x: &[f64]) -> Option<Vec<f64>>;

    fn predict_rows(&self, xs: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_fn(xs.nrows(), |i, _| {
            self.predict(xs.row(i).transpose().as_slice())
        })
    }
}

impl Predictor for crate::data::RegressionFn {
    fn predict(&self, x: &[f64]) -> f64 {
        self.eval(x)
    }

    /// Defined-almost-everywhere derivative; the step function reports the
    /// zero gradient it has off its jump.
    fn input_gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(self.grad(x))
    }
}

/// Feature maps used to realize well- and mis-specified model classes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FeatureMap {
    /// `[x_1, ..., x_p, 1]`
    Affine,
    /// `[x_1, ..., x_p, x_1^2, ..., x_p^2, 1]`
    Quadratic,
    /// `[sin(frequency x_1), 1]`
    Sine { frequency: f64 },
    /// `[1(x_1 > threshold), 1]` — not differentiable.
    Step { threshold: f64 },
}

impl FeatureMap {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            FeatureMap::Affine => {
                let mut v = x.to_vec();
                v.push(1.0);
                v
            }
            FeatureMap::Quadratic => {
                let mut v = x.to_vec();
                v.extend(x.iter().map(|a| a * a));
                v.push(1.0);
                v
            }
            FeatureMap::Sine { frequency } => vec![(frequency * x[0]).sin(), 1.0],
            FeatureMap::Step { threshold } => {
                vec![if x[0] > *threshold { 1.0 } else { 0.0 }, 1.0]
            }
        }
    }

    /// Gradient of `w . phi(x)` with respect to `x`, when defined.
    fn input_gradient(&self, x: &[f64], w: &[f64]) -> Option<Vec<f64>> {
        match self {
            FeatureMap::Affine => Some(w[..x.len()].to_vec()),
            FeatureMap::Quadratic => {
                let p = x.len();
                Some((0..p).map(|j| w[j] + 2.0 * w[p + j] * x[j]).collect())
            }
            FeatureMap::Sine { frequency } => {
                let mut g = vec![0.0; x.len()];
                g[0] = w[0] * frequency * (frequency * x[0]).cos();
                Some(g)
            }
            FeatureMap::Step { .. } => None,
        }
    }
}

/// Model family. `Linear` is affine: the intercept is the last weight.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ModelFamily {
    Linear,
    FeatureMapLinear { feature_map: FeatureMap },
    /// `f(x) = sum_j alpha_j K(x, anchor_j)` over stored anchor points.
    KernelExpansion { kernel: KernelSpec },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: ModelFamily,
    /// Conditioning jitter added to the normal-matrix diagonal.
    #[serde(default)]
    pub ridge: f64,
}

impl ModelSpec {
    pub fn linear(ridge: f64) -> Self {
        ModelSpec {
            family: ModelFamily::Linear,
            ridge,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ridge < 0.0 {
            return Err(Error::validation("ridge must be nonnegative"));
        }
        Ok(())
    }

    fn basis(&self, anchors: Option<&[Vec<f64>]>, x: &[f64]) -> Vec<f64> {
        match &self.family {
            ModelFamily::Linear => FeatureMap::Affine.apply(x),
            ModelFamily::FeatureMapLinear { feature_map } => feature_map.apply(x),
            ModelFamily::KernelExpansion { kernel } => anchors
                .expect("kernel expansion requires anchors")
                .iter()
                .map(|a| kernel.of_distance(kernel.metric.distance(x, a)))
                .collect(),
        }
    }
}

/// A fitted model. Serializes to JSON with full-precision floats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub weights: Vec<f64>,
    pub anchors: Option<Vec<Vec<f64>>>,
}

impl Model {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Model> {
        Ok(serde_json::from_str(s)?)
    }
}

impl Predictor for Model {
    fn predict(&self, x: &[f64]) -> f64 {
        self.spec
            .basis(self.anchors.as_deref(), x)
            .iter()
            .zip(&self.weights)
            .map(|(b, w)| b * w)
            .sum()
    }

    fn input_gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        match &self.spec.family {
            ModelFamily::Linear => FeatureMap::Affine.input_gradient(x, &self.weights),
            ModelFamily::FeatureMapLinear { feature_map } => {
                feature_map.input_gradient(x, &self.weights)
            }
            ModelFamily::KernelExpansion { kernel } => {
                let anchors = self.anchors.as_ref()?;
                let h = kernel.bandwidth;
                let mut g = vec![0.0; x.len()];
                if h.is_infinite() {
                    return Some(g);
                }
                for (a, &w) in anchors.iter().zip(&self.weights) {
                    let d = kernel.metric.distance(x, a);
                    let k = kernel.of_distance(d);
                    let c = match kernel.family {
                        KernelFamily::Rbf => -w * k / (h * h),
                        // a.e. derivative; zero exactly at d = 0
                        KernelFamily::Laplace => {
                            if d > 0.0 {
                                -w * k / (h * d)
                            } else {
                                0.0
                            }
                        }
                    };
                    for j in 0..x.len() {
                        g[j] += c * (x[j] - a[j]);
                    }
                }
                Some(g)
            }
        }
    }
}

/// What a fit cost and whether it settled.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub train_loss: f64,
    pub regularizer_value: f64,
    /// `train_loss + lambda * regularizer_value`.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn design_matrix(
    spec: &ModelSpec,
    anchors: Option<&[Vec<f64>]>,
    xs: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = xs.nrows();
    let first = spec.basis(anchors, xs.row(0).transpose().as_slice());
    let d = first.len();
    let mut out = DMatrix::zeros(n, d);
    for i in 0..n {
        let row = spec.basis(anchors, xs.row(i).transpose().as_slice());
        for j in 0..d {
            out[(i, j)] = row[j];
        }
    }
    out
}

fn solve_normal(normal: &DMatrix<f64>, rhs: &DVector<f64>, ridge: f64) -> Result<DVector<f64>> {
    let d = normal.nrows();
    let sys = normal + DMatrix::<f64>::identity(d, d) * ridge;
    let solve = |b: &DVector<f64>| -> Option<DVector<f64>> {
        if let Some(chol) = sys.clone().cholesky() {
            Some(chol.solve(b))
        } else {
            sys.clone().lu().solve(b)
        }
    };
    let mut w = solve(rhs).ok_or_else(|| {
        Error::numeric("normal matrix is singular; set ridge > 0 to regularize the solve")
    })?;
    // Iterative refinement recovers the digits lost when lambda makes the
    // system badly scaled.
    for _ in 0..3 {
        let r = rhs - &sys * &w;
        if r.norm() <= 1e-14 * (1.0 + rhs.norm()) {
            break;
        }
        match solve(&r) {
            Some(dw) => w += dw,
            None => break,
        }
    }
    Ok(w)
}

fn check_stationarity(
    normal: &DMatrix<f64>,
    rhs: &DVector<f64>,
    w: &DVector<f64>,
    ridge: f64,
    y: &DVector<f64>,
) -> Result<()> {
    let d = normal.nrows();
    let sys = normal + DMatrix::<f64>::identity(d, d) * ridge;
    let grad = &sys * w - rhs;
    let tol = 1e-8 * (1.0 + y.norm());
    if grad.norm() > tol {
        return Err(Error::numeric(format!(
            "solver residual {:.3e} exceeds tolerance {:.3e}",
            grad.norm(),
            tol
        )));
    }
    Ok(())
}

fn mean_half_square_loss(pred: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    pred.iter()
        .zip(y.iter())
        .map(|(p, t)| 0.5 * (p - t) * (p - t))
        .sum::<f64>()
        / n
}

fn source_labels(source: &Dataset) -> Result<&DVector<f64>> {
    source
        .training_labels()
        .ok_or_else(|| Error::validation("source dataset must carry labels for fitting"))
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// Least-squares fit on the labeled source data.
pub fn fit_erm(source: &Dataset, spec: &ModelSpec) -> Result<(Model, FitReport)> {
    spec.validate()?;
    let y = source_labels(source)?;
    let anchors: Option<Vec<Vec<f64>>> = match spec.family {
        ModelFamily::KernelExpansion { .. } => Some(matrix_rows(source.features())),
        _ => None,
    };
    let phi = design_matrix(spec, anchors.as_deref(), source.features());
    let n = source.len() as f64;
    let normal = phi.transpose() * &phi / n;
    let rhs = phi.transpose() * y / n;
    let w = solve_normal(&normal, &rhs, spec.ridge)?;
    check_stationarity(&normal, &rhs, &w, spec.ridge, y)?;
    let model = Model {
        spec: spec.clone(),
        weights: w.iter().copied().collect(),
        anchors,
    };
    let train_loss = mean_half_square_loss(&model.predict_rows(source.features()), y);
    let report = FitReport {
        train_loss,
        regularizer_value: 0.0,
        objective: train_loss,
        iterations: 1,
        converged: true,
    };
    Ok((model, report))
}

/// Laplacian-regularized fit: minimizes
/// `(1/n_s) sum 0.5 (y_i - f(x_i))^2 + lambda (1/n^2) f(X)^T L f(X)`
/// with the graph built on `[source; target]`. Target labels are never read.
pub fn fit_regularized(
    source: &Dataset,
    target: &Dataset,
    spec: &ModelSpec,
    graph: &LaplacianGraph,
    lambda: f64,
) -> Result<(Model, FitReport)> {
    spec.validate()?;
    if lambda < 0.0 {
        return Err(Error::validation("lambda must be nonnegative"));
    }
    let y = source_labels(source)?;
    let ns = source.len();
    let nt = target.len();
    if graph.n_source() != ns || graph.n_target() != nt {
        return Err(Error::validation(
            "graph block sizes do not match the datasets",
        ));
    }
    let n = ns + nt;
    let p = source.dim();
    let mut pooled = DMatrix::zeros(n, p);
    pooled.view_mut((0, 0), (ns, p)).copy_from(source.features());
    pooled.view_mut((ns, 0), (nt, p)).copy_from(target.features());

    let anchors: Option<Vec<Vec<f64>>> = match spec.family {
        ModelFamily::KernelExpansion { .. } => Some(matrix_rows(&pooled)),
        _ => None,
    };
    let phi_all = design_matrix(spec, anchors.as_deref(), &pooled);
    let phi_s = phi_all.rows(0, ns).into_owned();
    let nsf = ns as f64;
    let n2 = (n * n) as f64;
    let normal = phi_s.transpose() * &phi_s / nsf
        + (phi_all.transpose() * graph.laplacian() * &phi_all) * (2.0 * lambda / n2);
    let rhs = phi_s.transpose() * y / nsf;
    let w = solve_normal(&normal, &rhs, spec.ridge)?;
    check_stationarity(&normal, &rhs, &w, spec.ridge, y)?;
    let model = Model {
        spec: spec.clone(),
        weights: w.iter().copied().collect(),
        anchors,
    };
    let outputs = model.predict_rows(&pooled);
    let reg = regularizers::laplacian_regularizer(graph, &outputs)?;
    let train_loss = mean_half_square_loss(&model.predict_rows(source.features()), y);
    let report = FitReport {
        train_loss,
        regularizer_value: reg.value,
        objective: train_loss + lambda * reg.value,
        iterations: 1,
        converged: true,
    };
    Ok((model, report))
}

/// True when the last 10 entries changed by less than 1e-6 relative.
fn settled(history: &[f64]) -> bool {
    if history.len() < 11 {
        return false;
    }
    let tail = &history[history.len() - 11..];
    let base = tail[0].abs().max(1e-12);
    tail.windows(2).all(|w| (w[0] - w[1]).abs() <= 1e-6 * base)
}

/// Adversarially regularized fit (the transport-budget penalty with `g = f`):
/// inner projected gradient ascent on per-sample displacements, outer
/// gradient descent on the weights with step halving, so the objective never
/// increases by more than 1e-8 across outer iterations.
pub fn fit_adversarial(
    source: &Dataset,
    spec: &ModelSpec,
    cfg: &AdversaryConfig,
    lambda: f64,
) -> Result<(Model, FitReport)> {
    spec.validate()?;
    cfg.validate()?;
    if lambda < 0.0 {
        return Err(Error::validation("lambda must be nonnegative"));
    }
    let y = source_labels(source)?;
    let xs = source.features();
    let ns = source.len();
    if matches!(spec.family, ModelFamily::KernelExpansion { .. }) {
        return Err(Error::Unsupported(
            "adversarial fitting is implemented for linear-in-features families".into(),
        ));
    }
    let phi = design_matrix(spec, None, xs);
    let d = phi.ncols();
    let nsf = ns as f64;

    // Start from the ERM solution; with eps = 0 the objective already is at
    // its optimum and the loop settles immediately.
    let (erm, _) = fit_erm(source, spec)?;
    let mut w = DVector::from_vec(erm.weights.clone());

    let model_of = |w: &DVector<f64>| Model {
        spec: spec.clone(),
        weights: w.iter().copied().collect(),
        anchors: None,
    };

    let objective = |w: &DVector<f64>| -> Result<(f64, DMatrix<f64>)> {
        let m = model_of(w);
        let (reg, disp) = regularizers::adversarial_regularizer(&m, &m, source, cfg)?;
        let loss = mean_half_square_loss(&m.predict_rows(xs), y);
        Ok((loss + lambda * reg.value, disp))
    };

    let max_outer = 400usize;
    let mut step = cfg.step_size;
    let (mut obj, mut disp) = objective(&w)?;
    let mut history = vec![obj];
    let mut iterations = 0usize;
    for _ in 0..max_outer {
        iterations += 1;
        let m = model_of(&w);
        // Danskin gradient at the current inner maximizer.
        let mut grad = phi.transpose() * (&phi * &w - y) / nsf;
        if cfg.budget > 0.0 {
            for i in 0..ns {
                let xi: Vec<f64> = xs.row(i).iter().copied().collect();
                let mut xp = xi.clone();
                for (j, v) in xp.iter_mut().enumerate() {
                    *v += disp[(i, j)];
                }
                let diff = m.predict(&xi) - m.predict(&xp);
                let bi = spec.basis(None, &xi);
                let bp = spec.basis(None, &xp);
                for k in 0..d {
                    grad[k] += lambda * 2.0 / nsf * diff * (bi[k] - bp[k]);
                }
            }
        }
        if !grad.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric(format!(
                "adversarial fit diverged at outer iteration {iterations}"
            )));
        }
        let mut accepted = false;
        for _ in 0..40 {
            let w_try = &w - &grad * step;
            let (obj_try, disp_try) = objective(&w_try)?;
            if obj_try <= obj + 1e-8 {
                w = w_try;
                obj = obj_try;
                disp = disp_try;
                accepted = true;
                step = (step * 1.2).min(cfg.step_size);
                break;
            }
            step *= 0.5;
        }
        history.push(obj);
        if !obj.is_finite() {
            return Err(Error::numeric(format!(
                "adversarial fit objective became non-finite at iteration {iterations}; \
                 trace tail: {:?}",
                &history[history.len().saturating_sub(5)..]
            )));
        }
        if !accepted || settled(&history) {
            break;
        }
    }
    let model = model_of(&w);
    let (reg, _) = regularizers::adversarial_regularizer(&model, &model, source, cfg)?;
    let train_loss = mean_half_square_loss(&model.predict_rows(xs), y);
    let report = FitReport {
        train_loss,
        regularizer_value: reg.value,
        objective: train_loss + lambda * reg.value,
        iterations,
        converged: settled(&history),
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Domain};
    use crate::kernel_graph::{build_graph, KernelSpec};
    use approx::assert_abs_diff_eq;

    fn labeled(rows: &[(f64, f64)]) -> Dataset {
        let n = rows.len();
        let x = DMatrix::from_fn(n, 1, |i, _| rows[i].0);
        let y = DVector::from_fn(n, |i, _| rows[i].1);
        Dataset::new(x, Some(y), Domain::Source, None).unwrap()
    }

    fn unlabeled(xs: &[f64]) -> Dataset {
        let x = DMatrix::from_fn(xs.len(), 1, |i, _| xs[i]);
        Dataset::new(x, None, Domain::Target, None).unwrap()
    }

    #[test]
    fn erm_recovers_exact_linear_data() {
        let data = labeled(&[(0.0, 1.0), (1.0, 3.0), (2.0, 5.0), (-1.0, -1.0)]);
        let (model, report) = fit_erm(&data, &ModelSpec::linear(0.0)).unwrap();
        assert_abs_diff_eq!(model.weights[0], 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(model.weights[1], 1.0, epsilon = 1e-9);
        assert!(report.train_loss <= 1e-10);
    }

    #[test]
    fn erm_is_invariant_to_sample_duplication() {
        let base = [(0.0, 0.3), (0.7, 1.0), (1.5, 0.2), (2.0, 2.2)];
        let doubled: Vec<(f64, f64)> = base.iter().chain(base.iter()).copied().collect();
        let (m1, _) = fit_erm(&labeled(&base), &ModelSpec::linear(0.0)).unwrap();
        let (m2, _) = fit_erm(&labeled(&doubled), &ModelSpec::linear(0.0)).unwrap();
        for (a, b) in m1.weights.iter().zip(&m2.weights) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn erm_matches_pseudoinverse_oracle() {
        let mut rng = crate::seeding::rng_from_seed(3);
        use rand::Rng;
        let n = 40;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.gen_range(-1.0..1.0));
        let y = DVector::from_fn(n, |i, _| {
            1.5 * x[(i, 0)] - 0.3 * x[(i, 1)] + 0.2 + 0.01 * rng.gen_range(-1.0..1.0)
        });
        let data = Dataset::new(x.clone(), Some(y.clone()), Domain::Source, None).unwrap();
        let (model, _) = fit_erm(&data, &ModelSpec::linear(0.0)).unwrap();
        // Normal-equation oracle via SVD pseudoinverse.
        let mut phi = DMatrix::zeros(n, 3);
        phi.view_mut((0, 0), (n, 2)).copy_from(&x);
        phi.view_mut((0, 2), (n, 1)).fill(1.0);
        let svd = phi.svd(true, true);
        let w = svd.solve(&y, 1e-12).unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(model.weights[k], w[k], epsilon = 1e-8);
        }
    }

    #[test]
    fn regularized_with_zero_lambda_matches_erm() {
        let src = labeled(&[(0.0, 0.1), (0.5, 0.8), (1.0, 1.1), (1.5, 0.4)]);
        let tgt = unlabeled(&[0.2, 0.9, 1.7]);
        let graph = build_graph(&src, &tgt, &KernelSpec::rbf(0.8)).unwrap();
        let (erm, _) = fit_erm(&src, &ModelSpec::linear(0.0)).unwrap();
        let (reg, report) =
            fit_regularized(&src, &tgt, &ModelSpec::linear(0.0), &graph, 0.0).unwrap();
        for (a, b) in erm.weights.iter().zip(&reg.weights) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
        assert_abs_diff_eq!(
            report.objective,
            report.train_loss + 0.0 * report.regularizer_value,
            epsilon = 1e-10
        );
    }

    #[test]
    fn huge_lambda_pushes_outputs_toward_constants() {
        let src = labeled(&[(0.0, -1.0), (0.4, 0.2), (0.9, 1.4), (1.3, 2.0)]);
        let tgt = unlabeled(&[0.2, 0.6, 1.1]);
        let graph = build_graph(&src, &tgt, &KernelSpec::rbf(1.0)).unwrap();
        // Kernel expansion can realize non-constant outputs, so lambda must
        // flatten them; the constant-model oracle is the variance bound.
        let spec = ModelSpec {
            family: ModelFamily::KernelExpansion {
                kernel: KernelSpec::rbf(1.0),
            },
            ridge: 1e-10,
        };
        let (model, _) = fit_regularized(&src, &tgt, &spec, &graph, 1e6).unwrap();
        let mut pooled = DMatrix::zeros(7, 1);
        for (i, v) in [0.0, 0.4, 0.9, 1.3, 0.2, 0.6, 1.1].iter().enumerate() {
            pooled[(i, 0)] = *v;
        }
        let out = model.predict_rows(&pooled);
        let mean = out.mean();
        let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / out.len() as f64;
        let y = src.eval_labels().unwrap();
        let ymean = y.mean();
        let yvar = y.iter().map(|v| (v - ymean) * (v - ymean)).sum::<f64>() / y.len() as f64;
        assert!(var <= 1e-4 * yvar, "var {var} vs label var {yvar}");
    }

    #[test]
    fn misspecified_regularized_slope_moves_away_from_erm() {
        // Step regression fitted by an affine model; target shifted right.
        let spec = crate::data::CovariateShiftSpec {
            regression_fn: crate::data::RegressionFn::Step { threshold: 0.5 },
            source_law: crate::data::GaussianLaw::isotropic(vec![0.0], 1.0),
            target_law: crate::data::GaussianLaw::isotropic(vec![1.5], 1.0),
            source_noise_sd: 0.05,
            target_noise_sd: 0.05,
            seed: 17,
        };
        let (src, tgt) = crate::data::generate_covariate_shift(&spec, 60, 60).unwrap();
        let graph = build_graph(&src, &tgt, &KernelSpec::rbf(0.7)).unwrap();
        let (erm, _) = fit_erm(&src, &ModelSpec::linear(0.0)).unwrap();
        let (reg, _) = fit_regularized(&src, &tgt, &ModelSpec::linear(0.0), &graph, 1.0).unwrap();
        assert!(
            (erm.weights[0] - reg.weights[0]).abs() > 1e-3,
            "slopes {} vs {}",
            erm.weights[0],
            reg.weights[0]
        );
    }

    #[test]
    fn singular_normal_matrix_advises_ridge() {
        // Duplicate column makes the normal matrix exactly singular.
        let x = DMatrix::from_fn(4, 2, |i, _| i as f64);
        let y = DVector::from_fn(4, |i, _| i as f64);
        let data = Dataset::new(x, Some(y), Domain::Source, None).unwrap();
        let err = fit_erm(&data, &ModelSpec::linear(0.0)).unwrap_err();
        assert!(err.to_string().contains("ridge"), "{err}");
        assert!(fit_erm(&data, &ModelSpec::linear(1e-10)).is_ok());
    }

    #[test]
    fn model_json_round_trip() {
        let model = Model {
            spec: ModelSpec::linear(1e-9),
            weights: vec![0.1, -2.0 / 3.0, 1e-17],
            anchors: None,
        };
        let s = model.to_json().unwrap();
        let back = Model::from_json(&s).unwrap();
        for (a, b) in model.weights.iter().zip(&back.weights) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    #[test]
    fn adversarial_with_zero_budget_matches_erm() {
        let data = labeled(&[(0.0, 1.05), (0.5, 1.9), (1.0, 3.1), (1.5, 3.9), (2.0, 5.0)]);
        let cfg = AdversaryConfig {
            budget: 0.0,
            steps: 20,
            step_size: 0.25,
            penalty_weight: 1.0,
            seed: 1,
        };
        let (erm, _) = fit_erm(&data, &ModelSpec::linear(0.0)).unwrap();
        let (adv, report) = fit_adversarial(&data, &ModelSpec::linear(0.0), &cfg, 1.0).unwrap();
        for (a, b) in erm.weights.iter().zip(&adv.weights) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
        assert!(report.converged);
    }

    #[test]
    fn adversarial_constant_labels_stay_constant() {
        let data = labeled(&[(0.0, 2.0), (0.7, 2.0), (1.4, 2.0), (2.1, 2.0)]);
        let cfg = AdversaryConfig {
            budget: 0.5,
            steps: 30,
            step_size: 0.25,
            penalty_weight: 1.0,
            seed: 2,
        };
        let (model, report) = fit_adversarial(&data, &ModelSpec::linear(0.0), &cfg, 1.0).unwrap();
        assert!(model.weights[0].abs() <= 1e-6, "slope {}", model.weights[0]);
        assert_abs_diff_eq!(model.weights[1], 2.0, epsilon = 1e-6);
        assert!(report.regularizer_value.abs() <= 1e-10);
    }

    #[test]
    fn adversarial_objective_dominates_erm_objective() {
        let data = labeled(&[(0.0, 0.2), (0.5, 0.9), (1.0, 1.8), (1.5, 3.2), (2.0, 4.1)]);
        let cfg = AdversaryConfig {
            budget: 0.5,
            steps: 40,
            step_size: 0.2,
            penalty_weight: 1.0,
            seed: 3,
        };
        let (_, erm_report) = fit_erm(&data, &ModelSpec::linear(0.0)).unwrap();
        let (_, adv_report) = fit_adversarial(&data, &ModelSpec::linear(0.0), &cfg, 1.0).unwrap();
        assert!(adv_report.objective >= erm_report.objective - 1e-10);
    }

    #[test]
    fn fits_are_bitwise_reproducible() {
        let data = labeled(&[(0.0, 0.2), (0.5, 0.9), (1.0, 1.8), (1.5, 3.2)]);
        let cfg = AdversaryConfig {
            budget: 0.3,
            steps: 25,
            step_size: 0.2,
            penalty_weight: 1.0,
            seed: 9,
        };
        let (m1, _) = fit_adversarial(&data, &ModelSpec::linear(0.0), &cfg, 0.7).unwrap();
        let (m2, _) = fit_adversarial(&data, &ModelSpec::linear(0.0), &cfg, 0.7).unwrap();
        assert_eq!(m1.weights, m2.weights);
    }
}
