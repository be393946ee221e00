//! Datasets, synthetic generators, and CSV I/O.
//!
//! Two generator families cover every setting the verification suites need:
//!
//! - [`CovariateShiftSpec`]: labels share one regression function across a
//!   source and a target input law, `y = f0(x) + eps`. Mis-specification is
//!   realized by fitting a model class that cannot represent `f0`.
//! - [`FactorModelSpec`]: covariates decompose as `x = A u + b z + eps` with a
//!   binary protected attribute `z` and protected direction `b`.
//!
//! Generation is a pure function of `(spec, sizes, seed)`; rerunning with the
//! same inputs reproduces every dataset bit for bit.

use crate::error::{Error, Result};
use crate::seeding::rng_from_seed;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Which domain a dataset was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// A feature matrix with optional labels and protected attributes.
///
/// Target-domain labels are generated for evaluation but are withheld from
/// training: [`Dataset::training_labels`] returns `None` on target datasets,
/// while [`Dataset::eval_labels`] exposes labels regardless of domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: DMatrix<f64>,
    labels: Option<DVector<f64>>,
    domain: Domain,
    protected: Option<Vec<u8>>,
}

impl Dataset {
    pub fn new(
        features: DMatrix<f64>,
        labels: Option<DVector<f64>>,
        domain: Domain,
        protected: Option<Vec<u8>>,
    ) -> Result<Self> {
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("features contain non-finite entries"));
        }
        if let Some(y) = &labels {
            if y.len() != features.nrows() {
                return Err(Error::validation(format!(
                    "labels length {} != feature rows {}",
                    y.len(),
                    features.nrows()
                )));
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation("labels contain non-finite entries"));
            }
        }
        if let Some(z) = &protected {
            if z.len() != features.nrows() {
                return Err(Error::validation(format!(
                    "protected length {} != feature rows {}",
                    z.len(),
                    features.nrows()
                )));
            }
            if z.iter().any(|&v| v > 1) {
                return Err(Error::validation("protected entries must be 0 or 1"));
            }
        }
        Ok(Dataset {
            features,
            labels,
            domain,
            protected,
        })
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn protected(&self) -> Option<&[u8]> {
        self.protected.as_deref()
    }

    /// Labels usable for fitting. `None` for target-domain data even when
    /// labels were generated; training code cannot touch them by accident.
    pub fn training_labels(&self) -> Option<&DVector<f64>> {
        match self.domain {
            Domain::Source => self.labels.as_ref(),
            Domain::Target => None,
        }
    }

    /// Labels for evaluation, regardless of domain.
    pub fn eval_labels(&self) -> Option<&DVector<f64>> {
        self.labels.as_ref()
    }

    /// Number of rows.
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    /// Feature dimension.
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Row `i` as an owned vector.
    pub fn row(&self, i: usize) -> DVector<f64> {
        self.features.row(i).transpose()
    }
}

/// A Gaussian input law `N(mean, covariance)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianLaw {
    pub mean: Vec<f64>,
    /// Row-major covariance; must be symmetric positive semidefinite.
    pub covariance: Vec<Vec<f64>>,
}

impl GaussianLaw {
    /// Isotropic `N(mean, sd^2 I)`.
    pub fn isotropic(mean: Vec<f64>, sd: f64) -> Self {
        let d = mean.len();
        let mut covariance = vec![vec![0.0; d]; d];
        for (i, row) in covariance.iter_mut().enumerate() {
            row[i] = sd * sd;
        }
        GaussianLaw { mean, covariance }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn matrix(&self) -> Result<DMatrix<f64>> {
        let d = self.mean.len();
        if self.covariance.len() != d || self.covariance.iter().any(|r| r.len() != d) {
            return Err(Error::validation(format!(
                "covariance must be {d}x{d} to match the mean vector"
            )));
        }
        let cov = DMatrix::from_fn(d, d, |i, j| self.covariance[i][j]);
        let scale = 1.0 + cov.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if (&cov - cov.transpose()).amax() > 1e-10 * scale {
            return Err(Error::validation("covariance matrix is not symmetric"));
        }
        Ok(cov)
    }

    /// Cholesky factor used for sampling, with a tiny jitter to admit
    /// singular PSD covariances. Indefinite matrices are rejected.
    pub(crate) fn sampling_factor(&self) -> Result<DMatrix<f64>> {
        let cov = self.matrix()?;
        let d = cov.nrows();
        let trace: f64 = cov.diagonal().iter().sum();
        let jitter = 1e-12 * (1.0 + trace / d.max(1) as f64);
        let jittered = &cov + DMatrix::<f64>::identity(d, d) * jitter;
        match jittered.cholesky() {
            Some(chol) => Ok(chol.l()),
            None => Err(Error::validation(
                "covariance matrix is not positive semidefinite",
            )),
        }
    }

    /// `n` rows sampled with the given generator.
    fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let l = self.sampling_factor()?;
        let mut out = DMatrix::zeros(n, d);
        let mut z = DVector::zeros(d);
        for i in 0..n {
            for k in 0..d {
                z[k] = rng.sample(StandardNormal);
            }
            let x = &l * &z;
            for j in 0..d {
                out[(i, j)] = self.mean[j] + x[j];
            }
        }
        Ok(out)
    }
}

/// Regression-function catalog. Multivariate inputs use the first coordinate
/// for the scalar-shaped members (`Sine`, `Step`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RegressionFn {
    /// `f(x) = w . x`
    Linear { weights: Vec<f64> },
    /// `f(x) = amplitude * sin(frequency * x_1)`
    Sine {
        frequency: f64,
        #[serde(default = "default_amplitude")]
        amplitude: f64,
    },
    /// `f(x) = 1 if x_1 > threshold else 0`
    Step { threshold: f64 },
    /// `f(x) = sum_i w_i x_i^2`
    Quadratic { weights: Vec<f64> },
}

fn default_amplitude() -> f64 {
    1.0
}

impl RegressionFn {
    /// Unit-amplitude sine, the stock mis-specification target.
    pub fn sine(frequency: f64) -> Self {
        RegressionFn::Sine {
            frequency,
            amplitude: 1.0,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            RegressionFn::Linear { weights } => {
                weights.iter().zip(x).map(|(w, v)| w * v).sum()
            }
            RegressionFn::Sine {
                frequency,
                amplitude,
            } => amplitude * (frequency * x[0]).sin(),
            RegressionFn::Step { threshold } => {
                if x[0] > *threshold {
                    1.0
                } else {
                    0.0
                }
            }
            RegressionFn::Quadratic { weights } => {
                weights.iter().zip(x).map(|(w, v)| w * v * v).sum()
            }
        }
    }

    /// Gradient with respect to the input, defined almost everywhere
    /// (the step function has zero derivative off its jump).
    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        match self {
            RegressionFn::Linear { weights } => weights.clone(),
            RegressionFn::Sine {
                frequency,
                amplitude,
            } => {
                let mut g = vec![0.0; x.len()];
                g[0] = amplitude * frequency * (frequency * x[0]).cos();
                g
            }
            RegressionFn::Step { .. } => vec![0.0; x.len()],
            RegressionFn::Quadratic { weights } => {
                weights.iter().zip(x).map(|(w, v)| 2.0 * w * v).collect()
            }
        }
    }

    pub fn eval_rows(&self, xs: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_fn(xs.nrows(), |i, _| {
            self.eval(xs.row(i).transpose().as_slice())
        })
    }

    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            RegressionFn::Linear { weights } | RegressionFn::Quadratic { weights } => {
                if weights.len() != dim {
                    return Err(Error::validation(format!(
                        "regression weights have length {}, expected {dim}",
                        weights.len()
                    )));
                }
            }
            RegressionFn::Sine { .. } | RegressionFn::Step { .. } => {}
        }
        Ok(())
    }
}

/// Covariate-shift generator: one regression function, two input laws.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovariateShiftSpec {
    pub regression_fn: RegressionFn,
    pub source_law: GaussianLaw,
    pub target_law: GaussianLaw,
    pub source_noise_sd: f64,
    pub target_noise_sd: f64,
    pub seed: u64,
}

impl CovariateShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if self.source_noise_sd < 0.0 || self.target_noise_sd < 0.0 {
            return Err(Error::validation("noise_sd must be nonnegative"));
        }
        if self.source_law.dim() != self.target_law.dim() {
            return Err(Error::validation(
                "source and target laws must share a dimension",
            ));
        }
        self.regression_fn.validate(self.source_law.dim())?;
        self.source_law.matrix()?;
        self.target_law.matrix()?;
        Ok(())
    }
}

/// Draws labeled source and target datasets under covariate shift.
///
/// Target labels are produced by the same regression function (so evaluation
/// code can score target risk) but are flagged held-out; see
/// [`Dataset::training_labels`].
pub fn generate_covariate_shift(
    spec: &CovariateShiftSpec,
    n_source: usize,
    n_target: usize,
) -> Result<(Dataset, Dataset)> {
    if n_source == 0 || n_target == 0 {
        return Err(Error::validation("n_source and n_target must be >= 1"));
    }
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let xs = spec.source_law.sample(n_source, &mut rng)?;
    let mut ys = spec.regression_fn.eval_rows(&xs);
    for v in ys.iter_mut() {
        let e: f64 = rng.sample(StandardNormal);
        *v += spec.source_noise_sd * e;
    }
    let xt = spec.target_law.sample(n_target, &mut rng)?;
    let mut yt = spec.regression_fn.eval_rows(&xt);
    for v in yt.iter_mut() {
        let e: f64 = rng.sample(StandardNormal);
        *v += spec.target_noise_sd * e;
    }
    let source = Dataset::new(xs, Some(ys), Domain::Source, None)?;
    let target = Dataset::new(xt, Some(yt), Domain::Target, None)?;
    Ok((source, target))
}

/// Factor model `x = A u + b z + eps` with protected attribute `z`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorModelSpec {
    /// Loading matrix, row-major, `p x k`.
    pub loading: Vec<Vec<f64>>,
    /// Protected direction `b`, length `p`.
    pub protected_direction: Vec<f64>,
    pub noise_sd: f64,
    /// Law of the relevant attributes `u` (dimension `k`).
    pub u_law: GaussianLaw,
    pub seed: u64,
}

impl FactorModelSpec {
    pub fn dim(&self) -> usize {
        self.protected_direction.len()
    }

    pub fn loading_matrix(&self) -> DMatrix<f64> {
        let p = self.loading.len();
        let k = self.loading.first().map_or(0, |r| r.len());
        DMatrix::from_fn(p, k, |i, j| self.loading[i][j])
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.protected_direction.len();
        if self.loading.len() != p {
            return Err(Error::validation(format!(
                "loading has {} rows, expected {p} to match b",
                self.loading.len()
            )));
        }
        let k = self.u_law.dim();
        if self.loading.iter().any(|r| r.len() != k) {
            return Err(Error::validation(format!(
                "loading rows must have length {k} to match the u law"
            )));
        }
        if self.noise_sd < 0.0 {
            return Err(Error::validation("noise_sd must be nonnegative"));
        }
        self.u_law.matrix()?;
        Ok(())
    }
}

/// Draws `n` rows from the factor model, `z ~ Bernoulli(z_balance)`.
/// Rows with `z = 1` receive the `+b` offset.
pub fn generate_factor_model(
    spec: &FactorModelSpec,
    n: usize,
    z_balance: f64,
) -> Result<Dataset> {
    if !(z_balance > 0.0 && z_balance < 1.0) {
        return Err(Error::validation("z_balance must lie strictly in (0, 1)"));
    }
    spec.validate()?;
    let p = spec.dim();
    let k = spec.u_law.dim();
    let a = spec.loading_matrix();
    let l_u = spec.u_law.sampling_factor()?;
    let u_mean = DVector::from_vec(spec.u_law.mean.clone());
    let mut rng = rng_from_seed(spec.seed);
    let mut features = DMatrix::zeros(n, p);
    let mut protected = vec![0u8; n];
    let mut zk = DVector::zeros(k);
    for i in 0..n {
        let z = if rng.gen::<f64>() < z_balance { 1u8 } else { 0u8 };
        protected[i] = z;
        for v in zk.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let u = &u_mean + &l_u * &zk;
        let au = &a * &u;
        for j in 0..p {
            let e: f64 = rng.sample(StandardNormal);
            features[(i, j)] =
                au[j] + f64::from(z) * spec.protected_direction[j] + spec.noise_sd * e;
        }
    }
    Dataset::new(features, None, Domain::Source, Some(protected))
}

fn fmt_f64(v: f64) -> String {
    // Shortest representation that round-trips exactly.
    let mut s = String::new();
    write!(s, "{v}").expect("formatting f64 cannot fail");
    s
}

/// Writes the dataset in the `x1,...,xp[,y][,z][,domain]` schema.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let p = dataset.dim();
    let mut header: Vec<String> = (1..=p).map(|j| format!("x{j}")).collect();
    if dataset.labels.is_some() {
        header.push("y".into());
    }
    if dataset.protected.is_some() {
        header.push("z".into());
    }
    header.push("domain".into());
    w.write_record(&header)?;
    for i in 0..dataset.len() {
        let mut rec: Vec<String> = (0..p).map(|j| fmt_f64(dataset.features[(i, j)])).collect();
        if let Some(y) = &dataset.labels {
            rec.push(fmt_f64(y[i]));
        }
        if let Some(z) = &dataset.protected {
            rec.push(format!("{}", z[i]));
        }
        rec.push(
            match dataset.domain {
                Domain::Source => "source",
                Domain::Target => "target",
            }
            .into(),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a dataset saved by [`save_csv`] (or any file matching the schema).
///
/// Errors name the 1-based line of the first offending row; the header is
/// line 1. A header-only file yields an empty dataset with `p` inferred from
/// the header.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let header = rdr.headers()?.clone();
    let mut p = 0usize;
    for (idx, name) in header.iter().enumerate() {
        if name == format!("x{}", idx + 1) {
            p = idx + 1;
        } else {
            break;
        }
    }
    if p == 0 {
        return Err(Error::Parse {
            line: 1,
            message: "header must start with x1".into(),
        });
    }
    let mut rest = header.iter().skip(p).peekable();
    let has_y = rest.peek() == Some(&"y") && {
        rest.next();
        true
    };
    let has_z = rest.peek() == Some(&"z") && {
        rest.next();
        true
    };
    let has_domain = rest.peek() == Some(&"domain") && {
        rest.next();
        true
    };
    if let Some(extra) = rest.next() {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected column '{extra}'"),
        });
    }
    let ncols = p + usize::from(has_y) + usize::from(has_z) + usize::from(has_domain);

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<f64> = Vec::new();
    let mut protected: Vec<u8> = Vec::new();
    let mut domain: Option<Domain> = None;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if rec.len() != ncols {
            return Err(Error::Parse {
                line,
                message: format!("expected {ncols} cells, found {}", rec.len()),
            });
        }
        let parse_num = |cell: &str| -> Result<f64> {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("'{cell}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("non-finite value '{cell}'"),
                });
            }
            Ok(v)
        };
        let mut row = Vec::with_capacity(p);
        for j in 0..p {
            row.push(parse_num(&rec[j])?);
        }
        rows.push(row);
        let mut idx = p;
        if has_y {
            labels.push(parse_num(&rec[idx])?);
            idx += 1;
        }
        if has_z {
            let v = parse_num(&rec[idx])?;
            if v != 0.0 && v != 1.0 {
                return Err(Error::Parse {
                    line,
                    message: format!("z must be 0 or 1, found '{}'", &rec[idx]),
                });
            }
            protected.push(v as u8);
            idx += 1;
        }
        if has_domain {
            let d = match rec[idx].trim() {
                "source" => Domain::Source,
                "target" => Domain::Target,
                other => {
                    return Err(Error::Parse {
                        line,
                        message: format!("domain must be source or target, found '{other}'"),
                    })
                }
            };
            match domain {
                None => domain = Some(d),
                Some(prev) if prev != d => {
                    return Err(Error::Parse {
                        line,
                        message: "file mixes source and target rows".into(),
                    })
                }
                _ => {}
            }
        }
    }
    let n = rows.len();
    let features = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
    Dataset::new(
        features,
        has_y.then(|| DVector::from_vec(labels)),
        domain.unwrap_or(Domain::Source),
        has_z.then_some(protected),
    )
}
