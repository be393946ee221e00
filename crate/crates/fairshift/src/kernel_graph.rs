//! Similarity kernels, the pooled-sample graph Laplacian, and its spectral
//! constants.
//!
//! The graph is built on the concatenation `[source; target]` of both
//! feature matrices. With kernel matrix `K` and degree matrix `D` the
//! unnormalized Laplacian is `L = D - K`; its target-target block `L_TT`
//! controls how well source outputs extrapolate to the target points:
//!
//! - `mu_R = lambda_min(L_TT)` is positive exactly when the graph ties the
//!   target points to the sources (a disconnected target block makes the
//!   extrapolation map singular, which is reported rather than fatal);
//! - `L_R = lambda_max(L)` bounds the curvature of the quadratic form.
//!
//! Both constants come from a dense symmetric eigensolver; at the intended
//! scale (n up to a few thousand) the O(n^3) cost is acceptable and the
//! residual of every extracted eigenpair is verified.

use crate::data::Dataset;
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Threshold below which `mu_R` is treated as zero (disconnected target block).
pub const DISCONNECTED_TOL: f64 = 1e-12;

/// Input-space metric: plain Euclidean or Euclidean after a fair projection
/// that collapses sensitive directions.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MetricSpec {
    #[default]
    Euclidean,
    /// `d(x, x') = ||P (x - x')||_2` with `P` symmetric idempotent.
    FairProjection { projection: Vec<Vec<f64>> },
}

impl MetricSpec {
    fn projection_matrix(&self) -> Option<DMatrix<f64>> {
        match self {
            MetricSpec::Euclidean => None,
            MetricSpec::FairProjection { projection } => {
                let p = projection.len();
                Some(DMatrix::from_fn(p, p, |i, j| projection[i][j]))
            }
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if let Some(p) = self.projection_matrix() {
            if p.nrows() != dim {
                return Err(Error::validation(format!(
                    "projection is {}x{}, features have dimension {dim}",
                    p.nrows(),
                    p.ncols()
                )));
            }
            if (&p - p.transpose()).amax() > 1e-10 {
                return Err(Error::validation("fair projection must be symmetric"));
            }
            if (&p * &p - &p).amax() > 1e-10 {
                return Err(Error::validation("fair projection must be idempotent"));
            }
        }
        Ok(())
    }

    /// Distance between two points under this metric.
    pub fn distance(&self, x: &[f64], y: &[f64]) -> f64 {
        match self.projection_matrix() {
            None => x
                .iter()
                .zip(y)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
            Some(p) => {
                let d = DVector::from_fn(x.len(), |i, _| x[i] - y[i]);
                (&p * d).norm()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Rbf,
    Laplace,
}

/// A similarity kernel: a decreasing function of the chosen metric.
///
/// An infinite bandwidth is permitted and yields the constant kernel
/// `K = 1` (the no-locality limit used by some population checks).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: f64,
    #[serde(default)]
    pub metric: MetricSpec,
}

impl KernelSpec {
    pub fn rbf(bandwidth: f64) -> Self {
        KernelSpec {
            family: KernelFamily::Rbf,
            bandwidth,
            metric: MetricSpec::Euclidean,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.bandwidth > 0.0) {
            return Err(Error::validation("bandwidth must be positive"));
        }
        self.metric.validate(dim)
    }

    /// Kernel value for a pair of points.
    ///
    /// RBF: `exp(-d^2 / (2 h^2))`; Laplace: `exp(-d / h)`.
    pub fn value(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::validation(format!(
                "kernel arguments have lengths {} and {}",
                x.len(),
                y.len()
            )));
        }
        let d = self.metric.distance(x, y);
        Ok(self.of_distance(d))
    }

    pub(crate) fn of_distance(&self, d: f64) -> f64 {
        if self.bandwidth.is_infinite() {
            return 1.0;
        }
        match self.family {
            KernelFamily::Rbf => (-d * d / (2.0 * self.bandwidth * self.bandwidth)).exp(),
            KernelFamily::Laplace => (-d / self.bandwidth).exp(),
        }
    }
}

/// Kernel value for a single pair (see [`KernelSpec::value`]).
pub fn kernel_value(kernel: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    kernel.value(x, y)
}

/// The pooled-sample graph: kernel matrix, degrees, Laplacian, and spectral
/// constants. Rows are ordered `[source; target]`. Immutable once built.
#[derive(Debug, Clone)]
pub struct LaplacianGraph {
    kernel_matrix: DMatrix<f64>,
    degree: DVector<f64>,
    laplacian: DMatrix<f64>,
    n_source: usize,
    n_target: usize,
    mu_r: f64,
    l_r: f64,
}

impl LaplacianGraph {
    pub fn kernel_matrix(&self) -> &DMatrix<f64> {
        &self.kernel_matrix
    }

    pub fn degree(&self) -> &DVector<f64> {
        &self.degree
    }

    pub fn laplacian(&self) -> &DMatrix<f64> {
        &self.laplacian
    }

    pub fn n_source(&self) -> usize {
        self.n_source
    }

    pub fn n_target(&self) -> usize {
        self.n_target
    }

    /// Total number of nodes.
    pub fn len(&self) -> usize {
        self.n_source + self.n_target
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `lambda_min(L_TT)`.
    pub fn mu_r(&self) -> f64 {
        self.mu_r
    }

    /// `lambda_max(L)`.
    pub fn l_r(&self) -> f64 {
        self.l_r
    }

    /// True when the target block is numerically singular; the extrapolation
    /// map and the bound constants degenerate in that case.
    pub fn is_disconnected(&self) -> bool {
        self.mu_r <= DISCONNECTED_TOL
    }

    /// Target-target block of `L`.
    pub fn l_tt(&self) -> DMatrix<f64> {
        self.laplacian
            .view((self.n_source, self.n_source), (self.n_target, self.n_target))
            .into_owned()
    }

    /// Target-source block of `L`.
    pub fn l_ts(&self) -> DMatrix<f64> {
        self.laplacian
            .view((self.n_source, 0), (self.n_target, self.n_source))
            .into_owned()
    }
}

/// Polishes an approximate extreme eigenvector of the symmetric matrix `m`
/// by power iteration on `m` (largest) or on `c I - m` (smallest, with `c`
/// a Gershgorin upper bound), until the eigenpair residual meets `tol`.
/// Returns the Rayleigh quotient of the refined vector.
fn refine_extreme(
    m: &DMatrix<f64>,
    start: DVector<f64>,
    largest: bool,
    tol: f64,
    what: &str,
) -> Result<f64> {
    let n = m.nrows();
    let gershgorin = (0..n)
        .map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut v = start;
    if v.norm() == 0.0 {
        v = DVector::from_fn(n, |i, _| 1.0 + 0.01 * ((i + 1) as f64).sin());
    }
    v /= v.norm();
    let mut lambda = (m * &v).dot(&v);
    let max_iter = 20_000usize;
    for _ in 0..max_iter {
        let mv = m * &v;
        lambda = mv.dot(&v);
        if (&mv - &v * lambda).norm() <= tol {
            return Ok(lambda);
        }
        let next = if largest { mv } else { &v * gershgorin - mv };
        let norm = next.norm();
        if norm == 0.0 {
            // v is exactly in the kernel of the shifted operator
            return Ok(lambda);
        }
        v = next / norm;
    }
    let res = (m * &v - &v * lambda).norm();
    Err(Error::numeric(format!(
        "eigenpair refinement on {what} stalled at residual {res:.3e} after {max_iter} iterations          (tolerance {tol:.3e})"
    )))
}

fn symmetric_eigenvalues(m: &DMatrix<f64>, what: &str) -> Result<(f64, f64)> {
    let scale = m.amax().max(1.0);
    let max_iter = 100 * m.nrows().max(8);
    let eig = m
        .clone()
        .try_symmetric_eigen(1e-13 * scale, max_iter)
        .ok_or_else(|| {
            Error::numeric(format!(
                "symmetric eigensolver on {what} did not converge within {max_iter} iterations"
            ))
        })?;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut min_idx = 0;
    let mut max_idx = 0;
    for (i, &v) in eig.eigenvalues.iter().enumerate() {
        if v < min {
            min = v;
            min_idx = i;
        }
        if v > max {
            max = v;
            max_idx = i;
        }
    }
    // The QR sweep can hand back polluted vectors on clustered spectra, so
    // the extreme pairs are re-polished until they satisfy the residual
    // contract ||Mv - lambda v|| <= 1e-8 ||M||_2.
    let spectral = min.abs().max(max.abs()).max(1.0);
    let tol = 1e-8 * spectral;
    let max_ref = refine_extreme(m, eig.eigenvectors.column(max_idx).into_owned(), true, tol, what)?;
    let min_ref =
        refine_extreme(m, eig.eigenvectors.column(min_idx).into_owned(), false, tol, what)?;
    Ok((min.min(min_ref), max.max(max_ref)))
}

/// Builds the pooled graph over `[source; target]` and computes the spectral
/// constants. Gram rows are assembled in parallel; the entrywise evaluation
/// order is fixed, so the result is identical across thread counts.
pub fn build_graph(
    source: &Dataset,
    target: &Dataset,
    kernel: &KernelSpec,
) -> Result<LaplacianGraph> {
    if source.dim() != target.dim() {
        return Err(Error::validation(format!(
            "source dimension {} != target dimension {}",
            source.dim(),
            target.dim()
        )));
    }
    let ns = source.len();
    let nt = target.len();
    let n = ns + nt;
    if n < 2 {
        return Err(Error::validation("graph needs at least two points"));
    }
    kernel.validate(source.dim())?;

    let p = source.dim();
    let mut pooled = DMatrix::zeros(n, p);
    pooled.view_mut((0, 0), (ns, p)).copy_from(source.features());
    pooled.view_mut((ns, 0), (nt, p)).copy_from(target.features());

    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi: Vec<f64> = pooled.row(i).iter().copied().collect();
            let mut row = vec![0.0; n];
            for (j, slot) in row.iter_mut().enumerate() {
                let xj: Vec<f64> = pooled.row(j).iter().copied().collect();
                *slot = kernel.of_distance(kernel.metric.distance(&xi, &xj));
            }
            row
        })
        .collect();
    let kernel_matrix = DMatrix::from_fn(n, n, |i, j| rows[i][j]);

    let degree = DVector::from_fn(n, |i, _| kernel_matrix.row(i).sum());
    let mut laplacian = DMatrix::from_diagonal(&degree);
    laplacian -= &kernel_matrix;

    let l_tt = laplacian.view((ns, ns), (nt, nt)).into_owned();
    let (mu_r, _) = symmetric_eigenvalues(&l_tt, "L_TT")?;
    let (_, l_r) = symmetric_eigenvalues(&laplacian, "L")?;

    Ok(LaplacianGraph {
        kernel_matrix,
        degree,
        laplacian,
        n_source: ns,
        n_target: nt,
        mu_r,
        l_r,
    })
}

/// Recomputes `(mu_R, L_R)` from the stored matrices with residual checks.
pub fn regularizer_constants(graph: &LaplacianGraph) -> Result<(f64, f64)> {
    let (mu_r, _) = symmetric_eigenvalues(&graph.l_tt(), "L_TT")?;
    let (_, l_r) = symmetric_eigenvalues(graph.laplacian(), "L")?;
    Ok((mu_r, l_r))
}

/// Dumps a matrix as CSV (`x1..xn` header) for debugging.
pub fn save_matrix_csv(m: &DMatrix<f64>, path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = (1..=m.ncols()).map(|j| format!("x{j}")).collect();
    w.write_record(&header)?;
    for i in 0..m.nrows() {
        let rec: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
