//! Channel selection by LASSO.
//!
//! Column `i` of the design is channel `i`'s contribution to the layer
//! output, `vec(X_i · W_iᵀ)`. Minimizing
//!
//! ```text
//! (1/2M)·‖y − Zβ‖² + λ·‖β‖₁
//! ```
//!
//! drives whole channels to zero. Coordinate descent runs on the `c × c`
//! Gram matrix, so the cost per sweep does not depend on the number of
//! sampled rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::SampleSet;
use crate::tensor::{dot, matmul_tn, soft_threshold, Matrix, TensorError};

/// Per-channel regressors and the flattened response.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDesign {
    /// `M × c`, `M = N·n`.
    pub z: Matrix,
    /// `vec(Y)`, row-major, length `M`.
    pub y: Vec<f64>,
    pub col_norms: Vec<f64>,
    gram: Matrix,
    zty: Vec<f64>,
}

impl ChannelDesign {
    pub fn new(z: Matrix, y: Vec<f64>) -> Result<Self> {
        if z.rows() != y.len() || z.cols() == 0 {
            return Err(TensorError::DimensionMismatch {
                op: "channel design",
                lhs: z.shape(),
                rhs: (y.len(), 1),
            }
            .into());
        }
        let gram = matmul_tn(&z, &z)?;
        let ym = Matrix::new(y.len(), 1, y.clone())?;
        let zty = matmul_tn(&z, &ym)?.into_vec();
        let col_norms = (0..z.cols()).map(|i| gram[(i, i)].sqrt()).collect();
        Ok(Self {
            z,
            y,
            col_norms,
            gram,
            zty,
        })
    }

    pub fn channels(&self) -> usize {
        self.z.cols()
    }

    /// `M`, the number of scalar responses.
    pub fn samples(&self) -> usize {
        self.z.rows()
    }

    /// Smallest λ at which β = 0 is optimal: `max_i |Z_iᵀy| / M`.
    pub fn lambda_max(&self) -> f64 {
        let m = self.samples() as f64;
        self.zty.iter().fold(0.0_f64, |a, v| a.max(v.abs())) / m
    }

    /// `Z_iᵀ(y − Zβ)/M` for every channel.
    pub fn correlations(&self, beta: &[f64]) -> Vec<f64> {
        let m = self.samples() as f64;
        (0..self.channels())
            .map(|i| (self.zty[i] - dot(self.gram.row(i), beta)) / m)
            .collect()
    }

    /// Largest violation of the LASSO optimality conditions at `beta`.
    pub fn kkt_residual(&self, beta: &[f64], lambda: f64) -> f64 {
        self.correlations(beta)
            .iter()
            .zip(beta)
            .zip(&self.col_norms)
            .map(|((&g, &b), &norm)| {
                if norm == 0.0 {
                    0.0
                } else if b != 0.0 {
                    (g - lambda * b.signum()).abs()
                } else {
                    (g.abs() - lambda).max(0.0)
                }
            })
            .fold(0.0, f64::max)
    }

    /// Objective from the Gram form; cheap, used for sweep traces.
    fn objective_gram(&self, beta: &[f64], lambda: f64) -> f64 {
        let m = self.samples() as f64;
        let yy = dot(&self.y, &self.y);
        let quad: f64 = (0..beta.len())
            .map(|i| beta[i] * dot(self.gram.row(i), beta))
            .sum();
        let l1: f64 = beta.iter().map(|b| b.abs()).sum();
        (yy - 2.0 * dot(beta, &self.zty) + quad) / (2.0 * m) + lambda * l1
    }
}

/// `(1/2M)‖y − Zβ‖² + λ‖β‖₁`, evaluated directly from `Z`.
pub fn lasso_objective(d: &ChannelDesign, beta: &[f64], lambda: f64) -> f64 {
    let m = d.samples() as f64;
    let mut sq = 0.0;
    for r in 0..d.samples() {
        let e = d.y[r] - dot(d.z.row(r), beta);
        sq += e * e;
    }
    sq / (2.0 * m) + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
}

/// Builds the channel design from a sample set and the layer's current
/// `n × c·k_h·k_w` weights.
pub fn build_channel_design(s: &SampleSet, w: &Matrix) -> Result<ChannelDesign> {
    let block = s.block;
    let c = s.channels();
    let n = s.y.cols();
    if w.cols() != s.x.cols() || w.rows() != n || c == 0 {
        return Err(TensorError::DimensionMismatch {
            op: "build_channel_design",
            lhs: s.x.shape(),
            rhs: w.shape(),
        }
        .into());
    }
    let rows = s.len() * n;
    let mut z = Matrix::zeros(rows, c);
    for r in 0..s.len() {
        let xr = s.x.row(r);
        for o in 0..n {
            let wr = w.row(o);
            let zr = z.row_mut(r * n + o);
            for (i, zv) in zr.iter_mut().enumerate() {
                let span = i * block..(i + 1) * block;
                *zv = dot(&xr[span.clone()], &wr[span]);
            }
        }
    }
    ChannelDesign::new(z, s.y.as_slice().to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaVector {
    pub beta: Vec<f64>,
    pub lambda: f64,
    pub nnz: usize,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residual: f64,
}

impl BetaVector {
    pub fn support(&self) -> Vec<usize> {
        self.beta
            .iter()
            .enumerate()
            .filter(|(_, b)| **b != 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Cyclic coordinate descent from β = 0.
///
/// Stops once the KKT residual is at most `tol`; after `max_iter` sweeps the
/// current iterate is returned with `converged = false`.
pub fn lasso_cd(d: &ChannelDesign, lambda: f64, tol: f64, max_iter: usize) -> Result<BetaVector> {
    lasso_cd_from(d, lambda, tol, max_iter, None, None)
}

/// Coordinate descent with an optional warm start and an optional trace
/// that receives the objective after every sweep.
pub fn lasso_cd_from(
    d: &ChannelDesign,
    lambda: f64,
    tol: f64,
    max_iter: usize,
    init: Option<&[f64]>,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<BetaVector> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let c = d.channels();
    let m = d.samples() as f64;
    let mut beta = match init {
        Some(b) if b.len() == c => b.to_vec(),
        Some(b) => {
            return Err(Error::Config(format!(
                "warm start has {} coefficients, design has {c}",
                b.len()
            )))
        }
        None => vec![0.0; c],
    };
    for (b, &n) in beta.iter_mut().zip(&d.col_norms) {
        if n == 0.0 {
            *b = 0.0;
        }
    }
    let threshold = lambda * m;

    let mut kkt = d.kkt_residual(&beta, lambda);
    let mut iterations = 0;
    while kkt > tol && iterations < max_iter {
        // r_i = Z_iᵀ(y − Zβ), refreshed every sweep to stop drift.
        let mut r: Vec<f64> = (0..c)
            .map(|i| d.zty[i] - dot(d.gram.row(i), &beta))
            .collect();
        for i in 0..c {
            let gii = d.gram[(i, i)];
            if gii == 0.0 {
                continue;
            }
            let old = beta[i];
            let new = soft_threshold(r[i] + gii * old, threshold) / gii;
            let delta = new - old;
            if delta != 0.0 {
                beta[i] = new;
                for (rj, gji) in r.iter_mut().zip(d.gram.row(i)) {
                    *rj -= gji * delta;
                }
            }
        }
        iterations += 1;
        if let Some(t) = trace.as_deref_mut() {
            t.push(d.objective_gram(&beta, lambda));
        }
        kkt = d.kkt_residual(&beta, lambda);
    }
    let nnz = beta.iter().filter(|b| **b != 0.0).count();
    Ok(BetaVector {
        beta,
        lambda,
        nnz,
        iterations,
        converged: kkt <= tol,
        kkt_residual: kkt,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    /// KKT tolerance relative to `λ_max`.
    pub tol_rel: f64,
    pub max_iter: usize,
    pub bisection_steps: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            tol_rel: 1e-7,
            max_iter: 20_000,
            bisection_steps: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaProbe {
    pub lambda: f64,
    pub nnz: usize,
    pub converged: bool,
}

/// Result of a budgeted λ search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSearch {
    pub lambda: f64,
    pub beta: BetaVector,
    /// Exactly `budget` channels, ascending.
    pub kept: Vec<usize>,
    /// True when the LASSO support alone had fewer than `budget` channels
    /// and zero-coefficient channels were added by residual correlation.
    pub padded: bool,
    pub path: Vec<LambdaProbe>,
}

pub fn search_lambda(d: &ChannelDesign, budget: usize) -> Result<LambdaSearch> {
    search_lambda_with(d, budget, &SearchOptions::default())
}

/// Bisects λ on `[0, λ_max]` for a support of exactly `budget` channels.
///
/// If no probe lands on the budget, the smallest-λ solution with fewer
/// channels is completed with the zero channels most correlated with its
/// residual.
pub fn search_lambda_with(
    d: &ChannelDesign,
    budget: usize,
    opts: &SearchOptions,
) -> Result<LambdaSearch> {
    let c = d.channels();
    if budget == 0 || budget > c {
        return Err(Error::BudgetOutOfRange {
            budget,
            channels: c,
        });
    }
    let lmax = d.lambda_max();
    let tol = opts.tol_rel * lmax.max(f64::MIN_POSITIVE);
    let mut path = Vec::new();
    let solve = |lambda: f64, warm: Option<&[f64]>, path: &mut Vec<LambdaProbe>| {
        let b = lasso_cd_from(d, lambda, tol, opts.max_iter, warm, None)?;
        path.push(LambdaProbe {
            lambda,
            nnz: b.nnz,
            converged: b.converged,
        });
        Ok::<_, Error>(b)
    };

    let at_zero = solve(0.0, None, &mut path)?;
    if at_zero.nnz == budget || budget == c {
        return Ok(finish(d, at_zero, budget, path));
    }
    if at_zero.nnz < budget {
        return Ok(finish(d, at_zero, budget, path));
    }

    let (mut lo, mut hi) = (0.0, lmax);
    let mut best = BetaVector {
        beta: vec![0.0; c],
        lambda: lmax,
        nnz: 0,
        iterations: 0,
        converged: true,
        kkt_residual: d.kkt_residual(&vec![0.0; c], lmax),
    };
    let mut warm = at_zero.beta.clone();
    for _ in 0..opts.bisection_steps {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let b = solve(mid, Some(&warm), &mut path)?;
        warm.clone_from(&b.beta);
        if b.nnz == budget {
            return Ok(finish(d, b, budget, path));
        }
        if b.nnz > budget {
            lo = mid;
        } else {
            hi = mid;
            best = b;
        }
    }
    Ok(finish(d, best, budget, path))
}

fn finish(d: &ChannelDesign, beta: BetaVector, budget: usize, path: Vec<LambdaProbe>) -> LambdaSearch {
    let mut kept = beta.support();
    let padded = kept.len() < budget;
    if padded {
        let corr = d.correlations(&beta.beta);
        let mut zeros: Vec<usize> = (0..d.channels()).filter(|i| beta.beta[*i] == 0.0).collect();
        zeros.sort_by(|&a, &b| corr[b].abs().total_cmp(&corr[a].abs()).then(a.cmp(&b)));
        kept.extend(zeros.into_iter().take(budget - kept.len()));
        kept.sort_unstable();
    }
    LambdaSearch {
        lambda: beta.lambda,
        beta,
        kept,
        padded,
        path,
    }
}
