//! Resolvent form of the correlation matrix.
//!
//! With `Λ = diag((1 - m_i²)⁻¹)`, `A_ij = 2 m_i m_j / n` and
//! `E₀ = -t(1 - q_N)`, the truncated correlation matrix is compared with
//! `(Λ - tA - G - E₀)⁻¹`. The scalar `S(E)` solves
//! `S = n⁻¹ Σ_i (Λ_ii - E - tS)⁻¹` on the branch continuous from `t = 0`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gibbs::{gibbs_tables_with, GibbsTables, ReducedSpec, Request};
use crate::model::{CouplingMatrix, ModelParams};

pub const SINGULAR_CONDITION: f64 = 1e12;
pub const S_PRIME_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct DeformedOperator {
    pub t: f64,
    /// `Λ_ii = (1 - m_i²)⁻¹ ≥ 1`.
    pub lambda_diag: Vec<f64>,
    /// `A_ij = 2 m_i m_j / n`.
    pub rank_one: DMatrix<f64>,
    pub g: CouplingMatrix,
    /// `-t (1 - q_N)` with the overlap of the tables it was built from.
    pub e0: f64,
}

/// Operator of the resolvent identity from full-system Gibbs tables.
pub fn build_deformed(
    cm: &CouplingMatrix,
    params: &ModelParams,
    tables: &GibbsTables,
) -> Result<DeformedOperator> {
    let n = params.n;
    if tables.n != n || cm.n() != n {
        return Err(Error::InvalidParams("tables, couplings and params disagree on n".into()));
    }
    let mut lambda_diag = Vec::with_capacity(n);
    for (i, &m) in tables.m.iter().enumerate() {
        let var = 1.0 - m * m;
        if !(var > 0.0) {
            return Err(Error::Domain(format!("|m_{i}| = 1 makes Λ infinite")));
        }
        lambda_diag.push(1.0 / var);
    }
    let scale = 2.0 / n as f64;
    let rank_one = DMatrix::from_fn(n, n, |i, j| {
        scale * tables.m[i.min(j)] * tables.m[i.max(j)]
    });
    Ok(DeformedOperator {
        t: params.t,
        lambda_diag,
        rank_one,
        g: cm.clone(),
        e0: -params.t * (1.0 - tables.q_n),
    })
}

impl DeformedOperator {
    pub fn n(&self) -> usize {
        self.lambda_diag.len()
    }

    /// `Λ - tA - G`, or `Λ - G` without the rank-one term.
    pub fn hamiltonian(&self, include_rank_one: bool) -> DMatrix<f64> {
        let n = self.n();
        let mut k = DMatrix::from_fn(n, n, |i, j| -self.g.get(i, j));
        for i in 0..n {
            k[(i, i)] += self.lambda_diag[i];
        }
        if include_rank_one {
            k -= &self.rank_one * self.t;
        }
        k
    }

    /// `Λ - tA - G - E₀`.
    pub fn shifted(&self, include_rank_one: bool) -> DMatrix<f64> {
        let mut k = self.hamiltonian(include_rank_one);
        for i in 0..self.n() {
            k[(i, i)] -= self.e0;
        }
        k
    }

    /// Share of the Frobenius mass of `A` carried by its top singular value.
    pub fn rank_one_share(&self) -> f64 {
        let fro2 = self.rank_one.norm_squared();
        if fro2 == 0.0 {
            return 1.0;
        }
        let top = self
            .rank_one
            .singular_values()
            .iter()
            .copied()
            .fold(0.0, f64::max);
        top * top / fro2
    }

    /// Smallest eigenvalue of `Λ - tA - G` minus `E₀`.
    pub fn spectral_margin(&self, include_rank_one: bool) -> f64 {
        let eig = SymmetricEigen::new(self.hamiltonian(include_rank_one));
        eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min) - self.e0
    }
}

fn norm1(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `K⁻¹` by LU solve against the identity, failing above [`SINGULAR_CONDITION`].
fn solve_inverse(k: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = k.nrows();
    let norm = norm1(&k);
    let inv = k
        .lu()
        .solve(&DMatrix::identity(n, n))
        .ok_or(Error::Singular {
            condition: f64::INFINITY,
        })?;
    let condition = norm * norm1(&inv);
    if !condition.is_finite() || condition > SINGULAR_CONDITION {
        return Err(Error::Singular { condition });
    }
    Ok(inv)
}

/// `‖M - (Λ - tA - G - E₀)⁻¹‖_F / ‖M‖_F` from given tables with all pairs.
pub fn resolvent_error_from(
    cm: &CouplingMatrix,
    params: &ModelParams,
    tables: &GibbsTables,
    include_rank_one: bool,
) -> Result<f64> {
    let op = build_deformed(cm, params, tables)?;
    let inv = solve_inverse(op.shifted(include_rank_one))?;
    let n = params.n;
    let m = DMatrix::from_fn(n, n, |i, j| tables.pair(i, j));
    if m.iter().any(|x| x.is_nan()) {
        return Err(Error::InvalidParams("resolvent error needs every pair correlation".into()));
    }
    Ok((&m - inv).norm() / m.norm())
}

/// Relative Frobenius error of the resolvent approximation, rank-one term included.
pub fn resolvent_error(cm: &CouplingMatrix, params: &ModelParams) -> Result<f64> {
    resolvent_error_with(cm, params, true)
}

pub fn resolvent_error_with(
    cm: &CouplingMatrix,
    params: &ModelParams,
    include_rank_one: bool,
) -> Result<f64> {
    let tables = gibbs_tables_with(cm, params, &ReducedSpec::full(), &Request::all_pairs())?;
    resolvent_error_from(cm, params, &tables, include_rank_one)
}

/// Iteration budget of [`self_consistent_s`].
pub const S_MAX_ITER: usize = 1_000_000;

/// Physical solution of `S = n⁻¹ Σ_i (Λ_ii - e - tS)⁻¹`.
///
/// Plain iteration from `S₀ = n⁻¹ Σ (Λ_ii - e)⁻¹` increases monotonically to
/// the smallest root. A denominator reaching zero means no real root exists
/// on this branch.
pub fn self_consistent_s(lambda_diag: &[f64], t: f64, e: f64, tol: f64) -> Result<f64> {
    if lambda_diag.is_empty() {
        return Err(Error::InvalidParams("empty spectrum".into()));
    }
    if !(t >= 0.0) || !e.is_finite() || !(tol > 0.0) {
        return Err(Error::Domain(format!("invalid arguments t = {t}, e = {e}, tol = {tol}")));
    }
    let len = lambda_diag.len() as f64;
    let map = |s: f64| -> Result<f64> {
        let mut acc = 0.0;
        for &l in lambda_diag {
            let d = l - e - t * s;
            if !(d > 0.0) {
                return Err(Error::LeftRealBranch { e });
            }
            acc += 1.0 / d;
        }
        Ok(acc / len)
    };
    let mut s = map(0.0)?;
    if t == 0.0 {
        return Ok(s);
    }
    let mut defect = f64::INFINITY;
    for _ in 0..S_MAX_ITER {
        let next = map(s)?;
        defect = (next - s).abs();
        s = next;
        if defect <= tol {
            return Ok(s);
        }
    }
    Err(Error::NonConvergence {
        what: "self-consistent S(E)",
        iterations: S_MAX_ITER,
        defect,
    })
}

/// `(central difference of S at e0, X / (1 - tX))` with
/// `X = n⁻¹ Σ (Λ_ii - e0 - tS(e0))⁻²`.
pub fn s_prime_from_lambda(lambda_diag: &[f64], t: f64, e0: f64) -> Result<(f64, f64)> {
    let tol = 1e-14;
    let h = S_PRIME_STEP;
    let up = self_consistent_s(lambda_diag, t, e0 + h, tol)?;
    let down = self_consistent_s(lambda_diag, t, e0 - h, tol)?;
    let s = self_consistent_s(lambda_diag, t, e0, tol)?;
    let x = lambda_diag
        .iter()
        .map(|&l| (l - e0 - t * s).powi(-2))
        .sum::<f64>()
        / lambda_diag.len() as f64;
    let gap = 1.0 - t * x;
    if !(gap > 0.0) {
        return Err(Error::LeftRealBranch { e: e0 });
    }
    Ok(((up - down) / (2.0 * h), x / gap))
}

/// `S'(E₀)` for a disorder sample: finite difference and closed form.
pub fn s_prime_at_e0(cm: &CouplingMatrix, params: &ModelParams) -> Result<(f64, f64)> {
    let tables = gibbs_tables_with(cm, params, &ReducedSpec::full(), &Request::magnetizations())?;
    let op = build_deformed(cm, params, &tables)?;
    s_prime_from_lambda(&op.lambda_diag, params.t, op.e0)
}

/// One row of spectral output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralSample {
    pub n: usize,
    pub seed: u64,
    pub resolvent_error: f64,
    /// Smallest eigenvalue of `Λ - tA - G` minus `E₀`.
    pub margin: f64,
}

impl SpectralSample {
    pub fn measure(cm: &CouplingMatrix, params: &ModelParams, seed: u64) -> Result<Self> {
        let tables = gibbs_tables_with(cm, params, &ReducedSpec::full(), &Request::all_pairs())?;
        let op = build_deformed(cm, params, &tables)?;
        Ok(SpectralSample {
            n: params.n,
            seed,
            resolvent_error: resolvent_error_from(cm, params, &tables, true)?,
            margin: op.spectral_margin(true),
        })
    }
}

/// `n,seed,resolvent_error,margin` with a header row.
pub fn spectral_csv(samples: &[SpectralSample]) -> String {
    let mut out = String::from("n,seed,resolvent_error,margin\n");
    for s in samples {
        out.push_str(&format!(
            "{},{},{:.16e},{:.16e}\n",
            s.n, s.seed, s.resolvent_error, s.margin
        ));
    }
    out
}
