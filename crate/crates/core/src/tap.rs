//! Replica-symmetric quantities and TAP residuals against exact Gibbs data.
//!
//! The analytic side works with `f(x) = E tanh²(h + √(tx) Z)`, its fixed point
//! `q = f(q)`, the de Almeida–Thouless value `E t sech⁴(√(tq) Z + h)` and the
//! leading-order prediction for `E m_ij²`. The residual side evaluates the
//! hierarchical (cavity) and classical TAP equations for the one- and
//! two-point functions on a concrete disorder sample.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gibbs::{gibbs_tables_with, GibbsTables, ReducedSpec, Request};
use crate::model::{CouplingMatrix, ModelParams};
use crate::quadrature::QuadratureRule;

#[inline]
fn sech2(y: f64) -> f64 {
    let c = y.cosh();
    if c.is_infinite() {
        0.0
    } else {
        1.0 / (c * c)
    }
}

/// `E g(h + s Z)`, evaluated pointwise when `s = 0`.
fn gaussian_mean(rule: &QuadratureRule, h: f64, s: f64, g: impl Fn(f64) -> f64) -> f64 {
    if s == 0.0 {
        g(h)
    } else {
        rule.expect(|z| g(h + s * z))
    }
}

fn check_t(t: f64) -> Result<()> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!("t must be finite and nonnegative, got {t}")));
    }
    Ok(())
}

fn check_x(x: f64) -> Result<()> {
    if !(x >= 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("argument must be finite and nonnegative, got {x}")));
    }
    Ok(())
}

/// `f(x) = E tanh²(h + √(tx) Z)`.
pub fn f_map(x: f64, t: f64, h: f64, rule: &QuadratureRule) -> Result<f64> {
    check_x(x)?;
    check_t(t)?;
    let s = (t * x).sqrt();
    Ok(gaussian_mean(rule, h, s, |y| y.tanh().powi(2)))
}

/// `f'(x) = t E (1 - 2 sinh² y) / cosh⁴ y` at `y = h + √(tx) Z`.
pub fn f_prime(x: f64, t: f64, h: f64, rule: &QuadratureRule) -> Result<f64> {
    check_x(x)?;
    check_t(t)?;
    let s = (t * x).sqrt();
    // (1 - 2 sinh²)/cosh⁴ = sech⁴ - 2 tanh² sech²
    Ok(t * gaussian_mean(rule, h, s, |y| {
        let se = sech2(y);
        let th = y.tanh();
        se * se - 2.0 * th * th * se
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Relaxation `ω` in `q ← (1-ω) q + ω f(q)`.
    pub damping: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-12,
            max_iter: 10_000,
            damping: 1.0,
        }
    }
}

/// Damped iteration from `tanh²(h)`; returns the last iterate and its defect.
fn iterate(t: f64, h: f64, rule: &QuadratureRule, opts: &SolverOptions) -> Result<(f64, f64)> {
    let mut q = h.tanh().powi(2);
    let mut defect = f64::INFINITY;
    for _ in 0..opts.max_iter {
        let fq = f_map(q, t, h, rule)?;
        defect = (q - fq).abs();
        if defect <= opts.tol {
            return Ok((q, defect));
        }
        q = ((1.0 - opts.damping) * q + opts.damping * fq).clamp(0.0, 1.0);
    }
    Ok((q, defect))
}

/// Replica-symmetric fixed point `q = E tanh²(√(tq) Z + h)` for `0 ≤ t < 1`.
///
/// Damped fixed-point iteration; if it stalls, bisection on `q - f(q)` over
/// `[0, 1]`. Fails rather than returning an unconverged value.
pub fn solve_q(t: f64, h: f64, rule: &QuadratureRule, tol: f64, max_iter: usize) -> Result<f64> {
    solve_q_with(
        t,
        h,
        rule,
        &SolverOptions {
            tol,
            max_iter,
            ..SolverOptions::default()
        },
    )
}

pub fn solve_q_with(t: f64, h: f64, rule: &QuadratureRule, opts: &SolverOptions) -> Result<f64> {
    check_t(t)?;
    if t >= 1.0 {
        return Err(Error::Domain(format!(
            "fixed point is only unique for t < 1, got t = {t}"
        )));
    }
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::Domain(format!("damping must lie in (0, 1], got {}", opts.damping)));
    }
    let (q, defect) = iterate(t, h, rule, opts)?;
    if defect <= opts.tol {
        return Ok(q);
    }
    // g(0) = -f(0) ≤ 0 and g(1) = 1 - f(1) ≥ 0.
    let g = |q: f64| f_map(q, t, h, rule).map(|fq| q - fq);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut best = (q, defect);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let gm = g(mid)?;
        if gm.abs() < best.1 {
            best = (mid, gm.abs());
        }
        if gm.abs() <= opts.tol {
            return Ok(mid);
        }
        if gm < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi.max(1e-300) {
            break;
        }
    }
    Err(Error::NonConvergence {
        what: "replica-symmetric fixed point",
        iterations: opts.max_iter,
        defect: best.1,
    })
}

/// Fixed-point branch reached by plain iteration from `tanh²(h)`, for any `t ≥ 0`.
///
/// For `t ≥ 1` the fixed point need not be unique; at `h = 0` this returns the
/// `q = 0` branch.
pub fn iterate_q(t: f64, h: f64, rule: &QuadratureRule, opts: &SolverOptions) -> Result<f64> {
    check_t(t)?;
    let (q, defect) = iterate(t, h, rule, opts)?;
    if defect <= opts.tol {
        Ok(q)
    } else {
        Err(Error::NonConvergence {
            what: "replica-symmetric iteration",
            iterations: opts.max_iter,
            defect,
        })
    }
}

fn check_q(q: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain(format!("q must lie in [0, 1], got {q}")));
    }
    Ok(())
}

/// `E sech⁴(√(tq) Z + h)`.
pub fn mean_sech4(t: f64, h: f64, q: f64, rule: &QuadratureRule) -> Result<f64> {
    check_t(t)?;
    check_q(q)?;
    let s = (t * q).sqrt();
    Ok(gaussian_mean(rule, h, s, |y| sech2(y).powi(2)))
}

/// `E t / cosh⁴(√(tq) Z + h)`; replica symmetry is expected while this is below 1.
pub fn at_value(t: f64, h: f64, q: f64, rule: &QuadratureRule) -> Result<f64> {
    Ok(t * mean_sech4(t, h, q, rule)?)
}

/// Leading-order `E m_ij² = (t/n) [1 - E t sech⁴]⁻¹ [E sech⁴]²` with `q` from [`solve_q`].
pub fn predicted_mij_sq(t: f64, h: f64, n: usize, rule: &QuadratureRule) -> Result<f64> {
    if n == 0 {
        return Err(Error::Domain("n must be positive".into()));
    }
    let opts = SolverOptions::default();
    let q = solve_q_with(t, h, rule, &opts)?;
    let s4 = mean_sech4(t, h, q, rule)?;
    let gap = 1.0 - t * s4;
    if gap <= 0.0 {
        return Err(Error::Domain(format!(
            "1 - E t sech⁴ = {gap} ≤ 0: prediction is singular at or beyond the AT line"
        )));
    }
    Ok(t / n as f64 / gap * s4 * s4)
}

/// Value with `nodes` nodes and its change when the node count is doubled.
pub fn node_doubling(
    nodes: usize,
    f: impl Fn(&QuadratureRule) -> Result<f64>,
) -> Result<(f64, f64)> {
    let base = f(&QuadratureRule::gauss_hermite(nodes)?)?;
    let doubled = f(&QuadratureRule::gauss_hermite(2 * nodes)?)?;
    Ok((base, (doubled - base).abs()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResidualKind {
    #[serde(rename = "hTAP1")]
    HTap1,
    #[serde(rename = "hTAP2")]
    HTap2,
    #[serde(rename = "TAP1")]
    Tap1,
    #[serde(rename = "TAP2")]
    Tap2,
}

impl ResidualKind {
    pub fn label(self) -> &'static str {
        match self {
            ResidualKind::HTap1 => "hTAP1",
            ResidualKind::HTap2 => "hTAP2",
            ResidualKind::Tap1 => "TAP1",
            ResidualKind::Tap2 => "TAP2",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualEntry {
    pub i: usize,
    pub j: Option<usize>,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub kind: ResidualKind,
    pub entries: Vec<ResidualEntry>,
    pub mean_square: f64,
}

impl ResidualReport {
    pub fn new(kind: ResidualKind, entries: Vec<ResidualEntry>) -> Self {
        let mean_square = if entries.is_empty() {
            0.0
        } else {
            entries.iter().map(|e| e.residual * e.residual).sum::<f64>() / entries.len() as f64
        };
        ResidualReport {
            kind,
            entries,
            mean_square,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().map(|e| e.residual.abs()).fold(0.0, f64::max)
    }

    /// `kind,i,j,residual,squared` with an empty `j` for site residuals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,i,j,residual,squared\n");
        for e in &self.entries {
            let j = e.j.map(|j| j.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{:.16e},{:.16e}\n",
                self.kind.label(),
                e.i,
                j,
                e.residual,
                e.residual * e.residual
            ));
        }
        out
    }
}

fn check_pair(params: &ModelParams, i: usize, j: usize) -> Result<()> {
    if i >= params.n || j >= params.n {
        return Err(Error::InvalidIndex(format!("sites ({i}, {j}) out of range")));
    }
    if i == j {
        return Err(Error::InvalidIndex("pair residual needs i != j".into()));
    }
    Ok(())
}

/// Cavity field `h_i + Σ_{k≠i} g_ik m_k^{(i)}`.
pub fn cavity_field(cm: &CouplingMatrix, params: &ModelParams, i: usize, cavity: &GibbsTables) -> f64 {
    params.field[i]
        + (0..params.n)
            .filter(|&k| k != i)
            .map(|k| cm.get(i, k) * cavity.m[k])
            .sum::<f64>()
}

/// Per-site `m_i - tanh(h_i + Σ_{j≠i} g_ij m_j^{(i)})`.
pub fn htap1_residuals(cm: &CouplingMatrix, params: &ModelParams) -> Result<ResidualReport> {
    let full = gibbs_tables_with(cm, params, &ReducedSpec::full(), &Request::magnetizations())?;
    let entries = (0..params.n)
        .into_par_iter()
        .map(|i| {
            let cavity =
                gibbs_tables_with(cm, params, &ReducedSpec::cavity(i), &Request::magnetizations())?;
            Ok(ResidualEntry {
                i,
                j: None,
                residual: full.m[i] - cavity_field(cm, params, i, &cavity).tanh(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResidualReport::new(ResidualKind::HTap1, entries))
}

fn htap2_from(
    cm: &CouplingMatrix,
    params: &ModelParams,
    i: usize,
    j: usize,
    m_ij: f64,
    cavity: &GibbsTables,
) -> f64 {
    let prefactor = 1.0 - cavity_field(cm, params, i, cavity).tanh().powi(2);
    let sum: f64 = (0..params.n)
        .filter(|&l| l != i)
        .map(|l| cm.get(i, l) * cavity.pair(l, j))
        .sum();
    m_ij - prefactor * sum
}

/// `m_ij - (1 - tanh²(h_i + Σ_k g_ik m_k^{(i)})) Σ_{l≠i} g_il m_lj^{(i)}`, with
/// `m_jj^{(i)} = 1 - (m_j^{(i)})²` for the `l = j` term.
pub fn htap2_residual(cm: &CouplingMatrix, params: &ModelParams, i: usize, j: usize) -> Result<f64> {
    check_pair(params, i, j)?;
    let full = gibbs_tables_with(cm, params, &ReducedSpec::full(), &Request::pair_rows(vec![i]))?;
    let cavity = gibbs_tables_with(cm, params, &ReducedSpec::cavity(i), &Request::pair_rows(vec![j]))?;
    Ok(htap2_from(cm, params, i, j, full.pair(i, j), &cavity))
}

/// [`htap2_residual`] for every ordered pair `i ≠ j`.
pub fn htap2_report(cm: &CouplingMatrix, params: &ModelParams) -> Result<ResidualReport> {
    let full = gibbs_tables_with(cm, params, &ReducedSpec::full(), &Request::all_pairs())?;
    let n = params.n;
    let rows = (0..n)
        .into_par_iter()
        .map(|i| {
            let cavity =
                gibbs_tables_with(cm, params, &ReducedSpec::cavity(i), &Request::all_pairs())?;
            Ok((0..n)
                .filter(|&j| j != i)
                .map(|j| ResidualEntry {
                    i,
                    j: Some(j),
                    residual: htap2_from(cm, params, i, j, full.pair(i, j), &cavity),
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResidualReport::new(ResidualKind::HTap2, rows.into_iter().flatten().collect()))
}

/// TAP residuals `m_i - tanh(h_i + Σ_j g_ij m_j - t(1 - q_N) m_i)` from full-system tables.
pub fn tap1_from_tables(cm: &CouplingMatrix, params: &ModelParams, tables: &GibbsTables) -> ResidualReport {
    let n = params.n;
    let onsager = params.t * (1.0 - tables.q_n);
    let entries = (0..n)
        .map(|i| {
            let local = params.field[i]
                + (0..n).filter(|&j| j != i).map(|j| cm.get(i, j) * tables.m[j]).sum::<f64>()
                - onsager * tables.m[i];
            ResidualEntry {
                i,
                j: None,
                residual: tables.m[i] - local.tanh(),
            }
        })
        .collect();
    ResidualReport::new(ResidualKind::Tap1, entries)
}

pub fn tap1_residuals(cm: &CouplingMatrix, params: &ModelParams) -> Result<ResidualReport> {
    let tables = gibbs_tables_with(cm, params, &ReducedSpec::full(), &Request::magnetizations())?;
    Ok(tap1_from_tables(cm, params, &tables))
}

/// Two-point TAP residual from full-system tables with all pairs.
///
/// `m_ij - (1 - m_i²)(Σ_{k≠i} g_ik m_kj + (2t/N)(M m)_j m_i - t(1 - q_N) m_ij)`,
/// where `M` carries `1 - m_k²` on its diagonal.
pub fn tap2_from_tables(
    cm: &CouplingMatrix,
    params: &ModelParams,
    tables: &GibbsTables,
    i: usize,
    j: usize,
) -> f64 {
    let n = params.n;
    let t = params.t;
    let mi = tables.m[i];
    let mij = tables.pair(i, j);
    let coupling_sum: f64 = (0..n)
        .filter(|&k| k != i)
        .map(|k| cm.get(i, k) * tables.pair(k, j))
        .sum();
    let mm_j: f64 = (0..n).map(|k| tables.pair(j, k) * tables.m[k]).sum();
    let bracket = coupling_sum + 2.0 * t / n as f64 * mm_j * mi - t * (1.0 - tables.q_n) * mij;
    mij - (1.0 - mi * mi) * bracket
}

pub fn tap2_residual(cm: &CouplingMatrix, params: &ModelParams, i: usize, j: usize) -> Result<f64> {
    check_pair(params, i, j)?;
    // rows i and j hold every correlation the residual touches
    let tables = gibbs_tables_with(cm, params, &ReducedSpec::full(), &Request::pair_rows(vec![i, j]))?;
    Ok(tap2_from_tables(cm, params, &tables, i, j))
}

/// [`tap2_residual`] for every ordered pair `i ≠ j`.
pub fn tap2_report(cm: &CouplingMatrix, params: &ModelParams) -> Result<ResidualReport> {
    let tables = gibbs_tables_with(cm, params, &ReducedSpec::full(), &Request::all_pairs())?;
    let n = params.n;
    let entries = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| ResidualEntry {
            i,
            j: Some(j),
            residual: tap2_from_tables(cm, params, &tables, i, j),
        })
        .collect();
    Ok(ResidualReport::new(ResidualKind::Tap2, entries))
}
