//! Itô decompositions along a Brownian coupling row.
//!
//! Row `i` of the disorder (`g_ik`, `k ∉ A`) follows a [`CouplingPath`] from
//! zero; every other coupling sits at the path's terminal value. Integrands
//! are evaluated by exact enumeration at left endpoints, and the residual
//! compares the discretized stochastic and drift integrals with the change of
//! the observable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gibbs::{gibbs_tables_with, GibbsTables, ReducedSpec, Request};
use crate::model::{pair_index, CouplingMatrix, CouplingPath, ModelParams};

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
struct Compensated {
    sum: f64,
    carry: f64,
}

impl Compensated {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Observable whose increments are decomposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ItoTarget {
    /// `δ_i m_j^{[A∪{i}]}`, integrated with `ε_i m_kj` and drift `δ_i(m_k m_kj)`.
    DeltaMagnetization,
    /// `m_jk^{[A∪{i}]}` at the clamped spin.
    ClampedPair { k: usize },
    /// `m_k^{[A∪{i}]} m_jk^{[A∪{i}]}` at the clamped spin.
    ClampedProduct { k: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItoCheckConfig {
    pub clamped_site: usize,
    /// Spin of the clamped site; unused by [`ItoTarget::DeltaMagnetization`].
    pub clamped_spin: i8,
    pub target_site: usize,
    /// Number of grid intervals; the path is coarsened to this resolution.
    pub steps: usize,
    /// Ambient reduced measure `A`.
    pub reduced: ReducedSpec,
    pub target: ItoTarget,
}

impl ItoCheckConfig {
    pub fn new(clamped_site: usize, target_site: usize, steps: usize) -> Self {
        ItoCheckConfig {
            clamped_site,
            clamped_spin: 1,
            target_site,
            steps,
            reduced: ReducedSpec::full(),
            target: ItoTarget::DeltaMagnetization,
        }
    }

    pub fn with_target(mut self, target: ItoTarget) -> Self {
        self.target = target;
        self
    }

    pub fn with_spin(mut self, spin: i8) -> Self {
        self.clamped_spin = spin;
        self
    }

    pub fn with_reduced(mut self, reduced: ReducedSpec) -> Self {
        self.reduced = reduced;
        self
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let (i, j) = (self.clamped_site, self.target_site);
        if i >= n || j >= n {
            return Err(Error::InvalidIndex(format!("sites ({i}, {j}) out of range for n = {n}")));
        }
        if i == j {
            return Err(Error::InvalidIndex("clamped and target site must differ".into()));
        }
        self.reduced.validate(n)?;
        if !self.reduced.is_active(i) || !self.reduced.is_active(j) {
            return Err(Error::InvalidIndex(format!(
                "sites {i} and {j} must be active in the ambient measure"
            )));
        }
        if self.clamped_spin != 1 && self.clamped_spin != -1 {
            return Err(Error::InvalidParams(format!(
                "clamped spin must be ±1, got {}",
                self.clamped_spin
            )));
        }
        if self.steps < 2 {
            return Err(Error::InvalidParams(format!(
                "need at least 2 steps, got {}",
                self.steps
            )));
        }
        match self.target {
            ItoTarget::DeltaMagnetization => {}
            ItoTarget::ClampedPair { k } | ItoTarget::ClampedProduct { k } => {
                if k >= n || k == i || !self.reduced.is_active(k) {
                    return Err(Error::InvalidIndex(format!(
                        "second target site {k} must be active and differ from {i}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Partial sums after grid step `step` (time `s`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItoRow {
    pub step: usize,
    pub s: f64,
    /// Observable at `s` minus its value at 0.
    pub lhs: f64,
    pub martingale: f64,
    pub drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItoTrace {
    pub rows: Vec<ItoRow>,
    pub lhs: f64,
    pub martingale: f64,
    pub drift: f64,
    /// Martingale sum split by coupling `g_ik`, indexed by `k`.
    pub martingale_by_site: Vec<f64>,
    /// Drift sum split by the summation index `k`.
    pub drift_by_site: Vec<f64>,
    pub residual: f64,
}

impl ItoTrace {
    fn trivial(n: usize) -> Self {
        ItoTrace {
            rows: vec![ItoRow {
                step: 0,
                s: 0.0,
                lhs: 0.0,
                martingale: 0.0,
                drift: 0.0,
            }],
            lhs: 0.0,
            martingale: 0.0,
            drift: 0.0,
            martingale_by_site: vec![0.0; n],
            drift_by_site: vec![0.0; n],
            residual: 0.0,
        }
    }

    /// `step,s,lhs,martingale,drift` per grid point.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,s,lhs,martingale,drift\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                r.step, r.s, r.lhs, r.martingale, r.drift
            ));
        }
        out
    }
}

/// Terminal couplings with row `i` replaced as the path is walked.
struct RowFlow<'a> {
    path: &'a CouplingPath,
    row: usize,
    sites: Vec<usize>,
    matrix: CouplingMatrix,
}

impl<'a> RowFlow<'a> {
    fn new(path: &'a CouplingPath, row: usize, sites: Vec<usize>) -> Self {
        let mut matrix = path.terminal();
        for &k in &sites {
            matrix.set(row, k, 0.0);
        }
        RowFlow {
            path,
            row,
            sites,
            matrix,
        }
    }

    fn increment(&self, step: usize, k: usize) -> f64 {
        self.path.increment(step)[pair_index(self.path.n(), self.row.min(k), self.row.max(k))]
    }

    /// Moves the row from grid point `step` to `step + 1`.
    fn advance(&mut self, step: usize, values: &mut [f64]) {
        for &k in &self.sites {
            values[k] += self.increment(step, k);
            self.matrix.set(self.row, k, values[k]);
        }
    }
}

/// Moments entering one grid point of the decomposition.
struct Snapshot {
    value: f64,
    /// Integrand of `dg_ik`, indexed by `k`.
    martingale: Vec<f64>,
    /// Drift integrand before the factor `-ds/N`, indexed by `k`.
    drift: Vec<f64>,
}

fn tables_at(
    cm: &CouplingMatrix,
    params: &ModelParams,
    cfg: &ItoCheckConfig,
    spin: i8,
    request: &Request,
) -> Result<GibbsTables> {
    let spec = cfg.reduced.clone().clamping(cfg.clamped_site, spin);
    gibbs_tables_with(cm, params, &spec, request)
}

fn snapshot(
    cm: &CouplingMatrix,
    params: &ModelParams,
    cfg: &ItoCheckConfig,
    sites: &[usize],
) -> Result<Snapshot> {
    let n = params.n;
    let j = cfg.target_site;
    let mut martingale = vec![0.0; n];
    let mut drift = vec![0.0; n];
    match cfg.target {
        ItoTarget::DeltaMagnetization => {
            let request = Request::pair_rows(vec![j]);
            let plus = tables_at(cm, params, cfg, 1, &request)?;
            let minus = tables_at(cm, params, cfg, -1, &request)?;
            for &k in sites {
                martingale[k] = 0.5 * (plus.pair(k, j) + minus.pair(k, j));
                drift[k] = 0.5 * (plus.m[k] * plus.pair(k, j) - minus.m[k] * minus.pair(k, j));
            }
            Ok(Snapshot {
                value: 0.5 * (plus.m[j] - minus.m[j]),
                martingale,
                drift,
            })
        }
        ItoTarget::ClampedPair { k } | ItoTarget::ClampedProduct { k } => {
            let sigma = cfg.clamped_spin as f64;
            let triples = sites.iter().map(|&l| [j, k, l]).collect();
            let request = Request::pair_rows(vec![j, k]).with_triples(triples);
            let tab = tables_at(cm, params, cfg, cfg.clamped_spin, &request)?;
            let m_jk = tab.pair(j, k);
            for &l in sites {
                let m_jkl = tab.triple(j, k, l).expect("requested triple");
                let pair_drift = tab.m[l] * m_jkl + tab.pair(j, l) * tab.pair(k, l);
                if let ItoTarget::ClampedPair { .. } = cfg.target {
                    martingale[l] = sigma * m_jkl;
                    drift[l] = pair_drift;
                } else {
                    let m_k = tab.m[k];
                    let m_kl = tab.pair(k, l);
                    martingale[l] = sigma * (m_jk * m_kl + m_k * m_jkl);
                    // the quadratic covariation enters with the opposite sign
                    drift[l] = tab.m[l] * m_jk * m_kl + m_k * pair_drift - m_kl * m_jkl;
                }
            }
            let value = if let ItoTarget::ClampedPair { .. } = cfg.target {
                m_jk
            } else {
                tab.m[k] * m_jk
            };
            Ok(Snapshot {
                value,
                martingale,
                drift,
            })
        }
    }
}

/// Full decomposition with per-step partial sums.
pub fn ito_decomposition_trace(
    path: &CouplingPath,
    cfg: &ItoCheckConfig,
    params: &ModelParams,
) -> Result<ItoTrace> {
    params.validate()?;
    let n = params.n;
    if path.n() != n {
        return Err(Error::InvalidParams(format!(
            "path has n = {} but params have n = {n}",
            path.n()
        )));
    }
    cfg.validate(n)?;
    if path.steps() == 0 {
        return Ok(ItoTrace::trivial(n));
    }
    let coarse;
    let path = if path.steps() == cfg.steps {
        path
    } else {
        if !path.steps().is_multiple_of(cfg.steps) {
            return Err(Error::InvalidParams(format!(
                "path with {} steps cannot be observed at {} steps",
                path.steps(),
                cfg.steps
            )));
        }
        coarse = path.coarsen(path.steps() / cfg.steps)?;
        &coarse
    };

    let i = cfg.clamped_site;
    let sites: Vec<usize> = (0..n).filter(|&k| k != i && cfg.reduced.is_active(k)).collect();
    let mut flow = RowFlow::new(path, i, sites.clone());
    let mut row_values = vec![0.0; n];
    let speed = 1.0 / n as f64;

    let mut martingale = Compensated::default();
    let mut drift = Compensated::default();
    let mut mart_site = vec![Compensated::default(); n];
    let mut drift_site = vec![Compensated::default(); n];
    let mut rows = Vec::with_capacity(path.steps() + 1);

    let mut snap = snapshot(&flow.matrix, params, cfg, &sites)?;
    let start = snap.value;
    rows.push(ItoRow {
        step: 0,
        s: 0.0,
        lhs: 0.0,
        martingale: 0.0,
        drift: 0.0,
    });
    let grid = path.grid();
    for step in 0..path.steps() {
        let ds = grid[step + 1] - grid[step];
        for &k in &sites {
            let dm = snap.martingale[k] * flow.increment(step, k);
            let dd = -snap.drift[k] * ds * speed;
            martingale.add(dm);
            drift.add(dd);
            mart_site[k].add(dm);
            drift_site[k].add(dd);
        }
        flow.advance(step, &mut row_values);
        snap = snapshot(&flow.matrix, params, cfg, &sites)?;
        rows.push(ItoRow {
            step: step + 1,
            s: grid[step + 1],
            lhs: snap.value - start,
            martingale: martingale.value(),
            drift: drift.value(),
        });
    }
    let lhs = snap.value - start;
    let (m, d) = (martingale.value(), drift.value());
    Ok(ItoTrace {
        rows,
        lhs,
        martingale: m,
        drift: d,
        martingale_by_site: mart_site.iter().map(Compensated::value).collect(),
        drift_by_site: drift_site.iter().map(Compensated::value).collect(),
        residual: (lhs - (m + d)).abs(),
    })
}

/// `|ΔX - (martingale sum + drift sum)|` for the configured observable `X`.
pub fn ito_decomposition_residual(
    path: &CouplingPath,
    cfg: &ItoCheckConfig,
    params: &ModelParams,
) -> Result<f64> {
    Ok(ito_decomposition_trace(path, cfg, params)?.residual)
}

/// `m_j^{[i]}(s) - m_j^{(i)}` at every grid point, with `σ_i = spin`.
pub fn cavity_difference_path(
    path: &CouplingPath,
    params: &ModelParams,
    i: usize,
    j: usize,
    spin: i8,
) -> Result<Vec<f64>> {
    params.validate()?;
    let n = params.n;
    if path.n() != n {
        return Err(Error::InvalidParams(format!(
            "path has n = {} but params have n = {n}",
            path.n()
        )));
    }
    if i >= n || j >= n || i == j {
        return Err(Error::InvalidIndex(format!("need distinct sites below n, got ({i}, {j})")));
    }
    if spin != 1 && spin != -1 {
        return Err(Error::InvalidParams(format!("spin must be ±1, got {spin}")));
    }
    let terminal = path.terminal();
    let request = Request::magnetizations();
    let cavity = gibbs_tables_with(&terminal, params, &ReducedSpec::cavity(i), &request)?;
    let sites: Vec<usize> = (0..n).filter(|&k| k != i).collect();
    let mut flow = RowFlow::new(path, i, sites);
    let mut row_values = vec![0.0; n];
    let clamped = ReducedSpec::full().clamping(i, spin);
    let mut out = Vec::with_capacity(path.steps() + 1);
    for step in 0..=path.steps() {
        if step > 0 {
            flow.advance(step - 1, &mut row_values);
        }
        let tab = gibbs_tables_with(&flow.matrix, params, &clamped, &request)?;
        out.push(tab.m[j] - cavity.m[j]);
    }
    Ok(out)
}
