//! Disorder-averaged experiments and power-law fits in the system size.
//!
//! Every sample draws its couplings from a seed derived from
//! `(master_seed, n, sample index)`, samples run in parallel, and statistics
//! are reduced sequentially in sample order, so results do not depend on the
//! thread count.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ito_decomposition_residual, ItoCheckConfig};
use crate::error::{Error, Result};
use crate::gibbs::{gibbs_tables_with, ReducedSpec, Request};
use crate::model::{sample_couplings, sample_path, substream_seed, CouplingPath, ModelParams, DEFAULT_ENUM_CAP};
use crate::quadrature::{QuadratureRule, DEFAULT_NODES};
use crate::spectral::resolvent_error;
use crate::tap::{
    htap1_residuals, htap2_residual, predicted_mij_sq, solve_q, tap1_from_tables, tap2_residual,
};

/// Scalar measured on each disorder sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Experiment {
    /// Mean over sites of the squared cavity TAP residual.
    Htap1,
    /// Squared two-point cavity residual at `(0, 1)`.
    Htap2,
    Tap1,
    Tap2,
    /// `(q_N - q)²`.
    QnConc,
    /// `n m_01²`.
    MijSq,
    /// `|m_01|^p`.
    MijMoment { p: f64 },
    /// Itô decomposition residual for `δ_0 m_1`.
    Ito,
    Spectral,
}

impl Experiment {
    pub fn label(&self) -> String {
        match self {
            Experiment::Htap1 => "htap1".into(),
            Experiment::Htap2 => "htap2".into(),
            Experiment::Tap1 => "tap1".into(),
            Experiment::Tap2 => "tap2".into(),
            Experiment::QnConc => "qn_conc".into(),
            Experiment::MijSq => "mij_sq".into(),
            Experiment::MijMoment { p } => format!("mij_moment:{p}"),
            Experiment::Ito => "ito".into(),
            Experiment::Spectral => "spectral".into(),
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Accepts the labels of [`Experiment::label`]; `mij_moment` takes its
/// exponent after a colon.
impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase().replace('-', "_");
        let (head, arg) = match lower.split_once(':') {
            Some((h, a)) => (h.to_string(), Some(a.to_string())),
            None => (lower, None),
        };
        let plain = |e: Experiment| match &arg {
            None => Ok(e),
            Some(_) => Err(Error::InvalidParams(format!("experiment {head} takes no argument"))),
        };
        match head.as_str() {
            "htap1" => plain(Experiment::Htap1),
            "htap2" => plain(Experiment::Htap2),
            "tap1" => plain(Experiment::Tap1),
            "tap2" => plain(Experiment::Tap2),
            "qn_conc" => plain(Experiment::QnConc),
            "mij_sq" => plain(Experiment::MijSq),
            "ito" => plain(Experiment::Ito),
            "spectral" => plain(Experiment::Spectral),
            "mij_moment" => {
                let p = arg
                    .ok_or_else(|| Error::InvalidParams("mij_moment needs an exponent, e.g. mij_moment:2.1".into()))?
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidParams(format!("bad exponent: {e}")))?;
                Ok(Experiment::MijMoment { p })
            }
            _ => Err(Error::InvalidParams(format!("unknown experiment '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub n_values: Vec<usize>,
    pub samples: usize,
    pub t: f64,
    pub h: f64,
    pub master_seed: u64,
    pub experiment: Experiment,
    pub quad_nodes: usize,
    /// Grid intervals of the Itô experiment.
    pub steps: usize,
    pub enum_cap: usize,
}

impl EnsembleConfig {
    pub fn new(experiment: Experiment, n_values: Vec<usize>, samples: usize, t: f64, h: f64, master_seed: u64) -> Self {
        EnsembleConfig {
            n_values,
            samples,
            t,
            h,
            master_seed,
            experiment,
            quad_nodes: DEFAULT_NODES,
            steps: 64,
            enum_cap: DEFAULT_ENUM_CAP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_values.is_empty() {
            return Err(Error::InvalidParams("n_values is empty".into()));
        }
        if self.n_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParams("n_values must be strictly increasing".into()));
        }
        if self.n_values[0] < 2 {
            return Err(Error::InvalidParams("every n must be at least 2".into()));
        }
        if let Some(&n) = self.n_values.iter().find(|&&n| n > self.enum_cap) {
            return Err(Error::TooManySites {
                active: n,
                cap: self.enum_cap,
            });
        }
        if self.samples < 2 {
            return Err(Error::InvalidParams("need at least 2 samples per n".into()));
        }
        if !(self.t >= 0.0) || !self.t.is_finite() || !self.h.is_finite() {
            return Err(Error::InvalidParams(format!("invalid t = {}, h = {}", self.t, self.h)));
        }
        if self.quad_nodes == 0 {
            return Err(Error::InvalidParams("quad_nodes must be positive".into()));
        }
        match self.experiment {
            Experiment::MijMoment { p } if !(p > 0.0 && p.is_finite()) => {
                Err(Error::InvalidParams(format!("moment exponent must be positive, got {p}")))
            }
            Experiment::Ito if self.steps < 2 => {
                Err(Error::InvalidParams("Itô experiment needs at least 2 steps".into()))
            }
            Experiment::QnConc | Experiment::MijSq if self.t >= 1.0 => Err(Error::Domain(format!(
                "replica-symmetric reference needs t < 1, got {}",
                self.t
            ))),
            _ => Ok(()),
        }
    }

    /// Seed of sample `index` at size `n`.
    pub fn sample_seed(&self, n: usize, index: usize) -> u64 {
        substream_seed(substream_seed(self.master_seed, n as u64), index as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerNStats {
    pub n: usize,
    pub samples: usize,
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    /// `√(variance / samples)`.
    pub stderr: f64,
    #[serde(skip)]
    pub values: Vec<f64>,
}

impl PerNStats {
    pub fn from_values(n: usize, values: Vec<f64>) -> Self {
        let k = values.len();
        let mean = values.iter().sum::<f64>() / k as f64;
        let variance = if k > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64
        } else {
            0.0
        };
        PerNStats {
            n,
            samples: k,
            mean,
            variance,
            stderr: (variance / k as f64).sqrt(),
            values,
        }
    }

    pub fn median(&self) -> f64 {
        let mut v = self.values.clone();
        v.sort_by(f64::total_cmp);
        let k = v.len();
        if k == 0 {
            f64::NAN
        } else if k % 2 == 1 {
            v[k / 2]
        } else {
            0.5 * (v[k / 2 - 1] + v[k / 2])
        }
    }
}

/// Least-squares line through `(log n, log y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    /// `log y - (intercept + slope log n)` per point.
    pub residuals: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FitOutcome {
    Fitted(PowerFit),
    Degenerate { reason: String },
}

impl FitOutcome {
    pub fn fitted(&self) -> Option<&PowerFit> {
        match self {
            FitOutcome::Fitted(f) => Some(f),
            FitOutcome::Degenerate { .. } => None,
        }
    }
}

/// Fits `log y = intercept + slope log n`; the slope error comes from the residual variance.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerFit> {
    if points.len() < 3 {
        return Err(Error::InvalidParams(format!(
            "power-law fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    if let Some(&(n, y)) = points.iter().find(|&&(n, y)| !(y > 0.0) || !(n > 0.0) || !y.is_finite()) {
        return Err(Error::Domain(format!("power-law fit needs positive data, got ({n}, {y})")));
    }
    let k = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let xbar = xs.iter().sum::<f64>() / k;
    let ybar = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("power-law fit needs at least two distinct n".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let residuals: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| y - (intercept + slope * x)).collect();
    let ssr: f64 = residuals.iter().map(|r| r * r).sum();
    let slope_stderr = (ssr / (k - 2.0) / sxx).sqrt();
    Ok(PowerFit {
        slope,
        intercept,
        slope_stderr,
        residuals,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub per_n: Vec<PerNStats>,
    pub fit: FitOutcome,
    /// Replica-symmetric overlap used by `qn_conc`.
    pub q: Option<f64>,
    /// `n E m_01²` at leading order, for `mij_sq`.
    pub prediction: Option<f64>,
}

impl EnsembleStats {
    pub fn for_n(&self, n: usize) -> Option<&PerNStats> {
        self.per_n.iter().find(|s| s.n == n)
    }

    /// `n,samples,mean,variance,stderr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,samples,mean,variance,stderr\n");
        for s in &self.per_n {
            out.push_str(&format!(
                "{},{},{:.16e},{:.16e},{:.16e}\n",
                s.n, s.samples, s.mean, s.variance, s.stderr
            ));
        }
        out
    }

    /// Two columns `log_n log_mean` for sizes with a positive mean.
    pub fn plot_data(&self) -> String {
        let mut out = String::from("# log_n log_mean\n");
        for s in self.per_n.iter().filter(|s| s.mean > 0.0) {
            out.push_str(&format!("{:.16e} {:.16e}\n", (s.n as f64).ln(), s.mean.ln()));
        }
        out
    }
}

/// Means at or below this are rounding noise of an exactly vanishing scalar
/// (a residual of order 1e-12, squared).
pub const ZERO_FLOOR: f64 = 1e-24;

/// Quantities shared by every sample of a run.
struct Context {
    q: Option<f64>,
}

fn sample_scalar(cfg: &EnsembleConfig, ctx: &Context, n: usize, seed: u64) -> Result<f64> {
    let params = ModelParams::uniform(n, cfg.t, cfg.h)?.with_enum_cap(cfg.enum_cap)?;
    let full = ReducedSpec::full();
    if let Experiment::Ito = cfg.experiment {
        let path = if cfg.t > 0.0 {
            sample_path(&params, cfg.steps, seed)?
        } else {
            CouplingPath::degenerate(n)
        };
        return ito_decomposition_residual(&path, &ItoCheckConfig::new(0, 1, cfg.steps), &params);
    }
    let cm = sample_couplings(&params, seed)?;
    match cfg.experiment {
        Experiment::Htap1 => Ok(htap1_residuals(&cm, &params)?.mean_square),
        Experiment::Htap2 => Ok(htap2_residual(&cm, &params, 0, 1)?.powi(2)),
        Experiment::Tap1 => {
            let tab = gibbs_tables_with(&cm, &params, &full, &Request::magnetizations())?;
            Ok(tap1_from_tables(&cm, &params, &tab).mean_square)
        }
        Experiment::Tap2 => Ok(tap2_residual(&cm, &params, 0, 1)?.powi(2)),
        Experiment::QnConc => {
            let tab = gibbs_tables_with(&cm, &params, &full, &Request::magnetizations())?;
            let q = ctx.q.expect("overlap is solved before sampling");
            Ok((tab.q_n - q).powi(2))
        }
        Experiment::MijSq | Experiment::MijMoment { .. } => {
            let tab = gibbs_tables_with(&cm, &params, &full, &Request::pair_rows(vec![0]))?;
            let m01 = tab.pair(0, 1);
            Ok(match cfg.experiment {
                Experiment::MijMoment { p } => m01.abs().powf(p),
                _ => n as f64 * m01 * m01,
            })
        }
        Experiment::Spectral => resolvent_error(&cm, &params),
        Experiment::Ito => unreachable!("handled above"),
    }
}

/// Evaluates `measure` on every sample in parallel and returns the values in
/// sample order, or the failure of the lowest failing index.
fn collect_samples(
    n: usize,
    samples: usize,
    seed_of: impl Fn(usize) -> u64 + Sync,
    measure: impl Fn(u64) -> Result<f64> + Sync,
) -> Result<Vec<f64>> {
    let outcomes: Vec<Result<f64>> = (0..samples)
        .into_par_iter()
        .map(|idx| measure(seed_of(idx)))
        .collect();
    outcomes
        .into_iter()
        .enumerate()
        .map(|(idx, outcome)| {
            outcome.map_err(|source| Error::SampleFailed {
                n,
                sample: idx,
                seed: seed_of(idx),
                source: Box::new(source),
            })
        })
        .collect()
}

/// Runs every sample at every size; the first failing sample (in order) aborts the run.
pub fn run_ensemble(cfg: &EnsembleConfig) -> Result<EnsembleStats> {
    cfg.validate()?;
    let rule = QuadratureRule::gauss_hermite(cfg.quad_nodes)?;
    let q = match cfg.experiment {
        Experiment::QnConc => Some(solve_q(cfg.t, cfg.h, &rule, 1e-12, 10_000)?),
        _ => None,
    };
    let prediction = match cfg.experiment {
        // n E m_01² is n-independent at leading order
        Experiment::MijSq => Some(predicted_mij_sq(cfg.t, cfg.h, 1, &rule)?),
        _ => None,
    };
    let ctx = Context { q };
    let mut per_n = Vec::with_capacity(cfg.n_values.len());
    for &n in &cfg.n_values {
        let values = collect_samples(n, cfg.samples, |idx| cfg.sample_seed(n, idx), |seed| {
            sample_scalar(cfg, &ctx, n, seed)
        })?;
        per_n.push(PerNStats::from_values(n, values));
    }
    let fit = if per_n.len() < 3 {
        FitOutcome::Degenerate {
            reason: format!("{} sizes; a fit needs at least 3", per_n.len()),
        }
    } else if per_n.iter().any(|s| !(s.mean > ZERO_FLOOR)) {
        FitOutcome::Degenerate {
            reason: format!("a mean is at or below {ZERO_FLOOR:e}, indistinguishable from zero"),
        }
    } else {
        let points: Vec<(f64, f64)> = per_n.iter().map(|s| (s.n as f64, s.mean)).collect();
        FitOutcome::Fitted(fit_power_law(&points)?)
    };
    Ok(EnsembleStats {
        per_n,
        fit,
        q,
        prediction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law() {
        let fit = fit_power_law(&[(8.0, 0.5), (16.0, 0.25), (32.0, 0.125)]).unwrap();
        assert!((fit.slope + 1.0).abs() < 1e-14);
        assert!(fit.slope_stderr < 1e-7);
        let flat = fit_power_law(&[(8.0, 0.3), (12.0, 0.3), (20.0, 0.3)]).unwrap();
        assert_eq!(flat.slope, 0.0);
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(fit_power_law(&[(8.0, 0.5), (16.0, 0.25)]).is_err());
        assert!(fit_power_law(&[(8.0, 0.5), (16.0, 0.0), (32.0, 0.1)]).is_err());
        assert!(fit_power_law(&[(8.0, 0.5), (16.0, -1.0), (32.0, 0.1)]).is_err());
    }

    #[test]
    fn experiment_labels_round_trip() {
        for e in [
            Experiment::Htap1,
            Experiment::Htap2,
            Experiment::Tap1,
            Experiment::Tap2,
            Experiment::QnConc,
            Experiment::MijSq,
            Experiment::MijMoment { p: 2.1 },
            Experiment::Ito,
            Experiment::Spectral,
        ] {
            assert_eq!(e.label().parse::<Experiment>().unwrap(), e);
        }
        assert!("mij_moment".parse::<Experiment>().is_err());
        assert!("htap1:3".parse::<Experiment>().is_err());
        assert!("nope".parse::<Experiment>().is_err());
        assert_eq!("QN-CONC".parse::<Experiment>().unwrap(), Experiment::QnConc);
    }

    #[test]
    fn config_validation() {
        let ok = EnsembleConfig::new(Experiment::Tap1, vec![4, 6, 8], 3, 0.3, 0.1, 1);
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.n_values = vec![6, 4];
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.samples = 1;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.n_values = vec![4, 30];
        assert!(matches!(bad.validate(), Err(Error::TooManySites { .. })));
        let mut bad = ok;
        bad.experiment = Experiment::MijMoment { p: -1.0 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn uncoupled_tap1_is_degenerate() {
        let cfg = EnsembleConfig::new(Experiment::Tap1, vec![4, 6, 8], 4, 0.0, 0.3, 5);
        let stats = run_ensemble(&cfg).unwrap();
        assert!(stats.per_n.iter().all(|s| s.values.iter().all(|&v| v < 1e-24)));
        assert!(stats.fit.fitted().is_none());
    }

    #[test]
    fn uncoupled_overlap_matches_q() {
        let cfg = EnsembleConfig::new(Experiment::QnConc, vec![3, 5], 3, 0.0, 0.3, 5);
        let stats = run_ensemble(&cfg).unwrap();
        assert!((stats.q.unwrap() - 0.3f64.tanh().powi(2)).abs() < 1e-15);
        assert!(stats.per_n.iter().all(|s| s.mean < 1e-28));
    }

    #[test]
    fn reruns_are_bit_identical() {
        let cfg = EnsembleConfig::new(Experiment::MijMoment { p: 2.1 }, vec![4, 5, 6], 6, 0.5, 0.3, 99);
        let a = run_ensemble(&cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| run_ensemble(&cfg)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn stats_and_median() {
        let s = PerNStats::from_values(4, vec![1.0, 3.0, 2.0, 10.0]);
        assert_eq!(s.mean, 4.0);
        assert!((s.variance - 50.0 / 3.0).abs() < 1e-14);
        assert!((s.stderr - (50.0f64 / 12.0).sqrt()).abs() < 1e-14);
        assert_eq!(s.median(), 2.5);
    }

    #[test]
    fn failing_sample_reports_its_seed() {
        let err = collect_samples(7, 10, |idx| 100 + idx as u64, |seed| {
            if seed >= 104 {
                Err(Error::NonConvergence {
                    what: "probe",
                    iterations: 1,
                    defect: 1.0,
                })
            } else {
                Ok(seed as f64)
            }
        })
        .unwrap_err();
        assert_eq!(err.failing_seed(), Some(104));
        assert!(err.is_numerical());
        assert!(matches!(err, Error::SampleFailed { n: 7, sample: 4, .. }));
    }

    #[test]
    fn uncoupled_ito_is_zero() {
        let cfg = EnsembleConfig::new(Experiment::Ito, vec![3], 2, 0.0, 0.1, 3);
        let stats = run_ensemble(&cfg).unwrap();
        assert!(stats.per_n[0].values.iter().all(|&v| v == 0.0));
    }
}
