use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use sk_tap::dynamics::{ito_decomposition_trace, ItoCheckConfig, ItoTarget};
use sk_tap::ensemble::{run_ensemble, EnsembleConfig, EnsembleStats, Experiment, FitOutcome};
use sk_tap::gibbs::{
    coupling_derivative_residual, gibbs_tables, key_identity_residual, key_identity_triple_residual,
    susceptibility_fd, ReducedSpec, DEFAULT_FD_STEP,
};
use sk_tap::model::{sample_couplings, sample_path, substream_seed, CouplingPath, ModelParams};
use sk_tap::quadrature::{QuadratureRule, DEFAULT_NODES};
use sk_tap::spectral::{s_prime_at_e0, SpectralSample};
use sk_tap::tap::{
    at_value, f_map, htap1_residuals, htap2_report, iterate_q, node_doubling, solve_q_with, tap1_residuals,
    tap2_report, ResidualReport, SolverOptions,
};

use crate::report::{Cell, Report};
use crate::{Failure, OutputArgs};

type Outcome = Result<Report, Failure>;

#[derive(Clone, Debug, Args, Serialize)]
pub struct FixedPointArgs {
    #[arg(long, default_value_t = 0.5)]
    pub t: f64,
    #[arg(long, default_value_t = 0.3)]
    pub h: f64,
    /// Gauss–Hermite nodes.
    #[arg(long, default_value_t = DEFAULT_NODES)]
    pub quad_nodes: usize,
    /// Fixed-point tolerance on |q - f(q)|.
    #[arg(long, default_value_t = 1e-12)]
    pub tol: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct AtLineArgs {
    #[arg(long, default_value_t = 0.0)]
    pub h: f64,
    #[arg(long, default_value_t = 0.5)]
    pub t_min: f64,
    #[arg(long, default_value_t = 1.5)]
    pub t_max: f64,
    /// Number of grid points including both ends.
    #[arg(long, default_value_t = 11)]
    pub grid: usize,
    #[arg(long, default_value_t = DEFAULT_NODES)]
    pub quad_nodes: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct InstanceArgs {
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 0.5)]
    pub t: f64,
    #[arg(long, default_value_t = 0.3)]
    pub h: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct IdentityArgs {
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 0.5)]
    pub t: f64,
    #[arg(long, default_value_t = 0.3)]
    pub h: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Random (A, i, j, k) draws.
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct EnsembleArgs {
    /// System sizes, comma separated and increasing.
    #[arg(long, value_delimiter = ',', default_value = "8,12,16")]
    pub n: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.5)]
    pub t: f64,
    #[arg(long, default_value_t = 0.3)]
    pub h: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_NODES)]
    pub quad_nodes: usize,
    /// Moment exponent for the two-point moment experiment.
    #[arg(long)]
    pub p: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct ScalingArgs {
    /// htap1, htap2, tap1, tap2, qn_conc, mij_sq, mij_moment[:p], ito or spectral.
    #[arg(long)]
    pub experiment: String,
    /// Grid intervals of the ito experiment.
    #[arg(long, default_value_t = 64)]
    pub steps: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub ensemble: EnsembleArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetArg {
    /// δ_i m_j with i clamped.
    Delta,
    /// m_jk with i clamped at --spin.
    Pair,
    /// m_k m_jk with i clamped at --spin.
    Product,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct DynamicsArgs {
    #[arg(long, default_value_t = 6)]
    pub n: usize,
    #[arg(long, default_value_t = 0.5)]
    pub t: f64,
    #[arg(long, default_value_t = 0.3)]
    pub h: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Grid intervals of the coupling path.
    #[arg(long, default_value_t = 64)]
    pub steps: usize,
    /// Clamped site.
    #[arg(long, default_value_t = 0)]
    pub i: usize,
    /// Target site.
    #[arg(long, default_value_t = 1)]
    pub j: usize,
    #[arg(long, value_enum, default_value = "delta")]
    pub target: TargetArg,
    /// Second target site for pair and product.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 1, allow_negative_numbers = true)]
    pub spin: i8,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

fn echo(args: &impl Serialize) -> Value {
    let mut v = serde_json::to_value(args).expect("arguments serialize");
    v["version"] = json!(env!("CARGO_PKG_VERSION"));
    v
}

fn lib(seed: Option<u64>) -> impl Fn(sk_tap::Error) -> Failure {
    move |e| Failure::from_error(e, seed)
}

fn rule(nodes: usize) -> Result<QuadratureRule, Failure> {
    QuadratureRule::gauss_hermite(nodes).map_err(lib(None))
}

/// `solve_q` below `t = 1`, the iterated branch at and above it.
fn overlap_at(t: f64, h: f64, rule: &QuadratureRule, opts: &SolverOptions) -> sk_tap::Result<f64> {
    if t < 1.0 {
        solve_q_with(t, h, rule, opts)
    } else {
        iterate_q(t, h, rule, opts)
    }
}

pub fn fixed_point(a: &FixedPointArgs) -> Outcome {
    if !(a.tol > 0.0) {
        return Err(Failure::usage("--tol must be positive"));
    }
    let opts = SolverOptions {
        tol: a.tol,
        ..SolverOptions::default()
    };
    let r = rule(a.quad_nodes)?;
    let q = overlap_at(a.t, a.h, &r, &opts).map_err(lib(None))?;
    let defect = (q - f_map(q, a.t, a.h, &r).map_err(lib(None))?).abs();
    let (_, delta) = node_doubling(a.quad_nodes, |rr| overlap_at(a.t, a.h, rr, &opts)).map_err(lib(None))?;
    let at = at_value(a.t, a.h, q, &r).map_err(lib(None))?;
    let mut rep = Report::new(
        "fixed-point",
        echo(a),
        vec!["t", "h", "q", "defect", "node_doubling_delta", "at_value"],
    );
    rep.summary("q", q);
    rep.summary("defect", defect);
    rep.summary("node_doubling_delta", delta);
    rep.summary("at_value", at);
    rep.summary("branch", if a.t < 1.0 { "unique" } else { "iterated" });
    rep.row(vec![a.t.into(), a.h.into(), q.into(), defect.into(), delta.into(), at.into()]);
    Ok(rep)
}

pub fn at_line(a: &AtLineArgs) -> Outcome {
    if a.grid < 2 {
        return Err(Failure::usage("--grid needs at least 2 points"));
    }
    if !(a.t_min >= 0.0 && a.t_max > a.t_min && a.t_max.is_finite()) {
        return Err(Failure::usage("need 0 <= --t-min < --t-max"));
    }
    let r = rule(a.quad_nodes)?;
    let opts = SolverOptions::default();
    let mut rep = Report::new("at-line", echo(a), vec!["t", "q", "at_value", "stable"]);
    let mut points = Vec::with_capacity(a.grid);
    for k in 0..a.grid {
        let t = if k + 1 == a.grid {
            a.t_max
        } else {
            a.t_min + k as f64 * (a.t_max - a.t_min) / (a.grid - 1) as f64
        };
        let q = iterate_q(t, a.h, &r, &opts).map_err(lib(None))?;
        let at = at_value(t, a.h, q, &r).map_err(lib(None))?;
        points.push((t, at));
        rep.row(vec![t.into(), q.into(), at.into(), Cell::Int(u64::from(at < 1.0))]);
    }
    // first grid point with E t sech⁴ ≥ 1, linearly interpolated from its left neighbour
    let crossing = points.iter().position(|&(_, v)| v >= 1.0).map(|k| {
        let (t1, v1) = points[k];
        if k == 0 || v1 == 1.0 {
            t1
        } else {
            let (t0, v0) = points[k - 1];
            t0 + (1.0 - v0) * (t1 - t0) / (v1 - v0)
        }
    });
    rep.summary("crossing_t", crossing);
    Ok(rep)
}

fn params(n: usize, t: f64, h: f64) -> Result<ModelParams, Failure> {
    ModelParams::uniform(n, t, h).map_err(lib(None))
}

pub fn verify_identities(a: &IdentityArgs) -> Outcome {
    if a.n < 3 {
        return Err(Failure::usage("verify-identities needs --n >= 3"));
    }
    let seed = Some(a.seed);
    let p = params(a.n, a.t, a.h)?;
    let cm = sample_couplings(&p, a.seed).map_err(lib(seed))?;
    let mut rep = Report::new(
        "verify-identities",
        echo(a),
        vec!["draw", "i", "j", "k", "clamped", "pair_residual", "triple_residual", "coupling_residual"],
    );
    let mut counter = 0u64;
    let mut next = |bound: usize| {
        counter += 1;
        (substream_seed(a.seed ^ 0x5EED, counter) % bound as u64) as usize
    };
    let (mut max_pair, mut max_triple, mut max_coupling) = (0.0f64, 0.0f64, 0.0f64);
    for draw in 0..a.samples {
        let mut sites = Vec::new();
        while sites.len() < 3 {
            let s = next(a.n);
            if !sites.contains(&s) {
                sites.push(s);
            }
        }
        let (i, j, k) = (sites[0], sites[1], sites[2]);
        let mut spec = ReducedSpec::full();
        let mut clamped = Vec::new();
        for _ in 0..next(3.min(a.n - 2)) {
            let s = next(a.n);
            if !sites.contains(&s) && spec.is_active(s) {
                let spin = if next(2) == 0 { 1 } else { -1 };
                spec = spec.clamping(s, spin);
                clamped.push(format!("{s}{}", if spin > 0 { '+' } else { '-' }));
            }
        }
        let r2 = key_identity_residual(&cm, &p, &spec, i, j).map_err(lib(seed))?;
        let r3 = key_identity_triple_residual(&cm, &p, &spec, i, j, k).map_err(lib(seed))?;
        let rc = coupling_derivative_residual(&cm, &p, i, j, k).map_err(lib(seed))?;
        max_pair = max_pair.max(r2.abs());
        max_triple = max_triple.max(r3.abs());
        max_coupling = max_coupling.max(rc.abs());
        rep.row(vec![
            draw.into(),
            i.into(),
            j.into(),
            k.into(),
            clamped.join(" ").into(),
            r2.into(),
            r3.into(),
            rc.into(),
        ]);
    }
    let tab = gibbs_tables(&cm, &p, &ReducedSpec::full()).map_err(lib(seed))?;
    let mut max_chi = 0.0f64;
    for i in 0..a.n {
        for j in 0..a.n {
            let fd = susceptibility_fd(&cm, &p, i, j, DEFAULT_FD_STEP).map_err(lib(seed))?;
            max_chi = max_chi.max((fd - tab.pair(i, j)).abs());
        }
    }
    rep.summary("max_pair_identity_residual", max_pair);
    rep.summary("max_triple_identity_residual", max_triple);
    rep.summary("max_coupling_derivative_residual", max_coupling);
    rep.summary("max_susceptibility_deviation", max_chi);
    Ok(rep)
}

pub fn tap_residuals(a: &InstanceArgs) -> Outcome {
    let seed = Some(a.seed);
    let p = params(a.n, a.t, a.h)?;
    let cm = sample_couplings(&p, a.seed).map_err(lib(seed))?;
    let reports: Vec<ResidualReport> = vec![
        htap1_residuals(&cm, &p).map_err(lib(seed))?,
        htap2_report(&cm, &p).map_err(lib(seed))?,
        tap1_residuals(&cm, &p).map_err(lib(seed))?,
        tap2_report(&cm, &p).map_err(lib(seed))?,
    ];
    let mut rep = Report::new("tap-residuals", echo(a), vec!["kind", "i", "j", "residual"]);
    for r in &reports {
        let label = r.kind.label();
        rep.summary(format!("{label}_mean_square"), r.mean_square);
        rep.summary(format!("{label}_max_abs"), r.max_abs());
        for e in &r.entries {
            rep.row(vec![label.into(), e.i.into(), e.j.into(), e.residual.into()]);
        }
    }
    Ok(rep)
}

fn ensemble_config(a: &EnsembleArgs, experiment: Experiment, steps: usize) -> Result<EnsembleConfig, Failure> {
    let mut cfg = EnsembleConfig::new(experiment, a.n.clone(), a.samples, a.t, a.h, a.seed);
    cfg.quad_nodes = a.quad_nodes;
    cfg.steps = steps;
    cfg.validate().map_err(lib(None))?;
    Ok(cfg)
}

fn ensemble_report(name: &'static str, config: Value, cfg: &EnsembleConfig) -> Outcome {
    let stats: EnsembleStats = run_ensemble(cfg).map_err(lib(None))?;
    let mut rep = Report::new(name, config, vec!["n", "samples", "mean", "variance", "stderr", "median"]);
    rep.summary("experiment", cfg.experiment.label());
    match &stats.fit {
        FitOutcome::Fitted(fit) => {
            rep.summary("fit", "fitted");
            rep.summary("slope", fit.slope);
            rep.summary("slope_stderr", fit.slope_stderr);
            rep.summary("intercept", fit.intercept);
        }
        FitOutcome::Degenerate { reason } => {
            rep.summary("fit", format!("degenerate: {reason}"));
        }
    }
    if let Some(q) = stats.q {
        rep.summary("q", q);
    }
    if let Some(pred) = stats.prediction {
        rep.summary("prediction", pred);
        for s in &stats.per_n {
            rep.summary(format!("relative_deviation_n{}", s.n), (s.mean - pred) / pred);
        }
    }
    for s in &stats.per_n {
        rep.row(vec![
            s.n.into(),
            s.samples.into(),
            s.mean.into(),
            s.variance.into(),
            s.stderr.into(),
            s.median().into(),
        ]);
    }
    Ok(rep)
}

pub fn scaling(a: &ScalingArgs) -> Outcome {
    let mut label = a.experiment.clone();
    if let Some(p) = a.ensemble.p {
        if !label.contains(':') {
            label = format!("{label}:{p}");
        }
    }
    let experiment: Experiment = label.parse().map_err(lib(None))?;
    let cfg = ensemble_config(&a.ensemble, experiment, a.steps)?;
    ensemble_report("scaling", echo(a), &cfg)
}

pub fn overlap(a: &EnsembleArgs) -> Outcome {
    let cfg = ensemble_config(a, Experiment::QnConc, 64)?;
    ensemble_report("overlap", echo(a), &cfg)
}

pub fn mij_variance(a: &EnsembleArgs) -> Outcome {
    let experiment = match a.p {
        Some(p) => Experiment::MijMoment { p },
        None => Experiment::MijSq,
    };
    let cfg = ensemble_config(a, experiment, 64)?;
    ensemble_report("mij-variance", echo(a), &cfg)
}

pub fn dynamics(a: &DynamicsArgs) -> Outcome {
    let seed = Some(a.seed);
    let p = params(a.n, a.t, a.h)?;
    let target = match (a.target, a.k) {
        (TargetArg::Delta, None) => ItoTarget::DeltaMagnetization,
        (TargetArg::Pair, Some(k)) => ItoTarget::ClampedPair { k },
        (TargetArg::Product, Some(k)) => ItoTarget::ClampedProduct { k },
        (TargetArg::Delta, Some(_)) => return Err(Failure::usage("--k applies to pair and product targets")),
        (_, None) => return Err(Failure::usage("pair and product targets need --k")),
    };
    let cfg = ItoCheckConfig::new(a.i, a.j, a.steps).with_target(target).with_spin(a.spin);
    cfg.validate(a.n).map_err(lib(seed))?;
    let path = if a.t > 0.0 {
        sample_path(&p, a.steps, a.seed).map_err(lib(seed))?
    } else {
        CouplingPath::degenerate(a.n)
    };
    let trace = ito_decomposition_trace(&path, &cfg, &p).map_err(lib(seed))?;
    let mut rep = Report::new("dynamics", echo(a), vec!["step", "s", "lhs", "martingale", "drift"]);
    rep.summary("residual", trace.residual);
    rep.summary("lhs", trace.lhs);
    rep.summary("martingale", trace.martingale);
    rep.summary("drift", trace.drift);
    for r in &trace.rows {
        rep.row(vec![r.step.into(), r.s.into(), r.lhs.into(), r.martingale.into(), r.drift.into()]);
    }
    Ok(rep)
}

struct SpectralRow {
    sample: SpectralSample,
    s_prime: (f64, f64),
}

pub fn spectral(a: &EnsembleArgs) -> Outcome {
    let cfg = ensemble_config(a, Experiment::Spectral, 64)?;
    let mut rep = Report::new(
        "spectral",
        echo(a),
        vec!["n", "sample", "seed", "resolvent_error", "margin", "s_prime_fd", "s_prime_closed"],
    );
    for &n in &cfg.n_values {
        let p = params(n, a.t, a.h)?;
        let rows: Vec<Result<SpectralRow, Failure>> = (0..cfg.samples)
            .into_par_iter()
            .map(|idx| {
                let seed = cfg.sample_seed(n, idx);
                let cm = sample_couplings(&p, seed).map_err(lib(Some(seed)))?;
                Ok(SpectralRow {
                    sample: SpectralSample::measure(&cm, &p, seed).map_err(lib(Some(seed)))?,
                    s_prime: s_prime_at_e0(&cm, &p).map_err(lib(Some(seed)))?,
                })
            })
            .collect();
        let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
        let mut errors: Vec<f64> = rows.iter().map(|r| r.sample.resolvent_error).collect();
        errors.sort_by(f64::total_cmp);
        let k = errors.len();
        let median = if k % 2 == 1 {
            errors[k / 2]
        } else {
            0.5 * (errors[k / 2 - 1] + errors[k / 2])
        };
        let below = rows.iter().filter(|r| r.sample.margin > 0.0).count();
        rep.summary(format!("median_resolvent_error_n{n}"), median);
        rep.summary(format!("margin_positive_fraction_n{n}"), below as f64 / k as f64);
        for (idx, r) in rows.iter().enumerate() {
            rep.row(vec![
                n.into(),
                idx.into(),
                r.sample.seed.into(),
                r.sample.resolvent_error.into(),
                r.sample.margin.into(),
                r.s_prime.0.into(),
                r.s_prime.1.into(),
            ]);
        }
    }
    Ok(rep)
}
