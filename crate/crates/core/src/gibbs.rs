//! Exact Gibbs averages by full enumeration of `{-1, 1}^N`.
//!
//! Every observable is computed with respect to a reduced measure
//! `⟨·⟩^{[A,B]}`: spins in `A` are clamped to given values, spins in `B` are
//! removed from the system, and the remaining active spins are summed over
//! with weight `exp(H^{[A,B]})`, where
//!
//! ```text
//! H^{[A,B]}(σ) = Σ_{i<j active} g_ij σ_i σ_j + Σ_{i active} (h_i + Σ_{k∈A} g_ik τ_k) σ_i.
//! ```
//!
//! Removed sites are masked rather than re-indexed, so site labels agree
//! between `⟨·⟩`, `⟨·⟩^{(i)}` and `⟨·⟩^{[i]}`.
//!
//! Enumeration walks the hypercube in Gray-code order, flipping one spin per
//! step and updating the energy and all local fields in `O(N)`. The state
//! space is cut into fixed-size blocks that are processed in parallel and
//! merged in block order, so results do not depend on the thread count.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CouplingMatrix, ModelParams};

/// Finite-difference step used for field and coupling derivatives.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// States per enumeration block (as a power of two).
const BLOCK_BITS: usize = 12;

/// Clamped set `A` with spin values `τ` and removed set `B`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReducedSpec {
    clamped: BTreeMap<usize, i8>,
    removed: BTreeSet<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SiteRole {
    Active,
    Clamped(i8),
    Removed,
}

impl ReducedSpec {
    /// The unconstrained Gibbs measure.
    pub fn full() -> Self {
        Self::default()
    }

    /// Cavity measure `⟨·⟩^{(i)}`.
    pub fn cavity(i: usize) -> Self {
        Self::full().removing(i)
    }

    /// Adds `σ_i = spin` to the clamped set.
    pub fn clamping(mut self, i: usize, spin: i8) -> Self {
        self.clamped.insert(i, spin);
        self
    }

    pub fn removing(mut self, i: usize) -> Self {
        self.removed.insert(i);
        self
    }

    pub fn clamped(&self) -> &BTreeMap<usize, i8> {
        &self.clamped
    }

    pub fn removed(&self) -> &BTreeSet<usize> {
        &self.removed
    }

    pub fn is_clamped(&self, i: usize) -> bool {
        self.clamped.contains_key(&i)
    }

    pub fn is_removed(&self, i: usize) -> bool {
        self.removed.contains(&i)
    }

    pub fn is_active(&self, i: usize) -> bool {
        !self.is_clamped(i) && !self.is_removed(i)
    }

    pub fn role(&self, i: usize) -> SiteRole {
        match self.clamped.get(&i) {
            Some(&s) => SiteRole::Clamped(s),
            None if self.removed.contains(&i) => SiteRole::Removed,
            None => SiteRole::Active,
        }
    }

    pub fn active_count(&self, n: usize) -> usize {
        (0..n).filter(|&i| self.is_active(i)).count()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        for (&i, &s) in &self.clamped {
            if i >= n {
                return Err(Error::InconsistentSpec(format!("clamped site {i} >= n = {n}")));
            }
            if s != 1 && s != -1 {
                return Err(Error::InconsistentSpec(format!(
                    "clamped spin at site {i} is {s}, expected ±1"
                )));
            }
        }
        for &i in &self.removed {
            if i >= n {
                return Err(Error::InconsistentSpec(format!("removed site {i} >= n = {n}")));
            }
            if self.clamped.contains_key(&i) {
                return Err(Error::InconsistentSpec(format!(
                    "site {i} is both clamped and removed"
                )));
            }
        }
        Ok(())
    }
}

/// Which two-point sums an enumeration pass accumulates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PairRequest {
    None,
    All,
    /// `⟨σ_a σ_r⟩` for every active `a` and each listed site `r`.
    Rows(Vec<usize>),
}

/// Moments requested from one enumeration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Request {
    pub pairs: PairRequest,
    /// Centered third moments; indices may repeat.
    pub triples: Vec<[usize; 3]>,
}

impl Request {
    pub fn magnetizations() -> Self {
        Request {
            pairs: PairRequest::None,
            triples: Vec::new(),
        }
    }

    pub fn all_pairs() -> Self {
        Request {
            pairs: PairRequest::All,
            triples: Vec::new(),
        }
    }

    pub fn pair_rows(rows: Vec<usize>) -> Self {
        Request {
            pairs: PairRequest::Rows(rows),
            triples: Vec::new(),
        }
    }

    pub fn with_triples(mut self, triples: Vec<[usize; 3]>) -> Self {
        self.triples = triples;
        self
    }
}

/// Exact Gibbs data for one reduced measure.
///
/// `m[i]` is `τ_i` at clamped sites and `0` at removed sites (see
/// [`GibbsTables::magnetization`]). `pair` is the dense `n × n` truncated
/// correlation matrix with the variance `1 - m_i²` on the diagonal; rows and
/// columns of inactive sites are zero, and entries that were not requested
/// are `NaN`.
#[derive(Clone, Debug, PartialEq)]
pub struct GibbsTables {
    pub n: usize,
    pub log_z: f64,
    pub m: Vec<f64>,
    pub pair: Vec<f64>,
    /// `Σ_{active} m_k² / n`.
    pub q_n: f64,
    pub roles: Vec<SiteRole>,
    pub triples: Vec<([usize; 3], f64)>,
}

impl GibbsTables {
    /// `m_i`, or `None` for a removed site.
    pub fn magnetization(&self, i: usize) -> Option<f64> {
        match self.roles[i] {
            SiteRole::Removed => None,
            _ => Some(self.m[i]),
        }
    }

    #[inline]
    pub fn pair(&self, i: usize, j: usize) -> f64 {
        self.pair[i * self.n + j]
    }

    pub fn active_count(&self) -> usize {
        self.roles.iter().filter(|r| **r == SiteRole::Active).count()
    }

    /// Overlap normalized by the number of active sites instead of `n`.
    pub fn q_active(&self) -> f64 {
        let k = self.active_count();
        if k == 0 {
            0.0
        } else {
            self.q_n * self.n as f64 / k as f64
        }
    }

    /// Centered third moment previously requested for `(i, j, k)` in any order.
    pub fn triple(&self, i: usize, j: usize, k: usize) -> Option<f64> {
        let mut key = [i, j, k];
        key.sort_unstable();
        self.triples.iter().find(|(t, _)| *t == key).map(|(_, v)| *v)
    }

    pub fn to_record(&self) -> GibbsRecord {
        let opt = |x: f64| if x.is_nan() { None } else { Some(x) };
        GibbsRecord {
            n: self.n,
            log_z: self.log_z,
            m: (0..self.n).map(|i| self.magnetization(i)).collect(),
            pair: (0..self.n)
                .map(|i| (0..self.n).map(|j| opt(self.pair(i, j))).collect())
                .collect(),
            q_n: self.q_n,
            roles: self.roles.clone(),
        }
    }

    /// `i,j,m_ij` rows for every computed entry with `i <= j`.
    pub fn pairs_csv(&self) -> String {
        let mut out = String::from("i,j,m_ij\n");
        for i in 0..self.n {
            for j in i..self.n {
                let v = self.pair(i, j);
                if !v.is_nan() {
                    out.push_str(&format!("{i},{j},{v:.16e}\n"));
                }
            }
        }
        out
    }
}

/// Serializable view of [`GibbsTables`]; absent values are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GibbsRecord {
    pub n: usize,
    pub log_z: f64,
    pub m: Vec<Option<f64>>,
    pub pair: Vec<Vec<Option<f64>>>,
    pub q_n: f64,
    pub roles: Vec<SiteRole>,
}

/// The active subsystem of a reduced measure, in local indices.
struct Subsystem {
    n: usize,
    active: Vec<usize>,
    local: Vec<Option<usize>>,
    field: Vec<f64>,
    coupling: Vec<f64>,
}

impl Subsystem {
    fn new(cm: &CouplingMatrix, params: &ModelParams, spec: &ReducedSpec) -> Result<Self> {
        params.validate()?;
        let n = params.n;
        if cm.n() != n {
            return Err(Error::InvalidParams(format!(
                "coupling matrix is {}x{} but n = {n}",
                cm.n(),
                cm.n()
            )));
        }
        spec.validate(n)?;
        let active: Vec<usize> = (0..n).filter(|&i| spec.is_active(i)).collect();
        if active.len() > params.enum_cap {
            return Err(Error::TooManySites {
                active: active.len(),
                cap: params.enum_cap,
            });
        }
        let mut local = vec![None; n];
        for (a, &i) in active.iter().enumerate() {
            local[i] = Some(a);
        }
        let field = active
            .iter()
            .map(|&i| {
                params.field[i]
                    + spec
                        .clamped()
                        .iter()
                        .map(|(&k, &tau)| cm.get(i, k) * tau as f64)
                        .sum::<f64>()
            })
            .collect();
        let na = active.len();
        let mut coupling = vec![0.0; na * na];
        for a in 0..na {
            for b in 0..na {
                if a != b {
                    coupling[a * na + b] = cm.get(active[a], active[b]);
                }
            }
        }
        Ok(Subsystem {
            n,
            active,
            local,
            field,
            coupling,
        })
    }

    fn len(&self) -> usize {
        self.active.len()
    }

    fn local_index(&self, i: usize) -> Result<usize> {
        self.local
            .get(i)
            .copied()
            .flatten()
            .ok_or_else(|| Error::InvalidIndex(format!("site {i} is not active")))
    }

    /// Spins, local fields and energy of Gray-code state `gray`.
    fn load_state(&self, gray: u64, sigma: &mut [f64], lf: &mut [f64]) -> f64 {
        let na = self.len();
        for (a, s) in sigma.iter_mut().enumerate() {
            *s = if gray >> a & 1 == 1 { -1.0 } else { 1.0 };
        }
        let mut energy = 0.0;
        for a in 0..na {
            let row = &self.coupling[a * na..(a + 1) * na];
            let inter: f64 = row.iter().zip(sigma.iter()).map(|(g, s)| g * s).sum();
            lf[a] = self.field[a] + inter;
            energy += sigma[a] * (self.field[a] + 0.5 * inter);
        }
        energy
    }

    /// Streams every state of block `block` through `visit(energy, sigma)`.
    fn walk_block(&self, block: u64, block_len: u64, mut visit: impl FnMut(f64, &[f64])) {
        let na = self.len();
        let mut sigma = vec![0.0; na];
        let mut lf = vec![0.0; na];
        let start = block * block_len;
        let mut energy = self.load_state(start ^ (start >> 1), &mut sigma, &mut lf);
        for x in start..start + block_len {
            visit(energy, &sigma);
            if x + 1 < start + block_len {
                let a = (x + 1).trailing_zeros() as usize;
                let s_old = sigma[a];
                energy -= 2.0 * s_old * lf[a];
                let row = &self.coupling[a * na..(a + 1) * na];
                let kick = -2.0 * s_old;
                for (l, g) in lf.iter_mut().zip(row) {
                    *l += kick * g;
                }
                sigma[a] = -s_old;
            }
        }
    }

    fn blocks(&self) -> (u64, u64) {
        let na = self.len();
        let bits = na.min(BLOCK_BITS);
        let block_len = 1u64 << bits;
        (1u64 << (na - bits), block_len)
    }
}

/// Weighted sums over a block, normalized by `exp(shift)`.
#[derive(Clone)]
struct Accum {
    shift: f64,
    z: f64,
    sums: Vec<f64>,
}

impl Accum {
    fn new(len: usize) -> Self {
        Accum {
            shift: f64::NEG_INFINITY,
            z: 0.0,
            sums: vec![0.0; len],
        }
    }

    /// Returns the weight of a state with the given energy, rescaling if it
    /// raises the running maximum.
    #[inline]
    fn weight(&mut self, energy: f64) -> f64 {
        if energy > self.shift {
            let scale = (self.shift - energy).exp();
            self.z *= scale;
            for s in &mut self.sums {
                *s *= scale;
            }
            self.shift = energy;
        }
        (energy - self.shift).exp()
    }

    fn merge(mut self, other: Accum) -> Accum {
        if other.shift == f64::NEG_INFINITY {
            return self;
        }
        if other.shift > self.shift {
            return other.merge(self);
        }
        let scale = (other.shift - self.shift).exp();
        self.z += other.z * scale;
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b * scale;
        }
        self
    }

    fn log_z(&self) -> f64 {
        self.shift + self.z.ln()
    }
}

/// Runs `kernel` over all blocks in parallel and merges in block order.
fn reduce_blocks<F>(sys: &Subsystem, len: usize, kernel: F) -> Accum
where
    F: Fn(&mut Accum, f64, &[f64]) + Sync,
{
    let (count, block_len) = sys.blocks();
    let parts: Vec<Accum> = (0..count)
        .into_par_iter()
        .map(|b| {
            let mut acc = Accum::new(len);
            sys.walk_block(b, block_len, |e, s| kernel(&mut acc, e, s));
            acc
        })
        .collect();
    merge_tree(parts)
}

/// Pairwise merge with a fixed tree shape.
fn merge_tree(mut parts: Vec<Accum>) -> Accum {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            next.push(match it.next() {
                Some(b) => a.merge(b),
                None => a,
            });
        }
        parts = next;
    }
    parts.pop().expect("at least one block")
}

fn enumerate(sys: &Subsystem, request: &Request) -> Result<GibbsTables> {
    let n = sys.n;
    let na = sys.len();

    let rows: Vec<usize> = match &request.pairs {
        PairRequest::None => Vec::new(),
        PairRequest::All => Vec::new(),
        PairRequest::Rows(r) => r
            .iter()
            .map(|&i| sys.local_index(i))
            .collect::<Result<Vec<_>>>()?,
    };
    let all_pairs = request.pairs == PairRequest::All;
    let pair_len = if all_pairs {
        na * na
    } else {
        rows.len() * na
    };

    let acc = reduce_blocks(sys, na + pair_len, |acc, energy, sigma| {
        let w = acc.weight(energy);
        acc.z += w;
        let (first, second) = acc.sums.split_at_mut(na);
        for (s, &x) in first.iter_mut().zip(sigma) {
            *s += w * x;
        }
        if all_pairs {
            for a in 0..na {
                let wa = w * sigma[a];
                let row = &mut second[a * na..(a + 1) * na];
                for b in a + 1..na {
                    row[b] += wa * sigma[b];
                }
            }
        } else {
            for (r_pos, &r) in rows.iter().enumerate() {
                let wr = w * sigma[r];
                let row = &mut second[r_pos * na..(r_pos + 1) * na];
                for (s, &x) in row.iter_mut().zip(sigma) {
                    *s += wr * x;
                }
            }
        }
    });

    let z = acc.z;
    let log_z = if na == 0 { 0.0 } else { acc.log_z() };
    let m_local: Vec<f64> = acc.sums[..na].iter().map(|s| s / z).collect();

    let roles: Vec<SiteRole> = (0..n)
        .map(|i| match sys.local[i] {
            Some(_) => SiteRole::Active,
            None => SiteRole::Removed,
        })
        .collect();

    let mut m = vec![0.0; n];
    for (a, &i) in sys.active.iter().enumerate() {
        m[i] = m_local[a];
    }

    let mut pair = vec![f64::NAN; n * n];
    for i in 0..n {
        for j in 0..n {
            if sys.local[i].is_none() || sys.local[j].is_none() {
                pair[i * n + j] = 0.0;
            }
        }
    }
    for (a, &i) in sys.active.iter().enumerate() {
        pair[i * n + i] = 1.0 - m_local[a] * m_local[a];
    }
    let second = &acc.sums[na..];
    if all_pairs {
        for a in 0..na {
            for b in a + 1..na {
                let v = second[a * na + b] / z - m_local[a] * m_local[b];
                let (i, j) = (sys.active[a], sys.active[b]);
                pair[i * n + j] = v;
                pair[j * n + i] = v;
            }
        }
    } else {
        for (r_pos, &r) in rows.iter().enumerate() {
            for b in 0..na {
                if b == r {
                    continue;
                }
                let v = second[r_pos * na + b] / z - m_local[r] * m_local[b];
                let (i, j) = (sys.active[r], sys.active[b]);
                pair[i * n + j] = v;
                pair[j * n + i] = v;
            }
        }
    }

    let q_n = m_local.iter().map(|x| x * x).sum::<f64>() / n as f64;

    let mut triples = Vec::with_capacity(request.triples.len());
    if !request.triples.is_empty() {
        let locals: Vec<[usize; 3]> = request
            .triples
            .iter()
            .map(|t| {
                Ok([
                    sys.local_index(t[0])?,
                    sys.local_index(t[1])?,
                    sys.local_index(t[2])?,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        let centered = centered_triples(sys, &m_local, &locals);
        for (t, v) in request.triples.iter().zip(centered) {
            let mut key = *t;
            key.sort_unstable();
            triples.push((key, v));
        }
    }

    Ok(GibbsTables {
        n,
        log_z,
        m,
        pair,
        q_n,
        roles,
        triples,
    })
}

/// Second pass: `⟨(σ_a - m_a)(σ_b - m_b)(σ_c - m_c)⟩` accumulated directly.
fn centered_triples(sys: &Subsystem, m: &[f64], triples: &[[usize; 3]]) -> Vec<f64> {
    let acc = reduce_blocks(sys, triples.len(), |acc, energy, sigma| {
        let w = acc.weight(energy);
        acc.z += w;
        for (s, &[a, b, c]) in acc.sums.iter_mut().zip(triples) {
            *s += w * (sigma[a] - m[a]) * (sigma[b] - m[b]) * (sigma[c] - m[c]);
        }
    });
    acc.sums.iter().map(|s| s / acc.z).collect()
}

/// Applies the clamped spins of `spec` to a full-system table: clamped sites
/// carry `m = τ` and zero variance.
fn finish_roles(mut tables: GibbsTables, spec: &ReducedSpec) -> GibbsTables {
    for (&i, &tau) in spec.clamped() {
        tables.roles[i] = SiteRole::Clamped(tau);
        tables.m[i] = tau as f64;
    }
    tables
}

/// Gibbs tables for `spec` with a custom moment request.
pub fn gibbs_tables_with(
    cm: &CouplingMatrix,
    params: &ModelParams,
    spec: &ReducedSpec,
    request: &Request,
) -> Result<GibbsTables> {
    let sys = Subsystem::new(cm, params, spec)?;
    Ok(finish_roles(enumerate(&sys, request)?, spec))
}

/// Magnetizations, full pair matrix and overlap of `⟨·⟩^{[A,B]}`.
pub fn gibbs_tables(
    cm: &CouplingMatrix,
    params: &ModelParams,
    spec: &ReducedSpec,
) -> Result<GibbsTables> {
    gibbs_tables_with(cm, params, spec, &Request::all_pairs())
}

/// `log Σ_σ exp(H^{[A,B]}(σ))` over the active sites.
pub fn log_partition(cm: &CouplingMatrix, params: &ModelParams, spec: &ReducedSpec) -> Result<f64> {
    let sys = Subsystem::new(cm, params, spec)?;
    if sys.len() == 0 {
        return Ok(0.0);
    }
    let acc = reduce_blocks(&sys, 0, |acc, energy, _| {
        let w = acc.weight(energy);
        acc.z += w;
    });
    Ok(acc.log_z())
}

/// Centered three-point function `m_ijk^{[A,B]}` for distinct active sites.
pub fn triple_correlation(
    cm: &CouplingMatrix,
    params: &ModelParams,
    spec: &ReducedSpec,
    i: usize,
    j: usize,
    k: usize,
) -> Result<f64> {
    if i == j || j == k || i == k {
        return Err(Error::InvalidIndex(format!(
            "triple ({i}, {j}, {k}) has repeated indices"
        )));
    }
    let tables = gibbs_tables_with(
        cm,
        params,
        spec,
        &Request::magnetizations().with_triples(vec![[i, j, k]]),
    )?;
    Ok(tables.triple(i, j, k).expect("requested triple"))
}

/// Scalar observable of a reduced measure, evaluated from its tables.
#[derive(Clone, Debug, PartialEq)]
pub enum Observable {
    Magnetization(usize),
    Pair(usize, usize),
    /// Centered third moment; indices may repeat.
    Triple(usize, usize, usize),
    Product(Box<Observable>, Box<Observable>),
}

impl Observable {
    pub fn product(a: Observable, b: Observable) -> Self {
        Observable::Product(Box::new(a), Box::new(b))
    }

    fn collect(&self, rows: &mut BTreeSet<usize>, triples: &mut Vec<[usize; 3]>) {
        match self {
            Observable::Magnetization(_) => {}
            Observable::Pair(i, j) => {
                if i != j {
                    rows.insert(*i);
                }
            }
            Observable::Triple(i, j, k) => triples.push([*i, *j, *k]),
            Observable::Product(a, b) => {
                a.collect(rows, triples);
                b.collect(rows, triples);
            }
        }
    }

    /// Smallest enumeration request that determines this observable.
    pub fn request(&self) -> Request {
        let mut rows = BTreeSet::new();
        let mut triples = Vec::new();
        self.collect(&mut rows, &mut triples);
        Request::pair_rows(rows.into_iter().collect()).with_triples(triples)
    }

    pub fn evaluate(&self, tables: &GibbsTables) -> Result<f64> {
        match self {
            Observable::Magnetization(i) => tables
                .magnetization(*i)
                .ok_or_else(|| Error::InvalidIndex(format!("site {i} is removed"))),
            Observable::Pair(i, j) => Ok(tables.pair(*i, *j)),
            Observable::Triple(i, j, k) => tables
                .triple(*i, *j, *k)
                .ok_or_else(|| Error::InvalidIndex(format!("triple ({i}, {j}, {k}) not computed"))),
            Observable::Product(a, b) => Ok(a.evaluate(tables)? * b.evaluate(tables)?),
        }
    }
}

/// The observable under `spec ∪ {σ_i = +1}` and `spec ∪ {σ_i = -1}`.
pub fn clamped_pair(
    cm: &CouplingMatrix,
    params: &ModelParams,
    spec: &ReducedSpec,
    i: usize,
    observable: &Observable,
) -> Result<(f64, f64)> {
    if i >= params.n {
        return Err(Error::InvalidIndex(format!("site {i} >= n = {}", params.n)));
    }
    if !spec.is_active(i) {
        return Err(Error::InvalidIndex(format!(
            "site {i} is already clamped or removed"
        )));
    }
    let request = observable.request();
    let plus = gibbs_tables_with(cm, params, &spec.clone().clamping(i, 1), &request)?;
    let minus = gibbs_tables_with(cm, params, &spec.clone().clamping(i, -1), &request)?;
    Ok((observable.evaluate(&plus)?, observable.evaluate(&minus)?))
}

/// `δ_i f = ½ Σ_{σ_i=±1} σ_i ⟨f⟩(σ_i)`.
pub fn delta_op(
    cm: &CouplingMatrix,
    params: &ModelParams,
    spec: &ReducedSpec,
    i: usize,
    observable: &Observable,
) -> Result<f64> {
    let (plus, minus) = clamped_pair(cm, params, spec, i, observable)?;
    Ok(0.5 * (plus - minus))
}

/// `ε_i f = ½ Σ_{σ_i=±1} ⟨f⟩(σ_i)`.
pub fn eps_op(
    cm: &CouplingMatrix,
    params: &ModelParams,
    spec: &ReducedSpec,
    i: usize,
    observable: &Observable,
) -> Result<f64> {
    let (plus, minus) = clamped_pair(cm, params, spec, i, observable)?;
    Ok(0.5 * (plus + minus))
}

fn check_free(spec: &ReducedSpec, n: usize, sites: &[usize]) -> Result<()> {
    for (pos, &s) in sites.iter().enumerate() {
        if s >= n {
            return Err(Error::InvalidIndex(format!("site {s} >= n = {n}")));
        }
        if !spec.is_active(s) {
            return Err(Error::InvalidIndex(format!("site {s} is clamped or removed")));
        }
        if sites[..pos].contains(&s) {
            return Err(Error::InvalidIndex(format!("site {s} repeated")));
        }
    }
    Ok(())
}

/// `m_ij^{[A]} - (1 - (m_i^{[A]})²) δ_i m_j^{[A∪{i}]}`.
pub fn key_identity_residual(
    cm: &CouplingMatrix,
    params: &ModelParams,
    spec: &ReducedSpec,
    i: usize,
    j: usize,
) -> Result<f64> {
    check_free(spec, params.n, &[i, j])?;
    let tables = gibbs_tables_with(cm, params, spec, &Request::pair_rows(vec![i]))?;
    let mi = tables.m[i];
    let d = delta_op(cm, params, spec, i, &Observable::Magnetization(j))?;
    Ok(tables.pair(i, j) - (1.0 - mi * mi) * d)
}

/// `m_ijk^{[A]} - (1 - m_i²) δ_i m_jk^{[A∪{i}]} + 2 m_i m_ik δ_i m_j^{[A∪{i}]}`.
pub fn key_identity_triple_residual(
    cm: &CouplingMatrix,
    params: &ModelParams,
    spec: &ReducedSpec,
    i: usize,
    j: usize,
    k: usize,
) -> Result<f64> {
    check_free(spec, params.n, &[i, j, k])?;
    let tables = gibbs_tables_with(
        cm,
        params,
        spec,
        &Request::pair_rows(vec![i]).with_triples(vec![[i, j, k]]),
    )?;
    let mi = tables.m[i];
    let mik = tables.pair(i, k);
    let mijk = tables.triple(i, j, k).expect("requested triple");
    let request = Request::pair_rows(vec![j]);
    let plus = gibbs_tables_with(cm, params, &spec.clone().clamping(i, 1), &request)?;
    let minus = gibbs_tables_with(cm, params, &spec.clone().clamping(i, -1), &request)?;
    let d_mjk = 0.5 * (plus.pair(j, k) - minus.pair(j, k));
    let d_mj = 0.5 * (plus.m[j] - minus.m[j]);
    Ok(mijk - (1.0 - mi * mi) * d_mjk + 2.0 * mi * mik * d_mj)
}

/// Central difference `∂m_i/∂h_j` of the full measure.
pub fn susceptibility_fd(
    cm: &CouplingMatrix,
    params: &ModelParams,
    i: usize,
    j: usize,
    step: f64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {step}")));
    }
    if i >= params.n || j >= params.n {
        return Err(Error::InvalidIndex(format!("sites ({i}, {j}) out of range")));
    }
    let full = ReducedSpec::full();
    let up = gibbs_tables_with(cm, &params.bump_field(j, step), &full, &Request::magnetizations())?;
    let down = gibbs_tables_with(cm, &params.bump_field(j, -step), &full, &Request::magnetizations())?;
    Ok((up.m[i] - down.m[i]) / (2.0 * step))
}

/// Central difference at `step` together with the Richardson-extrapolated
/// value from `step` and `2 step`.
pub fn susceptibility_richardson(
    cm: &CouplingMatrix,
    params: &ModelParams,
    i: usize,
    j: usize,
    step: f64,
) -> Result<(f64, f64)> {
    let fine = susceptibility_fd(cm, params, i, j, step)?;
    let coarse = susceptibility_fd(cm, params, i, j, 2.0 * step)?;
    Ok((fine, (4.0 * fine - coarse) / 3.0))
}

/// Central difference of `m_k` in the single coupling `g_il`, minus
/// `m_i m_kl + m_l m_ik + m_ilk` (diagonal convention when `k ∈ {i, l}`).
pub fn coupling_derivative_residual(
    cm: &CouplingMatrix,
    params: &ModelParams,
    i: usize,
    l: usize,
    k: usize,
) -> Result<f64> {
    let n = params.n;
    if i >= n || l >= n || k >= n {
        return Err(Error::InvalidIndex(format!("sites ({i}, {l}, {k}) out of range")));
    }
    if i == l {
        return Err(Error::InvalidIndex("coupling derivative needs i != l".into()));
    }
    let step = DEFAULT_FD_STEP;
    let full = ReducedSpec::full();
    let g = cm.get(i, l);
    let mut bumped = cm.clone();
    bumped.set(i, l, g + step);
    let up = gibbs_tables_with(&bumped, params, &full, &Request::magnetizations())?;
    bumped.set(i, l, g - step);
    let down = gibbs_tables_with(&bumped, params, &full, &Request::magnetizations())?;
    let fd = (up.m[k] - down.m[k]) / (2.0 * step);

    let tables = gibbs_tables_with(
        cm,
        params,
        &full,
        &Request::pair_rows(vec![i, l]).with_triples(vec![[i, l, k]]),
    )?;
    let rhs = tables.m[i] * tables.pair(k, l)
        + tables.m[l] * tables.pair(i, k)
        + tables.triple(i, l, k).expect("requested triple");
    Ok(fd - rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sample_couplings;

    fn two_spin(g: f64, h: f64) -> (CouplingMatrix, ModelParams) {
        let mut cm = CouplingMatrix::zeros(2);
        cm.set(0, 1, g);
        (cm, ModelParams::uniform(2, 0.5, h).unwrap())
    }

    #[test]
    fn single_spin_partition() {
        let cm = CouplingMatrix::zeros(1);
        let p = ModelParams::uniform(1, 0.0, 0.7).unwrap();
        let lz = log_partition(&cm, &p, &ReducedSpec::full()).unwrap();
        assert!((lz - (2.0 * 0.7f64.cosh()).ln()).abs() < 1e-14);
    }

    #[test]
    fn two_spin_partition_and_pair() {
        let (cm, p) = two_spin(0.4, 0.0);
        let lz = log_partition(&cm, &p, &ReducedSpec::full()).unwrap();
        assert!((lz - 1.46424785).abs() < 1e-8);
        assert!((lz - (4.0 * 0.4f64.cosh()).ln()).abs() < 1e-14);
        let tab = gibbs_tables(&cm, &p, &ReducedSpec::full()).unwrap();
        assert!(tab.m[0].abs() < 1e-15 && tab.m[1].abs() < 1e-15);
        assert!((tab.pair(0, 1) - 0.37994896).abs() < 1e-8);
        assert!((tab.pair(0, 1) - 0.4f64.tanh()).abs() < 1e-14);
    }

    #[test]
    fn clamped_partition_uses_reduced_hamiltonian() {
        let (cm, p) = two_spin(0.4, 0.2);
        let spec = ReducedSpec::full().clamping(0, 1);
        let lz = log_partition(&cm, &p, &spec).unwrap();
        assert!((lz - (2.0 * (0.6f64).cosh()).ln()).abs() < 1e-14);
        let tab = gibbs_tables(&cm, &p, &spec).unwrap();
        assert_eq!(tab.roles[0], SiteRole::Clamped(1));
        assert_eq!(tab.m[0], 1.0);
        assert!((tab.m[1] - 0.6f64.tanh()).abs() < 1e-14);
    }

    #[test]
    fn product_measure_at_zero_coupling() {
        let p = ModelParams::uniform(7, 0.0, 0.3).unwrap();
        let cm = sample_couplings(&p, 4).unwrap();
        let tab = gibbs_tables(&cm, &p, &ReducedSpec::full()).unwrap();
        for i in 0..7 {
            assert!((tab.m[i] - 0.29131261).abs() < 1e-8);
            assert!((tab.m[i] - 0.3f64.tanh()).abs() < 1e-12);
            for j in 0..7 {
                if i != j {
                    assert!(tab.pair(i, j).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn removed_sites_are_masked() {
        let p = ModelParams::uniform(5, 0.5, 0.3).unwrap();
        let cm = sample_couplings(&p, 8).unwrap();
        let tab = gibbs_tables(&cm, &p, &ReducedSpec::cavity(2)).unwrap();
        assert_eq!(tab.magnetization(2), None);
        assert_eq!(tab.pair(2, 2), 0.0);
        assert_eq!(tab.active_count(), 4);
        assert!((tab.q_active() * 4.0 - tab.q_n * 5.0).abs() < 1e-15);
        let json = serde_json::to_string(&tab.to_record()).unwrap();
        assert!(json.contains("null"));
    }

    #[test]
    fn rejects_bad_specs() {
        let p = ModelParams::uniform(4, 0.5, 0.3).unwrap();
        let cm = sample_couplings(&p, 8).unwrap();
        let both = ReducedSpec::full().clamping(1, 1).removing(1);
        assert!(matches!(
            log_partition(&cm, &p, &both),
            Err(Error::InconsistentSpec(_))
        ));
        let bad_spin = ReducedSpec::full().clamping(1, 0);
        assert!(log_partition(&cm, &p, &bad_spin).is_err());
        let out_of_range = ReducedSpec::cavity(9);
        assert!(log_partition(&cm, &p, &out_of_range).is_err());
        let capped = p.clone().with_enum_cap(3).unwrap();
        assert!(matches!(
            log_partition(&cm, &capped, &ReducedSpec::full()),
            Err(Error::TooManySites { active: 4, cap: 3 })
        ));
        assert!(log_partition(&cm, &capped, &ReducedSpec::cavity(0)).is_ok());
    }

    #[test]
    fn triple_vanishes_at_zero_field_and_zero_coupling() {
        let p = ModelParams::uniform(6, 0.5, 0.0).unwrap();
        let cm = sample_couplings(&p, 3).unwrap();
        let v = triple_correlation(&cm, &p, &ReducedSpec::full(), 0, 2, 5).unwrap();
        assert!(v.abs() < 1e-14);
        let p0 = ModelParams::uniform(6, 0.0, 0.4).unwrap();
        let cm0 = sample_couplings(&p0, 3).unwrap();
        let v0 = triple_correlation(&cm0, &p0, &ReducedSpec::full(), 1, 3, 4).unwrap();
        assert!(v0.abs() < 1e-14);
        assert!(triple_correlation(&cm, &p, &ReducedSpec::full(), 1, 1, 4).is_err());
        assert!(triple_correlation(&cm, &p, &ReducedSpec::cavity(4), 1, 2, 4).is_err());
    }

    #[test]
    fn delta_of_clamped_magnetization() {
        let (cm, p) = two_spin(0.4, 0.0);
        let d = delta_op(&cm, &p, &ReducedSpec::full(), 0, &Observable::Magnetization(1)).unwrap();
        assert!((d - 0.37994896).abs() < 1e-8);
        let e = eps_op(&cm, &p, &ReducedSpec::full(), 0, &Observable::Magnetization(1)).unwrap();
        assert!(e.abs() < 1e-15);
        let spec = ReducedSpec::full().clamping(0, 1);
        assert!(delta_op(&cm, &p, &spec, 0, &Observable::Magnetization(1)).is_err());
    }

    #[test]
    fn key_identity_two_spin() {
        let (cm, p) = two_spin(0.4, 0.0);
        let r = key_identity_residual(&cm, &p, &ReducedSpec::full(), 0, 1).unwrap();
        assert!(r.abs() < 1e-15);
    }

    #[test]
    fn susceptibility_at_zero_coupling() {
        let p = ModelParams::uniform(4, 0.0, 0.0).unwrap();
        let cm = CouplingMatrix::zeros(4);
        let off = susceptibility_fd(&cm, &p, 0, 1, DEFAULT_FD_STEP).unwrap();
        assert!(off.abs() < 1e-12);
        let diag = susceptibility_fd(&cm, &p, 2, 2, DEFAULT_FD_STEP).unwrap();
        assert!((diag - 1.0).abs() < 1e-9);
        assert!(susceptibility_fd(&cm, &p, 0, 1, 0.0).is_err());
        assert!(susceptibility_fd(&cm, &p, 0, 1, -1e-5).is_err());
        let (fine, rich) = susceptibility_richardson(&cm, &p, 2, 2, DEFAULT_FD_STEP).unwrap();
        assert!((fine - rich).abs() < 1e-9);
    }

    #[test]
    fn coupling_derivative_two_spin() {
        let (cm, p) = two_spin(0.4, 0.0);
        let r = coupling_derivative_residual(&cm, &p, 0, 1, 1).unwrap();
        assert!(r.abs() < 1e-8);
        let z = CouplingMatrix::zeros(5);
        let p0 = ModelParams::uniform(5, 0.0, 0.0).unwrap();
        let r0 = coupling_derivative_residual(&z, &p0, 0, 1, 3).unwrap();
        // roundoff in the sums divided by the step
        assert!(r0.abs() < 1e-10);
        assert!(coupling_derivative_residual(&z, &p0, 2, 2, 3).is_err());
    }

    #[test]
    fn results_are_independent_of_block_partition() {
        // n above BLOCK_BITS so several blocks are merged.
        let p = ModelParams::uniform(14, 0.5, 0.2).unwrap();
        let cm = sample_couplings(&p, 12).unwrap();
        let a = gibbs_tables_with(&cm, &p, &ReducedSpec::full(), &Request::magnetizations()).unwrap();
        let b = gibbs_tables_with(&cm, &p, &ReducedSpec::full(), &Request::magnetizations()).unwrap();
        assert_eq!(a.m, b.m);
        assert_eq!(a.log_z.to_bits(), b.log_z.to_bits());
        let bits = |t: &GibbsTables| t.pair.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let c = pool
            .install(|| gibbs_tables_with(&cm, &p, &ReducedSpec::full(), &Request::magnetizations()))
            .unwrap();
        assert_eq!(a.m, c.m);
        assert_eq!(a.log_z.to_bits(), c.log_z.to_bits());
    }

    #[test]
    fn large_energies_do_not_overflow() {
        let mut cm = CouplingMatrix::zeros(3);
        cm.set(0, 1, 300.0);
        cm.set(1, 2, 300.0);
        let p = ModelParams::uniform(3, 1.0, 50.0).unwrap();
        let lz = log_partition(&cm, &p, &ReducedSpec::full()).unwrap();
        // dominated by the all-up state with energy 750
        assert!((lz - 750.0).abs() < 1e-9);
        let tab = gibbs_tables(&cm, &p, &ReducedSpec::full()).unwrap();
        assert!(tab.m.iter().all(|x| (x - 1.0).abs() < 1e-12));
    }
}
