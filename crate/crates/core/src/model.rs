//! Model parameters and Gaussian disorder.
//!
//! The Hamiltonian is `H(σ) = Σ_{i<j} g_ij σ_i σ_j + Σ_i h_i σ_i` with
//! `g_ij ~ N(0, t/n)` i.i.d. above the diagonal, `g_ii = 0`. The disorder is
//! available either as a static [`CouplingMatrix`] or as a [`CouplingPath`], a
//! Brownian motion in the interaction time `s ∈ [0, t]` running at speed `1/n`
//! whose value at `s = t` has the law of the static matrix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest system handled by exact enumeration unless overridden.
pub const DEFAULT_ENUM_CAP: usize = 24;

/// SplitMix64 output finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of substream `index` under `master`.
///
/// `splitmix64(master + (index + 1) * 0x9E3779B97F4A7C15)`. The mapping is fixed:
/// changing it changes every published ensemble number.
pub fn substream_seed(master: u64, index: u64) -> u64 {
    splitmix64(master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub n: usize,
    pub t: f64,
    /// Per-site external field `h_i`.
    pub field: Vec<f64>,
    pub enum_cap: usize,
}

impl ModelParams {
    /// Uniform field `h` on every site.
    pub fn uniform(n: usize, t: f64, h: f64) -> Result<Self> {
        Self::with_field(n, t, vec![h; n])
    }

    pub fn with_field(n: usize, t: f64, field: Vec<f64>) -> Result<Self> {
        let params = ModelParams {
            n,
            t,
            field,
            enum_cap: DEFAULT_ENUM_CAP,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn with_enum_cap(mut self, cap: usize) -> Result<Self> {
        self.enum_cap = cap;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidParams("n must be at least 1".into()));
        }
        if !(self.t >= 0.0) || !self.t.is_finite() {
            return Err(Error::InvalidParams(format!(
                "t must be a finite nonnegative number, got {}",
                self.t
            )));
        }
        if self.field.len() != self.n {
            return Err(Error::InvalidParams(format!(
                "field has length {} but n = {}",
                self.field.len(),
                self.n
            )));
        }
        if self.field.iter().any(|h| !h.is_finite()) {
            return Err(Error::InvalidParams("field entries must be finite".into()));
        }
        if self.enum_cap == 0 {
            return Err(Error::InvalidParams("enum_cap must be positive".into()));
        }
        Ok(())
    }

    /// Same system with the field on site `j` shifted by `delta`.
    pub fn bump_field(&self, j: usize, delta: f64) -> Self {
        let mut out = self.clone();
        out.field[j] += delta;
        out
    }
}

/// Index of the pair `(i, j)`, `i < j`, in row-major upper-triangle order.
pub fn pair_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Symmetric coupling matrix with zero diagonal, stored dense row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl CouplingMatrix {
    pub fn zeros(n: usize) -> Self {
        CouplingMatrix {
            n,
            entries: vec![0.0; n * n],
        }
    }

    /// Builds the matrix from its row-major strict upper triangle.
    pub fn from_upper(n: usize, upper: &[f64]) -> Result<Self> {
        if upper.len() != pair_count(n) {
            return Err(Error::InvalidParams(format!(
                "upper triangle of a {n}x{n} matrix has {} entries, got {}",
                pair_count(n),
                upper.len()
            )));
        }
        let mut cm = CouplingMatrix::zeros(n);
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                cm.set(i, j, upper[k]);
                k += 1;
            }
        }
        Ok(cm)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    /// Sets `g_ij = g_ji = value`. Diagonal writes are rejected by debug assertion.
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        debug_assert!(i != j, "diagonal couplings are fixed at zero");
        self.entries[i * self.n + j] = value;
        self.entries[j * self.n + i] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }

    pub fn upper_triangle(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(pair_count(self.n));
        for i in 0..self.n {
            for j in i + 1..self.n {
                out.push(self.get(i, j));
            }
        }
        out
    }

    pub fn is_symmetric_zero_diagonal(&self) -> bool {
        (0..self.n).all(|i| {
            self.get(i, i) == 0.0
                && (i + 1..self.n).all(|j| self.get(i, j).to_bits() == self.get(j, i).to_bits())
        })
    }

    pub fn to_record(&self, t: f64, seed: Option<u64>) -> CouplingRecord {
        CouplingRecord {
            n: self.n,
            t,
            seed,
            upper: self.upper_triangle(),
        }
    }
}

/// JSON form of a coupling matrix: row-major strict upper triangle plus provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingRecord {
    pub n: usize,
    pub t: f64,
    pub seed: Option<u64>,
    pub upper: Vec<f64>,
}

impl CouplingRecord {
    pub fn to_matrix(&self) -> Result<CouplingMatrix> {
        CouplingMatrix::from_upper(self.n, &self.upper)
    }
}

/// Static disorder `g_ij ~ N(0, t/n)`, deterministic in `(params, seed)`.
pub fn sample_couplings(params: &ModelParams, seed: u64) -> Result<CouplingMatrix> {
    params.validate()?;
    let n = params.n;
    let scale = (params.t / n as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cm = CouplingMatrix::zeros(n);
    for i in 0..n {
        for j in i + 1..n {
            let z: f64 = rng.sample(StandardNormal);
            cm.set(i, j, scale * z);
        }
    }
    Ok(cm)
}

/// Discretized Brownian coupling path on a grid `0 = s_0 < … < s_K`.
///
/// Increments are stored step-major, each step holding one value per pair in
/// row-major upper-triangle order.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingPath {
    n: usize,
    grid: Vec<f64>,
    increments: Vec<f64>,
}

impl CouplingPath {
    /// A path consisting of the single grid point `s = 0`.
    pub fn degenerate(n: usize) -> Self {
        CouplingPath {
            n,
            grid: vec![0.0],
            increments: Vec::new(),
        }
    }

    /// Assembles a path from an explicit grid and increments.
    pub fn from_parts(n: usize, grid: Vec<f64>, increments: Vec<f64>) -> Result<Self> {
        if grid.first() != Some(&0.0) {
            return Err(Error::InvalidParams("path grid must start at 0".into()));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParams("path grid must be strictly increasing".into()));
        }
        if increments.len() != (grid.len() - 1) * pair_count(n) {
            return Err(Error::InvalidParams("increment count does not match grid".into()));
        }
        Ok(CouplingPath {
            n,
            grid,
            increments,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn t_end(&self) -> f64 {
        *self.grid.last().expect("grid is never empty")
    }

    /// Pair increments over `[s_k, s_{k+1}]`.
    pub fn increment(&self, k: usize) -> &[f64] {
        let p = pair_count(self.n);
        &self.increments[k * p..(k + 1) * p]
    }

    /// Upper-triangle values at every grid point (prefix sums of the increments).
    pub fn cumulative(&self) -> Vec<Vec<f64>> {
        let p = pair_count(self.n);
        let mut out = Vec::with_capacity(self.grid.len());
        let mut current = vec![0.0; p];
        out.push(current.clone());
        for k in 0..self.steps() {
            for (c, d) in current.iter_mut().zip(self.increment(k)) {
                *c += d;
            }
            out.push(current.clone());
        }
        out
    }

    /// Coupling matrix at grid point `k`.
    pub fn at(&self, k: usize) -> CouplingMatrix {
        let p = pair_count(self.n);
        let mut upper = vec![0.0; p];
        for step in 0..k {
            for (c, d) in upper.iter_mut().zip(self.increment(step)) {
                *c += d;
            }
        }
        CouplingMatrix::from_upper(self.n, &upper).expect("length matches by construction")
    }

    pub fn terminal(&self) -> CouplingMatrix {
        self.at(self.steps())
    }

    /// Same Brownian path observed on every `factor`-th grid point.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.steps().is_multiple_of(factor) {
            return Err(Error::InvalidParams(format!(
                "cannot coarsen {} steps by a factor of {factor}",
                self.steps()
            )));
        }
        let p = pair_count(self.n);
        let coarse_steps = self.steps() / factor;
        let mut increments = vec![0.0; coarse_steps * p];
        for k in 0..self.steps() {
            let dst = &mut increments[(k / factor) * p..(k / factor + 1) * p];
            for (c, d) in dst.iter_mut().zip(self.increment(k)) {
                *c += d;
            }
        }
        let grid = self.grid.iter().step_by(factor).copied().collect();
        Ok(CouplingPath {
            n: self.n,
            grid,
            increments,
        })
    }

    /// Halves every step by Brownian-bridge midpoint sampling.
    ///
    /// The refined path passes through every original grid value, so the
    /// terminal point is unchanged pathwise.
    pub fn refine(&self, seed: u64) -> Self {
        let p = pair_count(self.n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grid = Vec::with_capacity(2 * self.grid.len() - 1);
        let mut increments = Vec::with_capacity(2 * self.increments.len());
        grid.push(self.grid[0]);
        for k in 0..self.steps() {
            let (s0, s1) = (self.grid[k], self.grid[k + 1]);
            let ds = s1 - s0;
            let bridge_sd = (ds / (4.0 * self.n as f64)).sqrt();
            let inc = self.increment(k);
            let mut second = Vec::with_capacity(p);
            for &d in inc {
                let z: f64 = rng.sample(StandardNormal);
                let first = 0.5 * d + bridge_sd * z;
                increments.push(first);
                second.push(d - first);
            }
            increments.extend(second);
            grid.push(s0 + 0.5 * ds);
            grid.push(s1);
        }
        CouplingPath {
            n: self.n,
            grid,
            increments,
        }
    }
}

/// Brownian coupling path on a uniform grid of `steps` intervals over `[0, t]`.
pub fn sample_path(params: &ModelParams, steps: usize, seed: u64) -> Result<CouplingPath> {
    params.validate()?;
    if steps == 0 {
        return Err(Error::InvalidParams("path needs at least one step".into()));
    }
    if !(params.t > 0.0) {
        return Err(Error::InvalidParams("path needs t > 0".into()));
    }
    let n = params.n;
    let p = pair_count(n);
    let grid: Vec<f64> = (0..=steps)
        .map(|k| {
            if k == steps {
                params.t
            } else {
                params.t * k as f64 / steps as f64
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut increments = Vec::with_capacity(steps * p);
    for k in 0..steps {
        let sd = ((grid[k + 1] - grid[k]) / n as f64).sqrt();
        for _ in 0..p {
            let z: f64 = rng.sample(StandardNormal);
            increments.push(sd * z);
        }
    }
    Ok(CouplingPath {
        n,
        grid,
        increments,
    })
}
