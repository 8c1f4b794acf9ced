//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use sk_tap::gibbs::ReducedSpec;
use sk_tap::model::{substream_seed, CouplingMatrix, ModelParams};

/// Moments of a reduced measure by direct evaluation of every configuration.
pub struct Naive {
    pub n: usize,
    pub log_z: f64,
    /// Clamped sites hold their spin, removed sites 0.
    pub m: Vec<f64>,
    raw2: Vec<f64>,
    states: Vec<(f64, Vec<f64>)>,
}

impl Naive {
    pub fn new(cm: &CouplingMatrix, params: &ModelParams, spec: &ReducedSpec) -> Self {
        let n = params.n;
        let active: Vec<usize> = (0..n).filter(|&i| spec.is_active(i)).collect();
        let mut states = Vec::with_capacity(1 << active.len());
        for bits in 0u64..(1u64 << active.len()) {
            let mut sigma = vec![0.0; n];
            for (&i, &tau) in spec.clamped() {
                sigma[i] = tau as f64;
            }
            for (pos, &i) in active.iter().enumerate() {
                sigma[i] = if bits >> pos & 1 == 1 { 1.0 } else { -1.0 };
            }
            let mut energy = 0.0;
            for i in 0..n {
                if spec.is_removed(i) {
                    continue;
                }
                if spec.is_active(i) {
                    energy += params.field[i] * sigma[i];
                }
                for j in i + 1..n {
                    if spec.is_removed(j) || (spec.is_clamped(i) && spec.is_clamped(j)) {
                        continue;
                    }
                    energy += cm.get(i, j) * sigma[i] * sigma[j];
                }
            }
            states.push((energy, sigma));
        }
        let top = states.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for s in &mut states {
            s.0 = (s.0 - top).exp();
            z += s.0;
        }
        for s in &mut states {
            s.0 /= z;
        }
        let mut m = vec![0.0; n];
        let mut raw2 = vec![0.0; n * n];
        for (w, sigma) in &states {
            for i in 0..n {
                m[i] += w * sigma[i];
                for j in 0..n {
                    raw2[i * n + j] += w * sigma[i] * sigma[j];
                }
            }
        }
        Naive {
            n,
            log_z: top + z.ln(),
            m,
            raw2,
            states,
        }
    }

    /// `⟨σ_iσ_j⟩ - m_i m_j`; `1 - m_i²` on the diagonal.
    pub fn pair(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 1.0 - self.m[i] * self.m[i];
        }
        self.raw2[i * self.n + j] - self.m[i] * self.m[j]
    }

    /// Centered third moment from raw moments.
    pub fn triple(&self, i: usize, j: usize, k: usize) -> f64 {
        let raw3: f64 = self
            .states
            .iter()
            .map(|(w, s)| w * s[i] * s[j] * s[k])
            .sum();
        let r2 = |a: usize, b: usize| self.raw2[a * self.n + b];
        let m = &self.m;
        raw3 - m[i] * r2(j, k) - m[j] * r2(i, k) - m[k] * r2(i, j) + 2.0 * m[i] * m[j] * m[k]
    }
}

/// Deterministic stream of pseudo-random integers for choosing test instances.
pub struct Picker {
    seed: u64,
    count: u64,
}

impl Picker {
    pub fn new(seed: u64) -> Self {
        Picker { seed, count: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.count += 1;
        substream_seed(self.seed, self.count)
    }

    /// Uniform in `lo..=hi`.
    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.next_u64() % (hi - lo + 1) as u64) as usize
    }

    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// `k` distinct sites out of `n`.
    pub fn distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            let s = self.range(0, n - 1);
            if !out.contains(&s) {
                out.push(s);
            }
        }
        out
    }

    pub fn spin(&mut self) -> i8 {
        if self.next_u64() & 1 == 1 {
            1
        } else {
            -1
        }
    }
}

/// Random reduced measure avoiding `keep`, with at most `max_clamped` clamped
/// and `max_removed` removed sites.
pub fn random_spec(
    pick: &mut Picker,
    n: usize,
    keep: &[usize],
    max_clamped: usize,
    max_removed: usize,
) -> ReducedSpec {
    let free: Vec<usize> = (0..n).filter(|i| !keep.contains(i)).collect();
    let mut spec = ReducedSpec::full();
    if free.is_empty() {
        return spec;
    }
    let clamped = pick.range(0, max_clamped.min(free.len()));
    let removed = pick.range(0, max_removed.min(free.len() - clamped));
    let order = pick.distinct(free.len(), clamped + removed);
    for (pos, &idx) in order.iter().enumerate() {
        let site = free[idx];
        spec = if pos < clamped {
            spec.clamping(site, pick.spin())
        } else {
            spec.removing(site)
        };
    }
    spec
}
