//! Joint laws of the charging requirement `B` and parking time `D`, and the
//! arrival processes feeding each (node, type) class.

use rand::Rng;
use rand_distr::{Distribution, Exp1, LogNormal as LogNormalSampler};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, LogNormal};

use crate::error::{Error, Result};
use crate::quad;

/// Finite-difference step for densities of tabulated laws.
pub const DENSITY_STEP: f64 = 1e-4;

/// Piecewise-linear CDF through `(x[k], f[k])`; `F = 0` left of `x[0]` and
/// `F = 1` from the last point on. A repeated abscissa encodes a jump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdfTable {
    pub x: Vec<f64>,
    pub f: Vec<f64>,
}

impl CdfTable {
    /// Point mass at `v`.
    pub fn point(v: f64) -> Self {
        CdfTable { x: vec![v, v], f: vec![0.0, 1.0] }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        let n = self.x.len();
        if n < 2 || self.f.len() != n {
            return Err(Error::config(format!("{what}: need at least two (x, F) points of equal length")));
        }
        if self.x.iter().chain(&self.f).any(|v| !v.is_finite()) {
            return Err(Error::config(format!("{what}: non-finite table entry")));
        }
        if self.x[0] < 0.0 || (self.x[0] == 0.0 && self.f[0] > 0.0) {
            return Err(Error::config(format!("{what}: values must be positive with probability one")));
        }
        if self.x.windows(2).any(|w| w[1] < w[0]) || self.f.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::config(format!("{what}: table must be nondecreasing")));
        }
        if !(0.0..=1.0).contains(&self.f[0]) || self.f[n - 1] != 1.0 {
            return Err(Error::config(format!("{what}: CDF must lie in [0, 1] and end at 1")));
        }
        Ok(())
    }

    pub fn cdf(&self, v: f64) -> f64 {
        if v < self.x[0] {
            return 0.0;
        }
        // last k with x[k] <= v
        let k = self.x.partition_point(|&x| x <= v) - 1;
        if k + 1 >= self.x.len() {
            return 1.0;
        }
        let (x0, x1, f0, f1) = (self.x[k], self.x[k + 1], self.f[k], self.f[k + 1]);
        f0 + (f1 - f0) * (v - x0) / (x1 - x0)
    }

    /// `P(X < v)`.
    pub fn cdf_left(&self, v: f64) -> f64 {
        let k = self.x.partition_point(|&x| x < v);
        if k == 0 {
            return 0.0;
        }
        if k >= self.x.len() {
            return 1.0;
        }
        let (x0, x1, f0, f1) = (self.x[k - 1], self.x[k], self.f[k - 1], self.f[k]);
        f0 + (f1 - f0) * (v - x0) / (x1 - x0)
    }

    /// `P(X >= v)`.
    pub fn survival(&self, v: f64) -> f64 {
        1.0 - self.cdf_left(v)
    }

    pub fn has_jumps(&self) -> bool {
        self.f[0] > 0.0 || self.x.windows(2).zip(self.f.windows(2)).any(|(x, f)| x[0] == x[1] && f[1] > f[0])
    }

    pub fn mean(&self) -> f64 {
        let mut m = self.x[0];
        for k in 0..self.x.len() - 1 {
            m += (1.0 - 0.5 * (self.f[k] + self.f[k + 1])) * (self.x[k + 1] - self.x[k]);
        }
        m
    }

    pub fn quantile(&self, u: f64) -> f64 {
        if u <= self.f[0] {
            return self.x[0];
        }
        let k = self.f.partition_point(|&f| f < u).min(self.f.len() - 1);
        let (x0, x1, f0, f1) = (self.x[k - 1], self.x[k], self.f[k - 1], self.f[k]);
        if f1 == f0 {
            x1
        } else {
            x0 + (u - f0) / (f1 - f0) * (x1 - x0)
        }
    }

    fn density(&self, v: f64) -> f64 {
        let lo = (v - DENSITY_STEP).max(0.0);
        let hi = v + DENSITY_STEP;
        (self.cdf(hi) - self.cdf(lo)) / (hi - lo)
    }

    fn support_min(&self) -> f64 {
        let k = self.f.iter().rposition(|&f| f == 0.0).unwrap_or(0);
        self.x[k]
    }

    fn support_max(&self) -> f64 {
        let k = self.f.iter().position(|&f| f >= 1.0).unwrap_or(self.x.len() - 1);
        self.x[k]
    }
}

/// Law of `(B, D)` for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum JointLaw {
    IndepExp { mean_b: f64, mean_d: f64 },
    /// Lognormal marginals given by their means and the standard deviations
    /// of their logarithms.
    IndepLognormal { mean_b: f64, sigma_b: f64, mean_d: f64, sigma_d: f64 },
    /// `B = mean_b·E`, `D = mean_d·E` for a single standard exponential `E`.
    ComonotoneExp { mean_b: f64, mean_d: f64 },
    /// Independent tabulated marginals.
    CustomTable { b: CdfTable, d: CdfTable },
}

fn lognormal(mean: f64, sigma: f64) -> LogNormal {
    LogNormal::new(mean.ln() - 0.5 * sigma * sigma, sigma).expect("validated parameters")
}

impl JointLaw {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be positive and finite, got {v}")))
            }
        };
        match self {
            JointLaw::IndepExp { mean_b, mean_d } | JointLaw::ComonotoneExp { mean_b, mean_d } => {
                pos(*mean_b, "mean_b")?;
                pos(*mean_d, "mean_d")
            }
            JointLaw::IndepLognormal { mean_b, sigma_b, mean_d, sigma_d } => {
                pos(*mean_b, "mean_b")?;
                pos(*sigma_b, "sigma_b")?;
                pos(*mean_d, "mean_d")?;
                pos(*sigma_d, "sigma_d")
            }
            JointLaw::CustomTable { b, d } => {
                b.validate("b table")?;
                d.validate("d table")
            }
        }
    }

    pub fn mean_b(&self) -> f64 {
        match self {
            JointLaw::IndepExp { mean_b, .. }
            | JointLaw::ComonotoneExp { mean_b, .. }
            | JointLaw::IndepLognormal { mean_b, .. } => *mean_b,
            JointLaw::CustomTable { b, .. } => b.mean(),
        }
    }

    pub fn mean_d(&self) -> f64 {
        match self {
            JointLaw::IndepExp { mean_d, .. }
            | JointLaw::ComonotoneExp { mean_d, .. }
            | JointLaw::IndepLognormal { mean_d, .. } => *mean_d,
            JointLaw::CustomTable { d, .. } => d.mean(),
        }
    }

    /// `P(B >= b)`.
    pub fn survival_b(&self, b: f64) -> f64 {
        if b <= 0.0 {
            return 1.0;
        }
        match self {
            JointLaw::IndepExp { mean_b, .. } | JointLaw::ComonotoneExp { mean_b, .. } => (-b / mean_b).exp(),
            JointLaw::IndepLognormal { mean_b, sigma_b, .. } => lognormal(*mean_b, *sigma_b).sf(b),
            JointLaw::CustomTable { b: t, .. } => t.survival(b),
        }
    }

    /// `P(D >= d)`.
    pub fn survival_d(&self, d: f64) -> f64 {
        if d <= 0.0 {
            return 1.0;
        }
        match self {
            JointLaw::IndepExp { mean_d, .. } | JointLaw::ComonotoneExp { mean_d, .. } => (-d / mean_d).exp(),
            JointLaw::IndepLognormal { mean_d, sigma_d, .. } => lognormal(*mean_d, *sigma_d).sf(d),
            JointLaw::CustomTable { d: t, .. } => t.survival(d),
        }
    }

    /// `P(B >= b, D >= d)`.
    pub fn survival(&self, b: f64, d: f64) -> f64 {
        match self {
            JointLaw::ComonotoneExp { mean_b, mean_d } => {
                (-(b.max(0.0) / mean_b).max(d.max(0.0) / mean_d)).exp()
            }
            _ => self.survival_b(b) * self.survival_d(d),
        }
    }

    pub fn has_deadline_density(&self) -> bool {
        match self {
            JointLaw::CustomTable { d, .. } => !d.has_jumps(),
            _ => true,
        }
    }

    /// Density of `D` at `d >= 0`. Tabulated laws use a central difference
    /// with step [`DENSITY_STEP`].
    pub fn deadline_density(&self, d: f64) -> Result<f64> {
        if d < 0.0 {
            return Ok(0.0);
        }
        Ok(match self {
            JointLaw::IndepExp { mean_d, .. } | JointLaw::ComonotoneExp { mean_d, .. } => (-d / mean_d).exp() / mean_d,
            JointLaw::IndepLognormal { mean_d, sigma_d, .. } => {
                if d == 0.0 {
                    0.0
                } else {
                    lognormal(*mean_d, *sigma_d).pdf(d)
                }
            }
            JointLaw::CustomTable { d: t, .. } => {
                if t.has_jumps() {
                    return Err(Error::NoDensity("tabulated deadline CDF has jumps".into()));
                }
                t.density(d)
            }
        })
    }

    /// A horizon beyond which `P(D >= t)` is negligible (below ~1e-17).
    pub fn deadline_horizon(&self) -> f64 {
        match self {
            JointLaw::IndepExp { mean_d, .. } | JointLaw::ComonotoneExp { mean_d, .. } => 40.0 * mean_d,
            JointLaw::IndepLognormal { mean_d, sigma_d, .. } => {
                let mu = mean_d.ln() - 0.5 * sigma_d * sigma_d;
                (mu + 9.0 * sigma_d).exp()
            }
            JointLaw::CustomTable { d, .. } => d.support_max(),
        }
    }

    /// Leftmost point of the support of `D / B`.
    pub fn inf_d_over_b(&self) -> f64 {
        match self {
            JointLaw::ComonotoneExp { mean_b, mean_d } => mean_d / mean_b,
            JointLaw::CustomTable { b, d } => d.support_min() / b.support_max(),
            _ => 0.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        match self {
            JointLaw::IndepExp { mean_b, mean_d } => {
                let b: f64 = Exp1.sample(rng);
                let d: f64 = Exp1.sample(rng);
                (mean_b * b, mean_d * d)
            }
            JointLaw::ComonotoneExp { mean_b, mean_d } => {
                let e: f64 = Exp1.sample(rng);
                (mean_b * e, mean_d * e)
            }
            JointLaw::IndepLognormal { mean_b, sigma_b, mean_d, sigma_d } => {
                let sb = LogNormalSampler::new(mean_b.ln() - 0.5 * sigma_b * sigma_b, *sigma_b).expect("validated");
                let sd = LogNormalSampler::new(mean_d.ln() - 0.5 * sigma_d * sigma_d, *sigma_d).expect("validated");
                (sb.sample(rng), sd.sample(rng))
            }
            JointLaw::CustomTable { b, d } => (b.quantile(rng.random()), d.quantile(rng.random())),
        }
    }

    /// `E[min(D, B/p)]` for a rate `p >= 0`; closed form where available.
    pub fn expected_sojourn(&self, p: f64) -> Result<f64> {
        if !(p >= 0.0) {
            return Err(Error::domain(format!("rate must be nonnegative, got {p}")));
        }
        if p == 0.0 {
            return Ok(self.mean_d());
        }
        match self {
            JointLaw::IndepExp { mean_b, mean_d } => Ok(1.0 / (1.0 / mean_d + p / mean_b)),
            JointLaw::ComonotoneExp { mean_b, mean_d } => Ok(mean_d.min(mean_b / p)),
            _ => self.expected_sojourn_quadrature(p),
        }
    }

    /// `E[min(D, B/p)] = ∫_0^∞ P(B >= p t, D >= t) dt` by adaptive quadrature.
    pub fn expected_sojourn_quadrature(&self, p: f64) -> Result<f64> {
        let horizon = self.deadline_horizon();
        let tol = 1e-12 * self.mean_d().max(1.0);
        match self {
            JointLaw::CustomTable { b, d } => {
                // integrate piecewise between the kinks of both tables
                let mut knots: Vec<f64> = d.x.iter().copied().chain(b.x.iter().map(|x| x / p)).collect();
                knots.push(0.0);
                knots.retain(|k| *k >= 0.0 && *k <= horizon);
                knots.sort_by(f64::total_cmp);
                knots.dedup();
                let mut total = 0.0;
                for w in knots.windows(2) {
                    total += quad::integrate(|t| self.survival(p * t, t), w[0], w[1], tol)?;
                }
                Ok(total)
            }
            _ => quad::integrate_half_line(|t| self.survival(p * t, t), tol),
        }
    }

    /// `E[min(D x, B)] = x E[min(D, B/x)]`.
    pub fn expected_min_scaled(&self, x: f64) -> Result<f64> {
        if x == 0.0 {
            return Ok(0.0);
        }
        Ok(x * self.expected_sojourn(x)?)
    }
}

/// Arrival process of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalProcess {
    PoissonConst { rate: f64 },
    /// Rate `rates[k]` on `[times[k], times[k+1])`; the last rate extends to
    /// infinity. `times[0]` must be 0.
    PoissonTimevarying { times: Vec<f64>, rates: Vec<f64> },
    /// Arrivals at the listed instants (not scaled by `n`).
    Schedule { times: Vec<f64> },
}

impl ArrivalProcess {
    pub fn validate(&self) -> Result<()> {
        match self {
            ArrivalProcess::PoissonConst { rate } if *rate >= 0.0 && rate.is_finite() => Ok(()),
            ArrivalProcess::PoissonConst { rate } => Err(Error::config(format!("bad arrival rate {rate}"))),
            ArrivalProcess::PoissonTimevarying { times, rates } => {
                if times.is_empty() || times.len() != rates.len() || times[0] != 0.0 {
                    return Err(Error::config("rate table needs matching times/rates starting at t = 0"));
                }
                if times.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::config("rate table times must increase"));
                }
                if rates.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
                    return Err(Error::config("rate table entries must be finite and nonnegative"));
                }
                Ok(())
            }
            ArrivalProcess::Schedule { times } => {
                if times.iter().any(|t| !(*t >= 0.0 && t.is_finite())) || times.windows(2).any(|w| w[1] < w[0]) {
                    return Err(Error::config("scheduled arrival times must be finite, nonnegative and sorted"));
                }
                Ok(())
            }
        }
    }

    /// Instantaneous rate `λ(t)`; zero for scheduled arrivals.
    pub fn rate(&self, t: f64) -> f64 {
        match self {
            ArrivalProcess::PoissonConst { rate } => *rate,
            ArrivalProcess::PoissonTimevarying { times, rates } => {
                let k = times.partition_point(|&s| s <= t).max(1) - 1;
                rates[k]
            }
            ArrivalProcess::Schedule { .. } => 0.0,
        }
    }

    pub fn max_rate(&self) -> f64 {
        match self {
            ArrivalProcess::PoissonConst { rate } => *rate,
            ArrivalProcess::PoissonTimevarying { rates, .. } => rates.iter().copied().fold(0.0, f64::max),
            ArrivalProcess::Schedule { .. } => 0.0,
        }
    }

    /// `Ē(t) = ∫_0^t λ` (number of scheduled arrivals in `[0, t]` for a schedule).
    pub fn cumulative(&self, t: f64) -> f64 {
        match self {
            ArrivalProcess::PoissonConst { rate } => rate * t,
            ArrivalProcess::PoissonTimevarying { times, rates } => {
                let mut acc = 0.0;
                for k in 0..times.len() {
                    let start = times[k];
                    if start >= t {
                        break;
                    }
                    let end = times.get(k + 1).copied().unwrap_or(f64::INFINITY).min(t);
                    acc += rates[k] * (end - start);
                }
                acc
            }
            ArrivalProcess::Schedule { times } => times.partition_point(|&s| s <= t) as f64,
        }
    }

    /// Points where the rate may jump.
    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            ArrivalProcess::PoissonTimevarying { times, .. } => times.clone(),
            _ => Vec::new(),
        }
    }

    /// Rates multiplied by `n`.
    pub fn scaled(&self, n: f64) -> Self {
        match self {
            ArrivalProcess::PoissonConst { rate } => ArrivalProcess::PoissonConst { rate: rate * n },
            ArrivalProcess::PoissonTimevarying { times, rates } => ArrivalProcess::PoissonTimevarying {
                times: times.clone(),
                rates: rates.iter().map(|r| r * n).collect(),
            },
            s @ ArrivalProcess::Schedule { .. } => s.clone(),
        }
    }

    pub fn constant_rate(&self) -> Option<f64> {
        match self {
            ArrivalProcess::PoissonConst { rate } => Some(*rate),
            _ => None,
        }
    }
}

/// Per-(node, type) data for nodes `1..=I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClass<T> {
    nodes: usize,
    types: usize,
    data: Vec<T>,
}

impl<T: Clone> PerClass<T> {
    pub fn broadcast(nodes: usize, types: usize, v: T) -> Self {
        PerClass { nodes, types, data: vec![v; nodes * types] }
    }

    pub fn from_fn(nodes: usize, types: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let data = (1..=nodes).flat_map(|i| (0..types).map(move |j| (i, j))).map(|(i, j)| f(i, j)).collect();
        PerClass { nodes, types, data }
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn types(&self) -> usize {
        self.types
    }

    pub fn get(&self, i: usize, j: usize) -> &T {
        &self.data[(i - 1) * self.types + j]
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut T {
        &mut self.data[(i - 1) * self.types + j]
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &T)> {
        let types = self.types;
        self.data.iter().enumerate().map(move |(k, v)| ((k / types + 1, k % types), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = ((usize, usize), &mut T)> {
        let types = self.types;
        self.data.iter_mut().enumerate().map(move |(k, v)| ((k / types + 1, k % types), v))
    }

    pub fn map<U: Clone>(&self, f: impl Fn(&T) -> U) -> PerClass<U> {
        PerClass { nodes: self.nodes, types: self.types, data: self.data.iter().map(f).collect() }
    }
}

pub type ArrivalSpec = PerClass<ArrivalProcess>;
pub type JointLawSpec = PerClass<JointLaw>;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exp_sojourn_closed_form_matches_quadrature() {
        let law = JointLaw::IndepExp { mean_b: 2.0, mean_d: 1.5 };
        for p in [0.1, 0.7, 1.0, 3.0] {
            let a = law.expected_sojourn(p).unwrap();
            let q = law.expected_sojourn_quadrature(p).unwrap();
            assert!((a - q).abs() < 1e-10, "p = {p}: {a} vs {q}");
        }
        // E[min(D x, B)] = x / (μ_D + x μ_B) with rates μ
        let law = JointLaw::IndepExp { mean_b: 1.0, mean_d: 1.0 };
        assert!((law.expected_min_scaled(3.0).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn comonotone_sojourn() {
        let law = JointLaw::ComonotoneExp { mean_b: 2.0, mean_d: 1.0 };
        assert_eq!(law.expected_sojourn(1.0).unwrap(), 1.0);
        assert_eq!(law.expected_sojourn(4.0).unwrap(), 0.5);
        assert!((law.expected_sojourn_quadrature(4.0).unwrap() - 0.5).abs() < 1e-10);
        assert_eq!(law.inf_d_over_b(), 0.5);
    }

    #[test]
    fn tables() {
        let t = CdfTable { x: vec![0.0, 2.0], f: vec![0.0, 1.0] };
        t.validate("t").unwrap();
        assert_eq!(t.mean(), 1.0);
        assert_eq!(t.survival(0.5), 0.75);
        assert_eq!(t.quantile(0.25), 0.5);
        assert!(!t.has_jumps());
        let p = CdfTable::point(5.0);
        p.validate("p").unwrap();
        assert_eq!(p.mean(), 5.0);
        assert_eq!(p.survival(5.0), 1.0);
        assert_eq!(p.survival(5.0 + 1e-12), 0.0);
        assert_eq!(p.quantile(0.3), 5.0);
        assert!(p.has_jumps());
        let law = JointLaw::CustomTable { b: t.clone(), d: p };
        assert!(matches!(law.deadline_density(1.0), Err(Error::NoDensity(_))));
        // uniform B on [0, 2], D = 5, p = 1: E[min(5, B)] = 1
        assert!((law.expected_sojourn(1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lognormal_means() {
        let law = JointLaw::IndepLognormal { mean_b: 2.0, sigma_b: 0.5, mean_d: 3.0, sigma_d: 0.4 };
        law.validate().unwrap();
        let q = quad::integrate_half_line(|t| law.survival_d(t), 1e-12).unwrap();
        assert!((q - 3.0).abs() < 1e-8, "{q}");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let mean = (0..n).map(|_| law.sample(&mut rng).1).sum::<f64>() / n as f64;
        assert!((mean - 3.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn piecewise_arrivals() {
        let a = ArrivalProcess::PoissonTimevarying { times: vec![0.0, 1.0, 3.0], rates: vec![2.0, 0.0, 1.0] };
        a.validate().unwrap();
        assert_eq!(a.rate(0.5), 2.0);
        assert_eq!(a.rate(1.0), 0.0);
        assert_eq!(a.rate(10.0), 1.0);
        assert_eq!(a.cumulative(5.0), 4.0);
        assert_eq!(a.max_rate(), 2.0);
    }
}
