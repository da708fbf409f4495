//! Bounded-Lipschitz distance between finite measures on the half-line.

/// Mass in bins `[k h, (k+1) h)`; the last bin also holds everything beyond.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedMeasure {
    pub h: f64,
    pub masses: Vec<f64>,
}

impl BinnedMeasure {
    pub fn from_atoms(h: f64, bins: usize, atoms: impl IntoIterator<Item = (f64, f64)>) -> Self {
        let mut masses = vec![0.0; bins];
        for (x, m) in atoms {
            let k = ((x.max(0.0) / h).floor() as usize).min(bins - 1);
            masses[k] += m;
        }
        BinnedMeasure { h, masses }
    }

    /// From a tail function `y ↦ μ([y, ∞))`.
    pub fn from_tail(h: f64, bins: usize, tail: impl Fn(f64) -> f64) -> Self {
        let t: Vec<f64> = (0..bins).map(|k| tail(k as f64 * h)).collect();
        let masses = (0..bins).map(|k| if k + 1 < bins { t[k] - t[k + 1] } else { t[k] }).collect();
        BinnedMeasure { h, masses }
    }

    pub fn total(&self) -> f64 {
        self.masses.iter().sum()
    }
}

/// `sup { ∫f dμ - ∫f dν : |f| <= 1, Lip(f) <= 1 }` with both measures
/// placed at the bin centres.
///
/// Solved exactly by dynamic programming over the value of `f` at each bin:
/// the best partial sum as a function of the current value is concave and
/// piecewise linear, and moving to the next bin widens its maximum by `h`.
pub fn bl_distance(mu: &BinnedMeasure, nu: &BinnedMeasure) -> f64 {
    assert_eq!(mu.masses.len(), nu.masses.len(), "bin counts differ");
    assert!((mu.h - nu.h).abs() <= 1e-15 * mu.h, "bin widths differ");
    let h = mu.h;
    let w: Vec<f64> = mu.masses.iter().zip(&nu.masses).map(|(a, b)| a - b).collect();
    if w.is_empty() {
        return 0.0;
    }
    let mut v: Vec<(f64, f64)> = vec![(-1.0, -w[0]), (1.0, w[0])];
    for &wk in &w[1..] {
        v = widen(&v, h);
        for p in v.iter_mut() {
            p.1 += wk * p.0;
        }
    }
    v.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).abs()
}

fn interp(v: &[(f64, f64)], x: f64) -> f64 {
    let k = v.partition_point(|p| p.0 < x);
    if k == 0 {
        return v[0].1;
    }
    if k == v.len() {
        return v[k - 1].1;
    }
    let (a, b) = (v[k - 1], v[k]);
    if b.0 == a.0 {
        return b.1;
    }
    a.1 + (b.1 - a.1) * (x - a.0) / (b.0 - a.0)
}

/// `x ↦ max_{|g - x| <= h, |g| <= 1} v(g)` for concave piecewise-linear `v`.
fn widen(v: &[(f64, f64)], h: f64) -> Vec<(f64, f64)> {
    let top = v.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let first = v.iter().position(|p| p.1 == top).expect("nonempty");
    let last = v.iter().rposition(|p| p.1 == top).expect("nonempty");
    let mut raw: Vec<(f64, f64)> = Vec::with_capacity(v.len() + 2);
    raw.extend(v[..=first].iter().map(|p| (p.0 - h, p.1)));
    raw.extend(v[last..].iter().map(|p| (p.0 + h, p.1)));
    let lo = interp(&raw, -1.0);
    let hi = interp(&raw, 1.0);
    let mut out = Vec::with_capacity(raw.len());
    out.push((-1.0, lo));
    out.extend(raw.iter().copied().filter(|p| p.0 > -1.0 && p.0 < 1.0));
    out.push((1.0, hi));
    out.dedup_by(|b, a| b.0 == a.0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute force over `f` restricted to `{-1 + k h}`, which contains an
    /// optimal vertex when `2 / h` is an integer.
    fn lattice(mu: &BinnedMeasure, nu: &BinnedMeasure) -> f64 {
        let h = mu.h;
        let levels = (2.0 / h).round() as usize + 1;
        let val = |l: usize| -1.0 + l as f64 * h;
        let w: Vec<f64> = mu.masses.iter().zip(&nu.masses).map(|(a, b)| a - b).collect();
        let mut best: Vec<f64> = (0..levels).map(|l| w[0] * val(l)).collect();
        for &wk in &w[1..] {
            best = (0..levels)
                .map(|l| {
                    let lo = l.saturating_sub(1);
                    let hi = (l + 1).min(levels - 1);
                    best[lo..=hi].iter().copied().fold(f64::NEG_INFINITY, f64::max) + wk * val(l)
                })
                .collect();
        }
        best.into_iter().fold(f64::NEG_INFINITY, f64::max).abs()
    }

    #[test]
    fn point_masses() {
        let h = 0.25;
        let a = BinnedMeasure::from_atoms(h, 8, [(0.1, 1.0)]);
        let b = BinnedMeasure::from_atoms(h, 8, [(1.1, 1.0)]);
        // one unit of mass moved four bins: distance min(4h, 2) = 1
        assert!((bl_distance(&a, &b) - 1.0).abs() < 1e-14);
        let c = BinnedMeasure::from_atoms(h, 8, [(0.1, 0.5)]);
        assert!((bl_distance(&a, &c) - 0.5).abs() < 1e-14);
        assert_eq!(bl_distance(&a, &a), 0.0);
    }

    proptest! {
        #[test]
        fn matches_lattice(
            m in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..30),
            steps in 2usize..12,
        ) {
            let h = 2.0 / steps as f64;
            let mu = BinnedMeasure { h, masses: m.iter().map(|p| p.0).collect() };
            let nu = BinnedMeasure { h, masses: m.iter().map(|p| p.1).collect() };
            let exact = bl_distance(&mu, &nu);
            let brute = lattice(&mu, &nu);
            prop_assert!((exact - brute).abs() <= 1e-12 * (1.0 + brute), "{exact} vs {brute}");
            prop_assert!((bl_distance(&nu, &mu) - exact).abs() <= 1e-12 * (1.0 + exact));
        }
    }
}
