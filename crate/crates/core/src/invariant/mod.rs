//! Invariant point of the fluid model.
//!
//! `q*` is explicit. `z*` solves `z_ij = c_ij E[D_ij ∧ B_ij / p_ij(z)]` with
//! `c_ij = (λ_ij / ρ_i)(ρ_i ∧ K_i)`; it is computed either by damped
//! fixed-point iteration or from the optimal aggregates `Λ*` of a single
//! program in which `u_ij` is replaced by `G_ij` with
//! `G'_ij = u'_ij ∘ g_ij⁻¹` and `g_ij(x) = c_ij E[min(D_j x, B_j)]`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::alloc::ipm::SeparableObjective;
use crate::alloc::{solve_allocation, solve_program, Entry, UtilitySpec};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, NodeTypeTable};
use crate::law::{ArrivalSpec, JointLaw, JointLawSpec};
use crate::power_flow::FlowModel;
use crate::quad;

/// Points in the inversion table of each `g_ij`.
pub const G_TABLE_POINTS: usize = 2048;

/// Accuracy of [`g_inverse`] in the value of `g`.
pub const G_INVERSE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficIntensity {
    pub rho: NodeTypeTable<f64>,
    /// Index 0 unused.
    pub rho_node: Vec<f64>,
}

/// `q*` and the shape of the invariant measures.
#[derive(Debug, Clone)]
pub struct QStar {
    pub intensity: TrafficIntensity,
    /// `(λ_ij / ρ_i)(ρ_i ∧ K_i)`.
    pub prefactor: NodeTypeTable<f64>,
    pub q_star: NodeTypeTable<f64>,
    laws: JointLawSpec,
}

impl QStar {
    /// `Q*_ij([y, ∞)) = c_ij ∫_y^∞ P(D_ij >= s) ds`.
    pub fn q_tail(&self, i: usize, j: usize, y: f64) -> Result<f64> {
        let law = self.laws.get(i, j);
        let c = self.prefactor.get(i, j);
        Ok(c * quad::integrate_half_line(|s| law.survival_d(y.max(0.0) + s), 1e-12)?)
    }

    /// `Z*_ij([x, ∞) × [y, ∞)) = c_ij ∫_0^∞ P(B >= x + p s, D >= y + s) ds`.
    pub fn z_tail(&self, i: usize, j: usize, p: f64, x: f64, y: f64) -> Result<f64> {
        let law = self.laws.get(i, j);
        let c = self.prefactor.get(i, j);
        Ok(c * quad::integrate_half_line(|s| law.survival(x + p * s, y.max(0.0) + s), 1e-12)?)
    }
}

fn constant_rates(g: &GridSpec<f64>, arr: &ArrivalSpec) -> Result<NodeTypeTable<f64>> {
    let mut lam = NodeTypeTable::zeros(g.nodes(), g.types());
    for ((i, j), a) in arr.iter() {
        let r = a.constant_rate().ok_or_else(|| Error::domain(format!("class ({i}, {j}) needs a constant arrival rate")))?;
        lam.set(i, j, r);
    }
    Ok(lam)
}

pub fn invariant_q(g: &GridSpec<f64>, arr: &ArrivalSpec, laws: &JointLawSpec) -> Result<QStar> {
    let (nodes, types) = (g.nodes(), g.types());
    if (arr.nodes(), arr.types()) != (nodes, types) || (laws.nodes(), laws.types()) != (nodes, types) {
        return Err(Error::Dimension("arrivals and laws must match the grid".into()));
    }
    let lam = constant_rates(g, arr)?;
    let mut rho = NodeTypeTable::zeros(nodes, types);
    let mut rho_node = vec![0.0; nodes + 1];
    for ((i, j), law) in laws.iter() {
        law.validate()?;
        let ed = law.mean_d();
        if !ed.is_finite() {
            return Err(Error::domain(format!("class ({i}, {j}) has infinite mean parking time")));
        }
        rho.set(i, j, lam.get(i, j) * ed);
        rho_node[i] += lam.get(i, j) * ed;
    }
    let mut prefactor = NodeTypeTable::zeros(nodes, types);
    let mut q_star = NodeTypeTable::zeros(nodes, types);
    for i in 1..=nodes {
        if rho_node[i] <= 0.0 {
            continue;
        }
        let held = rho_node[i].min(g.capacity(i).as_f64());
        for j in 0..types {
            prefactor.set(i, j, lam.get(i, j) / rho_node[i] * held);
            q_star.set(i, j, rho.get(i, j) / rho_node[i] * held);
        }
    }
    Ok(QStar { intensity: TrafficIntensity { rho, rho_node }, prefactor, q_star, laws: laws.clone() })
}

/// `x ↦ c E[min(D x, B)]` on `(0, c_max]` with a log-spaced lookup table.
#[derive(Debug, Clone)]
pub struct GFunction {
    pub prefactor: f64,
    pub law: JointLaw,
    pub c_max: f64,
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl GFunction {
    pub fn new(prefactor: f64, law: JointLaw, c_max: f64) -> Result<Self> {
        if !(prefactor > 0.0 && c_max > 0.0 && c_max.is_finite()) {
            return Err(Error::domain("g needs a positive prefactor and a finite c_max"));
        }
        let lo = (1e-6 * c_max).ln();
        let hi = c_max.ln();
        let xs: Vec<f64> = (0..G_TABLE_POINTS)
            .map(|k| {
                if k + 1 == G_TABLE_POINTS {
                    c_max
                } else {
                    (lo + (hi - lo) * k as f64 / (G_TABLE_POINTS - 1) as f64).exp()
                }
            })
            .collect();
        let mut gf = GFunction { prefactor, law, c_max, xs, ys: Vec::new() };
        gf.ys = gf.xs.iter().map(|&x| gf.eval(x)).collect::<Result<_>>()?;
        Ok(gf)
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        Ok(self.prefactor * self.law.expected_min_scaled(x)?)
    }

    /// `g'(x) = c E[D 1{D x < B}]`.
    pub fn derivative(&self, x: f64) -> Result<f64> {
        match self.law {
            JointLaw::IndepExp { mean_b, mean_d } => {
                let den = mean_b + x * mean_d;
                Ok(self.prefactor * mean_d * mean_b * mean_b / (den * den))
            }
            _ => {
                let h = 1e-5 * x.max(1e-8);
                Ok((self.eval(x + h)? - self.eval((x - h).max(0.0))?) / (x + h - (x - h).max(0.0)))
            }
        }
    }

    /// `g(c_max)`.
    pub fn max_value(&self) -> f64 {
        *self.ys.last().expect("table is nonempty")
    }
}

/// Solves `g(x) = y` for `0 < y <= g(c_max)`.
pub fn g_inverse(gf: &GFunction, y: f64) -> Result<f64> {
    if !(y > 0.0 && y <= gf.max_value()) {
        return Err(Error::domain(format!("{y} is outside (0, {}]", gf.max_value())));
    }
    let k = gf.ys.partition_point(|&v| v < y);
    if k < gf.ys.len() && gf.ys[k] == y {
        return Ok(gf.xs[k]);
    }
    let (mut lo, mut hi) = if k == 0 { (0.0, gf.xs[0]) } else { (gf.xs[k - 1], gf.xs[k]) };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let v = gf.eval(mid)?;
        if (v - y).abs() <= G_INVERSE_TOL || mid <= lo || mid >= hi {
            return Ok(mid);
        }
        if v < y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `Σ G_ij(Λ_ij)` scaled by `1 / len`.
struct GObjective<'a> {
    u: &'a UtilitySpec<f64>,
    entries: Vec<(usize, usize, GFunction)>,
}

impl SeparableObjective<f64> for GObjective<'_> {
    fn len(&self) -> usize {
        self.entries.len()
    }

    /// The value component is not computed here; see `value`.
    fn eval(&self, e: usize, lam: f64) -> Option<(f64, f64, f64)> {
        let (i, j, gf) = &self.entries[e];
        if !(lam > 0.0 && lam <= gf.max_value()) {
            return None;
        }
        let x = g_inverse(gf, lam).ok()?;
        let (_, d1, d2) = self.u.eval(*i, *j, x);
        let gp = gf.derivative(x).ok()?;
        let s = 1.0 / self.entries.len() as f64;
        Some((0.0, s * d1, s * d2 / gp))
    }

    /// `∫ u'(x) g'(x) dx` from `c_max / 2` to `g⁻¹(Λ)`.
    fn value(&self, e: usize, lam: f64) -> Option<f64> {
        let (i, j, gf) = &self.entries[e];
        let x = g_inverse(gf, lam).ok()?;
        let v = quad::integrate(
            |s| self.u.eval(*i, *j, s).1 * gf.derivative(s).unwrap_or(f64::NAN),
            0.5 * gf.c_max,
            x,
            1e-10,
        )
        .ok()?;
        Some(v / self.entries.len() as f64)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvariantPoint {
    pub q_star: NodeTypeTable<f64>,
    pub z_star: NodeTypeTable<f64>,
    pub lambda_star: NodeTypeTable<f64>,
    pub p_star: NodeTypeTable<f64>,
    /// Squared voltage magnitudes, index 0 is the feeder.
    pub w_star: Vec<f64>,
    /// `max |z - T(z)|`.
    pub residual_fp: f64,
    /// KKT residual of the program that produced the point.
    pub residual_opt: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `inf(D_j / B_j) <= 1 / c_max_j` for every class with arrivals.
    pub hypothesis_holds: bool,
}

impl InvariantPoint {
    /// Largest entrywise difference in `z*`.
    pub fn gap(&self, other: &InvariantPoint) -> f64 {
        self.z_star.as_slice().iter().zip(other.z_star.as_slice()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointOptions {
    pub theta: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions { theta: 0.5, tol: 1e-8, max_iter: 500 }
    }
}

struct FixedPointMap<'a> {
    g: &'a GridSpec<f64>,
    laws: &'a JointLawSpec,
    u: &'a UtilitySpec<f64>,
    model: FlowModel,
    q: &'a QStar,
}

impl FixedPointMap<'_> {
    /// `(T(z), p(z), W, KKT residual)`.
    fn apply(&self, z: &NodeTypeTable<f64>) -> Result<(NodeTypeTable<f64>, NodeTypeTable<f64>, Vec<f64>, f64)> {
        let a = solve_allocation(self.g, z, self.u, self.model)?;
        let mut t = NodeTypeTable::zeros(self.g.nodes(), self.g.types());
        for (i, j) in z.indices() {
            let c = self.q.prefactor.get(i, j);
            if c > 0.0 {
                t.set(i, j, c * self.laws.get(i, j).expected_sojourn(a.p.get(i, j))?);
            }
        }
        Ok((t, a.p, a.voltages.w_diag, a.kkt_residual))
    }
}

fn sup_diff(a: &NodeTypeTable<f64>, b: &NodeTypeTable<f64>) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn hypothesis(g: &GridSpec<f64>, laws: &JointLawSpec, q: &QStar) -> bool {
    let mut ok = true;
    for ((i, j), law) in laws.iter() {
        if q.prefactor.get(i, j) > 0.0 && law.inf_d_over_b() > 1.0 / g.c_max(j) {
            warn!("class ({i}, {j}): inf(D/B) exceeds 1/c_max; the invariant point may not be unique");
            ok = false;
        }
    }
    ok
}

/// Damped iteration `z ← (1-θ) z + θ T(z)` started from `init` (default `q*`).
pub fn fixed_point_z(
    g: &GridSpec<f64>,
    arr: &ArrivalSpec,
    laws: &JointLawSpec,
    u: &UtilitySpec<f64>,
    model: FlowModel,
    init: Option<&NodeTypeTable<f64>>,
    opts: FixedPointOptions,
) -> Result<InvariantPoint> {
    let q = invariant_q(g, arr, laws)?;
    let hypothesis_holds = hypothesis(g, laws, &q);
    let map = FixedPointMap { g, laws, u, model, q: &q };
    let mut z = match init {
        Some(z0) => {
            z0.check_shape(g)?;
            z0.clone()
        }
        None => q.q_star.clone(),
    };
    let mut iterations = 0;
    loop {
        let (t, p, w, kkt) = map.apply(&z)?;
        let residual = sup_diff(&z, &t);
        iterations += 1;
        if residual <= opts.tol || iterations >= opts.max_iter {
            let converged = residual <= opts.tol;
            if !converged {
                warn!("fixed-point iteration stopped at residual {residual:.3e} after {iterations} steps");
            }
            return Ok(InvariantPoint {
                q_star: q.q_star.clone(),
                lambda_star: z.zip_map(&p, |a, b| a * b),
                z_star: z,
                p_star: p,
                w_star: w,
                residual_fp: residual,
                residual_opt: kkt,
                iterations,
                converged,
                hypothesis_holds,
            });
        }
        z = z.zip_map(&t, |a, b| (1.0 - opts.theta) * a + opts.theta * b);
    }
}

/// `z*` from the aggregate program with objective `Σ G_ij(Λ_ij)`.
pub fn acopf_invariant(
    g: &GridSpec<f64>,
    arr: &ArrivalSpec,
    laws: &JointLawSpec,
    u: &UtilitySpec<f64>,
    model: FlowModel,
) -> Result<InvariantPoint> {
    let q = invariant_q(g, arr, laws)?;
    let hypothesis_holds = hypothesis(g, laws, &q);
    let mut entries = Vec::new();
    let mut gfs = Vec::new();
    for (i, j) in q.prefactor.indices() {
        let c = q.prefactor.get(i, j);
        if c > 0.0 {
            let gf = GFunction::new(c, laws.get(i, j).clone(), g.c_max(j))?;
            entries.push(Entry { node: i, ev_type: j, cap: gf.max_value() });
            gfs.push((i, j, gf));
        }
    }
    let obj = GObjective { u, entries: gfs };
    let sol = solve_program(g, &entries, &obj, model, true)?;

    let (nodes, types) = (g.nodes(), g.types());
    let mut z_star = NodeTypeTable::zeros(nodes, types);
    let mut p_star = NodeTypeTable::zeros(nodes, types);
    for (i, j, gf) in &obj.entries {
        let lam = sol.lambda.get(*i, *j);
        if lam > 0.0 {
            let p = g_inverse(gf, lam.min(gf.max_value()))?;
            p_star.set(*i, *j, p);
            z_star.set(*i, *j, lam / p);
        }
    }
    let map = FixedPointMap { g, laws, u, model, q: &q };
    let (t, _, _, _) = map.apply(&z_star)?;
    let residual_fp = sup_diff(&z_star, &t);
    if residual_fp > 1e-6 {
        warn!("invariant point from the aggregate program has fixed-point residual {residual_fp:.3e}");
    }
    Ok(InvariantPoint {
        q_star: q.q_star,
        z_star,
        lambda_star: sol.lambda,
        p_star,
        w_star: sol.voltages.w_diag,
        residual_fp,
        residual_opt: sol.kkt_residual,
        iterations: sol.iterations,
        converged: residual_fp <= 1e-6,
        hypothesis_holds,
    })
}
