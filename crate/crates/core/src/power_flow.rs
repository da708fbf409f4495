//! Voltage evaluation for a given aggregate allocation under the linearized
//! Distflow model and under the simplified AC (branch-flow) model with line
//! losses, plus constraint checking.
//!
//! Squared voltage magnitudes are `W_kk`; `W_pk` is the off-diagonal entry of
//! the 2x2 block of edge `ε_pk`. For the AC model the edge equations are
//!
//! ```text
//! W_pk - W_kk - r_pk P_k - x_pk Q_k = 0
//! P_k = Σ_{l in I(k)} Λ_l + Σ_{ε_ls in E(k)} (W_ll - 2 W_ls + W_ss) r_ls / |z_ls|²
//! Q_k =                    Σ_{ε_ls in E(k)} (W_ll - 2 W_ls + W_ss) x_ls / |z_ls|²
//! ```
//!
//! where `E(k)` are the edges strictly below `k`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, NodeTypeTable};
use crate::real::Real;

/// Aggregate power `Λ_ij` per (node, type).
pub type AggregateAllocation<T> = NodeTypeTable<T>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowModel {
    Linearized,
    Ac,
}

impl std::str::FromStr for FlowModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linearized" => Ok(FlowModel::Linearized),
            "ac" => Ok(FlowModel::Ac),
            other => Err(Error::config(format!("unknown model `{other}` (linearized | ac)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageSolution<T> {
    pub model: FlowModel,
    /// `W_kk` for `k = 0..=I`; entry 0 is `W00`.
    pub w_diag: Vec<T>,
    /// `W_pk` of the edge into `k`; entry 0 is `W00`.
    pub w_edge: Vec<T>,
    /// Active losses of the edge into `k` (zero for the linearized model).
    pub loss_p: Vec<T>,
    pub loss_q: Vec<T>,
    /// Sup-norm residual of the edge equations.
    pub residual: T,
}

impl<T: Real> VoltageSolution<T> {
    /// `W_pp W_kk - W_pk²` of the edge into `k`.
    pub fn psd_gap(&self, g: &GridSpec<T>, k: usize) -> T {
        let p = g.parent(k);
        self.w_diag[p] * self.w_diag[k] - self.w_edge[k] * self.w_edge[k]
    }
}

/// `Σ_{l in I(k)} Σ_j Λ_lj` for every node.
pub(crate) fn subtree_loads<T: Real>(g: &GridSpec<T>, a: &AggregateAllocation<T>) -> Vec<T> {
    let mut sub = vec![T::zero(); g.nodes() + 1];
    for &k in g.bfs_order().iter().rev() {
        if k > 0 {
            sub[k] += a.node_sum(k);
            let p = g.parent(k);
            let v = sub[k];
            sub[p] += v;
        }
    }
    sub
}

/// Linearized Distflow:
/// `W_kk = W00 - 2 Σ_{ε_ls on the path to k} r_ls Σ_{m in I(s)} Σ_j Λ_mj`.
pub fn distflow_voltages<T: Real>(g: &GridSpec<T>, a: &AggregateAllocation<T>) -> Result<VoltageSolution<T>> {
    a.check_shape(g)?;
    let sub = subtree_loads(g, a);
    let n = g.nodes();
    let mut w = vec![g.w00(); n + 1];
    let two = T::lit(2.0);
    for &k in &g.bfs_order()[1..] {
        w[k] = w[g.parent(k)] - two * g.r(k) * sub[k];
    }
    let w_edge = (0..=n)
        .map(|k| if k == 0 { g.w00() } else { (w[g.parent(k)] * w[k]).max(T::zero()).sqrt() })
        .collect();
    Ok(VoltageSolution {
        model: FlowModel::Linearized,
        w_diag: w,
        w_edge,
        loss_p: vec![T::zero(); n + 1],
        loss_q: vec![T::zero(); n + 1],
        residual: T::zero(),
    })
}

/// `(r_k r_s + x_k x_s) / (r_s² + x_s²)`: weight of the loss term of edge `s`
/// in the equation of edge `k`.
fn loss_weight<T: Real>(g: &GridSpec<T>, k: usize, s: usize) -> T {
    let (rs, xs) = (g.r(s), g.x(s));
    (g.r(k) * rs + g.x(k) * xs) / (rs * rs + xs * xs)
}

/// Descendants of every node (excluding the node itself).
fn descendants<T: Real>(g: &GridSpec<T>) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); g.nodes() + 1];
    for &k in g.bfs_order().iter().rev() {
        let mut acc = Vec::new();
        for &c in g.children(k) {
            acc.push(c);
            acc.extend_from_slice(&out[c]);
        }
        out[k] = acc;
    }
    out
}

/// Residual of the AC edge equations for an arbitrary (not necessarily
/// rank-one) set of `W` entries.
pub fn ac_residual<T: Real>(g: &GridSpec<T>, a: &AggregateAllocation<T>, sol: &VoltageSolution<T>) -> Result<T> {
    a.check_shape(g)?;
    let sub = subtree_loads(g, a);
    let desc = descendants(g);
    let mut worst = T::zero();
    let two = T::lit(2.0);
    for k in 1..=g.nodes() {
        let mut rhs = g.r(k) * sub[k];
        for &s in &desc[k] {
            let p = g.parent(s);
            let spread = sol.w_diag[p] - two * sol.w_edge[s] + sol.w_diag[s];
            rhs += loss_weight(g, k, s) * spread;
        }
        let res = sol.w_edge[k] - sol.w_diag[k] - rhs;
        worst = worst.max(res.abs());
    }
    Ok(worst)
}

/// Rank-one AC voltages for the loads `a`, computed by damped Newton on the
/// voltage magnitudes warm-started from the linearized solution.
pub fn ac_voltages<T: Real>(g: &GridSpec<T>, a: &AggregateAllocation<T>) -> Result<VoltageSolution<T>> {
    g.check_constant_ratio()?;
    a.check_shape(g)?;
    if a.as_slice().iter().any(|v| !v.is_finite_value() || *v < T::zero()) {
        return Err(Error::domain("aggregate allocation must be finite and nonnegative"));
    }
    let n = g.nodes();
    let sub = subtree_loads(g, a);
    let desc = descendants(g);
    let v0 = g.w00().sqrt();
    let two = T::lit(2.0);

    let lin = distflow_voltages(g, a)?;
    let floor = T::lit(0.05) * g.w00();
    let mut v: Vec<T> = lin.w_diag.iter().map(|&w| w.max(floor).sqrt()).collect();
    v[0] = v0;

    let residual = |v: &[T]| -> Vec<T> {
        (1..=n)
            .map(|k| {
                let p = g.parent(k);
                let mut rhs = g.r(k) * sub[k];
                for &s in &desc[k] {
                    let d = v[g.parent(s)] - v[s];
                    rhs += loss_weight(g, k, s) * d * d;
                }
                v[p] * v[k] - v[k] * v[k] - rhs
            })
            .collect()
    };
    let sup = |r: &[T]| r.iter().fold(T::zero(), |m, x| m.max(x.abs()));
    let sq = |r: &[T]| r.iter().fold(T::zero(), |m, x| m + *x * *x);

    let target = T::tol(1e-13) * g.w00().max(T::one());
    let max_iter = 200;
    let mut res = residual(&v);
    let mut iterations = 0;
    while sup(&res) > target {
        if iterations == max_iter {
            // Newton creeps towards the minimizer of |res| past the nose point
            return Err(Error::Insolvable(format!(
                "no voltage profile supports the requested loads (residual {:e} after {max_iter} Newton steps, V = {:?})",
                sup(&res).as_f64(),
                v.iter().map(|x| x.as_f64()).collect::<Vec<_>>()
            )));
        }
        iterations += 1;

        let mut jac = DMatrix::<T>::zeros(n, n);
        for k in 1..=n {
            let p = g.parent(k);
            let row = k - 1;
            jac[(row, row)] += v[p] - two * v[k];
            if p > 0 {
                jac[(row, p - 1)] += v[k];
            }
            for &s in &desc[k] {
                let ps = g.parent(s);
                let d = v[ps] - v[s];
                let c = loss_weight(g, k, s) * two * d;
                jac[(row, s - 1)] += c;
                if ps > 0 {
                    jac[(row, ps - 1)] -= c;
                }
            }
        }
        let rhs = DVector::from_iterator(n, res.iter().map(|r| -*r));
        let Some(step) = jac.lu().solve(&rhs) else {
            return Err(Error::Insolvable("singular power-flow Jacobian".into()));
        };

        let base = sq(&res);
        let mut t = T::one();
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<T> = (0..=n).map(|k| if k == 0 { v0 } else { v[k] + t * step[k - 1] }).collect();
            if trial[1..].iter().all(|x| *x > T::zero()) {
                let r = residual(&trial);
                if sq(&r) <= (T::one() - T::lit(1e-4) * t) * base {
                    v = trial;
                    res = r;
                    accepted = true;
                    break;
                }
            }
            t *= T::lit(0.5);
        }
        if !accepted {
            if sup(&res) <= T::tol(1e-10) {
                break;
            }
            return Err(Error::Insolvable(format!(
                "no voltage profile supports the requested loads (residual stalled at {:e})",
                sup(&res).as_f64()
            )));
        }
    }

    let mut w_diag: Vec<T> = v.iter().map(|x| *x * *x).collect();
    w_diag[0] = g.w00();
    let mut w_edge = vec![g.w00(); n + 1];
    let mut loss_p = vec![T::zero(); n + 1];
    let mut loss_q = vec![T::zero(); n + 1];
    for k in 1..=n {
        let p = g.parent(k);
        w_edge[k] = v[p] * v[k];
        let d = v[p] - v[k];
        let z2 = g.r(k) * g.r(k) + g.x(k) * g.x(k);
        loss_p[k] = d * d * g.r(k) / z2;
        loss_q[k] = d * d * g.x(k) / z2;
    }
    let mut sol = VoltageSolution {
        model: FlowModel::Ac,
        w_diag,
        w_edge,
        loss_p,
        loss_q,
        residual: T::zero(),
    };
    sol.residual = ac_residual(g, a, &sol)?;
    Ok(sol)
}

pub fn voltages<T: Real>(g: &GridSpec<T>, a: &AggregateAllocation<T>, model: FlowModel) -> Result<VoltageSolution<T>> {
    match model {
        FlowModel::Linearized => distflow_voltages(g, a),
        FlowModel::Ac => ac_voltages(g, a),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    /// `M_i - Σ_j Λ_ij`
    StationLoad,
    /// `Λ_ij`
    RateLower,
    /// `z_ij c_max_j - Λ_ij`
    RateUpper,
    /// `W_ii - v_lo_i`
    VoltageLower,
    /// `W_pp W_kk - W_pk²` of the edge into the node (AC only).
    Psd,
    /// A voltage profile exists (AC only); slack is -1 when it does not.
    Solvable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSlack {
    pub kind: ConstraintKind,
    pub node: usize,
    pub ev_type: Option<usize>,
    pub slack: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeasibilityReport<T> {
    pub model: FlowModel,
    pub constraints: Vec<ConstraintSlack>,
    pub voltages: Option<VoltageSolution<T>>,
    pub tolerance: f64,
}

impl<T> FeasibilityReport<T> {
    pub fn violations(&self) -> impl Iterator<Item = &ConstraintSlack> {
        self.constraints.iter().filter(move |c| c.slack < -self.tolerance)
    }

    pub fn is_feasible(&self) -> bool {
        self.violations().next().is_none()
    }

    /// Constraints whose slack is within `tol` of zero.
    pub fn binding(&self, tol: f64) -> impl Iterator<Item = &ConstraintSlack> {
        self.constraints.iter().filter(move |c| c.slack.abs() <= tol)
    }

    pub fn slack(&self, kind: ConstraintKind, node: usize, ev_type: Option<usize>) -> Option<f64> {
        self.constraints
            .iter()
            .find(|c| c.kind == kind && c.node == node && c.ev_type == ev_type)
            .map(|c| c.slack)
    }
}

/// Signed slacks of every load, rate, voltage and (AC) PSD constraint.
pub fn check_feasible<T: Real>(
    g: &GridSpec<T>,
    a: &AggregateAllocation<T>,
    z: &NodeTypeTable<T>,
    model: FlowModel,
) -> Result<FeasibilityReport<T>> {
    a.check_shape(g)?;
    z.check_shape(g)?;
    let mut constraints = Vec::new();
    let mut push = |kind, node, ev_type, slack: T| {
        constraints.push(ConstraintSlack { kind, node, ev_type, slack: slack.as_f64() })
    };
    for i in 1..=g.nodes() {
        push(ConstraintKind::StationLoad, i, None, g.m(i) - a.node_sum(i));
        for j in 0..g.types() {
            push(ConstraintKind::RateLower, i, Some(j), a.get(i, j));
            push(ConstraintKind::RateUpper, i, Some(j), z.get(i, j) * g.c_max(j) - a.get(i, j));
        }
    }
    let voltages = match voltages(g, a, model) {
        Ok(sol) => {
            for k in 1..=g.nodes() {
                push(ConstraintKind::VoltageLower, k, None, sol.w_diag[k] - g.v_lo(k));
                if model == FlowModel::Ac {
                    push(ConstraintKind::Psd, k, None, sol.psd_gap(g, k));
                }
            }
            Some(sol)
        }
        Err(Error::Insolvable(_)) => {
            push(ConstraintKind::Solvable, 0, None, -T::one());
            None
        }
        Err(e) => return Err(e),
    };
    Ok(FeasibilityReport { model, constraints, voltages, tolerance: T::tol(1e-9).as_f64() })
}
