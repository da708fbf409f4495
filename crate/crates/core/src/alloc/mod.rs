//! Utility-maximizing allocation of charging power.
//!
//! For uncharged counts `z` the solver maximizes `Σ z_ij u_ij(Λ_ij / z_ij)`
//! over aggregates `Λ` subject to station loads, per-vehicle rate caps and
//! voltage constraints, under either power-flow model. The AC model is solved
//! through its edge-wise PSD relaxation in the joint variables `(Λ, W)`;
//! [`rank_one_gap`] reports how far the optimum is from a physical profile.

pub mod ipm;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, NodeTypeTable};
use crate::power_flow::{distflow_voltages, ConstraintKind, FlowModel, VoltageSolution};
use crate::real::Real;
use ipm::{BarrierProblem, ConeSide, IpmOptions, LinearIneq, RotatedCone, SeparableObjective};

/// Counts below this are treated as zero.
pub const ZERO_COUNT: f64 = 1e-12;

/// Slack below which a constraint is reported as binding.
pub const BINDING_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UtilityKind {
    WeightedLog,
    WeightedAlphaFair { alpha: f64 },
}

/// `u_ij(x) = w_ij log x` or `w_ij x^(1-α) / (1-α)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilitySpec<T> {
    pub kind: UtilityKind,
    pub w: NodeTypeTable<T>,
}

impl<T: Real> UtilitySpec<T> {
    pub fn new(kind: UtilityKind, w: NodeTypeTable<T>) -> Result<Self> {
        if w.as_slice().iter().any(|&v| !(v > T::zero() && v.is_finite_value())) {
            return Err(Error::domain("utility weights must be positive and finite"));
        }
        if let UtilityKind::WeightedAlphaFair { alpha } = kind {
            if !(alpha > 0.0 && alpha.is_finite()) || alpha == 1.0 {
                return Err(Error::domain(format!("alpha must be positive and != 1, got {alpha}")));
            }
        }
        Ok(UtilitySpec { kind, w })
    }

    /// Proportional fairness with unit weights.
    pub fn log(g: &GridSpec<T>) -> Self {
        UtilitySpec { kind: UtilityKind::WeightedLog, w: NodeTypeTable::<T>::zeros(g.nodes(), g.types()).map(|_| T::one()) }
    }

    /// `(u, u', u'')` at `x > 0`.
    pub fn eval(&self, i: usize, j: usize, x: T) -> (T, T, T) {
        let w = self.w.get(i, j);
        match self.kind {
            UtilityKind::WeightedLog => (w * x.ln(), w / x, -w / (x * x)),
            UtilityKind::WeightedAlphaFair { alpha } => {
                let a = T::lit(alpha);
                let xa = x.powf(-a);
                (w * x * xa / (T::one() - a), w * xa, -a * w * xa / x)
            }
        }
    }

    pub fn cast<U: Real>(&self) -> UtilitySpec<U> {
        UtilitySpec { kind: self.kind, w: self.w.map(|v| U::lit(v.as_f64())) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintDual {
    pub kind: ConstraintKind,
    pub node: usize,
    pub ev_type: Option<usize>,
    pub slack: f64,
    pub dual: f64,
    pub binding: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AllocationResult<T> {
    pub model: FlowModel,
    pub voltage_constrained: bool,
    pub p: NodeTypeTable<T>,
    pub lambda: NodeTypeTable<T>,
    pub voltages: VoltageSolution<T>,
    pub duals: Vec<ConstraintDual>,
    pub objective: T,
    pub iterations: usize,
    pub kkt_residual: T,
}

impl<T> AllocationResult<T> {
    pub fn binding(&self) -> impl Iterator<Item = &ConstraintDual> {
        self.duals.iter().filter(|d| d.binding)
    }

    pub fn dual(&self, kind: ConstraintKind, node: usize, ev_type: Option<usize>) -> Option<&ConstraintDual> {
        self.duals.iter().find(|d| d.kind == kind && d.node == node && d.ev_type == ev_type)
    }
}

/// One free `Λ_ij` of a program.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Entry<T> {
    pub node: usize,
    pub ev_type: usize,
    /// Upper bound on `Λ_ij`, possibly infinite.
    pub cap: T,
}

/// Solution of a generic allocation program.
pub(crate) struct ProgramSolution<T> {
    pub lambda: NodeTypeTable<T>,
    pub voltages: VoltageSolution<T>,
    pub duals: Vec<ConstraintDual>,
    pub iterations: usize,
    pub kkt_residual: T,
}

/// `max Σ_e f_e(Λ_e)` subject to `0 <= Λ_e <= cap_e`, `Σ_j Λ_ij <= M_i` and
/// the voltage model. Entries absent from `entries` are fixed at zero.
pub(crate) fn solve_program<T: Real, O: SeparableObjective<T>>(
    g: &GridSpec<T>,
    entries: &[Entry<T>],
    obj: &O,
    model: FlowModel,
    voltage_constrained: bool,
) -> Result<ProgramSolution<T>> {
    let nodes = g.nodes();
    if voltage_constrained {
        if let Some(k) = (1..=nodes).find(|&k| g.v_lo(k) >= g.w00()) {
            return Err(Error::EmptyFeasible(format!(
                "v_lo of node {k} ({}) is not below W00 ({})",
                g.v_lo(k),
                g.w00()
            )));
        }
    }
    if model == FlowModel::Ac {
        g.check_constant_ratio()?;
    }
    if entries.is_empty() {
        let lambda = NodeTypeTable::zeros(nodes, g.types());
        let voltages = distflow_voltages(g, &lambda)?;
        let voltages = VoltageSolution { model, ..voltages };
        return Ok(ProgramSolution { lambda, voltages, duals: Vec::new(), iterations: 0, kkt_residual: T::zero() });
    }

    let ne = entries.len();
    // AC variables exist only for nodes with load in their subtree; an
    // unloaded subtree carries no flow and sits at its parent's voltage.
    let subtree: Vec<Vec<usize>> = (0..=nodes).map(|k| g.subtree_nodes(k).unwrap_or_default()).collect();
    let kept: Vec<usize> =
        (1..=nodes).filter(|&k| entries.iter().any(|en| subtree[k].contains(&en.node))).collect();
    let mut slot = vec![None; nodes + 1];
    for (n, &k) in kept.iter().enumerate() {
        slot[k] = Some(n);
    }
    let nk = kept.len();
    let n_vars = match model {
        FlowModel::Linearized => ne,
        FlowModel::Ac => ne + 2 * nk,
    };
    let wd = |k: usize| ne + slot[k].expect("loaded node");
    let we = |k: usize| ne + nk + slot[k].expect("loaded node");
    let carrier = |mut k: usize| {
        while k != 0 && slot[k].is_none() {
            k = g.parent(k);
        }
        k
    };

    let mut linear = Vec::new();
    let mut meta: Vec<(ConstraintKind, usize, Option<usize>)> = Vec::new();
    for (e, en) in entries.iter().enumerate() {
        linear.push(LinearIneq { coefs: vec![(e, -T::one())], rhs: T::zero() });
        meta.push((ConstraintKind::RateLower, en.node, Some(en.ev_type)));
        if en.cap.is_finite_value() {
            linear.push(LinearIneq { coefs: vec![(e, T::one())], rhs: en.cap });
            meta.push((ConstraintKind::RateUpper, en.node, Some(en.ev_type)));
        }
    }
    for i in 1..=nodes {
        let coefs: Vec<(usize, T)> =
            entries.iter().enumerate().filter(|(_, en)| en.node == i).map(|(e, _)| (e, T::one())).collect();
        if !coefs.is_empty() {
            linear.push(LinearIneq { coefs, rhs: g.m(i) });
            meta.push((ConstraintKind::StationLoad, i, None));
        }
    }

    let paths: Vec<Vec<usize>> = (0..=nodes)
        .map(|k| g.root_path(k).map(|p| p.into_iter().map(|e| e.child).collect()).unwrap_or_default())
        .collect();
    let two = T::lit(2.0);
    if voltage_constrained {
        for k in 1..=nodes {
            match model {
                FlowModel::Linearized => {
                    // W00 - 2 Σ_e (Σ_{s in P(k) ∩ P(m_e)} r_s) Λ_e >= v_lo
                    let coefs = entries
                        .iter()
                        .enumerate()
                        .filter_map(|(e, en)| {
                            let shared = paths[k]
                                .iter()
                                .filter(|s| paths[en.node].contains(s))
                                .fold(T::zero(), |acc, &s| acc + g.r(s));
                            (shared > T::zero()).then(|| (e, two * shared))
                        })
                        .collect();
                    linear.push(LinearIneq { coefs, rhs: g.w00() - g.v_lo(k) });
                }
                FlowModel::Ac => {
                    let a = carrier(k);
                    if a == 0 {
                        continue;
                    }
                    linear.push(LinearIneq { coefs: vec![(wd(a), -T::one())], rhs: -g.v_lo(k) });
                }
            }
            meta.push((ConstraintKind::VoltageLower, k, None));
        }
    }

    let mut cones = Vec::new();
    let mut eq_rows = Vec::new();
    let mut eq_rhs = Vec::new();
    if model == FlowModel::Ac {
        for &k in &kept {
            let p = g.parent(k);
            let a = if p == 0 { ConeSide::Const(g.w00()) } else { ConeSide::Var(wd(p)) };
            cones.push(RotatedCone { a, b: wd(k), c: we(k) });
            meta.push((ConstraintKind::Psd, k, None));

            let mut row = vec![(we(k), T::one()), (wd(k), -T::one())];
            for (e, en) in entries.iter().enumerate() {
                if subtree[k].contains(&en.node) {
                    row.push((e, -g.r(k)));
                }
            }
            for &s in subtree[k].iter().filter(|&&s| s != k && slot[s].is_some()) {
                let c = {
                    let (rs, xs) = (g.r(s), g.x(s));
                    (g.r(k) * rs + g.x(k) * xs) / (rs * rs + xs * xs)
                };
                row.push((wd(g.parent(s)), -c));
                row.push((we(s), two * c));
                row.push((wd(s), -c));
            }
            eq_rows.push(row);
            eq_rhs.push(T::zero());
        }
    }

    let prob = BarrierProblem { n: n_vars, eq_rows, eq_rhs, linear, cones };
    let x0 = starting_point(g, entries, &kept, &prob, model, voltage_constrained)?;
    let sol = prob.solve(obj, x0, &IpmOptions::default())?;

    let mut lambda = NodeTypeTable::zeros(nodes, g.types());
    for (e, en) in entries.iter().enumerate() {
        lambda.set(en.node, en.ev_type, sol.x[e].max(T::zero()));
    }
    let voltages = match model {
        FlowModel::Linearized => distflow_voltages(g, &lambda)?,
        FlowModel::Ac => relaxed_voltages(g, &sol.x, ne, &slot),
    };
    let duals = meta
        .iter()
        .zip(sol.ineq_slacks.iter().zip(&sol.ineq_duals))
        .map(|(&(kind, node, ev_type), (&s, &d))| ConstraintDual {
            kind,
            node,
            ev_type,
            slack: s.as_f64(),
            dual: d.as_f64(),
            binding: s.as_f64() < BINDING_TOL,
        })
        .collect();
    Ok(ProgramSolution { lambda, voltages, duals, iterations: sol.newton_steps, kkt_residual: sol.kkt_residual })
}

/// `W` and losses read off the relaxation variables.
fn relaxed_voltages<T: Real>(g: &GridSpec<T>, x: &[T], ne: usize, slot: &[Option<usize>]) -> VoltageSolution<T> {
    let nodes = g.nodes();
    let nk = slot.iter().flatten().count();
    let mut w_diag = vec![g.w00(); nodes + 1];
    let mut w_edge = vec![g.w00(); nodes + 1];
    for &k in g.bfs_order().iter().filter(|&&k| k != 0) {
        match slot[k] {
            Some(n) => {
                w_diag[k] = x[ne + n];
                w_edge[k] = x[ne + nk + n];
            }
            None => {
                w_diag[k] = w_diag[g.parent(k)];
                w_edge[k] = w_diag[k];
            }
        }
    }
    let mut loss_p = vec![T::zero(); nodes + 1];
    let mut loss_q = vec![T::zero(); nodes + 1];
    for k in 1..=nodes {
        let p = g.parent(k);
        let (r, xk) = (g.r(k), g.x(k));
        let l = (w_diag[p] - T::lit(2.0) * w_edge[k] + w_diag[k]) / (r * r + xk * xk);
        loss_p[k] = l * r;
        loss_q[k] = l * xk;
    }
    VoltageSolution { model: FlowModel::Ac, w_diag, w_edge, loss_p, loss_q, residual: T::zero() }
}

/// Strictly interior point for the inequality constraints.
fn starting_point<T: Real>(
    g: &GridSpec<T>,
    entries: &[Entry<T>],
    kept: &[usize],
    prob: &BarrierProblem<T>,
    model: FlowModel,
    voltage_constrained: bool,
) -> Result<Vec<T>> {
    let nodes = g.nodes();
    let half = T::lit(0.5);
    let mut per_node = vec![0usize; nodes + 1];
    for en in entries {
        per_node[en.node] += 1;
    }
    let base: Vec<T> = entries
        .iter()
        .map(|en| {
            let share = g.m(en.node) / T::lit(per_node[en.node] as f64);
            en.cap.min(share).min(T::one()) * half
        })
        .collect();

    let mut w = Vec::new();
    if model == FlowModel::Ac {
        let max_depth = (1..=nodes).map(|k| g.depth(k)).max().unwrap_or(1).max(1);
        let delta = if voltage_constrained {
            (1..=nodes)
                .map(|k| (g.w00() - g.v_lo(k)) / T::lit(g.depth(k) as f64))
                .fold(T::infinity(), |a, b| a.min(b))
                * half
        } else {
            g.w00() * half / T::lit(max_depth as f64)
        };
        let mut diag = vec![g.w00(); nodes + 1];
        for k in 1..=nodes {
            diag[k] = g.w00() - delta * T::lit(g.depth(k) as f64);
        }
        let theta = T::lit(0.99);
        w.extend(kept.iter().map(|&k| diag[k]));
        w.extend(kept.iter().map(|&k| theta * (diag[g.parent(k)] * diag[k]).sqrt()));
    }

    let mut beta = T::one();
    for _ in 0..200 {
        let mut x: Vec<T> = base.iter().map(|&b| b * beta).collect();
        x.extend_from_slice(&w);
        if prob.linear.iter().all(|l| {
            l.rhs - l.coefs.iter().fold(T::zero(), |acc, &(i, c)| acc + c * x[i]) > T::zero()
        }) {
            return Ok(x);
        }
        beta *= half;
    }
    Err(Error::EmptyFeasible("no strictly feasible starting point found".into()))
}

/// `(z_ij / Σz) u_ij(Λ_ij / z_ij)` over the free entries.
struct UtilityObjective<'a, T> {
    u: &'a UtilitySpec<T>,
    entries: Vec<(usize, usize, T)>,
    total: T,
}

impl<T: Real> SeparableObjective<T> for UtilityObjective<'_, T> {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn eval(&self, e: usize, x: T) -> Option<(T, T, T)> {
        if !(x > T::zero()) {
            return None;
        }
        let (i, j, z) = self.entries[e];
        let (v, d1, d2) = self.u.eval(i, j, x / z);
        Some((z * v / self.total, d1 / self.total, d2 / (self.total * z)))
    }
}

fn check_counts<T: Real>(g: &GridSpec<T>, z: &NodeTypeTable<T>, u: &UtilitySpec<T>) -> Result<()> {
    z.check_shape(g)?;
    u.w.check_shape(g)?;
    if z.as_slice().iter().any(|&v| !(v >= T::zero() && v.is_finite_value())) {
        return Err(Error::domain("counts must be finite and nonnegative"));
    }
    Ok(())
}

fn allocate<T: Real>(
    g: &GridSpec<T>,
    z: &NodeTypeTable<T>,
    u: &UtilitySpec<T>,
    model: FlowModel,
    voltage_constrained: bool,
) -> Result<AllocationResult<T>> {
    check_counts(g, z, u)?;
    let zero = T::lit(ZERO_COUNT);
    let free: Vec<(usize, usize, T)> = z.indices().filter(|&(i, j)| z.get(i, j) >= zero).map(|(i, j)| (i, j, z.get(i, j))).collect();
    let entries: Vec<Entry<T>> =
        free.iter().map(|&(i, j, zij)| Entry { node: i, ev_type: j, cap: zij * g.c_max(j) }).collect();
    let total = free.iter().fold(T::zero(), |a, e| a + e.2);
    let obj = UtilityObjective { u, entries: free.clone(), total: if total > T::zero() { total } else { T::one() } };
    let sol = solve_program(g, &entries, &obj, model, voltage_constrained)?;

    let mut p = NodeTypeTable::zeros(g.nodes(), g.types());
    let mut objective = T::zero();
    for &(i, j, zij) in &free {
        let pij = sol.lambda.get(i, j) / zij;
        p.set(i, j, pij);
        objective += zij * u.eval(i, j, pij).0;
    }
    Ok(AllocationResult {
        model,
        voltage_constrained,
        p,
        lambda: sol.lambda,
        voltages: sol.voltages,
        duals: sol.duals,
        objective,
        iterations: sol.iterations,
        kkt_residual: sol.kkt_residual,
    })
}

/// Optimal rates `p(z)` and aggregates `Λ(z)`.
pub fn solve_allocation<T: Real>(
    g: &GridSpec<T>,
    z: &NodeTypeTable<T>,
    u: &UtilitySpec<T>,
    model: FlowModel,
) -> Result<AllocationResult<T>> {
    allocate(g, z, u, model, true)
}

/// Same program without the lower voltage bounds. The AC relaxation still
/// enforces the PSD (solvability) constraints.
pub fn solve_allocation_unconstrained_voltage<T: Real>(
    g: &GridSpec<T>,
    z: &NodeTypeTable<T>,
    u: &UtilitySpec<T>,
    model: FlowModel,
) -> Result<AllocationResult<T>> {
    allocate(g, z, u, model, false)
}

/// `W_pp W_kk - W_pk²` per edge (index = child node, entry 0 unused).
pub fn rank_one_gap<T: Real>(g: &GridSpec<T>, result: &AllocationResult<T>) -> Vec<T> {
    let mut gaps = vec![T::zero(); g.nodes() + 1];
    for (k, gap) in gaps.iter_mut().enumerate().skip(1) {
        *gap = result.voltages.psd_gap(g, k);
    }
    gaps
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneViolation {
    /// Smaller count vector.
    pub y: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub node: usize,
    pub ev_type: usize,
    pub p_y: f64,
    pub p_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub pairs: usize,
    pub violations: Vec<MonotoneViolation>,
}

impl MonotonicityReport {
    pub fn is_monotone(&self) -> bool {
        self.violations.is_empty()
    }

    /// The violation with the largest `p_z - p_y`.
    pub fn witness(&self) -> Option<&MonotoneViolation> {
        self.violations.iter().max_by(|a, b| (a.p_z - a.p_y).total_cmp(&(b.p_z - b.p_y)))
    }
}

/// Monotonicity requires `p(y) >= p(z)` for `y <= z`; returns every entry
/// with `p_ij(y) < p_ij(z) - 1e-6`.
pub fn compare_pair<T: Real>(
    g: &GridSpec<T>,
    u: &UtilitySpec<T>,
    model: FlowModel,
    y: &NodeTypeTable<T>,
    z: &NodeTypeTable<T>,
) -> Result<Vec<MonotoneViolation>> {
    if y.as_slice().iter().zip(z.as_slice()).any(|(a, b)| a > b) {
        return Err(Error::domain("pair is not ordered: need y <= z"));
    }
    let py = solve_allocation(g, y, u, model)?.p;
    let pz = solve_allocation(g, z, u, model)?.p;
    let as_rows = |t: &NodeTypeTable<T>| t.map(|v| v.as_f64()).rows();
    Ok(y.indices()
        .filter(|&(i, j)| y.get(i, j) >= T::lit(ZERO_COUNT))
        .filter(|&(i, j)| py.get(i, j).as_f64() < pz.get(i, j).as_f64() - 1e-6)
        .map(|(i, j)| MonotoneViolation {
            y: as_rows(y),
            z: as_rows(z),
            node: i,
            ev_type: j,
            p_y: py.get(i, j).as_f64(),
            p_z: pz.get(i, j).as_f64(),
        })
        .collect())
}

/// Samples `samples` ordered pairs `y <= z` in the box `[z_lo, z_hi]` and
/// collects every monotonicity violation.
pub fn check_monotone<T: Real>(
    g: &GridSpec<T>,
    u: &UtilitySpec<T>,
    model: FlowModel,
    z_lo: &NodeTypeTable<T>,
    z_hi: &NodeTypeTable<T>,
    samples: usize,
    seed: u64,
) -> Result<MonotonicityReport> {
    z_lo.check_shape(g)?;
    z_hi.check_shape(g)?;
    if z_lo.as_slice().iter().zip(z_hi.as_slice()).any(|(a, b)| !(*a > T::zero() && a <= b)) {
        return Err(Error::domain("need 0 < z_lo <= z_hi"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = Vec::new();
    for _ in 0..samples {
        let mut y = z_lo.clone();
        let mut z = z_lo.clone();
        for (i, j) in z_lo.indices() {
            let (lo, hi) = (z_lo.get(i, j).as_f64(), z_hi.get(i, j).as_f64());
            let zv = lo + (hi - lo) * rng.random::<f64>();
            let yv = lo + (zv - lo) * rng.random::<f64>();
            z.set(i, j, T::lit(zv));
            y.set(i, j, T::lit(yv));
        }
        violations.extend(compare_pair(g, u, model, &y, &z)?);
    }
    Ok(MonotonicityReport { pairs: samples, violations })
}
