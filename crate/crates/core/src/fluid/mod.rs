//! Deterministic fluid model.
//!
//! The admitted fluid of class `(i, j)` is discretized into one cohort per
//! time step, placed at the step midpoint `s_k = t_k + dt/2` and carrying the
//! admitted mass `ΔĒ_ijk - ΔR̄_ijk`. At grid time `t_n` cohort `k < n`
//! contributes `a_k P(D >= t_n - s_k)` to `Q̄_ij` and
//! `a_k P(B >= C_ij(t_n) - C_ij(s_k), D >= t_n - s_k)` to `Z̄_ij`, where
//! `C_ij(t) = ∫_0^t p_ij(Z̄(u)) du`.
//!
//! The `(Q̄, R̄)` part does not depend on `Z̄` and is solved first, node by
//! node. Rejections are set step by step so that `Q̄_i <= K_i` and are split
//! over the types in proportion to the arrival rates; the result is then
//! checked (and if necessary refined) by Picard iteration of
//! `R̄_i = Γ(Φ_i(R̄_i))` with the one-dimensional reflection map `Γ`.
//! The `(Z̄, S̄)` part is integrated forward with a Heun predictor-corrector
//! step for the service counters `C_ij`.

mod bl;

pub use bl::{bl_distance, BinnedMeasure};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::alloc::{solve_allocation, UtilitySpec};
use crate::error::{Error, Result};
use crate::grid::{Capacity, GridSpec, NodeTypeTable};
use crate::law::{ArrivalProcess, ArrivalSpec, JointLaw, JointLawSpec, PerClass};
use crate::power_flow::FlowModel;

/// Survival values below this are treated as zero when summing cohorts.
const NEGLIGIBLE: f64 = 1e-17;

/// Picard residual accepted for the `(Q̄, R̄)` fixed point.
pub const PICARD_TOL: f64 = 1e-8;

/// Returns `(Ψ(φ), Γ(φ))` with `Γ(φ)(t) = sup_{s<=t} (-φ(s))⁺` and
/// `Ψ(φ) = φ + Γ(φ)`.
pub fn reflection_map(phi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut reg = Vec::with_capacity(phi.len());
    let mut run = 0.0f64;
    for &p in phi {
        run = run.max(-p);
        reg.push(run);
    }
    let psi = phi.iter().zip(&reg).map(|(p, r)| p + r).collect();
    (psi, reg)
}

#[derive(Debug, Clone)]
pub struct FluidInput {
    pub grid: GridSpec<f64>,
    pub arrivals: ArrivalSpec,
    pub laws: JointLawSpec,
    pub utility: UtilitySpec<f64>,
    pub model: FlowModel,
    /// Initial `Q̄_ij(0)` as `(d, mass)` atoms.
    pub q0: PerClass<Vec<(f64, f64)>>,
    /// Initial `Z̄_ij(0)` as `(b, d, mass)` atoms.
    pub z0: PerClass<Vec<(f64, f64, f64)>>,
    /// Defaults to `min E[D] / 200`.
    pub dt: Option<f64>,
    pub horizon: f64,
}

impl FluidInput {
    /// Empty initial state.
    pub fn new(
        grid: GridSpec<f64>,
        arrivals: ArrivalSpec,
        laws: JointLawSpec,
        utility: UtilitySpec<f64>,
        model: FlowModel,
        horizon: f64,
    ) -> Self {
        let (n, j) = (grid.nodes(), grid.types());
        FluidInput {
            grid,
            arrivals,
            laws,
            utility,
            model,
            q0: PerClass::broadcast(n, j, Vec::new()),
            z0: PerClass::broadcast(n, j, Vec::new()),
            dt: None,
            horizon,
        }
    }

    pub fn default_dt(&self) -> f64 {
        self.laws.iter().map(|(_, l)| l.mean_d()).fold(f64::INFINITY, f64::min) / 200.0
    }

    fn validate(&self) -> Result<()> {
        let (n, j) = (self.grid.nodes(), self.grid.types());
        for (name, (nn, jj)) in [
            ("arrivals", (self.arrivals.nodes(), self.arrivals.types())),
            ("laws", (self.laws.nodes(), self.laws.types())),
            ("q0", (self.q0.nodes(), self.q0.types())),
            ("z0", (self.z0.nodes(), self.z0.types())),
        ] {
            if (nn, jj) != (n, j) {
                return Err(Error::Dimension(format!("{name} is {nn}x{jj}, grid is {n}x{j}")));
            }
        }
        for (_, a) in self.arrivals.iter() {
            a.validate()?;
            if matches!(a, ArrivalProcess::Schedule { .. }) {
                return Err(Error::config("the fluid model needs rate-based arrivals"));
            }
            if matches!(a, ArrivalProcess::PoissonTimevarying { .. }) {
                warn!("fluid solutions need not be unique for general arrival rates");
            }
        }
        for (_, l) in self.laws.iter() {
            l.validate()?;
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::domain("horizon must be positive and finite"));
        }
        let neg = self.q0.iter().any(|(_, v)| v.iter().any(|a| !(a.1 >= 0.0)))
            || self.z0.iter().any(|(_, v)| v.iter().any(|a| !(a.2 >= 0.0)));
        if neg {
            return Err(Error::domain("initial masses must be nonnegative"));
        }
        for i in 1..=n {
            let total: f64 = (0..j).map(|jj| self.q0.get(i, jj).iter().map(|a| a.1).sum::<f64>()).sum();
            let k = self.grid.capacity(i).as_f64();
            if total > k + 1e-12 {
                return Err(Error::domain(format!("initial fluid at node {i} exceeds K")));
            }
            if (total - k).abs() <= 1e-12 && (0..j).any(|jj| self.q0.get(i, jj).iter().map(|a| a.1).sum::<f64>() <= 0.0) {
                warn!("node {i} starts full with an empty type; the fluid solution may not be unique");
            }
        }
        Ok(())
    }

    fn grid_steps(&self) -> (usize, f64) {
        let dt0 = self.dt.unwrap_or_else(|| self.default_dt());
        let steps = (self.horizon / dt0).ceil().max(1.0) as usize;
        (steps, self.horizon / steps as f64)
    }
}

/// Per-class series of the `(Q̄, R̄)` subsystem on the time grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QClass {
    pub q: Vec<f64>,
    pub e: Vec<f64>,
    pub r: Vec<f64>,
    pub d: Vec<f64>,
    /// `Σ_k a_k f_D(t - s_k)`; atoms of the initial state are not included.
    pub departure_rate: Vec<f64>,
    /// Admitted mass of the cohort of step `k`.
    pub admitted: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QSolution {
    pub dt: f64,
    pub times: Vec<f64>,
    pub classes: PerClass<QClass>,
    /// `R̄_i` per node (index 0 unused).
    pub r_node: Vec<Vec<f64>>,
    pub q_node: Vec<Vec<f64>>,
    pub picard_iterations: Vec<usize>,
    pub picard_residual: Vec<f64>,
    /// `Σ ΔR̄_i 1{Q̄_i < K_i - 1e-6}` per node.
    pub complementarity: Vec<f64>,
}

/// `S((m - 1/2) dt)` for `m = 0..=steps` (entry 0 is 1).
fn lag_table(steps: usize, dt: f64, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut v = Vec::with_capacity(steps + 1);
    v.push(1.0);
    for m in 1..=steps {
        v.push(f((m as f64 - 0.5) * dt));
    }
    v
}

/// Number of lags after which the table stays negligible.
fn active_lags(table: &[f64]) -> usize {
    table.iter().rposition(|&v| v >= NEGLIGIBLE).map_or(1, |p| p + 1)
}

/// `Σ_{k<n} a_k table[n - k]` restricted to the non-negligible lags.
fn cohort_sum(a: &[f64], table: &[f64], n: usize, lags: usize) -> f64 {
    let lo = n.saturating_sub(lags - 1);
    let mut acc = 0.0;
    for k in lo..n.min(a.len()) {
        acc += a[k] * table[n - k];
    }
    acc
}

pub fn solve_q_subsystem(inp: &FluidInput) -> Result<QSolution> {
    inp.validate()?;
    let g = &inp.grid;
    let (nodes, types) = (g.nodes(), g.types());
    let (steps, dt) = inp.grid_steps();
    let times: Vec<f64> = (0..=steps).map(|n| n as f64 * dt).collect();

    for ((i, j), law) in inp.laws.iter() {
        if !law.has_deadline_density() {
            return Err(Error::NoDensity(format!("class ({i}, {j})")));
        }
    }

    let mut classes = PerClass::from_fn(nodes, types, |_, _| QClass {
        q: vec![0.0; steps + 1],
        e: vec![0.0; steps + 1],
        r: vec![0.0; steps + 1],
        d: vec![0.0; steps + 1],
        departure_rate: vec![0.0; steps + 1],
        admitted: vec![0.0; steps],
    });
    let mut r_node = vec![Vec::new(); nodes + 1];
    let mut q_node = vec![Vec::new(); nodes + 1];
    let mut picard_iterations = vec![0; nodes + 1];
    let mut picard_residual = vec![0.0; nodes + 1];
    let mut complementarity = vec![0.0; nodes + 1];

    for i in 1..=nodes {
        let surv: Vec<Vec<f64>> = (0..types).map(|j| lag_table(steps, dt, |x| inp.laws.get(i, j).survival_d(x))).collect();
        let lags: Vec<usize> = surv.iter().map(|s| active_lags(s)).collect();
        // cumulative arrivals and per-step increments
        let e: Vec<Vec<f64>> =
            (0..types).map(|j| times.iter().map(|&t| inp.arrivals.get(i, j).cumulative(t)).collect()).collect();
        let de: Vec<Vec<f64>> = e.iter().map(|ej| ej.windows(2).map(|w| w[1] - w[0]).collect()).collect();
        let atoms: Vec<Vec<f64>> = (0..types)
            .map(|j| times.iter().map(|&t| inp.q0.get(i, j).iter().filter(|a| a.0 > t).map(|a| a.1).fold(0.0, |s, m| s + m)).collect())
            .collect();
        let cap = g.capacity(i);

        // step-by-step regulator
        let mut dr = vec![vec![0.0; steps]; types];
        let mut a = vec![vec![0.0; steps]; types];
        for n in 0..steps {
            let old: Vec<f64> = (0..types).map(|j| atoms[j][n + 1] + cohort_sum(&a[j], &surv[j], n + 1, lags[j])).collect();
            let de_n: f64 = (0..types).map(|j| de[j][n]).sum();
            let prov: f64 = (0..types).map(|j| old[j] + de[j][n] * surv[j][1]).sum();
            let mut push = 0.0;
            if let Capacity::Finite(k) = cap {
                let k = k as f64;
                if prov > k && de_n > 0.0 {
                    let denom: f64 = (0..types).map(|j| de[j][n] / de_n * surv[j][1]).sum();
                    push = ((prov - k) / denom).min(de_n);
                }
            }
            for j in 0..types {
                let share = if de_n > 0.0 { de[j][n] / de_n } else { 0.0 };
                dr[j][n] = push * share;
                a[j][n] = (de[j][n] - dr[j][n]).max(0.0);
            }
        }

        // Picard refinement of R̄_i = Γ(Φ_i(R̄_i))
        let k = cap.as_f64();
        let mut iterations = 0;
        let mut residual = 0.0;
        if k.is_finite() {
            loop {
                let r_cur = cumulative(&sum_rows(&dr));
                let phi: Vec<f64> = (0..=steps)
                    .map(|n| {
                        let x: f64 = (0..types)
                            .map(|j| atoms[j][n] + cohort_sum(&de[j], &surv[j], n, lags[j]))
                            .sum();
                        let gone: f64 = (0..types)
                            .map(|j| {
                                let held = cohort_sum(&dr[j], &surv[j], n, lags[j]);
                                dr[j][..n.min(steps)].iter().sum::<f64>() - held
                            })
                            .sum();
                        k - x - gone
                    })
                    .collect();
                let (_, r_new) = reflection_map(&phi);
                residual = r_new.iter().zip(&r_cur).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
                iterations += 1;
                if residual <= PICARD_TOL * r_cur[steps].max(1.0) || iterations >= 200 {
                    break;
                }
                // distribute the new increments over the types
                for n in 0..steps {
                    let de_n: f64 = (0..types).map(|j| de[j][n]).sum();
                    let inc = (r_new[n + 1] - r_new[n]).max(0.0).min(de_n);
                    for j in 0..types {
                        let share = if de_n > 0.0 { de[j][n] / de_n } else { 0.0 };
                        dr[j][n] = inc * share;
                        a[j][n] = (de[j][n] - dr[j][n]).max(0.0);
                    }
                }
            }
            if residual > PICARD_TOL * cumulative(&sum_rows(&dr))[steps].max(1.0) {
                return Err(Error::NotConverged {
                    iterations,
                    residual,
                    context: format!("rejection fixed point at node {i}"),
                });
            }
        }

        let mut qn = vec![0.0; steps + 1];
        for j in 0..types {
            let dens = lag_table(steps, dt, |x| inp.laws.get(i, j).deadline_density(x).unwrap_or(0.0));
            let dens_lags = active_lags(&dens).max(lags[j]);
            let q0: f64 = inp.q0.get(i, j).iter().map(|a| a.1).fold(0.0, |s, m| s + m);
            let c = classes.get_mut(i, j);
            c.e.clone_from(&e[j]);
            c.r = cumulative(&dr[j]);
            c.admitted.clone_from(&a[j]);
            for n in 0..=steps {
                c.q[n] = atoms[j][n] + cohort_sum(&a[j], &surv[j], n, lags[j]);
                c.d[n] = q0 + c.e[n] - c.r[n] - c.q[n];
                c.departure_rate[n] = cohort_sum(&a[j], &dens, n, dens_lags);
                qn[n] += c.q[n];
            }
        }
        let rn = cumulative(&sum_rows(&dr));
        complementarity[i] = (0..steps).filter(|&n| qn[n + 1] < k - 1e-6).map(|n| rn[n + 1] - rn[n]).sum();
        r_node[i] = rn;
        q_node[i] = qn;
        picard_iterations[i] = iterations;
        picard_residual[i] = residual;
    }

    Ok(QSolution { dt, times, classes, r_node, q_node, picard_iterations, picard_residual, complementarity })
}

fn sum_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows.first().map_or(0, Vec::len)];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    out
}

/// Prefix sums with a leading zero.
fn cumulative(inc: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(inc.len() + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for v in inc {
        acc += v;
        out.push(acc);
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZClass {
    pub z: Vec<f64>,
    /// `C_ij(t_n) = ∫_0^{t_n} p_ij`.
    pub service: Vec<f64>,
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZSolution {
    pub classes: PerClass<ZClass>,
    pub allocation_solves: usize,
}

fn z_value(
    law: &JointLaw,
    atoms: &[(f64, f64, f64)],
    admitted: &[f64],
    service: &[f64],
    c_now: f64,
    n: usize,
    dt: f64,
    lags: usize,
) -> f64 {
    let t = n as f64 * dt;
    let mut acc: f64 = atoms.iter().filter(|a| a.0 > c_now && a.1 > t).map(|a| a.2).fold(0.0, |s, m| s + m);
    let lo = n.saturating_sub(lags - 1);
    for k in lo..n {
        let c_mid = 0.5 * (service[k] + service[k + 1]);
        let age = (n - k) as f64 * dt - 0.5 * dt;
        acc += admitted[k] * law.survival(c_now - c_mid, age);
    }
    acc
}

pub fn solve_z_subsystem(inp: &FluidInput, q: &QSolution) -> Result<ZSolution> {
    let g = &inp.grid;
    let (nodes, types) = (g.nodes(), g.types());
    let steps = q.times.len() - 1;
    let dt = q.dt;
    let lags: PerClass<usize> = inp.laws.map(|l| active_lags(&lag_table(steps, dt, |x| l.survival_d(x))));
    let mut classes = PerClass::from_fn(nodes, types, |i, j| {
        let z0: f64 = inp.z0.get(i, j).iter().filter(|a| a.0 > 0.0 && a.1 > 0.0).map(|a| a.2).fold(0.0, |s, m| s + m);
        let mut z = vec![0.0; steps + 1];
        z[0] = z0;
        ZClass { z, service: vec![0.0; steps + 1], p: vec![0.0; steps + 1] }
    });
    let mut solves = 0usize;
    let rates = |z: &NodeTypeTable<f64>, t: f64, solves: &mut usize| -> Result<NodeTypeTable<f64>> {
        *solves += 1;
        solve_allocation(g, z, &inp.utility, inp.model)
            .map(|r| r.p)
            .map_err(|e| Error::SolverAt { time: t, source: Box::new(e) })
    };
    let snapshot = |classes: &PerClass<ZClass>, n: usize| {
        let mut z = NodeTypeTable::zeros(nodes, types);
        for ((i, j), c) in classes.iter() {
            z.set(i, j, c.z[n].max(0.0));
        }
        z
    };

    let mut p_now = rates(&snapshot(&classes, 0), 0.0, &mut solves)?;
    for n in 0..steps {
        for ((i, j), c) in classes.iter_mut() {
            c.p[n] = p_now.get(i, j);
        }
        // predictor
        for ((i, j), c) in classes.iter_mut() {
            c.service[n + 1] = c.service[n] + dt * p_now.get(i, j);
            c.z[n + 1] = z_value(
                inp.laws.get(i, j),
                inp.z0.get(i, j),
                &q.classes.get(i, j).admitted,
                &c.service,
                c.service[n + 1],
                n + 1,
                dt,
                *lags.get(i, j),
            );
        }
        let p_pred = rates(&snapshot(&classes, n + 1), q.times[n + 1], &mut solves)?;
        // corrector
        for ((i, j), c) in classes.iter_mut() {
            c.service[n + 1] = c.service[n] + 0.5 * dt * (p_now.get(i, j) + p_pred.get(i, j));
            c.z[n + 1] = z_value(
                inp.laws.get(i, j),
                inp.z0.get(i, j),
                &q.classes.get(i, j).admitted,
                &c.service,
                c.service[n + 1],
                n + 1,
                dt,
                *lags.get(i, j),
            );
        }
        p_now = rates(&snapshot(&classes, n + 1), q.times[n + 1], &mut solves)?;
    }
    for ((i, j), c) in classes.iter_mut() {
        c.p[steps] = p_now.get(i, j);
    }
    Ok(ZSolution { classes, allocation_solves: solves })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FluidTrajectory {
    pub q: QSolution,
    pub z: ZSolution,
}

pub fn solve_fluid(inp: &FluidInput) -> Result<FluidTrajectory> {
    let q = solve_q_subsystem(inp)?;
    let z = solve_z_subsystem(inp, &q)?;
    Ok(FluidTrajectory { q, z })
}

impl QSolution {
    /// Grid index closest to `t`.
    pub fn index_of(&self, t: f64) -> usize {
        ((t / self.dt).round().max(0.0) as usize).min(self.times.len() - 1)
    }

    /// `Q̄_ij(t)([y, ∞))` at grid index `n`.
    pub fn q_tail(&self, inp: &FluidInput, i: usize, j: usize, n: usize, y: f64) -> f64 {
        let t = self.times[n];
        let law = inp.laws.get(i, j);
        let atoms: f64 = inp.q0.get(i, j).iter().filter(|a| a.0 - t > 0.0 && a.0 - t >= y).map(|a| a.1).fold(0.0, |s, m| s + m);
        let a = &self.classes.get(i, j).admitted;
        let mut acc = atoms;
        for (k, ak) in a.iter().enumerate().take(n) {
            let age = t - (k as f64 + 0.5) * self.dt;
            let s = law.survival_d(y.max(0.0) + age);
            if s < NEGLIGIBLE && y <= 0.0 {
                continue;
            }
            acc += ak * s;
        }
        acc
    }
}

impl FluidTrajectory {
    /// Largest `|Q̄_ij(t) + D̄ - Q̄_ij(0) - Ē + R̄|` over the grid.
    pub fn balance_residual(&self, inp: &FluidInput) -> f64 {
        let mut worst = 0.0f64;
        for ((i, j), c) in self.q.classes.iter() {
            let q0: f64 = inp.q0.get(i, j).iter().map(|a| a.1).fold(0.0, |s, m| s + m);
            for n in 0..c.q.len() {
                worst = worst.max((c.q[n] - (q0 + c.e[n] - c.r[n] - c.d[n])).abs());
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests;
