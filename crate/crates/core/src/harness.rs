//! Reproduction suites and the glue between run configs and the solvers.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::alloc::{rank_one_gap, solve_allocation, solve_allocation_unconstrained_voltage, UtilitySpec};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fluid::{bl_distance, solve_q_subsystem, BinnedMeasure, FluidInput, FluidTrajectory, QSolution};
use crate::grid::{GridSpec, NodeTypeTable};
use crate::law::PerClass;
use crate::power_flow::FlowModel;
use crate::sim::{scaled_ensemble, SimInput};

/// Process exit codes of the command-line tool.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 1;
    pub const SOLVER: i32 = 2;
    pub const TABLE_MISMATCH: i32 = 3;
    pub const NOT_CONVERGING: i32 = 4;
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Domain(_) | Error::Dimension(_) | Error::InvalidGrid { .. } | Error::Io(_) => {
            exit::CONFIG
        }
        _ => exit::SOLVER,
    }
}

/// Published values for the three-node counterexample tree. Rows are the
/// count vectors `z = (1, 1, 1)` and `y = (1, 2, 1)`.
pub const PAPER_TABLES: [(u8, &str, [[f64; 3]; 2]); 5] = [
    (1, "p, AC", [[0.3050, 0.2008, 0.2008], [0.2297, 0.1148, 0.2177]]),
    (2, "W, AC", [[0.8507, 0.8100, 0.8100], [0.8566, 0.8100, 0.8124]]),
    (3, "p, AC without voltage limits", [[0.9799, 0.5708, 0.5708], [0.7668, 0.3643, 0.5156]]),
    (4, "W, AC without voltage limits", [[0.3457, 0.2164, 0.2164], [0.3763, 0.2047, 0.2631]]),
    (5, "p, linearized", [[0.3167, 0.2111, 0.2111], [0.2375, 0.1188, 0.2375]]),
];

pub const TABLE_COUNTS: [[f64; 3]; 2] = [[1.0, 1.0, 1.0], [1.0, 2.0, 1.0]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub table: u8,
    /// `"z"` or `"y"`.
    pub row: String,
    pub node: usize,
    pub expected: f64,
    pub got: f64,
    pub delta: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableReport {
    pub tol: f64,
    pub cells: Vec<TableCell>,
    /// Largest `W_pp W_kk - W_pk²` over the AC solutions.
    pub max_rank_gap: f64,
}

impl TableReport {
    pub fn passed(&self) -> usize {
        self.cells.iter().filter(|c| c.pass).count()
    }

    pub fn all_pass(&self) -> bool {
        self.passed() == self.cells.len()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (t, title, _) in PAPER_TABLES {
            let cells: Vec<&TableCell> = self.cells.iter().filter(|c| c.table == t).collect();
            if cells.is_empty() {
                continue;
            }
            s.push_str(&format!("Table {t} ({title})\n"));
            for row in ["z", "y"] {
                s.push_str(&format!("  {row}:"));
                for c in cells.iter().filter(|c| c.row == row) {
                    let mark = if c.pass { "ok" } else { "MISMATCH" };
                    s.push_str(&format!("  {:.4} (published {:.4}, {mark} {:+.1e})", c.got, c.expected, c.got - c.expected));
                }
                s.push('\n');
            }
        }
        s.push_str(&format!("{}/{} cells within {:.0e}\n", self.passed(), self.cells.len(), self.tol));
        s
    }
}

/// Solves the table scenarios on `g` (normally the counterexample tree) and
/// compares them with [`PAPER_TABLES`].
pub fn verify_tables(g: &GridSpec<f64>, models: &[FlowModel], tol: f64) -> Result<TableReport> {
    if g.nodes() != 3 || g.types() != 1 {
        return Err(Error::config("the table scenarios need a grid with 3 load nodes and 1 type"));
    }
    let u = UtilitySpec::log(g);
    let mut cells = Vec::new();
    let mut max_rank_gap = 0.0f64;
    let mut record = |table: u8, row: usize, got: [f64; 3]| {
        let expected = PAPER_TABLES[table as usize - 1].2[row];
        for k in 0..3 {
            let delta = (got[k] - expected[k]).abs();
            cells.push(TableCell {
                table,
                row: ["z", "y"][row].into(),
                node: k + 1,
                expected: expected[k],
                got: got[k],
                delta,
                pass: delta <= tol,
            });
        }
    };
    for (row, counts) in TABLE_COUNTS.iter().enumerate() {
        let z = NodeTypeTable::from_node_values(counts);
        let p3 = |t: &NodeTypeTable<f64>| [t.get(1, 0), t.get(2, 0), t.get(3, 0)];
        if models.contains(&FlowModel::Ac) {
            let a = solve_allocation(g, &z, &u, FlowModel::Ac)?;
            let b = solve_allocation_unconstrained_voltage(g, &z, &u, FlowModel::Ac)?;
            for r in [&a, &b] {
                max_rank_gap = rank_one_gap(g, r).iter().fold(max_rank_gap, |m, v| m.max(*v));
            }
            record(1, row, p3(&a.p));
            record(2, row, [a.voltages.w_diag[1], a.voltages.w_diag[2], a.voltages.w_diag[3]]);
            record(3, row, p3(&b.p));
            record(4, row, [b.voltages.w_diag[1], b.voltages.w_diag[2], b.voltages.w_diag[3]]);
        }
        if models.contains(&FlowModel::Linearized) {
            let a = solve_allocation(g, &z, &u, FlowModel::Linearized)?;
            record(5, row, p3(&a.p));
        }
    }
    cells.sort_by_key(|c| (c.table, c.row != "z", c.node));
    Ok(TableReport { tol, cells, max_rank_gap })
}

/// Simulation input built from the config (snapshots every `snap_every`).
pub fn sim_input(cfg: &RunConfig, g: &GridSpec<f64>, horizon: f64, snap_every: f64) -> Result<SimInput> {
    if !(snap_every > 0.0) {
        return Err(Error::config("`snap_every` must be positive"));
    }
    let steps = (horizon / snap_every + 1e-9).floor() as usize;
    Ok(SimInput {
        grid: g.clone(),
        arrivals: cfg.arrivals(g)?,
        laws: cfg.laws(g)?,
        utility: cfg.utility(g)?,
        model: cfg.model,
        horizon,
        snap_times: (0..=steps).map(|k| (k as f64 * snap_every).min(horizon)).collect(),
        initial: Vec::new(),
        keep_atoms: cfg.simulate.keep_atoms,
        record_events: cfg.simulate.record_events,
    })
}

/// Fluid input built from the config, started empty.
pub fn fluid_input(cfg: &RunConfig, g: &GridSpec<f64>) -> Result<FluidInput> {
    let laws = cfg.laws(g)?;
    let horizon = cfg.fluid.horizon.unwrap_or_else(|| 20.0 * laws.iter().map(|(_, l)| l.mean_d()).fold(0.0, f64::max));
    let mut inp = FluidInput::new(g.clone(), cfg.arrivals(g)?, laws, cfg.utility(g)?, cfg.model, horizon);
    inp.dt = cfg.fluid.dt;
    Ok(inp)
}

/// One row of the fluid trajectory CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluidRow {
    pub t: f64,
    pub i: usize,
    /// 1-based.
    pub j: usize,
    #[serde(rename = "Q")]
    pub q: f64,
    #[serde(rename = "Z")]
    pub z: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "D")]
    pub d: f64,
    pub p: f64,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub fn write_fluid_csv<W: Write>(w: W, traj: &FluidTrajectory) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for (n, &t) in traj.q.times.iter().enumerate() {
        for ((i, j), c) in traj.q.classes.iter() {
            let z = traj.z.classes.get(i, j);
            wr.serialize(FluidRow { t, i, j: j + 1, q: c.q[n], z: z.z[n], r: c.r[n], d: c.d[n], p: z.p[n] })
                .map_err(csv_err)?;
        }
    }
    wr.flush()?;
    Ok(())
}

pub fn read_fluid_csv<R: Read>(r: R) -> Result<Vec<FluidRow>> {
    csv::Reader::from_reader(r).deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// `max |D̄_ij - (1/E[D_ij]) ∫ Q̄_ij|` per class (trapezoid rule). This is
/// zero in the limit `dt → 0` when parking times are exponential.
pub fn markov_identity_gap(inp: &FluidInput, q: &QSolution) -> PerClass<f64> {
    PerClass::from_fn(inp.grid.nodes(), inp.grid.types(), |i, j| {
        let c = q.classes.get(i, j);
        let ed = inp.laws.get(i, j).mean_d();
        let mut acc = 0.0;
        let mut worst = c.d[0].abs();
        for n in 1..c.q.len() {
            acc += 0.5 * q.dt * (c.q[n - 1] + c.q[n]);
            worst = worst.max((c.d[n] - acc / ed).abs());
        }
        worst
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSummary {
    pub n: u64,
    /// Sup over snapshot times and classes, one entry per replication.
    pub distances: Vec<f64>,
    pub median: f64,
    /// Order-statistic confidence interval for the median (about 95 %).
    pub median_ci: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub n_from: u64,
    pub n_to: u64,
    /// Replications where the distance at `n_to` is smaller.
    pub decreases: u64,
    pub replications: u64,
    /// One-sided `P(X >= decreases)` for `X ~ Bin(replications, 1/2)`.
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergeReport {
    /// The distance is bounded-Lipschitz on a binned grid, used in place of
    /// the Prokhorov metric.
    pub metric: String,
    pub bin_width: f64,
    pub scales: Vec<ScaleSummary>,
    pub tests: Vec<SignTest>,
    pub alpha: f64,
    /// `None` when only one scale was run.
    pub decreasing: Option<bool>,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len();
    if m == 0 {
        return f64::NAN;
    }
    if m % 2 == 1 {
        s[m / 2]
    } else {
        0.5 * (s[m / 2 - 1] + s[m / 2])
    }
}

fn median_ci(v: &[f64]) -> (f64, f64) {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() as u64;
    if m == 0 {
        return (f64::NAN, f64::NAN);
    }
    let b = Binomial::new(0.5, m).expect("valid binomial");
    // [X_(d), X_(m-d+1)] with the largest d such that P(X <= d - 1) <= 0.025
    let mut d = 0u64;
    while d < m / 2 && b.cdf(d) <= 0.025 {
        d += 1;
    }
    let (lo, hi) = if d == 0 { (0, s.len() - 1) } else { ((d - 1) as usize, (m - d) as usize) };
    (s[lo], s[hi])
}

/// One-sided sign test p-value.
pub fn sign_test_p(decreases: u64, replications: u64) -> f64 {
    if decreases == 0 || replications == 0 {
        return 1.0;
    }
    let b = Binomial::new(0.5, replications).expect("valid binomial");
    b.sf(decreases - 1)
}

/// Distance between the scaled simulations and the fluid model, per scale.
pub fn converge(
    base: &SimInput,
    scales: &[u64],
    replications: u64,
    seed: u64,
    bin_width: Option<f64>,
    alpha: f64,
) -> Result<ConvergeReport> {
    if scales.is_empty() || replications == 0 {
        return Err(Error::config("need at least one scale and one replication"));
    }
    let mut base = base.clone();
    base.keep_atoms = true;
    base.record_events = false;
    let g = &base.grid;
    let (nodes, types) = (g.nodes(), g.types());
    let min_d = base.laws.iter().map(|(_, l)| l.mean_d()).fold(f64::INFINITY, f64::min);
    let max_d = base.laws.iter().map(|(_, l)| l.mean_d()).fold(0.0, f64::max);

    let mut fin = FluidInput::new(
        g.clone(),
        base.arrivals.clone(),
        base.laws.clone(),
        base.utility.clone(),
        base.model,
        base.horizon,
    );
    // align the fluid grid with the snapshot times where possible
    let dt0 = fin.default_dt();
    fin.dt = Some(dt0);
    let fluid = solve_q_subsystem(&fin)?;

    // bin width with 2/h integral
    let h0 = bin_width.unwrap_or(min_d / 20.0);
    let h = 2.0 / (2.0 / h0).ceil();
    let bins = ((20.0 * max_d + base.horizon) / h).ceil() as usize + 1;

    let fluid_bins: Vec<Vec<BinnedMeasure>> = base
        .snap_times
        .iter()
        .map(|&t| {
            let n = fluid.index_of(t);
            (1..=nodes)
                .flat_map(|i| (0..types).map(move |j| (i, j)))
                .map(|(i, j)| BinnedMeasure::from_tail(h, bins, |y| fluid.q_tail(&fin, i, j, n, y)))
                .collect()
        })
        .collect();

    let mut out = Vec::new();
    for &n in scales {
        let runs = scaled_ensemble(&base, n, replications, seed)?;
        let mass = 1.0 / n as f64;
        let distances: Vec<f64> = runs
            .iter()
            .map(|run| {
                run.snapshots
                    .iter()
                    .zip(&fluid_bins)
                    .map(|(snap, fb)| {
                        snap.d_atoms
                            .iter()
                            .zip(fb)
                            .map(|(atoms, f)| {
                                let sim = BinnedMeasure::from_atoms(h, bins, atoms.iter().map(|&d| (d, mass)));
                                bl_distance(&sim, f)
                            })
                            .fold(0.0, f64::max)
                    })
                    .fold(0.0, f64::max)
            })
            .collect();
        out.push(ScaleSummary { n, median: median(&distances), median_ci: median_ci(&distances), distances });
    }

    let tests: Vec<SignTest> = out
        .windows(2)
        .map(|w| {
            let decreases = w[0].distances.iter().zip(&w[1].distances).filter(|(a, b)| b < a).count() as u64;
            SignTest {
                n_from: w[0].n,
                n_to: w[1].n,
                decreases,
                replications,
                p_value: sign_test_p(decreases, replications),
            }
        })
        .collect();
    let decreasing = if tests.is_empty() {
        None
    } else {
        // an empty system has nothing left to decrease
        Some(tests.iter().zip(out.windows(2)).all(|(t, w)| {
            t.p_value < alpha || w.iter().all(|s| s.distances.iter().all(|&d| d == 0.0))
        }))
    };
    Ok(ConvergeReport {
        metric: "bounded-Lipschitz (Prokhorov surrogate) on binned residual parking times".into(),
        bin_width: h,
        scales: out,
        tests,
        alpha,
        decreasing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_threshold() {
        // 15 of 20 is the smallest count below 5 %
        assert!(sign_test_p(15, 20) < 0.05);
        assert!(sign_test_p(14, 20) > 0.05);
        assert!((sign_test_p(20, 20) - 0.5f64.powi(20)).abs() < 1e-18);
        assert_eq!(sign_test_p(0, 20), 1.0);
    }

    #[test]
    fn median_and_interval() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(median(&v), 10.5);
        let (lo, hi) = median_ci(&v);
        assert!(lo < 10.5 && hi > 10.5 && lo >= 1.0 && hi <= 20.0);
    }
}
