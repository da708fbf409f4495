use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use gridflow::alloc::{solve_allocation, solve_allocation_unconstrained_voltage};
use gridflow::config::RunConfig;
use gridflow::error::{Error, Result};
use gridflow::fluid::solve_fluid;
use gridflow::grid::NodeTypeTable;
use gridflow::harness::{self, exit};
use gridflow::invariant::{acopf_invariant, fixed_point_z, FixedPointOptions};
use gridflow::sim::{simulate, write_events_ndjson, write_snapshots_csv};

#[derive(Parser)]
#[command(name = "gridflow", version, about = "EV charging on radial distribution grids")]
struct Cli {
    /// Run configuration (TOML or JSON).
    #[arg(long, global = true, env = "GRIDFLOW_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the seed of the config.
    #[arg(long, global = true, env = "GRIDFLOW_SEED")]
    seed: Option<u64>,
    /// Worker threads for replications.
    #[arg(long, global = true, env = "GRIDFLOW_JOBS")]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "GRIDFLOW_OUT")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one allocation for the counts in `[allocate]`.
    Allocate,
    /// Run the event simulation.
    Simulate,
    /// Solve the fluid model.
    Fluid,
    /// Compute the invariant point by both routes.
    Invariant,
    /// Compare scaled simulations with the fluid model.
    Converge,
    /// Reproduce the counterexample tables.
    VerifyTables,
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(f, v).map_err(|e| Error::Io(e.into()))
}

fn table_rows(t: &NodeTypeTable<f64>) -> String {
    (1..=t.nodes()).map(|i| format!("  node {i}: {:?}\n", t.row(i))).collect()
}

fn run(cli: &Cli) -> Result<i32> {
    let path = cli.config.as_ref().ok_or_else(|| Error::config("--config is required"))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("gridflow-out"));
    fs::create_dir_all(&out)?;
    let g = cfg.grid()?;

    match cli.command {
        Command::Allocate => {
            let rows = cfg.allocate.z.as_ref().ok_or_else(|| Error::config("`allocate.z` is required"))?;
            let z = NodeTypeTable::from_rows(rows)?;
            z.check_shape(&g)?;
            let u = cfg.utility(&g)?;
            let res = if cfg.allocate.voltage_constrained {
                solve_allocation(&g, &z, &u, cfg.model)?
            } else {
                solve_allocation_unconstrained_voltage(&g, &z, &u, cfg.model)?
            };
            print!("p per vehicle\n{}", table_rows(&res.p));
            println!("W {:?}", &res.voltages.w_diag[1..]);
            println!("KKT residual {:.2e}", res.kkt_residual);
            write_json(&out.join("allocation.json"), &res)?;
        }
        Command::Simulate => {
            let s = cfg.simulate.clone();
            let base = harness::sim_input(&cfg, &g, s.horizon, s.snap_every)?.scaled(s.n);
            for r in 0..s.replications {
                let res = simulate(&base, cfg.seed, r)?;
                let f = BufWriter::new(File::create(out.join(format!("snapshots_r{r}.csv")))?);
                write_snapshots_csv(f, &res.snapshots)?;
                if s.record_events {
                    let f = BufWriter::new(File::create(out.join(format!("events_r{r}.ndjson")))?);
                    write_events_ndjson(f, &res.events)?;
                }
                if res.bad_draws > 0 {
                    warn!("replication {r}: {} draws outside the support were skipped", res.bad_draws);
                }
                info!("replication {r}: {} allocation solves", res.allocation_solves);
            }
            println!("wrote {} replication(s) to {}", s.replications, out.display());
        }
        Command::Fluid => {
            let inp = harness::fluid_input(&cfg, &g)?;
            let traj = solve_fluid(&inp)?;
            write_fluid_csv(&out, &traj)?;
            let gap = harness::markov_identity_gap(&inp, &traj.q);
            #[derive(Serialize)]
            struct Summary {
                dt: f64,
                steps: usize,
                picard_residual: Vec<f64>,
                complementarity: Vec<f64>,
                markov_identity_gap: Vec<Vec<f64>>,
                allocation_solves: usize,
            }
            let nodes = g.nodes();
            let summary = Summary {
                dt: traj.q.dt,
                steps: traj.q.times.len() - 1,
                picard_residual: traj.q.picard_residual[1..].to_vec(),
                complementarity: traj.q.complementarity[1..].to_vec(),
                markov_identity_gap: (1..=nodes).map(|i| (0..g.types()).map(|j| *gap.get(i, j)).collect()).collect(),
                allocation_solves: traj.z.allocation_solves,
            };
            println!("D - (1/E[D]) ∫Q per class: {:?}", summary.markov_identity_gap);
            write_json(&out.join("fluid_summary.json"), &summary)?;
        }
        Command::Invariant => {
            let (arr, laws, u) = (cfg.arrivals(&g)?, cfg.laws(&g)?, cfg.utility(&g)?);
            let opts = FixedPointOptions { theta: cfg.invariant.theta, tol: cfg.invariant.tol, max_iter: cfg.invariant.max_iter };
            let fp = fixed_point_z(&g, &arr, &laws, &u, cfg.model, None, opts)?;
            let op = acopf_invariant(&g, &arr, &laws, &u, cfg.model)?;
            print!("q*\n{}z* (aggregate program)\n{}", table_rows(&op.q_star), table_rows(&op.z_star));
            println!("route gap {:.2e}, fixed-point residual {:.2e}", fp.gap(&op), op.residual_fp);
            #[derive(Serialize)]
            struct Out<'a> {
                q_star: Vec<Vec<f64>>,
                z_star: Vec<Vec<f64>>,
                lambda_star: Vec<Vec<f64>>,
                #[serde(rename = "W_star")]
                w_star: &'a [f64],
                residuals: serde_json::Value,
                fixed_point: &'a gridflow::invariant::InvariantPoint,
                aggregate_program: &'a gridflow::invariant::InvariantPoint,
            }
            write_json(
                &out.join("invariant.json"),
                &Out {
                    q_star: op.q_star.rows(),
                    z_star: op.z_star.rows(),
                    lambda_star: op.lambda_star.rows(),
                    w_star: &op.w_star,
                    residuals: serde_json::json!({
                        "fixed_point": op.residual_fp,
                        "kkt": op.residual_opt,
                        "route_gap": fp.gap(&op),
                    }),
                    fixed_point: &fp,
                    aggregate_program: &op,
                },
            )?;
            if !fp.converged {
                return Ok(exit::SOLVER);
            }
        }
        Command::Converge => {
            let c = cfg.converge.clone();
            let base = harness::sim_input(&cfg, &g, c.horizon, c.snap_every)?;
            let rep = harness::converge(&base, &c.n, c.replications, cfg.seed, c.bin_width, c.alpha)?;
            for s in &rep.scales {
                println!("n = {:>6}: median distance {:.4} (CI {:.4} .. {:.4})", s.n, s.median, s.median_ci.0, s.median_ci.1);
            }
            for t in &rep.tests {
                println!("n {} -> {}: {}/{} decreases, p = {:.2e}", t.n_from, t.n_to, t.decreases, t.replications, t.p_value);
            }
            write_json(&out.join("converge.json"), &rep)?;
            if rep.decreasing == Some(false) {
                eprintln!("distances do not decrease significantly; per-replication values:");
                for s in &rep.scales {
                    eprintln!("  n = {}: {:?}", s.n, s.distances);
                }
                return Ok(exit::NOT_CONVERGING);
            }
        }
        Command::VerifyTables => {
            let rep = harness::verify_tables(&g, &cfg.verify_tables.models, cfg.verify_tables.tol)?;
            print!("{}", rep.render());
            write_json(&out.join("tables.json"), &rep)?;
            if !rep.all_pass() {
                for c in rep.cells.iter().filter(|c| !c.pass) {
                    eprintln!("table {} row {} node {}: delta {:.3e}", c.table, c.row, c.node, c.got - c.expected);
                }
                return Ok(exit::TABLE_MISMATCH);
            }
        }
    }
    Ok(exit::OK)
}

fn write_fluid_csv(out: &Path, traj: &gridflow::fluid::FluidTrajectory) -> Result<()> {
    let f = BufWriter::new(File::create(out.join("fluid.csv"))?);
    harness::write_fluid_csv(f, traj)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(exit::CONFIG as u8);
        }
    }
    let code = match run(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            harness::exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
