use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use gridflow::alloc::solve_allocation;
use gridflow::config::RunConfig;
use gridflow::fluid::solve_fluid;
use gridflow::grid::NodeTypeTable;
use gridflow::harness::{self, exit, read_fluid_csv};
use gridflow::sim::{read_snapshots_csv, simulate};

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn gridflow(cfg: &Path, out: &Path, args: &[&str]) -> i32 {
    let st = Command::new(env!("CARGO_BIN_EXE_gridflow"))
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("GRIDFLOW_SEED")
        .output()
        .unwrap();
    st.status.code().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn verify_tables_passes_and_flags_a_perturbed_grid() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gridflow(&config("counterexample.toml"), dir.path(), &["verify-tables"]), exit::OK);
    let rep = json(&dir.path().join("tables.json"));
    assert_eq!(rep["cells"].as_array().unwrap().len(), 30);

    let text = fs::read_to_string(config("counterexample.toml")).unwrap().replace("r = 0.1, x = 0.1", "r = 0.2, x = 0.2");
    let perturbed = dir.path().join("perturbed.toml");
    fs::write(&perturbed, text).unwrap();
    assert_eq!(gridflow(&perturbed, dir.path(), &["verify-tables"]), exit::TABLE_MISMATCH);
}

#[test]
fn bad_configs_exit_with_the_config_code() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gridflow(&dir.path().join("missing.toml"), dir.path(), &["allocate"]), exit::CONFIG);
    let text = fs::read_to_string(config("counterexample.toml")).unwrap().replace("seed = 1", "seed = 1\nsede = 2");
    let typo = dir.path().join("typo.toml");
    fs::write(&typo, text).unwrap();
    assert_eq!(gridflow(&typo, dir.path(), &["allocate"]), exit::CONFIG);
}

#[test]
fn allocation_json_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = config("counterexample.toml");
    assert_eq!(gridflow(&path, dir.path(), &["allocate"]), exit::OK);
    let out = json(&dir.path().join("allocation.json"));
    let cfg = RunConfig::load(&path).unwrap();
    let g = cfg.grid().unwrap();
    let z = NodeTypeTable::from_rows(cfg.allocate.z.as_ref().unwrap()).unwrap();
    let res = solve_allocation(&g, &z, &cfg.utility(&g).unwrap(), cfg.model).unwrap();
    let p: Vec<f64> = serde_json::from_value(out["p"]["data"].clone()).unwrap();
    for (a, b) in p.iter().zip(res.p.as_slice()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn fluid_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = config("mm_line.toml");
    assert_eq!(gridflow(&path, dir.path(), &["fluid"]), exit::OK);
    let rows = read_fluid_csv(fs::File::open(dir.path().join("fluid.csv")).unwrap()).unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    let g = cfg.grid().unwrap();
    let traj = solve_fluid(&harness::fluid_input(&cfg, &g).unwrap()).unwrap();
    assert_eq!(rows.len(), traj.q.times.len() * 2);
    for r in &rows {
        let n = traj.q.index_of(r.t);
        let c = traj.q.classes.get(r.i, r.j - 1);
        assert!((r.q - c.q[n]).abs() <= 1e-12 && (r.d - c.d[n]).abs() <= 1e-12 && (r.r - c.r[n]).abs() <= 1e-12);
        assert!((r.z - traj.z.classes.get(r.i, r.j - 1).z[n]).abs() <= 1e-12);
    }
    let summary = json(&dir.path().join("fluid_summary.json"));
    for gap in summary["markov_identity_gap"].as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap()) {
        assert!(gap.as_f64().unwrap() <= 1e-3);
    }
}

#[test]
fn simulate_is_reproducible_from_the_seed() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let path = config("mm_line.toml");
    assert_eq!(gridflow(&path, a.path(), &["simulate"]), exit::OK);
    assert_eq!(gridflow(&path, b.path(), &["simulate"]), exit::OK);
    assert_eq!(gridflow(&path, c.path(), &["--seed", "12", "simulate"]), exit::OK);
    let read = |d: &Path| fs::read(d.join("snapshots_r1.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_ne!(read(a.path()), read(c.path()));

    // the CSV carries the counts of the in-process run at scale n
    let cfg = RunConfig::load(&path).unwrap();
    let g = cfg.grid().unwrap();
    let s = &cfg.simulate;
    let inp = harness::sim_input(&cfg, &g, s.horizon, s.snap_every).unwrap().scaled(s.n);
    let direct = simulate(&inp, cfg.seed, 1).unwrap();
    let rows = read_snapshots_csv(fs::File::open(a.path().join("snapshots_r1.csv")).unwrap()).unwrap();
    let expect: Vec<_> = direct.snapshots.iter().flat_map(|s| s.classes.iter().map(move |c| (s.t, c.q, c.z, c.rejected))).collect();
    let got: Vec<_> = rows.iter().map(|r| (r.t, r.q, r.z, r.r)).collect();
    assert_eq!(got, expect);
}

#[test]
fn invariant_routes_agree_from_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gridflow(&config("mm_line.toml"), dir.path(), &["invariant"]), exit::OK);
    let out = json(&dir.path().join("invariant.json"));
    assert!(out["residuals"]["route_gap"].as_f64().unwrap() <= 1e-5);
    assert!(out["residuals"]["fixed_point"].as_f64().unwrap() <= 1e-6);
}
