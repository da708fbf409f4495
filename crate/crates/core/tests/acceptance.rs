//! Acceptance suite. Prints one line per criterion and exits nonzero when
//! any criterion fails.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gridflow::alloc::{check_monotone, compare_pair, UtilitySpec};
use gridflow::config::RunConfig;
use gridflow::fluid::{reflection_map, solve_fluid, FluidInput, FluidTrajectory};
use gridflow::grid::{Capacity, GridParams, GridSpec, Line, NodeTypeTable};
use gridflow::harness::{converge, markov_identity_gap, sim_input, verify_tables};
use gridflow::invariant::{acopf_invariant, fixed_point_z, invariant_q, FixedPointOptions};
use gridflow::law::{ArrivalProcess, JointLaw, PerClass};
use gridflow::power_flow::{check_feasible, FlowModel};
use gridflow::sim::{simulate, EventKind, InitialVehicle, SimInput, SimOutput};

type Verdict = (bool, String);

fn config(name: &str) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    RunConfig::load(&path).unwrap()
}

fn line_grid(nodes: usize, r: f64, m: f64, k: u64, c_max: f64) -> GridSpec<f64> {
    GridSpec::new(GridParams {
        nodes,
        types: 1,
        lines: (0..nodes).map(|n| Line { from: n, to: n + 1, r, x: r }).collect(),
        w00: 1.0,
        v_lo: vec![0.81; nodes],
        v_hi: vec![1.0; nodes],
        m: vec![m; nodes],
        capacity: vec![Capacity::Finite(k); nodes],
        c_max: vec![c_max],
    })
    .unwrap()
}

/// One station with negligible impedance and `types` EV types.
fn station(k: u64, types: usize) -> GridSpec<f64> {
    GridSpec::new(GridParams {
        nodes: 1,
        types,
        lines: vec![Line { from: 0, to: 1, r: 1e-6, x: 1e-6 }],
        w00: 1.0,
        v_lo: vec![0.81],
        v_hi: vec![1.0],
        m: vec![1e6],
        capacity: vec![Capacity::Finite(k)],
        c_max: vec![1.0; types],
    })
    .unwrap()
}

fn station_input(k: u64, rates: &[f64], mean_b: f64, mean_d: &[f64], horizon: f64) -> FluidInput {
    let g = station(k, rates.len());
    let arr = PerClass::from_fn(1, rates.len(), |_, j| ArrivalProcess::PoissonConst { rate: rates[j] });
    let laws = PerClass::from_fn(1, rates.len(), |_, j| JointLaw::IndepExp { mean_b, mean_d: mean_d[j] });
    let u = UtilitySpec::log(&g);
    FluidInput::new(g, arr, laws, u, FlowModel::Linearized, horizon)
}

fn criterion_1_3() -> (Verdict, Verdict) {
    let cfg = config("counterexample.toml");
    let g = cfg.grid().unwrap();
    let t0 = Instant::now();
    let rep = verify_tables(&g, &[FlowModel::Ac, FlowModel::Linearized], 1e-3).unwrap();
    let el = t0.elapsed();
    let worst = rep.cells.iter().fold(0.0f64, |m, c| m.max((c.got - c.expected).abs()));
    let c1 = (
        rep.all_pass() && el < Duration::from_secs(10),
        format!("{}/{} cells within 1e-3 (max deviation {worst:.2e}) in {:.2} s", rep.passed(), rep.cells.len(), el.as_secs_f64()),
    );
    let bound = 1e-6 * g.w00() * g.w00();
    let c3 = (rep.max_rank_gap <= bound, format!("max rank-one gap {:.2e} <= {bound:.1e}", rep.max_rank_gap));
    (c1, c3)
}

fn criterion_2() -> Verdict {
    let g = config("counterexample.toml").grid().unwrap();
    let u = UtilitySpec::log(&g);
    let lo = NodeTypeTable::from_node_values(&[1.0, 1.0, 1.0]);
    let hi = NodeTypeTable::from_node_values(&[1.0, 3.0, 1.0]);
    let rep = check_monotone(&g, &u, FlowModel::Ac, &lo, &hi, 50, 7).unwrap();
    let witness = rep.witness().filter(|w| w.node == 3).map(|w| w.p_z - w.p_y).unwrap_or(0.0);
    let pair = compare_pair(&g, &u, FlowModel::Ac, &lo, &NodeTypeTable::from_node_values(&[1.0, 2.0, 1.0])).unwrap();
    let table_gap = pair.iter().find(|v| v.node == 3).map(|v| v.p_z - v.p_y).unwrap_or(0.0);

    let line = line_grid(3, 0.1, 10.0, 5, 10.0);
    let ul = UtilitySpec::log(&line);
    let lo = NodeTypeTable::from_node_values(&[0.5; 3]);
    let hi = NodeTypeTable::from_node_values(&[4.0; 3]);
    let lrep = check_monotone(&line, &ul, FlowModel::Linearized, &lo, &hi, 100, 11).unwrap();
    (
        witness >= 0.015 && lrep.is_monotone(),
        format!(
            "witness gap at node 3: {witness:.4} (table pair {table_gap:.4}); line network {} violations in {} pairs",
            lrep.violations.len(),
            lrep.pairs
        ),
    )
}

fn random_tree(rng: &mut ChaCha8Rng) -> GridSpec<f64> {
    let nodes = rng.random_range(1..=6);
    let types = rng.random_range(1..=2);
    let ratio = rng.random_range(0.5..2.0);
    GridSpec::new(GridParams {
        nodes,
        types,
        lines: (1..=nodes)
            .map(|k| {
                let r = rng.random_range(0.01..0.2);
                Line { from: rng.random_range(0..k), to: k, r, x: r * ratio }
            })
            .collect(),
        w00: 1.0,
        v_lo: (0..nodes).map(|_| rng.random_range(0.8..0.95)).collect(),
        v_hi: vec![1.0; nodes],
        m: (0..nodes).map(|_| rng.random_range(0.5..5.0)).collect(),
        capacity: vec![Capacity::Unlimited; nodes],
        c_max: (0..types).map(|_| rng.random_range(0.5..3.0)).collect(),
    })
    .unwrap()
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut summary = Vec::new();
    let mut ok = true;
    for model in [FlowModel::Ac, FlowModel::Linearized] {
        let (mut failures, mut boundary) = (0, 0);
        for _ in 0..1000 {
            let g = random_tree(&mut rng);
            let (nodes, types) = (g.nodes(), g.types());
            let mut z = NodeTypeTable::zeros(nodes, types);
            let mut dir = NodeTypeTable::zeros(nodes, types);
            for (i, j) in z.indices().collect::<Vec<_>>() {
                z.set(i, j, rng.random_range(0.5..3.0));
                dir.set(i, j, rng.random_range(0.05..1.0));
            }
            // largest multiple of `dir` that respects the box constraints
            let mut t_hi = f64::INFINITY;
            for i in 1..=nodes {
                t_hi = t_hi.min(g.m(i) / dir.node_sum(i));
                for j in 0..types {
                    t_hi = t_hi.min(z.get(i, j) * g.c_max(j) / dir.get(i, j));
                }
            }
            let at = |t: f64| dir.map(|v| v * t);
            let feasible = |a: &NodeTypeTable<f64>| check_feasible(&g, a, &z, model).unwrap().is_feasible();
            let mut t = t_hi;
            if !feasible(&at(t)) {
                let (mut lo, mut hi) = (0.0, t_hi);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if feasible(&at(mid)) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                t = lo;
                boundary += 1;
            }
            let lam = at(t);
            let mut shrunk = lam.clone();
            for (i, j) in lam.indices() {
                let s = if rng.random::<f64>() < 0.3 { 1.0 } else { rng.random::<f64>() };
                shrunk.set(i, j, lam.get(i, j) * s);
            }
            if !feasible(&lam) || !feasible(&shrunk) {
                failures += 1;
            }
        }
        ok &= failures == 0;
        summary.push(format!("{model:?}: {failures} failures ({boundary} voltage-limited)"));
    }
    (ok, format!("1000 triples per model; {}", summary.join(", ")))
}

fn criterion_5(runs: &[(&str, &FluidTrajectory)]) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let len = rng.random_range(1..=500);
        let mut phi = Vec::with_capacity(len);
        let mut x = rng.random_range(-2.0..2.0);
        for _ in 0..len {
            x += rng.random_range(-1.0..1.0);
            phi.push(x);
        }
        let (psi, reg) = reflection_map(&phi);
        let mut run_max = 0.0f64;
        for t in 0..len {
            run_max = run_max.max(-phi[t]);
            if reg[t].to_bits() != run_max.to_bits() || psi[t].to_bits() != (phi[t] + run_max).to_bits() {
                mismatches += 1;
                break;
            }
        }
    }
    let mut worst_comp = 0.0f64;
    let mut decreasing = 0;
    for (_, traj) in runs {
        let q = &traj.q;
        for (i, r) in q.r_node.iter().enumerate().skip(1) {
            let scale = r.last().copied().unwrap_or(0.0).max(1.0);
            worst_comp = worst_comp.max(q.complementarity[i] / scale);
        }
        for (_, c) in q.classes.iter() {
            decreasing += c.r.windows(2).filter(|w| w[1] < w[0]).count();
        }
    }
    (
        mismatches == 0 && worst_comp <= 1e-9 && decreasing == 0,
        format!(
            "{mismatches} mismatches in 1000 series; over {} fluid runs: complementarity {worst_comp:.1e}, {decreasing} regulator decreases",
            runs.len()
        ),
    )
}

fn criterion_6() -> (Verdict, Vec<(&'static str, FluidTrajectory)>) {
    let mut worst = 0.0f64;
    let mut runs = Vec::new();
    let mut ok = true;
    for (name, rate, k, mean_d) in [("rho < K", 0.5, 10, 1.0), ("rho > K", 2.0, 1, 1.0), ("rho > K, E[D] = 2", 1.5, 2, 2.0)] {
        let mut inp = station_input(k, &[rate], 0.5, &[mean_d], 20.0 * mean_d);
        inp.dt = Some(mean_d / 200.0);
        let traj = solve_fluid(&inp).unwrap();
        let gap = *markov_identity_gap(&inp, &traj.q).get(1, 0);
        ok &= gap <= 1e-3;
        worst = worst.max(gap);
        runs.push((name, traj));
    }
    ((ok, format!("sup |D - (1/E[D]) int Q| = {worst:.2e} over 3 instances")), runs)
}

fn criterion_7() -> (Verdict, Vec<(&'static str, FluidTrajectory)>) {
    let cases: [(&str, u64, &[f64], &[f64]); 4] = [
        ("rho < K", 10, &[0.5], &[1.0]),
        ("rho > K", 1, &[2.0], &[1.0]),
        ("two types, rho < K", 5, &[1.0, 0.5], &[1.0, 2.0]),
        ("two types, rho > K", 1, &[1.0, 0.5], &[1.0, 2.0]),
    ];
    let mut worst = 0.0f64;
    let mut runs = Vec::new();
    for (name, k, rates, mean_d) in cases {
        let horizon = 50.0 * mean_d.iter().copied().fold(0.0, f64::max);
        let inp = station_input(k, rates, 0.5, mean_d, horizon);
        let traj = solve_fluid(&inp).unwrap();
        let qs = invariant_q(&inp.grid, &inp.arrivals, &inp.laws).unwrap();
        let n = traj.q.index_of(horizon);
        for j in 0..rates.len() {
            worst = worst.max((traj.q.classes.get(1, j).q[n] - qs.q_star.get(1, j)).abs());
        }
        runs.push((name, traj));
    }
    ((worst <= 1e-3, format!("max |Q(50 E[D]) - q*| = {worst:.2e} over 4 instances")), runs)
}

fn criterion_8() -> (Verdict, FluidTrajectory) {
    let g = line_grid(3, 0.1, 10.0, 5, 1.0);
    let arr = PerClass::broadcast(3, 1, ArrivalProcess::PoissonConst { rate: 2.0 });
    let laws = PerClass::broadcast(3, 1, JointLaw::IndepExp { mean_b: 1.0, mean_d: 1.0 });
    let u = UtilitySpec::log(&g);
    let model = FlowModel::Linearized;
    let lo = NodeTypeTable::from_node_values(&[0.2; 3]);
    let hi = NodeTypeTable::from_node_values(&[5.0; 3]);
    let mono = check_monotone(&g, &u, model, &lo, &hi, 50, 8).unwrap();
    let fp = fixed_point_z(&g, &arr, &laws, &u, model, None, FixedPointOptions::default()).unwrap();
    let op = acopf_invariant(&g, &arr, &laws, &u, model).unwrap();
    let gap = fp.gap(&op);
    let inp = FluidInput::new(g, arr, laws, u, model, 50.0);
    let traj = solve_fluid(&inp).unwrap();
    let n = traj.q.index_of(50.0);
    let dist = (1..=3).fold(0.0f64, |m, i| m.max((traj.z.classes.get(i, 0).z[n] - op.z_star.get(i, 0)).abs()));
    (
        (
            mono.is_monotone() && fp.converged && gap <= 1e-5 && dist <= 1e-3,
            format!("route gap {gap:.2e}; fluid |Z(50) - z*| = {dist:.2e}; {} monotonicity violations", mono.violations.len()),
        ),
        traj,
    )
}

fn criterion_9() -> Verdict {
    let cfg = config("mm_line.toml");
    let g = cfg.grid().unwrap();
    let c = &cfg.converge;
    let base = sim_input(&cfg, &g, c.horizon, c.snap_every).unwrap();
    let t0 = Instant::now();
    let rep = converge(&base, &[10, 100], 20, cfg.seed, c.bin_width, 0.05).unwrap();
    let el = t0.elapsed();
    let t = &rep.tests[0];
    let (m10, m100) = (rep.scales[0].median, rep.scales[1].median);
    (
        t.p_value < 0.05 && m100 < m10 && el < Duration::from_secs(300),
        format!(
            "median distance {m10:.3} -> {m100:.3}, {}/{} decreases, p = {:.1e}, {:.1} s",
            t.decreases,
            t.replications,
            t.p_value,
            el.as_secs_f64()
        ),
    )
}

fn random_scenario(rng: &mut ChaCha8Rng) -> SimInput {
    let g = random_tree(rng);
    let (nodes, types) = (g.nodes(), g.types());
    let g = g
        .with_params(|p| {
            p.capacity = (0..nodes).map(|_| Capacity::Finite(rng.random_range(1..=4))).collect();
        })
        .unwrap();
    let arrivals = PerClass::from_fn(nodes, types, |_, _| ArrivalProcess::PoissonConst { rate: rng.random_range(0.2..3.0) });
    let laws = PerClass::from_fn(nodes, types, |_, _| {
        let (mean_b, mean_d) = (rng.random_range(0.2..2.0), rng.random_range(0.3..2.0));
        match rng.random_range(0..3) {
            0 => JointLaw::IndepExp { mean_b, mean_d },
            1 => JointLaw::IndepLognormal { mean_b, sigma_b: 0.5, mean_d, sigma_d: 0.4 },
            _ => JointLaw::ComonotoneExp { mean_b, mean_d },
        }
    });
    let mut initial = Vec::new();
    for i in 1..=nodes {
        if let Capacity::Finite(k) = g.capacity(i) {
            for _ in 0..rng.random_range(0..=k) {
                let b = if rng.random::<f64>() < 0.3 { 0.0 } else { rng.random_range(0.1..1.0) };
                initial.push(InitialVehicle { node: i, ev_type: rng.random_range(0..types), b, d: rng.random_range(0.1..3.0) });
            }
        }
    }
    let horizon = 8.0;
    SimInput {
        utility: UtilitySpec::log(&g),
        grid: g,
        arrivals,
        laws,
        model: if rng.random::<bool>() { FlowModel::Ac } else { FlowModel::Linearized },
        horizon,
        snap_times: (0..=16).map(|k| k as f64 * 0.5).collect(),
        initial,
        keep_atoms: true,
        record_events: true,
    }
}

/// Replays the event log and returns the first inconsistency.
fn audit(inp: &SimInput, out: &SimOutput) -> Option<String> {
    let g = &inp.grid;
    let types = g.types();
    let cls = |i: usize, j: usize| (i - 1) * types + j;
    let k = |i: usize| match g.capacity(i) {
        Capacity::Finite(k) => k,
        Capacity::Unlimited => u64::MAX,
    };
    let classes = g.nodes() * types;
    let (mut q, mut z) = (vec![0u64; classes], vec![0u64; classes]);
    let (mut acc, mut rej, mut dep) = (vec![0u64; classes], vec![0u64; classes], vec![0u64; classes]);
    let mut occ = vec![0u64; g.nodes() + 1];
    let mut charged: HashMap<usize, bool> = HashMap::new();
    for (id, v) in inp.initial.iter().enumerate() {
        let c = cls(v.node, v.ev_type);
        q[c] += 1;
        occ[v.node] += 1;
        charged.insert(id, v.b <= 0.0);
        if v.b > 0.0 {
            z[c] += 1;
        }
    }
    let q0 = q.clone();
    let mut next_id = inp.initial.len();
    let mut snaps = out.snapshots.iter().peekable();
    let mut t_prev = 0.0;
    let check_snaps = |upto: f64, snaps: &mut std::iter::Peekable<std::slice::Iter<'_, gridflow::sim::SimSnapshot>>, q: &[u64], z: &[u64], acc: &[u64], rej: &[u64], dep: &[u64]| -> Option<String> {
        while let Some(s) = snaps.next_if(|s| s.t < upto) {
            for cs in &s.classes {
                let c = cls(cs.node, cs.ev_type);
                if (cs.q, cs.z, cs.accepted, cs.rejected, cs.departed) != (q[c], z[c], acc[c], rej[c], dep[c]) {
                    return Some(format!("snapshot t = {} class {c} disagrees with the event log", s.t));
                }
                if cs.q != q0[c] + cs.accepted - cs.departed || cs.d_atoms.len() as u64 != cs.q || cs.bd_atoms.len() as u64 != cs.z {
                    return Some(format!("snapshot t = {} class {c} breaks count balance", s.t));
                }
            }
            for i in 1..=g.nodes() {
                let total: u64 = s.classes.iter().filter(|c| c.node == i).map(|c| c.q).sum();
                if total > k(i) {
                    return Some(format!("snapshot t = {} node {i} over capacity", s.t));
                }
            }
        }
        None
    };
    for e in &out.events {
        if e.t < t_prev {
            return Some(format!("events out of order at t = {}", e.t));
        }
        t_prev = e.t;
        if let Some(m) = check_snaps(e.t, &mut snaps, &q, &z, &acc, &rej, &dep) {
            return Some(m);
        }
        let c = cls(e.i, e.j);
        let p = &e.payload;
        match e.kind {
            EventKind::Arrival => {
                if p.occupied != occ[e.i] || occ[e.i] >= k(e.i) || p.vehicle != Some(next_id) {
                    return Some(format!("bad admission at t = {}", e.t));
                }
                charged.insert(next_id, false);
                next_id += 1;
                q[c] += 1;
                z[c] += 1;
                acc[c] += 1;
                occ[e.i] += 1;
            }
            EventKind::Rejection => {
                if p.occupied != occ[e.i] || occ[e.i] != k(e.i) {
                    return Some(format!("rejection with a free space at t = {}", e.t));
                }
                rej[c] += 1;
            }
            EventKind::Deadline => {
                let id = p.vehicle.expect("deadline names a vehicle");
                let Some(was_charged) = charged.remove(&id) else {
                    return Some(format!("vehicle {id} left twice"));
                };
                if !was_charged {
                    z[c] -= 1;
                }
                q[c] -= 1;
                dep[c] += 1;
                occ[e.i] -= 1;
            }
            EventKind::Completion => {
                let id = p.vehicle.expect("completion names a vehicle");
                if charged.insert(id, true) != Some(false) {
                    return Some(format!("vehicle {id} completed twice"));
                }
                z[c] -= 1;
            }
        }
        if p.q != q[c] || p.z != z[c] || occ[e.i] > k(e.i) {
            return Some(format!("state after event at t = {} disagrees with replay", e.t));
        }
    }
    check_snaps(f64::INFINITY, &mut snaps, &q, &z, &acc, &rej, &dep)
}

fn criterion_10() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut events, mut rejections) = (0usize, 0usize);
    for s in 0..50 {
        let inp = random_scenario(&mut rng);
        let seed = rng.random::<u64>();
        let a = simulate(&inp, seed, 0).unwrap();
        let b = simulate(&inp, seed, 0).unwrap();
        let same = a.events == b.events && a.snapshots == b.snapshots;
        if !same {
            return (false, format!("scenario {s}: two runs with one seed differ"));
        }
        if let Some(m) = audit(&inp, &a) {
            return (false, format!("scenario {s}: {m}"));
        }
        events += a.events.len();
        rejections += a.events.iter().filter(|e| e.kind == EventKind::Rejection).count();
    }
    (true, format!("50 scenarios, {events} events ({rejections} rejections) replayed exactly, reruns identical"))
}

fn guarded<T>(f: impl FnOnce() -> T) -> Result<T, String> {
    catch_unwind(AssertUnwindSafe(f)).map_err(|e| {
        e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
    })
}

fn main() -> ExitCode {
    let names = [
        "table reproduction",
        "monotonicity counterexample",
        "rank-one exactness",
        "downward closure",
        "reflection map",
        "Markovian departure identity",
        "invariant q*",
        "invariant z* route agreement",
        "fluid-limit diagnostic",
        "simulator conservation",
    ];
    let mut verdicts: Vec<Option<Verdict>> = vec![None; 10];
    let panicked = |m: String| (false, format!("panicked: {m}"));

    match guarded(criterion_1_3) {
        Ok((c1, c3)) => {
            verdicts[0] = Some(c1);
            verdicts[2] = Some(c3);
        }
        Err(m) => {
            verdicts[0] = Some(panicked(m.clone()));
            verdicts[2] = Some(panicked(m));
        }
    }
    verdicts[1] = Some(guarded(criterion_2).unwrap_or_else(panicked));
    verdicts[3] = Some(guarded(criterion_4).unwrap_or_else(panicked));

    let mut runs = Vec::new();
    match guarded(criterion_6) {
        Ok((v, r)) => {
            verdicts[5] = Some(v);
            runs.extend(r);
        }
        Err(m) => verdicts[5] = Some(panicked(m)),
    }
    match guarded(criterion_7) {
        Ok((v, r)) => {
            verdicts[6] = Some(v);
            runs.extend(r);
        }
        Err(m) => verdicts[6] = Some(panicked(m)),
    }
    match guarded(criterion_8) {
        Ok((v, t)) => {
            verdicts[7] = Some(v);
            runs.push(("line network", t));
        }
        Err(m) => verdicts[7] = Some(panicked(m)),
    }
    let refs: Vec<(&str, &FluidTrajectory)> = runs.iter().map(|(n, t)| (*n, t)).collect();
    verdicts[4] = Some(guarded(|| criterion_5(&refs)).unwrap_or_else(panicked));
    verdicts[8] = Some(guarded(criterion_9).unwrap_or_else(panicked));
    verdicts[9] = Some(guarded(criterion_10).unwrap_or_else(panicked));

    let mut all = true;
    for (n, (name, v)) in names.iter().zip(&verdicts).enumerate() {
        let (pass, detail) = v.clone().unwrap_or((false, "not run".into()));
        all &= pass;
        println!("criterion {:>2} {:<30} {}  {detail}", n + 1, name, if pass { "PASS" } else { "FAIL" });
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
