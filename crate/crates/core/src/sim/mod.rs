//! Discrete-event simulation of parking and charging.
//!
//! Between events every uncharged vehicle of class `(i, j)` is charged at
//! the class rate `p_ij(Z)`, which only changes when the vector of uncharged
//! counts `Z` changes. Each class keeps a virtual service counter
//! `C_ij(t) = ∫_0^t p_ij(Z(u)) du`; a vehicle admitted with requirement `B`
//! at counter value `c` is charged once `C_ij` reaches `c + B`, so its
//! residual requirement at time `t` is `(c + B - C_ij(t))⁺`.
//!
//! Events at equal timestamps are processed as deadline expiries first, then
//! charge completions, then arrivals, each group ordered by class index.
//!
//! Random streams: replication `r` draws from `ChaCha8Rng::seed_from_u64(seed)`
//! with stream id `(r·2^20 + class)·4 + substream`, where `class = (i-1)·J + j`
//! and substream 0 produces interarrival times and 1 produces `(B, D)`.

mod io;

pub use io::{read_snapshots_csv, write_events_ndjson, write_snapshots_csv, SnapshotRow};

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use log::warn;
use ordered_float::OrderedFloat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alloc::{solve_allocation, UtilitySpec};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, NodeTypeTable};
use crate::law::{ArrivalProcess, ArrivalSpec, JointLawSpec};
use crate::power_flow::FlowModel;

/// A vehicle present at time 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialVehicle {
    pub node: usize,
    pub ev_type: usize,
    /// Residual requirement; 0 for an already charged vehicle.
    pub b: f64,
    pub d: f64,
}

#[derive(Debug, Clone)]
pub struct SimInput {
    pub grid: GridSpec<f64>,
    pub arrivals: ArrivalSpec,
    pub laws: JointLawSpec,
    pub utility: UtilitySpec<f64>,
    pub model: FlowModel,
    pub horizon: f64,
    pub snap_times: Vec<f64>,
    pub initial: Vec<InitialVehicle>,
    /// Keep the per-vehicle atoms in every snapshot.
    pub keep_atoms: bool,
    pub record_events: bool,
}

impl SimInput {
    pub fn validate(&self) -> Result<()> {
        let (n, j) = (self.grid.nodes(), self.grid.types());
        if self.arrivals.nodes() != n || self.arrivals.types() != j || self.laws.nodes() != n || self.laws.types() != j {
            return Err(Error::Dimension("arrival/law tables do not match the grid".into()));
        }
        self.utility.w.check_shape(&self.grid)?;
        for (_, a) in self.arrivals.iter() {
            a.validate()?;
        }
        for (_, l) in self.laws.iter() {
            l.validate()?;
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::domain("horizon must be positive and finite"));
        }
        if self.snap_times.iter().any(|&t| !(0.0..=self.horizon).contains(&t)) {
            return Err(Error::domain("snapshot times must lie in [0, horizon]"));
        }
        if self.snap_times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::domain("snapshot times must be sorted"));
        }
        for v in &self.initial {
            if v.node == 0 || v.node > n || v.ev_type >= j || !(v.d > 0.0) || !(v.b >= 0.0) {
                return Err(Error::domain(format!("bad initial vehicle {v:?}")));
            }
        }
        Ok(())
    }

    /// The `n`-th system of the fluid scaling: `K, M -> nK, nM`,
    /// `r, x -> r/n, x/n`, arrival rates `λ -> nλ` and `n` copies of the
    /// initial population.
    pub fn scaled(&self, n: u64) -> Self {
        let mut out = self.clone();
        out.grid = self.grid.scaled(n);
        out.arrivals = self.arrivals.map(|a| a.scaled(n as f64));
        out.initial = self.initial.iter().flat_map(|v| std::iter::repeat_n(*v, n as usize)).collect();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSnapshot {
    pub node: usize,
    pub ev_type: usize,
    pub q: u64,
    pub z: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub departed: u64,
    /// Cumulative per-vehicle service `∫_0^t p_ij`.
    pub service: f64,
    /// Residual parking times of all present vehicles.
    pub d_atoms: Vec<f64>,
    /// `(b, d)` of the uncharged vehicles.
    pub bd_atoms: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSnapshot {
    pub t: f64,
    pub classes: Vec<ClassSnapshot>,
}

impl SimSnapshot {
    pub fn class(&self, i: usize, j: usize) -> &ClassSnapshot {
        self.classes.iter().find(|c| c.node == i && c.ev_type == j).expect("class present")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Arrival,
    Rejection,
    Deadline,
    Completion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub t: f64,
    pub kind: EventKind,
    pub i: usize,
    pub j: usize,
    pub payload: EventPayload,
}

/// State after the event. `occupied` is `Σ_j Q_ij` at the node just before
/// an arrival was processed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventPayload {
    pub vehicle: Option<usize>,
    pub b: Option<f64>,
    pub d: Option<f64>,
    pub occupied: u64,
    pub q: u64,
    pub z: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SimOutput {
    pub snapshots: Vec<SimSnapshot>,
    pub events: Vec<EventRecord>,
    /// Draws with a non-finite or nonpositive component, skipped.
    pub bad_draws: u64,
    pub allocation_solves: u64,
}

#[derive(Debug, Clone, Copy)]
struct Vehicle {
    class: usize,
    /// Counter value at which the vehicle is fully charged.
    target: f64,
    deadline: f64,
    charged: bool,
    present: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Kind {
    Deadline = 0,
    Completion = 1,
    Arrival = 2,
}

struct ClassState {
    q: u64,
    z: u64,
    accepted: u64,
    rejected: u64,
    departed: u64,
    counter: f64,
    rate: f64,
    /// Uncharged vehicles by target (lazy deletion).
    pending: BinaryHeap<Reverse<(OrderedFloat<f64>, usize)>>,
    next_arrival: f64,
    schedule_pos: usize,
    arrival_rng: ChaCha8Rng,
    law_rng: ChaCha8Rng,
}

/// Stream id of a (replication, class, substream) triple.
pub fn stream_id(replication: u64, class: usize, substream: u64) -> u64 {
    ((replication << 20) + class as u64) * 4 + substream
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn next_arrival(proc_: &ArrivalProcess, after: f64, pos: &mut usize, rng: &mut ChaCha8Rng) -> f64 {
    match proc_ {
        ArrivalProcess::Schedule { times } => {
            let t = times.get(*pos).copied().unwrap_or(f64::INFINITY);
            *pos += 1;
            t
        }
        _ => {
            let lmax = proc_.max_rate();
            if lmax <= 0.0 {
                return f64::INFINITY;
            }
            let mut t = after;
            loop {
                let e: f64 = Exp1.sample(rng);
                t += e / lmax;
                let accept = match proc_ {
                    ArrivalProcess::PoissonConst { .. } => true,
                    _ => rng.random::<f64>() * lmax < proc_.rate(t),
                };
                if accept {
                    return t;
                }
            }
        }
    }
}

/// Runs one replication.
pub fn simulate(inp: &SimInput, seed: u64, replication: u64) -> Result<SimOutput> {
    inp.validate()?;
    let g = &inp.grid;
    let (nodes, types) = (g.nodes(), g.types());
    let n_classes = nodes * types;
    let class_of = |c: usize| (c / types + 1, c % types);

    let mut classes: Vec<ClassState> = (0..n_classes)
        .map(|c| ClassState {
            q: 0,
            z: 0,
            accepted: 0,
            rejected: 0,
            departed: 0,
            counter: 0.0,
            rate: 0.0,
            pending: BinaryHeap::new(),
            next_arrival: f64::INFINITY,
            schedule_pos: 0,
            arrival_rng: stream(seed, stream_id(replication, c, 0)),
            law_rng: stream(seed, stream_id(replication, c, 1)),
        })
        .collect();
    let mut vehicles: Vec<Vehicle> = Vec::new();
    let mut deadlines: BinaryHeap<Reverse<(OrderedFloat<f64>, usize, usize)>> = BinaryHeap::new();
    let mut out = SimOutput::default();
    let mut occupied = vec![0u64; nodes + 1];

    for v in &inp.initial {
        let c = (v.node - 1) * types + v.ev_type;
        let id = vehicles.len();
        let charged = v.b <= 0.0;
        vehicles.push(Vehicle { class: c, target: v.b, deadline: v.d, charged, present: true });
        let cs = &mut classes[c];
        cs.q += 1;
        occupied[v.node] += 1;
        if !charged {
            cs.z += 1;
            cs.pending.push(Reverse((OrderedFloat(v.b), id)));
        }
        deadlines.push(Reverse((OrderedFloat(v.d), c, id)));
    }
    for (c, cs) in classes.iter_mut().enumerate() {
        let (i, j) = class_of(c);
        cs.next_arrival = next_arrival(inp.arrivals.get(i, j), 0.0, &mut cs.schedule_pos, &mut cs.arrival_rng);
    }

    let mut cache: HashMap<Vec<u64>, Vec<f64>> = HashMap::new();
    let mut t = 0.0f64;
    let mut update_rates = |classes: &mut [ClassState], t: f64, out: &mut SimOutput| -> Result<()> {
        let key: Vec<u64> = classes.iter().map(|c| c.z).collect();
        let rates = match cache.get(&key) {
            Some(r) => r.clone(),
            None => {
                let z = NodeTypeTable::from_rows(
                    &key.chunks(types).map(|row| row.iter().map(|&v| v as f64).collect()).collect::<Vec<_>>(),
                )?;
                let res = solve_allocation(g, &z, &inp.utility, inp.model)
                    .map_err(|e| Error::SolverAt { time: t, source: Box::new(e) })?;
                out.allocation_solves += 1;
                let r: Vec<f64> = res.p.as_slice().to_vec();
                cache.insert(key, r.clone());
                r
            }
        };
        for (cs, r) in classes.iter_mut().zip(rates) {
            cs.rate = r;
        }
        Ok(())
    };
    update_rates(&mut classes, t, &mut out)?;

    let mut snaps = inp.snap_times.iter().copied().peekable();
    loop {
        // candidate events
        let mut best: Option<(f64, Kind, usize)> = None;
        let mut consider = |cand: (f64, Kind, usize)| {
            let better = match best {
                None => true,
                Some(b) => (cand.0, cand.1, cand.2) < (b.0, b.1, b.2),
            };
            if better {
                best = Some(cand);
            }
        };
        while let Some(Reverse((_, _, id))) = deadlines.peek() {
            if vehicles[*id].present {
                break;
            }
            deadlines.pop();
        }
        if let Some(Reverse((d, c, _))) = deadlines.peek() {
            consider((d.0, Kind::Deadline, *c));
        }
        for (c, cs) in classes.iter_mut().enumerate() {
            while let Some(Reverse((_, id))) = cs.pending.peek() {
                let v = vehicles[*id];
                if v.present && !v.charged {
                    break;
                }
                cs.pending.pop();
            }
            if let Some(Reverse((target, _))) = cs.pending.peek() {
                if cs.rate > 0.0 {
                    let dt = ((target.0 - cs.counter) / cs.rate).max(0.0);
                    consider((t + dt, Kind::Completion, c));
                }
            }
            if cs.next_arrival.is_finite() {
                consider((cs.next_arrival, Kind::Arrival, c));
            }
        }
        let next_t = best.map_or(f64::INFINITY, |b| b.0);

        while let Some(&s) = snaps.peek() {
            if s < next_t || next_t > inp.horizon {
                let snap = take_snapshot(&classes, &vehicles, s, t, inp.keep_atoms, types);
                out.snapshots.push(snap);
                snaps.next();
            } else {
                break;
            }
        }
        let Some((te, kind, c)) = best else { break };
        if te > inp.horizon {
            break;
        }

        for cs in classes.iter_mut() {
            cs.counter += cs.rate * (te - t);
        }
        t = te;
        let (i, j) = class_of(c);
        let z_before = classes[c].z;
        match kind {
            Kind::Deadline => {
                let Reverse((_, _, id)) = deadlines.pop().expect("peeked");
                let v = &mut vehicles[id];
                v.present = false;
                let cs = &mut classes[c];
                cs.q -= 1;
                cs.departed += 1;
                occupied[i] -= 1;
                if !v.charged {
                    cs.z -= 1;
                }
                if inp.record_events {
                    let b = if v.charged { 0.0 } else { (v.target - cs.counter).max(0.0) };
                    out.events.push(EventRecord {
                        t,
                        kind: EventKind::Deadline,
                        i,
                        j,
                        payload: EventPayload { vehicle: Some(id), b: Some(b), d: Some(0.0), occupied: occupied[i], q: cs.q, z: cs.z },
                    });
                }
            }
            Kind::Completion => {
                let cs = &mut classes[c];
                let Reverse((_, id)) = cs.pending.pop().expect("peeked");
                let v = &mut vehicles[id];
                v.charged = true;
                cs.z -= 1;
                if inp.record_events {
                    out.events.push(EventRecord {
                        t,
                        kind: EventKind::Completion,
                        i,
                        j,
                        payload: EventPayload {
                            vehicle: Some(id),
                            b: Some(0.0),
                            d: Some(v.deadline - t),
                            occupied: occupied[i],
                            q: cs.q,
                            z: cs.z,
                        },
                    });
                }
            }
            Kind::Arrival => {
                let cs = &mut classes[c];
                let before = occupied[i];
                let (b, d) = inp.laws.get(i, j).sample(&mut cs.law_rng);
                let proc_ = inp.arrivals.get(i, j);
                cs.next_arrival = next_arrival(proc_, t, &mut cs.schedule_pos, &mut cs.arrival_rng);
                if !(b.is_finite() && d.is_finite() && b > 0.0 && d > 0.0) {
                    warn!("skipping arrival at t = {t} in class ({i}, {j}) with bad draw (b = {b}, d = {d})");
                    out.bad_draws += 1;
                    continue;
                }
                let admitted = g.capacity(i).admits(before);
                let mut vid = None;
                if admitted {
                    let id = vehicles.len();
                    vehicles.push(Vehicle { class: c, target: cs.counter + b, deadline: t + d, charged: false, present: true });
                    cs.pending.push(Reverse((OrderedFloat(cs.counter + b), id)));
                    deadlines.push(Reverse((OrderedFloat(t + d), c, id)));
                    cs.q += 1;
                    cs.z += 1;
                    cs.accepted += 1;
                    occupied[i] += 1;
                    vid = Some(id);
                } else {
                    cs.rejected += 1;
                }
                if inp.record_events {
                    out.events.push(EventRecord {
                        t,
                        kind: if admitted { EventKind::Arrival } else { EventKind::Rejection },
                        i,
                        j,
                        payload: EventPayload {
                            vehicle: vid,
                            b: Some(b),
                            d: Some(d),
                            occupied: before,
                            q: cs.q,
                            z: cs.z,
                        },
                    });
                }
            }
        }
        if classes[c].z != z_before {
            update_rates(&mut classes, t, &mut out)?;
        }
    }
    // remaining snapshots after the last event
    for s in snaps {
        let snap = take_snapshot(&classes, &vehicles, s, t, inp.keep_atoms, types);
        out.snapshots.push(snap);
    }
    Ok(out)
}

/// State at time `s >= t_last` where no event happens in `(t_last, s]`.
fn take_snapshot(
    classes: &[ClassState],
    vehicles: &[Vehicle],
    s: f64,
    t_last: f64,
    keep_atoms: bool,
    types: usize,
) -> SimSnapshot {
    let mut snaps: Vec<ClassSnapshot> = classes
        .iter()
        .enumerate()
        .map(|(c, cs)| ClassSnapshot {
            node: c / types + 1,
            ev_type: c % types,
            q: cs.q,
            z: cs.z,
            accepted: cs.accepted,
            rejected: cs.rejected,
            departed: cs.departed,
            service: cs.counter + cs.rate * (s - t_last),
            d_atoms: Vec::new(),
            bd_atoms: Vec::new(),
        })
        .collect();
    if keep_atoms {
        for v in vehicles.iter().filter(|v| v.present) {
            let snap = &mut snaps[v.class];
            let d = v.deadline - s;
            snap.d_atoms.push(d);
            if !v.charged {
                snap.bd_atoms.push(((v.target - snap.service).max(0.0), d));
            }
        }
    }
    SimSnapshot { t: s, classes: snaps }
}

/// Fluid-scaled trajectory of one replication of the `n`-th system.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaledRun {
    pub n: u64,
    pub replication: u64,
    /// Snapshots with counts divided by `n` (atoms keep their positions; each
    /// atom carries mass `1/n`).
    pub snapshots: Vec<ScaledSnapshot>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaledSnapshot {
    pub t: f64,
    pub q: NodeTypeTable<f64>,
    pub z: NodeTypeTable<f64>,
    pub rejected: NodeTypeTable<f64>,
    pub d_atoms: Vec<Vec<f64>>,
}

/// Runs `replications` independent replications of the `n`-scaled system in
/// parallel and rescales them by `1/n`.
pub fn scaled_ensemble(base: &SimInput, n: u64, replications: u64, seed: u64) -> Result<Vec<ScaledRun>> {
    if n == 0 {
        return Err(Error::domain("scale must be at least 1"));
    }
    let scaled = base.scaled(n);
    let (nodes, types) = (base.grid.nodes(), base.grid.types());
    (0..replications)
        .into_par_iter()
        .map(|r| {
            let out = simulate(&scaled, seed, r)?;
            let nf = n as f64;
            let snapshots = out
                .snapshots
                .iter()
                .map(|s| {
                    let mut q = NodeTypeTable::zeros(nodes, types);
                    let mut z = NodeTypeTable::zeros(nodes, types);
                    let mut rej = NodeTypeTable::zeros(nodes, types);
                    let mut atoms = Vec::new();
                    for c in &s.classes {
                        q.set(c.node, c.ev_type, c.q as f64 / nf);
                        z.set(c.node, c.ev_type, c.z as f64 / nf);
                        rej.set(c.node, c.ev_type, c.rejected as f64 / nf);
                        atoms.push(c.d_atoms.clone());
                    }
                    ScaledSnapshot { t: s.t, q, z, rejected: rej, d_atoms: atoms }
                })
                .collect();
            Ok(ScaledRun { n, replication: r, snapshots })
        })
        .collect()
}
