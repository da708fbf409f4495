use gridflow::alloc::UtilitySpec;
use gridflow::fluid::{solve_fluid, FluidInput, FluidTrajectory};
use gridflow::grid::{Capacity, GridParams, GridSpec, Line};
use gridflow::law::{ArrivalProcess, JointLaw, PerClass};
use gridflow::power_flow::FlowModel;

fn line(nodes: usize, k: u64) -> GridSpec<f64> {
    GridSpec::new(GridParams {
        nodes,
        types: 1,
        lines: (0..nodes).map(|n| Line { from: n, to: n + 1, r: 0.1, x: 0.1 }).collect(),
        w00: 1.0,
        v_lo: vec![0.81; nodes],
        v_hi: vec![1.0; nodes],
        m: vec![10.0; nodes],
        capacity: vec![Capacity::Finite(k); nodes],
        c_max: vec![1.0],
    })
    .unwrap()
}

fn run(g: &GridSpec<f64>, rate: f64, dt: f64, horizon: f64) -> FluidTrajectory {
    let n = g.nodes();
    let mut inp = FluidInput::new(
        g.clone(),
        PerClass::broadcast(n, 1, ArrivalProcess::PoissonConst { rate }),
        PerClass::broadcast(n, 1, JointLaw::IndepExp { mean_b: 1.0, mean_d: 1.0 }),
        UtilitySpec::log(g),
        FlowModel::Linearized,
        horizon,
    );
    inp.dt = Some(dt);
    solve_fluid(&inp).unwrap()
}

/// Sup distance between two runs on the coarse run's grid; `stride` fine
/// steps per coarse step.
fn sup_gap(coarse: &FluidTrajectory, fine: &FluidTrajectory, stride: usize) -> (f64, f64) {
    let (mut dq, mut dz) = (0.0f64, 0.0f64);
    for ((ij, c), (_, f)) in coarse.q.classes.iter().zip(fine.q.classes.iter()) {
        let (zc, zf) = (&coarse.z.classes.get(ij.0, ij.1).z, &fine.z.classes.get(ij.0, ij.1).z);
        for n in 0..c.q.len() {
            dq = dq.max((c.q[n] - f.q[stride * n]).abs());
            dz = dz.max((zc[n] - zf[stride * n]).abs());
        }
    }
    (dq, dz)
}

fn richardson(g: &GridSpec<f64>, rate: f64) -> (f64, f64) {
    let dt = 0.04;
    let runs: Vec<_> = [dt, dt / 2.0, dt / 4.0].iter().map(|&h| run(g, rate, h, 4.0)).collect();
    let (q1, z1) = sup_gap(&runs[0], &runs[1], 2);
    let (q2, z2) = sup_gap(&runs[1], &runs[2], 2);
    (q1 / q2, z1 / z2)
}

// The cohort scheme places arrivals at step midpoints, so refinement errors
// shrink like dt^2.
#[test]
fn halving_the_step_quarters_the_error() {
    for (name, g, rate) in [("underloaded", line(1, 10), 0.8), ("overloaded", line(1, 1), 2.0), ("line", line(3, 5), 2.0)] {
        let (rq, rz) = richardson(&g, rate);
        println!("{name}: Richardson ratio Q {rq:.3}, Z {rz:.3}");
        assert!((3.0..=5.0).contains(&rq), "{name}: Q ratio {rq}");
        assert!((3.0..=5.0).contains(&rz), "{name}: Z ratio {rz}");
    }
}
