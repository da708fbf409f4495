use super::*;
use crate::grid::Capacity;
use crate::sim::tests::single_node;
use proptest::prelude::*;

fn mm(rate: f64, mean_b: f64, mean_d: f64, k: u64, horizon: f64) -> FluidInput {
    let g = single_node(Capacity::Finite(k), 1e6, 1.0);
    FluidInput::new(
        g.clone(),
        PerClass::broadcast(1, 1, ArrivalProcess::PoissonConst { rate }),
        PerClass::broadcast(1, 1, JointLaw::IndepExp { mean_b, mean_d }),
        UtilitySpec::log(&g),
        FlowModel::Linearized,
        horizon,
    )
}

fn trapezoid(v: &[f64], dt: f64) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for n in 1..v.len() {
        out[n] = out[n - 1] + 0.5 * dt * (v[n - 1] + v[n]);
    }
    out
}

proptest! {
    #[test]
    fn reflection_matches_brute_force(phi in proptest::collection::vec(-5.0f64..5.0, 1..80)) {
        let (psi, reg) = reflection_map(&phi);
        for t in 0..phi.len() {
            let brute = (0..=t).map(|s| -phi[s]).fold(0.0f64, f64::max);
            prop_assert_eq!(reg[t].to_bits(), brute.to_bits());
            prop_assert_eq!(psi[t].to_bits(), (phi[t] + brute).to_bits());
            prop_assert!(psi[t] >= 0.0);
        }
    }
}

#[test]
fn underloaded_queue_is_exponential_fill() {
    let inp = mm(0.5, 0.5, 1.0, 10, 5.0);
    let q = solve_q_subsystem(&inp).unwrap();
    let c = q.classes.get(1, 0);
    for (n, &t) in q.times.iter().enumerate() {
        let exact = 0.5 * (1.0 - (-t).exp());
        assert!((c.q[n] - exact).abs() < 1e-5, "t={t}: {} vs {exact}", c.q[n]);
    }
    assert_eq!(*c.r.last().unwrap(), 0.0);
}

#[test]
fn overload_rejects_excess_at_capacity() {
    let inp = mm(2.0, 0.5, 1.0, 1, 20.0);
    let q = solve_q_subsystem(&inp).unwrap();
    assert!(q.picard_residual[1] <= PICARD_TOL);
    assert!(q.complementarity[1] <= 1e-6);
    let c = q.classes.get(1, 0);
    let n = q.times.len() - 1;
    assert!((c.q[n] - 1.0).abs() < 1e-9);
    assert!(c.q.iter().all(|&v| v <= 1.0 + 1e-12));
    // long-run rejection rate λ - K / E[D]
    let m = q.index_of(10.0);
    let slope = (c.r[n] - c.r[m]) / (q.times[n] - q.times[m]);
    assert!((slope - 1.0).abs() < 1e-5, "{slope}");
}

#[test]
fn departures_match_markovian_identity() {
    for (rate, k) in [(0.5, 10), (2.0, 1), (3.0, 2)] {
        let inp = mm(rate, 0.5, 1.0, k, 20.0);
        let traj = solve_fluid(&inp).unwrap();
        let c = traj.q.classes.get(1, 0);
        let iq = trapezoid(&c.q, traj.q.dt);
        let worst = c.d.iter().zip(&iq).fold(0.0f64, |m, (d, i)| m.max((d - i).abs()));
        assert!(worst <= 1e-3, "rate {rate}: {worst}");
        assert!(traj.balance_residual(&inp) < 1e-9);
        let id = trapezoid(&c.departure_rate, traj.q.dt);
        let worst = c.d.iter().zip(&id).fold(0.0f64, |m, (d, i)| m.max((d - i).abs()));
        assert!(worst <= 1e-3, "rate {rate}: departure rate off by {worst}");
    }
}

#[test]
fn pure_drain_at_full_rate() {
    let mut inp = mm(0.0, 1.0, 1.0, 10, 2.0);
    inp.q0 = PerClass::broadcast(1, 1, vec![(1e9, 1.0)]);
    inp.z0 = PerClass::broadcast(1, 1, vec![(1.0, 1e9, 1.0)]);
    inp.dt = Some(0.01);
    let traj = solve_fluid(&inp).unwrap();
    let z = &traj.z.classes.get(1, 0);
    for (n, &t) in traj.q.times.iter().enumerate() {
        if (t - 1.0).abs() < 0.02 {
            continue;
        }
        let expect = if t < 1.0 { 1.0 } else { 0.0 };
        assert_eq!(z.z[n], expect, "t={t}");
        assert_eq!(traj.q.classes.get(1, 0).q[n], 1.0);
    }
}

#[test]
fn jumping_deadline_law_is_rejected() {
    let mut inp = mm(1.0, 1.0, 1.0, 10, 1.0);
    let t = crate::law::CdfTable { x: vec![0.0, 1.0, 2.0], f: vec![0.0, 0.5, 1.0] };
    inp.laws = PerClass::broadcast(1, 1, JointLaw::CustomTable { b: t.clone(), d: crate::law::CdfTable::point(1.0) });
    assert!(matches!(solve_q_subsystem(&inp), Err(Error::NoDensity(_))));
}
