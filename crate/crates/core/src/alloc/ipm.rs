//! Log-barrier interior point method for maximizing a separable concave
//! objective subject to linear equalities, linear inequalities and rotated
//! second-order cone constraints `x_a x_b >= x_c²`.
//!
//! Each centering step runs the infeasible-start Newton method (line search
//! on the norm of the primal-dual residual), so the starting point only has
//! to satisfy the inequalities strictly. The barrier weight `μ = 1/t` starts
//! at 1 and is halved until `m μ` drops below the requested gap.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::real::Real;

/// Concave objective `Σ_e f_e(x_e)` over the first `len()` variables.
pub trait SeparableObjective<T> {
    fn len(&self) -> usize;

    /// `(f_e(x), f_e'(x), f_e''(x))`, or `None` outside the domain.
    fn eval(&self, e: usize, x: T) -> Option<(T, T, T)>;

    /// Value only; used for reporting. Defaults to `eval`.
    fn value(&self, e: usize, x: T) -> Option<T> {
        self.eval(e, x).map(|v| v.0)
    }
}

/// `rhs - Σ coef·x >= 0`.
#[derive(Debug, Clone)]
pub struct LinearIneq<T> {
    pub coefs: Vec<(usize, T)>,
    pub rhs: T,
}

#[derive(Debug, Clone, Copy)]
pub enum ConeSide<T> {
    Var(usize),
    Const(T),
}

/// `a·b - c² >= 0` with `a, b > 0`.
#[derive(Debug, Clone)]
pub struct RotatedCone<T> {
    pub a: ConeSide<T>,
    pub b: usize,
    pub c: usize,
}

#[derive(Debug, Clone)]
pub struct BarrierProblem<T> {
    pub n: usize,
    pub eq_rows: Vec<Vec<(usize, T)>>,
    pub eq_rhs: Vec<T>,
    pub linear: Vec<LinearIneq<T>>,
    pub cones: Vec<RotatedCone<T>>,
}

#[derive(Debug, Clone, Copy)]
pub struct IpmOptions<T> {
    /// Stop once `m μ` is below this.
    pub gap: T,
    /// Newton decrement tolerance for centering.
    pub centering_tol: T,
    pub max_newton: usize,
    pub max_outer: usize,
}

impl<T: Real> Default for IpmOptions<T> {
    fn default() -> Self {
        IpmOptions {
            gap: T::lit(1e-9).max(T::default_epsilon() * T::lit(1e3)),
            centering_tol: T::lit(1e-10).max(T::default_epsilon() * T::lit(10.0)),
            max_newton: 200,
            max_outer: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IpmSolution<T> {
    pub x: Vec<T>,
    /// Multipliers of the linear inequalities, then of the cones.
    pub ineq_duals: Vec<T>,
    pub ineq_slacks: Vec<T>,
    /// Multipliers of the equality rows.
    pub eq_duals: Vec<T>,
    pub newton_steps: usize,
    pub kkt_residual: T,
    pub mu: T,
}

fn side<T: Real>(s: ConeSide<T>, x: &[T]) -> T {
    match s {
        ConeSide::Var(i) => x[i],
        ConeSide::Const(v) => v,
    }
}

impl<T: Real> BarrierProblem<T> {
    fn constraint_count(&self) -> usize {
        self.linear.len() + self.cones.len()
    }

    fn slacks(&self, x: &[T]) -> Option<Vec<T>> {
        let mut out = Vec::with_capacity(self.constraint_count());
        for l in &self.linear {
            let s = l.rhs - l.coefs.iter().fold(T::zero(), |acc, &(i, c)| acc + c * x[i]);
            if !(s > T::zero()) {
                return None;
            }
            out.push(s);
        }
        for c in &self.cones {
            let a = side(c.a, x);
            let b = x[c.b];
            let s = a * b - x[c.c] * x[c.c];
            if !(a > T::zero() && b > T::zero() && s > T::zero()) {
                return None;
            }
            out.push(s);
        }
        Some(out)
    }

    fn eq_residual(&self, x: &[T]) -> Vec<T> {
        self.eq_rows
            .iter()
            .zip(&self.eq_rhs)
            .map(|(row, &b)| row.iter().fold(T::zero(), |acc, &(i, c)| acc + c * x[i]) - b)
            .collect()
    }

    /// Gradient and Hessian of `-t f(x) - Σ log s_i(x)`.
    fn barrier_derivatives<O: SeparableObjective<T>>(
        &self,
        obj: &O,
        t: T,
        x: &[T],
        slacks: &[T],
        want_hessian: bool,
    ) -> Option<(DVector<T>, Option<DMatrix<T>>)> {
        let n = self.n;
        let mut grad = DVector::<T>::zeros(n);
        let mut hess = want_hessian.then(|| DMatrix::<T>::zeros(n, n));
        for e in 0..obj.len() {
            let (_, d1, d2) = obj.eval(e, x[e])?;
            grad[e] -= t * d1;
            if let Some(h) = hess.as_mut() {
                h[(e, e)] -= t * d2;
            }
        }
        for (l, &s) in self.linear.iter().zip(slacks) {
            // s = rhs - a·x, ∇(-log s) = a/s, ∇² = a aᵀ/s²
            for &(i, ci) in &l.coefs {
                grad[i] += ci / s;
            }
            if let Some(h) = hess.as_mut() {
                let s2 = s * s;
                for &(i, ci) in &l.coefs {
                    for &(k, ck) in &l.coefs {
                        h[(i, k)] += ci * ck / s2;
                    }
                }
            }
        }
        let two = T::lit(2.0);
        for (c, &s) in self.cones.iter().zip(&slacks[self.linear.len()..]) {
            let a = side(c.a, x);
            let b = x[c.b];
            let cv = x[c.c];
            // ∇s over the variable entries
            let mut entries: Vec<(usize, T)> = vec![(c.b, a), (c.c, -two * cv)];
            if let ConeSide::Var(ia) = c.a {
                entries.push((ia, b));
            }
            for &(i, gi) in &entries {
                grad[i] -= gi / s;
            }
            if let Some(h) = hess.as_mut() {
                let s2 = s * s;
                for &(i, gi) in &entries {
                    for &(k, gk) in &entries {
                        h[(i, k)] += gi * gk / s2;
                    }
                }
                // - ∇²s / s
                if let ConeSide::Var(ia) = c.a {
                    h[(ia, c.b)] -= T::one() / s;
                    h[(c.b, ia)] -= T::one() / s;
                }
                h[(c.c, c.c)] += two / s;
            }
        }
        Some((grad, hess))
    }

    fn dense_eq(&self) -> DMatrix<T> {
        let mut a = DMatrix::<T>::zeros(self.eq_rows.len(), self.n);
        for (r, row) in self.eq_rows.iter().enumerate() {
            for &(i, c) in row {
                a[(r, i)] += c;
            }
        }
        a
    }

    /// Residual norm of the centering system at `(x, ν)`.
    fn residual_norm<O: SeparableObjective<T>>(
        &self,
        obj: &O,
        t: T,
        a_eq: &DMatrix<T>,
        x: &[T],
        nu: &DVector<T>,
    ) -> Option<T> {
        let slacks = self.slacks(x)?;
        let (grad, _) = self.barrier_derivatives(obj, t, x, &slacks, false)?;
        let dual = grad + a_eq.transpose() * nu;
        let pri = self.eq_residual(x);
        let sq = dual.iter().fold(T::zero(), |acc, v| acc + *v * *v) + pri.iter().fold(T::zero(), |acc, v| acc + *v * *v);
        Some(sq.sqrt())
    }

    pub fn solve<O: SeparableObjective<T>>(&self, obj: &O, x0: Vec<T>, opts: &IpmOptions<T>) -> Result<IpmSolution<T>> {
        let n = self.n;
        let m_eq = self.eq_rows.len();
        let m = T::lit(self.constraint_count().max(1) as f64);
        let a_eq = self.dense_eq();
        if self.slacks(&x0).is_none() {
            return Err(Error::EmptyFeasible("starting point is not strictly feasible".into()));
        }
        let mut x = x0;
        let mut nu = DVector::<T>::zeros(m_eq);
        let mut t = T::one();
        let mut newton_steps = 0usize;
        let alpha = T::lit(0.01);
        let beta = T::lit(0.5);

        for outer in 0..opts.max_outer {
            // centering
            let mut centered = false;
            for _ in 0..opts.max_newton {
                let slacks = self.slacks(&x).expect("iterate stays interior");
                let Some((grad, Some(hess))) = self.barrier_derivatives(obj, t, &x, &slacks, true) else {
                    return Err(Error::domain("objective undefined at an interior iterate"));
                };
                let pri = DVector::from_vec(self.eq_residual(&x));
                let mut kkt = DMatrix::<T>::zeros(n + m_eq, n + m_eq);
                kkt.view_mut((0, 0), (n, n)).copy_from(&hess);
                kkt.view_mut((n, 0), (m_eq, n)).copy_from(&a_eq);
                kkt.view_mut((0, n), (n, m_eq)).copy_from(&a_eq.transpose());
                let mut rhs = DVector::<T>::zeros(n + m_eq);
                rhs.rows_mut(0, n).copy_from(&(-&grad));
                rhs.rows_mut(n, m_eq).copy_from(&(-&pri));
                let sol = kkt.clone().lu().solve(&rhs).or_else(|| {
                    // tiny regularization for rank-deficient Hessians
                    let mut reg = kkt;
                    for i in 0..n {
                        reg[(i, i)] += T::tol(1e-12);
                    }
                    reg.lu().solve(&rhs)
                });
                let Some(sol) = sol else {
                    return Err(Error::NotConverged {
                        iterations: newton_steps,
                        residual: f64::NAN,
                        context: "singular KKT system".into(),
                    });
                };
                let dx = sol.rows(0, n).into_owned();
                let nu_plus = sol.rows(n, m_eq).into_owned();
                let dnu = &nu_plus - &nu;
                newton_steps += 1;

                let decrement = (dx.transpose() * &hess * &dx)[(0, 0)];
                let pri_norm = pri.amax();
                let pri_tol = T::tol(1e-13);
                if pri_norm <= pri_tol && decrement * T::lit(0.5) <= opts.centering_tol {
                    nu = nu_plus;
                    centered = true;
                    break;
                }

                let r0 = self.residual_norm(obj, t, &a_eq, &x, &nu).expect("interior");
                let mut step = T::one();
                let mut moved = false;
                for _ in 0..34 {
                    let trial: Vec<T> = (0..n).map(|i| x[i] + step * dx[i]).collect();
                    let trial_nu = &nu + &dnu * step;
                    if let Some(r) = self.residual_norm(obj, t, &a_eq, &trial, &trial_nu) {
                        if r <= (T::one() - alpha * step) * r0 && r < r0 {
                            x = trial;
                            nu = trial_nu;
                            moved = true;
                            break;
                        }
                    }
                    step *= beta;
                }
                if !moved {
                    // residual cannot be reduced further at this precision
                    if pri_norm <= T::tol(1e-10) {
                        centered = true;
                        break;
                    }
                    return Err(Error::NotConverged {
                        iterations: newton_steps,
                        residual: pri_norm.as_f64(),
                        context: format!("line search failed at outer iteration {outer}"),
                    });
                }
            }
            if !centered {
                return Err(Error::NotConverged {
                    iterations: newton_steps,
                    residual: f64::NAN,
                    context: format!("centering did not converge at t = {}", t.as_f64()),
                });
            }
            if m / t <= opts.gap {
                break;
            }
            t *= T::lit(2.0);
        }

        let slacks = self.slacks(&x).expect("interior");
        let mut duals: Vec<T> = slacks.iter().map(|s| T::one() / (t * *s)).collect();
        let mut eq_duals: Vec<T> = nu.iter().map(|v| *v / t).collect();
        self.polish_duals(obj, &x, &slacks, &mut duals, &mut eq_duals)?;
        let kkt_residual = self.kkt_residual(obj, &x, &duals, &slacks, &eq_duals, &a_eq)?;
        Ok(IpmSolution {
            x,
            ineq_duals: duals,
            ineq_slacks: slacks,
            eq_duals,
            newton_steps,
            kkt_residual,
            mu: T::one() / t,
        })
    }

    /// Sparse gradients of every inequality slack.
    fn constraint_gradients(&self, x: &[T]) -> Vec<Vec<(usize, T)>> {
        let two = T::lit(2.0);
        let mut out: Vec<Vec<(usize, T)>> =
            self.linear.iter().map(|l| l.coefs.iter().map(|&(i, c)| (i, -c)).collect()).collect();
        for c in &self.cones {
            let mut g = vec![(c.b, side(c.a, x)), (c.c, -two * x[c.c])];
            if let ConeSide::Var(ia) = c.a {
                g.push((ia, x[c.b]));
            }
            out.push(g);
        }
        out
    }

    fn objective_gradient<O: SeparableObjective<T>>(&self, obj: &O, x: &[T]) -> Result<DVector<T>> {
        let mut grad = DVector::<T>::zeros(self.n);
        for e in 0..obj.len() {
            let (_, d1, _) = obj.eval(e, x[e]).ok_or_else(|| Error::domain("objective undefined at solution"))?;
            grad[e] = d1;
        }
        Ok(grad)
    }

    /// Barrier duals `μ/s` lose accuracy on active constraints where `s` is
    /// tiny. Re-fit the duals of active constraints (`λ > s`) and of the
    /// equalities by least squares on the stationarity condition.
    fn polish_duals<O: SeparableObjective<T>>(
        &self,
        obj: &O,
        x: &[T],
        slacks: &[T],
        duals: &mut [T],
        eq_duals: &mut [T],
    ) -> Result<()> {
        let grads = self.constraint_gradients(x);
        let active: Vec<usize> = (0..duals.len()).filter(|&i| duals[i] > slacks[i]).collect();
        let cols = active.len() + eq_duals.len();
        if cols == 0 {
            return Ok(());
        }
        // ∇f + Σ_inactive λ_i ∇s_i + Σ_active λ_i ∇s_i - Aᵀ ν = 0
        let mut target = -self.objective_gradient(obj, x)?;
        for (i, g) in grads.iter().enumerate() {
            if !active.contains(&i) {
                for &(v, c) in g {
                    target[v] -= duals[i] * c;
                }
            }
        }
        let mut mat = DMatrix::<T>::zeros(self.n, cols);
        for (col, &i) in active.iter().enumerate() {
            for &(v, c) in &grads[i] {
                mat[(v, col)] += c;
            }
        }
        for (r, row) in self.eq_rows.iter().enumerate() {
            for &(v, c) in row {
                mat[(v, active.len() + r)] -= c;
            }
        }
        let svd = mat.svd(true, true);
        let Ok(sol) = svd.solve(&target, T::tol(1e-14)) else {
            return Ok(());
        };
        if active.iter().enumerate().any(|(col, _)| sol[col] < T::zero()) {
            return Ok(());
        }
        for (col, &i) in active.iter().enumerate() {
            duals[i] = sol[col];
        }
        for r in 0..eq_duals.len() {
            eq_duals[r] = sol[active.len() + r];
        }
        Ok(())
    }

    /// Sup norm of stationarity, primal equality residual and complementarity
    /// for the original (unbarriered) problem.
    fn kkt_residual<O: SeparableObjective<T>>(
        &self,
        obj: &O,
        x: &[T],
        duals: &[T],
        slacks: &[T],
        eq_duals: &[T],
        a_eq: &DMatrix<T>,
    ) -> Result<T> {
        let mut stat = self.objective_gradient(obj, x)?;
        for (g, &lam) in self.constraint_gradients(x).iter().zip(duals) {
            for &(v, c) in g {
                stat[v] += lam * c;
            }
        }
        stat -= a_eq.transpose() * DVector::from_column_slice(eq_duals);
        let comp = duals.iter().zip(slacks).fold(T::zero(), |m, (l, s)| m.max(*l * *s));
        let pri = self.eq_residual(x).iter().fold(T::zero(), |m, r| m.max(r.abs()));
        Ok(stat.amax().max(comp).max(pri))
    }
}
