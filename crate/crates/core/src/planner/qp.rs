//! Dense strictly convex QP: minimize `1/2 x'Hx + c'x` subject to `R x <= b`.
//!
//! Dual active-set method (Goldfarb-Idnani). The unconstrained minimizer is the
//! starting point; the most violated row enters the working set at each outer
//! iteration and rows whose multipliers would turn negative leave it. Problems
//! here are tiny, so every step is computed directly from a fresh factorization.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::PlannerError;

/// Default Tikhonov term added to least-squares Hessians.
pub const REGULARIZATION: f64 = 1e-8;

const FEAS_TOL: f64 = 1e-11;

#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    /// Inequality rows `R_c`.
    pub r_c: DMatrix<f64>,
    /// Bounds `C_b`.
    pub c_b: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// One multiplier per inequality row, zero for inactive rows.
    pub multipliers: DVector<f64>,
    pub active: Vec<usize>,
    pub iterations: usize,
}

impl QpProblem {
    /// `1/2 |J x - e|^2 + reg/2 |x|^2`.
    pub fn least_squares(j: &DMatrix<f64>, e: &DVector<f64>, r_c: DMatrix<f64>, c_b: DVector<f64>) -> Self {
        let n = j.ncols();
        let hessian = j.transpose() * j + DMatrix::identity(n, n) * REGULARIZATION;
        let linear = -(j.transpose() * e);
        Self { hessian, linear, r_c, c_b }
    }

    pub fn unconstrained(hessian: DMatrix<f64>, linear: DVector<f64>) -> Self {
        let n = linear.len();
        Self { hessian, linear, r_c: DMatrix::zeros(0, n), c_b: DVector::zeros(0) }
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn validate(&self) -> Result<(), PlannerError> {
        let n = self.dim();
        if self.hessian.shape() != (n, n) || self.r_c.ncols() != n || self.r_c.nrows() != self.c_b.len() {
            return Err(PlannerError::InvalidProblem("inconsistent dimensions".into()));
        }
        let finite = |m: &[f64]| m.iter().all(|v| v.is_finite());
        if !finite(self.hessian.as_slice()) || !finite(self.linear.as_slice()) || !finite(self.r_c.as_slice()) {
            return Err(PlannerError::InvalidProblem("non-finite entries".into()));
        }
        if self.c_b.iter().any(|v| v.is_nan()) {
            return Err(PlannerError::InvalidProblem("NaN bound".into()));
        }
        let asym = (&self.hessian - self.hessian.transpose()).abs().max();
        if asym > 1e-9 * self.hessian.abs().max().max(1.0) {
            return Err(PlannerError::InvalidProblem("cost matrix is not symmetric".into()));
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x)
    }

    /// Largest of the stationarity, primal feasibility, dual feasibility and
    /// complementarity residuals.
    pub fn kkt_residual(&self, x: &DVector<f64>, multipliers: &DVector<f64>) -> f64 {
        let grad = &self.hessian * x + &self.linear + self.r_c.transpose() * multipliers;
        let slack = &self.c_b - &self.r_c * x;
        let mut worst = grad.amax();
        for i in 0..slack.len() {
            let lam = multipliers[i];
            worst = worst.max((-slack[i]).max(0.0)).max((-lam).max(0.0));
            if slack[i].is_finite() {
                worst = worst.max((lam * slack[i]).abs());
            }
        }
        worst
    }
}

fn factor(h: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, PlannerError> {
    Cholesky::new(h.clone()).ok_or_else(|| PlannerError::InvalidProblem("cost matrix is not positive definite".into()))
}

pub fn solve_qp(problem: &QpProblem) -> Result<QpSolution, PlannerError> {
    problem.validate()?;
    let n = problem.dim();
    let m = problem.c_b.len();
    let chol = factor(&problem.hessian)?;
    let mut x = -chol.solve(&problem.linear);
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let max_iter = 50 * (n + m + 1);

    // GI works with rows a'x >= b'; here a = -R_i, b' = -C_i
    let normal = |i: usize| -> DVector<f64> { -problem.r_c.row(i).transpose() };
    let scale: Vec<f64> = (0..m).map(|i| 1.0 + problem.r_c.row(i).amax()).collect();
    let slack = |x: &DVector<f64>, i: usize| -> f64 { problem.c_b[i] - problem.r_c.row(i).dot(&x.transpose()) };

    loop {
        let mut p = None;
        let mut worst = 0.0;
        for i in 0..m {
            if active.contains(&i) {
                continue;
            }
            let s = slack(&x, i) / scale[i];
            if s < -FEAS_TOL && s < worst {
                worst = s;
                p = Some(i);
            }
        }
        let Some(p) = p else { break };
        let np = normal(p);
        let mut u_p = 0.0;

        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(PlannerError::QpIterationLimit(max_iter));
            }
            let hinv_np = chol.solve(&np);
            let (z, r) = if active.is_empty() {
                (hinv_np.clone(), DVector::zeros(0))
            } else {
                let nmat = DMatrix::from_columns(&active.iter().map(|&i| normal(i)).collect::<Vec<_>>());
                let hinv_n = chol.solve(&nmat);
                let gram = nmat.transpose() * &hinv_n;
                let gram_chol = Cholesky::new(gram)
                    .ok_or_else(|| PlannerError::InvalidProblem("degenerate working set".into()))?;
                let r = gram_chol.solve(&(nmat.transpose() * &hinv_np));
                (&hinv_np - &hinv_n * &r, r)
            };

            // partial step: first active multiplier to reach zero
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (k, &rk) in r.iter().enumerate() {
                if rk > 1e-14 {
                    let t = u[k] / rk;
                    if t < t1 {
                        t1 = t;
                        drop = Some(k);
                    }
                }
            }
            let znp = z.dot(&np);
            let t2 = if z.amax() <= 1e-14 * (1.0 + np.amax()) || znp <= 0.0 {
                f64::INFINITY
            } else {
                -slack(&x, p) / znp
            };

            if t1.is_infinite() && t2.is_infinite() {
                let mut rows = active.clone();
                rows.sort_unstable();
                return Err(PlannerError::Infeasible { row: p, active: rows });
            }
            if t2.is_infinite() {
                for k in 0..u.len() {
                    u[k] -= t1 * r[k];
                }
                u_p += t1;
                let k = drop.expect("finite partial step has a blocking row");
                active.remove(k);
                u.remove(k);
                continue;
            }
            let t = t1.min(t2);
            x += &z * t;
            for k in 0..u.len() {
                u[k] -= t * r[k];
            }
            u_p += t;
            if t2 <= t1 {
                active.push(p);
                u.push(u_p);
                break;
            }
            let k = drop.expect("partial step has a blocking row");
            active.remove(k);
            u.remove(k);
        }
    }

    let mut multipliers = DVector::zeros(m);
    for (k, &i) in active.iter().enumerate() {
        multipliers[i] = u[k].max(0.0);
    }
    if !active.is_empty() {
        if let Some((xr, lam)) = polish(problem, &active) {
            let feasible = (0..m).all(|i| slack(&xr, i) >= -FEAS_TOL * scale[i]);
            if feasible && lam.iter().all(|&l| l >= -1e-12) {
                x = xr;
                for (k, &i) in active.iter().enumerate() {
                    multipliers[i] = lam[k].max(0.0);
                }
            }
        }
    }
    let mut active_sorted = active;
    active_sorted.sort_unstable();
    Ok(QpSolution { x, multipliers, active: active_sorted, iterations })
}

/// Solves the equality-constrained KKT system of the final working set, which
/// removes the drift the dual iterations accumulate on ill-conditioned costs.
fn polish(problem: &QpProblem, active: &[usize]) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = problem.dim();
    let k = active.len();
    let mut kkt = DMatrix::zeros(n + k, n + k);
    let mut rhs = DVector::zeros(n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&problem.hessian);
    rhs.rows_mut(0, n).copy_from(&(-&problem.linear));
    for (j, &i) in active.iter().enumerate() {
        for c in 0..n {
            kkt[(n + j, c)] = problem.r_c[(i, c)];
            kkt[(c, n + j)] = problem.r_c[(i, c)];
        }
        rhs[n + j] = problem.c_b[i];
    }
    let lu = kkt.clone().lu();
    let mut sol = lu.solve(&rhs)?;
    // one step of iterative refinement
    let corr = lu.solve(&(&rhs - &kkt * &sol))?;
    sol += corr;
    if !sol.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some((sol.rows(0, n).into_owned(), sol.rows(n, k).into_owned()))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use nalgebra::LU;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force reference: every subset of rows taken as equalities, KKT
    /// system solved, best primal/dual feasible candidate returned.
    pub(crate) fn brute_force(problem: &QpProblem) -> Option<DVector<f64>> {
        let n = problem.dim();
        let m = problem.c_b.len();
        let mut best: Option<(f64, DVector<f64>)> = None;
        for mask in 0u32..(1 << m) {
            let rows: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
            if rows.len() > n {
                continue;
            }
            let k = rows.len();
            let mut kkt = DMatrix::zeros(n + k, n + k);
            let mut rhs = DVector::zeros(n + k);
            kkt.view_mut((0, 0), (n, n)).copy_from(&problem.hessian);
            rhs.rows_mut(0, n).copy_from(&(-&problem.linear));
            for (j, &i) in rows.iter().enumerate() {
                for c in 0..n {
                    kkt[(n + j, c)] = problem.r_c[(i, c)];
                    kkt[(c, n + j)] = problem.r_c[(i, c)];
                }
                rhs[n + j] = problem.c_b[i];
            }
            let Some(sol) = LU::new(kkt).solve(&rhs) else { continue };
            let x = sol.rows(0, n).into_owned();
            if sol.rows(n, k).iter().any(|&l| l < -1e-9) {
                continue;
            }
            if (&problem.r_c * &x - &problem.c_b).iter().any(|&v| v > 1e-9) {
                continue;
            }
            let f = problem.objective(&x);
            if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                best = Some((f, x));
            }
        }
        best.map(|(_, x)| x)
    }

    /// Random strictly convex problem that is feasible at a random point.
    pub(crate) fn random_problem(rng: &mut ChaCha8Rng) -> QpProblem {
        let n = rng.random_range(1..=9);
        let m = rng.random_range(0..=6);
        let a = DMatrix::from_fn(n + 2, n, |_, _| rng.random_range(-1.0..1.0));
        let hessian = a.transpose() * &a + DMatrix::identity(n, n) * 0.1;
        let linear = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        let r_c = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let x0 = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
        let c_b = &r_c * &x0 + DVector::from_fn(m, |_, _| rng.random_range(0.0..0.3));
        QpProblem { hessian, linear, r_c, c_b }
    }

    fn e1(n: usize) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(1, n);
        j[(0, 0)] = 1.0;
        j
    }

    #[test]
    fn unconstrained_least_norm() {
        let p = QpProblem::least_squares(&e1(9), &DVector::from_element(1, 1.0), DMatrix::zeros(0, 9), DVector::zeros(0));
        let s = solve_qp(&p).unwrap();
        assert!((s.x[0] - 1.0).abs() < 1e-7);
        assert!(s.x.rows(1, 8).amax() < 1e-15);
    }

    #[test]
    fn single_bound_becomes_active() {
        let p = QpProblem::least_squares(&e1(9), &DVector::from_element(1, 1.0), e1(9), DVector::from_element(1, 0.5));
        let s = solve_qp(&p).unwrap();
        assert!((s.x[0] - 0.5).abs() < 1e-12);
        assert_eq!(s.active, vec![0]);
        assert!(p.kkt_residual(&s.x, &s.multipliers) < 1e-8);
    }

    #[test]
    fn zero_target_gives_zero() {
        let p = QpProblem::least_squares(&DMatrix::identity(9, 9), &DVector::zeros(9), DMatrix::zeros(0, 9), DVector::zeros(0));
        assert_eq!(solve_qp(&p).unwrap().x, DVector::zeros(9));
    }

    #[test]
    fn contradictory_rows_are_reported() {
        // x0 <= -1 and -x0 <= -1
        let r = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 1.0, 0.0, -1.0, 0.0]);
        let b = DVector::from_row_slice(&[5.0, -1.0, -1.0]);
        let p = QpProblem { hessian: DMatrix::identity(2, 2), linear: DVector::zeros(2), r_c: r, c_b: b };
        match solve_qp(&p) {
            Err(PlannerError::Infeasible { row, active }) => {
                assert!(row == 1 || row == 2);
                assert!(active.contains(&(3 - row)));
            }
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn rejects_indefinite_cost() {
        let mut h = DMatrix::identity(2, 2);
        h[(1, 1)] = -1.0;
        assert!(matches!(
            solve_qp(&QpProblem::unconstrained(h, DVector::zeros(2))),
            Err(PlannerError::InvalidProblem(_))
        ));
    }

    #[test]
    fn matches_brute_force_on_random_problems() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let p = random_problem(&mut rng);
            let s = solve_qp(&p).unwrap();
            let reference = brute_force(&p).expect("problem is feasible by construction");
            assert!((&s.x - &reference).amax() < 1e-6);
            assert!(p.kkt_residual(&s.x, &s.multipliers) < 1e-8);
        }
    }
}
