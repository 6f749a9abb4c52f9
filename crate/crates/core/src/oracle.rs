//! Exact saddle points of the regularized problem, reference trajectories
//! and tracking metrics.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{check_dim, OfoError, Result};
use crate::operators::StepSizeGroups;
use crate::projection::{DualBox, Projector};
use crate::qp::{sym_eigen, QuadraticProgram, RegularizationParams};
use crate::scenario::ScenarioTimeline;
use crate::solvers::{exact_step, run_online, stack, Estimator, SolverConfig, Trajectory};

pub const ORACLE_TOL: f64 = 1e-10;
pub const ORACLE_MAX_ITER: usize = 2_000_000;

/// Errors below this are treated as exhausted when estimating contraction.
pub const INFORMATIVE_ERROR: f64 = 1e-12;

/// Slack factor on the tracking-bound check.
pub const BOUND_SLACK: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SaddlePoint {
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
    /// Natural residual `‖z − Proj_K(z − F(z))‖`.
    pub residual: f64,
    pub iterations: usize,
}

impl SaddlePoint {
    pub fn z(&self) -> DVector<f64> {
        stack(&self.x, &self.lambda)
    }
}

/// Data of the affine map `F(z) = Mz + q` whose zeros over `K = X × D`
/// are the regularized saddle points.
struct Kkt<'a> {
    qp: &'a QuadraticProgram,
    dual_box: &'a DualBox,
    rx: DVector<f64>,
    rl: DVector<f64>,
}

impl Kkt<'_> {
    fn n(&self) -> usize {
        self.qp.n()
    }

    fn m(&self) -> usize {
        self.qp.m()
    }

    /// `(∇_x, −∇_λ)` of the regularized Lagrangian.
    fn field(&self, x: &DVector<f64>, lambda: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let qp = self.qp;
        let gx = &qp.a * x + &qp.b + qp.d_mat.transpose() * lambda + x.component_mul(&self.rx);
        let gl = -(&qp.d_mat * x + &qp.d_vec) + lambda.component_mul(&self.rl);
        (gx, gl)
    }

    fn residual(&self, x: &DVector<f64>, lambda: &DVector<f64>) -> Result<f64> {
        let (fx, fl) = self.field(x, lambda);
        let px = self.qp.inputs.project(&(x - fx))?;
        let pl = self.dual_box.project(&(lambda - fl))?;
        Ok(((x - px).norm_squared() + (lambda - pl).norm_squared()).sqrt())
    }

    /// Maximizing multiplier for a given `x`.
    fn best_lambda(&self, x: &DVector<f64>) -> DVector<f64> {
        let g = &self.qp.d_mat * x + &self.qp.d_vec;
        DVector::from_fn(self.m(), |j, _| {
            (g[j] / self.rl[j]).clamp(0.0, self.dual_box.lambda_max[j])
        })
    }

    fn full_matrix(&self) -> (DMatrix<f64>, DVector<f64>) {
        let (n, m) = (self.n(), self.m());
        let mut mat = DMatrix::zeros(n + m, n + m);
        let mut a = self.qp.a.clone();
        for i in 0..n {
            a[(i, i)] += self.rx[i];
        }
        mat.view_mut((0, 0), (n, n)).copy_from(&a);
        mat.view_mut((0, n), (n, m)).copy_from(&self.qp.d_mat.transpose());
        mat.view_mut((n, 0), (m, n)).copy_from(&(-&self.qp.d_mat));
        for j in 0..m {
            mat[(n + j, n + j)] = self.rl[j];
        }
        let q = stack(&self.qp.b, &(-&self.qp.d_vec));
        (mat, q)
    }

    /// Box bounds on the stacked `z`, when `X` is box-like.
    fn z_bounds(&self) -> Option<(DVector<f64>, DVector<f64>)> {
        let (lo, hi) = self.qp.inputs.box_bounds()?;
        Some((
            stack(&lo, &DVector::zeros(self.m())),
            stack(&hi, &self.dual_box.lambda_max),
        ))
    }
}

/// Unique saddle point of the regularized Lagrangian over `X × D`.
///
/// The multipliers are eliminated in closed form, leaving a smooth strongly
/// convex problem in `x` solved by restarted accelerated projected gradient.
/// For box-like `X` the result is finished with an active-set Newton pass on
/// the stacked system. An interior closed-form solution is accepted first.
pub fn solve_saddle_point(
    qp: &QuadraticProgram,
    reg: &RegularizationParams,
    gammas: &StepSizeGroups,
    dual_box: &DualBox,
    tol: f64,
) -> Result<SaddlePoint> {
    reg.validate()?;
    check_dim("dual box", qp.m(), dual_box.dim())?;
    check_dim("primal step sizes", qp.n(), gammas.n())?;
    check_dim("dual step sizes", qp.m(), gammas.m())?;
    let (rx, rl) = reg.weights(&gammas.gamma_x, &gammas.gamma_lambda);
    let kkt = Kkt {
        qp,
        dual_box,
        rx,
        rl,
    };
    let (n, m) = (kkt.n(), kkt.m());
    let (mat, q) = kkt.full_matrix();

    // Interior shortcut.
    if let Some(z) = mat.clone().lu().solve(&(-&q)) {
        let x = z.rows(0, n).into_owned();
        let lambda = z.rows(n, m).into_owned();
        let interior = qp.inputs.contains(&x, -1e-12)
            && lambda
                .iter()
                .zip(dual_box.lambda_max.iter())
                .all(|(&l, &hi)| l > 0.0 && l < hi);
        if interior {
            let residual = kkt.residual(&x, &lambda)?;
            if residual <= tol {
                return Ok(SaddlePoint {
                    x,
                    lambda,
                    residual,
                    iterations: 0,
                });
            }
        }
    }

    let h = &qp.a + DMatrix::from_diagonal(&kkt.rx);
    let eig = sym_eigen(&h)?;
    let (mut h_min, mut h_max) = (f64::INFINITY, 0.0f64);
    for &v in eig.eigenvalues.iter() {
        h_min = h_min.min(v);
        h_max = h_max.max(v);
    }
    let d_norm = if m > 0 {
        qp.d_mat.clone().svd(false, false).singular_values.max()
    } else {
        0.0
    };
    let rl_min = kkt.rl.iter().copied().fold(f64::INFINITY, f64::min);
    let lip = (h_max + if m > 0 { d_norm * d_norm / rl_min } else { 0.0 }).max(1e-300);
    let mu = h_min.max(1e-300).min(lip);
    let beta = {
        let s = (lip / mu).sqrt();
        (s - 1.0) / (s + 1.0)
    };
    let bounds = kkt.z_bounds();

    let grad = |x: &DVector<f64>| -> DVector<f64> {
        let lambda = kkt.best_lambda(x);
        &h * x + &qp.b + qp.d_mat.transpose() * lambda
    };

    let mut x = qp.inputs.project(&DVector::zeros(n))?;
    let mut x_prev = x.clone();
    let mut last_polish = f64::INFINITY;
    let mut residual = f64::INFINITY;
    for it in 0..ORACLE_MAX_ITER {
        let y = &x + (&x - &x_prev) * beta;
        let x_new = qp.inputs.project(&(&y - grad(&y) / lip))?;
        // Gradient-based restart drops the momentum.
        let restart = (&y - &x_new).dot(&(&x_new - &x)) > 0.0;
        x_prev = if restart { x_new.clone() } else { x };
        x = x_new;
        if it % 10 != 0 {
            continue;
        }
        let lambda = kkt.best_lambda(&x);
        residual = kkt.residual(&x, &lambda)?;
        if residual <= tol {
            return Ok(SaddlePoint {
                x,
                lambda,
                residual,
                iterations: it + 1,
            });
        }
        if let Some((lo, hi)) = &bounds {
            if residual < 1e-3 && residual < 0.1 * last_polish {
                last_polish = residual;
                if let Some(sp) = active_set_polish(&kkt, &mat, &q, lo, hi, &stack(&x, &lambda), tol)? {
                    return Ok(SaddlePoint {
                        iterations: it + 1,
                        ..sp
                    });
                }
            }
        }
    }
    Err(OfoError::OracleNotConverged {
        iterations: ORACLE_MAX_ITER,
        residual,
    })
}

/// Semismooth Newton on `z = Proj_box(z − F(z))` started from `z0`.
fn active_set_polish(
    kkt: &Kkt<'_>,
    mat: &DMatrix<f64>,
    q: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    z0: &DVector<f64>,
    tol: f64,
) -> Result<Option<SaddlePoint>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Set {
        Free,
        Lower,
        Upper,
    }
    let dim = z0.len();
    let n = kkt.n();
    let mut z = z0.clone();
    let mut prev: Option<Vec<Set>> = None;
    for _ in 0..50 {
        let f = mat * &z + q;
        let sets: Vec<Set> = (0..dim)
            .map(|i| {
                let t = z[i] - f[i];
                if t <= lo[i] {
                    Set::Lower
                } else if t >= hi[i] {
                    Set::Upper
                } else {
                    Set::Free
                }
            })
            .collect();
        if prev.as_ref() == Some(&sets) {
            break;
        }
        let free: Vec<usize> = (0..dim).filter(|&i| sets[i] == Set::Free).collect();
        let mut next = z.clone();
        for i in 0..dim {
            match sets[i] {
                Set::Lower => next[i] = lo[i],
                Set::Upper => next[i] = hi[i],
                Set::Free => next[i] = 0.0,
            }
        }
        if !free.is_empty() {
            let sub = DMatrix::from_fn(free.len(), free.len(), |a, b| mat[(free[a], free[b])]);
            let fixed_part = mat * &next + q;
            let rhs = DVector::from_fn(free.len(), |a, _| -fixed_part[free[a]]);
            let Some(sol) = sub.lu().solve(&rhs) else {
                return Ok(None);
            };
            for (a, &i) in free.iter().enumerate() {
                next[i] = sol[a];
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Ok(None);
        }
        z = next;
        prev = Some(sets);
    }
    let z = DVector::from_fn(dim, |i, _| z[i].clamp(lo[i], hi[i]));
    let x = z.rows(0, n).into_owned();
    let lambda = z.rows(n, dim - n).into_owned();
    let residual = kkt.residual(&x, &lambda)?;
    Ok((residual <= tol).then_some(SaddlePoint {
        x,
        lambda,
        residual,
        iterations: 0,
    }))
}

/// `‖z − T(z)‖` for one exact step `T` of the solver (switching applied
/// exactly as in the online iteration).
#[allow(clippy::too_many_arguments)]
pub fn fixed_point_residual(
    qp: &QuadraticProgram,
    reg: &RegularizationParams,
    gammas: &StepSizeGroups,
    dual_box: &DualBox,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    switching: bool,
) -> Result<f64> {
    let out = exact_step(
        qp,
        dual_box,
        reg,
        gammas,
        x,
        lambda,
        switching,
        crate::projection::MEMBERSHIP_TOL,
    )?;
    Ok((stack(&out.x, &out.lambda) - stack(x, lambda)).norm())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub n: usize,
    /// Stacked `(x*, λ*)` per step.
    pub z_star: Vec<DVector<f64>>,
    pub residuals: Vec<f64>,
    /// `max_k ‖z*^{(k+1)} − z*^{(k)}‖`.
    pub sigma: f64,
}

impl ReferenceTrajectory {
    pub fn x_star(&self, k: usize) -> DVector<f64> {
        self.z_star[k].rows(0, self.n).into_owned()
    }
}

/// Saddle points at every step (solved in parallel) and σ.
pub fn reference_trajectory(
    scenario: &ScenarioTimeline,
    reg: &RegularizationParams,
    gammas: &StepSizeGroups,
) -> Result<ReferenceTrajectory> {
    let solved: Vec<Result<SaddlePoint>> = (0..scenario.horizon)
        .into_par_iter()
        .map(|k| {
            let qp = scenario.qp_at(k)?;
            solve_saddle_point(&qp, reg, gammas, &scenario.dual_box, ORACLE_TOL).map_err(|e| match e {
                OfoError::OracleNotConverged { .. } => e,
                other => OfoError::InvalidParameter(format!("oracle at k = {k}: {other}")),
            })
        })
        .collect();
    let mut z_star = Vec::with_capacity(solved.len());
    let mut residuals = Vec::with_capacity(solved.len());
    for sp in solved {
        let sp = sp?;
        residuals.push(sp.residual);
        z_star.push(sp.z());
    }
    let sigma = z_star
        .windows(2)
        .map(|w| (&w[1] - &w[0]).norm())
        .fold(0.0, f64::max);
    Ok(ReferenceTrajectory {
        n: scenario.n(),
        z_star,
        residuals,
        sigma,
    })
}

/// Largest consecutive error ratio over the second half of the
/// informative prefix (errors above [`INFORMATIVE_ERROR`]).
pub fn contraction_estimate(errors: &[f64]) -> Option<f64> {
    let informative = errors
        .iter()
        .position(|&e| !(e > INFORMATIVE_ERROR))
        .unwrap_or(errors.len());
    let useful = &errors[..informative];
    if useful.len() < 4 {
        return None;
    }
    let start = useful.len() / 2;
    useful[start..]
        .windows(2)
        .map(|w| w[1] / w[0])
        .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))))
}

/// Default length of the static run behind [`static_contraction`].
pub const STATIC_CONTRACTION_STEPS: usize = 3000;

/// ĉ from a static run: the scenario frozen at step 0, exact gradients, the
/// given step sizes, errors against the single frozen saddle point.
pub fn static_contraction(
    scenario: &ScenarioTimeline,
    reg: &RegularizationParams,
    gammas: &StepSizeGroups,
    switching: bool,
    steps: usize,
) -> Result<Option<f64>> {
    let frozen = scenario.frozen_at(0, steps)?;
    let cfg = SolverConfig::new(Estimator::Exact, *reg, switching);
    let traj = run_online(&frozen, &cfg, gammas, None).map_err(|e| e.error)?;
    let sp = solve_saddle_point(&frozen.qp_at(0)?, reg, gammas, &frozen.dual_box, ORACLE_TOL)?;
    let z = sp.z();
    let errors: Vec<f64> = (0..traj.len()).map(|k| (traj.z(k) - &z).norm()).collect();
    Ok(contraction_estimate(&errors))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingReport {
    pub error_series: Vec<f64>,
    pub c_hat: Option<f64>,
    pub eps_phi_hat: f64,
    pub sigma: f64,
    pub alpha: f64,
    /// `(αε̂_φ + σ)/(1 − ĉ)`; `None` unless `0 ≤ ĉ < 1`.
    pub bound: Option<f64>,
    /// First step after which every error stays within the slackened bound.
    pub bound_satisfied_after: Option<usize>,
    pub tail_max: f64,
    pub e_f_hat: Option<f64>,
}

impl TrackingReport {
    /// Tail (second half) errors within the slackened bound.
    pub fn bound_holds(&self) -> bool {
        self.bound
            .is_some_and(|b| self.tail_max <= BOUND_SLACK * b)
    }

    pub fn with_drift(mut self, e_f_hat: f64) -> Self {
        self.e_f_hat = Some(e_f_hat);
        self
    }
}

/// Tracking errors against the reference. `c_hat` comes from a separate
/// static exact-gradient run (see [`contraction_estimate`]); when `None` it
/// is estimated from this trajectory's own errors.
pub fn tracking_report(
    trajectory: &Trajectory,
    reference: &ReferenceTrajectory,
    alpha: f64,
    c_hat: Option<f64>,
) -> Result<TrackingReport> {
    let len = trajectory.len().min(reference.z_star.len());
    if len == 0 {
        return Err(OfoError::InvalidParameter("empty trajectory".into()));
    }
    let error_series: Vec<f64> = (0..len)
        .map(|k| (trajectory.z(k) - &reference.z_star[k]).norm())
        .collect();
    let c_hat = c_hat.or_else(|| contraction_estimate(&error_series));
    let eps_phi_hat = trajectory
        .records
        .iter()
        .map(|r| r.gradient_error)
        .fold(0.0, f64::max);
    let sigma = reference.sigma;
    let bound = c_hat
        .filter(|&c| (0.0..1.0).contains(&c))
        .map(|c| (alpha * eps_phi_hat + sigma) / (1.0 - c));
    let bound_satisfied_after = bound.and_then(|b| {
        let limit = BOUND_SLACK * b;
        let last_bad = error_series.iter().rposition(|&e| e > limit);
        match last_bad {
            None => Some(0),
            Some(i) if i + 1 < len => Some(i + 1),
            Some(_) => None,
        }
    });
    let tail_max = error_series[len / 2..].iter().copied().fold(0.0, f64::max);
    Ok(TrackingReport {
        error_series,
        c_hat,
        eps_phi_hat,
        sigma,
        alpha,
        bound,
        bound_satisfied_after,
        tail_max,
        e_f_hat: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::ConstraintTag;
    use crate::projection::{ConvexSet, Sense};
    use crate::qp::BlockPartition;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn unconstrained_matches_linear_solve() {
        let a = dmatrix![2.0, 0.5; 0.5, 1.0];
        let b = dvector![1.0, -2.0];
        let qp = QuadraticProgram::without_constraints(a.clone(), b.clone(), 0.0, ConvexSet::Unbounded)
            .unwrap();
        let g = StepSizeGroups::uniform(&qp.inputs, &[], 0.1).unwrap();
        let reg = RegularizationParams::homogeneous(0.1, 0.1).unwrap();
        let sp = solve_saddle_point(&qp, &reg, &g, &DualBox::uniform(0, 1e3), 1e-10).unwrap();
        let expected = (a + DMatrix::identity(2, 2) * 0.1).lu().solve(&(-b)).unwrap();
        assert!((sp.x - expected).norm() < 1e-12);
    }

    #[test]
    fn example1_optimum_with_small_regularization() {
        let set = ConvexSet::halfspace(dvector![1.0, 1.0], 8.0, Sense::Ge).unwrap();
        let qp =
            QuadraticProgram::without_constraints(DMatrix::identity(2, 2), DVector::zeros(2), 0.0, set)
                .unwrap();
        let g = StepSizeGroups::uniform(&qp.inputs, &[], 0.1).unwrap();
        let reg = RegularizationParams::homogeneous(1e-6, 1e-6).unwrap();
        let sp = solve_saddle_point(&qp, &reg, &g, &DualBox::uniform(0, 1e3), 1e-10).unwrap();
        assert!((&sp.x - dvector![4.0, 4.0]).norm() < 1e-5);
        assert!((sp.x[0] - sp.x[1]).abs() < 1e-12);
    }

    fn boxed_qp() -> (QuadraticProgram, DualBox, StepSizeGroups) {
        let inputs = BlockPartition::single(
            2,
            ConvexSet::boxed(dvector![0.0, 0.0], dvector![10.0, 10.0]).unwrap(),
        )
        .unwrap();
        let qp = QuadraticProgram::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            0.0,
            dmatrix![-1.0, -1.0],
            dvector![8.0],
            inputs,
        )
        .unwrap();
        let g = StepSizeGroups::uniform(&qp.inputs, &[ConstraintTag::Generic], 0.05).unwrap();
        (qp, DualBox::uniform(1, 1e3), g)
    }

    #[test]
    fn constrained_saddle_is_fixed_point() {
        let (qp, db, mut g) = boxed_qp();
        let reg = RegularizationParams::homogeneous(1e-3, 1e-3).unwrap();
        let sp = solve_saddle_point(&qp, &reg, &g, &db, 1e-10).unwrap();
        assert!(sp.residual <= 1e-10);
        // Near x = [4, 4], λ = 4.
        assert!((&sp.x - dvector![4.0, 4.0]).norm() < 0.05);
        g.gamma_x = dvector![0.3, 2.0];
        for switching in [true, false] {
            let r = fixed_point_residual(&qp, &reg, &g, &db, &sp.x, &sp.lambda, switching).unwrap();
            assert!(r <= 1e-8, "{r}");
        }
        // Re-solving returns the same point.
        let again = solve_saddle_point(&qp, &reg, &g, &db, 1e-10).unwrap();
        assert!((again.z() - sp.z()).norm() < 1e-9);
    }

    #[test]
    fn example1_residual_at_5_3() {
        let set = ConvexSet::halfspace(dvector![1.0, 1.0], 8.0, Sense::Ge).unwrap();
        let qp =
            QuadraticProgram::without_constraints(DMatrix::identity(2, 2), DVector::zeros(2), 0.0, set)
                .unwrap();
        let mut g = StepSizeGroups::uniform(&qp.inputs, &[], 0.1).unwrap();
        g.gamma_x = dvector![0.75, 1.25];
        let reg = RegularizationParams::off();
        let db = DualBox::uniform(0, 1e3);
        let x = dvector![5.0, 3.0];
        let none = DVector::zeros(0);
        let plain = fixed_point_residual(&qp, &reg, &g, &db, &x, &none, false).unwrap();
        assert!(plain <= 1e-12);
        let switched = fixed_point_residual(&qp, &reg, &g, &db, &x, &none, true).unwrap();
        assert!(switched > 0.1, "{switched}");
    }

    #[test]
    fn contraction_of_geometric_sequence() {
        let e: Vec<f64> = (0..100).map(|k| 0.8f64.powi(k)).collect();
        assert!((contraction_estimate(&e).unwrap() - 0.8).abs() < 1e-12);
        assert!(contraction_estimate(&[1.0, 0.0]).is_none());
    }
}
