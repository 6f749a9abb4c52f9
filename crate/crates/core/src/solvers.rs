//! Heterogeneous projected-gradient and primal-dual iterations with the
//! Γ(x) switching rule, online runs over a scenario, and step-size
//! bisection.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::adaptive::{adapt_all, AdaptiveConfig};
use crate::error::{check_dim, OfoError, Result};
use crate::estimators::{
    feedback_gradient, zero_order_lagrangian_gradient, ExplorationSignal, LagrangianGradient,
    MeasurementChannel,
};
use crate::operators::{lagrangian_gradient, StepSizeGroups};
use crate::projection::{DualBox, Projector, MEMBERSHIP_TOL};
use crate::qp::{BlockPartition, OutputModel, QuadraticProgram, RegularizationParams};
use crate::scenario::ScenarioTimeline;

/// Iterates with any coordinate beyond this magnitude count as diverged.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// Fraction of `λ_max` at which a multiplier is reported as saturated.
pub const SATURATION_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Estimator {
    Exact,
    JacobianFeedback,
    /// Two-point probing along `ξ(k·sample_dt)`.
    ZeroOrder {
        epsilon: f64,
        signal: ExplorationSignal,
        sample_dt: f64,
    },
}

/// Solver settings. The common step size `α` lives in [`StepSizeGroups`].
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub estimator: Estimator,
    pub regularization: RegularizationParams,
    pub switching: bool,
    pub max_steps: Option<usize>,
    pub membership_tol: f64,
}

impl SolverConfig {
    pub fn new(estimator: Estimator, regularization: RegularizationParams, switching: bool) -> Self {
        Self {
            estimator,
            regularization,
            switching,
            max_steps: None,
            membership_tol: MEMBERSHIP_TOL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.regularization.is_off() {
            self.regularization.validate()?;
        }
        if self.max_steps == Some(0) {
            return Err(OfoError::InvalidParameter("max_steps must be at least 1".into()));
        }
        if !(self.membership_tol >= 0.0) {
            return Err(OfoError::InvalidParameter(
                "membership tolerance must be nonnegative".into(),
            ));
        }
        if let Estimator::ZeroOrder {
            epsilon,
            signal,
            sample_dt,
        } = &self.estimator
        {
            signal.validate()?;
            if !(*epsilon > 0.0 && *sample_dt > 0.0) {
                return Err(OfoError::InvalidParameter(
                    "zero-order epsilon and sample_dt must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One time step of the problem: the composed program, the output-space
/// model it came from (needed by feedback estimators) and the dual box.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub k: usize,
    pub qp: QuadraticProgram,
    pub model: Option<OutputModel>,
    pub dual_box: DualBox,
}

impl Stage {
    pub fn from_qp(qp: QuadraticProgram, dual_box: DualBox) -> Result<Self> {
        check_dim("dual box", qp.m(), dual_box.dim())?;
        Ok(Self {
            k: 0,
            qp,
            model: None,
            dual_box,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimalDualState {
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
    pub k: usize,
    pub gamma_snapshot: StepSizeGroups,
    pub gradient_cache: Option<DVector<f64>>,
}

impl PrimalDualState {
    /// `x⁰ = Proj_X(0)`, `λ⁰ = 0`.
    pub fn initial(inputs: &BlockPartition, m: usize, gammas: &StepSizeGroups) -> Result<Self> {
        Ok(Self {
            x: inputs.project(&DVector::zeros(inputs.dim()))?,
            lambda: DVector::zeros(m),
            k: 0,
            gamma_snapshot: gammas.clone(),
            gradient_cache: None,
        })
    }

    pub fn stacked(&self) -> DVector<f64> {
        stack(&self.x, &self.lambda)
    }
}

pub(crate) fn stack(x: &DVector<f64>, lambda: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(x.len() + lambda.len());
    z.rows_mut(0, x.len()).copy_from(x);
    z.rows_mut(x.len(), lambda.len()).copy_from(lambda);
    z
}

/// `diag(γ)` if the tentative point `x − α diag(γ) ∇` lies in `set`
/// (inclusive, within `tol`), otherwise the identity. Returned as the
/// diagonal.
pub fn gamma_switch(
    x: &DVector<f64>,
    gamma: &DVector<f64>,
    alpha: f64,
    grad: &DVector<f64>,
    set: &dyn Projector,
    tol: f64,
) -> DVector<f64> {
    let tentative = x - grad.component_mul(gamma) * alpha;
    if set.contains(&tentative, tol) {
        gamma.clone()
    } else {
        DVector::from_element(x.len(), 1.0)
    }
}

/// Result of one projected update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
    /// Diagonal scaling actually applied, stacked over `(x, λ)`.
    pub effective_gamma: DVector<f64>,
    /// True when any block fell back to the identity.
    pub switched: bool,
}

/// Blockwise primal descent and dual ascent with the given gradient
/// `(∇_x, ∇_λ)`. Each block reads only its own coordinates and `λ`.
pub fn primal_dual_update(
    inputs: &BlockPartition,
    dual_box: &DualBox,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    grad: &LagrangianGradient,
    gammas: &StepSizeGroups,
    switching: bool,
    tol: f64,
) -> Result<StepOutcome> {
    let n = inputs.dim();
    let m = dual_box.dim();
    check_dim("x", n, x.len())?;
    check_dim("multipliers", m, lambda.len())?;
    check_dim("primal gradient", n, grad.primal.len())?;
    check_dim("dual gradient", m, grad.dual.len())?;
    check_dim("primal step sizes", n, gammas.gamma_x.len())?;
    check_dim("dual step sizes", m, gammas.gamma_lambda.len())?;
    let alpha = gammas.alpha;
    let mut x_next = x.clone();
    let mut effective = DVector::zeros(n + m);
    let mut switched = false;
    for block in inputs.blocks() {
        let (start, len) = (block.range.start, block.range.len());
        let xi = x.rows(start, len).into_owned();
        let gi = grad.primal.rows(start, len).into_owned();
        let gamma_i = gammas.gamma_x.rows(start, len).into_owned();
        let scale = if switching {
            let s = gamma_switch(&xi, &gamma_i, alpha, &gi, &block.set, tol);
            switched |= s != gamma_i;
            s
        } else {
            gamma_i
        };
        let step = xi - gi.component_mul(&scale) * alpha;
        x_next.rows_mut(start, len).copy_from(&block.set.project(&step)?);
        effective.rows_mut(start, len).copy_from(&scale);
    }
    // Ascent: the tentative dual point is λ + αΓ_λ∇_λ.
    let dual_scale = if switching && m > 0 {
        let neg = -&grad.dual;
        let s = gamma_switch(lambda, &gammas.gamma_lambda, alpha, &neg, dual_box, tol);
        switched |= s != gammas.gamma_lambda;
        s
    } else {
        gammas.gamma_lambda.clone()
    };
    let lambda_next = dual_box.project(&(lambda + grad.dual.component_mul(&dual_scale) * alpha))?;
    effective.rows_mut(n, m).copy_from(&dual_scale);
    Ok(StepOutcome {
        x: x_next,
        lambda: lambda_next,
        effective_gamma: effective,
        switched,
    })
}

/// One exact-gradient primal-dual step on a fixed program.
pub fn exact_step(
    qp: &QuadraticProgram,
    dual_box: &DualBox,
    reg: &RegularizationParams,
    gammas: &StepSizeGroups,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    switching: bool,
    tol: f64,
) -> Result<StepOutcome> {
    let (primal, dual) = lagrangian_gradient(qp, reg, gammas, x, lambda)?;
    primal_dual_update(
        &qp.inputs,
        dual_box,
        x,
        lambda,
        &LagrangianGradient { primal, dual },
        gammas,
        switching,
        tol,
    )
}

/// `x⁺ = Proj_X{x − αΓ(x)∇f_p(x)}` for a program without constraints
/// rows (any rows present are ignored).
pub fn projected_gradient_step(
    qp: &QuadraticProgram,
    x: &DVector<f64>,
    config: &SolverConfig,
    gammas: &StepSizeGroups,
) -> Result<DVector<f64>> {
    let (rx, _) = config
        .regularization
        .weights(&gammas.gamma_x, &gammas.gamma_lambda);
    let grad = LagrangianGradient {
        primal: qp.objective_gradient(x)? + x.component_mul(&rx),
        dual: DVector::zeros(0),
    };
    let mut primal_only = gammas.clone();
    primal_only.gamma_lambda = DVector::zeros(0);
    let out = primal_dual_update(
        &qp.inputs,
        &DualBox::uniform(0, DualBox::DEFAULT_MAX),
        x,
        &DVector::zeros(0),
        &grad,
        &primal_only,
        config.switching,
        config.membership_tol,
    )?;
    Ok(out.x)
}

/// Gradient proxies at the current iterate, with the measured output when
/// the estimator uses one.
pub fn estimate_gradient(
    stage: &Stage,
    channel: Option<&MeasurementChannel<'_>>,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    gammas: &StepSizeGroups,
    config: &SolverConfig,
) -> Result<(LagrangianGradient, Option<DVector<f64>>)> {
    let reg = &config.regularization;
    let feedback = || -> Result<(&OutputModel, &MeasurementChannel<'_>)> {
        match (&stage.model, channel) {
            (Some(model), Some(channel)) => Ok((model, channel)),
            _ => Err(OfoError::InvalidParameter(
                "feedback estimators need an output model and a measurement channel".into(),
            )),
        }
    };
    match &config.estimator {
        Estimator::Exact => {
            let (primal, dual) = lagrangian_gradient(&stage.qp, reg, gammas, x, lambda)?;
            Ok((LagrangianGradient { primal, dual }, None))
        }
        Estimator::JacobianFeedback => {
            let (model, channel) = feedback()?;
            let (grad, y) = feedback_gradient(model, reg, gammas, channel, x, lambda, stage.k)?;
            Ok((grad, Some(y)))
        }
        Estimator::ZeroOrder {
            epsilon,
            signal,
            sample_dt,
        } => {
            let (model, channel) = feedback()?;
            let xi = signal.sample(stage.k as f64 * sample_dt);
            check_dim("exploration signal", x.len(), xi.len())?;
            let est = zero_order_lagrangian_gradient(
                model, reg, gammas, channel, x, lambda, &xi, *epsilon, stage.k,
            )?;
            let (_, rl) = reg.weights(&gammas.gamma_x, &gammas.gamma_lambda);
            let y_mid = (&est.y_plus + &est.y_minus) * 0.5;
            let dual = model.g(&y_mid) - lambda.component_mul(&rl);
            Ok((
                LagrangianGradient {
                    primal: est.primal,
                    dual,
                },
                Some(y_mid),
            ))
        }
    }
}

/// One online step from `state` on `stage`.
pub fn primal_dual_step(
    stage: &Stage,
    channel: Option<&MeasurementChannel<'_>>,
    state: &PrimalDualState,
    config: &SolverConfig,
    gammas: &StepSizeGroups,
) -> Result<PrimalDualState> {
    if !stage.dual_box.contains(&state.lambda, config.membership_tol) {
        return Err(OfoError::InvalidParameter(
            "multipliers outside the dual box".into(),
        ));
    }
    let (grad, _) = estimate_gradient(stage, channel, &state.x, &state.lambda, gammas, config)?;
    let out = primal_dual_update(
        &stage.qp.inputs,
        &stage.dual_box,
        &state.x,
        &state.lambda,
        &grad,
        gammas,
        config.switching,
        config.membership_tol,
    )?;
    Ok(PrimalDualState {
        x: out.x,
        lambda: out.lambda,
        k: state.k + 1,
        gamma_snapshot: gammas.clone(),
        gradient_cache: Some(grad.stacked()),
    })
}

/// Diagnostics for one online step; `x`, `lambda` are the iterate the step
/// started from.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
    pub y_true: DVector<f64>,
    pub y_measured: DVector<f64>,
    /// Mean step size per group after adaptation at this step.
    pub group_gamma: Vec<f64>,
    pub objective: f64,
    pub violation: f64,
    /// `‖Γ_eff (proxy − exact)‖` over the stacked gradient.
    pub gradient_error: f64,
    pub switched: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    pub group_names: Vec<String>,
    pub final_x: DVector<f64>,
    pub final_lambda: DVector<f64>,
    pub final_gammas: StepSizeGroups,
    /// Steps at which some multiplier was within 1% of its cap.
    pub saturated_steps: Vec<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Iterate `z^{(k)}`, `k = 0..=len`.
    pub fn z(&self, k: usize) -> DVector<f64> {
        match self.records.get(k) {
            Some(r) => stack(&r.x, &r.lambda),
            None => stack(&self.final_x, &self.final_lambda),
        }
    }
}

/// An aborted run with everything computed before the failure.
#[derive(Debug, Clone)]
pub struct RunError {
    pub error: OfoError,
    pub partial: Box<Trajectory>,
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} (after {} steps)",
            self.error,
            self.partial.records.len()
        )
    }
}

impl std::error::Error for RunError {}

/// Runs the online iteration over the scenario horizon (capped by
/// `max_steps`). With `adaptive` set, step sizes are adapted at every step
/// from the current and previous gradient proxies before the update.
pub fn run_online(
    scenario: &ScenarioTimeline,
    config: &SolverConfig,
    gammas: &StepSizeGroups,
    adaptive: Option<&AdaptiveConfig>,
) -> std::result::Result<Trajectory, RunError> {
    let group_names: Vec<String> = gammas.groups.iter().map(|g| g.name.clone()).collect();
    let mut traj = Trajectory {
        records: Vec::new(),
        group_names,
        final_x: DVector::zeros(0),
        final_lambda: DVector::zeros(0),
        final_gammas: gammas.clone(),
        saturated_steps: Vec::new(),
    };
    let fail = |error: OfoError, traj: Trajectory| RunError {
        error,
        partial: Box::new(traj),
    };
    let setup = (|| -> Result<PrimalDualState> {
        config.validate()?;
        scenario.validate()?;
        gammas.validate()?;
        check_dim("primal step sizes", scenario.n(), gammas.n())?;
        check_dim("dual step sizes", scenario.n_constraints(), gammas.m())?;
        if let Some(cfg) = adaptive {
            cfg.validate(&gammas.groups)?;
        }
        PrimalDualState::initial(&scenario.inputs, scenario.n_constraints(), gammas)
    })();
    let mut state = match setup {
        Ok(s) => s,
        Err(e) => return Err(fail(e, traj)),
    };
    traj.final_x = state.x.clone();
    traj.final_lambda = state.lambda.clone();

    let channel = MeasurementChannel::from_plant(&scenario.plant);
    let steps = config
        .max_steps
        .map_or(scenario.horizon, |s| s.min(scenario.horizon));
    let mut current = gammas.clone();
    for k in 0..steps {
        let record = (|| -> Result<(StepRecord, StepOutcome, DVector<f64>)> {
            let stage = scenario.stage(k)?;
            let (grad, y_meas) =
                estimate_gradient(&stage, Some(&channel), &state.x, &state.lambda, &current, config)?;
            let stacked = grad.stacked();
            if let Some(cfg) = adaptive {
                current = adapt_all(&current, &stacked, state.gradient_cache.as_ref(), cfg).0;
            }
            // The proxy must be rebuilt when regularization depends on γ.
            let grad = if adaptive.is_some() && !config.regularization.is_off() {
                estimate_gradient(&stage, Some(&channel), &state.x, &state.lambda, &current, config)?.0
            } else {
                grad
            };
            let (exact_p, exact_d) = lagrangian_gradient(
                &stage.qp,
                &config.regularization,
                &current,
                &state.x,
                &state.lambda,
            )?;
            let out = primal_dual_update(
                &stage.qp.inputs,
                &stage.dual_box,
                &state.x,
                &state.lambda,
                &grad,
                &current,
                config.switching,
                config.membership_tol,
            )?;
            let err = (grad.stacked() - stack(&exact_p, &exact_d)).component_mul(&out.effective_gamma);
            let y_true = scenario.plant.output(&state.x, k)?;
            let rec = StepRecord {
                k,
                x: state.x.clone(),
                lambda: state.lambda.clone(),
                y_measured: y_meas.unwrap_or_else(|| y_true.clone()),
                y_true,
                group_gamma: current.groups.iter().map(|g| current.group_mean(g)).collect(),
                objective: stage.qp.objective(&state.x)?,
                violation: stage.qp.violation(&state.x)?,
                gradient_error: err.norm(),
                switched: out.switched,
            };
            Ok((rec, out, stacked))
        })();
        let (rec, out, stacked) = match record {
            Ok(r) => r,
            Err(e) => return Err(fail(e, traj)),
        };
        traj.records.push(rec);
        let finite = |v: &DVector<f64>| v.iter().all(|c| c.is_finite() && c.abs() < DIVERGENCE_NORM);
        if !finite(&out.x) || !finite(&out.lambda) {
            return Err(fail(OfoError::Diverged { k }, traj));
        }
        if !scenario
            .dual_box
            .near_upper(&out.lambda, SATURATION_FRACTION)
            .is_empty()
        {
            traj.saturated_steps.push(k);
        }
        state = PrimalDualState {
            x: out.x,
            lambda: out.lambda,
            k: k + 1,
            gamma_snapshot: current.clone(),
            gradient_cache: Some(stacked),
        };
        traj.final_x = state.x.clone();
        traj.final_lambda = state.lambda.clone();
        traj.final_gammas = current.clone();
    }
    Ok(traj)
}

/// Outcome of iterating exact steps on a fixed program.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticSolution {
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
    pub iterations: usize,
    /// `‖z⁺ − z‖` at the last step.
    pub step_residual: f64,
    pub converged: bool,
}

/// Iterates exact steps from `x⁰ = Proj_X(0)`, `λ⁰ = 0` until the step
/// length drops to `tol` or `max_iter` is reached.
#[allow(clippy::too_many_arguments)]
pub fn solve_static(
    qp: &QuadraticProgram,
    dual_box: &DualBox,
    reg: &RegularizationParams,
    gammas: &StepSizeGroups,
    switching: bool,
    tol: f64,
    max_iter: usize,
) -> Result<StaticSolution> {
    let init = PrimalDualState::initial(&qp.inputs, qp.m(), gammas)?;
    solve_static_from(qp, dual_box, reg, gammas, switching, tol, max_iter, init.x, init.lambda)
}

#[allow(clippy::too_many_arguments)]
pub fn solve_static_from(
    qp: &QuadraticProgram,
    dual_box: &DualBox,
    reg: &RegularizationParams,
    gammas: &StepSizeGroups,
    switching: bool,
    tol: f64,
    max_iter: usize,
    x0: DVector<f64>,
    lambda0: DVector<f64>,
) -> Result<StaticSolution> {
    let (mut x, mut lambda) = (x0, lambda0);
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        let out = exact_step(qp, dual_box, reg, gammas, &x, &lambda, switching, MEMBERSHIP_TOL)?;
        residual = (stack(&out.x, &out.lambda) - stack(&x, &lambda)).norm();
        x = out.x;
        lambda = out.lambda;
        if !residual.is_finite() {
            return Err(OfoError::Diverged { k: it });
        }
        if residual <= tol {
            return Ok(StaticSolution {
                x,
                lambda,
                iterations: it,
                step_residual: residual,
                converged: true,
            });
        }
    }
    Ok(StaticSolution {
        x,
        lambda,
        iterations: max_iter,
        step_residual: residual,
        converged: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BisectOptions {
    pub lo: f64,
    pub hi: f64,
    /// Exact steps per stability probe.
    pub probe_steps: usize,
    /// Stop once `hi/lo` falls below `1 + rel_tol`.
    pub rel_tol: f64,
    pub max_evaluations: usize,
    /// Step at which the scenario is frozen for probing.
    pub k: usize,
}

impl Default for BisectOptions {
    fn default() -> Self {
        Self {
            lo: 1e-4,
            hi: 10.0,
            probe_steps: 2000,
            rel_tol: 1e-3,
            max_evaluations: 60,
            k: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BisectResult {
    /// Largest step size found stable.
    pub alpha_bar: f64,
    /// Smallest step size found unstable, if any.
    pub alpha_unstable: Option<f64>,
    pub evaluations: usize,
}

/// Stability probe: exact steps from the default start (shifted by one in
/// every coordinate if it is already a fixed point) stay finite and the
/// largest step length over the final tenth of the run is at most 99% of the
/// largest over the tenth starting at the midpoint (or below 1e-10). Limit
/// cycles and chaotic orbits kept bounded by the projections fail this.
pub fn is_stable(
    qp: &QuadraticProgram,
    dual_box: &DualBox,
    reg: &RegularizationParams,
    gammas: &StepSizeGroups,
    switching: bool,
    steps: usize,
) -> Result<bool> {
    let init = PrimalDualState::initial(&qp.inputs, qp.m(), gammas)?;
    let (mut x, mut lambda) = (init.x, init.lambda);
    // A start that is already a fixed point tells nothing; shift it.
    let first = exact_step(qp, dual_box, reg, gammas, &x, &lambda, switching, MEMBERSHIP_TOL)?;
    if (stack(&first.x, &first.lambda) - stack(&x, &lambda)).norm() <= 1e-12 {
        x = qp.inputs.project(&x.add_scalar(1.0))?;
        lambda = dual_box.project(&lambda.add_scalar(1.0))?;
    }
    let steps = steps.max(20);
    let window = steps / 10;
    let (mut r_mid, mut r_end) = (0.0f64, 0.0f64);
    for s in 0..steps {
        let out = exact_step(qp, dual_box, reg, gammas, &x, &lambda, switching, MEMBERSHIP_TOL)?;
        let r = (stack(&out.x, &out.lambda) - stack(&x, &lambda)).norm();
        x = out.x;
        lambda = out.lambda;
        if !r.is_finite() || x.amax() >= DIVERGENCE_NORM {
            return Ok(false);
        }
        if (steps / 2..steps / 2 + window).contains(&s) {
            r_mid = r_mid.max(r);
        }
        if s >= steps - window {
            r_end = r_end.max(r);
        }
    }
    Ok(r_end <= 1e-10 || r_end <= 0.99 * r_mid)
}

/// Largest stable common step size for the scenario frozen at `opts.k`,
/// using exact gradients and the fixed step-size profile of `gammas`.
pub fn bisect_alpha(
    scenario: &ScenarioTimeline,
    config: &SolverConfig,
    gammas: &StepSizeGroups,
    opts: &BisectOptions,
) -> Result<BisectResult> {
    if !(opts.lo > 0.0 && opts.lo < opts.hi) {
        return Err(OfoError::InvalidParameter(
            "bisection bracket must satisfy 0 < lo < hi".into(),
        ));
    }
    let stage = scenario.stage(opts.k)?;
    let stable = |alpha: f64| -> Result<bool> {
        let mut g = gammas.clone();
        g.alpha = alpha;
        is_stable(
            &stage.qp,
            &stage.dual_box,
            &config.regularization,
            &g,
            config.switching,
            opts.probe_steps,
        )
    };
    let mut evaluations = 2;
    if !stable(opts.lo)? {
        return Err(OfoError::InvalidParameter(format!(
            "no stable step size at the lower bracket {}",
            opts.lo
        )));
    }
    if stable(opts.hi)? {
        return Ok(BisectResult {
            alpha_bar: opts.hi,
            alpha_unstable: None,
            evaluations,
        });
    }
    let (mut lo, mut hi) = (opts.lo, opts.hi);
    while hi / lo > 1.0 + opts.rel_tol && evaluations < opts.max_evaluations {
        let mid = (lo * hi).sqrt();
        evaluations += 1;
        if stable(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(BisectResult {
        alpha_bar: lo,
        alpha_unstable: Some(hi),
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::{ConvexSet, Sense};
    use nalgebra::{dmatrix, dvector};

    fn example1(gamma: [f64; 2], alpha: f64) -> (QuadraticProgram, StepSizeGroups) {
        let set = ConvexSet::halfspace(dvector![1.0, 1.0], 8.0, Sense::Ge).unwrap();
        let qp = QuadraticProgram::without_constraints(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            0.0,
            set,
        )
        .unwrap();
        let mut g = StepSizeGroups::uniform(&qp.inputs, &[], alpha).unwrap();
        g.gamma_x = dvector![gamma[0], gamma[1]];
        (qp, g)
    }

    use nalgebra::DMatrix;

    fn run_pg(qp: &QuadraticProgram, g: &StepSizeGroups, switching: bool, iters: usize) -> DVector<f64> {
        let cfg = SolverConfig::new(Estimator::Exact, RegularizationParams::off(), switching);
        let mut x = qp.inputs.project(&DVector::zeros(2)).unwrap();
        for _ in 0..iters {
            x = projected_gradient_step(qp, &x, &cfg, g).unwrap();
        }
        x
    }

    #[test]
    fn switch_at_optimum_returns_identity() {
        let set = ConvexSet::halfspace(dvector![1.0, 1.0], 8.0, Sense::Ge).unwrap();
        let s = gamma_switch(
            &dvector![4.0, 4.0],
            &dvector![0.75, 1.25],
            0.01,
            &dvector![4.0, 4.0],
            &set,
            1e-10,
        );
        assert_eq!(s, dvector![1.0, 1.0]);
    }

    #[test]
    fn switch_keeps_gamma_inside_and_for_zero_gradient() {
        let set = ConvexSet::halfspace(dvector![1.0, 1.0], 8.0, Sense::Ge).unwrap();
        let gamma = dvector![0.75, 1.25];
        let inside = gamma_switch(&dvector![10.0, 10.0], &gamma, 1e-3, &dvector![1.0, 1.0], &set, 1e-10);
        assert_eq!(inside, gamma);
        let zero = gamma_switch(&dvector![4.0, 4.0], &gamma, 0.5, &dvector![0.0, 0.0], &set, 1e-10);
        assert_eq!(zero, gamma);
    }

    #[test]
    fn naive_heterogeneous_iteration_stops_at_5_3() {
        let (qp, g) = example1([0.75, 1.25], 0.1);
        let x = run_pg(&qp, &g, false, 2000);
        assert!((&x - dvector![5.0, 3.0]).norm() < 1e-9);
        assert!((qp.objective(&x).unwrap() - 17.0).abs() < 1e-8);
    }

    #[test]
    fn homogeneous_and_switched_iterations_reach_4_4() {
        let (qp, g) = example1([1.0, 1.0], 0.1);
        assert!((run_pg(&qp, &g, false, 2000) - dvector![4.0, 4.0]).norm() < 1e-9);
        let (qp, g) = example1([0.75, 1.25], 0.1);
        let x = run_pg(&qp, &g, true, 2000);
        assert!((x - dvector![4.0, 4.0]).norm() < 1e-9);
    }

    #[test]
    fn unconstrained_converges_to_linear_solve() {
        let a = dmatrix![3.0, 1.0; 1.0, 2.0];
        let b = dvector![1.0, -1.0];
        let qp = QuadraticProgram::without_constraints(a.clone(), b.clone(), 0.0, ConvexSet::Unbounded)
            .unwrap();
        let mut g = StepSizeGroups::uniform(&qp.inputs, &[], 0.2).unwrap();
        g.gamma_x = dvector![0.5, 1.5];
        let x = run_pg(&qp, &g, true, 3000);
        let expected = a.lu().solve(&(-b)).unwrap();
        assert!((x - expected).norm() < 1e-10);
    }

    fn scalar_qp() -> (QuadraticProgram, DualBox, StepSizeGroups) {
        let qp = QuadraticProgram::new(
            dmatrix![1.0],
            dvector![1.0],
            1.0,
            dmatrix![1.0],
            dvector![1.0],
            BlockPartition::single(1, ConvexSet::Unbounded).unwrap(),
        )
        .unwrap();
        let g = StepSizeGroups::uniform(&qp.inputs, &[crate::operators::ConstraintTag::Generic], 0.1)
            .unwrap();
        (qp, DualBox::uniform(1, 1e3), g)
    }

    #[test]
    fn scalar_one_step_by_hand() {
        // ∇_x = x + 1 + λ + p x = 1 at z = 0; ∇_λ = x + 1 − dλ = 1.
        let (qp, db, g) = scalar_qp();
        let reg = RegularizationParams::homogeneous(1.0, 1.0).unwrap();
        let out = exact_step(&qp, &db, &reg, &g, &dvector![0.0], &dvector![0.0], false, 1e-10).unwrap();
        assert!((out.x[0] + 0.1).abs() < 1e-15);
        assert!((out.lambda[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn no_rows_matches_projected_gradient() {
        let (qp, g) = example1([0.75, 1.25], 0.1);
        let reg = RegularizationParams::homogeneous(0.1, 0.1).unwrap();
        let cfg = SolverConfig::new(Estimator::Exact, reg, true);
        let x0 = dvector![6.0, 3.0];
        let pg = projected_gradient_step(&qp, &x0, &cfg, &g).unwrap();
        let pd = exact_step(&qp, &DualBox::uniform(0, 1e3), &reg, &g, &x0, &DVector::zeros(0), true, 1e-10)
            .unwrap();
        assert_eq!(pg, pd.x);
    }

    #[test]
    fn static_primal_dual_converges() {
        let (qp, db, g) = scalar_qp();
        let reg = RegularizationParams::homogeneous(0.01, 0.01).unwrap();
        let sol = solve_static(&qp, &db, &reg, &g, true, 1e-13, 100_000).unwrap();
        assert!(sol.converged);
        // KKT of the regularized problem: 1.01x + 1 + λ = 0, x + 1 = 0.01λ.
        let lambda = (1.01f64 - 1.0) / (0.01 * 1.01 + 1.0);
        let x = -(1.0 + lambda) / 1.01;
        assert!((sol.x[0] - x).abs() < 1e-9 && (sol.lambda[0] - lambda).abs() < 1e-9);
    }

    #[test]
    fn feedback_estimator_requires_model() {
        let (qp, db, g) = scalar_qp();
        let stage = Stage::from_qp(qp, db).unwrap();
        let cfg = SolverConfig::new(
            Estimator::JacobianFeedback,
            RegularizationParams::homogeneous(0.1, 0.1).unwrap(),
            false,
        );
        let state = PrimalDualState::initial(&stage.qp.inputs, 1, &g).unwrap();
        assert!(primal_dual_step(&stage, None, &state, &cfg, &g).is_err());
    }
}
