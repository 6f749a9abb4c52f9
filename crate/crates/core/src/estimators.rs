//! Gradient proxies built from output measurements: Jacobian feedback, the
//! two-point zero-order rule, and the exploration matrix of the averaged
//! zero-order iteration.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, OfoError, Result};
use crate::operators::StepSizeGroups;
use crate::qp::{LinearPlant, OutputModel, RegularizationParams};

/// Default trapezoid resolution per shortest sinusoid period.
pub const QUADRATURE_STEPS_PER_PERIOD: usize = 1_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    None,
    UniformBounded,
}

/// Seeded measurement of the plant output, `ŷ = Cx + Uw(k) + ν`, with
/// `ν` uniform on `[-e_y, e_y]` per component. The noise is a pure function
/// of `(seed, k, draw)`.
#[derive(Debug, Clone)]
pub struct MeasurementChannel<'a> {
    pub plant: &'a LinearPlant,
    pub noise: NoiseKind,
    pub e_y: f64,
    pub seed: u64,
}

impl<'a> MeasurementChannel<'a> {
    /// Channel using the plant's own error bound and seed.
    pub fn from_plant(plant: &'a LinearPlant) -> Self {
        let noise = if plant.e_y > 0.0 {
            NoiseKind::UniformBounded
        } else {
            NoiseKind::None
        };
        Self {
            plant,
            noise,
            e_y: plant.e_y,
            seed: plant.noise_seed,
        }
    }

    pub fn exact(plant: &'a LinearPlant) -> Self {
        Self {
            plant,
            noise: NoiseKind::None,
            e_y: 0.0,
            seed: 0,
        }
    }

    /// Noise vector for step `k` and probe index `draw`.
    pub fn noise(&self, k: usize, draw: u64) -> DVector<f64> {
        let m = self.plant.n_outputs();
        match self.noise {
            NoiseKind::None => DVector::zeros(m),
            NoiseKind::UniformBounded => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(((k as u64) << 4) | (draw & 0xf));
                DVector::from_fn(m, |_, _| self.e_y * rng.random_range(-1.0..=1.0))
            }
        }
    }

    pub fn measure(&self, x: &DVector<f64>, k: usize, draw: u64) -> Result<DVector<f64>> {
        Ok(self.plant.output(x, k)? + self.noise(k, draw))
    }
}

/// Free-function form of [`MeasurementChannel::measure`] for the nominal draw.
pub fn measure(channel: &MeasurementChannel<'_>, x: &DVector<f64>, k: usize) -> Result<DVector<f64>> {
    channel.measure(x, k, 0)
}

/// Primal and dual gradient proxies of the regularized Lagrangian.
#[derive(Debug, Clone, PartialEq)]
pub struct LagrangianGradient {
    pub primal: DVector<f64>,
    pub dual: DVector<f64>,
}

impl LagrangianGradient {
    /// Stacked `(∇_x, ∇_λ)` as used by the adaptive rule.
    pub fn stacked(&self) -> DVector<f64> {
        let (n, m) = (self.primal.len(), self.dual.len());
        let mut z = DVector::zeros(n + m);
        z.rows_mut(0, n).copy_from(&self.primal);
        z.rows_mut(n, m).copy_from(&self.dual);
        z
    }
}

/// Jacobian-feedback gradients evaluated at the measurement `ŷ`:
/// `∇φ(x) + Cᵀ∇f₀(ŷ) + CᵀGᵀλ + R_x x` and `g(ŷ) − R_λ λ`.
pub fn feedback_gradient(
    model: &OutputModel,
    reg: &RegularizationParams,
    gammas: &StepSizeGroups,
    channel: &MeasurementChannel<'_>,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    k: usize,
) -> Result<(LagrangianGradient, DVector<f64>)> {
    let y_hat = channel.measure(x, k, 0)?;
    let grad = feedback_gradient_at(model, reg, gammas, &channel.plant.c, x, lambda, &y_hat)?;
    Ok((grad, y_hat))
}

pub(crate) fn feedback_gradient_at(
    model: &OutputModel,
    reg: &RegularizationParams,
    gammas: &StepSizeGroups,
    c: &DMatrix<f64>,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    y_hat: &DVector<f64>,
) -> Result<LagrangianGradient> {
    check_dim("x", model.phi_b.len(), x.len())?;
    check_dim("multipliers", model.g_offset.len(), lambda.len())?;
    let (rx, rl) = reg.weights(&gammas.gamma_x, &gammas.gamma_lambda);
    let out_grad = model.grad_f0(y_hat) + model.g_mat.transpose() * lambda;
    let primal = model.grad_phi(x) + c.transpose() * out_grad + x.component_mul(&rx);
    let dual = model.g(y_hat) - lambda.component_mul(&rl);
    Ok(LagrangianGradient { primal, dual })
}

/// `(1/2ε) ξ [F(x + εξ) − F(x − εξ)]`.
pub fn two_point_estimate<F>(
    mut probe: F,
    x: &DVector<f64>,
    xi: &DVector<f64>,
    epsilon: f64,
    k: usize,
) -> Result<DVector<f64>>
where
    F: FnMut(&DVector<f64>, usize) -> Result<f64>,
{
    if !(epsilon > 0.0) {
        return Err(OfoError::InvalidParameter("epsilon must be positive".into()));
    }
    check_dim("exploration direction", x.len(), xi.len())?;
    if xi.iter().any(|v| !v.is_finite()) {
        return Err(OfoError::InvalidParameter(
            "exploration direction must be finite".into(),
        ));
    }
    let plus = probe(&(x + xi * epsilon), k)?;
    let minus = probe(&(x - xi * epsilon), k)?;
    Ok(xi * ((plus - minus) / (2.0 * epsilon)))
}

/// Zero-order primal proxy with the probe measurements it consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroOrderEstimate {
    pub primal: DVector<f64>,
    pub y_plus: DVector<f64>,
    pub y_minus: DVector<f64>,
}

/// `∇φ(x) + R_x x + (1/2ε)ξ[f₀(ŷ₊) − f₀(ŷ₋)] + (1/2ε)ξ λᵀ[g(ŷ₊) − g(ŷ₋)]`,
/// where `ŷ±` are measured at `x ± εξ` (probe draws 1 and 2).
pub fn zero_order_lagrangian_gradient(
    model: &OutputModel,
    reg: &RegularizationParams,
    gammas: &StepSizeGroups,
    channel: &MeasurementChannel<'_>,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    xi: &DVector<f64>,
    epsilon: f64,
    k: usize,
) -> Result<ZeroOrderEstimate> {
    if !(epsilon > 0.0) {
        return Err(OfoError::InvalidParameter("epsilon must be positive".into()));
    }
    check_dim("x", model.phi_b.len(), x.len())?;
    check_dim("exploration direction", x.len(), xi.len())?;
    check_dim("multipliers", model.g_offset.len(), lambda.len())?;
    let (rx, _) = reg.weights(&gammas.gamma_x, &gammas.gamma_lambda);
    let y_plus = channel.measure(&(x + xi * epsilon), k, 1)?;
    let y_minus = channel.measure(&(x - xi * epsilon), k, 2)?;
    let objective_diff = model.f0(&y_plus) - model.f0(&y_minus);
    let constraint_diff = lambda.dot(&(model.g(&y_plus) - model.g(&y_minus)));
    let primal = model.grad_phi(x)
        + x.component_mul(&rx)
        + xi * ((objective_diff + constraint_diff) / (2.0 * epsilon));
    Ok(ZeroOrderEstimate {
        primal,
        y_plus,
        y_minus,
    })
}

/// Exploration process `ξ(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExplorationSignal {
    /// `ξ_i(t) = a_i sin(2πt / P_i + φ_i)`.
    SinusoidBank {
        amplitudes: Vec<f64>,
        periods: Vec<f64>,
        phases: Vec<f64>,
    },
    /// A fixed direction.
    ConstantBasis { direction: Vec<f64> },
    /// Seeded random unit directions, redrawn every `hold` time units.
    RandomUnit { dim: usize, seed: u64, hold: f64 },
}

impl ExplorationSignal {
    pub fn validate(&self) -> Result<()> {
        match self {
            ExplorationSignal::SinusoidBank {
                amplitudes,
                periods,
                phases,
            } => {
                if amplitudes.len() != periods.len() || phases.len() != periods.len() {
                    return Err(OfoError::InvalidParameter(
                        "sinusoid bank vectors must have equal length".into(),
                    ));
                }
                if amplitudes.iter().any(|&a| !(a > 0.0)) || periods.iter().any(|&p| !(p > 0.0)) {
                    return Err(OfoError::InvalidParameter(
                        "sinusoid amplitudes and periods must be positive".into(),
                    ));
                }
                for i in 0..periods.len() {
                    for j in i + 1..periods.len() {
                        if periods[i] == periods[j] {
                            return Err(OfoError::InvalidParameter(
                                "sinusoid periods must be pairwise distinct".into(),
                            ));
                        }
                    }
                }
                Ok(())
            }
            ExplorationSignal::ConstantBasis { direction } => {
                if direction.iter().all(|&v| v == 0.0) {
                    return Err(OfoError::InvalidParameter(
                        "constant exploration direction must be nonzero".into(),
                    ));
                }
                Ok(())
            }
            ExplorationSignal::RandomUnit { dim, hold, .. } => {
                if *dim == 0 || !(*hold > 0.0) {
                    return Err(OfoError::InvalidParameter(
                        "random exploration needs dim > 0 and hold > 0".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ExplorationSignal::SinusoidBank { amplitudes, .. } => amplitudes.len(),
            ExplorationSignal::ConstantBasis { direction } => direction.len(),
            ExplorationSignal::RandomUnit { dim, .. } => *dim,
        }
    }

    pub fn sample(&self, t: f64) -> DVector<f64> {
        match self {
            ExplorationSignal::SinusoidBank {
                amplitudes,
                periods,
                phases,
            } => DVector::from_fn(amplitudes.len(), |i, _| {
                amplitudes[i] * (2.0 * PI * t / periods[i] + phases[i]).sin()
            }),
            ExplorationSignal::ConstantBasis { direction } => DVector::from_column_slice(direction),
            ExplorationSignal::RandomUnit { dim, seed, hold } => {
                let slot = (t / hold).floor() as i64;
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(slot as u64);
                let v = DVector::from_fn(*dim, |_, _| rng.sample::<f64, _>(StandardNormal));
                let norm = v.norm();
                if norm > 0.0 {
                    v / norm
                } else {
                    let mut e = DVector::zeros(*dim);
                    e[0] = 1.0;
                    e
                }
            }
        }
    }
}

/// Averaged exploration matrix with quadrature diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplorationGamma {
    pub matrix: DMatrix<f64>,
    /// Set when `T` is not a common integer multiple of the sinusoid periods.
    pub warning: Option<String>,
    pub quadrature_steps: usize,
}

/// `∫_{kT}^{(k+1)T} ξ(τ)ξ(τ)ᵀ dτ` by the composite trapezoid rule. With
/// `quadrature_steps = None` the rule uses 1,000 steps per shortest period.
pub fn exploration_gamma(
    signal: &ExplorationSignal,
    period: f64,
    k: usize,
    quadrature_steps: Option<usize>,
) -> Result<ExplorationGamma> {
    signal.validate()?;
    if !(period > 0.0) {
        return Err(OfoError::InvalidParameter(
            "averaging period must be positive".into(),
        ));
    }
    let mut warning = None;
    let mut finest = period;
    if let ExplorationSignal::SinusoidBank { periods, .. } = signal {
        for &p in periods {
            finest = finest.min(p);
            let ratio = period / p;
            if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) || ratio.round() < 1.0 {
                warning = Some(format!(
                    "averaging period {period} is not an integer multiple of sinusoid period {p}"
                ));
            }
        }
    }
    let steps = quadrature_steps
        .unwrap_or_else(|| (QUADRATURE_STEPS_PER_PERIOD as f64 * period / finest).ceil() as usize)
        .max(1);
    let n = signal.dim();
    let h = period / steps as f64;
    let t0 = k as f64 * period;
    let mut matrix = DMatrix::zeros(n, n);
    for s in 0..=steps {
        let weight = if s == 0 || s == steps { 0.5 * h } else { h };
        let xi = signal.sample(t0 + s as f64 * h);
        matrix.ger(weight, &xi, &xi, 1.0);
    }
    Ok(ExplorationGamma {
        matrix,
        warning,
        quadrature_steps: steps,
    })
}
