//! Comparison metrics for VPP band tracking experiments.

use crate::adaptive::AdaptiveConfig;
use crate::error::Result;
use crate::operators::StepSizeGroups;
use crate::qp::{RegularizationMode, RegularizationParams};
use crate::scenario::{vpp_step_scenario, NetworkParams, ScenarioTimeline};
use crate::solvers::{
    bisect_alpha, run_online, BisectOptions, Estimator, SolverConfig, Trajectory,
};

/// Steps the feeder power must stay in band to count as settled.
pub const BAND_WINDOW: usize = 20;

/// Steps at which any feeder band changes (excluding `k = 0`).
pub fn band_change_steps(scenario: &ScenarioTimeline) -> Vec<usize> {
    let bands = |k: usize| -> Vec<(f64, f64)> {
        scenario
            .feeder_outputs
            .iter()
            .map(|&j| scenario.output_bounds(k, j))
            .collect()
    };
    (1..scenario.horizon)
        .filter(|&k| bands(k) != bands(k - 1))
        .collect()
}

fn in_band(scenario: &ScenarioTimeline, traj: &Trajectory, k: usize, tol: f64) -> bool {
    let y = &traj.records[k].y_true;
    scenario.feeder_outputs.iter().all(|&j| {
        let (lo, hi) = scenario.output_bounds(k, j);
        y[j] >= lo - tol && y[j] <= hi + tol
    })
}

/// For each event step `t`, the delay `k − t` of the first `k ≥ t` from which
/// feeder power stays within band (plus `tol`) for [`BAND_WINDOW`] steps,
/// without running past the next event. `None` when it never settles.
pub fn iterations_to_band(
    scenario: &ScenarioTimeline,
    traj: &Trajectory,
    events: &[usize],
    tol: f64,
) -> Vec<Option<usize>> {
    let len = traj.records.len();
    events
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let end = events.get(i + 1).copied().unwrap_or(len).min(len);
            let mut run = 0;
            for k in t..end {
                if in_band(scenario, traj, k, tol) {
                    run += 1;
                    if run == BAND_WINDOW {
                        return Some(k + 1 - BAND_WINDOW - t);
                    }
                } else {
                    run = 0;
                }
            }
            None
        })
        .collect()
}

/// Largest voltage bound excursion over the run.
pub fn max_voltage_violation(scenario: &ScenarioTimeline, traj: &Trajectory) -> f64 {
    traj.records
        .iter()
        .flat_map(|r| {
            scenario.voltage_outputs.iter().map(move |&j| {
                let (lo, hi) = scenario.output_bounds(r.k, j);
                (r.y_true[j] - hi).max(lo - r.y_true[j]).max(0.0)
            })
        })
        .fold(0.0, f64::max)
}

/// Sum over steps of the input (DER) cost.
pub fn cumulative_der_cost(scenario: &ScenarioTimeline, traj: &Trajectory) -> Result<f64> {
    traj.records.iter().try_fold(0.0, |acc, r| {
        Ok(acc + scenario.output_model(r.k)?.phi(&r.x))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub name: String,
    pub iterations_to_band: Vec<Option<usize>>,
    pub max_voltage_violation: f64,
    pub cumulative_der_cost: f64,
    pub divergent: bool,
    pub error: Option<String>,
}

impl RunMetrics {
    /// Sum of settling delays, `None` if some event never settles.
    pub fn total_iterations(&self) -> Option<usize> {
        self.iterations_to_band.iter().copied().sum()
    }

    pub fn from_trajectory(
        name: &str,
        scenario: &ScenarioTimeline,
        traj: &Trajectory,
        band_tol: f64,
    ) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            iterations_to_band: iterations_to_band(
                scenario,
                traj,
                &band_change_steps(scenario),
                band_tol,
            ),
            max_voltage_violation: max_voltage_violation(scenario, traj),
            cumulative_der_cost: cumulative_der_cost(scenario, traj)?,
            divergent: !traj.saturated_steps.is_empty(),
            error: None,
        })
    }
}

/// Runs one configuration and scores it. Aborted runs are flagged
/// divergent rather than propagated.
pub fn evaluate(
    name: &str,
    scenario: &ScenarioTimeline,
    config: &SolverConfig,
    gammas: &StepSizeGroups,
    adaptive: Option<&AdaptiveConfig>,
    band_tol: f64,
) -> Result<(RunMetrics, Option<Trajectory>)> {
    match run_online(scenario, config, gammas, adaptive) {
        Ok(traj) => Ok((
            RunMetrics::from_trajectory(name, scenario, &traj, band_tol)?,
            Some(traj),
        )),
        Err(e) => {
            let events = band_change_steps(scenario);
            Ok((
                RunMetrics {
                    name: name.to_string(),
                    iterations_to_band: vec![None; events.len()],
                    max_voltage_violation: f64::INFINITY,
                    cumulative_der_cost: f64::INFINITY,
                    divergent: true,
                    error: Some(e.to_string()),
                },
                None,
            ))
        }
    }
}

/// Best common step size among `alpha_bar · fractions`: the non-divergent
/// run with the smallest total settling delay (ties go to the larger α).
pub fn best_fixed_alpha(
    scenario: &ScenarioTimeline,
    config: &SolverConfig,
    gammas: &StepSizeGroups,
    alpha_bar: f64,
    fractions: &[f64],
    band_tol: f64,
) -> Result<Option<(f64, RunMetrics)>> {
    let mut best: Option<(f64, RunMetrics)> = None;
    for &f in fractions {
        let mut g = gammas.clone();
        g.alpha = alpha_bar * f;
        let (metrics, _) = evaluate(&format!("fixed-{f}"), scenario, config, &g, None, band_tol)?;
        if metrics.divergent {
            continue;
        }
        let Some(total) = metrics.total_iterations() else {
            continue;
        };
        let better = match &best {
            None => true,
            Some((a, m)) => {
                let t = m.total_iterations().unwrap_or(usize::MAX);
                total < t || (total == t && g.alpha > *a)
            }
        };
        if better {
            best = Some((g.alpha, metrics));
        }
    }
    Ok(best)
}

/// The VPP band-step comparison: a heterogeneous network whose feeder band
/// jumps twice, tracked with feedback gradients under either a fixed common
/// step size or the cosine-similarity adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct VppStepDemo {
    pub params: NetworkParams,
    pub step_times: Vec<usize>,
    pub step_levels: Vec<f64>,
    pub band_tol: f64,
    /// Adaptive runs start from this fraction of the bisected `ᾱ`.
    pub adaptive_start: f64,
    /// Grid of `ᾱ` fractions searched for the best fixed step size.
    pub fixed_fractions: Vec<f64>,
    pub regularization: RegularizationParams,
}

impl Default for VppStepDemo {
    fn default() -> Self {
        Self {
            params: NetworkParams {
                weight_range: (0.2, 20.0),
                e_y: 1e-3,
                ..NetworkParams::default()
            },
            step_times: vec![200, 400],
            step_levels: vec![1.5, 3.0, 1.0],
            band_tol: 0.01,
            adaptive_start: 0.5,
            fixed_fractions: (1..=20).map(|i| i as f64 * 0.05).collect(),
            regularization: RegularizationParams {
                p: 1e-3,
                d: 1e-3,
                mode: RegularizationMode::Homogeneous,
            },
        }
    }
}

/// Outcome of one seed of the demo.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoComparison {
    pub noise_seed: u64,
    pub alpha_bar: f64,
    pub fixed_alpha: Option<f64>,
    pub fixed: Option<RunMetrics>,
    pub adaptive: RunMetrics,
}

impl DemoComparison {
    /// Adaptive settles strictly faster after every event and violates
    /// voltage limits no more than the best fixed run.
    pub fn adaptive_wins(&self) -> bool {
        let Some(fixed) = &self.fixed else {
            return !self.adaptive.divergent
                && self.adaptive.iterations_to_band.iter().all(Option::is_some);
        };
        !self.adaptive.divergent
            && self
                .adaptive
                .iterations_to_band
                .iter()
                .zip(&fixed.iterations_to_band)
                .all(|(a, f)| match (a, f) {
                    (Some(a), Some(f)) => a < f,
                    (Some(_), None) => true,
                    _ => false,
                })
            && self.adaptive.max_voltage_violation <= fixed.max_voltage_violation
    }
}

impl VppStepDemo {
    pub fn scenario(&self) -> Result<ScenarioTimeline> {
        vpp_step_scenario(&self.params, &self.step_times, &self.step_levels)
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig::new(Estimator::JacobianFeedback, self.regularization, true)
    }

    /// Bisects `ᾱ` once, then scores best-fixed against adaptive for the
    /// given measurement-noise seed.
    pub fn compare(&self, noise_seed: u64) -> Result<DemoComparison> {
        let mut scenario = self.scenario()?;
        scenario.plant.noise_seed = noise_seed;
        let config = self.solver_config();
        let gammas = scenario.default_groups(1.0)?;
        let alpha_bar = bisect_alpha(&scenario, &config, &gammas, &BisectOptions::default())?
            .alpha_bar;
        let best = best_fixed_alpha(
            &scenario,
            &config,
            &gammas,
            alpha_bar,
            &self.fixed_fractions,
            self.band_tol,
        )?;
        let mut start = gammas.clone();
        start.alpha = self.adaptive_start * alpha_bar;
        let adaptive_cfg = AdaptiveConfig::defaults_for(&start.groups);
        let (adaptive, _) = evaluate(
            "adaptive",
            &scenario,
            &config,
            &start,
            Some(&adaptive_cfg),
            self.band_tol,
        )?;
        let (fixed_alpha, fixed) = match best {
            Some((a, m)) => (Some(a), Some(m)),
            None => (None, None),
        };
        Ok(DemoComparison {
            noise_seed,
            alpha_bar,
            fixed_alpha,
            fixed,
            adaptive,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::StepRecord;
    use nalgebra::DVector;

    fn fake(scenario: &ScenarioTimeline, feeder: impl Fn(usize) -> f64) -> Trajectory {
        let j = scenario.feeder_outputs[0];
        let records = (0..scenario.horizon)
            .map(|k| {
                let mut y = DVector::from_element(scenario.n_outputs(), 1.0);
                y[j] = feeder(k);
                StepRecord {
                    k,
                    x: DVector::zeros(scenario.n()),
                    lambda: DVector::zeros(scenario.n_constraints()),
                    y_true: y.clone(),
                    y_measured: y,
                    group_gamma: Vec::new(),
                    objective: 0.0,
                    violation: 0.0,
                    gradient_error: 0.0,
                    switched: false,
                }
            })
            .collect();
        Trajectory {
            records,
            group_names: Vec::new(),
            final_x: DVector::zeros(0),
            final_lambda: DVector::zeros(0),
            final_gammas: scenario.default_groups(0.1).unwrap(),
            saturated_steps: Vec::new(),
        }
    }

    #[test]
    fn settling_delay_counts_persistence() {
        let p = NetworkParams {
            horizon: 200,
            ..NetworkParams::default()
        };
        let s = vpp_step_scenario(&p, &[100], &[1.2, 2.2]).unwrap();
        assert_eq!(band_change_steps(&s), vec![100]);
        // Enters the new band at 110, leaves at 115, re-enters at 120.
        let traj = fake(&s, |k| match k {
            0..=109 => 1.2,
            110..=114 => 2.2,
            115..=119 => 1.5,
            _ => 2.2,
        });
        assert_eq!(iterations_to_band(&s, &traj, &[100], 0.0), vec![Some(20)]);
        let never = fake(&s, |_| 1.2);
        assert_eq!(iterations_to_band(&s, &never, &[100], 0.0), vec![None]);
    }

    #[test]
    fn voltage_violation_is_max_excursion() {
        let s = vpp_step_scenario(
            &NetworkParams {
                horizon: 50,
                ..NetworkParams::default()
            },
            &[],
            &[1.2],
        )
        .unwrap();
        let mut traj = fake(&s, |_| 1.2);
        traj.records[7].y_true[2] = 1.07;
        traj.records[9].y_true[3] = 0.94;
        assert!((max_voltage_violation(&s, &traj) - 0.02).abs() < 1e-12);
    }
}
