//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use ofo_core::experiment::{best_fixed_alpha, RunMetrics};
use ofo_core::operators::{min_regularization, SaddleOperatorData, StepSizeGroups};
use ofo_core::oracle::{
    reference_trajectory, static_contraction, tracking_report, TrackingReport, STATIC_CONTRACTION_STEPS,
};
use ofo_core::qp::RegularizationParams;
use ofo_core::scenario::ScenarioTimeline;
use ofo_core::solvers::{bisect_alpha, run_online, BisectOptions, Estimator, SolverConfig, Trajectory};

use crate::error::{CliError, CliResult};
use crate::manifest::{reg_label, AlphaChoice, NamedConfig, RunManifest};
use crate::output::{fmt_num, write_rows, Table};

/// Result of running one member for one seed.
#[derive(Debug, Clone)]
pub struct MemberOutcome {
    pub name: String,
    pub seed: u64,
    pub alpha: f64,
    pub alpha_bar: Option<f64>,
    pub metrics: RunMetrics,
    pub tracking: Option<TrackingReport>,
    /// Set when the run aborted; outputs then hold the partial trajectory.
    pub failure: Option<String>,
}

fn bisect(scenario: &ScenarioTimeline, cfg: &SolverConfig, profile: &StepSizeGroups) -> CliResult<f64> {
    // Stability is probed with exact gradients whatever the run estimator.
    let mut exact = cfg.clone();
    exact.estimator = Estimator::Exact;
    Ok(bisect_alpha(scenario, &exact, profile, &BisectOptions::default())?.alpha_bar)
}

fn resolve_alpha(
    manifest: &RunManifest,
    member: &NamedConfig,
    scenario: &ScenarioTimeline,
    cfg: &SolverConfig,
    profile: &StepSizeGroups,
) -> CliResult<(f64, Option<f64>)> {
    match member.step_sizes.alpha_choice()? {
        AlphaChoice::Fixed(a) => Ok((a, None)),
        AlphaChoice::Fraction(f) => {
            let bar = bisect(scenario, cfg, profile)?;
            Ok((f * bar, Some(bar)))
        }
        AlphaChoice::BestFixed => {
            let bar = bisect(scenario, cfg, profile)?;
            let grid = member.step_sizes.best_fixed_fractions.as_deref().unwrap_or_default();
            match best_fixed_alpha(scenario, cfg, profile, bar, grid, manifest.band_tol)? {
                Some((a, _)) => Ok((a, Some(bar))),
                None => Err(CliError::Numerical(format!(
                    "{}: no fixed step size on the grid settled every band step",
                    member.name
                ))),
            }
        }
    }
}

/// Runs one member on one seed and writes its artifacts into `dir`.
pub fn run_member(
    manifest: &RunManifest,
    base: &ScenarioTimeline,
    member: &NamedConfig,
    seed: u64,
    dir: &Path,
) -> CliResult<MemberOutcome> {
    let mut scenario = base.clone();
    scenario.plant.noise_seed = seed;
    let cfg = manifest.solver_for(member).config()?;
    let mut gammas = member.step_sizes.profile(&scenario)?;
    let (alpha, alpha_bar) = resolve_alpha(manifest, member, &scenario, &cfg, &gammas)?;
    gammas.alpha = alpha;
    let adaptive = member
        .adaptive
        .as_ref()
        .map(|a| a.config(&gammas))
        .transpose()?;

    let (traj, failure) = match run_online(&scenario, &cfg, &gammas, adaptive.as_ref()) {
        Ok(t) => (t, None),
        Err(e) => {
            let msg = e.to_string();
            (*e.partial, Some(msg))
        }
    };
    let mut metrics = RunMetrics::from_trajectory(&member.name, &scenario, &traj, manifest.band_tol)?;
    if failure.is_some() {
        metrics.divergent = true;
        metrics.error = failure.clone();
    }
    let tracking = if manifest.reference && failure.is_none() && !cfg.regularization.is_off() {
        let reference = reference_trajectory(&scenario, &cfg.regularization, &gammas)?;
        // ĉ from a static exact run at the initial step sizes.
        let c_hat = static_contraction(
            &scenario,
            &cfg.regularization,
            &gammas,
            cfg.switching,
            STATIC_CONTRACTION_STEPS,
        )?;
        Some(tracking_report(&traj, &reference, alpha, c_hat)?)
    } else {
        None
    };

    fs::create_dir_all(dir)?;
    write_artifacts(manifest, &scenario, &traj, tracking.as_ref(), dir)?;
    let outcome = MemberOutcome {
        name: member.name.clone(),
        seed,
        alpha,
        alpha_bar,
        metrics,
        tracking,
        failure,
    };
    fs::write(dir.join("report.txt"), report_text(&outcome, &cfg, &traj))?;
    Ok(outcome)
}

fn write_artifacts(
    manifest: &RunManifest,
    scenario: &ScenarioTimeline,
    traj: &Trajectory,
    tracking: Option<&TrackingReport>,
    dir: &Path,
) -> CliResult<()> {
    let hash = &manifest.hash;
    let n = scenario.n();
    let m = scenario.n_constraints();

    let mut header = vec!["k".to_string()];
    header.extend((1..=n).map(|i| format!("x_{i}")));
    header.extend((1..=m).map(|j| format!("lambda_{j}")));
    header.extend(["objective", "violation", "gradient_error", "switched"].map(String::from));
    let mut t = Table::new(header);
    for r in &traj.records {
        let mut row = vec![r.k as f64];
        row.extend(r.x.iter());
        row.extend(r.lambda.iter());
        row.extend([r.objective, r.violation, r.gradient_error, r.switched as u8 as f64]);
        t.push(row);
    }
    // The iterate produced by the last step.
    if let Some(last) = traj.records.last() {
        let qp = scenario.qp_at(last.k)?;
        let mut row = vec![(last.k + 1) as f64];
        row.extend(traj.final_x.iter());
        row.extend(traj.final_lambda.iter());
        row.extend([qp.objective(&traj.final_x)?, qp.violation(&traj.final_x)?, f64::NAN, 0.0]);
        t.push(row);
    }
    t.write(&dir.join("trajectory.csv"), hash)?;

    let mut charts: Vec<(&str, Table, bool)> = Vec::new();
    if let Some(rep) = tracking {
        let mut t = Table::new(vec!["k".into(), "error".into(), "bound".into()]);
        let bound = rep.bound.unwrap_or(f64::NAN);
        for (k, e) in rep.error_series.iter().enumerate() {
            t.push(vec![k as f64, *e, bound]);
        }
        charts.push(("error", t, true));
    }
    for (file, outputs, prefix) in [
        ("feeder", &scenario.feeder_outputs, "p"),
        ("voltage", &scenario.voltage_outputs, "v"),
    ] {
        if outputs.is_empty() {
            continue;
        }
        let mut header = vec!["k".to_string()];
        for j in outputs.iter() {
            header.extend([format!("{prefix}_{j}"), format!("{prefix}_{j}_lo"), format!("{prefix}_{j}_hi")]);
        }
        let mut t = Table::new(header);
        for r in &traj.records {
            let mut row = vec![r.k as f64];
            for &j in outputs.iter() {
                let (lo, hi) = scenario.output_bounds(r.k, j);
                row.extend([r.y_true[j], lo, hi]);
            }
            t.push(row);
        }
        charts.push((file, t, false));
    }
    let mut header = vec!["k".to_string()];
    header.extend(traj.group_names.iter().cloned());
    let mut t = Table::new(header);
    for r in &traj.records {
        let mut row = vec![r.k as f64];
        row.extend(r.group_gamma.iter());
        t.push(row);
    }
    charts.push(("gamma", t, true));

    for (name, table, log_y) in &charts {
        table.write(&dir.join(format!("{name}.csv")), hash)?;
        if manifest.svg {
            fs::write(dir.join(format!("{name}.svg")), table.svg(name, *log_y))?;
        }
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), fmt_num)
}

fn report_text(o: &MemberOutcome, cfg: &SolverConfig, traj: &Trajectory) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "member: {}", o.name);
    let _ = writeln!(s, "seed: {}", o.seed);
    let _ = writeln!(s, "alpha: {}", fmt_num(o.alpha));
    let _ = writeln!(s, "alpha_bar: {}", opt(o.alpha_bar));
    let _ = writeln!(s, "regularization: {}", reg_label(&cfg.regularization));
    let _ = writeln!(s, "switching: {}", cfg.switching);
    let _ = writeln!(s, "steps: {}", traj.len());
    if let Some(f) = &o.failure {
        let _ = writeln!(s, "failure: {f}");
    }
    let m = &o.metrics;
    let itb: Vec<String> = m
        .iterations_to_band
        .iter()
        .map(|v| v.map_or_else(|| "never".into(), |v| v.to_string()))
        .collect();
    let _ = writeln!(s, "iterations_to_band: [{}]", itb.join(", "));
    let _ = writeln!(s, "max_voltage_violation: {}", fmt_num(m.max_voltage_violation));
    let _ = writeln!(s, "cumulative_der_cost: {}", fmt_num(m.cumulative_der_cost));
    let _ = writeln!(s, "divergent: {}", m.divergent);
    if let Some(t) = &o.tracking {
        let _ = writeln!(s, "c_hat: {}", opt(t.c_hat));
        let _ = writeln!(s, "eps_phi_hat: {}", fmt_num(t.eps_phi_hat));
        let _ = writeln!(s, "sigma: {}", fmt_num(t.sigma));
        let _ = writeln!(s, "bound: {}", opt(t.bound));
        let _ = writeln!(s, "tail_max_error: {}", fmt_num(t.tail_max));
        let _ = writeln!(s, "bound_holds: {}", t.bound_holds());
    }
    s
}

fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

/// `run`: the manifest's own configuration for every seed.
pub fn cmd_run(manifest: &RunManifest) -> CliResult<Vec<MemberOutcome>> {
    let scenario = manifest.load_scenario()?;
    let member = manifest.base_member();
    let mut outcomes = Vec::new();
    for &seed in &manifest.seeds {
        let o = run_member(manifest, &scenario, &member, seed, &seed_dir(&manifest.output_dir, seed))?;
        println!(
            "seed {seed}: alpha={} steps={} divergent={} -> {}",
            fmt_num(o.alpha),
            scenario.horizon,
            o.metrics.divergent,
            seed_dir(&manifest.output_dir, seed).display()
        );
        outcomes.push(o);
    }
    if let Some(bad) = outcomes.iter().find(|o| o.failure.is_some()) {
        return Err(CliError::Numerical(format!(
            "seed {}: {}",
            bad.seed,
            bad.failure.as_deref().unwrap_or_default()
        )));
    }
    Ok(outcomes)
}

/// `compare`: every member of the comparison set, concurrently, each seed.
/// Divergent members are reported but left out of the ranking.
pub fn cmd_compare(manifest: &RunManifest) -> CliResult<Vec<MemberOutcome>> {
    if manifest.compare.len() < 2 {
        return Err(CliError::config("compare needs at least two named configs"));
    }
    let scenario = manifest.load_scenario()?;
    let results: Vec<CliResult<Vec<MemberOutcome>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = manifest
            .compare
            .iter()
            .map(|member| {
                let scenario = &scenario;
                scope.spawn(move || {
                    manifest
                        .seeds
                        .iter()
                        .map(|&seed| {
                            let dir = seed_dir(&manifest.output_dir.join(&member.name), seed);
                            run_member(manifest, scenario, member, seed, &dir)
                        })
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(CliError::Numerical("member panicked".into()))))
            .collect()
    });
    let mut outcomes = Vec::new();
    for r in results {
        match r {
            Ok(v) => outcomes.extend(v),
            // A member whose step size cannot be resolved is reported, not fatal.
            Err(CliError::Numerical(msg)) => eprintln!("warning: {msg}"),
            Err(e) => return Err(e),
        }
    }
    write_comparison(manifest, &outcomes)?;
    Ok(outcomes)
}

/// Rank by total settling delay among non-divergent runs of one seed.
pub fn ranks(outcomes: &[MemberOutcome]) -> Vec<Option<usize>> {
    outcomes
        .iter()
        .map(|o| {
            let total = o.metrics.total_iterations().filter(|_| !o.metrics.divergent)?;
            let better = outcomes
                .iter()
                .filter(|p| p.seed == o.seed && !p.metrics.divergent)
                .filter_map(|p| p.metrics.total_iterations())
                .filter(|&t| t < total)
                .count();
            Some(better + 1)
        })
        .collect()
}

fn write_comparison(manifest: &RunManifest, outcomes: &[MemberOutcome]) -> CliResult<()> {
    fs::create_dir_all(&manifest.output_dir)?;
    let events = outcomes.first().map_or(0, |o| o.metrics.iterations_to_band.len());
    let mut header: Vec<String> = ["name", "seed", "alpha", "divergent"].map(String::from).to_vec();
    header.extend((1..=events).map(|e| format!("iterations_to_band_{e}")));
    header.extend(["max_voltage_violation", "cumulative_der_cost", "rank"].map(String::from));
    let rank = ranks(outcomes);
    let rows: Vec<Vec<String>> = outcomes
        .iter()
        .zip(&rank)
        .map(|(o, r)| {
            let mut row = vec![
                o.name.clone(),
                o.seed.to_string(),
                fmt_num(o.alpha),
                o.metrics.divergent.to_string(),
            ];
            row.extend(
                o.metrics
                    .iterations_to_band
                    .iter()
                    .map(|v| v.map_or_else(|| "never".into(), |v| v.to_string())),
            );
            row.push(fmt_num(o.metrics.max_voltage_violation));
            row.push(fmt_num(o.metrics.cumulative_der_cost));
            row.push(r.map_or_else(|| "excluded".into(), |r| r.to_string()));
            row
        })
        .collect();
    for row in std::iter::once(&header).chain(&rows) {
        println!("{}", row.join("\t"));
    }
    write_rows(&manifest.output_dir.join("compare.csv"), &manifest.hash, &header, &rows)
}

/// Monotonicity and step-size analysis of one scenario stage.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub w: DMatrix<f64>,
    pub lambda_min: f64,
    pub p: f64,
    pub eta: f64,
    pub sigma: f64,
    pub alpha_bar: f64,
}

pub fn analyze(
    scenario: &ScenarioTimeline,
    gammas: &StepSizeGroups,
    k: usize,
    margin: f64,
) -> CliResult<Analysis> {
    let qp = scenario.qp_at(k)?;
    let data = SaddleOperatorData::from_qp(&qp, gammas.gamma_z(), 0.0)?;
    let sizing = min_regularization(&data.monotonicity_matrix(), margin)?;
    let reg = RegularizationParams::homogeneous(sizing.p, sizing.p)?;
    let sigma = reference_trajectory(scenario, &reg, gammas)?.sigma;
    let cfg = SolverConfig::new(Estimator::Exact, reg, true);
    let opts = BisectOptions {
        k,
        ..BisectOptions::default()
    };
    let alpha_bar = bisect_alpha(scenario, &cfg, gammas, &opts)?.alpha_bar;
    Ok(Analysis {
        w: data.w_mat,
        lambda_min: sizing.lambda_min,
        p: sizing.p,
        eta: sizing.eta,
        sigma,
        alpha_bar,
    })
}

pub fn analysis_text(name: &str, k: usize, a: &Analysis) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scenario: {name} (k = {k})");
    let _ = write!(s, "W ={}", a.w);
    let verdict = if a.lambda_min > 0.0 { "positive definite" } else { "indefinite" };
    let _ = writeln!(s, "lambda_min(V): {:.6} ({verdict})", a.lambda_min);
    let _ = writeln!(s, "recommended p: {:.6}", a.p);
    let _ = writeln!(s, "eta: {:.6}", a.eta);
    let _ = writeln!(s, "oracle sigma: {:.6e}", a.sigma);
    let _ = writeln!(s, "suggested alpha (bisection): {:.6e}", a.alpha_bar);
    s
}

pub fn write_analysis(path: &Path, hash: &str, name: &str, k: usize, a: &Analysis) -> CliResult<()> {
    let header: Vec<String> = ["scenario", "k", "lambda_min", "p", "eta", "sigma", "alpha_bar"]
        .map(String::from)
        .to_vec();
    let row = vec![
        name.to_string(),
        k.to_string(),
        fmt_num(a.lambda_min),
        fmt_num(a.p),
        fmt_num(a.eta),
        fmt_num(a.sigma),
        fmt_num(a.alpha_bar),
    ];
    write_rows(path, hash, &header, &[row])
}

/// `bisect-alpha` with the manifest's solver and step-size profile.
pub fn cmd_bisect(manifest: &RunManifest, opts: &BisectOptions) -> CliResult<(f64, Option<f64>)> {
    let scenario = manifest.load_scenario()?;
    let mut cfg = manifest.solver.config()?;
    cfg.estimator = Estimator::Exact;
    let profile = manifest.step_sizes.profile(&scenario)?;
    let r = bisect_alpha(&scenario, &cfg, &profile, opts)?;
    Ok((r.alpha_bar, r.alpha_unstable))
}
