//! Time-indexed problem data, the synthetic VPP/voltage network, scenario
//! files and drift metrics.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OfoError, Result};
use crate::operators::{ConstraintTag, StepSizeGroups};
use crate::oracle::{reference_trajectory, ReferenceTrajectory};
use crate::projection::{ConvexSet, DualBox, Sense};
use crate::qp::{BlockPartition, LinearPlant, OutputModel, QuadraticProgram, RegularizationParams};
use crate::solvers::Stage;

/// A vector that is either constant or given per step.
#[derive(Debug, Clone, PartialEq)]
pub enum Series {
    Constant(DVector<f64>),
    PerStep(Vec<DVector<f64>>),
}

impl Series {
    pub fn at(&self, k: usize) -> &DVector<f64> {
        match self {
            Series::Constant(v) => v,
            Series::PerStep(vs) => &vs[k.min(vs.len() - 1)],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Series::Constant(v) => v.len(),
            Series::PerStep(vs) => vs.first().map_or(0, |v| v.len()),
        }
    }

    fn validate(&self, field: &str, dim: usize, horizon: usize) -> Result<()> {
        match self {
            Series::Constant(v) => check_len(field, dim, v.len()),
            Series::PerStep(vs) => {
                if vs.len() != horizon {
                    return Err(config_err(
                        field,
                        format!("expected {horizon} rows (one per step), found {}", vs.len()),
                    ));
                }
                vs.iter().try_for_each(|v| check_len(field, dim, v.len()))
            }
        }
    }
}

fn config_err(field: &str, message: impl Into<String>) -> OfoError {
    OfoError::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

fn check_len(field: &str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(config_err(
            field,
            format!("expected length {expected}, found {found}"),
        ))
    }
}

/// Time-varying problem: input cost, output cost, plant, output constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTimeline {
    pub name: String,
    pub horizon: usize,
    pub phi_a: DMatrix<f64>,
    /// Linear input-cost term per step (moves with DER setpoints).
    pub phi_b: Series,
    pub phi_c: f64,
    pub out_q: DMatrix<f64>,
    pub out_r: DVector<f64>,
    pub inputs: BlockPartition,
    /// Plant with one disturbance vector per step.
    pub plant: LinearPlant,
    pub g_mat: DMatrix<f64>,
    pub g_offset: Series,
    pub tags: Vec<ConstraintTag>,
    pub dual_box: DualBox,
    pub feeder_outputs: Vec<usize>,
    pub voltage_outputs: Vec<usize>,
}

impl ScenarioTimeline {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(config_err("horizon", "horizon must be at least 1"));
        }
        let n = self.inputs.dim();
        let m = self.plant.n_outputs();
        let rows = self.tags.len();
        check_len("objective.a", n, self.phi_a.nrows())?;
        check_len("objective.a", n, self.phi_a.ncols())?;
        self.phi_b.validate("objective.b", n, self.horizon)?;
        check_len("plant.c", n, self.plant.n_inputs())?;
        check_len("output_cost.q", m, self.out_q.nrows())?;
        check_len("output_cost.q", m, self.out_q.ncols())?;
        check_len("output_cost.r", m, self.out_r.len())?;
        check_len("constraints.g", rows, self.g_mat.nrows())?;
        if rows > 0 {
            check_len("constraints.g", m, self.g_mat.ncols())?;
        }
        self.g_offset.validate("constraints.offset", rows, self.horizon)?;
        check_len("constraints.lambda_max", rows, self.dual_box.dim())?;
        check_len("plant.w", self.horizon, self.plant.horizon())?;
        if let Some(&j) = self
            .feeder_outputs
            .iter()
            .chain(&self.voltage_outputs)
            .find(|&&j| j >= m)
        {
            return Err(config_err("monitor", format!("output index {j} out of range")));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.inputs.dim()
    }

    pub fn n_outputs(&self) -> usize {
        self.plant.n_outputs()
    }

    pub fn n_constraints(&self) -> usize {
        self.tags.len()
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k < self.horizon {
            Ok(())
        } else {
            Err(OfoError::StepOutOfRange {
                k,
                horizon: self.horizon,
            })
        }
    }

    pub fn output_model(&self, k: usize) -> Result<OutputModel> {
        self.check_k(k)?;
        Ok(OutputModel {
            phi_a: self.phi_a.clone(),
            phi_b: self.phi_b.at(k).clone(),
            phi_c: self.phi_c,
            out_q: self.out_q.clone(),
            out_r: self.out_r.clone(),
            g_mat: self.g_mat.clone(),
            g_offset: self.g_offset.at(k).clone(),
        })
    }

    /// The x-space program at step `k`.
    pub fn qp_at(&self, k: usize) -> Result<QuadraticProgram> {
        self.output_model(k)?
            .compose(&self.plant, k, self.inputs.clone())
    }

    pub fn stage(&self, k: usize) -> Result<Stage> {
        let model = self.output_model(k)?;
        let qp = model.compose(&self.plant, k, self.inputs.clone())?;
        Ok(Stage {
            k,
            qp,
            model: Some(model),
            dual_box: self.dual_box.clone(),
        })
    }

    /// A copy with every time-varying quantity frozen at step `k`.
    pub fn frozen_at(&self, k: usize, horizon: usize) -> Result<Self> {
        self.check_k(k)?;
        let mut out = self.clone();
        out.horizon = horizon.max(1);
        out.phi_b = Series::Constant(self.phi_b.at(k).clone());
        out.g_offset = Series::Constant(self.g_offset.at(k).clone());
        out.plant.w_traj = vec![self.plant.w_traj[k].clone(); out.horizon];
        out.name = format!("{}@{k}", self.name);
        Ok(out)
    }

    /// A copy truncated or extended (by holding the last step) to `horizon`.
    pub fn with_horizon(&self, horizon: usize) -> Self {
        let mut out = self.clone();
        let horizon = horizon.max(1);
        let extend = |vs: &Vec<DVector<f64>>| -> Vec<DVector<f64>> {
            (0..horizon).map(|k| vs[k.min(vs.len() - 1)].clone()).collect()
        };
        out.plant.w_traj = extend(&self.plant.w_traj);
        if let Series::PerStep(vs) = &self.phi_b {
            out.phi_b = Series::PerStep(extend(vs));
        }
        if let Series::PerStep(vs) = &self.g_offset {
            out.g_offset = Series::PerStep(extend(vs));
        }
        out.horizon = horizon;
        out
    }

    pub fn default_groups(&self, alpha: f64) -> Result<StepSizeGroups> {
        StepSizeGroups::uniform(&self.inputs, &self.tags, alpha)
    }

    /// Bounds on output `j` implied by single-output constraint rows.
    pub fn output_bounds(&self, k: usize, j: usize) -> (f64, f64) {
        let offset = self.g_offset.at(k);
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for row in 0..self.n_constraints() {
            let r = self.g_mat.row(row);
            let coeff = r[j];
            let only_j = r.iter().enumerate().all(|(i, &v)| i == j || v == 0.0);
            if coeff == 0.0 || !only_j {
                continue;
            }
            let bound = -offset[row] / coeff;
            if coeff > 0.0 {
                hi = hi.min(bound);
            } else {
                lo = lo.max(bound);
            }
        }
        (lo, hi)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| OfoError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)
            .map_err(|e| OfoError::Io(format!("{}: {e}", path.display())))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or("scenario")
                .to_string();
            OfoError::Config {
                field,
                message: e.to_string(),
            }
        })?;
        file.into_timeline()
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(&ScenarioFile::from_timeline(self))
            .map_err(|e| config_err("scenario", e.to_string()))
    }
}

pub fn load_scenario(path: &Path) -> Result<ScenarioTimeline> {
    ScenarioTimeline::load(path)
}

pub fn save_scenario(timeline: &ScenarioTimeline, path: &Path) -> Result<()> {
    timeline.save(path)
}

// ---------------------------------------------------------------------------
// File schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum SeriesSpec {
    Constant(Vec<f64>),
    PerStep(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum SetSpec {
    Box {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    Halfspace {
        normal: Vec<f64>,
        offset: f64,
        sense: Sense,
    },
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
    NonnegativeOrthant,
    Intersection {
        sets: Vec<SetSpec>,
    },
    Unbounded,
}

impl SetSpec {
    fn to_set(&self) -> ConvexSet {
        match self {
            SetSpec::Box { lower, upper } => ConvexSet::Box {
                lower: DVector::from_column_slice(lower),
                upper: DVector::from_column_slice(upper),
            },
            SetSpec::Halfspace {
                normal,
                offset,
                sense,
            } => ConvexSet::Halfspace {
                normal: DVector::from_column_slice(normal),
                offset: *offset,
                sense: *sense,
            },
            SetSpec::Ball { center, radius } => ConvexSet::Ball {
                center: DVector::from_column_slice(center),
                radius: *radius,
            },
            SetSpec::NonnegativeOrthant => ConvexSet::NonnegativeOrthant,
            SetSpec::Intersection { sets } => {
                ConvexSet::Intersection(sets.iter().map(SetSpec::to_set).collect())
            }
            SetSpec::Unbounded => ConvexSet::Unbounded,
        }
    }

    fn from_set(set: &ConvexSet) -> Self {
        match set {
            ConvexSet::Box { lower, upper } => SetSpec::Box {
                lower: lower.as_slice().to_vec(),
                upper: upper.as_slice().to_vec(),
            },
            ConvexSet::Halfspace {
                normal,
                offset,
                sense,
            } => SetSpec::Halfspace {
                normal: normal.as_slice().to_vec(),
                offset: *offset,
                sense: *sense,
            },
            ConvexSet::Ball { center, radius } => SetSpec::Ball {
                center: center.as_slice().to_vec(),
                radius: *radius,
            },
            ConvexSet::NonnegativeOrthant => SetSpec::NonnegativeOrthant,
            ConvexSet::Intersection(parts) => SetSpec::Intersection {
                sets: parts.iter().map(SetSpec::from_set).collect(),
            },
            ConvexSet::Unbounded => SetSpec::Unbounded,
        }
    }
}

fn default_unbounded() -> SetSpec {
    SetSpec::Unbounded
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockSpec {
    size: usize,
    #[serde(default = "default_unbounded")]
    set: SetSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectiveSpec {
    a: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b: Option<SeriesSpec>,
    #[serde(default)]
    c: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputCostSpec {
    q: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlantSpec {
    c: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    u: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    w: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    e_y: f64,
    #[serde(default)]
    noise_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstraintSpec {
    g: Vec<Vec<f64>>,
    offset: SeriesSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tags: Option<Vec<ConstraintTag>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lambda_max: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MonitorSpec {
    #[serde(default)]
    feeder_outputs: Vec<usize>,
    #[serde(default)]
    voltage_outputs: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    #[serde(default = "default_name")]
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    horizon: Option<usize>,
    objective: ObjectiveSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    blocks: Option<Vec<BlockSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    output_cost: Option<OutputCostSpec>,
    plant: PlantSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    constraints: Option<ConstraintSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    monitor: Option<MonitorSpec>,
}

fn default_name() -> String {
    "scenario".into()
}

fn matrix_from_rows(field: &str, rows: &[Vec<f64>], ncols: Option<usize>) -> Result<DMatrix<f64>> {
    let cols = rows.first().map(|r| r.len()).or(ncols).unwrap_or(0);
    if let Some(expected) = ncols {
        if !rows.is_empty() && cols != expected {
            return Err(config_err(
                field,
                format!("expected {expected} columns, found {cols}"),
            ));
        }
    }
    if let Some(i) = rows.iter().position(|r| r.len() != cols) {
        return Err(config_err(field, format!("row {i} has inconsistent length")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn series_from_spec(spec: SeriesSpec) -> Series {
    match spec {
        SeriesSpec::Constant(v) => Series::Constant(DVector::from_vec(v)),
        SeriesSpec::PerStep(vs) => {
            Series::PerStep(vs.into_iter().map(DVector::from_vec).collect())
        }
    }
}

fn series_to_spec(series: &Series) -> SeriesSpec {
    match series {
        Series::Constant(v) => SeriesSpec::Constant(v.as_slice().to_vec()),
        Series::PerStep(vs) => {
            SeriesSpec::PerStep(vs.iter().map(|v| v.as_slice().to_vec()).collect())
        }
    }
}

impl ScenarioFile {
    fn into_timeline(self) -> Result<ScenarioTimeline> {
        let n = self.objective.a.len();
        let phi_a = matrix_from_rows("objective.a", &self.objective.a, Some(n))?;
        let phi_b = self
            .objective
            .b
            .map(series_from_spec)
            .unwrap_or_else(|| Series::Constant(DVector::zeros(n)));

        let blocks = match self.blocks {
            Some(blocks) => blocks
                .into_iter()
                .map(|b| (b.size, b.set.to_set()))
                .collect(),
            None if n > 0 => vec![(n, ConvexSet::Unbounded)],
            None => Vec::new(),
        };
        let inputs = BlockPartition::new(blocks).map_err(|e| config_err("blocks", e.to_string()))?;

        let c = matrix_from_rows("plant.c", &self.plant.c, Some(n))?;
        let m = c.nrows();
        let w_rows = self.plant.w.unwrap_or_default();
        let w_dim = w_rows.first().map_or(0, |r| r.len());
        let u = match self.plant.u {
            Some(rows) => matrix_from_rows("plant.u", &rows, Some(w_dim))?,
            None => DMatrix::zeros(m, w_dim),
        };
        if u.nrows() != m {
            return Err(config_err(
                "plant.u",
                format!("expected {m} rows, found {}", u.nrows()),
            ));
        }
        let horizon = self.horizon.unwrap_or(w_rows.len().max(1));
        let w_traj: Vec<DVector<f64>> = match w_rows.len() {
            0 => vec![DVector::zeros(u.ncols()); horizon],
            1 => vec![DVector::from_vec(w_rows[0].clone()); horizon],
            len if len == horizon => w_rows.into_iter().map(DVector::from_vec).collect(),
            len => {
                return Err(config_err(
                    "plant.w",
                    format!("expected 1 or {horizon} rows, found {len}"),
                ))
            }
        };
        let plant = LinearPlant::new(c, u, w_traj, self.plant.e_y, self.plant.noise_seed)
            .map_err(|e| config_err("plant", e.to_string()))?;

        let (out_q, out_r) = match self.output_cost {
            Some(spec) => {
                let q = matrix_from_rows("output_cost.q", &spec.q, Some(m))?;
                let r = spec.r.map(DVector::from_vec).unwrap_or_else(|| DVector::zeros(m));
                (q, r)
            }
            None => (DMatrix::zeros(m, m), DVector::zeros(m)),
        };

        let (g_mat, g_offset, tags, dual_box) = match self.constraints {
            Some(spec) => {
                let g = matrix_from_rows("constraints.g", &spec.g, Some(m))?;
                let rows = g.nrows();
                let tags = spec.tags.unwrap_or_else(|| vec![ConstraintTag::Generic; rows]);
                let lambda_max = spec
                    .lambda_max
                    .map(DVector::from_vec)
                    .unwrap_or_else(|| DVector::from_element(rows, DualBox::DEFAULT_MAX));
                let dual_box = DualBox::new(lambda_max)
                    .map_err(|e| config_err("constraints.lambda_max", e.to_string()))?;
                (g, series_from_spec(spec.offset), tags, dual_box)
            }
            None => (
                DMatrix::zeros(0, m),
                Series::Constant(DVector::zeros(0)),
                Vec::new(),
                DualBox::uniform(0, DualBox::DEFAULT_MAX),
            ),
        };
        let monitor = self.monitor.unwrap_or_default();

        let timeline = ScenarioTimeline {
            name: self.name,
            horizon,
            phi_a,
            phi_b,
            phi_c: self.objective.c,
            out_q,
            out_r,
            inputs,
            plant,
            g_mat,
            g_offset,
            tags,
            dual_box,
            feeder_outputs: monitor.feeder_outputs,
            voltage_outputs: monitor.voltage_outputs,
        };
        timeline.validate()?;
        Ok(timeline)
    }

    fn from_timeline(s: &ScenarioTimeline) -> Self {
        let m = s.n_outputs();
        let has_output_cost = s.out_q.iter().chain(s.out_r.iter()).any(|&v| v != 0.0);
        ScenarioFile {
            name: s.name.clone(),
            horizon: Some(s.horizon),
            objective: ObjectiveSpec {
                a: matrix_to_rows(&s.phi_a),
                b: Some(series_to_spec(&s.phi_b)),
                c: s.phi_c,
            },
            blocks: Some(
                s.inputs
                    .blocks()
                    .iter()
                    .map(|b| BlockSpec {
                        size: b.range.len(),
                        set: SetSpec::from_set(&b.set),
                    })
                    .collect(),
            ),
            output_cost: has_output_cost.then(|| OutputCostSpec {
                q: matrix_to_rows(&s.out_q),
                r: Some(s.out_r.as_slice().to_vec()),
            }),
            plant: PlantSpec {
                c: matrix_to_rows(&s.plant.c),
                u: (m > 0).then(|| matrix_to_rows(&s.plant.u)),
                w: match s.plant.w_traj.first() {
                    Some(w0) if w0.is_empty() => None,
                    Some(w0) if s.plant.w_traj.iter().all(|w| w == w0) => {
                        Some(vec![w0.as_slice().to_vec()])
                    }
                    _ => Some(
                        s.plant
                            .w_traj
                            .iter()
                            .map(|w| w.as_slice().to_vec())
                            .collect(),
                    ),
                },
                e_y: s.plant.e_y,
                noise_seed: s.plant.noise_seed,
            },
            constraints: (!s.tags.is_empty()).then(|| ConstraintSpec {
                g: matrix_to_rows(&s.g_mat),
                offset: series_to_spec(&s.g_offset),
                tags: Some(s.tags.clone()),
                lambda_max: Some(s.dual_box.lambda_max.as_slice().to_vec()),
            }),
            monitor: Some(MonitorSpec {
                feeder_outputs: s.feeder_outputs.clone(),
                voltage_outputs: s.voltage_outputs.clone(),
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic network
// ---------------------------------------------------------------------------

/// Parameters of the synthetic DER network. Each DER is a 2-D (active,
/// reactive) injection with a quadratic distance-to-setpoint cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub n_ders: usize,
    pub m_voltage_buses: usize,
    pub vpp_rows: usize,
    pub horizon: usize,
    pub v_lo: f64,
    pub v_hi: f64,
    /// `[P_lo, P_hi]` per step, or a single constant band.
    pub vpp_band: Vec<(f64, f64)>,
    /// Active-power cost weights; drawn log-uniformly from this range.
    pub weight_range: (f64, f64),
    /// Reactive-power weight relative to the active-power weight.
    pub reactive_weight_ratio: f64,
    /// Active-power setpoints drawn uniformly from this range.
    pub setpoint_range: (f64, f64),
    pub p_limits: (f64, f64),
    pub q_limits: (f64, f64),
    /// Resistive voltage sensitivity scale (per unit injection).
    pub sensitivity: f64,
    /// Off-bus sensitivity relative to the home bus.
    pub coupling: f64,
    pub load_base: f64,
    pub load_amplitude: f64,
    pub load_period: f64,
    pub e_y: f64,
    pub lambda_max: f64,
    pub seed: u64,
}

impl Default for NetworkParams {
    fn default() -> Self {
        Self {
            n_ders: 10,
            m_voltage_buses: 6,
            vpp_rows: 1,
            horizon: 600,
            v_lo: 0.95,
            v_hi: 1.05,
            vpp_band: vec![(1.0, 1.4)],
            weight_range: (0.5, 8.0),
            reactive_weight_ratio: 0.5,
            setpoint_range: (0.1, 0.3),
            p_limits: (0.0, 1.0),
            q_limits: (-0.5, 0.5),
            sensitivity: 0.01,
            coupling: 0.3,
            load_base: 0.3,
            load_amplitude: 0.0,
            load_period: 200.0,
            e_y: 0.0,
            lambda_max: DualBox::DEFAULT_MAX,
            seed: 1,
        }
    }
}

impl NetworkParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(OfoError::InvalidParameter(msg.to_string()));
        if !(self.v_lo < self.v_hi) {
            return bad("v_lo must be below v_hi");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if self.vpp_band.is_empty()
            || (self.vpp_band.len() != 1 && self.vpp_band.len() != self.horizon)
        {
            return bad("vpp band must have one entry or one per step");
        }
        if self.vpp_band.iter().any(|&(lo, hi)| !(lo <= hi)) {
            return bad("vpp band needs P_lo <= P_hi");
        }
        if !(self.p_limits.0 <= self.p_limits.1 && self.q_limits.0 <= self.q_limits.1) {
            return bad("DER box limits must be nonempty");
        }
        if !(self.weight_range.0 > 0.0 && self.weight_range.0 <= self.weight_range.1) {
            return bad("DER weights must be positive");
        }
        if self.m_voltage_buses == 0 && self.vpp_rows == 0 {
            return bad("network needs at least one monitored output");
        }
        Ok(())
    }

    fn band(&self, k: usize) -> (f64, f64) {
        self.vpp_band[k.min(self.vpp_band.len() - 1)]
    }
}

/// Builds the synthetic linearized network. Outputs are ordered as bus
/// voltages followed by feeder-head aggregates; constraints are two rows
/// per voltage bus (`v ≤ v_hi`, `v ≥ v_lo`) then two per VPP row.
pub fn synth_network(params: &NetworkParams) -> Result<ScenarioTimeline> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n_ders = params.n_ders;
    let n = 2 * n_ders;
    let buses = params.m_voltage_buses;
    let vpp = params.vpp_rows;
    let m = buses + vpp;

    // DER costs ½w_P(P − s)² + ½w_Q Q².
    let (wlo, whi) = params.weight_range;
    let mut weights = DVector::zeros(n);
    let mut setpoints = DVector::zeros(n);
    for i in 0..n_ders {
        let wp = (wlo.ln() + rng.random::<f64>() * (whi / wlo).ln()).exp();
        weights[2 * i] = wp;
        weights[2 * i + 1] = wp * params.reactive_weight_ratio;
        let (slo, shi) = params.setpoint_range;
        setpoints[2 * i] = slo + rng.random::<f64>() * (shi - slo);
    }
    let phi_a = DMatrix::from_diagonal(&weights);
    let phi_b = -weights.component_mul(&setpoints);
    let phi_c = 0.5 * setpoints.component_mul(&setpoints).dot(&weights);

    // Outputs: voltages then feeder aggregates.
    let mut c = DMatrix::zeros(m, n);
    for b in 0..buses {
        for i in 0..n_ders {
            let home = i % buses == b;
            let base = if home { 1.0 } else { params.coupling };
            let r = params.sensitivity * base * rng.random_range(0.7..1.3);
            let x = params.sensitivity * base * rng.random_range(0.7..1.3);
            c[(b, 2 * i)] = r;
            c[(b, 2 * i + 1)] = x;
        }
    }
    for i in 0..n_ders {
        if vpp > 0 {
            c[(buses + i % vpp, 2 * i)] = 1.0;
        }
    }

    // w(k) = [1, load(k)]: nominal voltage and a common uncontrollable load.
    let mut u = DMatrix::zeros(m, 2);
    for b in 0..buses {
        u[(b, 0)] = 1.0;
        u[(b, 1)] = -params.sensitivity * (1.0 + params.coupling * (buses as f64 - 1.0));
    }
    for r in 0..vpp {
        u[(buses + r, 1)] = -1.0 / vpp as f64;
    }
    let w_traj: Vec<DVector<f64>> = (0..params.horizon)
        .map(|k| {
            let phase = 2.0 * std::f64::consts::PI * k as f64 / params.load_period;
            DVector::from_vec(vec![
                1.0,
                params.load_base + params.load_amplitude * phase.sin(),
            ])
        })
        .collect();
    let plant = LinearPlant::new(c, u, w_traj, params.e_y, params.seed)?;

    let rows = 2 * m;
    let mut g_mat = DMatrix::zeros(rows, m);
    let mut tags = Vec::with_capacity(rows);
    for j in 0..m {
        g_mat[(2 * j, j)] = 1.0;
        g_mat[(2 * j + 1, j)] = -1.0;
        let tag = if j < buses {
            ConstraintTag::Volt
        } else {
            ConstraintTag::Vpp
        };
        tags.extend([tag, tag]);
    }
    let offset_at = |k: usize| {
        let (plo, phi) = params.band(k);
        let mut e = DVector::zeros(rows);
        for j in 0..m {
            let (lo, hi) = if j < buses {
                (params.v_lo, params.v_hi)
            } else {
                (plo, phi)
            };
            e[2 * j] = -hi;
            e[2 * j + 1] = lo;
        }
        e
    };
    let g_offset = if params.vpp_band.len() == 1 {
        Series::Constant(offset_at(0))
    } else {
        Series::PerStep((0..params.horizon).map(offset_at).collect())
    };

    let blocks = (0..n_ders)
        .map(|_| {
            ConvexSet::boxed(
                DVector::from_vec(vec![params.p_limits.0, params.q_limits.0]),
                DVector::from_vec(vec![params.p_limits.1, params.q_limits.1]),
            )
            .map(|set| (2, set))
        })
        .collect::<Result<Vec<_>>>()?;

    let timeline = ScenarioTimeline {
        name: format!("network-{n_ders}der-{buses}bus"),
        horizon: params.horizon,
        phi_a,
        phi_b: Series::Constant(phi_b),
        phi_c,
        out_q: DMatrix::zeros(m, m),
        out_r: DVector::zeros(m),
        inputs: BlockPartition::new(blocks)?,
        plant,
        g_mat,
        g_offset,
        tags,
        dual_box: DualBox::uniform(rows, params.lambda_max),
        feeder_outputs: (buses..m).collect(),
        voltage_outputs: (0..buses).collect(),
    };
    timeline.validate()?;
    Ok(timeline)
}

/// Network whose VPP band steps between plateaus centred on `step_levels`
/// at `step_times`; the band half-width is taken from the first band entry.
pub fn vpp_step_scenario(
    params: &NetworkParams,
    step_times: &[usize],
    step_levels: &[f64],
) -> Result<ScenarioTimeline> {
    if step_levels.len() != step_times.len() + 1 {
        return Err(OfoError::InvalidParameter(
            "need one more level than step times".into(),
        ));
    }
    if step_times.windows(2).any(|w| w[0] >= w[1])
        || step_times
            .iter()
            .any(|&t| t == 0 || t >= params.horizon)
    {
        return Err(OfoError::InvalidParameter(
            "step times must be strictly increasing within the horizon".into(),
        ));
    }
    let (lo, hi) = params
        .vpp_band
        .first()
        .copied()
        .ok_or_else(|| OfoError::InvalidParameter("empty vpp band".into()))?;
    let half = 0.5 * (hi - lo);
    let mut p = params.clone();
    p.vpp_band = (0..params.horizon)
        .map(|k| {
            let plateau = step_times.iter().filter(|&&t| k >= t).count();
            let level = step_levels[plateau];
            (level - half, level + half)
        })
        .collect();
    if step_times.is_empty() {
        p.vpp_band.truncate(1);
    }
    let mut s = synth_network(&p)?;
    s.name = format!("vpp-step-{}der", params.n_ders);
    Ok(s)
}

/// σ (largest reference jump) and the empirical temporal gradient drift.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftMetrics {
    pub sigma: f64,
    pub e_f_hat: f64,
    pub reference: ReferenceTrajectory,
}

/// σ via the reference trajectory; `ê_f` as the largest change between
/// consecutive steps of `∇f₀(y)`, `∇φ(x)` and each `∇g_j(y)`, sampled at
/// a few points.
pub fn drift_metrics(
    timeline: &ScenarioTimeline,
    reg: &RegularizationParams,
    gammas: &StepSizeGroups,
) -> Result<DriftMetrics> {
    let reference = reference_trajectory(timeline, reg, gammas)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let n = timeline.n();
    let m = timeline.n_outputs();
    let samples: Vec<(DVector<f64>, DVector<f64>)> = (0..4)
        .map(|_| {
            (
                DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
                DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)),
            )
        })
        .collect();
    let mut e_f: f64 = 0.0;
    for k in 1..timeline.horizon {
        let now = timeline.output_model(k)?;
        let prev = timeline.output_model(k - 1)?;
        for (x, y) in &samples {
            e_f = e_f.max((now.grad_phi(x) - prev.grad_phi(x)).norm());
            e_f = e_f.max((now.grad_f0(y) - prev.grad_f0(y)).norm());
            for j in 0..timeline.n_constraints() {
                // ∇g_j(y) is the constraint row; it carries no step dependence
                // unless the matrix itself changes.
                e_f = e_f.max((now.g_mat.row(j) - prev.g_mat.row(j)).norm());
            }
        }
    }
    Ok(DriftMetrics {
        sigma: reference.sigma,
        e_f_hat: e_f,
        reference,
    })
}

/// The two-variable problem `min ‖x‖²/2` over `{1ᵀx ≥ 8}`.
pub fn example1_scenario(horizon: usize) -> Result<ScenarioTimeline> {
    let set = ConvexSet::halfspace(DVector::from_vec(vec![1.0, 1.0]), 8.0, Sense::Ge)?;
    let timeline = ScenarioTimeline {
        name: "example1".into(),
        horizon,
        phi_a: DMatrix::identity(2, 2),
        phi_b: Series::Constant(DVector::zeros(2)),
        phi_c: 0.0,
        out_q: DMatrix::zeros(0, 0),
        out_r: DVector::zeros(0),
        inputs: BlockPartition::single(2, set)?,
        plant: LinearPlant::new(
            DMatrix::zeros(0, 2),
            DMatrix::zeros(0, 0),
            vec![DVector::zeros(0); horizon.max(1)],
            0.0,
            0,
        )?,
        g_mat: DMatrix::zeros(0, 0),
        g_offset: Series::Constant(DVector::zeros(0)),
        tags: Vec::new(),
        dual_box: DualBox::uniform(0, DualBox::DEFAULT_MAX),
        feeder_outputs: Vec::new(),
        voltage_outputs: Vec::new(),
    };
    timeline.validate()?;
    Ok(timeline)
}
