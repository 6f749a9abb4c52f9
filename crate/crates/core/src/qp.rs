//! Target problem data: the quadratic program, the linear plant and the
//! regularization weights, plus the standing-assumption checks.

use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, OfoError, Result};
use crate::projection::{ConvexSet, Projector};

/// Minimum eigenvalue accepted as positive semidefinite.
pub const PSD_TOL: f64 = -1e-10;

/// A contiguous group of inputs owned by one subsystem, with its local set.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBlock {
    pub range: Range<usize>,
    pub set: ConvexSet,
}

/// Cartesian product of per-block input sets.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPartition {
    blocks: Vec<InputBlock>,
    n: usize,
}

impl BlockPartition {
    /// Builds a partition from block sizes and sets, in order.
    pub fn new(blocks: Vec<(usize, ConvexSet)>) -> Result<Self> {
        let mut start = 0;
        let mut out = Vec::with_capacity(blocks.len());
        for (size, set) in blocks {
            if size == 0 {
                return Err(OfoError::InvalidParameter("empty input block".into()));
            }
            set.validate()?;
            if let Some(dim) = set.dim() {
                check_dim("block set dimension", size, dim)?;
            }
            out.push(InputBlock {
                range: start..start + size,
                set,
            });
            start += size;
        }
        Ok(Self { blocks: out, n: start })
    }

    /// A single block covering all `n` coordinates.
    pub fn single(n: usize, set: ConvexSet) -> Result<Self> {
        if n == 0 {
            return Ok(Self {
                blocks: Vec::new(),
                n: 0,
            });
        }
        Self::new(vec![(n, set)])
    }

    pub fn blocks(&self) -> &[InputBlock] {
        &self.blocks
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn all_box_like(&self) -> bool {
        self.blocks.iter().all(|b| b.set.is_box_like())
    }

    /// Stacked per-coordinate bounds when every block is box-like.
    pub fn box_bounds(&self) -> Option<(DVector<f64>, DVector<f64>)> {
        let mut lo = DVector::zeros(self.n);
        let mut hi = DVector::zeros(self.n);
        for block in &self.blocks {
            let (l, h) = block.set.box_bounds(block.range.len())?;
            lo.rows_mut(block.range.start, block.range.len()).copy_from(&l);
            hi.rows_mut(block.range.start, block.range.len()).copy_from(&h);
        }
        Some((lo, hi))
    }
}

impl Projector for BlockPartition {
    fn project(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("input vector", self.n, z.len())?;
        let mut out = z.clone();
        for block in &self.blocks {
            let part = z.rows(block.range.start, block.range.len()).into_owned();
            let proj = block.set.project(&part)?;
            out.rows_mut(block.range.start, block.range.len())
                .copy_from(&proj);
        }
        Ok(out)
    }

    fn contains(&self, z: &DVector<f64>, tol: f64) -> bool {
        z.len() == self.n
            && self.blocks.iter().all(|block| {
                let part = z.rows(block.range.start, block.range.len()).into_owned();
                block.set.contains(&part, tol)
            })
    }
}

/// `min ½xᵀAx + bᵀx + c  s.t.  Dx + d ≤ 0,  x ∈ X₁ × … × X_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: f64,
    pub d_mat: DMatrix<f64>,
    pub d_vec: DVector<f64>,
    pub inputs: BlockPartition,
}

impl QuadraticProgram {
    pub fn new(
        a: DMatrix<f64>,
        b: DVector<f64>,
        c: f64,
        d_mat: DMatrix<f64>,
        d_vec: DVector<f64>,
        inputs: BlockPartition,
    ) -> Result<Self> {
        let n = b.len();
        check_dim("objective matrix rows", n, a.nrows())?;
        check_dim("objective matrix columns", n, a.ncols())?;
        check_dim("constraint matrix columns", n, d_mat.ncols())?;
        check_dim("constraint offset", d_mat.nrows(), d_vec.len())?;
        check_dim("block partition", n, inputs.dim())?;
        let scale = a.amax().max(1.0);
        if (&a - a.transpose()).amax() > 1e-12 * scale {
            return Err(OfoError::InvalidParameter(
                "objective matrix must be symmetric".into(),
            ));
        }
        Ok(Self {
            a,
            b,
            c,
            d_mat,
            d_vec,
            inputs,
        })
    }

    /// Unconstrained-in-g problem over a single block.
    pub fn without_constraints(
        a: DMatrix<f64>,
        b: DVector<f64>,
        c: f64,
        set: ConvexSet,
    ) -> Result<Self> {
        let n = b.len();
        Self::new(
            a,
            b,
            c,
            DMatrix::zeros(0, n),
            DVector::zeros(0),
            BlockPartition::single(n, set)?,
        )
    }

    pub fn n(&self) -> usize {
        self.b.len()
    }

    /// Number of inequality constraints `M`.
    pub fn m(&self) -> usize {
        self.d_vec.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim("x", self.n(), x.len())?;
        Ok(0.5 * x.dot(&(&self.a * x)) + self.b.dot(x) + self.c)
    }

    pub fn objective_gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("x", self.n(), x.len())?;
        Ok(&self.a * x + &self.b)
    }

    pub fn constraints(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("x", self.n(), x.len())?;
        Ok(&self.d_mat * x + &self.d_vec)
    }

    /// Largest constraint value clipped at zero.
    pub fn violation(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.constraints(x)?.iter().fold(0.0_f64, |m, &v| m.max(v)))
    }
}

/// `f(x) = ½xᵀAx + bᵀx + c`.
pub fn evaluate_objective(qp: &QuadraticProgram, x: &DVector<f64>) -> Result<f64> {
    qp.objective(x)
}

/// `g(x) = Dx + d`.
pub fn evaluate_constraints(qp: &QuadraticProgram, x: &DVector<f64>) -> Result<DVector<f64>> {
    qp.constraints(x)
}

/// Linear input-output model `y = Cx + Uw(k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPlant {
    pub c: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub w_traj: Vec<DVector<f64>>,
    /// Worst-case measurement error bound.
    pub e_y: f64,
    pub noise_seed: u64,
}

impl LinearPlant {
    pub fn new(
        c: DMatrix<f64>,
        u: DMatrix<f64>,
        w_traj: Vec<DVector<f64>>,
        e_y: f64,
        noise_seed: u64,
    ) -> Result<Self> {
        check_dim("disturbance map rows", c.nrows(), u.nrows())?;
        if w_traj.is_empty() {
            return Err(OfoError::InvalidParameter(
                "disturbance trajectory must be nonempty".into(),
            ));
        }
        for w in &w_traj {
            check_dim("disturbance vector", u.ncols(), w.len())?;
        }
        if !(e_y >= 0.0) {
            return Err(OfoError::InvalidParameter(
                "measurement error bound must be nonnegative".into(),
            ));
        }
        Ok(Self {
            c,
            u,
            w_traj,
            e_y,
            noise_seed,
        })
    }

    pub fn n_inputs(&self) -> usize {
        self.c.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.c.nrows()
    }

    pub fn horizon(&self) -> usize {
        self.w_traj.len()
    }

    pub fn disturbance(&self, k: usize) -> Result<&DVector<f64>> {
        self.w_traj.get(k).ok_or(OfoError::StepOutOfRange {
            k,
            horizon: self.horizon(),
        })
    }

    /// `U w(k)`, the uncontrollable part of the output.
    pub fn exogenous(&self, k: usize) -> Result<DVector<f64>> {
        Ok(&self.u * self.disturbance(k)?)
    }

    /// Noise-free output `Cx + Uw(k)`.
    pub fn output(&self, x: &DVector<f64>, k: usize) -> Result<DVector<f64>> {
        check_dim("plant input", self.n_inputs(), x.len())?;
        Ok(&self.c * x + self.exogenous(k)?)
    }
}

pub fn plant_output(plant: &LinearPlant, x: &DVector<f64>, k: usize) -> Result<DVector<f64>> {
    plant.output(x, k)
}

/// Output-space view of one stage: input cost `φ(x) = ½xᵀA_φx + b_φᵀx + c_φ`,
/// output cost `f₀(y) = ½yᵀQy + rᵀy` and output constraints `g(y) = Gy + e ≤ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputModel {
    pub phi_a: DMatrix<f64>,
    pub phi_b: DVector<f64>,
    pub phi_c: f64,
    pub out_q: DMatrix<f64>,
    pub out_r: DVector<f64>,
    pub g_mat: DMatrix<f64>,
    pub g_offset: DVector<f64>,
}

impl OutputModel {
    pub fn grad_phi(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.phi_a * x + &self.phi_b
    }

    pub fn phi(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.phi_a * x)) + self.phi_b.dot(x) + self.phi_c
    }

    pub fn f0(&self, y: &DVector<f64>) -> f64 {
        0.5 * y.dot(&(&self.out_q * y)) + self.out_r.dot(y)
    }

    pub fn grad_f0(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.out_q * y + &self.out_r
    }

    pub fn g(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.g_mat * y + &self.g_offset
    }

    /// Pre-composes the output terms with the plant at step `k`, giving the
    /// x-space program `f(x) = φ(x) + f₀(Cx + Uw)`, `g(x) = GCx + (GUw + e)`.
    pub fn compose(
        &self,
        plant: &LinearPlant,
        k: usize,
        inputs: BlockPartition,
    ) -> Result<QuadraticProgram> {
        let n = self.phi_b.len();
        check_dim("plant inputs", n, plant.n_inputs())?;
        check_dim("output cost", plant.n_outputs(), self.out_r.len())?;
        check_dim("output constraint columns", plant.n_outputs(), self.g_mat.ncols())?;
        let c = &plant.c;
        let uw = plant.exogenous(k)?;
        let a = &self.phi_a + c.transpose() * &self.out_q * c;
        let a = (&a + a.transpose()) * 0.5;
        let b = &self.phi_b + c.transpose() * (&self.out_q * &uw + &self.out_r);
        let c0 = self.phi_c + 0.5 * uw.dot(&(&self.out_q * &uw)) + self.out_r.dot(&uw);
        let d_mat = &self.g_mat * c;
        let d_vec = &self.g_mat * &uw + &self.g_offset;
        QuadraticProgram::new(a, b, c0, d_mat, d_vec, inputs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizationMode {
    /// `½p‖x‖² − ½d‖λ‖²`
    Homogeneous,
    /// `½p xᵀΓ_x⁻¹x − ½p λᵀΓ_λ⁻¹λ`
    GammaWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizationParams {
    pub p: f64,
    pub d: f64,
    pub mode: RegularizationMode,
}

impl RegularizationParams {
    pub fn homogeneous(p: f64, d: f64) -> Result<Self> {
        let reg = Self {
            p,
            d,
            mode: RegularizationMode::Homogeneous,
        };
        reg.validate()?;
        Ok(reg)
    }

    pub fn gamma_weighted(p: f64) -> Result<Self> {
        let reg = Self {
            p,
            d: p,
            mode: RegularizationMode::GammaWeighted,
        };
        reg.validate()?;
        Ok(reg)
    }

    /// No regularization, for studying the plain iteration. Does not pass
    /// [`validate`](Self::validate).
    pub fn off() -> Self {
        Self {
            p: 0.0,
            d: 0.0,
            mode: RegularizationMode::Homogeneous,
        }
    }

    pub fn is_off(&self) -> bool {
        self.p == 0.0 && self.d == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0) {
            return Err(OfoError::InvalidParameter(
                "regularization p must be positive".into(),
            ));
        }
        if self.mode == RegularizationMode::Homogeneous && !(self.d > 0.0) {
            return Err(OfoError::InvalidParameter(
                "regularization d must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Diagonal curvature added to the primal and subtracted from the dual.
    pub fn weights(
        &self,
        gamma_x: &DVector<f64>,
        gamma_lambda: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        match self.mode {
            RegularizationMode::Homogeneous => (
                DVector::from_element(gamma_x.len(), self.p),
                DVector::from_element(gamma_lambda.len(), self.d),
            ),
            RegularizationMode::GammaWeighted => (
                gamma_x.map(|g| self.p / g),
                gamma_lambda.map(|g| self.p / g),
            ),
        }
    }
}

/// Symmetric eigen-decomposition of the explicitly symmetrized matrix.
pub(crate) fn sym_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::try_new(sym, f64::EPSILON, 10_000).ok_or(OfoError::EigenFailed)
}

pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    Ok(sym_eigen(m)?.eigenvalues.min())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub witness: Option<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub checks: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Checks convexity, Slater's condition and plant consistency. Failures are
/// report entries rather than errors.
pub fn validate_problem(qp: &QuadraticProgram, plant: &LinearPlant) -> ValidationReport {
    let mut checks = Vec::new();

    checks.push(match min_eigenvalue(&qp.a) {
        Ok(lmin) => AssumptionCheck {
            name: "convexity",
            passed: lmin >= PSD_TOL,
            detail: format!("min eigenvalue of A = {lmin:.6e}"),
            witness: None,
        },
        Err(e) => AssumptionCheck {
            name: "convexity",
            passed: false,
            detail: e.to_string(),
            witness: None,
        },
    });

    checks.push(match slater_witness(qp) {
        Some((x, gmax)) => AssumptionCheck {
            name: "slater",
            passed: true,
            detail: format!("strictly feasible point with max g = {gmax:.6e}"),
            witness: Some(x),
        },
        None => AssumptionCheck {
            name: "slater",
            passed: false,
            detail: "no strictly feasible point found".into(),
            witness: None,
        },
    });

    let plant_ok = plant.n_inputs() == qp.n() && plant.e_y >= 0.0 && !plant.w_traj.is_empty();
    checks.push(AssumptionCheck {
        name: "plant",
        passed: plant_ok,
        detail: format!(
            "C is {}x{}, problem has n = {}, horizon {}",
            plant.c.nrows(),
            plant.c.ncols(),
            qp.n(),
            plant.horizon()
        ),
        witness: None,
    });

    ValidationReport { checks }
}

/// Searches for `x ∈ X` with `max_j g_j(x) < 0` by alternating projections
/// onto X and progressively less shrunk constraint halfspaces.
fn slater_witness(qp: &QuadraticProgram) -> Option<(DVector<f64>, f64)> {
    let start = qp.inputs.project(&DVector::zeros(qp.n())).ok()?;
    let gmax = |x: &DVector<f64>| {
        qp.constraints(x)
            .ok()
            .map(|g| g.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)))
    };
    if qp.m() == 0 {
        return Some((start, f64::NEG_INFINITY));
    }
    let row_norms: Vec<f64> = (0..qp.m()).map(|j| qp.d_mat.row(j).norm()).collect();
    // Rows with D_j = 0 are constant; they must already be strictly negative.
    if (0..qp.m()).any(|j| row_norms[j] == 0.0 && qp.d_vec[j] >= 0.0) {
        return None;
    }
    let strict = |x: &DVector<f64>| gmax(x).filter(|&g| g < -1e-12).map(|g| (x.clone(), g));
    if let Some(found) = strict(&start) {
        return Some(found);
    }
    for margin in [1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-6] {
        let mut x = start.clone();
        for _ in 0..5_000 {
            let g = qp.constraints(&x).ok()?;
            let (j, worst) = (0..qp.m())
                .filter(|&j| row_norms[j] > 0.0)
                .map(|j| (j, g[j] + margin * row_norms[j]))
                .fold((0, f64::NEG_INFINITY), |acc, v| if v.1 > acc.1 { v } else { acc });
            if worst <= 0.0 {
                break;
            }
            let row = qp.d_mat.row(j).transpose();
            let moved = &x - row * (worst / (row_norms[j] * row_norms[j]));
            x = qp.inputs.project(&moved).ok()?;
        }
        if let Some(found) = strict(&x) {
            return Some(found);
        }
    }
    None
}
