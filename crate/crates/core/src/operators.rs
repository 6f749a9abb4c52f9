//! Regularized Lagrangians, the heterogeneous primal-dual operator
//! `Φ̃(z) = (ΓW + pI)z + Γw`, and the eigenvalue analysis that sizes the
//! regularization needed for strong monotonicity.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, OfoError, Result};
use crate::qp::{sym_eigen, BlockPartition, QuadraticProgram, RegularizationParams};

/// Default margin added above `-λ_min` when sizing `p`.
pub const MONOTONICITY_MARGIN: f64 = 1e-3;

/// Grid service a constraint row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintTag {
    Volt,
    Vpp,
    Generic,
}

impl ConstraintTag {
    pub fn label(self) -> &'static str {
        match self {
            ConstraintTag::Volt => "volt",
            ConstraintTag::Vpp => "vpp",
            ConstraintTag::Generic => "generic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKind {
    Primal { block: usize },
    Dual(ConstraintTag),
}

/// One member of the adaptive group set Ω. `coords` index the stacked
/// vector `z = (x, λ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableGroup {
    pub name: String,
    pub kind: GroupKind,
    pub coords: Vec<usize>,
}

/// Global scaling α and the per-coordinate step sizes `γ_x`, `γ_λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSizeGroups {
    pub alpha: f64,
    pub gamma_x: DVector<f64>,
    pub gamma_lambda: DVector<f64>,
    pub groups: Vec<VariableGroup>,
}

impl StepSizeGroups {
    pub fn new(
        alpha: f64,
        gamma_x: DVector<f64>,
        gamma_lambda: DVector<f64>,
        groups: Vec<VariableGroup>,
    ) -> Result<Self> {
        let s = Self {
            alpha,
            gamma_x,
            gamma_lambda,
            groups,
        };
        s.validate()?;
        Ok(s)
    }

    /// One group per input block and one dual group per tag present, with
    /// all step sizes equal to one.
    pub fn uniform(inputs: &BlockPartition, tags: &[ConstraintTag], alpha: f64) -> Result<Self> {
        let n = inputs.dim();
        let mut groups: Vec<VariableGroup> = inputs
            .blocks()
            .iter()
            .enumerate()
            .map(|(i, b)| VariableGroup {
                name: format!("x{}", i + 1),
                kind: GroupKind::Primal { block: i },
                coords: b.range.clone().collect(),
            })
            .collect();
        for tag in [ConstraintTag::Volt, ConstraintTag::Vpp, ConstraintTag::Generic] {
            let coords: Vec<usize> = tags
                .iter()
                .enumerate()
                .filter(|(_, &t)| t == tag)
                .map(|(j, _)| n + j)
                .collect();
            if !coords.is_empty() {
                groups.push(VariableGroup {
                    name: format!("lambda_{}", tag.label()),
                    kind: GroupKind::Dual(tag),
                    coords,
                });
            }
        }
        Self::new(
            alpha,
            DVector::from_element(n, 1.0),
            DVector::from_element(tags.len(), 1.0),
            groups,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(OfoError::InvalidParameter("alpha must be positive".into()));
        }
        if self
            .gamma_x
            .iter()
            .chain(self.gamma_lambda.iter())
            .any(|&g| !(g > 0.0) || !g.is_finite())
        {
            return Err(OfoError::InvalidParameter(
                "step sizes must be positive and finite".into(),
            ));
        }
        let total = self.n() + self.m();
        let mut seen = vec![false; total];
        for group in &self.groups {
            for &i in &group.coords {
                if i >= total || seen[i] {
                    return Err(OfoError::InvalidParameter(format!(
                        "group `{}` repeats or overruns coordinate {i}",
                        group.name
                    )));
                }
                seen[i] = true;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(OfoError::InvalidParameter(format!(
                "coordinate {i} belongs to no step-size group"
            )));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.gamma_x.len()
    }

    pub fn m(&self) -> usize {
        self.gamma_lambda.len()
    }

    /// Concatenated `(γ_x, γ_λ)`.
    pub fn gamma_z(&self) -> DVector<f64> {
        let mut g = DVector::zeros(self.n() + self.m());
        g.rows_mut(0, self.n()).copy_from(&self.gamma_x);
        g.rows_mut(self.n(), self.m()).copy_from(&self.gamma_lambda);
        g
    }

    pub fn get(&self, i: usize) -> f64 {
        if i < self.n() {
            self.gamma_x[i]
        } else {
            self.gamma_lambda[i - self.n()]
        }
    }

    pub fn set(&mut self, i: usize, value: f64) {
        let n = self.n();
        if i < n {
            self.gamma_x[i] = value;
        } else {
            self.gamma_lambda[i - n] = value;
        }
    }

    pub fn group_values(&self, group: &VariableGroup) -> DVector<f64> {
        DVector::from_iterator(group.coords.len(), group.coords.iter().map(|&i| self.get(i)))
    }

    pub fn group_mean(&self, group: &VariableGroup) -> f64 {
        self.group_values(group).mean()
    }

    pub fn group_by_name(&self, name: &str) -> Option<&VariableGroup> {
        self.groups.iter().find(|g| g.name == name)
    }
}

/// `W = [[A, Dᵀ], [-D, 0]]`, `w = [b; -d]`, `Γ` and `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaddleOperatorData {
    pub w_mat: DMatrix<f64>,
    pub w_vec: DVector<f64>,
    pub gamma: DVector<f64>,
    pub p: f64,
}

impl SaddleOperatorData {
    pub fn from_qp(qp: &QuadraticProgram, gamma: DVector<f64>, p: f64) -> Result<Self> {
        let (n, m) = (qp.n(), qp.m());
        check_dim("operator step sizes", n + m, gamma.len())?;
        if gamma.iter().any(|&g| !(g > 0.0)) {
            return Err(OfoError::InvalidParameter(
                "operator step sizes must be positive".into(),
            ));
        }
        let mut w_mat = DMatrix::zeros(n + m, n + m);
        w_mat.view_mut((0, 0), (n, n)).copy_from(&qp.a);
        w_mat.view_mut((0, n), (n, m)).copy_from(&qp.d_mat.transpose());
        w_mat.view_mut((n, 0), (m, n)).copy_from(&(-&qp.d_mat));
        let mut w_vec = DVector::zeros(n + m);
        w_vec.rows_mut(0, n).copy_from(&qp.b);
        w_vec.rows_mut(n, m).copy_from(&(-&qp.d_vec));
        Ok(Self {
            w_mat,
            w_vec,
            gamma,
            p,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_vec.len()
    }

    /// The linear part `ΓW + pI`.
    pub fn linear_part(&self) -> DMatrix<f64> {
        let mut b = DMatrix::from_diagonal(&self.gamma) * &self.w_mat;
        for i in 0..self.dim() {
            b[(i, i)] += self.p;
        }
        b
    }

    /// Symmetric part `V = ½(ΓW + WᵀΓ)` of the unregularized operator.
    pub fn monotonicity_matrix(&self) -> DMatrix<f64> {
        monotonicity_matrix(&self.w_mat, &self.gamma)
    }
}

/// `(ΓW + pI)z + Γw`.
pub fn saddle_operator(data: &SaddleOperatorData, z: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("operator input", data.dim(), z.len())?;
    let gw = (&data.w_mat * z + &data.w_vec).component_mul(&data.gamma);
    Ok(gw + z * data.p)
}

/// `L(x,λ) + ½ xᵀR_x x − ½ λᵀR_λ λ` with the diagonal weights implied by
/// the regularization mode.
pub fn lagrangian(
    qp: &QuadraticProgram,
    reg: &RegularizationParams,
    gammas: &StepSizeGroups,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
) -> Result<f64> {
    check_dim("multipliers", qp.m(), lambda.len())?;
    if let Some(index) = lambda.iter().position(|&v| v < 0.0) {
        return Err(OfoError::NegativeMultiplier {
            index,
            value: lambda[index],
        });
    }
    let (rx, rl) = reg.weights(&gammas.gamma_x, &gammas.gamma_lambda);
    let base = qp.objective(x)? + lambda.dot(&qp.constraints(x)?);
    let primal_reg = 0.5 * x.component_mul(x).dot(&rx);
    let dual_reg = 0.5 * lambda.component_mul(lambda).dot(&rl);
    Ok(base + primal_reg - dual_reg)
}

/// Exact `(∇_x L_p, ∇_λ L_p)`.
pub fn lagrangian_gradient(
    qp: &QuadraticProgram,
    reg: &RegularizationParams,
    gammas: &StepSizeGroups,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_dim("multipliers", qp.m(), lambda.len())?;
    let (rx, rl) = reg.weights(&gammas.gamma_x, &gammas.gamma_lambda);
    let primal =
        qp.objective_gradient(x)? + qp.d_mat.transpose() * lambda + x.component_mul(&rx);
    let dual = qp.constraints(x)? - lambda.component_mul(&rl);
    Ok((primal, dual))
}

/// `½(ΓX + XᵀΓ)` for a positive diagonal `Γ`.
pub fn monotonicity_matrix(x: &DMatrix<f64>, gamma: &DVector<f64>) -> DMatrix<f64> {
    let g = DMatrix::from_diagonal(gamma);
    let gx = &g * x;
    (&gx + gx.transpose()) * 0.5
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizationSizing {
    pub p: f64,
    pub eta: f64,
    pub lambda_min: f64,
}

impl RegularizationSizing {
    pub fn is_positive_definite(&self) -> bool {
        self.lambda_min > 0.0
    }
}

/// Smallest `p` (plus `margin`) making the operator strongly monotone, and
/// the resulting modulus `η = p + min{0, λ_min}`.
pub fn min_regularization(msym: &DMatrix<f64>, margin: f64) -> Result<RegularizationSizing> {
    if !(margin > 0.0) {
        return Err(OfoError::InvalidParameter("margin must be positive".into()));
    }
    let lambda_min = if msym.nrows() == 0 {
        0.0
    } else {
        sym_eigen(msym)?.eigenvalues.min()
    };
    let p = (-lambda_min).max(0.0) + margin;
    let eta = p + lambda_min.min(0.0);
    Ok(RegularizationSizing {
        p,
        eta,
        lambda_min,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    pub passed: bool,
    pub samples: usize,
    pub violations: usize,
    /// Smallest observed `(Φ(z₁) − Φ(z₂))ᵀ(z₁ − z₂) / ‖z₁ − z₂‖²`.
    pub worst_ratio: f64,
    pub witness: Option<(DVector<f64>, DVector<f64>)>,
}

/// Samples pairs and checks `(Φ(z₁) − Φ(z₂))ᵀ(z₁ − z₂) ≥ η‖z₁ − z₂‖²` up to
/// `1e-9‖z₁ − z₂‖²`. Half of the pairs are isotropic; the other half have
/// their difference concentrated around the least monotone direction of
/// the operator's linear part.
pub fn verify_strong_monotonicity(
    data: &SaddleOperatorData,
    eta: f64,
    samples: usize,
    seed: u64,
) -> Result<MonotonicityReport> {
    if samples == 0 {
        return Err(OfoError::InvalidParameter("samples must be >= 1".into()));
    }
    let dim = data.dim();
    let weakest = if dim > 0 {
        let eig = sym_eigen(&data.linear_part())?;
        let imin = eig.eigenvalues.imin();
        Some(eig.eigenvectors.column(imin).into_owned())
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = |rng: &mut ChaCha8Rng| {
        DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal))
    };
    let mut report = MonotonicityReport {
        passed: true,
        samples,
        violations: 0,
        worst_ratio: f64::INFINITY,
        witness: None,
    };
    for s in 0..samples {
        let z1 = gauss(&mut rng) * 10.0;
        let z2 = match (&weakest, s % 2) {
            (Some(v), 1) => {
                let scale: f64 = rng.random_range(0.1..10.0);
                let jitter = gauss(&mut rng) * 0.05;
                &z1 + (v + jitter) * scale
            }
            _ => gauss(&mut rng) * 10.0,
        };
        let diff = &z1 - &z2;
        let sq = diff.norm_squared();
        if sq == 0.0 {
            continue;
        }
        let inner = (saddle_operator(data, &z1)? - saddle_operator(data, &z2)?).dot(&diff);
        let ratio = inner / sq;
        if ratio < report.worst_ratio {
            report.worst_ratio = ratio;
        }
        if inner < eta * sq - 1e-9 * sq {
            report.violations += 1;
            report.passed = false;
            if report.witness.is_none() {
                report.witness = Some((z1.clone(), z2.clone()));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::ConvexSet;
    use nalgebra::{dmatrix, dvector};

    fn example2(delta: f64) -> (DMatrix<f64>, DVector<f64>) {
        (dmatrix![2.0, -1.0; -1.0, 2.0], dvector![delta, 1.0])
    }

    fn unconstrained(a: DMatrix<f64>) -> QuadraticProgram {
        let n = a.nrows();
        QuadraticProgram::without_constraints(a, DVector::zeros(n), 0.0, ConvexSet::Unbounded)
            .unwrap()
    }

    #[test]
    fn example2_monotonicity_matrix() {
        let (a, g) = example2(20.0);
        assert_eq!(monotonicity_matrix(&a, &g), dmatrix![40.0, -10.5; -10.5, 2.0]);
    }

    #[test]
    fn identity_gamma_leaves_symmetric_matrix() {
        let a = dmatrix![3.0, 1.0; 1.0, 2.0];
        assert_eq!(monotonicity_matrix(&a, &dvector![1.0, 1.0]), a);
        assert_eq!(
            monotonicity_matrix(&DMatrix::identity(2, 2), &dvector![0.75, 1.25]),
            dmatrix![0.75, 0.0; 0.0, 1.25]
        );
    }

    #[test]
    fn example2_regularization_sizing() {
        let (a, g) = example2(20.0);
        let sizing = min_regularization(&monotonicity_matrix(&a, &g), 1e-3).unwrap();
        // 21 - √471.25
        let expected = 21.0 - 471.25_f64.sqrt();
        assert!((sizing.lambda_min - expected).abs() < 1e-12);
        assert!((sizing.lambda_min + 0.7).abs() < 0.05);
        assert!((sizing.p - (-expected + 1e-3)).abs() < 1e-12);
        assert!((sizing.eta - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn positive_definite_sizing_uses_margin_only() {
        let sizing = min_regularization(&DMatrix::identity(3, 3), 1e-3).unwrap();
        assert!((sizing.lambda_min - 1.0).abs() < 1e-14);
        assert_eq!(sizing.p, 1e-3);
        assert_eq!(sizing.eta, sizing.p);
    }

    #[test]
    fn definiteness_flips_between_13_and_14() {
        let (a, g13) = example2(13.0);
        let (_, g14) = example2(14.0);
        let s13 = min_regularization(&monotonicity_matrix(&a, &g13), 1e-3).unwrap();
        let s14 = min_regularization(&monotonicity_matrix(&a, &g14), 1e-3).unwrap();
        assert!(s13.is_positive_definite());
        assert!(!s14.is_positive_definite());
    }

    #[test]
    fn saddle_operator_examples() {
        let (a, g) = example2(20.0);
        let data = SaddleOperatorData::from_qp(&unconstrained(a), g, 0.0).unwrap();
        assert_eq!(
            saddle_operator(&data, &dvector![1.0, 0.0]).unwrap(),
            dvector![40.0, -1.0]
        );
        let data = SaddleOperatorData {
            w_mat: DMatrix::identity(2, 2),
            w_vec: DVector::zeros(2),
            gamma: dvector![1.0, 1.0],
            p: 0.0,
        };
        assert_eq!(
            saddle_operator(&data, &dvector![1.0, 0.0]).unwrap(),
            dvector![1.0, 0.0]
        );
        let data = SaddleOperatorData {
            w_mat: dmatrix![1.0, 2.0; -2.0, 0.0],
            w_vec: dvector![3.0, -1.0],
            gamma: dvector![2.0, 0.5],
            p: 0.7,
        };
        assert_eq!(
            saddle_operator(&data, &DVector::zeros(2)).unwrap(),
            dvector![6.0, -0.5]
        );
    }

    #[test]
    fn lagrangian_examples() {
        let qp = unconstrained(DMatrix::identity(2, 2));
        let inputs = qp.inputs.clone();
        let gammas = StepSizeGroups::uniform(&inputs, &[], 1.0).unwrap();
        let reg = RegularizationParams::gamma_weighted(2.0).unwrap();
        let v = lagrangian(&qp, &reg, &gammas, &dvector![1.0, 1.0], &DVector::zeros(0)).unwrap();
        // ½xᵀx = 1 plus ½p‖x‖² = 2.
        assert_eq!(v, 3.0);
    }

    #[test]
    fn lagrangian_rejects_negative_multipliers() {
        let qp = QuadraticProgram::new(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            0.0,
            dmatrix![1.0],
            dvector![0.0],
            BlockPartition::single(1, ConvexSet::Unbounded).unwrap(),
        )
        .unwrap();
        let gammas =
            StepSizeGroups::uniform(&qp.inputs, &[ConstraintTag::Generic], 1.0).unwrap();
        let reg = RegularizationParams::homogeneous(1.0, 1.0).unwrap();
        let err = lagrangian(&qp, &reg, &gammas, &dvector![0.0], &dvector![-0.5]).unwrap_err();
        assert_eq!(
            err,
            OfoError::NegativeMultiplier {
                index: 0,
                value: -0.5
            }
        );
    }

    #[test]
    fn tiny_regularization_approaches_plain_lagrangian() {
        let qp = QuadraticProgram::new(
            dmatrix![2.0, 0.5; 0.5, 1.0],
            dvector![1.0, -1.0],
            0.3,
            dmatrix![1.0, 2.0],
            dvector![-1.0],
            BlockPartition::single(2, ConvexSet::Unbounded).unwrap(),
        )
        .unwrap();
        let gammas =
            StepSizeGroups::uniform(&qp.inputs, &[ConstraintTag::Generic], 1.0).unwrap();
        let x = dvector![0.4, -1.2];
        let lam = dvector![0.8];
        let plain = qp.objective(&x).unwrap() + lam.dot(&qp.constraints(&x).unwrap());
        let reg = RegularizationParams::homogeneous(1e-12, 1e-12).unwrap();
        let v = lagrangian(&qp, &reg, &gammas, &x, &lam).unwrap();
        assert!((v - plain).abs() < 1e-10);
    }

    #[test]
    fn monotonicity_checks() {
        let (a, g) = example2(20.0);
        let qp = unconstrained(a.clone());
        let sizing = min_regularization(&monotonicity_matrix(&a, &g), 1e-3).unwrap();
        let data = SaddleOperatorData::from_qp(&qp, g.clone(), sizing.p).unwrap();
        assert!(verify_strong_monotonicity(&data, sizing.eta, 500, 7).unwrap().passed);

        let data = SaddleOperatorData::from_qp(&qp, g, 0.0).unwrap();
        let report = verify_strong_monotonicity(&data, 0.0, 500, 7).unwrap();
        assert!(!report.passed);
        let (z1, z2) = report.witness.unwrap();
        let d = &z1 - &z2;
        let inner = (saddle_operator(&data, &z1).unwrap() - saddle_operator(&data, &z2).unwrap())
            .dot(&d);
        assert!(inner < 0.0);

        let data = SaddleOperatorData::from_qp(&unconstrained(a), dvector![1.0, 1.0], 0.1).unwrap();
        let report = verify_strong_monotonicity(&data, 0.1, 500, 3).unwrap();
        assert!(report.passed);
        assert!(report.worst_ratio >= 0.1 - 1e-9);
    }

    #[test]
    fn homogeneous_gamma_scales_symmetric_part() {
        let qp = QuadraticProgram::new(
            dmatrix![2.0, 0.5; 0.5, 1.0],
            DVector::zeros(2),
            0.0,
            dmatrix![1.0, 2.0; -1.0, 0.5],
            DVector::zeros(2),
            BlockPartition::single(2, ConvexSet::Unbounded).unwrap(),
        )
        .unwrap();
        let data = SaddleOperatorData::from_qp(&qp, DVector::from_element(4, 2.5), 0.0).unwrap();
        let w = &data.w_mat;
        let expected = (w + w.transpose()) * (0.5 * 2.5);
        assert!((data.monotonicity_matrix() - expected).amax() < 1e-14);
    }

    #[test]
    fn uniform_groups_cover_blocks_and_tags() {
        let inputs = BlockPartition::new(vec![
            (2, ConvexSet::Unbounded),
            (2, ConvexSet::Unbounded),
        ])
        .unwrap();
        let tags = [
            ConstraintTag::Volt,
            ConstraintTag::Vpp,
            ConstraintTag::Volt,
        ];
        let g = StepSizeGroups::uniform(&inputs, &tags, 0.1).unwrap();
        let names: Vec<_> = g.groups.iter().map(|g| g.name.as_str()).collect();
        assert_eq!(names, ["x1", "x2", "lambda_volt", "lambda_vpp"]);
        assert_eq!(g.group_by_name("lambda_volt").unwrap().coords, vec![4, 6]);
        let mut bad = g.clone();
        bad.groups.pop();
        assert!(bad.validate().is_err());
    }
}
