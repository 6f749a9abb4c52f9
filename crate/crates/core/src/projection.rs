//! Euclidean projections onto the convex sets used by the solvers.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, OfoError, Result};

/// Default absolute tolerance for membership tests.
pub const MEMBERSHIP_TOL: f64 = 1e-10;

/// Sweep cap for Dykstra's alternating projections.
pub const DYKSTRA_MAX_SWEEPS: usize = 10_000;

/// Residual tolerance for Dykstra's alternating projections.
pub const DYKSTRA_TOL: f64 = 1e-10;

/// Anything that can be projected onto and tested for membership.
pub trait Projector {
    fn project(&self, z: &DVector<f64>) -> Result<DVector<f64>>;
    fn contains(&self, z: &DVector<f64>, tol: f64) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sense {
    /// `aᵀx ≥ β`
    Ge,
    /// `aᵀx ≤ β`
    Le,
}

/// Closed convex sets with cheap (or Dykstra-composed) projections.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvexSet {
    Box {
        lower: DVector<f64>,
        upper: DVector<f64>,
    },
    Halfspace {
        normal: DVector<f64>,
        offset: f64,
        sense: Sense,
    },
    Ball {
        center: DVector<f64>,
        radius: f64,
    },
    NonnegativeOrthant,
    Intersection(Vec<ConvexSet>),
    Unbounded,
}

impl ConvexSet {
    pub fn boxed(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        let set = ConvexSet::Box { lower, upper };
        set.validate()?;
        Ok(set)
    }

    pub fn halfspace(normal: DVector<f64>, offset: f64, sense: Sense) -> Result<Self> {
        let set = ConvexSet::Halfspace {
            normal,
            offset,
            sense,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn ball(center: DVector<f64>, radius: f64) -> Result<Self> {
        let set = ConvexSet::Ball { center, radius };
        set.validate()?;
        Ok(set)
    }

    /// Checks the descriptor invariants.
    pub fn validate(&self) -> Result<()> {
        match self {
            ConvexSet::Box { lower, upper } => {
                check_dim("box upper bound", lower.len(), upper.len())?;
                if let Some(i) = (0..lower.len()).find(|&i| !(lower[i] <= upper[i])) {
                    return Err(OfoError::InvalidParameter(format!(
                        "box lower bound exceeds upper bound at coordinate {i}"
                    )));
                }
                Ok(())
            }
            ConvexSet::Halfspace { normal, offset, .. } => {
                if normal.norm() == 0.0 || !offset.is_finite() {
                    return Err(OfoError::InvalidParameter(
                        "halfspace normal must be nonzero with finite offset".into(),
                    ));
                }
                Ok(())
            }
            ConvexSet::Ball { radius, .. } => {
                if !(*radius > 0.0) {
                    return Err(OfoError::InvalidParameter(
                        "ball radius must be positive".into(),
                    ));
                }
                Ok(())
            }
            ConvexSet::Intersection(parts) => parts.iter().try_for_each(ConvexSet::validate),
            ConvexSet::NonnegativeOrthant | ConvexSet::Unbounded => Ok(()),
        }
    }

    /// Dimension fixed by the descriptor, if any.
    pub fn dim(&self) -> Option<usize> {
        match self {
            ConvexSet::Box { lower, .. } => Some(lower.len()),
            ConvexSet::Halfspace { normal, .. } => Some(normal.len()),
            ConvexSet::Ball { center, .. } => Some(center.len()),
            ConvexSet::Intersection(parts) => parts.iter().find_map(ConvexSet::dim),
            ConvexSet::NonnegativeOrthant | ConvexSet::Unbounded => None,
        }
    }

    /// True when the set is a (possibly unbounded) coordinate box.
    pub fn is_box_like(&self) -> bool {
        matches!(
            self,
            ConvexSet::Box { .. } | ConvexSet::NonnegativeOrthant | ConvexSet::Unbounded
        )
    }

    /// Per-coordinate bounds for box-like sets.
    pub fn box_bounds(&self, n: usize) -> Option<(DVector<f64>, DVector<f64>)> {
        match self {
            ConvexSet::Box { lower, upper } => Some((lower.clone(), upper.clone())),
            ConvexSet::NonnegativeOrthant => Some((
                DVector::zeros(n),
                DVector::from_element(n, f64::INFINITY),
            )),
            ConvexSet::Unbounded => Some((
                DVector::from_element(n, f64::NEG_INFINITY),
                DVector::from_element(n, f64::INFINITY),
            )),
            _ => None,
        }
    }

    fn check(&self, z: &DVector<f64>) -> Result<()> {
        match self.dim() {
            Some(n) => check_dim("projection input", n, z.len()),
            None => Ok(()),
        }
    }
}

impl Projector for ConvexSet {
    fn project(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(z)?;
        Ok(match self {
            ConvexSet::Box { lower, upper } => {
                DVector::from_fn(z.len(), |i, _| z[i].clamp(lower[i], upper[i]))
            }
            ConvexSet::Halfspace {
                normal,
                offset,
                sense,
            } => {
                let value = normal.dot(z);
                let violated = match sense {
                    Sense::Ge => value < *offset,
                    Sense::Le => value > *offset,
                };
                if violated {
                    z + normal * ((offset - value) / normal.norm_squared())
                } else {
                    z.clone()
                }
            }
            ConvexSet::Ball { center, radius } => {
                let diff = z - center;
                let dist = diff.norm();
                if dist > *radius {
                    center + diff * (radius / dist)
                } else {
                    z.clone()
                }
            }
            ConvexSet::NonnegativeOrthant => z.map(|v| v.max(0.0)),
            ConvexSet::Intersection(parts) => dykstra(parts, z)?,
            ConvexSet::Unbounded => z.clone(),
        })
    }

    fn contains(&self, z: &DVector<f64>, tol: f64) -> bool {
        if self.check(z).is_err() {
            return false;
        }
        match self {
            ConvexSet::Box { lower, upper } => z
                .iter()
                .enumerate()
                .all(|(i, &v)| v >= lower[i] - tol && v <= upper[i] + tol),
            ConvexSet::Halfspace {
                normal,
                offset,
                sense,
            } => {
                let value = normal.dot(z);
                match sense {
                    Sense::Ge => value >= offset - tol,
                    Sense::Le => value <= offset + tol,
                }
            }
            ConvexSet::Ball { center, radius } => (z - center).norm() <= radius + tol,
            ConvexSet::NonnegativeOrthant => z.iter().all(|&v| v >= -tol),
            ConvexSet::Intersection(parts) => parts.iter().all(|p| p.contains(z, tol)),
            ConvexSet::Unbounded => z.iter().all(|v| v.is_finite()),
        }
    }
}

/// Dykstra's alternating projections onto an intersection.
fn dykstra(parts: &[ConvexSet], z: &DVector<f64>) -> Result<DVector<f64>> {
    match parts {
        [] => return Ok(z.clone()),
        [only] => return only.project(z),
        _ => {}
    }
    let tol = DYKSTRA_TOL * z.norm().max(1.0);
    let mut x = z.clone();
    let mut increments = vec![DVector::zeros(z.len()); parts.len()];
    let mut residual = f64::INFINITY;
    for _ in 0..DYKSTRA_MAX_SWEEPS {
        residual = 0.0;
        for (set, inc) in parts.iter().zip(increments.iter_mut()) {
            let shifted = &x + &*inc;
            let y = set.project(&shifted)?;
            let new_inc = shifted - &y;
            residual = residual.max((&y - &x).norm()).max((&new_inc - &*inc).norm());
            *inc = new_inc;
            x = y;
        }
        if residual <= tol {
            return Ok(x);
        }
    }
    Err(OfoError::ProjectionNotConverged {
        sweeps: DYKSTRA_MAX_SWEEPS,
        residual,
    })
}

/// Free-function form of [`Projector::project`].
pub fn project(set: &ConvexSet, z: &DVector<f64>) -> Result<DVector<f64>> {
    set.project(z)
}

/// Free-function form of [`Projector::contains`].
pub fn membership(set: &ConvexSet, z: &DVector<f64>, tol: f64) -> bool {
    set.contains(z, tol)
}

/// Compact dual domain `[0, λ_max]` per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct DualBox {
    pub lambda_max: DVector<f64>,
}

impl DualBox {
    pub const DEFAULT_MAX: f64 = 1e3;

    pub fn new(lambda_max: DVector<f64>) -> Result<Self> {
        if lambda_max.iter().any(|&v| !(v > 0.0)) {
            return Err(OfoError::InvalidParameter(
                "dual box upper bounds must be positive".into(),
            ));
        }
        Ok(Self { lambda_max })
    }

    pub fn uniform(m: usize, bound: f64) -> Self {
        Self {
            lambda_max: DVector::from_element(m, bound),
        }
    }

    pub fn dim(&self) -> usize {
        self.lambda_max.len()
    }

    /// Indices of multipliers within `fraction` of their upper bound.
    pub fn near_upper(&self, lambda: &DVector<f64>, fraction: f64) -> Vec<usize> {
        (0..self.dim())
            .filter(|&j| lambda[j] >= (1.0 - fraction) * self.lambda_max[j])
            .collect()
    }
}

impl Projector for DualBox {
    fn project(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("dual projection input", self.dim(), z.len())?;
        Ok(DVector::from_fn(z.len(), |j, _| {
            z[j].clamp(0.0, self.lambda_max[j])
        }))
    }

    fn contains(&self, z: &DVector<f64>, tol: f64) -> bool {
        z.len() == self.dim()
            && z
                .iter()
                .zip(self.lambda_max.iter())
                .all(|(&v, &hi)| v >= -tol && v <= hi + tol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn example1_set() -> ConvexSet {
        ConvexSet::halfspace(dvector![1.0, 1.0], 8.0, Sense::Ge).unwrap()
    }

    #[test]
    fn halfspace_projection_of_origin() {
        let p = example1_set().project(&dvector![0.0, 0.0]).unwrap();
        assert_eq!(p, dvector![4.0, 4.0]);
    }

    #[test]
    fn box_clamps_componentwise() {
        let set = ConvexSet::boxed(dvector![0.0, 0.0], dvector![1.0, 1.0]).unwrap();
        assert_eq!(set.project(&dvector![2.0, -1.0]).unwrap(), dvector![1.0, 0.0]);
    }

    #[test]
    fn points_inside_are_fixed() {
        let sets = [
            example1_set(),
            ConvexSet::boxed(dvector![0.0, 0.0], dvector![1.0, 1.0]).unwrap(),
            ConvexSet::ball(dvector![0.0, 0.0], 2.0).unwrap(),
            ConvexSet::NonnegativeOrthant,
            ConvexSet::Unbounded,
        ];
        for set in &sets {
            let z = set.project(&dvector![0.7, 0.9]).unwrap();
            assert_eq!(set.project(&z).unwrap(), z);
        }
    }

    #[test]
    fn membership_examples() {
        let hs = example1_set();
        assert!(hs.contains(&dvector![4.0, 4.0], 0.0));
        assert!(!hs.contains(&dvector![3.9, 4.0], 0.0));
        let unit = ConvexSet::boxed(dvector![0.0, 0.0], dvector![1.0, 1.0]).unwrap();
        assert!(unit.contains(&dvector![1.0 + 1e-12, 0.5], 1e-10));
        assert!(!unit.contains(&dvector![1.0 + 1e-9, 0.5], 1e-10));
    }

    #[test]
    fn invalid_descriptors_rejected() {
        assert!(ConvexSet::boxed(dvector![1.0], dvector![0.0]).is_err());
        assert!(ConvexSet::halfspace(dvector![0.0, 0.0], 1.0, Sense::Le).is_err());
        assert!(ConvexSet::ball(dvector![0.0], 0.0).is_err());
        assert!(DualBox::new(dvector![1.0, 0.0]).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let err = example1_set().project(&dvector![1.0]).unwrap_err();
        assert!(matches!(err, OfoError::DimensionMismatch { .. }));
    }

    #[test]
    fn box_halfspace_intersection_hits_corner() {
        // {x ∈ [0,1]², x₁ + x₂ ≥ 1.5}: the projection of the origin is (0.75, 0.75).
        let set = ConvexSet::Intersection(vec![
            ConvexSet::boxed(dvector![0.0, 0.0], dvector![1.0, 1.0]).unwrap(),
            ConvexSet::halfspace(dvector![1.0, 1.0], 1.5, Sense::Ge).unwrap(),
        ]);
        let p = set.project(&dvector![0.0, 0.0]).unwrap();
        assert!((p - dvector![0.75, 0.75]).norm() < 1e-9);
        // (2, -1) projects onto the corner (1, 0.5).
        let q = set.project(&dvector![2.0, -1.0]).unwrap();
        assert!((q - dvector![1.0, 0.5]).norm() < 1e-9);
    }

    #[test]
    fn dual_box_flags_saturation() {
        let dual = DualBox::uniform(3, 10.0);
        let lam = dual.project(&dvector![-1.0, 9.95, 20.0]).unwrap();
        assert_eq!(lam, dvector![0.0, 9.95, 10.0]);
        assert_eq!(dual.near_upper(&lam, 0.01), vec![1, 2]);
    }
}
