//! Cosine-similarity step-size adaptation over variable groups.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{OfoError, Result};
use crate::operators::{ConstraintTag, GroupKind, StepSizeGroups, VariableGroup};

/// Gradients with a smaller norm carry no directional information.
pub const ZERO_GRADIENT_NORM: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRule {
    pub kappa_up: f64,
    pub kappa_down: f64,
    pub s_hi: f64,
    pub s_lo: f64,
}

impl GroupRule {
    /// Demo settings: `s̲ = 0`, `s̄ = 0.9`, `κ̄ = 1.005`, and `κ̲` of 0.95 for
    /// inputs, 0.995 for voltage duals and 0.5 for VPP duals.
    pub fn default_for(kind: GroupKind) -> Self {
        let kappa_down = match kind {
            GroupKind::Primal { .. } => 0.95,
            GroupKind::Dual(ConstraintTag::Vpp) => 0.5,
            GroupKind::Dual(ConstraintTag::Volt) | GroupKind::Dual(ConstraintTag::Generic) => 0.995,
        };
        Self {
            kappa_up: 1.005,
            kappa_down,
            s_hi: 0.9,
            s_lo: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.kappa_up > 1.0
            && self.kappa_down > 0.0
            && self.kappa_down < 1.0
            && -1.0 <= self.s_lo
            && self.s_lo <= self.s_hi
            && self.s_hi <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(OfoError::InvalidParameter(format!(
                "invalid adaptive rule {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroGradPolicy {
    #[default]
    Hold,
}

/// Per-group rules, aligned with [`StepSizeGroups::groups`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveConfig {
    pub rules: Vec<GroupRule>,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub zero_grad_policy: ZeroGradPolicy,
}

impl AdaptiveConfig {
    pub const GAMMA_MIN: f64 = 1e-6;
    pub const GAMMA_MAX: f64 = 1e3;

    pub fn defaults_for(groups: &[VariableGroup]) -> Self {
        Self {
            rules: groups.iter().map(|g| GroupRule::default_for(g.kind)).collect(),
            gamma_min: Self::GAMMA_MIN,
            gamma_max: Self::GAMMA_MAX,
            zero_grad_policy: ZeroGradPolicy::Hold,
        }
    }

    pub fn validate(&self, groups: &[VariableGroup]) -> Result<()> {
        if self.rules.len() != groups.len() {
            return Err(OfoError::DimensionMismatch {
                what: "adaptive rules",
                expected: groups.len(),
                found: self.rules.len(),
            });
        }
        if !(self.gamma_min > 0.0 && self.gamma_min <= self.gamma_max) {
            return Err(OfoError::InvalidParameter(
                "adaptive clamp bounds must satisfy 0 < gamma_min <= gamma_max".into(),
            ));
        }
        self.rules.iter().try_for_each(GroupRule::validate)
    }
}

/// `gᵀh / (‖g‖‖h‖)` clamped to `[-1, 1]`, or `None` when either gradient
/// is numerically zero.
pub fn cosine_similarity(g_now: &DVector<f64>, g_prev: &DVector<f64>) -> Option<f64> {
    let (a, b) = (g_now.norm(), g_prev.norm());
    if a < ZERO_GRADIENT_NORM || b < ZERO_GRADIENT_NORM || g_now.len() != g_prev.len() {
        return None;
    }
    Some((g_now.dot(g_prev) / (a * b)).clamp(-1.0, 1.0))
}

/// Threshold rule: scale up above `s̄`, down below `s̲`, hold otherwise,
/// then clamp to `[gamma_min, gamma_max]`.
pub fn update_group_stepsize(
    gamma: &DVector<f64>,
    s: f64,
    rule: &GroupRule,
    gamma_min: f64,
    gamma_max: f64,
) -> DVector<f64> {
    let factor = if s > rule.s_hi {
        rule.kappa_up
    } else if s < rule.s_lo {
        rule.kappa_down
    } else {
        1.0
    };
    gamma.map(|g| (g * factor).clamp(gamma_min, gamma_max))
}

/// Applies the rule to every group independently. `now` and `prev` are
/// stacked raw gradients `(∇_x L, ∇_λ L)`; without `prev` every group holds.
pub fn adapt_all(
    gammas: &StepSizeGroups,
    now: &DVector<f64>,
    prev: Option<&DVector<f64>>,
    cfg: &AdaptiveConfig,
) -> (StepSizeGroups, Vec<Option<f64>>) {
    let mut out = gammas.clone();
    let mut similarities = Vec::with_capacity(gammas.groups.len());
    for (group, rule) in gammas.groups.iter().zip(&cfg.rules) {
        let s = prev.and_then(|prev| {
            let pick = |v: &DVector<f64>| {
                DVector::from_iterator(group.coords.len(), group.coords.iter().map(|&i| v[i]))
            };
            cosine_similarity(&pick(now), &pick(prev))
        });
        similarities.push(s);
        if let Some(s) = s {
            let updated = update_group_stepsize(
                &gammas.group_values(group),
                s,
                rule,
                cfg.gamma_min,
                cfg.gamma_max,
            );
            for (&i, &g) in group.coords.iter().zip(updated.iter()) {
                out.set(i, g);
            }
        }
    }
    (out, similarities)
}
