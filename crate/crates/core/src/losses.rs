//! Training objectives, as graph builders and as plain functions.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, KeypointSet};
use crate::graph::{Graph, NodeId};
use crate::linalg::{self, Vec3};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the correspondence term.
    pub corr: f64,
    /// Weight of the axis-consistency term.
    pub axis: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            corr: 1.0,
            axis: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.corr >= 0.0 && self.axis >= 0.0 && self.corr.is_finite() && self.axis.is_finite())
        {
            return Err(Error::Invalid(format!(
                "loss weights must be finite and nonnegative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Values of the individual terms; `None` marks an inactive term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub occ_t: f64,
    pub occ_s: f64,
    pub corr: Option<f64>,
    pub axis: Option<f64>,
}

/// `L = L_occ_t + L_occ_s + λ₁ L_corr + λ₂ L_axis`; inactive terms count as 0.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<f64> {
    let all = [Some(parts.occ_t), Some(parts.occ_s), parts.corr, parts.axis];
    if all.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss parts {parts:?}")));
    }
    Ok(parts.occ_t
        + parts.occ_s
        + weights.corr * parts.corr.unwrap_or(0.0)
        + weights.axis * parts.axis.unwrap_or(0.0))
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn occupancy_loss(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Shape(format!(
            "occupancy_loss: {} probabilities, {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut g = Graph::new();
    let p = g.constant(Tensor::from_vec(probs.to_vec()));
    let y = g.constant(Tensor::from_vec(labels.to_vec()));
    let l = g.bce(p, y)?;
    Ok(g.evaluate(&BTreeMap::<String, Tensor>::new())?
        .get(l)
        .item())
}

/// Sum of squared residuals of `k_g` against the best rigid motion of `k_c`.
/// Returns the loss and whether the fit was degenerate.
pub fn correspondence_loss(k_c: &KeypointSet, k_g: &KeypointSet) -> Result<(f64, bool)> {
    if k_c.len() != k_g.len() || k_c.len() < 3 {
        return Err(Error::Invalid(format!(
            "correspondence_loss needs two sets of m >= 3, got {} and {}",
            k_c.len(),
            k_g.len()
        )));
    }
    let fit = geometry::fit_rigid(k_c.points(), k_g.points());
    Ok((fit.residual, fit.degenerate))
}

/// `min(1 - μ₁₂·μ₂₃, 1 + μ₁₂·μ₂₃)`; inputs are normalized first.
pub fn axis_consistency_loss(mu_12: Vec3, mu_23: Vec3) -> Result<f64> {
    let a = linalg::normalize(mu_12).ok_or_else(|| Error::Invalid("zero axis".into()))?;
    let b = linalg::normalize(mu_23).ok_or_else(|| Error::Invalid("zero axis".into()))?;
    let d = linalg::dot(a, b);
    Ok((1.0 - d).min(1.0 + d))
}

/// Graph form of the occupancy loss.
pub fn occupancy_node(g: &mut Graph, probs: NodeId, labels: &[f64]) -> Result<NodeId> {
    let y = g.constant(Tensor::from_vec(labels.to_vec()));
    g.bce(probs, y)
}

/// Subtracts the row mean of an `[m, 3]` node.
fn centered(g: &mut Graph, k: NodeId) -> Result<NodeId> {
    let m = g.shape(k)[0];
    let mean = g.mean_rows(k)?;
    let rows = g.broadcast(mean, m)?;
    g.sub(k, rows)
}

/// Correspondence loss between `[m, 3]` keypoint nodes. The optimal
/// translation is folded in by centering; the rotation comes from the
/// closed-form fit and is held constant when `detach_fit` is set.
/// Also returns the rotation node.
pub fn correspondence_node(
    g: &mut Graph,
    k_c: NodeId,
    k_g: NodeId,
    detach_fit: bool,
) -> Result<(NodeId, NodeId)> {
    let r = g.rigid_rotation(k_c, k_g, detach_fit)?;
    let p = centered(g, k_c)?;
    let q = centered(g, k_g)?;
    let rt = g.transpose(r)?;
    let pred = g.matmul(p, rt)?;
    let diff = g.sub(q, pred)?;
    let sq = g.mul(diff, diff)?;
    Ok((g.sum(sq), r))
}

/// `1 - |μ₁₂ · μ₂₃|` from two rotation nodes.
pub fn axis_node(g: &mut Graph, r_12: NodeId, r_23: NodeId) -> Result<NodeId> {
    let a = g.rotation_axis(r_12)?;
    let b = g.rotation_axis(r_23)?;
    let prod = g.mul(a, b)?;
    let d = g.sum(prod);
    let ad = g.abs(d);
    Ok(g.one_minus(ad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_at_one_half_is_ln2() {
        let l = occupancy_loss(&[0.5; 7], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((l - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        assert!(occupancy_loss(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).unwrap() <= 1e-6);
    }

    #[test]
    fn axis_loss_identities() {
        let z = [0.0, 0.0, 1.0];
        assert_eq!(axis_consistency_loss(z, z).unwrap(), 0.0);
        assert_eq!(axis_consistency_loss(z, [0.0, 0.0, -1.0]).unwrap(), 0.0);
        assert_eq!(axis_consistency_loss(z, [1.0, 0.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn total_loss_arithmetic() {
        let parts = LossParts {
            occ_t: 0.5,
            occ_s: 0.3,
            corr: Some(0.2),
            axis: Some(0.1),
        };
        assert!((total_loss(&parts, &LossWeights::default()).unwrap() - 1.1).abs() < 1e-15);
        let zero = LossWeights {
            corr: 0.0,
            axis: 0.0,
        };
        assert_eq!(total_loss(&parts, &zero).unwrap(), 0.8);
        assert_eq!(
            total_loss(&LossParts::default(), &LossWeights::default()).unwrap(),
            0.0
        );
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(occupancy_loss(&[0.5], &[1.0, 0.0]).is_err());
    }
}
