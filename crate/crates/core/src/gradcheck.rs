//! Central finite-difference checks of the analytic gradients.
//!
//! The reference objective here is evaluated through the standalone loss
//! functions rather than [`batch_objective`], and the distillation term in
//! KL form: `T^2 * KL(p_old || q)` differs from `T^2 * H(p_old, q)` by a
//! parameter-free constant, so both have the same gradient, but the KL form
//! keeps the objective small and the difference quotient free of
//! cancellation noise.

use crate::detector::{DetectorState, GroupMask, ParamGroup, RegionOutput, Tensor};
use crate::error::Result;
use crate::losses::{
    batch_objective, classification_loss, entropy, localization_loss, objectness_loss,
    cross_entropy_with_logits, DistillTargetStore, LossConfig, SceneSamples,
};

/// Loss over the batch minus `T^2` times the mean stored entropy.
pub fn reference_objective(
    state: &DetectorState,
    batch: &[SceneSamples<'_>],
    store: Option<&DistillTargetStore>,
    cfg: &LossConfig,
) -> Result<f64> {
    let mut cls_out = Vec::new();
    let mut cls_lab = Vec::new();
    let mut obj_out = Vec::new();
    let mut obj_lab = Vec::new();
    let mut loc_out = Vec::new();
    let mut loc_tgt = Vec::new();
    let mut kl_sum = 0.0;
    let mut kl_n = 0usize;
    let outputs: Vec<Vec<RegionOutput>> = batch
        .iter()
        .map(|s| {
            s.regions
                .iter()
                .map(|r| state.forward_region(s.scene, &s.scene.proposals[r.proposal].bbox))
                .collect()
        })
        .collect();
    for (s, outs) in batch.iter().zip(&outputs) {
        for (r, o) in s.regions.iter().zip(outs) {
            if let Some(row) = r.cls_row {
                cls_out.push(o);
                cls_lab.push(row);
            }
            if let Some(y) = r.objectness {
                obj_out.push(o);
                obj_lab.push(y);
            }
            if let Some(t) = r.loc_target {
                loc_out.push(o);
                loc_tgt.push(t);
            }
            if let (Some(st), Some((sid, inst))) = (store, r.distill_key) {
                let p = st.get(sid, inst)?;
                let ce = cross_entropy_with_logits(p, &o.logits[st.rows()], st.temperature);
                kl_sum += ce - entropy(p);
                kl_n += 1;
            }
        }
    }
    let t2 = cfg.temperature * cfg.temperature;
    let kd = if kl_n == 0 { 0.0 } else { kl_sum / kl_n as f64 };
    Ok(cfg.rpn_weight * objectness_loss(&obj_out, &obj_lab)
        + cfg.loc_weight * localization_loss(&loc_out, &loc_tgt)
        + classification_loss(&cls_out, &cls_lab)
        + t2 * kd)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordinateCheck {
    pub tensor: Tensor,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl CoordinateCheck {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

pub fn coordinate(state: &mut DetectorState, tensor: Tensor, index: usize) -> &mut f64 {
    let l = state.tensor_mut(tensor);
    let nw = l.weight.len();
    if index < nw {
        &mut l.weight[index]
    } else {
        &mut l.bias[index - nw]
    }
}

/// Compares the analytic gradient of the full objective with central
/// differences at step `eps` on the given `(tensor, flat index)` pairs.
pub fn check_coordinates(
    state: &DetectorState,
    batch: &[SceneSamples<'_>],
    store: Option<&DistillTargetStore>,
    cfg: &LossConfig,
    coords: &[(Tensor, usize)],
    eps: f64,
) -> Result<Vec<CoordinateCheck>> {
    let (_, grads) = batch_objective(state, batch, store, cfg, Some(GroupMask::ALL))?;
    let mut grads = grads.expect("gradient requested");
    let mut out = Vec::with_capacity(coords.len());
    for &(tensor, index) in coords {
        let mut plus = state.clone();
        *coordinate(&mut plus, tensor, index) += eps;
        let mut minus = state.clone();
        *coordinate(&mut minus, tensor, index) -= eps;
        let numeric = (reference_objective(&plus, batch, store, cfg)?
            - reference_objective(&minus, batch, store, cfg)?)
            / (2.0 * eps);
        out.push(CoordinateCheck {
            tensor,
            index,
            analytic: *coordinate(&mut grads, tensor, index),
            numeric,
        });
    }
    Ok(out)
}

/// All `(tensor, index)` pairs of a group, in fixed order.
pub fn group_coordinates(state: &DetectorState, group: ParamGroup) -> Vec<(Tensor, usize)> {
    Tensor::ALL
        .iter()
        .filter(|t| t.group() == group)
        .flat_map(|&t| (0..state.tensor(t).param_count()).map(move |i| (t, i)))
        .collect()
}
