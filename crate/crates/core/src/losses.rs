//! Training objectives: classification, objectness, localization and the
//! pre-computed knowledge-distillation term, combined as
//! `L = rpn + loc + cls + T^2 * kd`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{class_row, DetectorState, GroupMask, RegionOutput, RegionUpstream, BACKGROUND_ROW};
use crate::error::{Error, Result};
use crate::model::{BoundingBox, ClassId, ExposedScene, Instance, Proposal, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Regions with IoU strictly above `alpha` are positives.
    pub alpha: f64,
    pub temperature: f64,
    pub loc_weight: f64,
    pub rpn_weight: f64,
    /// Regions with IoU below this are background.
    pub background_iou: f64,
    /// Cap on sampled background regions per positive region.
    pub background_per_positive: usize,
    /// Whether the background logit takes part in distillation.
    pub distill_background: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.7,
            temperature: 20.0,
            loc_weight: 1.0,
            rpn_weight: 1.0,
            background_iou: 0.3,
            background_per_positive: 3,
            distill_background: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} must lie in (0, 1)", self.alpha)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.background_iou > self.alpha || self.background_iou <= 0.0 {
            return Err(Error::Config("background_iou must lie in (0, alpha]".into()));
        }
        if self.loc_weight < 0.0 || self.rpn_weight < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// `softmax(z / T)` with max subtraction.
pub fn scaled_softmax(z: &[f64], temperature: f64) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - m) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_scaled_softmax(z: &[f64], temperature: f64) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = z.iter().map(|v| (v - m) / temperature).collect();
    let lse = shifted.iter().map(|v| v.exp()).sum::<f64>().ln();
    shifted.into_iter().map(|v| v - lse).collect()
}

/// Proposals whose stored `max_iou` is strictly above `alpha`, paired with
/// the index of their best-overlapping instance.
pub fn select_positive_regions(scene: &Scene, alpha: f64) -> Vec<(&Proposal, usize)> {
    scene
        .proposals
        .iter()
        .filter(|p| p.max_iou > alpha)
        .filter_map(|p| p.matched_gt.map(|g| (p, g)))
        .collect()
}

/// Same selection against annotated instances only, as
/// `(proposal index, instance index, iou)`.
pub fn select_visible_positives(exposed: &ExposedScene, alpha: f64) -> Vec<(usize, usize, f64)> {
    exposed
        .scene
        .proposals
        .iter()
        .enumerate()
        .filter_map(|(pi, p)| match exposed.visible_match(&p.bbox) {
            (Some(g), v) if v > alpha => Some((pi, g, v)),
            _ => None,
        })
        .collect()
}

/// Old-model class distributions at ground-truth boxes, keyed by
/// `(scene_id, instance index)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillTargetStore {
    pub temperature: f64,
    /// Classes registered when the targets were computed.
    pub old_classes: Vec<ClassId>,
    pub include_background: bool,
    pub entries: BTreeMap<(u64, usize), Vec<f64>>,
}

impl DistillTargetStore {
    /// Logit rows covered by each stored vector.
    pub fn rows(&self) -> std::ops::Range<usize> {
        let start = if self.include_background { BACKGROUND_ROW } else { 1 };
        start..self.old_classes.len() + 1
    }

    pub fn get(&self, scene_id: u64, instance: usize) -> Result<&[f64]> {
        self.entries
            .get(&(scene_id, instance))
            .map(Vec::as_slice)
            .ok_or(Error::MissingDistillTarget { scene_id, instance })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Mean entropy of the stored distributions.
    pub fn mean_entropy(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.values().map(|p| entropy(p)).sum::<f64>() / self.entries.len() as f64
    }
}

pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|v| **v > 0.0).map(|v| -v * v.ln()).sum()
}

/// `H(p, q) = -sum p_i log q_i` with `q = softmax(z / T)`.
pub fn cross_entropy_with_logits(p: &[f64], z: &[f64], temperature: f64) -> f64 {
    let lq = log_scaled_softmax(z, temperature);
    p.iter().zip(&lq).map(|(pi, l)| -pi * l).sum()
}

/// Runs the current (old) detector at every annotated ground-truth box and
/// stores the tempered distribution over registered classes, with or
/// without the background row.
pub fn precompute_distill_targets(
    old: &DetectorState,
    scenes: &[ExposedScene],
    temperature: f64,
    include_background: bool,
) -> DistillTargetStore {
    let mut store = DistillTargetStore {
        temperature,
        old_classes: old.registered().collect(),
        include_background,
        entries: BTreeMap::new(),
    };
    let rows = store.rows();
    for ex in scenes {
        for (idx, inst) in ex.visible_instances() {
            let out = old.forward_region(&ex.scene, &inst.bbox);
            let p = scaled_softmax(&out.logits[rows.clone()], temperature);
            store.entries.insert((ex.scene.scene_id, idx), p);
        }
    }
    store
}

/// Mean of `-log softmax(z)[label]` over the regions.
pub fn classification_loss(outputs: &[&RegionOutput], labels: &[usize]) -> f64 {
    if outputs.is_empty() {
        return 0.0;
    }
    let sum: f64 = outputs
        .iter()
        .zip(labels)
        .map(|(o, &l)| -log_scaled_softmax(&o.logits, 1.0)[l])
        .sum();
    sum / outputs.len() as f64
}

/// Mean over positive regions of the cross-entropy between the stored old
/// distribution of the matched instance and the current tempered
/// distribution restricted to the same rows.
pub fn distillation_loss(
    outputs: &[(&RegionOutput, u64, usize)],
    store: &DistillTargetStore,
) -> Result<f64> {
    if outputs.is_empty() {
        return Ok(0.0);
    }
    let rows = store.rows();
    let mut sum = 0.0;
    for (o, scene_id, inst) in outputs {
        let p = store.get(*scene_id, *inst)?;
        sum += cross_entropy_with_logits(p, &o.logits[rows.clone()], store.temperature);
    }
    Ok(sum / outputs.len() as f64)
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Standard delta encoding of `gt` relative to `proposal`: center offsets
/// normalized by proposal size and log size ratios.
pub fn box_targets(proposal: &BoundingBox, gt: &BoundingBox) -> [f64; 4] {
    let (px, py) = proposal.center();
    let (gx, gy) = gt.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    [
        (gx - px) / pw,
        (gy - py) / ph,
        (gt.width() / pw).ln(),
        (gt.height() / ph).ln(),
    ]
}

const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Inverse of [`box_targets`].
pub fn apply_deltas(proposal: &BoundingBox, d: &[f64; 4]) -> BoundingBox {
    let (px, py) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let cx = px + d[0] * pw;
    let cy = py + d[1] * ph;
    let w = pw * d[2].min(MAX_LOG_SCALE).exp();
    let h = ph * d[3].min(MAX_LOG_SCALE).exp();
    BoundingBox {
        x_min: cx - 0.5 * w,
        y_min: cy - 0.5 * h,
        x_max: cx + 0.5 * w,
        y_max: cy + 0.5 * h,
    }
}

/// Mean over positives of the summed smooth-L1 residuals.
pub fn localization_loss(outputs: &[&RegionOutput], targets: &[[f64; 4]]) -> f64 {
    if outputs.is_empty() {
        return 0.0;
    }
    let sum: f64 = outputs
        .iter()
        .zip(targets)
        .map(|(o, t)| (0..4).map(|k| smooth_l1(o.box_deltas[k] - t[k])).sum::<f64>())
        .sum();
    sum / outputs.len() as f64
}

fn bce_with_logit(s: f64, positive: bool) -> f64 {
    let y = if positive { 1.0 } else { 0.0 };
    s.max(0.0) - y * s + (-s.abs()).exp().ln_1p()
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy of the objectness logit.
pub fn objectness_loss(outputs: &[&RegionOutput], labels: &[bool]) -> f64 {
    if outputs.is_empty() {
        return 0.0;
    }
    let sum: f64 = outputs
        .iter()
        .zip(labels)
        .map(|(o, &y)| bce_with_logit(o.objectness, y))
        .sum();
    sum / outputs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub rpn: f64,
    pub loc: f64,
    pub cls: f64,
    /// Absent when no distillation store is in play.
    pub kd: Option<f64>,
}

impl LossComponents {
    pub fn is_finite(&self) -> bool {
        self.rpn.is_finite()
            && self.loc.is_finite()
            && self.cls.is_finite()
            && self.kd.is_none_or(f64::is_finite)
    }
}

/// `rpn_weight * rpn + loc_weight * loc + cls + T^2 * kd`.
pub fn total_loss(c: &LossComponents, cfg: &LossConfig) -> f64 {
    let t2 = cfg.temperature * cfg.temperature;
    cfg.rpn_weight * c.rpn + cfg.loc_weight * c.loc + c.cls + c.kd.map_or(0.0, |kd| t2 * kd)
}

/// Supervision attached to one proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSample {
    pub proposal: usize,
    /// Classifier row of the label.
    pub cls_row: Option<usize>,
    pub objectness: Option<bool>,
    pub loc_target: Option<[f64; 4]>,
    /// `(scene_id, instance)` whose stored distribution this region inherits.
    pub distill_key: Option<(u64, usize)>,
}

/// All sampled regions of one scene.
#[derive(Debug, Clone)]
pub struct SceneSamples<'a> {
    pub scene: &'a Scene,
    pub regions: Vec<RegionSample>,
}

/// Labels one scene's proposals against its annotated instances: positives
/// above `alpha`, background below `background_iou` (subsampled to at most
/// `background_per_positive` per positive), everything else ignored.
pub fn sample_regions<'a, R: Rng>(
    exposed: &'a ExposedScene,
    cfg: &LossConfig,
    with_distillation: bool,
    rng: &mut R,
) -> SceneSamples<'a> {
    let scene = &exposed.scene;
    let mut positives = Vec::new();
    let mut background = Vec::new();
    for (pi, p) in scene.proposals.iter().enumerate() {
        match exposed.visible_match(&p.bbox) {
            (Some(g), v) if v > cfg.alpha => {
                let gt: &Instance = &scene.instances[g];
                positives.push(RegionSample {
                    proposal: pi,
                    cls_row: Some(class_row(gt.class)),
                    objectness: Some(true),
                    loc_target: Some(box_targets(&p.bbox, &gt.bbox)),
                    distill_key: with_distillation.then_some((scene.scene_id, g)),
                });
            }
            (_, v) if v < cfg.background_iou => background.push(pi),
            _ => {}
        }
    }
    background.shuffle(rng);
    background.truncate(cfg.background_per_positive * positives.len());
    background.sort_unstable();
    let mut regions = positives;
    regions.extend(background.into_iter().map(|pi| RegionSample {
        proposal: pi,
        cls_row: Some(BACKGROUND_ROW),
        objectness: Some(false),
        loc_target: None,
        distill_key: None,
    }));
    SceneSamples { scene, regions }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub components: LossComponents,
    pub total: f64,
    pub positives: usize,
    pub regions: usize,
}

/// Loss over a batch of sampled scenes and, when `grad_mask` is given, the
/// gradient of the total with respect to every parameter in the mask.
/// Each term is a mean over the regions it applies to across the batch.
pub fn batch_objective(
    state: &DetectorState,
    batch: &[SceneSamples<'_>],
    store: Option<&DistillTargetStore>,
    cfg: &LossConfig,
    grad_mask: Option<GroupMask>,
) -> Result<(BatchLoss, Option<DetectorState>)> {
    let n_cls = count(batch, |r| r.cls_row.is_some());
    let n_obj = count(batch, |r| r.objectness.is_some());
    let n_loc = count(batch, |r| r.loc_target.is_some());
    let n_kd = if store.is_some() {
        count(batch, |r| r.distill_key.is_some())
    } else {
        0
    };
    let t = cfg.temperature;
    let mut comp = LossComponents {
        kd: store.map(|_| 0.0),
        ..LossComponents::default()
    };
    let mut grads = grad_mask.map(|_| state.zeros_like());
    let num_logits = state.classifier.out;

    for s in batch {
        for r in &s.regions {
            let bbox = s.scene.proposals[r.proposal].bbox;
            let cache = state.forward_cached(s.scene, &bbox);
            let out = &cache.output;
            let mut up = RegionUpstream::zeros(num_logits);

            if let Some(row) = r.cls_row {
                let lp = log_scaled_softmax(&out.logits, 1.0);
                comp.cls += -lp[row] / n_cls as f64;
                for (k, g) in up.logits.iter_mut().enumerate() {
                    let y = if k == row { 1.0 } else { 0.0 };
                    *g += (lp[k].exp() - y) / n_cls as f64;
                }
            }
            if let Some(y) = r.objectness {
                comp.rpn += bce_with_logit(out.objectness, y) / n_obj as f64;
                let yv = if y { 1.0 } else { 0.0 };
                up.objectness += cfg.rpn_weight * (sigmoid(out.objectness) - yv) / n_obj as f64;
            }
            if let Some(tg) = r.loc_target {
                for k in 0..4 {
                    let diff = out.box_deltas[k] - tg[k];
                    comp.loc += smooth_l1(diff) / n_loc as f64;
                    up.box_deltas[k] += cfg.loc_weight * smooth_l1_grad(diff) / n_loc as f64;
                }
            }
            if let (Some(store), Some((sid, inst))) = (store, r.distill_key) {
                let p = store.get(sid, inst)?;
                let rows = store.rows();
                let block = &out.logits[rows.clone()];
                let lq = log_scaled_softmax(block, t);
                let ce: f64 = p.iter().zip(&lq).map(|(pi, l)| -pi * l).sum();
                if let Some(kd) = comp.kd.as_mut() {
                    *kd += ce / n_kd as f64;
                }
                // d(T^2 * CE)/dz = T (q - p)
                for (j, row) in rows.enumerate() {
                    up.logits[row] += t * (lq[j].exp() - p[j]) / n_kd as f64;
                }
            }
            if let (Some(g), Some(mask)) = (grads.as_mut(), grad_mask) {
                state.accumulate_backward(&cache, &up, mask, g);
            }
        }
    }
    let total = total_loss(&comp, cfg);
    Ok((
        BatchLoss {
            components: comp,
            total,
            positives: n_loc,
            regions: n_cls.max(n_obj),
        },
        grads,
    ))
}

fn count(batch: &[SceneSamples<'_>], f: impl Fn(&RegionSample) -> bool) -> usize {
    batch.iter().flat_map(|s| &s.regions).filter(|r| f(r)).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;
    use crate::model::{Extent, Instance};
    use crate::rng::substream;
    use proptest::prelude::{prop, prop_assert, proptest};
    use rand_distr::StandardNormal;

    fn out(logits: Vec<f64>) -> RegionOutput {
        RegionOutput {
            logits,
            objectness: 0.0,
            box_deltas: [0.0; 4],
            obj_feature: vec![],
        }
    }

    #[test]
    fn softmax_examples() {
        for c in [-3.0, 0.0, 250.0] {
            for t in [1.0, 20.0] {
                let p = scaled_softmax(&[c, c, c], t);
                assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
            }
        }
        let t = 20.0;
        let p = scaled_softmax(&[t * 2f64.ln(), 0.0], t);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12 && (p[1] - 1.0 / 3.0).abs() < 1e-12);
        let p = scaled_softmax(&[1000.0, 0.0], 1.0);
        assert_eq!(p[0], 1.0);
        assert!(p[1] >= 0.0 && p[1] < 1e-300);
    }

    fn scene_with(ious: &[f64]) -> Scene {
        let gt = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let inst = Instance {
            bbox: gt,
            class: ClassId(0),
            latent_feature: vec![1.0],
        };
        let proposals = ious
            .iter()
            .map(|&v| Proposal {
                bbox: gt,
                matched_gt: (v > 0.0).then_some(0),
                max_iou: v,
            })
            .collect();
        Scene {
            scene_id: 0,
            extent: Extent {
                width: 20.0,
                height: 20.0,
            },
            instances: vec![inst],
            proposals,
        }
    }

    #[test]
    fn positive_selection_is_strict() {
        let s = scene_with(&[0.72, 0.7, 0.69, 0.9]);
        let sel: Vec<f64> = select_positive_regions(&s, 0.7).iter().map(|(p, _)| p.max_iou).collect();
        assert_eq!(sel, vec![0.72, 0.9]);
        assert!(select_positive_regions(&scene_with(&[0.1, 0.29, 0.0]), 0.7).is_empty());
    }

    #[test]
    fn classification_examples() {
        let big = out(vec![0.0, 800.0, 0.0]);
        assert!(classification_loss(&[&big], &[1]) < 1e-300);
        let uniform = out(vec![0.3; 5]);
        assert!((classification_loss(&[&uniform], &[2]) - 5f64.ln()).abs() < 1e-12);

        let mut rng = substream(4, "cls");
        let outs: Vec<RegionOutput> = (0..4)
            .map(|_| out((0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()))
            .collect();
        let labels = [0, 2, 1, 2];
        let refs: Vec<&RegionOutput> = outs.iter().collect();
        let manual: f64 = outs
            .iter()
            .zip(labels)
            .map(|(o, l)| {
                let z: f64 = o.logits.iter().map(|v| v.exp()).sum();
                -(o.logits[l].exp() / z).ln()
            })
            .sum::<f64>()
            / 4.0;
        assert!((classification_loss(&refs, &labels) - manual).abs() < 1e-12);
    }

    fn store_of(p: Vec<f64>, include_background: bool) -> DistillTargetStore {
        let n_old = if include_background { p.len() - 1 } else { p.len() };
        DistillTargetStore {
            temperature: 1.0,
            old_classes: (0..n_old).map(ClassId).collect(),
            include_background,
            entries: [((0, 0), p)].into_iter().collect(),
        }
    }

    #[test]
    fn distillation_hand_case() {
        // current distribution [0.4, 0.4, 0.2] at T = 1
        let store = store_of(vec![0.5, 0.3, 0.2], true);
        let o = out(vec![0.4f64.ln(), 0.4f64.ln(), 0.2f64.ln()]);
        let l = distillation_loss(&[(&o, 0, 0)], &store).unwrap();
        let expected = -(0.5 * 0.4f64.ln() + 0.3 * 0.4f64.ln() + 0.2 * 0.2f64.ln());
        assert!((l - expected).abs() < 1e-12);
    }

    #[test]
    fn distillation_ignores_novel_logits() {
        let store = store_of(vec![0.5, 0.3, 0.2], true);
        let a = out(vec![0.1, 0.2, 0.3]);
        let b = out(vec![0.1, 0.2, 0.3, 9.0, -4.0]);
        let la = distillation_loss(&[(&a, 0, 0)], &store).unwrap();
        let lb = distillation_loss(&[(&b, 0, 0)], &store).unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn distillation_without_background_uses_class_rows() {
        let store = store_of(vec![0.7, 0.3], false);
        assert_eq!(store.rows(), 1..3);
        let o = out(vec![50.0, 0.7f64.ln(), 0.3f64.ln()]);
        let l = distillation_loss(&[(&o, 0, 0)], &store).unwrap();
        assert!((l - entropy(&[0.7, 0.3])).abs() < 1e-12);
    }

    #[test]
    fn missing_target_is_error() {
        let store = store_of(vec![0.5, 0.5], true);
        let o = out(vec![0.0, 0.0]);
        assert!(matches!(
            distillation_loss(&[(&o, 3, 1)], &store),
            Err(Error::MissingDistillTarget { scene_id: 3, instance: 1 })
        ));
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
    }

    #[test]
    fn exact_proposal_has_zero_targets() {
        let b = BoundingBox::new(3.0, 4.0, 13.0, 10.0).unwrap();
        assert_eq!(box_targets(&b, &b), [0.0; 4]);
        let o = out(vec![0.0]);
        assert_eq!(localization_loss(&[&o], &[box_targets(&b, &b)]), 0.0);
        assert_eq!(localization_loss(&[], &[]), 0.0);
        let g = BoundingBox::new(4.0, 3.0, 16.0, 12.0).unwrap();
        let back = apply_deltas(&b, &box_targets(&b, &g));
        for (x, y) in back.as_array().iter().zip(g.as_array()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn objectness_values() {
        let mut o = out(vec![0.0]);
        assert!((objectness_loss(&[&o], &[true]) - 2f64.ln()).abs() < 1e-15);
        o.objectness = 40.0;
        assert!(objectness_loss(&[&o], &[true]) < 1e-15);
        assert!((objectness_loss(&[&o], &[false]) - 40.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let cfg = LossConfig::default();
        let c = LossComponents {
            rpn: 0.0,
            loc: 0.0,
            cls: 0.0,
            kd: Some(0.01),
        };
        assert!((total_loss(&c, &cfg) - 4.0).abs() < 1e-12);
        let one = LossConfig {
            temperature: 1.0,
            ..cfg
        };
        let c = LossComponents {
            rpn: 0.1,
            loc: 0.2,
            cls: 0.3,
            kd: Some(0.4),
        };
        assert!((total_loss(&c, &one) - 1.0).abs() < 1e-12);
        let no_kd = LossComponents { kd: None, ..c };
        assert!((total_loss(&no_kd, &cfg) - 0.6).abs() < 1e-12);
    }

    fn kd_store_fixture(n_old: usize, seed: u64) -> (DistillTargetStore, Vec<f64>) {
        let mut rng = substream(seed, "kd");
        let raw: Vec<f64> = (0..=n_old).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let mut store = store_of(p.clone(), true);
        store.temperature = 20.0;
        (store, p)
    }

    proptest! {
        #[test]
        fn kd_shift_invariant(z in prop::collection::vec(-5.0..5.0f64, 4), c in -50.0..50.0f64) {
            let (store, _) = kd_store_fixture(3, 1);
            let a = out(z.clone());
            let b = out(z.iter().map(|v| v + c).collect());
            let la = distillation_loss(&[(&a, 0, 0)], &store).unwrap();
            let lb = distillation_loss(&[(&b, 0, 0)], &store).unwrap();
            prop_assert!((la - lb).abs() < 1e-9);
        }

        #[test]
        fn kd_minimized_at_stored_distribution(delta in prop::collection::vec(-2.0..2.0f64, 4), seed in 0u64..50) {
            let (store, p) = kd_store_fixture(3, seed);
            let t = store.temperature;
            let at_min: Vec<f64> = p.iter().map(|v| t * v.ln()).collect();
            let l_min = distillation_loss(&[(&out(at_min.clone()), 0, 0)], &store).unwrap();
            prop_assert!((l_min - entropy(&p)).abs() < 1e-12);
            let moved: Vec<f64> = at_min.iter().zip(&delta).map(|(a, d)| a + d).collect();
            let l = distillation_loss(&[(&out(moved), 0, 0)], &store).unwrap();
            prop_assert!(l >= l_min - 1e-12);
        }
    }

    /// Scene with two instances and proposals at assorted IoUs.
    pub(crate) fn fd_scene() -> Scene {
        let mut rng = substream(9, "fd");
        let mk = |x: f64, y: f64, c: usize, rng: &mut rand_chacha::ChaCha8Rng| Instance {
            bbox: BoundingBox::new(x, y, x + 12.0, y + 10.0).unwrap(),
            class: ClassId(c),
            latent_feature: (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let instances = vec![mk(5.0, 5.0, 0, &mut rng), mk(30.0, 8.0, 1, &mut rng)];
        let boxes = [
            [5.0, 5.0, 17.0, 15.0],
            [5.5, 5.2, 17.5, 15.2],
            [6.0, 6.0, 17.0, 15.0],
            [30.5, 8.0, 42.5, 18.0],
            [31.0, 8.5, 43.0, 18.5],
            [36.0, 9.0, 48.0, 19.0],
            [60.0, 40.0, 70.0, 50.0],
            [14.0, 12.0, 26.0, 22.0],
            [50.0, 5.0, 60.0, 15.0],
        ];
        let proposals = boxes
            .iter()
            .map(|b| Proposal::matched_against(BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap(), &instances))
            .collect();
        Scene {
            scene_id: 42,
            extent: Extent {
                width: 80.0,
                height: 60.0,
            },
            instances,
            proposals,
        }
    }

    #[test]
    fn batch_terms_match_standalone_losses() {
        let scene = fd_scene();
        let exposed = ExposedScene::new(scene.clone(), [ClassId(0), ClassId(1)].into_iter().collect());
        let cfg = DetectorConfig { d_feat: 6, hidden: 7, d_obj: 5, agnostic_gain: 1.5 };
        let mut state = DetectorState::new(5, &cfg, 2, 3).unwrap();
        let lc = LossConfig::default();
        let store = precompute_distill_targets(&state, std::slice::from_ref(&exposed), lc.temperature, true);
        state.register_classes(&[ClassId(2)], &mut substream(1, "h")).unwrap();
        let samples = sample_regions(&exposed, &lc, true, &mut substream(2, "s"));
        let (loss, _) = batch_objective(&state, std::slice::from_ref(&samples), Some(&store), &lc, None).unwrap();

        let outs: Vec<RegionOutput> = samples
            .regions
            .iter()
            .map(|r| state.forward_region(&scene, &scene.proposals[r.proposal].bbox))
            .collect();
        let cls_idx: Vec<usize> = (0..outs.len()).filter(|&i| samples.regions[i].cls_row.is_some()).collect();
        let cls = classification_loss(
            &cls_idx.iter().map(|&i| &outs[i]).collect::<Vec<_>>(),
            &cls_idx.iter().map(|&i| samples.regions[i].cls_row.unwrap()).collect::<Vec<_>>(),
        );
        let pos: Vec<usize> = (0..outs.len()).filter(|&i| samples.regions[i].loc_target.is_some()).collect();
        let loc = localization_loss(
            &pos.iter().map(|&i| &outs[i]).collect::<Vec<_>>(),
            &pos.iter().map(|&i| samples.regions[i].loc_target.unwrap()).collect::<Vec<_>>(),
        );
        let kd_in: Vec<(&RegionOutput, u64, usize)> = pos
            .iter()
            .map(|&i| {
                let (sid, g) = samples.regions[i].distill_key.unwrap();
                (&outs[i], sid, g)
            })
            .collect();
        let kd = distillation_loss(&kd_in, &store).unwrap();
        assert!(loss.positives > 0);
        assert!((loss.components.cls - cls).abs() < 1e-12);
        assert!((loss.components.loc - loc).abs() < 1e-12);
        assert!((loss.components.kd.unwrap() - kd).abs() < 1e-12);
    }

    #[test]
    fn background_sampling_ratio() {
        let scene = fd_scene();
        let exposed = ExposedScene::new(scene, [ClassId(0)].into_iter().collect());
        let lc = LossConfig {
            background_per_positive: 1,
            ..LossConfig::default()
        };
        let s = sample_regions(&exposed, &lc, false, &mut substream(0, "s"));
        let pos = s.regions.iter().filter(|r| r.objectness == Some(true)).count();
        let neg = s.regions.iter().filter(|r| r.objectness == Some(false)).count();
        assert!(pos >= 1);
        assert!(neg <= pos);
        // the unannotated class-1 object only ever shows up as background
        assert!(s.regions.iter().all(|r| r.cls_row != Some(2)));
        assert!(s.regions.iter().all(|r| r.distill_key.is_none()));
    }

    #[test]
    fn finite_difference_on_small_net() {
        use crate::detector::ParamGroup;
        use crate::gradcheck::{check_coordinates, group_coordinates};
        use rand::seq::IndexedRandom;

        let scene = fd_scene();
        let exposed = ExposedScene::new(scene, [ClassId(0), ClassId(1)].into_iter().collect());
        let cfg = DetectorConfig { d_feat: 6, hidden: 7, d_obj: 5, agnostic_gain: 1.5 };
        let mut state = DetectorState::new(5, &cfg, 2, 3).unwrap();
        let lc = LossConfig::default();
        let store = precompute_distill_targets(&state, std::slice::from_ref(&exposed), lc.temperature, true);
        state.register_classes(&[ClassId(2)], &mut substream(1, "h")).unwrap();
        // move away from the distillation minimum so its gradient is non-trivial
        for w in state.cse_out.weight.iter_mut() {
            *w *= 1.3;
        }
        let batch = [sample_regions(&exposed, &lc, true, &mut substream(2, "s"))];
        let mut rng = substream(5, "coords");
        for group in [ParamGroup::Agnostic, ParamGroup::Cse, ParamGroup::Heads] {
            let all = group_coordinates(&state, group);
            let picked: Vec<_> = all.choose_multiple(&mut rng, 20).copied().collect();
            let checks = check_coordinates(&state, &batch, Some(&store), &lc, &picked, 1e-5).unwrap();
            for c in checks {
                assert!(
                    c.relative_error(1e-6) < 1e-4,
                    "{:?}[{}] analytic {} numeric {}",
                    c.tensor, c.index, c.analytic, c.numeric
                );
            }
        }
    }
}
