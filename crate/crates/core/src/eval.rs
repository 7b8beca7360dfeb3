//! Inference with per-class NMS, and AP/AR over IoU thresholds 0.5:0.95.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::detector::{class_row, DetectorState};
use crate::losses::{apply_deltas, scaled_softmax};
use crate::model::{harmonic_mean, iou, BoundingBox, ClassId, DatasetSplit, Scene};

pub const NMS_IOU: f64 = 0.5;
pub const MAX_DETECTIONS: usize = 100;
pub const RECALL_POINTS: usize = 101;

/// `0.50, 0.55, ..., 0.95`.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scene_id: u64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class: ClassId,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub scene_id: u64,
    pub bbox: BoundingBox,
    pub class: ClassId,
}

/// Descending score; ties keep their input order.
fn by_score_desc(a: &Detection, b: &Detection) -> Ordering {
    b.score.total_cmp(&a.score)
}

/// Greedy per-class NMS: a detection is dropped when a kept, higher-scoring
/// detection of the same class overlaps it with IoU above `threshold`.
/// Output is score-sorted.
pub fn nms(mut dets: Vec<Detection>, threshold: f64) -> Vec<Detection> {
    dets.sort_by(by_score_desc);
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        let suppressed = kept
            .iter()
            .any(|k| k.class == d.class && k.scene_id == d.scene_id && iou(&k.bbox, &d.bbox) > threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Score-sorted NMS survivors truncated to the per-scene cap.
pub fn postprocess(dets: Vec<Detection>) -> Vec<Detection> {
    let mut kept = nms(dets, NMS_IOU);
    kept.truncate(MAX_DETECTIONS);
    kept
}

/// Refines every proposal, scores it for each registered class with a
/// plain softmax, then applies per-class NMS and the top-100 cap.
pub fn infer(state: &DetectorState, scene: &Scene) -> Vec<Detection> {
    let mut dets = Vec::new();
    for prop in &scene.proposals {
        let out = state.forward_region(scene, &prop.bbox);
        let Some(bbox) = apply_deltas(&prop.bbox, &out.box_deltas).clip(scene.extent) else {
            continue;
        };
        let probs = scaled_softmax(&out.logits, 1.0);
        for class in state.registered() {
            dets.push(Detection {
                scene_id: scene.scene_id,
                bbox,
                class,
                score: probs[class_row(class)],
            });
        }
    }
    postprocess(dets)
}

/// Greedy matching in score order at one threshold: each detection takes
/// the unmatched ground truth of highest IoU, if that IoU is at least
/// `threshold`. Ties go to the lower ground-truth index. Returns the
/// matched ground-truth index per detection.
pub fn greedy_match(dets: &[&Detection], gts: &[&GroundTruth], threshold: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.scene_id != d.scene_id {
                continue;
            }
            let v = iou(&d.bbox, &gt.bbox);
            if v >= threshold && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
        }
        out.push(best.map(|b| b.0));
    }
    out
}

/// True-positive flags per threshold for one class, detections in global
/// score order, plus the class's ground-truth count. Matching never crosses
/// scenes.
pub fn class_matches(
    detections: &[Detection],
    gts: &[GroundTruth],
    class: ClassId,
    thresholds: &[f64],
) -> (Vec<Vec<bool>>, usize) {
    let mut dets: Vec<&Detection> = detections.iter().filter(|d| d.class == class).collect();
    dets.sort_by(|a, b| by_score_desc(a, b));
    let mut by_scene: BTreeMap<u64, (Vec<&GroundTruth>, Vec<usize>)> = BTreeMap::new();
    let mut n = 0;
    for g in gts.iter().filter(|g| g.class == class) {
        by_scene.entry(g.scene_id).or_default().0.push(g);
        n += 1;
    }
    for (i, d) in dets.iter().enumerate() {
        if let Some(e) = by_scene.get_mut(&d.scene_id) {
            e.1.push(i);
        }
    }
    let flags = thresholds
        .iter()
        .map(|&t| {
            let mut tp = vec![false; dets.len()];
            for (scene_gts, idx) in by_scene.values() {
                let scene_dets: Vec<&Detection> = idx.iter().map(|&i| dets[i]).collect();
                for (k, m) in greedy_match(&scene_dets, scene_gts, t).into_iter().enumerate() {
                    tp[idx[k]] = m.is_some();
                }
            }
            tp
        })
        .collect();
    (flags, n)
}

/// 101-point interpolated precision of a ranked TP/FP list.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < level - 1e-12);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

/// AP for `class`, averaged over `thresholds`, scaled to [0, 100]. `None`
/// when the class has no ground truth.
pub fn average_precision(
    detections: &[Detection],
    gts: &[GroundTruth],
    class: ClassId,
    thresholds: &[f64],
) -> Option<f64> {
    let (flags, n) = class_matches(detections, gts, class, thresholds);
    (n > 0).then(|| ap_from_flags(&flags, n))
}

/// Matched fraction of `class`'s ground truths, averaged over `thresholds`,
/// scaled to [0, 100].
pub fn average_recall(
    detections: &[Detection],
    gts: &[GroundTruth],
    class: ClassId,
    thresholds: &[f64],
) -> Option<f64> {
    let (flags, n) = class_matches(detections, gts, class, thresholds);
    (n > 0).then(|| ar_from_flags(&flags, n))
}

fn ap_from_flags(flags: &[Vec<bool>], n: usize) -> f64 {
    100.0 * flags.iter().map(|tp| interpolated_ap(tp, n)).sum::<f64>() / flags.len() as f64
}

fn ar_from_flags(flags: &[Vec<bool>], n: usize) -> f64 {
    let recall = |tp: &Vec<bool>| tp.iter().filter(|&&x| x).count() as f64 / n as f64;
    100.0 * flags.iter().map(recall).sum::<f64>() / flags.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: ClassId,
    pub num_gt: usize,
    pub ap: f64,
    pub ar: f64,
}

/// Domain metrics in [0, 100]. A domain without classes reports `None`, and
/// so do the harmonic means that depend on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub base_ap: Option<f64>,
    pub base_ar: Option<f64>,
    pub novel_ap: Option<f64>,
    pub novel_ar: Option<f64>,
    pub hm_ap: Option<f64>,
    pub hm_ar: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
}

impl EvalReport {
    pub fn from_per_class(per_class: Vec<ClassMetrics>, base: &BTreeSet<ClassId>, novel: &BTreeSet<ClassId>) -> Self {
        let mean = |set: &BTreeSet<ClassId>, f: fn(&ClassMetrics) -> f64| {
            let v: Vec<f64> = per_class.iter().filter(|m| set.contains(&m.class)).map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let base_ap = mean(base, |m| m.ap);
        let base_ar = mean(base, |m| m.ar);
        let novel_ap = mean(novel, |m| m.ap);
        let novel_ar = mean(novel, |m| m.ar);
        let hm = |a: Option<f64>, b: Option<f64>| Some(harmonic_mean(a?, b?));
        EvalReport {
            base_ap,
            base_ar,
            novel_ap,
            novel_ar,
            hm_ap: hm(base_ap, novel_ap),
            hm_ar: hm(base_ar, novel_ar),
            per_class,
        }
    }

    /// One-decimal presentation of the six headline fields.
    pub fn summary(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.1}"));
        format!(
            "base AP {} AR {} | novel AP {} AR {} | HM AP {} AR {}",
            f(self.base_ap),
            f(self.base_ar),
            f(self.novel_ap),
            f(self.novel_ar),
            f(self.hm_ap),
            f(self.hm_ar)
        )
    }
}

pub fn ground_truths(split: &DatasetSplit) -> Vec<GroundTruth> {
    split
        .scenes
        .iter()
        .flat_map(|s| {
            s.instances.iter().map(move |i| GroundTruth {
                scene_id: s.scene_id,
                bbox: i.bbox,
                class: i.class,
            })
        })
        .filter(|g| split.visible_classes.contains(&g.class))
        .collect()
}

/// Metrics from precomputed detections over the classes in `base` and
/// `novel`. Classes without ground truth are left out of the means.
pub fn evaluate_detections(
    detections: &[Detection],
    gts: &[GroundTruth],
    base: &BTreeSet<ClassId>,
    novel: &BTreeSet<ClassId>,
) -> EvalReport {
    let thresholds = iou_thresholds();
    let mut counts: BTreeMap<ClassId, usize> = BTreeMap::new();
    for g in gts {
        *counts.entry(g.class).or_default() += 1;
    }
    let per_class = base
        .union(novel)
        .filter_map(|&c| {
            let num_gt = *counts.get(&c)?;
            let (flags, n) = class_matches(detections, gts, c, &thresholds);
            Some(ClassMetrics {
                class: c,
                num_gt,
                ap: ap_from_flags(&flags, n),
                ar: ar_from_flags(&flags, n),
            })
        })
        .collect();
    EvalReport::from_per_class(per_class, base, novel)
}

/// Runs inference over `test` and scores the given base and novel classes.
pub fn evaluate(
    state: &DetectorState,
    test: &DatasetSplit,
    base: &BTreeSet<ClassId>,
    novel: &BTreeSet<ClassId>,
) -> EvalReport {
    let detections: Vec<Detection> = test.scenes.iter().flat_map(|s| infer(state, s)).collect();
    evaluate_detections(&detections, &ground_truths(test), base, novel)
}
