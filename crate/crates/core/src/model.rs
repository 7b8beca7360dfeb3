//! Shared domain types: classes, boxes, scenes, splits and task sequences.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index into the global class registry. Base classes occupy `[0, num_base)`
/// and novel classes follow in registration order.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ClassId(pub usize);

impl ClassId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Axis-aligned box in continuous scene coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if finite && self.x_min < self.x_max && self.y_min < self.y_max {
            Ok(())
        } else {
            Err(Error::InvalidBox {
                x_min: self.x_min,
                y_min: self.y_min,
                x_max: self.x_max,
                y_max: self.y_max,
            })
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    pub fn within(&self, extent: Extent) -> bool {
        self.x_min >= 0.0
            && self.y_min >= 0.0
            && self.x_max <= extent.width
            && self.y_max <= extent.height
    }

    /// Clips to the extent. Returns `None` when nothing with positive area
    /// remains.
    pub fn clip(&self, extent: Extent) -> Option<BoundingBox> {
        let b = BoundingBox {
            x_min: self.x_min.clamp(0.0, extent.width),
            y_min: self.y_min.clamp(0.0, extent.height),
            x_max: self.x_max.clamp(0.0, extent.width),
            y_max: self.y_max.clamp(0.0, extent.height),
        };
        b.validate().ok().map(|_| b)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// Intersection over union with exact rectangle arithmetic.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// `2xy / (x + y)`, defined as 0 when both inputs are 0.
pub fn harmonic_mean(x: f64, y: f64) -> f64 {
    if x + y <= 0.0 {
        0.0
    } else {
        2.0 * x * y / (x + y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class: ClassId,
    pub latent_feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub matched_gt: Option<usize>,
    pub max_iou: f64,
}

impl Proposal {
    /// Builds a proposal matched against `instances`. Equal maximal IoUs go
    /// to the lower instance index.
    pub fn matched_against(bbox: BoundingBox, instances: &[Instance]) -> Proposal {
        let (matched_gt, max_iou) = best_match(&bbox, instances.iter().map(|i| &i.bbox));
        Proposal {
            bbox,
            matched_gt,
            max_iou,
        }
    }
}

/// Index and IoU of the best-overlapping box; `None` when nothing overlaps.
pub fn best_match<'a>(
    bbox: &BoundingBox,
    candidates: impl IntoIterator<Item = &'a BoundingBox>,
) -> (Option<usize>, f64) {
    let mut best = (None, 0.0);
    for (idx, other) in candidates.into_iter().enumerate() {
        let v = iou(bbox, other);
        if v > best.1 {
            best = (Some(idx), v);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    pub extent: Extent,
    pub instances: Vec<Instance>,
    pub proposals: Vec<Proposal>,
}

impl Scene {
    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.instances.iter().map(|i| i.class).collect()
    }

    /// Checks box placement and that every proposal's match fields agree with
    /// a fresh IoU computation over all instances.
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Data(format!("scene {}: {msg}", self.scene_id)));
        for (i, inst) in self.instances.iter().enumerate() {
            inst.bbox.validate()?;
            if !inst.bbox.within(self.extent) {
                return err(format!("instance {i} lies outside the extent"));
            }
        }
        for (p, prop) in self.proposals.iter().enumerate() {
            prop.bbox.validate()?;
            if !prop.bbox.within(self.extent) {
                return err(format!("proposal {p} lies outside the extent"));
            }
            let fresh = Proposal::matched_against(prop.bbox, &self.instances);
            // Stored reals carry 9 significant digits.
            if fresh.matched_gt != prop.matched_gt || (fresh.max_iou - prop.max_iou).abs() > 1e-8 {
                return err(format!(
                    "proposal {p} match ({:?}, {}) disagrees with recomputation ({:?}, {})",
                    prop.matched_gt, prop.max_iou, fresh.matched_gt, fresh.max_iou
                ));
            }
            if prop.matched_gt.is_some() != (prop.max_iou > 0.0) {
                return err(format!("proposal {p} has inconsistent match presence"));
            }
        }
        Ok(())
    }
}

/// A set of scenes plus the classes whose annotations are exposed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub visible_classes: BTreeSet<ClassId>,
    pub scenes: Vec<Scene>,
}

impl DatasetSplit {
    pub fn exposed(&self) -> Vec<ExposedScene> {
        self.scenes
            .iter()
            .map(|s| ExposedScene::new(s.clone(), self.visible_classes.clone()))
            .collect()
    }

    /// Number of annotations exposed by this split.
    pub fn annotation_count(&self) -> usize {
        self.scenes
            .iter()
            .flat_map(|s| &s.instances)
            .filter(|i| self.visible_classes.contains(&i.class))
            .count()
    }
}

/// A scene paired with the classes whose annotations a learner may see.
/// Instances of other classes remain in the scene as unannotated objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposedScene {
    pub scene: Scene,
    pub visible: BTreeSet<ClassId>,
}

impl ExposedScene {
    pub fn new(scene: Scene, visible: BTreeSet<ClassId>) -> Self {
        ExposedScene { scene, visible }
    }

    pub fn is_visible(&self, instance: usize) -> bool {
        self.visible.contains(&self.scene.instances[instance].class)
    }

    pub fn visible_instances(&self) -> impl Iterator<Item = (usize, &Instance)> {
        self.scene
            .instances
            .iter()
            .enumerate()
            .filter(|(_, inst)| self.visible.contains(&inst.class))
    }

    /// Best match of `bbox` among annotated instances only, as
    /// `(instance index, iou)`.
    pub fn visible_match(&self, bbox: &BoundingBox) -> (Option<usize>, f64) {
        let mut best = (None, 0.0);
        for (idx, inst) in self.visible_instances() {
            let v = iou(bbox, &inst.bbox);
            if v > best.1 {
                best = (Some(idx), v);
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskMode {
    Typical,
    Continual,
}

/// Ordered incremental sessions. Each session's `visible_classes` are the
/// classes it registers; its scenes are their K-shot scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSequence {
    pub mode: TaskMode,
    pub sessions: Vec<DatasetSplit>,
}

impl TaskSequence {
    /// Arranges per-class shot splits according to `mode`.
    pub fn from_class_shots(mode: TaskMode, per_class: Vec<DatasetSplit>) -> TaskSequence {
        let sessions = match mode {
            TaskMode::Continual => per_class,
            TaskMode::Typical => {
                let mut merged = DatasetSplit {
                    visible_classes: BTreeSet::new(),
                    scenes: Vec::new(),
                };
                for split in per_class {
                    merged.visible_classes.extend(split.visible_classes);
                    merged.scenes.extend(split.scenes);
                }
                vec![merged]
            }
        };
        TaskSequence { mode, sessions }
    }

    pub fn novel_classes(&self) -> BTreeSet<ClassId> {
        self.sessions
            .iter()
            .flat_map(|s| s.visible_classes.iter().copied())
            .collect()
    }

    /// Session class sets must be pairwise disjoint and disjoint from
    /// `registered`; the mode fixes the session shape.
    pub fn validate(&self, registered: &BTreeSet<ClassId>) -> Result<()> {
        let mut seen = registered.clone();
        for (i, s) in self.sessions.iter().enumerate() {
            if s.visible_classes.is_empty() {
                return Err(Error::Data(format!("session {i} registers no classes")));
            }
            for c in &s.visible_classes {
                if !seen.insert(*c) {
                    return Err(Error::Data(format!(
                        "session {i} re-registers class {c}"
                    )));
                }
            }
        }
        match self.mode {
            TaskMode::Typical if self.sessions.len() != 1 => Err(Error::Data(
                "typical mode requires exactly one session".into(),
            )),
            TaskMode::Continual if self.sessions.iter().any(|s| s.visible_classes.len() != 1) => {
                Err(Error::Data(
                    "continual mode requires one class per session".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::new(a, b, c, d).unwrap()
    }

    /// Area count on a fine grid, independent of the rectangle formula.
    fn grid_iou(a: &BoundingBox, b: &BoundingBox, step: f64) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        let lo = a.x_min.min(b.x_min);
        let hi = a.x_max.max(b.x_max);
        let lo_y = a.y_min.min(b.y_min);
        let hi_y = a.y_max.max(b.y_max);
        let inside = |bx: &BoundingBox, x: f64, y: f64| {
            x >= bx.x_min && x < bx.x_max && y >= bx.y_min && y < bx.y_max
        };
        let mut x = lo + 0.5 * step;
        while x < hi {
            let mut y = lo_y + 0.5 * step;
            while y < hi_y {
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                if ia && ib {
                    inter += 1;
                }
                if ia || ib {
                    union += 1;
                }
                y += step;
            }
            x += step;
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        let b = bb(1.0, 2.0, 4.0, 7.5);
        assert_eq!(iou(&b, &b), 1.0);
        assert_eq!(iou(&bb(0.0, 0.0, 1.0, 1.0), &bb(5.0, 5.0, 6.0, 6.0)), 0.0);
        let a = bb(0.0, 0.0, 2.0, 2.0);
        let c = bb(1.0, 1.0, 3.0, 3.0);
        let oracle = grid_iou(&a, &c, 0.01);
        assert!((oracle - 1.0 / 7.0).abs() < 1e-6);
        assert!((iou(&a, &c) - 0.142857142857).abs() < 1e-9);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        assert_eq!(iou(&bb(0.0, 0.0, 1.0, 1.0), &bb(1.0, 0.0, 2.0, 1.0)), 0.0);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BoundingBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BoundingBox::new(0.0, 3.0, 1.0, 2.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
    }

    #[test]
    fn harmonic_mean_table_values() {
        let r1 = |v: f64| (v * 10.0).round() / 10.0;
        assert_eq!(r1(harmonic_mean(17.9, 0.7)), 1.3);
        assert_eq!(r1(harmonic_mean(32.4, 9.1)), 14.2);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
        assert_eq!(harmonic_mean(12.5, 0.0), 0.0);
        assert!((harmonic_mean(7.25, 7.25) - 7.25).abs() < 1e-12);
    }

    #[test]
    fn equal_overlap_matches_lower_index() {
        let inst = |x: f64| Instance {
            bbox: bb(x, 0.0, x + 2.0, 2.0),
            class: ClassId(0),
            latent_feature: vec![0.0],
        };
        let instances = vec![inst(0.0), inst(2.0)];
        let p = Proposal::matched_against(bb(1.0, 0.0, 3.0, 2.0), &instances);
        assert_eq!(p.matched_gt, Some(0));
        assert!((p.max_iou - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn typical_sequence_merges_sessions() {
        let split = |c: usize| DatasetSplit {
            visible_classes: [ClassId(c)].into_iter().collect(),
            scenes: vec![],
        };
        let seq = TaskSequence::from_class_shots(TaskMode::Typical, vec![split(2), split(3)]);
        assert_eq!(seq.sessions.len(), 1);
        let base: BTreeSet<_> = [ClassId(0), ClassId(1)].into_iter().collect();
        seq.validate(&base).unwrap();

        let cont = TaskSequence::from_class_shots(TaskMode::Continual, vec![split(2), split(3)]);
        assert_eq!(cont.sessions.len(), 2);
        cont.validate(&base).unwrap();

        let clash = TaskSequence::from_class_shots(TaskMode::Continual, vec![split(1)]);
        assert!(clash.validate(&base).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_box() -> impl Strategy<Value = BoundingBox> {
            (0.0..50.0f64, 0.0..50.0f64, 0.1..30.0f64, 0.1..30.0f64)
                .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h).unwrap())
        }

        proptest! {
            #[test]
            fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
                let ab = iou(&a, &b);
                prop_assert_eq!(ab, iou(&b, &a));
                prop_assert!((0.0..=1.0).contains(&ab));
                if a != b {
                    prop_assert!(ab < 1.0);
                }
            }

            #[test]
            fn harmonic_mean_below_arithmetic(x in 0.0..100.0f64, y in 0.0..100.0f64) {
                let hm = harmonic_mean(x, y);
                prop_assert!(hm <= 0.5 * (x + y) + 1e-12);
                prop_assert!(hm <= x.max(y) + 1e-12);
            }
        }
    }
}
