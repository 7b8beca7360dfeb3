//! Toy two-part detector: a frozen class-agnostic extractor followed by a
//! trainable class-sensitive extractor (CSE) and the prediction heads.
//!
//! ```text
//! region feature x  (IoU-weighted pooling of instance latents)
//!   -> agnostic: tanh(A x + a)               d_world -> d_feat
//!   -> CSE:      tanh(W2 tanh(W1 . + b1) + b2) d_feat -> hidden -> d_obj
//!   -> heads:    objectness (1), classifier (classes + 1), box deltas (4)
//! ```
//!
//! Classifier row 0 is background; class `c` occupies row `c + 1`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{iou, BoundingBox, ClassId, Scene};
use crate::nn::{tanh_in_place, Linear};
use crate::rng::{stream, substream};

pub const BACKGROUND_ROW: usize = 0;
pub const NEW_ROW_STD: f64 = 0.01;

pub fn class_row(class: ClassId) -> usize {
    class.index() + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub d_feat: usize,
    pub hidden: usize,
    pub d_obj: usize,
    /// Weight scale of the fixed random projection, relative to
    /// `1/sqrt(d_world)`.
    pub agnostic_gain: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            d_feat: 32,
            hidden: 64,
            d_obj: 32,
            agnostic_gain: 1.5,
        }
    }
}

/// Parameter partition. Every tensor belongs to exactly one group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Class-agnostic extractor; frozen unless the whole detector is adapted.
    Agnostic,
    /// Class-sensitive extractor including the objectness head.
    Cse,
    /// Classifier and box-regression heads.
    Heads,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransferStrategy {
    /// Only the last layer (classifier and box regression) adapts.
    FixAll,
    /// Everything adapts, including the class-agnostic extractor.
    FitAll,
    /// The class-sensitive extractor and all heads adapt.
    FitCse,
}

impl TransferStrategy {
    pub fn trains(self, group: ParamGroup) -> bool {
        match (self, group) {
            (TransferStrategy::FitAll, _) => true,
            (TransferStrategy::FitCse, g) => g != ParamGroup::Agnostic,
            (TransferStrategy::FixAll, g) => g == ParamGroup::Heads,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TransferStrategy::FixAll => "FIX_ALL",
            TransferStrategy::FitAll => "FIT_ALL",
            TransferStrategy::FitCse => "FIT_CSE",
        }
    }
}

/// Which groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupMask {
    pub agnostic: bool,
    pub cse: bool,
    pub heads: bool,
}

impl GroupMask {
    pub const ALL: GroupMask = GroupMask {
        agnostic: true,
        cse: true,
        heads: true,
    };

    /// Pre-training leaves the agnostic projection fixed.
    pub const PRETRAIN: GroupMask = GroupMask {
        agnostic: false,
        cse: true,
        heads: true,
    };

    pub fn allows(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Agnostic => self.agnostic,
            ParamGroup::Cse => self.cse,
            ParamGroup::Heads => self.heads,
        }
    }
}

impl From<TransferStrategy> for GroupMask {
    fn from(s: TransferStrategy) -> Self {
        GroupMask {
            agnostic: s.trains(ParamGroup::Agnostic),
            cse: s.trains(ParamGroup::Cse),
            heads: s.trains(ParamGroup::Heads),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_world: usize,
    pub d_feat: usize,
    pub hidden: usize,
    pub d_obj: usize,
}

/// Detector parameters. The same shape doubles as a gradient or momentum
/// buffer via [`DetectorState::zeros_like`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorState {
    pub dims: Dims,
    pub agnostic: Linear,
    pub cse_hidden: Linear,
    pub cse_out: Linear,
    pub objectness: Linear,
    pub classifier: Linear,
    pub boxreg: Linear,
}

/// Identifies one tensor inside a [`DetectorState`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tensor {
    Agnostic,
    CseHidden,
    CseOut,
    Objectness,
    Classifier,
    BoxReg,
}

impl Tensor {
    /// Fixed serialization and iteration order.
    pub const ALL: [Tensor; 6] = [
        Tensor::Agnostic,
        Tensor::CseHidden,
        Tensor::CseOut,
        Tensor::Objectness,
        Tensor::Classifier,
        Tensor::BoxReg,
    ];

    pub fn group(self) -> ParamGroup {
        match self {
            Tensor::Agnostic => ParamGroup::Agnostic,
            Tensor::CseHidden | Tensor::CseOut | Tensor::Objectness => ParamGroup::Cse,
            Tensor::Classifier | Tensor::BoxReg => ParamGroup::Heads,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionOutput {
    /// Background first, then one logit per registered class.
    pub logits: Vec<f64>,
    pub objectness: f64,
    pub box_deltas: [f64; 4],
    pub obj_feature: Vec<f64>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Vec<f64>,
    pub agnostic: Vec<f64>,
    pub hidden: Vec<f64>,
    pub output: RegionOutput,
}

/// Loss gradients with respect to one region's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionUpstream {
    pub logits: Vec<f64>,
    pub objectness: f64,
    pub box_deltas: [f64; 4],
}

impl RegionUpstream {
    pub fn zeros(num_logits: usize) -> Self {
        RegionUpstream {
            logits: vec![0.0; num_logits],
            objectness: 0.0,
            box_deltas: [0.0; 4],
        }
    }
}

impl DetectorState {
    /// Fresh detector with `num_classes` registered classes. All weights are
    /// drawn from the `init` substream of `seed`.
    pub fn new(d_world: usize, cfg: &DetectorConfig, num_classes: usize, seed: u64) -> Result<Self> {
        if d_world == 0 || cfg.d_feat == 0 || cfg.hidden == 0 || cfg.d_obj == 0 {
            return Err(Error::Config("detector dimensions must be positive".into()));
        }
        let mut rng = substream(seed, stream::INIT);
        let sd = |n: usize| 1.0 / (n as f64).sqrt();
        let mut agnostic = Linear::gaussian(d_world, cfg.d_feat, cfg.agnostic_gain * sd(d_world), &mut rng);
        for b in &mut agnostic.bias {
            *b = 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        Ok(DetectorState {
            dims: Dims {
                d_world,
                d_feat: cfg.d_feat,
                hidden: cfg.hidden,
                d_obj: cfg.d_obj,
            },
            agnostic,
            cse_hidden: Linear::gaussian(cfg.d_feat, cfg.hidden, sd(cfg.d_feat), &mut rng),
            cse_out: Linear::gaussian(cfg.hidden, cfg.d_obj, sd(cfg.hidden), &mut rng),
            objectness: Linear::gaussian(cfg.d_obj, 1, NEW_ROW_STD, &mut rng),
            classifier: Linear::gaussian(cfg.d_obj, num_classes + 1, NEW_ROW_STD, &mut rng),
            boxreg: Linear::gaussian(cfg.d_obj, 4, NEW_ROW_STD, &mut rng),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out - 1
    }

    pub fn registered(&self) -> impl Iterator<Item = ClassId> {
        (0..self.num_classes()).map(ClassId)
    }

    pub fn zeros_like(&self) -> Self {
        DetectorState {
            dims: self.dims,
            agnostic: self.agnostic.zeros_like(),
            cse_hidden: self.cse_hidden.zeros_like(),
            cse_out: self.cse_out.zeros_like(),
            objectness: self.objectness.zeros_like(),
            classifier: self.classifier.zeros_like(),
            boxreg: self.boxreg.zeros_like(),
        }
    }

    pub fn tensor(&self, t: Tensor) -> &Linear {
        match t {
            Tensor::Agnostic => &self.agnostic,
            Tensor::CseHidden => &self.cse_hidden,
            Tensor::CseOut => &self.cse_out,
            Tensor::Objectness => &self.objectness,
            Tensor::Classifier => &self.classifier,
            Tensor::BoxReg => &self.boxreg,
        }
    }

    pub fn tensor_mut(&mut self, t: Tensor) -> &mut Linear {
        match t {
            Tensor::Agnostic => &mut self.agnostic,
            Tensor::CseHidden => &mut self.cse_hidden,
            Tensor::CseOut => &mut self.cse_out,
            Tensor::Objectness => &mut self.objectness,
            Tensor::Classifier => &mut self.classifier,
            Tensor::BoxReg => &mut self.boxreg,
        }
    }

    /// Values of every tensor in `group`, weights then biases, in the
    /// fixed tensor order.
    pub fn group_values(&self, group: ParamGroup) -> Vec<f64> {
        Tensor::ALL
            .iter()
            .filter(|t| t.group() == group)
            .flat_map(|&t| {
                let l = self.tensor(t);
                l.weight.iter().chain(&l.bias).copied()
            })
            .collect()
    }

    /// Sets all entries of groups outside `mask` to zero.
    pub fn mask_groups(&mut self, mask: GroupMask) {
        for t in Tensor::ALL {
            if !mask.allows(t.group()) {
                let l = self.tensor_mut(t);
                l.weight.iter_mut().for_each(|v| *v = 0.0);
                l.bias.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Appends one classifier row per new class. Existing rows, including
    /// background, are untouched. Classes must be the next unregistered
    /// indices, in order.
    pub fn register_classes<R: Rng>(&mut self, new_classes: &[ClassId], rng: &mut R) -> Result<()> {
        let mut expected = self.num_classes();
        for &c in new_classes {
            if c.index() < expected {
                return Err(Error::DuplicateClass(c));
            }
            if c.index() != expected {
                return Err(Error::NonContiguousClass {
                    got: c,
                    expected: ClassId(expected),
                });
            }
            expected += 1;
        }
        self.classifier.append_rows(new_classes.len(), NEW_ROW_STD, rng);
        Ok(())
    }

    pub fn forward_region(&self, scene: &Scene, bbox: &BoundingBox) -> RegionOutput {
        self.forward_cached(scene, bbox).output
    }

    pub fn forward_cached(&self, scene: &Scene, bbox: &BoundingBox) -> ForwardCache {
        let input = region_feature(scene, bbox, self.dims.d_world);
        self.forward_feature(input)
    }

    pub fn forward_feature(&self, input: Vec<f64>) -> ForwardCache {
        let mut agnostic = self.agnostic.forward(&input);
        tanh_in_place(&mut agnostic);
        let mut hidden = self.cse_hidden.forward(&agnostic);
        tanh_in_place(&mut hidden);
        let mut obj = self.cse_out.forward(&hidden);
        tanh_in_place(&mut obj);
        let logits = self.classifier.forward(&obj);
        let objectness = self.objectness.forward(&obj)[0];
        let d = self.boxreg.forward(&obj);
        ForwardCache {
            input,
            agnostic,
            hidden,
            output: RegionOutput {
                logits,
                objectness,
                box_deltas: [d[0], d[1], d[2], d[3]],
                obj_feature: obj,
            },
        }
    }

    /// Accumulates parameter gradients for one region into `grads`. Groups
    /// outside `mask` receive nothing.
    pub fn accumulate_backward(
        &self,
        cache: &ForwardCache,
        upstream: &RegionUpstream,
        mask: GroupMask,
        grads: &mut DetectorState,
    ) {
        let obj = &cache.output.obj_feature;
        if mask.heads {
            self.classifier.accumulate_grad(&mut grads.classifier, obj, &upstream.logits);
            self.boxreg.accumulate_grad(&mut grads.boxreg, obj, &upstream.box_deltas);
        }
        if !(mask.cse || mask.agnostic) {
            return;
        }
        let mut d_obj = vec![0.0; self.dims.d_obj];
        self.classifier.backprop_input(&upstream.logits, &mut d_obj);
        self.boxreg.backprop_input(&upstream.box_deltas, &mut d_obj);
        self.objectness.backprop_input(&[upstream.objectness], &mut d_obj);
        let d_obj_pre: Vec<f64> = d_obj.iter().zip(obj).map(|(g, y)| g * (1.0 - y * y)).collect();

        let mut d_hidden = vec![0.0; self.dims.hidden];
        self.cse_out.backprop_input(&d_obj_pre, &mut d_hidden);
        let d_hidden_pre: Vec<f64> = d_hidden
            .iter()
            .zip(&cache.hidden)
            .map(|(g, y)| g * (1.0 - y * y))
            .collect();
        if mask.cse {
            self.objectness
                .accumulate_grad(&mut grads.objectness, obj, &[upstream.objectness]);
            self.cse_out.accumulate_grad(&mut grads.cse_out, &cache.hidden, &d_obj_pre);
            self.cse_hidden
                .accumulate_grad(&mut grads.cse_hidden, &cache.agnostic, &d_hidden_pre);
        }
        if mask.agnostic {
            let mut d_agn = vec![0.0; self.dims.d_feat];
            self.cse_hidden.backprop_input(&d_hidden_pre, &mut d_agn);
            let d_agn_pre: Vec<f64> = d_agn
                .iter()
                .zip(&cache.agnostic)
                .map(|(g, y)| g * (1.0 - y * y))
                .collect();
            self.agnostic.accumulate_grad(&mut grads.agnostic, &cache.input, &d_agn_pre);
        }
    }

    /// Gradients of one region's outputs against `upstream`. Frozen groups
    /// come back as zeros.
    pub fn backward_region(
        &self,
        scene: &Scene,
        bbox: &BoundingBox,
        upstream: &RegionUpstream,
        mask: GroupMask,
    ) -> DetectorState {
        let cache = self.forward_cached(scene, bbox);
        let mut grads = self.zeros_like();
        self.accumulate_backward(&cache, upstream, mask, &mut grads);
        grads
    }
}

/// IoU-weighted pooling of the latent features of instances overlapping
/// `bbox`. Uncovered area pools as a zero feature: when the IoUs sum to
/// less than one, the remainder weighs a zero vector, so a box aligned with
/// a lone instance returns its latent exactly and a loosely placed box
/// returns a proportionally weaker copy.
pub fn region_feature(scene: &Scene, bbox: &BoundingBox, d_world: usize) -> Vec<f64> {
    let mut acc = vec![0.0; d_world];
    let mut total = 0.0;
    for inst in &scene.instances {
        let w = iou(bbox, &inst.bbox);
        if w > 0.0 {
            total += w;
            for (a, f) in acc.iter_mut().zip(&inst.latent_feature) {
                *a += w * f;
            }
        }
    }
    let denom = total.max(1.0);
    acc.iter_mut().for_each(|a| *a /= denom);
    acc
}
