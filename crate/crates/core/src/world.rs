//! Reproducible synthetic detection worlds whose classes are mixtures of
//! Gaussian modes in a latent feature space.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::sig9;
use crate::model::{
    BoundingBox, ClassId, DatasetSplit, Extent, Instance, Proposal, Scene, TaskMode,
    TaskSequence,
};
use crate::rng::{stream, substream};

/// Target IoUs of the jittered copies emitted for every ground truth.
pub const JITTER_TARGETS: [f64; 6] = [0.9, 0.8, 0.72, 0.68, 0.5, 0.3];
pub const BACKGROUND_PROPOSALS: usize = 4;
pub const BACKGROUND_MAX_IOU: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub num_base_classes: usize,
    pub num_novel_classes: usize,
    pub modes_per_class: usize,
    pub d_world: usize,
    pub scenes_per_base_class: usize,
    pub shots_k: usize,
    /// Inclusive `[min, max]` instance count per scene.
    pub instances_per_scene: [usize; 2],
    /// Half-width of the uniform perturbation applied to each jitter target.
    pub proposal_jitter: f64,
    pub test_scenes: usize,
    /// Mode means are uniform in `[-mode_spread, mode_spread]^d_world`.
    pub mode_spread: f64,
    /// Mode `m` of a class is drawn with probability proportional to
    /// `mode_skew^m`; 1 gives equally frequent modes.
    pub mode_skew: f64,
    /// Isotropic standard deviation around each mode mean.
    pub feature_noise: f64,
    /// When positive, every novel mode is placed at this distance from a
    /// randomly chosen base mode instead of uniformly in the hypercube.
    pub novel_anchor_offset: f64,
    pub extent: f64,
    pub cell: f64,
    pub box_size: [f64; 2],
    pub mode: TaskMode,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            num_base_classes: 4,
            num_novel_classes: 5,
            modes_per_class: 3,
            d_world: 16,
            scenes_per_base_class: 40,
            shots_k: 3,
            instances_per_scene: [1, 3],
            proposal_jitter: 0.01,
            test_scenes: 90,
            mode_spread: 1.0,
            mode_skew: 1.0,
            feature_noise: 0.15,
            novel_anchor_offset: 0.0,
            extent: 128.0,
            cell: 32.0,
            box_size: [12.0, 20.0],
            mode: TaskMode::Typical,
            seed: 0,
        }
    }
}

impl WorldConfig {
    /// Number of non-overlapping slots an instance can occupy.
    pub fn capacity(&self) -> usize {
        let per_side = (self.extent / self.cell).floor() as usize;
        per_side * per_side
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_base_classes == 0 || self.num_novel_classes == 0 {
            return bad("class counts must be positive");
        }
        if self.modes_per_class == 0 {
            return bad("modes_per_class must be at least 1");
        }
        if self.shots_k == 0 {
            return bad("shots_k must be at least 1");
        }
        if self.d_world == 0 || self.scenes_per_base_class == 0 || self.test_scenes == 0 {
            return bad("d_world, scenes_per_base_class and test_scenes must be positive");
        }
        let [lo, hi] = self.instances_per_scene;
        if lo == 0 || lo > hi {
            return bad("instances_per_scene must be a non-empty range starting at 1 or more");
        }
        if hi > self.capacity() {
            return Err(Error::Config(format!(
                "instances_per_scene max {hi} exceeds scene capacity {}",
                self.capacity()
            )));
        }
        let [bmin, bmax] = self.box_size;
        if !(bmin > 0.0 && bmin <= bmax && bmax < self.cell) {
            return bad("box_size must satisfy 0 < min <= max < cell");
        }
        if !(0.0..0.05).contains(&self.proposal_jitter) {
            return bad("proposal_jitter must lie in [0, 0.05)");
        }
        if !(self.mode_skew > 0.0 && self.mode_skew <= 1.0) {
            return bad("mode_skew must lie in (0, 1]");
        }
        if self.feature_noise < 0.0 || self.mode_spread <= 0.0 || self.novel_anchor_offset < 0.0 {
            return bad("feature_noise and novel_anchor_offset must be >= 0, mode_spread > 0");
        }
        Ok(())
    }

    pub fn base_classes(&self) -> Vec<ClassId> {
        (0..self.num_base_classes).map(ClassId).collect()
    }

    pub fn novel_classes(&self) -> Vec<ClassId> {
        (self.num_base_classes..self.num_base_classes + self.num_novel_classes)
            .map(ClassId)
            .collect()
    }
}

/// Output of [`generate_world`].
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub base: DatasetSplit,
    pub tasks: TaskSequence,
    pub test: DatasetSplit,
    /// `mode_means[class][mode]` in latent space.
    pub mode_means: Vec<Vec<Vec<f64>>>,
}

struct Generator<'a> {
    cfg: &'a WorldConfig,
    rng: ChaCha8Rng,
    next_id: u64,
    mode_means: Vec<Vec<Vec<f64>>>,
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut g = Generator {
        cfg,
        rng: substream(cfg.seed, stream::WORLD),
        next_id: 0,
        mode_means: Vec::new(),
    };
    g.draw_modes();

    let base_classes = cfg.base_classes();
    let novel_classes = cfg.novel_classes();
    let all_classes: Vec<ClassId> = base_classes.iter().chain(&novel_classes).copied().collect();

    let mut base_scenes = Vec::new();
    for i in 0..cfg.num_base_classes * cfg.scenes_per_base_class {
        let primary = base_classes[i % base_classes.len()];
        let classes = g.pick_classes(primary, &base_classes);
        base_scenes.push(g.scene(&classes, None)?);
    }

    let mut per_class = Vec::new();
    for &c in &novel_classes {
        let mut scenes = Vec::new();
        for _ in 0..cfg.shots_k {
            // one annotated novel instance among unannotated base objects
            let mut classes = g.pick_classes(c, &base_classes);
            classes.retain(|&x| x != c);
            scenes.push(g.scene(&classes, Some(c))?);
        }
        per_class.push(DatasetSplit {
            visible_classes: [c].into_iter().collect(),
            scenes,
        });
    }

    let mut test_scenes = Vec::new();
    for j in 0..cfg.test_scenes {
        let primary = all_classes[j % all_classes.len()];
        let classes = g.pick_classes(primary, &all_classes);
        test_scenes.push(g.scene(&classes, None)?);
    }

    Ok(World {
        base: DatasetSplit {
            visible_classes: base_classes.iter().copied().collect(),
            scenes: base_scenes,
        },
        tasks: TaskSequence::from_class_shots(cfg.mode, per_class),
        test: DatasetSplit {
            visible_classes: all_classes.iter().copied().collect(),
            scenes: test_scenes,
        },
        mode_means: g.mode_means,
    })
}

impl Generator<'_> {
    fn draw_modes(&mut self) {
        let cfg = self.cfg;
        let spread = cfg.mode_spread;
        for _ in 0..cfg.num_base_classes {
            let modes = (0..cfg.modes_per_class)
                .map(|_| {
                    (0..cfg.d_world)
                        .map(|_| self.rng.random_range(-spread..=spread))
                        .collect()
                })
                .collect();
            self.mode_means.push(modes);
        }
        for _ in 0..cfg.num_novel_classes {
            let mut modes = Vec::new();
            for _ in 0..cfg.modes_per_class {
                let mean: Vec<f64> = if cfg.novel_anchor_offset > 0.0 {
                    let c = self.rng.random_range(0..cfg.num_base_classes);
                    let m = self.rng.random_range(0..cfg.modes_per_class);
                    let anchor = self.mode_means[c][m].clone();
                    let dir: Vec<f64> = (0..cfg.d_world)
                        .map(|_| self.rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    anchor
                        .iter()
                        .zip(&dir)
                        .map(|(a, d)| a + cfg.novel_anchor_offset * d / norm)
                        .collect()
                } else {
                    (0..cfg.d_world)
                        .map(|_| self.rng.random_range(-spread..=spread))
                        .collect()
                };
                modes.push(mean);
            }
            self.mode_means.push(modes);
        }
    }

    /// `primary` plus up to two further distinct classes from `pool`.
    fn pick_classes(&mut self, primary: ClassId, pool: &[ClassId]) -> Vec<ClassId> {
        let extra = self.rng.random_range(0..=2usize);
        let mut others: Vec<ClassId> = pool.iter().copied().filter(|&c| c != primary).collect();
        others.shuffle(&mut self.rng);
        let mut classes = vec![primary];
        classes.extend(others.into_iter().take(extra));
        classes
    }

    fn latent(&mut self, class: ClassId, mode: usize) -> Vec<f64> {
        let noise = self.cfg.feature_noise;
        let mean = self.mode_means[class.index()][mode].clone();
        mean.iter()
            .map(|m| sig9(m + noise * self.rng.sample::<f64, _>(StandardNormal)))
            .collect()
    }

    /// Builds one scene. `classes` contribute at least one instance each
    /// unless the count cap is reached; `single` adds exactly one instance of
    /// that class.
    fn scene(&mut self, classes: &[ClassId], single: Option<ClassId>) -> Result<Scene> {
        let cfg = self.cfg;
        let [lo, hi] = cfg.instances_per_scene;
        let mut count = self.rng.random_range(lo..=hi);
        let reserved = usize::from(single.is_some());
        let mut labels: Vec<ClassId> = Vec::new();
        if let Some(c) = single {
            labels.push(c);
        }
        let mut classes = classes.to_vec();
        classes.truncate(hi - reserved);
        count = count.max(classes.len() + reserved).min(hi);
        labels.extend(classes.iter().copied());
        while labels.len() < count {
            if classes.is_empty() {
                break;
            }
            let c = *classes.choose(&mut self.rng).unwrap();
            labels.push(c);
        }

        // instances of one class in one scene share a mode
        let mut modes = std::collections::BTreeMap::new();
        let per_side = (cfg.extent / cfg.cell).floor() as usize;
        let mut cells: Vec<usize> = (0..per_side * per_side).collect();
        cells.shuffle(&mut self.rng);
        let extent = Extent {
            width: cfg.extent,
            height: cfg.extent,
        };

        let mut instances = Vec::new();
        for (slot, &class) in labels.iter().enumerate() {
            let mode = *modes
                .entry(class)
                .or_insert_with(|| draw_mode(&mut self.rng, cfg.modes_per_class, cfg.mode_skew));
            let cell = cells[slot];
            let (col, row) = ((cell % per_side) as f64, (cell / per_side) as f64);
            let w = self.rng.random_range(cfg.box_size[0]..=cfg.box_size[1]);
            let h = self.rng.random_range(cfg.box_size[0]..=cfg.box_size[1]);
            let slack_x = 0.5 * (cfg.cell - w) * 0.25;
            let slack_y = 0.5 * (cfg.cell - h) * 0.25;
            let cx = (col + 0.5) * cfg.cell + self.rng.random_range(-slack_x..=slack_x);
            let cy = (row + 0.5) * cfg.cell + self.rng.random_range(-slack_y..=slack_y);
            let bbox = quantized_box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)?;
            let latent_feature = self.latent(class, mode);
            instances.push(Instance {
                bbox,
                class,
                latent_feature,
            });
        }

        let mut boxes = Vec::new();
        for inst in &instances {
            for &target in &JITTER_TARGETS {
                let t = self.perturb_target(target);
                if let Some(b) = self.jittered(&inst.bbox, t, extent)? {
                    boxes.push(b);
                }
            }
        }
        for _ in 0..BACKGROUND_PROPOSALS {
            if let Some(b) = self.background(&instances, extent)? {
                boxes.push(b);
            }
        }
        let proposals = boxes
            .into_iter()
            .map(|b| {
                let mut p = Proposal::matched_against(b, &instances);
                p.max_iou = sig9(p.max_iou);
                p
            })
            .collect();

        let scene_id = self.next_id;
        self.next_id += 1;
        Ok(Scene {
            scene_id,
            extent,
            instances,
            proposals,
        })
    }

    fn perturb_target(&mut self, target: f64) -> f64 {
        let j = self.cfg.proposal_jitter;
        if j == 0.0 {
            target
        } else {
            target + self.rng.random_range(-j..=j)
        }
    }

    /// Shifts `gt` along a random direction so that its IoU with the
    /// original equals `target`, keeping the result inside the extent.
    fn jittered(
        &mut self,
        gt: &BoundingBox,
        target: f64,
        extent: Extent,
    ) -> Result<Option<BoundingBox>> {
        for attempt in 0..48 {
            let theta = if attempt < 32 {
                self.rng.random_range(0.0..std::f64::consts::TAU)
            } else {
                // deterministic sweep as a fallback
                (attempt - 32) as f64 * std::f64::consts::TAU / 16.0
            };
            let (ux, uy) = (theta.cos(), theta.sin());
            let r = shift_for_iou(gt.width(), gt.height(), ux.abs(), uy.abs(), target);
            let b = gt.translate(r * ux, r * uy);
            let q = quantized_box(b.x_min, b.y_min, b.x_max, b.y_max)?;
            if q.within(extent) {
                return Ok(Some(q));
            }
        }
        Ok(None)
    }

    fn background(&mut self, instances: &[Instance], extent: Extent) -> Result<Option<BoundingBox>> {
        let [bmin, bmax] = self.cfg.box_size;
        for _ in 0..200 {
            let w = self.rng.random_range(bmin..=bmax);
            let h = self.rng.random_range(bmin..=bmax);
            let x = self.rng.random_range(0.0..=extent.width - w);
            let y = self.rng.random_range(0.0..=extent.height - h);
            let b = quantized_box(x, y, x + w, y + h)?;
            if !b.within(extent) {
                continue;
            }
            let p = Proposal::matched_against(b, instances);
            if p.max_iou < BACKGROUND_MAX_IOU {
                return Ok(Some(b));
            }
        }
        Ok(None)
    }
}

fn quantized_box(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<BoundingBox> {
    BoundingBox::new(sig9(x0), sig9(y0), sig9(x1), sig9(y1))
}

/// Distance along unit direction `(ux, uy)` (absolute components) at which a
/// translated copy of a `w x h` box has IoU `target` with the original.
/// Mode index with probability proportional to `skew^m`.
fn draw_mode<R: Rng>(rng: &mut R, modes: usize, skew: f64) -> usize {
    if skew == 1.0 {
        return rng.random_range(0..modes);
    }
    let total: f64 = (0..modes).map(|m| skew.powi(m as i32)).sum();
    let mut u = rng.random::<f64>() * total;
    for m in 0..modes {
        u -= skew.powi(m as i32);
        if u < 0.0 {
            return m;
        }
    }
    modes - 1
}

pub fn shift_for_iou(w: f64, h: f64, ux: f64, uy: f64, target: f64) -> f64 {
    let iou_at = |r: f64| {
        let iw = (w - r * ux).max(0.0);
        let ih = (h - r * uy).max(0.0);
        let inter = iw * ih;
        inter / (2.0 * w * h - inter)
    };
    let mut hi = f64::INFINITY;
    if ux > 0.0 {
        hi = hi.min(w / ux);
    }
    if uy > 0.0 {
        hi = hi.min(h / uy);
    }
    let mut lo = 0.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if iou_at(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Exposed annotations and scene ids for a quick sanity summary.
pub fn class_instance_counts(split: &DatasetSplit) -> std::collections::BTreeMap<ClassId, usize> {
    let mut counts = std::collections::BTreeMap::new();
    for s in &split.scenes {
        for i in &s.instances {
            if split.visible_classes.contains(&i.class) {
                *counts.entry(i.class).or_insert(0) += 1;
            }
        }
    }
    counts
}

pub fn scene_ids(split: &DatasetSplit) -> BTreeSet<u64> {
    split.scenes.iter().map(|s| s.scene_id).collect()
}
