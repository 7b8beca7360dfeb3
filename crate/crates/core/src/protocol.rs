//! Two-stage pipeline: pre-training on base classes, then incremental
//! transfer sessions under a strategy, exemplar method and distillation
//! flag, in typical or continual mode.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{DetectorConfig, DetectorState, GroupMask, TransferStrategy};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::exemplar::{
    extract_image_class_features, select_exemplars_classmean, select_exemplars_clustering,
    select_exemplars_random, ClassCentroids, ExemplarMethod, ExemplarSet, FeatureLayer,
};
use crate::losses::{
    batch_objective, precompute_distill_targets, sample_regions, BatchLoss, DistillTargetStore, LossConfig,
    SceneSamples,
};
use crate::model::{ClassId, DatasetSplit, ExposedScene, TaskMode, TaskSequence};
use crate::optim::Sgd;
use crate::rng::{indexed_substream, stream, substream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Epoch (0-based) from which the learning rate is divided by
    /// `lr_drop_factor`.
    #[serde(default)]
    pub lr_drop_epoch: Option<usize>,
    #[serde(default = "default_drop_factor")]
    pub lr_drop_factor: f64,
}

fn default_drop_factor() -> f64 {
    10.0
}

impl StageConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_drop_epoch {
            Some(e) if epoch >= e => self.lr / self.lr_drop_factor,
            _ => self.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub pretrain: StageConfig,
    pub transfer: StageConfig,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_scenes: usize,
    pub seed: u64,
    pub detector: DetectorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain: StageConfig {
                epochs: 6,
                lr: 0.01,
                lr_drop_epoch: Some(4),
                lr_drop_factor: 10.0,
            },
            transfer: StageConfig {
                epochs: 10,
                lr: 0.001,
                lr_drop_epoch: None,
                lr_drop_factor: 10.0,
            },
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_scenes: 4,
            seed: 0,
            detector: DetectorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("pretrain", &self.pretrain), ("transfer", &self.transfer)] {
            if s.epochs == 0 {
                return Err(Error::Config(format!("{name}.epochs must be at least 1")));
            }
            if !(s.lr > 0.0) || !(s.lr_drop_factor > 0.0) {
                return Err(Error::Config(format!("{name} learning rate and drop factor must be positive")));
            }
        }
        if self.batch_scenes == 0 {
            return Err(Error::Config("batch_scenes must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must lie in [0, 1) and weight_decay be >= 0".into()));
        }
        Ok(())
    }
}

/// Which old-model targets later continual sessions distill from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DistillMode {
    /// Recompute under the incoming state at every session.
    #[default]
    PerSession,
    /// Keep the pre-trained model's base-class targets throughout.
    BaseOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRecipe {
    pub strategy: TransferStrategy,
    pub use_distillation: bool,
    pub exemplar_method: ExemplarMethod,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub distill_mode: DistillMode,
    #[serde(default)]
    pub feature_layer: FeatureLayer,
}

impl SessionRecipe {
    pub fn new(strategy: TransferStrategy, use_distillation: bool, exemplar_method: ExemplarMethod) -> Self {
        SessionRecipe {
            strategy,
            use_distillation,
            exemplar_method,
            loss: LossConfig::default(),
            distill_mode: DistillMode::default(),
            feature_layer: FeatureLayer::default(),
        }
    }

    /// The full method: FIT_CSE with distillation and clustering exemplars.
    pub fn least() -> Self {
        SessionRecipe::new(TransferStrategy::FitCse, true, ExemplarMethod::Clustering)
    }

    /// e.g. `FIT_CSE+d+e`.
    pub fn label(&self) -> String {
        let mut s = self.strategy.label().to_string();
        if self.use_distillation {
            s.push_str("+d");
        }
        if self.exemplar_method != ExemplarMethod::None {
            s.push('+');
            s.push_str(self.exemplar_method.label());
        }
        s
    }
}

/// Mean losses over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub stage: String,
    pub session: Option<usize>,
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub total: f64,
    pub rpn: f64,
    pub loc: f64,
    pub cls: f64,
    pub kd: Option<f64>,
}

/// Everything one optimization stage needs besides the state.
pub struct Stage<'a> {
    pub name: &'a str,
    pub session: Option<usize>,
    pub schedule: StageConfig,
    pub mask: GroupMask,
    pub loss: &'a LossConfig,
    pub store: Option<&'a DistillTargetStore>,
}

/// Runs `stage.schedule.epochs` passes over `scenes` with momentum SGD.
/// Each epoch visits the scenes in a fresh shuffled order in batches of
/// `cfg.batch_scenes`.
pub fn train_stage<R: Rng>(
    state: &mut DetectorState,
    scenes: &[ExposedScene],
    stage: &Stage<'_>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<EpochTrace>> {
    let mut opt = Sgd::new(state, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut traces = Vec::with_capacity(stage.schedule.epochs);
    let mut step = 0usize;
    for epoch in 0..stage.schedule.epochs {
        let lr = stage.schedule.lr_at(epoch);
        order.shuffle(rng);
        let mut acc = EpochTrace {
            stage: stage.name.to_string(),
            session: stage.session,
            epoch,
            lr,
            steps: 0,
            total: 0.0,
            rpn: 0.0,
            loc: 0.0,
            cls: 0.0,
            kd: stage.store.map(|_| 0.0),
        };
        for chunk in order.chunks(cfg.batch_scenes) {
            let batch: Vec<SceneSamples<'_>> = chunk
                .iter()
                .map(|&i| sample_regions(&scenes[i], stage.loss, stage.store.is_some(), rng))
                .collect();
            let (loss, grads) = batch_objective(state, &batch, stage.store, stage.loss, Some(stage.mask))?;
            check_finite(&loss, stage.name, step)?;
            opt.step(state, &grads.expect("gradient requested"), stage.mask, lr);
            let c = loss.components;
            acc.steps += 1;
            acc.total += loss.total;
            acc.rpn += c.rpn;
            acc.loc += c.loc;
            acc.cls += c.cls;
            if let (Some(a), Some(k)) = (acc.kd.as_mut(), c.kd) {
                *a += k;
            }
            step += 1;
        }
        let n = acc.steps.max(1) as f64;
        acc.total /= n;
        acc.rpn /= n;
        acc.loc /= n;
        acc.cls /= n;
        acc.kd = acc.kd.map(|k| k / n);
        log::debug!("{} epoch {epoch}: loss {:.5}", stage.name, acc.total);
        traces.push(acc);
    }
    Ok(traces)
}

fn check_finite(loss: &BatchLoss, stage: &str, step: usize) -> Result<()> {
    if loss.total.is_finite() && loss.components.is_finite() {
        return Ok(());
    }
    Err(Error::NonFinite {
        stage: stage.to_string(),
        step,
        detail: format!("{:?}", loss.components),
    })
}

/// Trains a fresh detector on the base split. The class-agnostic
/// extractor keeps its initialization.
pub fn pretrain(
    base: &DatasetSplit,
    d_world: usize,
    cfg: &TrainConfig,
    loss: &LossConfig,
) -> Result<(DetectorState, Vec<EpochTrace>)> {
    cfg.validate()?;
    loss.validate()?;
    let classes: Vec<ClassId> = base.visible_classes.iter().copied().collect();
    if classes.iter().enumerate().any(|(i, c)| c.index() != i) {
        return Err(Error::Data("base classes must be 0..n".into()));
    }
    let mut state = DetectorState::new(d_world, &cfg.detector, classes.len(), cfg.seed)?;
    let mut rng = substream(cfg.seed, stream::SAMPLING);
    let scenes = base.exposed();
    let stage = Stage {
        name: "pretrain",
        session: None,
        schedule: cfg.pretrain,
        mask: GroupMask::PRETRAIN,
        loss,
        store: None,
    };
    let traces = train_stage(&mut state, &scenes, &stage, cfg, &mut rng)?;
    Ok((state, traces))
}

/// Picks base exemplars with `method` under the pre-trained state. `k` is
/// the shot count, used as the number of clusters per class. The random and
/// class-mean baselines get the same number of scenes as the clustering
/// selection, so all three replay equally much base data.
pub fn select_exemplars(
    state: &DetectorState,
    base: &DatasetSplit,
    method: ExemplarMethod,
    k: usize,
    layer: FeatureLayer,
    seed: u64,
) -> Result<Option<ExemplarSet>> {
    if method == ExemplarMethod::None {
        return Ok(None);
    }
    let exposed = base.exposed();
    let classes: Vec<ClassId> = base.visible_classes.iter().copied().collect();
    let features = extract_image_class_features(state, &exposed, layer);
    let centroids = ClassCentroids::fit(&features, &classes, k, seed)?;
    let mut clustering = select_exemplars_clustering(&features, &centroids);
    clustering.seed = Some(seed);
    let budget = clustering.scenes.len();
    Ok(Some(match method {
        ExemplarMethod::Clustering => {
            if !clustering.uncovered.is_empty() {
                log::warn!("exemplar selection stalled with {} pairs uncovered", clustering.uncovered.len());
            }
            clustering
        }
        ExemplarMethod::Random => {
            let ids: Vec<u64> = base.scenes.iter().map(|s| s.scene_id).collect();
            select_exemplars_random(&ids, budget, seed)
        }
        ExemplarMethod::ClassMean => select_exemplars_classmean(&features, k, Some(budget)),
        ExemplarMethod::None => unreachable!("handled above"),
    }))
}

/// Exemplar scenes with base annotations plus the shot scenes with their
/// own annotations, shuffled with `rng`.
pub fn build_transfer_set<R: Rng>(
    shots: &DatasetSplit,
    exemplars: Option<&ExemplarSet>,
    base: &DatasetSplit,
    rng: &mut R,
) -> Result<Vec<ExposedScene>> {
    let mut out = exemplar_scenes(exemplars, base)?;
    out.extend(shots.exposed());
    out.shuffle(rng);
    Ok(out)
}

fn exemplar_scenes(exemplars: Option<&ExemplarSet>, base: &DatasetSplit) -> Result<Vec<ExposedScene>> {
    let Some(set) = exemplars else {
        return Ok(Vec::new());
    };
    set.scenes
        .iter()
        .map(|id| {
            base.scenes
                .iter()
                .find(|s| s.scene_id == *id)
                .map(|s| ExposedScene::new(s.clone(), base.visible_classes.clone()))
                .ok_or_else(|| Error::Data(format!("exemplar scene {id} is not in the base split")))
        })
        .collect()
}

/// Result of one transfer session.
#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub state: DetectorState,
    pub store: Option<DistillTargetStore>,
    pub traces: Vec<EpochTrace>,
}

/// Distills (optionally), registers `new_classes`, then optimizes the full
/// objective under the strategy's mask. A precomputed `store` replaces the
/// per-session targets.
pub fn transfer_session(
    mut state: DetectorState,
    recipe: &SessionRecipe,
    transfer: &[ExposedScene],
    new_classes: &[ClassId],
    cfg: &TrainConfig,
    session: usize,
    store: Option<DistillTargetStore>,
) -> Result<SessionOutcome> {
    recipe.loss.validate()?;
    let store = if recipe.use_distillation {
        let s = store.unwrap_or_else(|| {
            precompute_distill_targets(&state, transfer, recipe.loss.temperature, recipe.loss.distill_background)
        });
        if s.is_empty() {
            log::warn!("session {session}: no annotated regions to distill; the term contributes 0");
        }
        Some(s)
    } else {
        None
    };
    let first = new_classes.first().ok_or(Error::Empty("session classes"))?;
    let mut head_rng = indexed_substream(cfg.seed, stream::HEAD, first.index() as u64);
    state.register_classes(new_classes, &mut head_rng)?;
    let mut rng = indexed_substream(cfg.seed, stream::SAMPLING, 1 + session as u64);
    let name = format!("transfer-{session}");
    let stage = Stage {
        name: &name,
        session: Some(session),
        schedule: cfg.transfer,
        mask: recipe.strategy.into(),
        loss: &recipe.loss,
        store: store.as_ref(),
    };
    let traces = train_stage(&mut state, transfer, &stage, cfg, &mut rng)?;
    Ok(SessionOutcome { state, store, traces })
}

#[derive(Debug, Clone)]
pub struct SessionResult {
    /// 1-based session index.
    pub session: usize,
    pub classes: Vec<ClassId>,
    pub state: DetectorState,
    pub report: EvalReport,
    pub traces: Vec<EpochTrace>,
    pub store: Option<DistillTargetStore>,
}

/// Inputs shared by every session of a sequence.
pub struct SequenceInputs<'a> {
    pub base: &'a DatasetSplit,
    pub tasks: &'a TaskSequence,
    pub test: &'a DatasetSplit,
    pub shots_k: usize,
}

/// Applies one transfer per session. In continual mode each session's
/// shots join the replay memory once learned, but only when the recipe
/// replays exemplars at all. Every session is evaluated over the classes
/// seen so far.
pub fn run_task_sequence(
    pretrained: &DetectorState,
    inputs: &SequenceInputs<'_>,
    recipe: &SessionRecipe,
    cfg: &TrainConfig,
) -> Result<(Option<ExemplarSet>, Vec<SessionResult>)> {
    let base_classes: BTreeSet<ClassId> = inputs.base.visible_classes.clone();
    let registered: BTreeSet<ClassId> = pretrained.registered().collect();
    inputs.tasks.validate(&registered)?;
    let exemplars = select_exemplars(
        pretrained,
        inputs.base,
        recipe.exemplar_method,
        inputs.shots_k,
        recipe.feature_layer,
        cfg.seed,
    )?;
    let mut memory = exemplar_scenes(exemplars.as_ref(), inputs.base)?;

    // Base-only targets come from the pre-trained model over every scene
    // any session may replay.
    let base_only = (recipe.use_distillation
        && recipe.distill_mode == DistillMode::BaseOnly
        && inputs.tasks.mode == TaskMode::Continual)
        .then(|| {
            let mut all = memory.clone();
            for s in &inputs.tasks.sessions {
                all.extend(s.exposed());
            }
            precompute_distill_targets(pretrained, &all, recipe.loss.temperature, recipe.loss.distill_background)
        });

    let mut state = pretrained.clone();
    let mut seen_novel: BTreeSet<ClassId> = BTreeSet::new();
    let mut results = Vec::with_capacity(inputs.tasks.sessions.len());
    for (i, shots) in inputs.tasks.sessions.iter().enumerate() {
        let session = i + 1;
        let classes: Vec<ClassId> = shots.visible_classes.iter().copied().collect();
        let mut transfer = memory.clone();
        transfer.extend(shots.exposed());
        transfer.shuffle(&mut indexed_substream(cfg.seed, stream::EXEMPLAR, session as u64));
        let outcome = transfer_session(state, recipe, &transfer, &classes, cfg, session, base_only.clone())?;
        state = outcome.state;
        seen_novel.extend(classes.iter().copied());
        if recipe.exemplar_method != ExemplarMethod::None {
            memory.extend(shots.exposed());
        }
        let report = evaluate(&state, inputs.test, &base_classes, &seen_novel);
        log::info!("{} session {session}: {}", recipe.label(), report.summary());
        results.push(SessionResult {
            session,
            classes,
            state: state.clone(),
            report,
            traces: outcome.traces,
            store: outcome.store,
        });
    }
    Ok((exemplars, results))
}
