//! Stage-by-stage training.
//!
//! Each stage expands the head for its new classes, trains on the new
//! data only (optionally expanded by the four rotations), replays old
//! classes through prototype augmentation, distills features against a
//! frozen copy of the previous extractor, and finally stores prototypes of
//! the new class nodes.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{apply_sst, LabeledDataset, Task, TaskStream};
use crate::error::{Error, Result};
use crate::eval::{evaluate_seen, InferenceMode, StageEval};
use crate::losses::{
    explicit_protoaug_loss, hardness_instances, implicit_protoaug_loss, kd_feature_loss,
    new_class_loss, sample_proto_batch, total_loss, LossParts, LossWeights,
};
use crate::model::{Architecture, IncrementalModel, ModelSnapshot};
use crate::prototype::{compute_radius_first_task, update_radius_running, CovarianceMode, PrototypeMemory};
use crate::rng::{derive, permutation, EngineRng};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtoAugMode {
    /// Sample Gaussian pseudo-features around each prototype.
    Explicit,
    /// Minimize the closed-form bound of the expected loss.
    Implicit,
}

impl std::str::FromStr for ProtoAugMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "explicit" => Ok(ProtoAugMode::Explicit),
            "implicit" => Ok(ProtoAugMode::Implicit),
            _ => Err(Error::Argument(format!("unknown protoaug mode {s:?}"))),
        }
    }
}

/// Which stored nodes receive a hardness-aware instance each step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardnessTargets {
    /// every stored node, all rotation views included
    #[default]
    AllNodes,
    /// only the view-0 node of each old class
    View0,
}

/// Label form of hardness-aware instances. Only hard labels are supported.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardnessLabels {
    #[default]
    Hard,
    Soft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// epochs after which the learning rate is multiplied by `lr_decay`
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub weights: LossWeights,
    /// rotation self-supervision
    pub sst: bool,
    pub protoaug: bool,
    pub protoaug_mode: ProtoAugMode,
    pub covariance: CovarianceMode,
    pub hardness: bool,
    pub hardness_targets: HardnessTargets,
    pub hardness_labels: HardnessLabels,
    pub kd: bool,
    /// squared feature distance instead of the plain norm
    pub kd_squared: bool,
    /// update the shared radius with every stage instead of fixing it after
    /// the first
    pub running_radius: bool,
    /// pseudo-features per step; defaults to the number of real rows
    pub proto_batch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 64,
            learning_rate: 1e-3,
            lr_milestones: vec![30, 50],
            lr_decay: 0.1,
            weights: LossWeights::default(),
            sst: true,
            protoaug: true,
            protoaug_mode: ProtoAugMode::Explicit,
            covariance: CovarianceMode::Radius,
            hardness: true,
            hardness_targets: HardnessTargets::AllNodes,
            hardness_labels: HardnessLabels::Hard,
            kd: true,
            kd_squared: false,
            running_radius: false,
            proto_batch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "lr_milestones must be strictly increasing: {:?}",
                self.lr_milestones
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay {} outside (0, 1]", self.lr_decay)));
        }
        if self.hardness_labels == HardnessLabels::Soft {
            return Err(Error::Config("soft hardness labels are not implemented".into()));
        }
        if self.hardness && !self.protoaug {
            return Err(Error::Config("hardness instances require protoaug".into()));
        }
        if self.covariance != CovarianceMode::Radius && self.protoaug_mode == ProtoAugMode::Explicit {
            log::info!("explicit sampling with per-class {:?} covariance", self.covariance);
        }
        self.weights.validate()
    }

    pub fn views(&self) -> usize {
        if self.sst {
            4
        } else {
            1
        }
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.learning_rate * self.lr_decay.powi(passed as i32)
    }
}

/// Mean loss components over one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub total: f64,
    pub new: f64,
    pub old: f64,
    pub kd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: usize,
    /// original ids of the classes learned in this stage
    pub classes: Vec<usize>,
    pub epochs: Vec<EpochLoss>,
    pub radius: f64,
    pub wall_seconds: f64,
}

/// Model, memory and the stage counter: everything needed to continue.
#[derive(Clone, Debug, PartialEq)]
pub struct Learner {
    pub config: TrainConfig,
    pub seed: u64,
    pub model: IncrementalModel,
    pub memory: PrototypeMemory,
    /// number of completed stages
    pub stage: usize,
}

struct StepOutcome {
    loss: EpochLoss,
}

impl Learner {
    pub fn new(arch: Architecture, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let model = IncrementalModel::new(arch, config.views(), &mut derive(seed, 3))?;
        let memory = PrototypeMemory::new(model.extractor.out_dim(), config.covariance);
        Ok(Learner {
            config,
            seed,
            model,
            memory,
            stage: 0,
        })
    }

    /// Learns one task. `task.train` carries original class ids.
    pub fn train_stage(&mut self, task: &Task) -> Result<StageResult> {
        let started = Instant::now();
        let stage = self.stage + 1;
        let cfg = self.config.clone();
        let mut rng = derive(self.seed, 100 + stage as u64);

        let snapshot = (stage > 1 && cfg.kd).then(|| self.model.snapshot());
        self.model.head.expand(&task.classes, &mut rng)?;
        let train = self.node_labeled(&task.train)?;
        let views = cfg.views();
        let n = train.len() / views;
        let old_nodes = self.memory.nodes();
        let hard_targets: Vec<usize> = match cfg.hardness_targets {
            HardnessTargets::AllNodes => old_nodes.clone(),
            HardnessTargets::View0 => old_nodes.iter().copied().filter(|k| k % views == 0).collect(),
        };

        let mut adam = Adam::new(AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        });
        let mut epochs = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            adam.set_learning_rate(cfg.lr_at(epoch));
            let order = permutation(n, &mut rng);
            let mut sum = EpochLoss::default();
            let mut steps = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                let rows: Vec<usize> = chunk
                    .iter()
                    .flat_map(|&i| (0..views).map(move |v| views * i + v))
                    .collect();
                let x = train.batch(&rows)?;
                let labels: Vec<usize> = rows.iter().map(|&r| train.labels()[r]).collect();
                let out = self
                    .step(stage, &x, &labels, snapshot.as_ref(), &old_nodes, &hard_targets, &mut adam, &mut rng)
                    .map_err(|e| match e {
                        Error::Aborted { reason, .. } => Error::Aborted {
                            stage,
                            epoch: epoch + 1,
                            reason,
                            last_good: None,
                        },
                        other => other,
                    })?;
                sum.total += out.loss.total;
                sum.new += out.loss.new;
                sum.old += out.loss.old;
                sum.kd += out.loss.kd;
                steps += 1;
            }
            let s = steps as f64;
            let mean = EpochLoss {
                total: sum.total / s,
                new: sum.new / s,
                old: sum.old / s,
                kd: sum.kd / s,
            };
            log::debug!("stage {stage} epoch {} loss {:.5}", epoch + 1, mean.total);
            epochs.push(mean);
        }

        self.commit_prototypes(stage, &train)?;
        self.stage = stage;
        Ok(StageResult {
            stage,
            classes: task.classes.clone(),
            epochs,
            radius: self.memory.radius(),
            wall_seconds: started.elapsed().as_secs_f64(),
        })
    }

    /// Relabels a split from original ids to head nodes, expanding views.
    fn node_labeled(&self, split: &LabeledDataset) -> Result<LabeledDataset> {
        let head = &self.model.head;
        let slots = head.class_ids().len();
        if let Some(y) = split.labels().iter().find(|&&y| head.slot_of(y).is_none()) {
            return Err(Error::Protocol(format!("class {y} has no head slot")));
        }
        let by_slot = split.relabel(slots, |y| head.slot_of(y).expect("checked above"))?;
        if self.config.sst {
            Ok(apply_sst(&by_slot)?.data)
        } else {
            Ok(by_slot)
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        stage: usize,
        x: &Tensor,
        labels: &[usize],
        snapshot: Option<&ModelSnapshot>,
        old_nodes: &[usize],
        hard_targets: &[usize],
        adam: &mut Adam,
        rng: &mut EngineRng,
    ) -> Result<StepOutcome> {
        let cfg = &self.config;
        let mut tape = Tape::new();
        let ext = self.model.extractor.register(&mut tape, true);
        let w = tape.param(self.model.head.weight_tensor()?);
        let b = tape.param(self.model.head.bias_tensor()?);
        let xv = tape.constant(x.clone());
        let z = self.model.extractor.forward(&mut tape, &ext, xv)?;
        let new = new_class_loss(&mut tape, w, b, z, labels)?;

        let replay = stage > 1 && cfg.protoaug && !old_nodes.is_empty();
        let old = if replay {
            let hard = if cfg.hardness && !hard_targets.is_empty() {
                Some(hardness_instances(&self.memory, tape.value(z), hard_targets, cfg.weights.lambda)?)
            } else {
                None
            };
            match cfg.protoaug_mode {
                ProtoAugMode::Explicit => {
                    let count = cfg.proto_batch.unwrap_or(labels.len());
                    let mut proto = sample_proto_batch(&self.memory, count, Some(old_nodes), rng)?;
                    if let Some(h) = hard {
                        proto.append(h);
                    }
                    (!proto.is_empty())
                        .then(|| explicit_protoaug_loss(&mut tape, w, b, &proto))
                        .transpose()?
                }
                ProtoAugMode::Implicit => {
                    let mut l = implicit_protoaug_loss(&mut tape, w, b, &self.memory, old_nodes, cfg.weights.gamma)?;
                    if let Some(h) = hard.filter(|h| !h.is_empty()) {
                        let lh = explicit_protoaug_loss(&mut tape, w, b, &h)?;
                        l = tape.add(l, lh)?;
                    }
                    Some(l)
                }
            }
        } else {
            None
        };
        let kd = if stage > 1 && cfg.kd {
            Some(kd_feature_loss(&mut tape, z, snapshot, x, cfg.kd_squared)?)
        } else {
            None
        };
        let parts = LossParts { new, old, kd };
        let total = total_loss(&mut tape, parts, &cfg.weights, stage)?;
        let value = tape.value(total).item();
        if !value.is_finite() {
            return Err(Error::Aborted {
                stage,
                epoch: 0,
                reason: format!("non-finite loss {value}"),
                last_good: None,
            });
        }
        let loss = EpochLoss {
            total: value,
            new: tape.value(new).item(),
            old: old.map_or(0.0, |v| tape.value(v).item()),
            kd: kd.map_or(0.0, |v| tape.value(v).item()),
        };

        let grads = tape.backward(total)?;
        let grad_refs: Vec<Option<&[f64]>> = ext.iter().chain([&w, &b]).map(|&v| grads.get(v)).collect();
        let IncrementalModel { extractor, head } = &mut self.model;
        let mut params: Vec<&mut [f64]> = extractor.params_mut().iter_mut().map(|p| p.data_mut()).collect();
        let (wm, bm) = head.params_mut();
        params.push(wm);
        params.push(bm);
        adam.step(&mut params, &grad_refs)?;
        Ok(StepOutcome { loss })
    }

    fn commit_prototypes(&mut self, stage: usize, train: &LabeledDataset) -> Result<()> {
        let idx: Vec<usize> = (0..train.len()).collect();
        let mut rows = Vec::with_capacity(train.len() * self.memory.dim());
        for chunk in idx.chunks(256) {
            rows.extend(self.model.extractor.extract(&train.batch(chunk)?)?.into_data());
        }
        let features = Tensor::new(vec![train.len(), self.memory.dim()], rows)?;
        let labels = train.labels();
        let old = self.memory.len();
        if stage == 1 {
            let r = compute_radius_first_task(&features, labels)?;
            self.memory.set_radius(r.radius)?;
        } else if self.config.running_radius {
            let r = update_radius_running(self.memory.radius(), old, &features, labels)?;
            self.memory.set_radius(r)?;
        }
        self.memory.commit(&features, labels)?;
        Ok(())
    }

    /// Evaluates the current model on the test splits of the first
    /// `self.stage` tasks.
    pub fn evaluate(&self, stream: &TaskStream, mode: InferenceMode) -> Result<StageEval> {
        let tests: Vec<&LabeledDataset> = stream.tasks[..self.stage].iter().map(|t| &t.test).collect();
        evaluate_seen(&self.model, &tests, mode)
    }
}

/// Everything recorded over one incremental run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub stages: Vec<StageResult>,
    /// plain-mode evaluation after each stage
    pub plain: Vec<StageEval>,
    /// ensemble evaluation after each stage, when trained with views
    pub ensemble: Option<Vec<StageEval>>,
    pub learner: Learner,
    /// checkpoint written after each stage, if requested
    pub checkpoints: Vec<PathBuf>,
}

impl RunRecord {
    pub fn evals(&self, mode: InferenceMode) -> Option<&[StageEval]> {
        match mode {
            InferenceMode::Plain => Some(&self.plain),
            InferenceMode::Ensemble => self.ensemble.as_deref(),
        }
    }

    pub fn classes_per_stage(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.classes.len()).collect()
    }
}

/// Trains on every task of `stream` in order, evaluating after each
/// stage. With `checkpoint_dir`, writes `stage_<t>.ckpt` after each stage.
pub fn run_sequence(
    arch: Architecture,
    config: TrainConfig,
    stream: &TaskStream,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<RunRecord> {
    run_sequence_with(arch, config, stream, seed, checkpoint_dir, |_| Ok(()))
}

/// [`run_sequence`] with a hook called after every completed stage.
pub fn run_sequence_with(
    arch: Architecture,
    config: TrainConfig,
    stream: &TaskStream,
    seed: u64,
    checkpoint_dir: Option<&Path>,
    mut on_stage: impl FnMut(&Learner) -> Result<()>,
) -> Result<RunRecord> {
    let mut learner = Learner::new(arch, config, seed)?;
    let mut stages = Vec::new();
    let mut plain = Vec::new();
    let mut ensemble = learner.config.sst.then(Vec::new);
    let mut checkpoints: Vec<PathBuf> = Vec::new();
    for task in &stream.tasks {
        let res = learner.train_stage(task).map_err(|e| match e {
            Error::Aborted {
                stage,
                epoch,
                reason,
                ..
            } => Error::Aborted {
                stage,
                epoch,
                reason,
                last_good: checkpoints.last().cloned(),
            },
            other => other,
        })?;
        log::info!(
            "seed {seed} stage {} done in {:.1}s, final loss {:.4}",
            res.stage,
            res.wall_seconds,
            res.epochs.last().map_or(f64::NAN, |e| e.total)
        );
        stages.push(res);
        plain.push(learner.evaluate(stream, InferenceMode::Plain)?);
        if let Some(ens) = ensemble.as_mut() {
            ens.push(learner.evaluate(stream, InferenceMode::Ensemble)?);
        }
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(format!("stage_{}.ckpt", learner.stage));
            checkpoint::save(&learner, &path)?;
            checkpoints.push(path);
        }
        on_stage(&learner)?;
    }
    Ok(RunRecord {
        seed,
        stages,
        plain,
        ensemble,
        learner,
        checkpoints,
    })
}
