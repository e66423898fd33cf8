//! Pre-training, tree construction and pruning.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;
use std::sync::mpsc;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::augment::{epoch_batches, pair_batch_from_indices, AugmentationPolicy, PairBatch};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{ntxent_with_grad, total_loss_with_grad, LossBreakdown, LossConfig};
use crate::metrics::ClusterScores;
use crate::model::{Model, ModelSpec};
use crate::tree::{RoutingTensor, TreeTopology};

/// Named schedule defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// 30 + 30 epochs, batch 128, depth 3.
    Desk,
    /// 200 + 100 epochs, batch 256, depth 4, pruning from tree epoch 10.
    Grayscale,
    /// 1000 + 500 epochs, batch 512, depth 5, pruning from tree epoch 50.
    Cifar,
}

impl Profile {
    pub fn depth(self) -> usize {
        match self {
            Profile::Desk => 3,
            Profile::Grayscale => 4,
            Profile::Cifar => 5,
        }
    }

    /// Schedule for a tree of `depth`, keeping every leaf (no pruning).
    pub fn schedule(self, depth: usize) -> TrainSchedule {
        let (pretrain_epochs, tree_epochs, prune_start_epoch, batch_size) = match self {
            Profile::Desk => (30, 30, 10, 128),
            Profile::Grayscale => (200, 100, 10, 256),
            Profile::Cifar => (1000, 500, 50, 512),
        };
        TrainSchedule {
            pretrain_epochs,
            tree_epochs,
            prune_start_epoch,
            prunes_per_epoch: 1,
            target_leaves: 1 << depth,
            batch_size,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            eval_every: 0,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub pretrain_epochs: usize,
    pub tree_epochs: usize,
    /// First tree-phase epoch (0-based) that begins with a prune.
    pub prune_start_epoch: usize,
    pub prunes_per_epoch: usize,
    pub target_leaves: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Evaluate every this many epochs (0: only at the end).
    pub eval_every: usize,
}

impl TrainSchedule {
    pub fn validate(&self, depth: usize) -> Result<()> {
        let leaves = 1usize << depth;
        if self.batch_size < 2 {
            return Err(Error::config("schedule.batch_size", "must be at least 2"));
        }
        if self.prunes_per_epoch != 1 {
            return Err(Error::config("schedule.prunes_per_epoch", "only one prune per epoch is supported"));
        }
        if self.target_leaves < 2 || self.target_leaves > leaves {
            return Err(Error::config(
                "schedule.target_leaves",
                format!("must be in 2..={leaves} for depth {depth}"),
            ));
        }
        let prunes = leaves - self.target_leaves;
        if prunes > 0 && self.prune_start_epoch + prunes > self.tree_epochs {
            return Err(Error::config(
                "schedule.prune_start_epoch",
                format!(
                    "{prunes} prunes starting at tree epoch {} do not fit in {} tree epochs",
                    self.prune_start_epoch, self.tree_epochs
                ),
            ));
        }
        let o = &self.optimizer;
        if !(o.learning_rate >= 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::config("schedule.optimizer.learning_rate", "must be finite and >= 0"));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(Error::config("schedule.optimizer.weight_decay", "must be finite and >= 0"));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(Error::config("schedule.optimizer.beta1", "moment decay rates must be in [0, 1)"));
        }
        if !(o.epsilon > 0.0) {
            return Err(Error::config("schedule.optimizer.epsilon", "must be > 0"));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.pretrain_epochs + self.tree_epochs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Tree,
    Done,
}

/// Moment estimates for every parameter plus per-group step counts.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: OptimizerConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Steps taken by the router and by everything else.
    pub router_steps: u64,
    pub other_steps: u64,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            router_steps: 0,
            other_steps: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grads: &[f64], range: Range<usize>, t: u64) {
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);
        for i in range {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let step = (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + c.epsilon);
            params[i] -= c.learning_rate * (step + c.weight_decay * params[i]);
        }
    }

    /// One step. The router range is only touched when `update_router`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], router: Range<usize>, update_router: bool) {
        if self.config.learning_rate == 0.0 {
            return;
        }
        self.other_steps += 1;
        let t = self.other_steps;
        self.update(params, grads, 0..router.start, t);
        self.update(params, grads, router.end..params.len(), t);
        if update_router {
            self.router_steps += 1;
            let t = self.router_steps;
            self.update(params, grads, router, t);
        }
    }
}

/// One leaf removal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    /// Global epoch at whose start the prune happened.
    pub epoch: usize,
    pub leaf: usize,
    pub mass: f64,
    /// Expected mass of every leaf just before the prune (0 for inactive).
    pub masses: Vec<f64>,
}

/// Summary of one finished epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0-based global index of the epoch.
    pub epoch: usize,
    pub phase: Phase,
    /// Batch means of each loss term. Pre-training fills only `r2`/`total`.
    pub loss: LossBreakdown,
    pub active_leaves: usize,
    pub pruned: Option<PruneEvent>,
    pub metrics: Option<ClusterScores>,
}

/// Per-batch losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub phase: Phase,
    pub loss: LossBreakdown,
    pub active_leaves: usize,
}

/// Result of one epoch call.
#[derive(Debug, Clone)]
pub struct EpochOutcome {
    pub record: EpochRecord,
    pub steps: Vec<StepRecord>,
}

/// Everything needed to continue training.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub phase: Phase,
    pub model: Model,
    pub topology: TreeTopology,
    pub optimizer: AdamW,
    pub schedule: TrainSchedule,
    pub loss: LossConfig,
    pub history: Vec<EpochRecord>,
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// NT-Xent on the contrast embeddings of `stacked` (anchors over views)
/// and its gradient over all parameters.
pub fn pretrain_loss_and_grad(model: &mut Model, stacked: Array2<f64>, temperature: f64) -> Result<(f64, Vec<f64>)> {
    let n = stacked.nrows() / 2;
    let pass = model.forward_train(stacked, false)?;
    let c = pass.contrast_embeddings();
    let (loss, ga, gv) = ntxent_with_grad(c.slice(s![..n, ..]), c.slice(s![n.., ..]), temperature)?;
    let grad = ndarray::concatenate(Axis(0), &[ga.view(), gv.view()]).expect("same width");
    let grads = model.backward(pass, None, grad.view())?;
    Ok((loss, grads))
}

/// Total loss on `stacked` (anchors over views) and its gradient over all
/// parameters.
pub fn tree_loss_and_grad(
    model: &mut Model,
    stacked: Array2<f64>,
    topo: &TreeTopology,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let pass = model.forward_train(stacked, true)?;
    let probs = pass
        .edge_left_prob()
        .cloned()
        .ok_or_else(|| Error::Internal("router output missing".into()))?;
    let routing = RoutingTensor::compute(probs, topo)?;
    let (breakdown, g) = total_loss_with_grad(&routing, pass.contrast_embeddings().view(), topo, cfg)?;
    let grads = model.backward(pass, Some(g.edge_left_prob.view()), g.contrast.view())?;
    Ok((breakdown, grads))
}

/// Expected posterior mass of every leaf over `dataset` (evaluation mode).
pub fn leaf_masses(model: &Model, topo: &TreeTopology, dataset: &Dataset) -> Result<Vec<f64>> {
    let routing = model.routing(dataset.samples(), topo)?;
    routing
        .leaves()
        .mean_axis(Axis(0))
        .map(|m| m.to_vec())
        .ok_or_else(|| Error::invalid("dataset is empty"))
}

/// Hard leaf assignment for every sample.
pub fn assign_dataset(model: &Model, topo: &TreeTopology, dataset: &Dataset) -> Result<Vec<usize>> {
    model.routing(dataset.samples(), topo)?.assign(topo)
}

/// Build batches on a worker thread and feed them to `step` in order.
fn for_each_batch(
    dataset: &Dataset,
    policy: &AugmentationPolicy,
    batch_size: usize,
    epoch_seed: u64,
    mut step: impl FnMut(usize, PairBatch) -> Result<()>,
) -> Result<()> {
    let plan = epoch_batches(dataset.len(), batch_size, epoch_seed);
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::sync_channel::<Result<PairBatch>>(2);
        scope.spawn(move || {
            for (b, indices) in plan.into_iter().enumerate() {
                let batch = pair_batch_from_indices(dataset, policy, indices, mix_seed(epoch_seed, b as u64 + 1));
                if tx.send(batch).is_err() {
                    break;
                }
            }
        });
        for (b, batch) in rx.into_iter().enumerate() {
            step(b, batch?)?;
        }
        Ok(())
    })
}

fn mean_breakdown(steps: &[StepRecord]) -> LossBreakdown {
    let n = steps.len().max(1) as f64;
    let mut out = LossBreakdown::default();
    for s in steps {
        out.cohi += s.loss.cohi / n;
        out.r1 += s.loss.r1 / n;
        out.r2 += s.loss.r2 / n;
        out.total += s.loss.total / n;
    }
    out
}

impl TrainState {
    /// Fresh state with parameters drawn from `schedule.seed`.
    pub fn new(spec: ModelSpec, schedule: TrainSchedule, loss: LossConfig) -> Result<Self> {
        schedule.validate(spec.depth)?;
        loss.validate()?;
        let model = Model::new(spec, schedule.seed)?;
        let optimizer = AdamW::new(schedule.optimizer, model.num_params());
        let phase = if schedule.pretrain_epochs > 0 {
            Phase::Pretrain
        } else if schedule.tree_epochs > 0 {
            Phase::Tree
        } else {
            Phase::Done
        };
        Ok(Self {
            epoch: 0,
            phase,
            model,
            topology: TreeTopology::new(spec.depth)?,
            optimizer,
            schedule,
            loss,
            history: Vec::new(),
        })
    }

    fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        if dataset.shape() != self.model.spec().encoder.input {
            return Err(Error::invalid(format!(
                "dataset shape {:?} does not match the encoder input {:?}",
                dataset.shape(),
                self.model.spec().encoder.input
            )));
        }
        if dataset.len() < self.schedule.batch_size {
            return Err(Error::invalid(format!(
                "dataset has {} samples, fewer than the batch size {}",
                dataset.len(),
                self.schedule.batch_size
            )));
        }
        Ok(())
    }

    fn advance(&mut self) {
        self.epoch += 1;
        self.phase = if self.epoch < self.schedule.pretrain_epochs {
            Phase::Pretrain
        } else if self.epoch < self.schedule.total_epochs() {
            Phase::Tree
        } else {
            Phase::Done
        };
    }

    /// One epoch minimizing NT-Xent only. Router parameters and their
    /// optimizer moments are left untouched.
    pub fn pretrain_epoch(&mut self, dataset: &Dataset, policy: &AugmentationPolicy) -> Result<EpochOutcome> {
        if self.phase != Phase::Pretrain {
            return Err(Error::InvalidState(format!("pretrain_epoch called in phase {:?}", self.phase)));
        }
        self.check_dataset(dataset)?;
        let epoch = self.epoch;
        let seed = mix_seed(self.schedule.seed, epoch as u64);
        let router = self.model.groups().router.clone();
        let temperature = self.loss.temperature;
        let active_leaves = self.topology.active_leaf_count();
        let mut steps = Vec::new();
        for_each_batch(dataset, policy, self.schedule.batch_size, seed, |b, batch| {
            let (r2, grads) = pretrain_loss_and_grad(&mut self.model, batch.stacked(), temperature)?;
            self.optimizer
                .step(self.model.params_mut(), &grads, router.clone(), false);
            steps.push(StepRecord {
                epoch,
                step: b,
                phase: Phase::Pretrain,
                active_leaves,
                loss: LossBreakdown {
                    cohi: 0.0,
                    r1: 0.0,
                    r2,
                    total: r2,
                },
            });
            Ok(())
        })?;
        let record = EpochRecord {
            epoch,
            phase: Phase::Pretrain,
            loss: mean_breakdown(&steps),
            active_leaves: self.topology.active_leaf_count(),
            pruned: None,
            metrics: None,
        };
        self.history.push(record.clone());
        self.advance();
        Ok(EpochOutcome { record, steps })
    }

    /// One epoch minimizing the total loss, starting with a prune when the
    /// schedule calls for one.
    pub fn tree_epoch(&mut self, dataset: &Dataset, policy: &AugmentationPolicy) -> Result<EpochOutcome> {
        if self.phase != Phase::Tree {
            return Err(Error::InvalidState(format!("tree_epoch called in phase {:?}", self.phase)));
        }
        self.check_dataset(dataset)?;
        let epoch = self.epoch;
        let tree_epoch = epoch - self.schedule.pretrain_epochs;
        let pruned = if tree_epoch >= self.schedule.prune_start_epoch
            && self.topology.active_leaf_count() > self.schedule.target_leaves
        {
            Some(self.prune_step(dataset)?)
        } else {
            None
        };
        let seed = mix_seed(self.schedule.seed, epoch as u64);
        let router = self.model.groups().router.clone();
        let cfg = self.loss;
        let topo = self.topology.clone();
        let mut steps = Vec::new();
        for_each_batch(dataset, policy, self.schedule.batch_size, seed, |b, batch| {
            let (loss, grads) = tree_loss_and_grad(&mut self.model, batch.stacked(), &topo, &cfg)?;
            self.optimizer
                .step(self.model.params_mut(), &grads, router.clone(), true);
            steps.push(StepRecord {
                epoch,
                step: b,
                phase: Phase::Tree,
                loss,
                active_leaves: topo.active_leaf_count(),
            });
            Ok(())
        })?;
        let record = EpochRecord {
            epoch,
            phase: Phase::Tree,
            loss: mean_breakdown(&steps),
            active_leaves: self.topology.active_leaf_count(),
            pruned,
            metrics: None,
        };
        self.history.push(record.clone());
        self.advance();
        Ok(EpochOutcome { record, steps })
    }

    /// Remove the active leaf with the least expected mass over `dataset`
    /// (lowest index on ties).
    pub fn prune_step(&mut self, dataset: &Dataset) -> Result<PruneEvent> {
        if self.topology.active_leaf_count() <= self.schedule.target_leaves {
            return Err(Error::InvalidState(format!(
                "already at {} active leaves (target {})",
                self.topology.active_leaf_count(),
                self.schedule.target_leaves
            )));
        }
        let masses = leaf_masses(&self.model, &self.topology, dataset)?;
        let leaf = argmin_active(&masses, &self.topology)?;
        self.topology = self.topology.prune_leaf(leaf)?;
        Ok(PruneEvent {
            epoch: self.epoch,
            leaf,
            mass: masses[leaf],
            masses,
        })
    }

    /// Train until the schedule is exhausted.
    pub fn run(&mut self, mut session: Session<'_>) -> Result<()> {
        while self.phase != Phase::Done {
            let outcome = match self.phase {
                Phase::Pretrain => self.pretrain_epoch(session.dataset, session.policy)?,
                Phase::Tree => self.tree_epoch(session.dataset, session.policy)?,
                Phase::Done => unreachable!(),
            };
            let every = self.schedule.eval_every;
            let due = self.phase == Phase::Done || (every > 0 && self.epoch % every == 0);
            if let (true, Some(eval)) = (due, session.evaluator.as_mut()) {
                let scores = eval(&self.model, &self.topology)?;
                if let Some(last) = self.history.last_mut() {
                    last.metrics = Some(scores);
                }
            }
            if let Some(log) = session.logger.as_mut() {
                log.write_steps(&outcome.steps)?;
                log.write_epoch(self.history.last().expect("epoch recorded"))?;
            }
            if let Some(path) = session.checkpoint {
                crate::checkpoint::save(self, path)?;
            }
            if let Some(cb) = session.on_epoch.as_mut() {
                cb(self);
            }
        }
        Ok(())
    }
}

/// Argmin over active leaves, lowest index on ties.
pub fn argmin_active(masses: &[f64], topo: &TreeTopology) -> Result<usize> {
    topo.active_leaves()
        .fold(None, |best: Option<usize>, l| match best {
            Some(b) if masses[b] <= masses[l] => Some(b),
            _ => Some(l),
        })
        .ok_or_else(|| Error::Internal("topology has no active leaf".into()))
}

type Evaluator<'a> = dyn FnMut(&Model, &TreeTopology) -> Result<ClusterScores> + 'a;

/// Inputs and side channels for [`TrainState::run`].
pub struct Session<'a> {
    pub dataset: &'a Dataset,
    pub policy: &'a AugmentationPolicy,
    /// Called on a frozen model at evaluation epochs.
    pub evaluator: Option<&'a mut Evaluator<'a>>,
    pub logger: Option<&'a mut RunLogger>,
    /// Overwritten after every epoch.
    pub checkpoint: Option<&'a Path>,
    pub on_epoch: Option<&'a mut dyn FnMut(&TrainState)>,
}

impl<'a> Session<'a> {
    pub fn new(dataset: &'a Dataset, policy: &'a AugmentationPolicy) -> Self {
        Self {
            dataset,
            policy,
            evaluator: None,
            logger: None,
            checkpoint: None,
            on_epoch: None,
        }
    }
}

/// JSON-lines writers for epoch and (optionally) step records.
pub struct RunLogger {
    epochs: BufWriter<File>,
    steps: Option<BufWriter<File>>,
}

fn open_append(path: &Path) -> Result<BufWriter<File>> {
    File::options()
        .create(true)
        .append(true)
        .open(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_line<T: Serialize>(w: &mut BufWriter<File>, value: &T) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|e| Error::Internal(e.to_string()))?;
    writeln!(w, "{line}")
        .and_then(|_| w.flush())
        .map_err(|e| Error::io("<log>", e))
}

impl RunLogger {
    /// Appends to `epochs` (and `steps` when given).
    pub fn open(epochs: &Path, steps: Option<&Path>) -> Result<Self> {
        Ok(Self {
            epochs: open_append(epochs)?,
            steps: steps.map(open_append).transpose()?,
        })
    }

    pub fn write_epoch(&mut self, record: &EpochRecord) -> Result<()> {
        write_line(&mut self.epochs, record)
    }

    pub fn write_steps(&mut self, steps: &[StepRecord]) -> Result<()> {
        if let Some(w) = self.steps.as_mut() {
            for s in steps {
                write_line(w, s)?;
            }
        }
        Ok(())
    }
}

/// Read a JSON-lines epoch log.
pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            out.push(serde_json::from_str(trimmed).map_err(|e| Error::Parse {
                offset,
                message: e.to_string(),
            })?);
        }
        offset += line.len() as u64;
    }
    Ok(out)
}
