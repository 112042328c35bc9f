//! Sequential forgetting tasks, baselines, and the head-only recovery probe.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Splits};
use crate::error::{Error, Result};
use crate::lora::{Grouping, LoraSet, DEFAULT_ZERO_EPS};
use crate::metrics::{self, accuracy, push_record, MetricsRecord};
use crate::model::{self, fit, FitOptions, ModelConfig, TransformerClassifier};
use crate::objective::{self, ObjectiveConfig, ProxMode};
use crate::optim::{cosine_lr, AdamW, OptimizerConfig};
use crate::rng::{self, Rng, Stream};
use crate::tensor::{Tape, Tensor};

/// One class-erasure request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForgettingTask {
    pub forget: Vec<usize>,
    /// Fraction of each class's training samples used for replay and forgetting.
    #[serde(default = "default_data_ratio")]
    pub data_ratio: f64,
    /// Remaining classes that contribute no replay data.
    #[serde(default)]
    pub exclude_replay: Vec<usize>,
    /// Overrides the optimizer's epoch count for this task.
    #[serde(default)]
    pub epochs: Option<usize>,
}

fn default_data_ratio() -> f64 {
    0.1
}

impl ForgettingTask {
    pub fn new(forget: Vec<usize>) -> Self {
        Self {
            forget,
            data_ratio: default_data_ratio(),
            exclude_replay: Vec::new(),
            epochs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub objective: ObjectiveConfig,
    pub rank: usize,
    pub grouping: Grouping,
    pub optimizer: OptimizerConfig,
    pub zero_eps: f64,
    pub seed: u64,
}

impl EngineConfig {
    pub fn new(objective: ObjectiveConfig, rank: usize, optimizer: OptimizerConfig, seed: u64) -> Self {
        Self {
            objective,
            rank,
            grouping: Grouping::Block,
            optimizer,
            zero_eps: DEFAULT_ZERO_EPS,
            seed,
        }
    }
}

/// Result of one task: its metrics and the adapters as trained, before merging.
#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub record: MetricsRecord,
    pub adapters: LoraSet,
}

/// Frozen model plus the evolving adapter state of a forgetting run.
#[derive(Debug, Clone)]
pub struct Engine {
    model: TransformerClassifier,
    config: EngineConfig,
    lora: LoraSet,
    forgotten: Vec<Vec<usize>>,
    records: Vec<MetricsRecord>,
    fingerprint: String,
    sampling: Rng,
}

/// Uniform per-class subsample of `classes` (minus `excluded`) at `ratio`,
/// at least one sample per class. Returned indices are sorted.
pub fn build_replay_buffer(
    data: &Dataset,
    classes: &[usize],
    ratio: f64,
    excluded: &[usize],
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::validation(format!("data_ratio {ratio} must lie in (0, 1]")));
    }
    if classes.is_empty() {
        return Err(Error::validation("no remaining classes to replay"));
    }
    let mut out = Vec::new();
    for &c in classes {
        if excluded.contains(&c) {
            continue;
        }
        let mut idx = data.indices_of(&[c]);
        if idx.is_empty() {
            continue;
        }
        let k = ((ratio * idx.len() as f64).round() as usize).clamp(1, idx.len());
        idx.shuffle(rng);
        out.extend_from_slice(&idx[..k]);
    }
    if out.is_empty() {
        log::warn!("replay buffer is empty: every remaining class is excluded");
    }
    out.sort_unstable();
    Ok(out)
}

impl Engine {
    pub fn new(model: TransformerClassifier, config: EngineConfig) -> Result<Self> {
        config.objective.validate()?;
        config.optimizer.validate()?;
        let mut model = model;
        model.set_trainable(false);
        let lora = LoraSet::new(&model);
        let fingerprint = model.fingerprint();
        let sampling = rng::stream(config.seed, Stream::Sampling);
        Ok(Self {
            model,
            config,
            lora,
            forgotten: Vec::new(),
            records: Vec::new(),
            fingerprint,
            sampling,
        })
    }

    pub fn model(&self) -> &TransformerClassifier {
        &self.model
    }

    pub fn lora(&self) -> &LoraSet {
        &self.lora
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn forgotten(&self) -> &[Vec<usize>] {
        &self.forgotten
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn all_forgotten(&self) -> BTreeSet<usize> {
        self.forgotten.iter().flatten().copied().collect()
    }

    fn validate_task(&self, task: &ForgettingTask) -> Result<()> {
        let c = self.model.config().num_classes;
        if task.forget.is_empty() {
            return Err(Error::validation("task has no classes to forget"));
        }
        let set: BTreeSet<usize> = task.forget.iter().copied().collect();
        if set.len() != task.forget.len() {
            return Err(Error::validation("task lists a class twice"));
        }
        let done = self.all_forgotten();
        for &k in &task.forget {
            if k >= c {
                return Err(Error::validation(format!("class {k} out of range for {c} classes")));
            }
            if done.contains(&k) {
                return Err(Error::validation(format!("class {k} was already forgotten")));
            }
        }
        if let Some(&k) = task.exclude_replay.iter().find(|&&k| k >= c) {
            return Err(Error::validation(format!("excluded class {k} out of range")));
        }
        if !(task.data_ratio > 0.0 && task.data_ratio <= 1.0) {
            return Err(Error::validation(format!("data_ratio {} must lie in (0, 1]", task.data_ratio)));
        }
        Ok(())
    }

    /// Classes neither forgotten already nor in `current`.
    pub fn remaining_classes(&self, current: &[usize]) -> Vec<usize> {
        let done = self.all_forgotten();
        (0..self.model.config().num_classes)
            .filter(|k| !done.contains(k) && !current.contains(k))
            .collect()
    }

    /// Trains fresh adapters to erase `task.forget`, merges them, and records metrics.
    pub fn run_task(&mut self, splits: &Splits, task: &ForgettingTask) -> Result<TaskOutcome> {
        self.validate_task(task)?;
        self.model.check_data(&splits.train)?;
        let t = self.forgotten.len() as u32 + 1;
        let acc_f_before = accuracy(&self.model, Some(&self.lora), &splits.test, &task.forget)?;

        let mut init = rng::stream(self.config.seed, Stream::LoraInit(t));
        self.lora.attach_task(t, self.config.rank, self.config.grouping, &mut init)?;

        let remaining = self.remaining_classes(&task.forget);
        let replay = build_replay_buffer(
            &splits.train,
            &remaining,
            task.data_ratio,
            &task.exclude_replay,
            &mut self.sampling,
        )?;
        let forget = build_replay_buffer(&splits.train, &task.forget, task.data_ratio, &[], &mut self.sampling)?;
        if forget.is_empty() {
            return Err(Error::validation("forget classes have no training samples"));
        }
        let epochs = task.epochs.unwrap_or(self.config.optimizer.epochs);
        self.train_adapters(&splits.train, &replay, &forget, epochs)?;

        let zero_ratio = self.lora.zero_group_ratio(self.config.zero_eps);
        let tunable = metrics::tunable_ratio(&self.model, &self.lora);
        let adapters = self.lora.clone();
        self.lora.merge();

        if self.model.fingerprint() != self.fingerprint {
            return Err(Error::Training {
                epoch: epochs,
                reason: "base model parameters changed during forgetting".into(),
            });
        }
        let previous = self.all_forgotten();
        self.forgotten.push(task.forget.clone());
        let retained = self.remaining_classes(&[]);
        let acc_r = if retained.is_empty() {
            0.0
        } else {
            accuracy(&self.model, Some(&self.lora), &splits.test, &retained)?
        };
        let acc_f = accuracy(&self.model, Some(&self.lora), &splits.test, &task.forget)?;
        let acc_o = if previous.is_empty() {
            None
        } else {
            let prev: Vec<usize> = previous.into_iter().collect();
            Some(accuracy(&self.model, Some(&self.lora), &splits.test, &prev)?)
        };
        let record = MetricsRecord::new(t, acc_r, acc_f_before, acc_f, acc_o, zero_ratio, tunable);
        log::info!(
            "task {t}: acc_r {:.2} acc_f {:.2} h {:.2} zero groups {:.2}",
            record.acc_r,
            record.acc_f,
            record.h_mean,
            record.zero_group_ratio
        );
        push_record(&mut self.records, record.clone())?;
        Ok(TaskOutcome { record, adapters })
    }

    pub fn run_schedule(&mut self, splits: &Splits, tasks: &[ForgettingTask]) -> Result<Vec<MetricsRecord>> {
        let mut seen = BTreeSet::new();
        for task in tasks {
            for &k in &task.forget {
                if !seen.insert(k) {
                    return Err(Error::validation(format!("class {k} appears in more than one task")));
                }
            }
        }
        tasks
            .iter()
            .map(|task| self.run_task(splits, task).map(|o| o.record))
            .collect()
    }

    fn train_adapters(&mut self, train: &Dataset, replay: &[usize], forget: &[usize], epochs: usize) -> Result<()> {
        let opt = &self.config.optimizer;
        let obj = &self.config.objective;
        let pool = if replay.is_empty() { forget } else { replay };
        let steps_per_epoch = pool.len().div_ceil(opt.batch_size);
        let total = epochs * steps_per_epoch;
        let mut adam = AdamW::new(opt.weight_decay);
        let mut order = pool.to_vec();
        let mut forget_order = forget.to_vec();
        forget_order.shuffle(&mut self.sampling);
        let mut forget_pos = 0;
        let mut step = 0;
        for epoch in 0..epochs {
            let alpha = obj.alpha(epoch);
            order.shuffle(&mut self.sampling);
            for chunk in order.chunks(opt.batch_size) {
                let mut fbatch = Vec::with_capacity(chunk.len());
                while fbatch.len() < chunk.len() {
                    if forget_pos == forget_order.len() {
                        forget_order.shuffle(&mut self.sampling);
                        forget_pos = 0;
                    }
                    fbatch.push(forget_order[forget_pos]);
                    forget_pos += 1;
                }

                let mut tape = Tape::new();
                let mv = self.model.bind(&mut tape, false);
                let lv = self.lora.bind(&mut tape, true)?;
                let (xf, yf) = train.batch(&fbatch)?;
                let (xf, _) = self.model.input(&mut tape, xf)?;
                let logits_f = self.model.forward(&mut tape, &mv, xf, Some(&lv), None)?;
                let lf = objective::forget_loss_with(&mut tape, logits_f, &yf, obj.bnd, obj.forget_reduction)?;
                let lr_loss = if replay.is_empty() {
                    tape.constant(Tensor::scalar(0.0))
                } else {
                    let (xr, yr) = train.batch(chunk)?;
                    let (xr, _) = self.model.input(&mut tape, xr)?;
                    let logits_r = self.model.forward(&mut tape, &mv, xr, Some(&lv), None)?;
                    objective::retain_loss(&mut tape, logits_r, &yr)?
                };
                let data = objective::data_loss(&mut tape, lr_loss, lf, obj.beta)?;
                let loss = if obj.prox_mode == ProxMode::Subgradient && alpha > 0.0 {
                    let s = objective::structure_loss(&mut tape, &self.lora, &lv)?;
                    objective::total_loss(&mut tape, data, s, alpha)?
                } else {
                    data
                };
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        reason: format!("loss is {value}"),
                    });
                }
                tape.backward(loss)?;
                for (&(a, b), pair) in lv.pairs.iter().zip(self.lora.pairs_mut()) {
                    tape.write_grad(a, &mut pair.a)?;
                    tape.write_grad(b, &mut pair.b)?;
                }
                let lr = cosine_lr(step, total, opt.lr, opt.min_lr);
                adam.step(&mut self.lora.params_mut(), lr);
                if obj.prox_mode == ProxMode::Proximal {
                    for g in objective::prox_group_step(&mut self.lora, lr, alpha) {
                        for m in self.lora.groups()[g].clone() {
                            adam.reset_moments(m.param_index());
                        }
                    }
                }
                step += 1;
            }
        }
        for p in self.lora.params_mut() {
            p.zero_grad();
        }
        Ok(())
    }
}

/// Replay and forget index sets drawn the same way `run_task` draws them.
pub fn task_subsets(
    train: &Dataset,
    remaining: &[usize],
    task: &ForgettingTask,
    rng: &mut Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let replay = build_replay_buffer(train, remaining, task.data_ratio, &task.exclude_replay, rng)?;
    let forget = build_replay_buffer(train, &task.forget, task.data_ratio, &[], rng)?;
    Ok((replay, forget))
}

/// A freshly initialized model trained only on the replay samples.
pub fn baseline_retrain(
    config: &ModelConfig,
    train: &Dataset,
    replay: &[usize],
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<TransformerClassifier> {
    let mut m = TransformerClassifier::init(config.clone(), &mut rng::stream(seed, Stream::RetrainInit))?;
    if !replay.is_empty() {
        let data = train.subset(replay);
        let mut sampling = rng::stream(seed, Stream::Sampling);
        let options = FitOptions {
            dropout: 0.0,
            l2_anchor: None,
        };
        fit(&mut m, &data, opt, &options, &mut sampling, rng::stream(seed, Stream::Dropout))?;
    }
    m.set_trainable(false);
    Ok(m)
}

/// Full fine-tune (head frozen) on replay plus forget samples carrying
/// random wrong labels, with an L2 pull toward the starting weights.
pub fn baseline_l2(
    model: &TransformerClassifier,
    train: &Dataset,
    replay: &[usize],
    forget: &[usize],
    opt: &OptimizerConfig,
    l2_weight: f64,
    seed: u64,
) -> Result<TransformerClassifier> {
    let c = model.config().num_classes;
    let mut relabel = rng::stream(seed, Stream::Relabel);
    let forget_data = train.subset(forget);
    let wrong: Vec<usize> = forget_data
        .labels()
        .iter()
        .map(|&y| {
            let k = relabel.random_range(0..c - 1);
            if k >= y {
                k + 1
            } else {
                k
            }
        })
        .collect();
    let data = train.subset(replay).concat(&forget_data.with_labels(wrong)?)?;
    let mut m = model.clone();
    let anchor: Vec<Tensor> = m.params().into_iter().cloned().collect();
    m.set_trainable(true);
    m.set_head_trainable(false);
    let mut sampling = rng::stream(seed, Stream::Sampling);
    let options = FitOptions {
        dropout: 0.0,
        l2_anchor: Some((anchor, l2_weight)),
    };
    fit(&mut m, &data, opt, &options, &mut sampling, rng::stream(seed, Stream::Dropout))?;
    m.set_trainable(false);
    Ok(m)
}

/// One point of a recovery curve: accuracies on the forgotten and retained
/// test classes after `epoch` head-only epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryPoint {
    pub epoch: usize,
    pub acc_f: f64,
    pub acc_r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// Head weights that never select `forgotten` on the given features: their
/// columns are zeroed and their bias sits one unit below the smallest
/// per-sample maximum of the other logits.
pub fn mask_head(model: &TransformerClassifier, features: &Tensor, forgotten: &[usize]) -> Result<(Tensor, Tensor)> {
    let c = model.config().num_classes;
    let logits = model::head_logits(features, &model.head_w, &model.head_b)?;
    let floor = logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .filter(|(k, _)| !forgotten.contains(k))
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .fold(f64::INFINITY, f64::min);
    let mut w = model.head_w.clone();
    let mut b = model.head_b.clone();
    let d = w.rows();
    for &k in forgotten {
        for r in 0..d {
            w.data_mut()[r * c + k] = 0.0;
        }
        b.data_mut()[k] = floor - 1.0;
    }
    Ok((w, b))
}

/// Freezes the backbone (with adapters) and retrains only the head on
/// `probe_idx` from `train`, reporting test accuracies after every epoch.
/// Epoch 0 is the state before any probe training. `head` replaces the
/// model's own head as the starting point.
#[allow(clippy::too_many_arguments)]
pub fn recovery_probe(
    model: &TransformerClassifier,
    lora: Option<&LoraSet>,
    head: Option<(Tensor, Tensor)>,
    splits: &Splits,
    probe_idx: &[usize],
    forgotten: &[usize],
    retained: &[usize],
    cfg: &ProbeConfig,
) -> Result<Vec<RecoveryPoint>> {
    if probe_idx.is_empty() {
        return Err(Error::validation("probe set is empty"));
    }
    let feats = model.pooled_features(&splits.train, probe_idx, lora)?;
    let labels: Vec<usize> = probe_idx.iter().map(|&i| splits.train.labels()[i]).collect();
    let f_idx = splits.test.indices_of(forgotten);
    let r_idx = splits.test.indices_of(retained);
    let test_f = model.pooled_features(&splits.test, &f_idx, lora)?;
    let test_r = model.pooled_features(&splits.test, &r_idx, lora)?;
    let yf: Vec<usize> = f_idx.iter().map(|&i| splits.test.labels()[i]).collect();
    let yr: Vec<usize> = r_idx.iter().map(|&i| splits.test.labels()[i]).collect();

    let (mut w, mut b) = head.unwrap_or_else(|| (model.head_w.clone(), model.head_b.clone()));
    w.set_requires_grad(true);
    b.set_requires_grad(true);
    let c = model.config().num_classes;
    let eval = |w: &Tensor, b: &Tensor, epoch: usize| -> Result<RecoveryPoint> {
        let acc = |x: &Tensor, y: &[usize]| -> Result<f64> {
            let l = model::head_logits(x, w, b)?;
            let preds: Vec<usize> = l.data().chunks(c).map(model::argmax).collect();
            Ok(metrics::percent_correct(&preds, y.iter().copied()))
        };
        Ok(RecoveryPoint {
            epoch,
            acc_f: acc(&test_f, &yf)?,
            acc_r: acc(&test_r, &yr)?,
        })
    };

    let d = feats.cols();
    let mut curve = vec![eval(&w, &b, 0)?];
    let mut adam = AdamW::new(0.0);
    let mut rng = rng::stream(cfg.seed, Stream::Sampling);
    let mut order: Vec<usize> = (0..probe_idx.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let rows: Vec<f64> = chunk
                .iter()
                .flat_map(|&i| feats.data()[i * d..(i + 1) * d].iter().copied())
                .collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![chunk.len(), d], rows)?);
            let wv = tape.leaf(&w);
            let bv = tape.leaf(&b);
            let logits = model::head(&mut tape, x, wv, bv)?;
            let loss = tape.cross_entropy(logits, &y)?;
            tape.backward(loss)?;
            tape.write_grad(wv, &mut w)?;
            tape.write_grad(bv, &mut b)?;
            adam.step(&mut [&mut w, &mut b], cfg.lr);
        }
        curve.push(eval(&w, &b, epoch)?);
    }
    Ok(curve)
}
