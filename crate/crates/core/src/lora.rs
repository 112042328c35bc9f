//! Low-rank adapters on the feed-forward weights of every block.
//!
//! Each FFN weight `W` gets a pair `(A, B)` with `ΔW = B · A`. Weights are
//! stored for row-vector inputs, so for `W1: [d × h]` the pair is
//! `B: [d × r]`, `A: [r × h]`. Finished tasks are folded into a frozen
//! per-weight history so the effective weight is `W + H + B_t A_t`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TransformerClassifier;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

pub const LORA_INIT_STD: f64 = 0.02;
pub const DEFAULT_ZERO_EPS: f64 = 1e-8;

/// Which of the two FFN linears a pair adapts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FfnLinear {
    /// `W1`, model_dim → ffn_hidden_dim.
    Up,
    /// `W2`, ffn_hidden_dim → model_dim.
    Down,
}

impl FfnLinear {
    fn index(self) -> usize {
        match self {
            FfnLinear::Up => 0,
            FfnLinear::Down => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            FfnLinear::Up => "w1",
            FfnLinear::Down => "w2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Target {
    pub block: usize,
    pub linear: FfnLinear,
}

impl Target {
    fn index(self) -> usize {
        self.block * 2 + self.linear.index()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    /// Both pairs of one block form a group.
    #[default]
    Block,
    /// Each pair is a group.
    Module,
    /// Each individual `A` or `B` matrix is a group.
    Matrix,
}

impl Grouping {
    pub fn num_groups(self, num_blocks: usize) -> usize {
        match self {
            Grouping::Block => num_blocks,
            Grouping::Module => 2 * num_blocks,
            Grouping::Matrix => 4 * num_blocks,
        }
    }
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Grouping::Block => "block",
            Grouping::Module => "module",
            Grouping::Matrix => "matrix",
        })
    }
}

impl FromStr for Grouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block" => Ok(Grouping::Block),
            "module" => Ok(Grouping::Module),
            "matrix" => Ok(Grouping::Matrix),
            other => Err(Error::validation(format!(
                "unknown grouping {other:?} (expected block, module or matrix)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    A,
    B,
}

/// One matrix of one pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatrixRef {
    pub pair: usize,
    pub role: Role,
}

impl MatrixRef {
    /// Position in [`LoraSet::params_mut`].
    pub fn param_index(self) -> usize {
        self.pair * 2 + usize::from(self.role == Role::B)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub target: Target,
    /// `[r × cols]`
    pub a: Tensor,
    /// `[rows × r]`
    pub b: Tensor,
}

impl LoraPair {
    pub fn delta(&self) -> Tensor {
        self.b.matmul(&self.a).expect("pair shapes are fixed at attach")
    }
}

/// Adapters for the current task plus the merged history of earlier tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraSet {
    num_blocks: usize,
    /// `(rows, cols)` of every target weight, indexed by target.
    shapes: Vec<(usize, usize)>,
    history: Vec<Option<Tensor>>,
    task: u32,
    rank: usize,
    grouping: Grouping,
    pairs: Vec<LoraPair>,
    groups: Vec<Vec<MatrixRef>>,
}

/// Tape handles of a bound [`LoraSet`].
#[derive(Debug, Clone)]
pub struct LoraVars {
    /// `(A, B)` per pair.
    pub pairs: Vec<(Var, Var)>,
    deltas: Vec<Option<Var>>,
}

impl LoraVars {
    pub fn delta(&self, block: usize, linear: FfnLinear) -> Option<Var> {
        self.deltas
            .get(Target { block, linear }.index())
            .copied()
            .flatten()
    }

    fn var(&self, m: MatrixRef) -> Var {
        let (a, b) = self.pairs[m.pair];
        match m.role {
            Role::A => a,
            Role::B => b,
        }
    }
}

impl LoraSet {
    /// An empty set (no current adapters, empty history) shaped for `model`.
    pub fn new(model: &TransformerClassifier) -> Self {
        let c = model.config();
        let (d, h) = (c.model_dim, c.ffn_hidden_dim);
        Self {
            num_blocks: c.num_blocks,
            shapes: (0..c.num_blocks).flat_map(|_| [(d, h), (h, d)]).collect(),
            history: vec![None; 2 * c.num_blocks],
            task: 0,
            rank: 0,
            grouping: Grouping::Block,
            pairs: Vec::new(),
            groups: Vec::new(),
        }
    }

    /// Fresh set with adapters for task 1.
    pub fn attach(model: &TransformerClassifier, rank: usize, grouping: Grouping, rng: &mut Rng) -> Result<Self> {
        let mut set = Self::new(model);
        set.attach_task(1, rank, grouping, rng)?;
        Ok(set)
    }

    /// Adds trainable adapters for `task`: `A ~ N(0, 0.02²)`, `B = 0`.
    pub fn attach_task(&mut self, task: u32, rank: usize, grouping: Grouping, rng: &mut Rng) -> Result<()> {
        if !self.pairs.is_empty() {
            return Err(Error::validation("current adapters must be merged before attaching new ones"));
        }
        if rank == 0 {
            return Err(Error::validation("LoRA rank must be at least 1"));
        }
        let limit = self.shapes.iter().map(|&(r, c)| r.min(c)).min().unwrap_or(0);
        if rank >= limit {
            return Err(Error::validation(format!(
                "LoRA rank {rank} is not low-rank for weights with min dimension {limit}"
            )));
        }
        let mut pairs = Vec::with_capacity(self.shapes.len());
        for block in 0..self.num_blocks {
            for linear in [FfnLinear::Up, FfnLinear::Down] {
                let target = Target { block, linear };
                let (rows, cols) = self.shapes[target.index()];
                let a = Tensor::randn(&[rank, cols], LORA_INIT_STD, rng).with_grad();
                let b = Tensor::zeros(&[rows, rank]).with_grad();
                pairs.push(LoraPair { target, a, b });
            }
        }
        self.pairs = pairs;
        self.task = task;
        self.rank = rank;
        self.grouping = grouping;
        self.groups = build_groups(self.num_blocks, grouping);
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn task(&self) -> u32 {
        self.task
    }

    pub fn grouping(&self) -> Grouping {
        self.grouping
    }

    pub fn pairs(&self) -> &[LoraPair] {
        &self.pairs
    }

    pub fn pairs_mut(&mut self) -> &mut [LoraPair] {
        &mut self.pairs
    }

    pub fn groups(&self) -> &[Vec<MatrixRef>] {
        &self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn history(&self, target: Target) -> Option<&Tensor> {
        self.history.get(target.index()).and_then(Option::as_ref)
    }

    /// Trainable parameter count of the current task.
    pub fn num_params(&self) -> usize {
        self.pairs.iter().map(|p| p.a.numel() + p.b.numel()).sum()
    }

    /// `[A_0, B_0, A_1, B_1, ...]`, matching [`MatrixRef::param_index`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.pairs
            .iter_mut()
            .flat_map(|p| [&mut p.a, &mut p.b])
            .collect()
    }

    pub fn matrix(&self, m: MatrixRef) -> &Tensor {
        let p = &self.pairs[m.pair];
        match m.role {
            Role::A => &p.a,
            Role::B => &p.b,
        }
    }

    fn matrix_mut(&mut self, m: MatrixRef) -> &mut Tensor {
        let p = &mut self.pairs[m.pair];
        match m.role {
            Role::A => &mut p.a,
            Role::B => &mut p.b,
        }
    }

    fn check_target(&self, target: Target) -> Result<()> {
        if target.block >= self.num_blocks {
            return Err(Error::Lookup {
                kind: "LoRA target",
                name: format!("block{}.{}", target.block, target.linear.name()),
            });
        }
        Ok(())
    }

    /// `H + B_t A_t` for one target, or `None` if both are absent.
    pub fn delta(&self, target: Target) -> Result<Option<Tensor>> {
        self.check_target(target)?;
        let current = self.pairs.iter().find(|p| p.target == target).map(LoraPair::delta);
        Ok(match (self.history(target), current) {
            (Some(h), Some(c)) => Some(h.add(&c)?),
            (Some(h), None) => Some(h.clone()),
            (None, c) => c,
        })
    }

    /// `base + H + B_t A_t`.
    pub fn effective_weight(&self, base: &Tensor, target: Target) -> Result<Tensor> {
        let (rows, cols) = self.shapes.get(target.index()).copied().unwrap_or((0, 0));
        self.check_target(target)?;
        if base.shape() != [rows, cols] {
            return Err(Error::Dimension {
                op: "effective_weight",
                left: base.shape().to_vec(),
                right: vec![rows, cols],
            });
        }
        match self.delta(target)? {
            Some(d) => base.add(&d),
            None => Ok(base.clone()),
        }
    }

    /// Folds the current adapters into the history and drops them.
    pub fn merge(&mut self) {
        for pair in std::mem::take(&mut self.pairs) {
            let i = pair.target.index();
            let delta = pair.delta();
            self.history[i] = Some(match self.history[i].take() {
                Some(h) => h.add(&delta).expect("history shape matches target"),
                None => delta,
            });
        }
        self.groups.clear();
    }

    /// Registers the adapters on the tape. Deltas are recorded as
    /// `H + B·A` so that evaluation and the post-merge history agree bitwise.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> Result<LoraVars> {
        let pairs: Vec<(Var, Var)> = self
            .pairs
            .iter()
            .map(|p| {
                if track {
                    (tape.leaf(&p.a), tape.leaf(&p.b))
                } else {
                    (tape.constant(p.a.clone()), tape.constant(p.b.clone()))
                }
            })
            .collect();
        self.bind_vars(tape, pairs)
    }

    /// Like [`bind`](Self::bind) but with `(A, B)` handles the caller already
    /// put on the tape, in pair order.
    pub fn bind_vars(&self, tape: &mut Tape, pairs: Vec<(Var, Var)>) -> Result<LoraVars> {
        if pairs.len() != self.pairs.len() {
            return Err(Error::validation(format!(
                "expected {} adapter pairs, got {}",
                self.pairs.len(),
                pairs.len()
            )));
        }
        let mut deltas: Vec<Option<Var>> = self
            .history
            .iter()
            .map(|h| h.as_ref().map(|h| tape.constant(h.clone())))
            .collect();
        for (pair, &(a, b)) in self.pairs.iter().zip(&pairs) {
            let ba = tape.matmul(b, a)?;
            let slot = &mut deltas[pair.target.index()];
            *slot = Some(match *slot {
                Some(h) => tape.add(h, ba)?,
                None => ba,
            });
        }
        Ok(LoraVars { pairs, deltas })
    }

    /// Per-group `sqrt(Σ‖B‖²) + sqrt(Σ‖A‖²)` over the group's members.
    pub fn group_norms(&self) -> Vec<f64> {
        self.groups
            .iter()
            .map(|g| {
                let (mut sa, mut sb) = (0.0, 0.0);
                for &m in g {
                    let s: f64 = self.matrix(m).data().iter().map(|v| v * v).sum();
                    match m.role {
                        Role::A => sa += s,
                        Role::B => sb += s,
                    }
                }
                sb.sqrt() + sa.sqrt()
            })
            .collect()
    }

    /// Fraction of groups with norm at most `eps`; 0 when no adapters are attached.
    pub fn zero_group_ratio(&self, eps: f64) -> f64 {
        let norms = self.group_norms();
        if norms.is_empty() {
            return 0.0;
        }
        norms.iter().filter(|&&n| n <= eps).count() as f64 / norms.len() as f64
    }

    /// Sum of group norms recorded on the tape.
    pub fn structure_loss(&self, tape: &mut Tape, vars: &LoraVars) -> Result<Var> {
        let mut total = tape.constant(Tensor::scalar(0.0));
        for g in &self.groups {
            for role in [Role::B, Role::A] {
                let members: Vec<Var> = g.iter().filter(|m| m.role == role).map(|&m| vars.var(m)).collect();
                if members.is_empty() {
                    continue;
                }
                let n = tape.group_norm(&members);
                total = tape.add(total, n)?;
            }
        }
        Ok(total)
    }

    /// Group soft-thresholding: every group is scaled by `max(0, 1 − λ/‖g‖)`.
    /// Returns the indices of groups that are exactly zero afterwards.
    pub fn prox_step(&mut self, lambda: f64) -> Vec<usize> {
        let norms = self.group_norms();
        let mut zeroed = Vec::new();
        for (gi, &norm) in norms.iter().enumerate() {
            let members = self.groups[gi].clone();
            if norm <= lambda {
                for m in members {
                    self.matrix_mut(m).data_mut().fill(0.0);
                }
                zeroed.push(gi);
            } else if lambda > 0.0 {
                let s = 1.0 - lambda / norm;
                for m in members {
                    self.matrix_mut(m).data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        zeroed
    }

    /// Checkpoint tensors: current pairs and history, with names encoding
    /// task, block, target and role.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, h) in self.history.iter().enumerate() {
            if let Some(h) = h {
                out.push((history_name(i), h.clone()));
            }
        }
        for p in &self.pairs {
            let base = pair_name(self.task, p.target);
            let mut a = p.a.clone();
            a.set_requires_grad(false);
            let mut b = p.b.clone();
            b.set_requires_grad(false);
            out.push((format!("{base}.A"), a));
            out.push((format!("{base}.B"), b));
        }
        out
    }

    /// Inverse of [`LoraSet::named_tensors`].
    pub fn from_named(model: &TransformerClassifier, tensors: &[(String, Tensor)], grouping: Grouping) -> Result<Self> {
        let mut set = Self::new(model);
        for i in 0..set.history.len() {
            if let Some((_, t)) = tensors.iter().find(|(n, _)| *n == history_name(i)) {
                set.expect_shape(t, set.shapes[i].0, set.shapes[i].1)?;
                set.history[i] = Some(t.clone());
            }
        }
        let mut task = None;
        let mut pairs = Vec::new();
        for (name, _) in tensors {
            if name.starts_with("lora.history.") {
                continue;
            }
            let Some(t) = parse_task(name) else {
                return Err(Error::Lookup {
                    kind: "LoRA tensor",
                    name: name.clone(),
                });
            };
            if task.is_some_and(|x| x != t) {
                return Err(Error::validation("LoRA checkpoint mixes current adapters of several tasks"));
            }
            task = Some(t);
        }
        if let Some(t) = task {
            for block in 0..set.num_blocks {
                for linear in [FfnLinear::Up, FfnLinear::Down] {
                    let target = Target { block, linear };
                    let base = pair_name(t, target);
                    let find = |suffix: &str| {
                        let name = format!("{base}.{suffix}");
                        tensors
                            .iter()
                            .find(|(n, _)| *n == name)
                            .map(|(_, t)| t.clone())
                            .ok_or(Error::Lookup {
                                kind: "LoRA tensor",
                                name,
                            })
                    };
                    let (a, b) = (find("A")?, find("B")?);
                    let (rows, cols) = set.shapes[target.index()];
                    let rank = a.shape()[0];
                    set.expect_shape(&a, rank, cols)?;
                    set.expect_shape(&b, rows, rank)?;
                    pairs.push(LoraPair {
                        target,
                        a: a.with_grad(),
                        b: b.with_grad(),
                    });
                }
            }
            set.rank = pairs[0].a.shape()[0];
            set.task = t;
            set.grouping = grouping;
            set.groups = build_groups(set.num_blocks, grouping);
            set.pairs = pairs;
        }
        Ok(set)
    }

    fn expect_shape(&self, t: &Tensor, rows: usize, cols: usize) -> Result<()> {
        if t.shape() != [rows, cols] {
            return Err(Error::Dimension {
                op: "load LoRA",
                left: t.shape().to_vec(),
                right: vec![rows, cols],
            });
        }
        Ok(())
    }
}

fn build_groups(num_blocks: usize, grouping: Grouping) -> Vec<Vec<MatrixRef>> {
    let pair_refs = |pair| [MatrixRef { pair, role: Role::A }, MatrixRef { pair, role: Role::B }];
    match grouping {
        Grouping::Block => (0..num_blocks)
            .map(|b| pair_refs(2 * b).into_iter().chain(pair_refs(2 * b + 1)).collect())
            .collect(),
        Grouping::Module => (0..2 * num_blocks).map(|p| pair_refs(p).to_vec()).collect(),
        Grouping::Matrix => (0..2 * num_blocks)
            .flat_map(pair_refs)
            .map(|m| vec![m])
            .collect(),
    }
}

fn history_name(target_index: usize) -> String {
    let linear = if target_index % 2 == 0 { FfnLinear::Up } else { FfnLinear::Down };
    format!("lora.history.block{}.{}", target_index / 2, linear.name())
}

fn pair_name(task: u32, target: Target) -> String {
    format!("lora.task{task}.block{}.{}", target.block, target.linear.name())
}

fn parse_task(name: &str) -> Option<u32> {
    name.strip_prefix("lora.task")?.split('.').next()?.parse().ok()
}
