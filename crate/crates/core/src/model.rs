//! Pre-norm transformer classifier over fixed-length vector sequences.
//!
//! Layout: input projection plus learned positional table, `num_blocks`
//! blocks of (LayerNorm, multi-head self-attention, residual) and
//! (LayerNorm, two-layer ReLU FFN, residual), a final LayerNorm, mean pooling
//! over positions, and a linear classification head. Weights are stored for
//! row-vector inputs, so a linear layer is `x · W + b`.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lora::{FfnLinear, LoraSet, LoraVars};
use crate::optim::{cosine_lr, AdamW, OptimizerConfig};
use crate::rng::{self, Rng, Stream};
use crate::tensor::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const EVAL_CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_hidden_dim: usize,
    pub seq_len: usize,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_blocks", self.num_blocks),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("ffn_hidden_dim", self.ffn_hidden_dim),
            ("seq_len", self.seq_len),
            ("input_dim", self.input_dim),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::validation(format!("{name} must be positive")));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::validation(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// The two fully connected layers of a block's feed-forward network.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    /// `[model_dim, ffn_hidden_dim]`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[ffn_hidden_dim, model_dim]`
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FfnParams {
    /// Untracked `max(0, x W1 + b1) W2 + b2` for a 2-D `x`, with optional
    /// replacement weights for `W1` and `W2`.
    pub fn forward(&self, x: &Tensor, w1: Option<&Tensor>, w2: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w1 = tape.leaf(w1.unwrap_or(&self.w1));
        let b1 = tape.leaf(&self.b1);
        let w2 = tape.leaf(w2.unwrap_or(&self.w2));
        let b2 = tape.leaf(&self.b2);
        let out = ffn_forward(&mut tape, xv, w1, b1, w2, b2)?;
        Ok(tape.to_tensor(out))
    }
}

/// Records `max(0, x W1 + b1) W2 + b2` on the tape.
pub fn ffn_forward(tape: &mut Tape, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = tape.matmul(x, w1)?;
    let h = tape.add_periodic(h, b1)?;
    let h = tape.relu(h);
    let y = tape.matmul(h, w2)?;
    tape.add_periodic(y, b2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub attn: AttentionParams,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerClassifier {
    config: ModelConfig,
    pub input_w: Tensor,
    pub input_b: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<Block>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Tape handles for every model parameter, in [`TransformerClassifier::param_names`] order.
#[derive(Debug, Clone)]
pub struct ModelVars {
    all: Vec<Var>,
}

impl ModelVars {
    /// Wraps handles that are already on the tape, one per parameter in
    /// [`TransformerClassifier::param_names`] order.
    pub fn from_vars(model: &TransformerClassifier, all: Vec<Var>) -> Result<Self> {
        let want = model.params().len();
        if all.len() != want {
            return Err(Error::validation(format!("expected {want} parameter handles, got {}", all.len())));
        }
        Ok(Self { all })
    }

    pub fn all(&self) -> &[Var] {
        &self.all
    }

    pub fn head_w(&self) -> Var {
        self.all[self.all.len() - 2]
    }

    pub fn head_b(&self) -> Var {
        self.all[self.all.len() - 1]
    }
}

const BLOCK_PARAMS: [&str; 16] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo",
    "attn.bo", "ln2.gain", "ln2.bias", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
];
const PRE_BLOCK: usize = 3;

fn linear_init<R: rand::Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

impl TransformerClassifier {
    /// Fresh parameters from the given generator.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d, h, c) = (config.model_dim, config.ffn_hidden_dim, config.num_classes);
        let input_w = linear_init(config.input_dim, d, rng);
        let pos = Tensor::randn(&[config.seq_len, d], 0.02, rng);
        let blocks = (0..config.num_blocks)
            .map(|_| Block {
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                attn: AttentionParams {
                    wq: linear_init(d, d, rng),
                    bq: Tensor::zeros(&[d]),
                    wk: linear_init(d, d, rng),
                    bk: Tensor::zeros(&[d]),
                    wv: linear_init(d, d, rng),
                    bv: Tensor::zeros(&[d]),
                    wo: linear_init(d, d, rng),
                    bo: Tensor::zeros(&[d]),
                },
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                ffn: FfnParams {
                    w1: linear_init(d, h, rng),
                    b1: Tensor::zeros(&[h]),
                    w2: linear_init(h, d, rng),
                    b2: Tensor::zeros(&[d]),
                },
            })
            .collect();
        let head_w = linear_init(d, c, rng);
        let mut model = Self {
            config,
            input_w,
            input_b: Tensor::zeros(&[d]),
            pos,
            blocks,
            final_gain: Tensor::full(&[d], 1.0),
            final_bias: Tensor::zeros(&[d]),
            head_w,
            head_b: Tensor::zeros(&[c]),
        };
        model.set_trainable(true);
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["input.w".to_string(), "input.b".into(), "pos".into()];
        for b in 0..self.blocks.len() {
            names.extend(BLOCK_PARAMS.iter().map(|p| format!("blocks.{b}.{p}")));
        }
        names.extend(["final.gain", "final.bias", "head.w", "head.b"].map(String::from));
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.input_w, &self.input_b, &self.pos];
        for b in &self.blocks {
            let a = &b.attn;
            out.extend([
                &b.ln1_gain, &b.ln1_bias, &a.wq, &a.bq, &a.wk, &a.bk, &a.wv, &a.bv, &a.wo, &a.bo,
                &b.ln2_gain, &b.ln2_bias, &b.ffn.w1, &b.ffn.b1, &b.ffn.w2, &b.ffn.b2,
            ]);
        }
        out.extend([&self.final_gain, &self.final_bias, &self.head_w, &self.head_b]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.input_w, &mut self.input_b, &mut self.pos];
        for b in &mut self.blocks {
            let a = &mut b.attn;
            out.extend([
                &mut b.ln1_gain,
                &mut b.ln1_bias,
                &mut a.wq,
                &mut a.bq,
                &mut a.wk,
                &mut a.bk,
                &mut a.wv,
                &mut a.bv,
                &mut a.wo,
                &mut a.bo,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
                &mut b.ffn.w1,
                &mut b.ffn.b1,
                &mut b.ffn.w2,
                &mut b.ffn.b2,
            ]);
        }
        out.extend([
            &mut self.final_gain,
            &mut self.final_bias,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Marks every parameter trainable or frozen.
    pub fn set_trainable(&mut self, flag: bool) {
        for p in self.params_mut() {
            p.set_requires_grad(flag);
        }
    }

    pub fn set_head_trainable(&mut self, flag: bool) {
        self.head_w.set_requires_grad(flag);
        self.head_b.set_requires_grad(flag);
    }

    /// Rebuilds a model from named tensors (checkpoint order-independent).
    pub fn from_named(config: ModelConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut rng = rng::stream(0, Stream::Init);
        let mut model = Self::init(config, &mut rng)?;
        let names = model.param_names();
        for (name, slot) in names.iter().zip(model.params_mut()) {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Lookup {
                    kind: "model tensor",
                    name: name.clone(),
                })?;
            if t.shape() != slot.shape() {
                return Err(Error::Dimension {
                    op: "load model",
                    left: slot.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok(model)
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.param_names()
            .into_iter()
            .zip(self.params())
            .map(|(n, t)| {
                let mut t = t.clone();
                t.set_requires_grad(false);
                (n, t)
            })
            .collect()
    }

    /// SHA-256 over every parameter's bits, in declaration order.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in self.params() {
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Registers parameters as tape leaves. With `track == false` every leaf
    /// is a constant regardless of the tensors' flags.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> ModelVars {
        let all = self
            .params()
            .into_iter()
            .map(|t| {
                if track {
                    tape.leaf(t)
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        ModelVars { all }
    }

    /// Moves a `[batch, seq_len, input_dim]` input onto the tape as `[batch*seq_len, input_dim]`.
    pub fn input(&self, tape: &mut Tape, batch: Tensor) -> Result<(Var, usize)> {
        let c = &self.config;
        let shape = batch.shape().to_vec();
        if shape.len() != 3 || shape[1] != c.seq_len || shape[2] != c.input_dim {
            return Err(Error::validation(format!(
                "input shape {shape:?} does not match model (seq_len {}, input_dim {})",
                c.seq_len, c.input_dim
            )));
        }
        let b = shape[0];
        let flat = batch.reshape(&[b * c.seq_len, c.input_dim])?;
        Ok((tape.constant(flat), b))
    }

    /// Pooled representation `[batch, model_dim]` feeding the head.
    pub fn features(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        x: Var,
        lora: Option<&LoraVars>,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        let c = &self.config;
        let v = &vars.all;
        let mut h = tape.matmul(x, v[0])?;
        h = tape.add_periodic(h, v[1])?;
        h = tape.add_periodic(h, v[2])?;
        for blk in 0..c.num_blocks {
            let p = &v[PRE_BLOCK + blk * BLOCK_PARAMS.len()..PRE_BLOCK + (blk + 1) * BLOCK_PARAMS.len()];
            let a = tape.layer_norm(h, p[0], p[1], LAYER_NORM_EPS)?;
            let q = linear(tape, a, p[2], p[3])?;
            let k = linear(tape, a, p[4], p[5])?;
            let val = linear(tape, a, p[6], p[7])?;
            let att = tape.attention(q, k, val, c.seq_len, c.num_heads)?;
            let mut o = linear(tape, att, p[8], p[9])?;
            if let Some(d) = dropout.as_deref_mut() {
                o = d.apply(tape, o)?;
            }
            h = tape.add(h, o)?;

            let f = tape.layer_norm(h, p[10], p[11], LAYER_NORM_EPS)?;
            let w1 = effective(tape, p[12], lora.and_then(|l| l.delta(blk, FfnLinear::Up)))?;
            let w2 = effective(tape, p[14], lora.and_then(|l| l.delta(blk, FfnLinear::Down)))?;
            let mut y = ffn_forward(tape, f, w1, p[13], w2, p[15])?;
            if let Some(d) = dropout.as_deref_mut() {
                y = d.apply(tape, y)?;
            }
            h = tape.add(h, y)?;
        }
        let n = v.len();
        let h = tape.layer_norm(h, v[n - 4], v[n - 3], LAYER_NORM_EPS)?;
        tape.mean_pool(h, c.seq_len)
    }

    /// Logits `[batch, num_classes]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        x: Var,
        lora: Option<&LoraVars>,
        dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        let f = self.features(tape, vars, x, lora, dropout)?;
        head(tape, f, vars.head_w(), vars.head_b())
    }

    /// Untracked logits for a `[batch, seq_len, input_dim]` tensor.
    pub fn logits(&self, batch: &Tensor, lora: Option<&LoraSet>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let lv = lora.map(|l| l.bind(&mut tape, false)).transpose()?;
        let (x, _) = self.input(&mut tape, batch.clone())?;
        let out = self.forward(&mut tape, &vars, x, lv.as_ref(), None)?;
        Ok(tape.to_tensor(out))
    }

    /// Untracked pooled features for the selected samples.
    pub fn pooled_features(&self, data: &Dataset, indices: &[usize], lora: Option<&LoraSet>) -> Result<Tensor> {
        let d = self.config.model_dim;
        let mut out = Vec::with_capacity(indices.len() * d);
        for chunk in indices.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, false);
            let lv = lora.map(|l| l.bind(&mut tape, false)).transpose()?;
            let (batch, _) = data.batch(chunk)?;
            let (x, _) = self.input(&mut tape, batch)?;
            let f = self.features(&mut tape, &vars, x, lv.as_ref(), None)?;
            out.extend_from_slice(tape.value(f));
        }
        Tensor::new(vec![indices.len(), d], out)
    }

    /// Argmax predictions (lowest class index wins ties).
    pub fn predict(&self, data: &Dataset, indices: &[usize], lora: Option<&LoraSet>) -> Result<Vec<usize>> {
        self.check_data(data)?;
        let c = self.config.num_classes;
        let mut preds = Vec::with_capacity(indices.len());
        for chunk in indices.chunks(EVAL_CHUNK) {
            let (batch, _) = data.batch(chunk)?;
            let logits = self.logits(&batch, lora)?;
            preds.extend(logits.data().chunks(c).map(argmax));
        }
        Ok(preds)
    }

    pub fn check_data(&self, data: &Dataset) -> Result<()> {
        let c = &self.config;
        if data.seq_len() != c.seq_len || data.input_dim() != c.input_dim || data.num_classes() != c.num_classes {
            return Err(Error::validation(format!(
                "dataset geometry (seq_len {}, input_dim {}, classes {}) does not match model config",
                data.seq_len(),
                data.input_dim(),
                data.num_classes()
            )));
        }
        Ok(())
    }
}

pub fn head(tape: &mut Tape, features: Var, w: Var, b: Var) -> Result<Var> {
    let logits = tape.matmul(features, w)?;
    tape.add_periodic(logits, b)
}

/// Untracked `features · w + b`.
pub fn head_logits(features: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let w = tape.constant(w.clone());
    let b = tape.constant(b.clone());
    let out = head(&mut tape, x, w, b)?;
    Ok(tape.to_tensor(out))
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_periodic(y, b)
}

fn effective(tape: &mut Tape, base: Var, delta: Option<Var>) -> Result<Var> {
    match delta {
        Some(d) => tape.add(base, d),
        None => Ok(base),
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Inverted dropout driven by its own random stream.
#[derive(Debug)]
pub struct Dropout {
    rate: f64,
    rng: Rng,
}

impl Dropout {
    pub fn new(rate: f64, rng: Rng) -> Self {
        Self { rate, rng }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let n = tape.value(x).len();
        let mask = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        tape.mul_const(x, mask)
    }
}

/// Options for [`fit`], the shared supervised loop behind pretraining and
/// the full-parameter baselines.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub dropout: f64,
    /// Anchor values (one per parameter, `params()` order) and penalty weight
    /// for `weight * Σ ||θ - θ₀||²` over trainable parameters.
    pub l2_anchor: Option<(Vec<Tensor>, f64)>,
}

/// Cross-entropy training of every parameter whose `requires_grad` is set.
pub fn fit(
    model: &mut TransformerClassifier,
    data: &Dataset,
    opt: &OptimizerConfig,
    options: &FitOptions,
    sampling: &mut Rng,
    dropout_rng: Rng,
) -> Result<()> {
    opt.validate()?;
    model.check_data(data)?;
    if data.is_empty() || opt.epochs == 0 {
        return Ok(());
    }
    let steps_per_epoch = data.len().div_ceil(opt.batch_size);
    let total = opt.epochs * steps_per_epoch;
    let mut adam = AdamW::new(opt.weight_decay);
    let mut dropout = Dropout::new(options.dropout, dropout_rng);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..opt.epochs {
        order.shuffle(sampling);
        for chunk in order.chunks(opt.batch_size) {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let (batch, labels) = data.batch(chunk)?;
            let (x, _) = model.input(&mut tape, batch)?;
            let logits = model.forward(&mut tape, &vars, x, None, Some(&mut dropout))?;
            let mut loss = tape.cross_entropy(logits, &labels)?;
            if let Some((anchor, weight)) = &options.l2_anchor {
                let mut penalty = None;
                for (&v, a) in vars.all().iter().zip(anchor) {
                    if !tape.requires_grad(v) {
                        continue;
                    }
                    let a = tape.constant(a.clone());
                    let diff = tape.sub(v, a)?;
                    let sq = tape.sum_squares(diff);
                    penalty = Some(match penalty {
                        Some(p) => tape.add(p, sq)?,
                        None => sq,
                    });
                }
                if let Some(p) = penalty {
                    let p = tape.scale(p, *weight);
                    loss = tape.add(loss, p)?;
                }
            }
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: format!("loss is {value}"),
                });
            }
            tape.backward(loss)?;
            for (&v, p) in vars.all().iter().zip(model.params_mut()) {
                if tape.requires_grad(v) {
                    tape.write_grad(v, p)?;
                } else {
                    p.zero_grad();
                }
            }
            let lr = cosine_lr(step, total, opt.lr, opt.min_lr);
            adam.step(&mut model.params_mut(), lr);
            step += 1;
        }
    }
    for p in model.params_mut() {
        p.zero_grad();
    }
    Ok(())
}

/// Trains a fresh classifier on `train`. Deterministic given `seed`.
pub fn pretrain(
    config: &ModelConfig,
    train: &Dataset,
    opt: &OptimizerConfig,
    dropout: f64,
    seed: u64,
) -> Result<TransformerClassifier> {
    let mut model = TransformerClassifier::init(config.clone(), &mut rng::stream(seed, Stream::Init))?;
    model.check_data(train)?;
    let present: std::collections::BTreeSet<usize> = train.labels().iter().copied().collect();
    if present.len() != config.num_classes {
        return Err(Error::validation(format!(
            "pretraining data covers {} of {} classes",
            present.len(),
            config.num_classes
        )));
    }
    let mut sampling = rng::stream(seed, Stream::Sampling);
    fit(
        &mut model,
        train,
        opt,
        &FitOptions {
            dropout,
            l2_anchor: None,
        },
        &mut sampling,
        rng::stream(seed, Stream::Dropout),
    )?;
    model.set_trainable(false);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SyntheticDatasetConfig};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_blocks: 2,
            model_dim: 8,
            num_heads: 2,
            ffn_hidden_dim: 12,
            seq_len: 3,
            input_dim: 5,
            num_classes: 4,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        c.num_heads = 2;
        c.num_blocks = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn ffn_examples() {
        let d = 2;
        let zero = FfnParams {
            w1: Tensor::zeros(&[d, d]),
            b1: Tensor::zeros(&[d]),
            w2: Tensor::zeros(&[d, d]),
            b2: Tensor::zeros(&[d]),
        };
        let x = Tensor::from_rows(&[vec![1.0, -1.0]]);
        assert_eq!(zero.forward(&x, None, None).unwrap().data(), &[0.0, 0.0]);
        let ident = FfnParams {
            w1: Tensor::eye(d),
            w2: Tensor::eye(d),
            ..zero
        };
        let pos = Tensor::from_rows(&[vec![0.5, 2.0]]);
        assert_eq!(ident.forward(&pos, None, None).unwrap().data(), pos.data());
        assert_eq!(ident.forward(&x, None, None).unwrap().data(), &[1.0, 0.0]);
        let bad = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]);
        assert!(matches!(ident.forward(&bad, None, None), Err(Error::Dimension { .. })));
    }

    #[test]
    fn bind_order_matches_params() {
        let m = TransformerClassifier::init(tiny_config(), &mut rng::stream(1, Stream::Init)).unwrap();
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, true);
        assert_eq!(vars.all().len(), m.params().len());
        assert_eq!(m.param_names().len(), m.params().len());
        for (&v, p) in vars.all().iter().zip(m.params()) {
            assert_eq!(tape.value(v), p.data());
        }
        assert_eq!(tape.value(vars.head_w()), m.head_w.data());
    }

    #[test]
    fn identical_rows_identical_logits_and_permutation() {
        let m = TransformerClassifier::init(tiny_config(), &mut rng::stream(2, Stream::Init)).unwrap();
        let mut r = rng::stream(3, Stream::Data);
        let a = Tensor::randn(&[1, 3, 5], 1.0, &mut r);
        let b = Tensor::randn(&[1, 3, 5], 1.0, &mut r);
        let stack = |xs: &[&Tensor]| {
            let data = xs.iter().flat_map(|t| t.data().to_vec()).collect();
            Tensor::new(vec![xs.len(), 3, 5], data).unwrap()
        };
        let l = m.logits(&stack(&[&a, &a, &b]), None).unwrap();
        assert_eq!(&l.data()[0..4], &l.data()[4..8]);
        let p = m.logits(&stack(&[&b, &a, &a]), None).unwrap();
        assert_eq!(&p.data()[0..4], &l.data()[8..12]);
        assert_eq!(&p.data()[4..8], &l.data()[0..4]);
    }

    #[test]
    fn rejects_mismatched_input() {
        let m = TransformerClassifier::init(tiny_config(), &mut rng::stream(2, Stream::Init)).unwrap();
        assert!(matches!(m.logits(&Tensor::zeros(&[2, 4, 5]), None), Err(Error::Validation(_))));
    }

    #[test]
    fn pretrain_is_deterministic_and_learns() {
        let cfg = SyntheticDatasetConfig {
            num_classes: 4,
            train_per_class: 20,
            test_per_class: 10,
            seq_len: 3,
            input_dim: 5,
            noise_sigma: 0.3,
            seed: 4,
        };
        let s = generate_dataset(&cfg).unwrap();
        let opt = OptimizerConfig {
            lr: 1e-2,
            min_lr: 1e-5,
            weight_decay: 0.05,
            batch_size: 16,
            epochs: 15,
        };
        let a = pretrain(&tiny_config(), &s.train, &opt, 0.1, 5).unwrap();
        let b = pretrain(&tiny_config(), &s.train, &opt, 0.1, 5).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let idx: Vec<usize> = (0..s.test.len()).collect();
        let preds = a.predict(&s.test, &idx, None).unwrap();
        let correct = preds.iter().zip(s.test.labels()).filter(|(p, y)| p == y).count();
        assert!(correct as f64 / idx.len() as f64 > 0.9, "{correct}");
        assert!(a.params().iter().all(|p| !p.requires_grad()));
    }

    #[test]
    fn single_class_is_trivially_perfect() {
        let mut cfg = tiny_config();
        cfg.num_classes = 1;
        let mut r = rng::stream(1, Stream::Data);
        let feats: Vec<f32> = (0..6 * 15).map(|_| r.random::<f32>()).collect();
        let data = Dataset::from_parts(3, 5, 1, feats, vec![0; 6]).unwrap();
        let opt = OptimizerConfig {
            lr: 1e-2,
            min_lr: 0.0,
            weight_decay: 0.0,
            batch_size: 4,
            epochs: 1,
        };
        let m = pretrain(&cfg, &data, &opt, 0.0, 1).unwrap();
        let preds = m.predict(&data, &[0, 1, 2, 3, 4, 5], None).unwrap();
        assert!(preds.iter().all(|&p| p == 0));
    }
}
