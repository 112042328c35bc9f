//! Acceptance criteria AC-1 .. AC-10 on the ten-class toy problem in
//! `configs/toy.toml`. Every criterion prints one `AC-n PASS|FAIL` line.

use std::io::Write as _;
use std::sync::OnceLock;

use gslora::checkpoint;
use gslora::config::ExperimentConfig;
use gslora::data::{generate_dataset, Splits};
use gslora::engine::{
    baseline_l2, baseline_retrain, mask_head, recovery_probe, task_subsets, Engine, EngineConfig, ForgettingTask,
    ProbeConfig, TaskOutcome,
};
use gslora::lora::{Grouping, LoraSet};
use gslora::metrics::{self, accuracy, h_mean, MetricsRecord};
use gslora::model::{pretrain, ModelConfig, ModelVars, TransformerClassifier};
use gslora::objective::{self, ForgetReduction, ObjectiveConfig};
use gslora::rng::{self, Stream};
use gslora::tensor::{grad_check, Tape, Tensor, Var};

const TOY: &str = include_str!("../../../configs/toy.toml");
const FIRST_TASK: [usize; 2] = [0, 1];

struct Fixture {
    cfg: ExperimentConfig,
    splits: Splits,
    model: TransformerClassifier,
}

struct SingleRun {
    engine: Engine,
    outcome: TaskOutcome,
    csv: Vec<u8>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = ExperimentConfig::from_toml(TOY).unwrap();
        let splits = generate_dataset(&cfg.dataset).unwrap();
        let model = pretrain(
            &cfg.model_config(),
            &splits.train,
            &cfg.pretrain.optimizer(),
            cfg.pretrain.dropout,
            cfg.seed,
        )
        .unwrap();
        Fixture { cfg, splits, model }
    })
}

fn forget_first(config: EngineConfig) -> (Engine, TaskOutcome) {
    let f = fixture();
    let mut engine = Engine::new(f.model.clone(), config).unwrap();
    let outcome = engine.run_task(&f.splits, &ForgettingTask::new(FIRST_TASK.to_vec())).unwrap();
    (engine, outcome)
}

fn csv_bytes(records: &[MetricsRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    metrics::write_csv(&mut out, records).unwrap();
    out
}

/// The default-config run that forgets classes 0 and 1.
fn single() -> &'static SingleRun {
    static S: OnceLock<SingleRun> = OnceLock::new();
    S.get_or_init(|| {
        let (engine, outcome) = forget_first(fixture().cfg.engine_config());
        let csv = csv_bytes(engine.records());
        SingleRun { engine, outcome, csv }
    })
}

fn pre_acc(classes: &[usize]) -> f64 {
    let f = fixture();
    accuracy(&f.model, None, &f.splits.test, classes).unwrap()
}

fn classes_except(skip: &[usize]) -> Vec<usize> {
    (0..fixture().cfg.dataset.num_classes).filter(|k| !skip.contains(k)).collect()
}

/// Prints straight to the process stdout so the line shows even when the
/// harness captures test output, then fails the test if `pass` is false.
fn verdict(id: &str, pass: bool, detail: String) {
    let line = format!("{id} {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "{id} failed: {detail}");
}

// AC-1 -----------------------------------------------------------------------

fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_blocks: 2,
        model_dim: 8,
        num_heads: 2,
        ffn_hidden_dim: 8,
        seq_len: 3,
        input_dim: 5,
        num_classes: 4,
    }
}

/// Full objective through input projection, attention, LoRA-adapted FFN,
/// head, bounded forget loss and the group-norm penalty.
#[allow(clippy::too_many_arguments)]
fn chain_loss(
    tape: &mut Tape,
    vars: &[Var],
    model: &TransformerClassifier,
    set: &LoraSet,
    xr: &Tensor,
    yr: &[usize],
    xf: &Tensor,
    yf: &[usize],
    obj: &ObjectiveConfig,
    alpha: f64,
) -> gslora::Result<Var> {
    let n = model.params().len();
    let mv = ModelVars::from_vars(model, vars[..n].to_vec())?;
    let pairs = vars[n..].chunks(2).map(|c| (c[0], c[1])).collect();
    let lv = set.bind_vars(tape, pairs)?;
    let (r_in, _) = model.input(tape, xr.clone())?;
    let r_logits = model.forward(tape, &mv, r_in, Some(&lv), None)?;
    let (f_in, _) = model.input(tape, xf.clone())?;
    let f_logits = model.forward(tape, &mv, f_in, Some(&lv), None)?;
    let retain = objective::retain_loss(tape, r_logits, yr)?;
    let forget = objective::forget_loss_with(tape, f_logits, yf, obj.bnd, obj.forget_reduction)?;
    let data = objective::data_loss(tape, retain, forget, obj.beta)?;
    let structure = objective::structure_loss(tape, set, &lv)?;
    objective::total_loss(tape, data, structure, alpha)
}

#[test]
fn ac01_gradient_oracle() {
    let start = std::time::Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let config = tiny_config();
        let mut r = rng::stream(seed, Stream::Init);
        let model = TransformerClassifier::init(config.clone(), &mut r).unwrap();
        let mut set = LoraSet::attach(&model, 2, Grouping::Block, &mut r).unwrap();
        for p in set.pairs_mut() {
            let shape = p.b.shape().to_vec();
            p.b = Tensor::randn(&shape, 0.3, &mut r);
        }
        let xr = Tensor::randn(&[3, config.seq_len, config.input_dim], 1.0, &mut r);
        let xf = Tensor::randn(&[2, config.seq_len, config.input_dim], 1.0, &mut r);
        let yr = [0, 2, 3];
        let yf = [1, 1];

        // Place the ceiling one nat above the largest forget-sample loss so
        // every hinge is active and far from its kink.
        let logits = model.logits(&xf, Some(&set)).unwrap();
        let mut t = Tape::new();
        let l = t.constant(logits);
        let ce = t.cross_entropy_per_sample(l, &yf).unwrap();
        let max_ce = t.value(ce).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut obj = ObjectiveConfig::for_classes(config.num_classes);
        obj.bnd = max_ce + 1.0;
        if seed % 2 == 1 {
            obj.forget_reduction = ForgetReduction::Batch;
        }

        let mut inputs: Vec<Tensor> = model.params().into_iter().cloned().collect();
        for p in set.pairs() {
            inputs.push(p.a.clone());
            inputs.push(p.b.clone());
        }
        let err = grad_check(
            |tape, vars| chain_loss(tape, vars, &model, &set, &xr, &yr, &xf, &yf, &obj, 0.05),
            &inputs,
            1e-5,
        )
        .unwrap();
        worst = worst.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "AC-1",
        worst < 1e-4 && secs < 30.0,
        format!("max relative error {worst:.2e} over 20 seeds in {secs:.1}s"),
    );
}

// AC-2 -----------------------------------------------------------------------

#[test]
fn ac02_single_task_forgetting() {
    let f = fixture();
    let pre_all = pre_acc(&classes_except(&[]));
    let retained = classes_except(&FIRST_TASK);
    let pre_r = pre_acc(&retained);
    let run = single();
    let rec = &run.outcome.record;
    let base_same = run.engine.model().fingerprint() == f.model.fingerprint();
    let pass = pre_all >= 95.0 && rec.acc_f <= 5.0 && rec.acc_r >= pre_r - 5.0 && base_same;
    verdict(
        "AC-2",
        pass,
        format!(
            "pretrain {pre_all:.2}, Acc_f {:.2}, Acc_r {:.2} (pretrain on retained {pre_r:.2}), base unchanged {base_same}",
            rec.acc_f, rec.acc_r
        ),
    );
}

// AC-3 -----------------------------------------------------------------------

#[test]
fn ac03_continual_schedule() {
    let f = fixture();
    let mut engine = Engine::new(f.model.clone(), f.cfg.engine_config()).unwrap();
    let records = engine.run_schedule(&f.splits, &f.cfg.tasks).unwrap();
    let mut pass = records.len() == 3;
    let mut detail = Vec::new();
    let mut gone: Vec<usize> = Vec::new();
    for (task, rec) in f.cfg.tasks.iter().zip(&records) {
        gone.extend(&task.forget);
        let pre_r = pre_acc(&classes_except(&gone));
        let acc_o_ok = rec.acc_o.is_none_or(|o| o <= 5.0);
        pass &= rec.acc_f <= 5.0 && acc_o_ok && rec.acc_r >= pre_r - 8.0;
        detail.push(format!(
            "t{}: Acc_r {:.2}/{:.2} Acc_f {:.2} Acc_o {}",
            rec.task,
            rec.acc_r,
            pre_r,
            rec.acc_f,
            rec.acc_o.map_or("-".to_string(), |o| format!("{o:.2}"))
        ));
    }
    pass &= engine.all_forgotten().len() == 6;
    verdict("AC-3", pass, detail.join("; "));
}

// AC-4 -----------------------------------------------------------------------

#[test]
fn ac04_h_mean() {
    let h = h_mean(71.1, 73.8 - 2.0);
    let identity = [1.0, 37.5, 100.0].iter().all(|&x| (h_mean(x, x) - x).abs() < 1e-12);
    let zero = h_mean(71.1, 0.0) == 0.0;
    verdict(
        "AC-4",
        (h - 71.4).abs() <= 0.1 && identity && zero,
        format!("h_mean(71.1, 71.8) = {h:.4}, equal-argument identity {identity}, zero drop gives 0 {zero}"),
    );
}

// AC-5 -----------------------------------------------------------------------

#[test]
fn ac05_baseline_ordering() {
    let f = fixture();
    let retained = classes_except(&FIRST_TASK);
    let gs = single().outcome.record.acc_r;
    let (replay, forget) = task_subsets(
        &f.splits.train,
        &retained,
        &ForgettingTask::new(FIRST_TASK.to_vec()),
        &mut rng::stream(f.cfg.seed, Stream::Sampling),
    )
    .unwrap();
    let retrain = baseline_retrain(&f.cfg.model_config(), &f.splits.train, &replay, &f.cfg.forget, f.cfg.seed).unwrap();
    let retrain_r = accuracy(&retrain, None, &f.splits.test, &retained).unwrap();

    // λ is tuned on a grid: the best retention among settings that forget.
    let mut tuned: Option<(f64, f64, f64)> = None;
    for l2 in [0.0, 1e-5, 3e-5, 1e-4, 3e-4] {
        let m = baseline_l2(&f.model, &f.splits.train, &replay, &forget, &f.cfg.forget, l2, f.cfg.seed).unwrap();
        let acc_r = accuracy(&m, None, &f.splits.test, &retained).unwrap();
        let acc_f = accuracy(&m, None, &f.splits.test, &FIRST_TASK).unwrap();
        if acc_f <= 5.0 && tuned.is_none_or(|(_, best, _)| acc_r > best) {
            tuned = Some((l2, acc_r, acc_f));
        }
    }
    let l2_ok = tuned.is_some_and(|(_, acc_r, _)| gs - acc_r >= 3.0);
    let l2_text = tuned.map_or("no setting forgot".to_string(), |(l, r, a)| {
        format!("L2 (λ={l:e}) Acc_r {r:.2} Acc_f {a:.2}")
    });
    verdict(
        "AC-5",
        gs - retrain_r >= 10.0 && l2_ok,
        format!("GS-LoRA Acc_r {gs:.2}, retrain Acc_r {retrain_r:.2}, {l2_text}"),
    );
}

// AC-6 -----------------------------------------------------------------------

#[test]
fn ac06_sparsity_and_warmup() {
    let f = fixture();
    let base = f.cfg.engine_config();
    let rec = &single().outcome.record;
    let a = rec.zero_group_ratio >= 0.1 && rec.acc_f <= 5.0;

    let mut cold = base.clone();
    cold.objective.warmup_epochs = 0;
    cold.objective.alpha_k = 5.0 * base.objective.alpha_k;
    let cold_rec = forget_first(cold).1.record;
    let pre_f = pre_acc(&FIRST_TASK);
    let b = cold_rec.acc_f >= 0.5 * pre_f;

    let mut plain = base.clone();
    plain.objective.alpha_k = 0.0;
    let plain_rec = forget_first(plain).1.record;
    let c = plain_rec.zero_group_ratio == 0.0;

    verdict(
        "AC-6",
        a && b && c,
        format!(
            "(a) ratio {:.2} Acc_f {:.2}; (b) no warm-up Acc_f {:.2} of pretrain {pre_f:.2}; (c) plain ratio {:.2}",
            rec.zero_group_ratio, rec.acc_f, cold_rec.acc_f, plain_rec.zero_group_ratio
        ),
    );
}

// AC-7 -----------------------------------------------------------------------

#[test]
fn ac07_recovery_probe() {
    let f = fixture();
    let run = single();
    let retained = classes_except(&FIRST_TASK);
    let probe = ProbeConfig {
        epochs: 20,
        lr: 1e-3,
        batch_size: 32,
        seed: f.cfg.seed,
    };
    let all: Vec<usize> = (0..f.splits.train.len()).collect();
    let gs = recovery_probe(
        run.engine.model(),
        Some(run.engine.lora()),
        None,
        &f.splits,
        &all,
        &FIRST_TASK,
        &retained,
        &probe,
    )
    .unwrap();
    let feats = f.model.pooled_features(&f.splits.train, &all, None).unwrap();
    let head = mask_head(&f.model, &feats, &FIRST_TASK).unwrap();
    let control = recovery_probe(&f.model, None, Some(head), &f.splits, &all, &FIRST_TASK, &retained, &probe).unwrap();
    let pre_f = pre_acc(&FIRST_TASK);
    let gs_end = gs.last().unwrap().acc_f;
    let control_end = control.last().unwrap().acc_f;
    let curve = |c: &[gslora::engine::RecoveryPoint]| {
        c.iter().step_by(4).map(|p| format!("{:.0}", p.acc_f)).collect::<Vec<_>>().join("/")
    };
    verdict(
        "AC-7",
        control_end >= 0.8 * pre_f && gs_end <= control_end - 30.0,
        format!(
            "after 20 epochs control Acc_f {control_end:.2} (pretrain {pre_f:.2}), GS-LoRA Acc_f {gs_end:.2}; \
             curves every 4 epochs control {} GS-LoRA {}",
            curve(&control),
            curve(&gs)
        ),
    );
}

// AC-8 -----------------------------------------------------------------------

#[test]
fn ac08_parameter_efficiency() {
    let f = fixture();
    let retained = classes_except(&FIRST_TASK);
    let pre_r = pre_acc(&retained);
    let ranks = [2usize, 4, 8, 16];
    let ratios: Vec<f64> = ranks
        .iter()
        .map(|&r| {
            let set = LoraSet::attach(&f.model, r, Grouping::Block, &mut rng::stream(0, Stream::LoraInit(1))).unwrap();
            metrics::tunable_ratio(&f.model, &set)
        })
        .collect();
    let monotone = ratios.windows(2).all(|w| w[0] < w[1]);
    let mut detail = vec![format!("ratios {ratios:.4?}")];
    let mut forgets = true;
    for &r in &ranks[1..] {
        let rec = if r == f.cfg.lora.rank {
            single().outcome.record.clone()
        } else {
            let mut c = f.cfg.engine_config();
            c.rank = r;
            forget_first(c).1.record
        };
        forgets &= rec.acc_f <= 5.0 && rec.acc_r >= pre_r - 5.0;
        detail.push(format!("rank {r}: Acc_f {:.2} Acc_r {:.2}", rec.acc_f, rec.acc_r));
    }
    verdict("AC-8", monotone && ratios[2] < 0.02 && forgets, detail.join("; "));
}

// AC-9 -----------------------------------------------------------------------

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn ac09_merge_and_attach_identities() {
    let f = fixture();
    let c = f.model.config();
    let mut r = rng::stream(99, Stream::Sampling);
    let x = Tensor::randn(&[100, c.seq_len, c.input_dim], f.cfg.dataset.noise_sigma, &mut r);

    let plain = f.model.logits(&x, None).unwrap();
    let fresh = LoraSet::attach(&f.model, 8, Grouping::Block, &mut r).unwrap();
    let attach_diff = max_abs_diff(&plain, &f.model.logits(&x, Some(&fresh)).unwrap());

    let run = single();
    let before = run.engine.model().logits(&x, Some(&run.outcome.adapters)).unwrap();
    let after = run.engine.model().logits(&x, Some(run.engine.lora())).unwrap();
    let merge_diff = max_abs_diff(&before, &after);

    let mut random = LoraSet::attach(&f.model, 4, Grouping::Matrix, &mut r).unwrap();
    for p in random.pairs_mut() {
        let shape = p.b.shape().to_vec();
        p.b = Tensor::randn(&shape, 0.5, &mut r);
    }
    let pre = f.model.logits(&x, Some(&random)).unwrap();
    random.merge();
    let random_diff = max_abs_diff(&pre, &f.model.logits(&x, Some(&random)).unwrap());

    verdict(
        "AC-9",
        attach_diff == 0.0 && merge_diff == 0.0 && random_diff == 0.0,
        format!("fresh attach {attach_diff:e}, trained merge {merge_diff:e}, random merge {random_diff:e}"),
    );
}

// AC-10 ----------------------------------------------------------------------

#[test]
fn ac10_determinism_and_io() {
    let f = fixture();
    let (again, _) = forget_first(f.cfg.engine_config());
    let identical = csv_bytes(again.records()) == single().csv;

    let mut tensors = f.model.named_tensors();
    tensors.extend(single().engine.lora().named_tensors());
    let bytes = checkpoint::encode(&tensors).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.gslf");
    checkpoint::save_checkpoint(&path, &tensors).unwrap();
    let loaded = checkpoint::load_checkpoint(&path).unwrap();
    let single_precision = loaded.iter().all(|(name, t)| {
        let orig = &tensors.iter().find(|(n, _)| n == name).unwrap().1;
        t.shape() == orig.shape() && t.data().iter().zip(orig.data()).all(|(a, b)| *a == f64::from(*b as f32))
    });
    let lossless = loaded.len() == tensors.len() && single_precision && checkpoint::encode(&loaded).unwrap() == bytes;

    let cuts = [0, 3, 4, 15, 16, 17, bytes.len() / 2, bytes.len() - 1];
    let truncated_rejected = cuts.iter().all(|&n| checkpoint::decode(&bytes[..n]).is_err());

    verdict(
        "AC-10",
        identical && lossless && truncated_rejected,
        format!(
            "bitwise-identical CSV {identical}, lossless round trip {lossless} ({} tensors, {} bytes), truncation rejected {truncated_rejected}",
            loaded.len(),
            bytes.len()
        ),
    );
}
