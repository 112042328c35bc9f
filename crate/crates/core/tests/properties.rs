//! Randomized invariants across the library.

use proptest::prelude::*;

use gslora::checkpoint;
use gslora::data::{generate_dataset, SyntheticDatasetConfig};
use gslora::lora::{Grouping, LoraSet};
use gslora::metrics::{self, accuracy, h_mean, MetricsRecord};
use gslora::model::{ModelConfig, TransformerClassifier};
use gslora::objective::{self, alpha_schedule};
use gslora::rng::{self, Stream};
use gslora::tensor::{Tape, Tensor};

fn tiny_model(seed: u64) -> TransformerClassifier {
    let config = ModelConfig {
        num_blocks: 2,
        model_dim: 8,
        num_heads: 2,
        ffn_hidden_dim: 6,
        seq_len: 3,
        input_dim: 4,
        num_classes: 5,
    };
    TransformerClassifier::init(config, &mut rng::stream(seed, Stream::Init)).unwrap()
}

/// Adapters with nonzero `B`, scaled so group norms land around `scale`.
fn random_adapters(model: &TransformerClassifier, grouping: Grouping, seed: u64, scale: f64) -> LoraSet {
    let mut r = rng::stream(seed, Stream::Sampling);
    let mut set = LoraSet::attach(model, 2, grouping, &mut r).unwrap();
    for p in set.pairs_mut() {
        let shape = p.b.shape().to_vec();
        p.b = Tensor::randn(&shape, scale, &mut r);
        let shape = p.a.shape().to_vec();
        p.a = Tensor::randn(&shape, scale, &mut r);
    }
    set
}

fn grouping() -> impl Strategy<Value = Grouping> {
    prop_oneof![Just(Grouping::Block), Just(Grouping::Module), Just(Grouping::Matrix)]
}

fn record(task: u32) -> impl Strategy<Value = MetricsRecord> {
    (
        0.0..100.0f64,
        0.0..100.0f64,
        0.0..100.0f64,
        prop::option::of(0.0..100.0f64),
        0.0..1.0f64,
        0.0..0.05f64,
    )
        .prop_map(move |(r, before, f, o, z, t)| MetricsRecord::new(task, r, before, f, o, z, t))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn h_mean_is_symmetric_and_between_its_arguments(a in 0.01..100.0f64, b in 0.01..100.0f64) {
        let h = h_mean(a, b);
        prop_assert!((h - h_mean(b, a)).abs() < 1e-12);
        prop_assert!(h >= a.min(b) - 1e-12 && h <= a.max(b) + 1e-12);
        prop_assert!(h <= 2.0 * a.min(b));
    }

    #[test]
    fn alpha_is_a_step(epoch in 0usize..200, warmup in 0usize..100, alpha_k in 0.0..100.0f64) {
        let a = alpha_schedule(epoch, warmup, alpha_k);
        prop_assert_eq!(a, if epoch < warmup { 0.0 } else { alpha_k });
    }

    #[test]
    fn prox_never_grows_a_group(seed in 0u64..1000, g in grouping(), lambda in 0.0..0.5f64) {
        let model = tiny_model(seed);
        let mut set = random_adapters(&model, g, seed, 0.1);
        let before = set.group_norms();
        let zeroed = set.prox_step(lambda);
        let after = set.group_norms();
        for (i, (b, a)) in before.iter().zip(&after).enumerate() {
            prop_assert!(*a <= *b + 1e-12);
            if *b <= lambda {
                prop_assert_eq!(*a, 0.0);
                prop_assert!(zeroed.contains(&i));
            } else {
                // Soft-thresholding removes exactly λ from the group's norm.
                prop_assert!((b - a - lambda).abs() < 1e-9, "{} {} {}", b, a, lambda);
            }
        }
    }

    #[test]
    fn zero_is_a_fixed_point_of_prox(seed in 0u64..1000, g in grouping(), lambda in 0.0..1.0f64) {
        let model = tiny_model(seed);
        let mut set = random_adapters(&model, g, seed, 0.1);
        set.prox_step(f64::INFINITY);
        prop_assert_eq!(set.zero_group_ratio(0.0), 1.0);
        let snapshot: Vec<_> = set.pairs().to_vec();
        set.prox_step(lambda);
        prop_assert_eq!(set.pairs(), &snapshot[..]);
    }

    #[test]
    fn zero_ratio_is_monotone_in_eps(seed in 0u64..1000, g in grouping(), e1 in 0.0..2.0f64, e2 in 0.0..2.0f64) {
        let model = tiny_model(seed);
        let set = random_adapters(&model, g, seed, 0.05);
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        prop_assert!(set.zero_group_ratio(lo) <= set.zero_group_ratio(hi));
    }

    #[test]
    fn total_loss_decomposes(
        retain in 0.0..10.0f64,
        forget in 0.0..10.0f64,
        structure in 0.0..10.0f64,
        beta in 0.0..1.0f64,
        alpha in 0.0..50.0f64,
    ) {
        let mut t = Tape::new();
        let r = t.constant(Tensor::scalar(retain));
        let f = t.constant(Tensor::scalar(forget));
        let s = t.constant(Tensor::scalar(structure));
        let d = objective::data_loss(&mut t, r, f, beta).unwrap();
        let total = objective::total_loss(&mut t, d, s, alpha).unwrap();
        let expect = objective::combine(retain, forget, structure, beta, alpha);
        prop_assert!((t.scalar(total) - expect).abs() <= 1e-12 * expect.abs().max(1.0));
    }

    #[test]
    fn checkpoint_round_trips(
        shapes in prop::collection::vec(prop::collection::vec(1usize..5, 0..4), 0..6),
        seed in 0u64..1000,
    ) {
        let mut r = rng::stream(seed, Stream::Init);
        let tensors: Vec<(String, Tensor)> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let t = Tensor::randn(s, 3.0, &mut r);
                let data = t.data().iter().map(|&v| f64::from(v as f32)).collect();
                (format!("t{i}"), Tensor::new(s.clone(), data).unwrap())
            })
            .collect();
        let bytes = checkpoint::encode(&tensors).unwrap();
        let back = checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &tensors);
        prop_assert_eq!(checkpoint::encode(&back).unwrap(), bytes.clone());
        if !bytes.is_empty() {
            let cut = (seed as usize) % bytes.len();
            prop_assert!(checkpoint::decode(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn metrics_csv_round_trips(records in (1u32..5).prop_flat_map(|n| {
        (1..=n).map(record).collect::<Vec<_>>()
    })) {
        let mut buf = Vec::new();
        metrics::write_csv(&mut buf, &records).unwrap();
        let back = metrics::read_csv(&buf[..]).unwrap();
        prop_assert_eq!(back.len(), records.len());
        for (a, b) in back.iter().zip(&records) {
            prop_assert_eq!(a.task, b.task);
            prop_assert_eq!(a.acc_o.is_some(), b.acc_o.is_some());
            let pairs = [
                (a.acc_r, b.acc_r),
                (a.acc_f, b.acc_f),
                (a.acc_o.unwrap_or(0.0), b.acc_o.unwrap_or(0.0)),
                (a.drop, b.drop),
                (a.h_mean, b.h_mean),
                (a.zero_group_ratio, b.zero_group_ratio),
                (a.tunable_ratio, b.tunable_ratio),
            ];
            for (x, y) in pairs {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn logits_follow_batch_permutation(seed in 0u64..1000, perm_seed in 0u64..1000) {
        use rand::seq::SliceRandom;
        let model = tiny_model(seed);
        let set = random_adapters(&model, Grouping::Block, seed, 0.2);
        let mut r = rng::stream(perm_seed, Stream::Sampling);
        let n = 6;
        let x = Tensor::randn(&[n, 3, 4], 1.0, &mut r);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let row = 3 * 4;
        let shuffled: Vec<f64> = perm.iter().flat_map(|&i| x.data()[i * row..(i + 1) * row].to_vec()).collect();
        let xp = Tensor::new(vec![n, 3, 4], shuffled).unwrap();
        let l = model.logits(&x, Some(&set)).unwrap();
        let lp = model.logits(&xp, Some(&set)).unwrap();
        let c = 5;
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(&lp.data()[k * c..(k + 1) * c], &l.data()[i * c..(i + 1) * c]);
        }
    }

    #[test]
    fn accuracy_over_a_union_is_count_weighted(seed in 0u64..1000, split in 1usize..4) {
        let splits = generate_dataset(&SyntheticDatasetConfig {
            num_classes: 5,
            train_per_class: 2,
            test_per_class: 7,
            seq_len: 3,
            input_dim: 4,
            noise_sigma: 1.0,
            seed,
        })
        .unwrap();
        let model = tiny_model(seed);
        let all: Vec<usize> = (0..5).collect();
        let (left, right) = all.split_at(split);
        let nl = splits.test.indices_of(left).len() as f64;
        let nr = splits.test.indices_of(right).len() as f64;
        let whole = accuracy(&model, None, &splits.test, &all).unwrap();
        let al = accuracy(&model, None, &splits.test, left).unwrap();
        let ar = accuracy(&model, None, &splits.test, right).unwrap();
        prop_assert!((whole - (nl * al + nr * ar) / (nl + nr)).abs() < 1e-9);
    }
}
