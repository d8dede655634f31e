use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sensorflex::datapipe::{PixelDataset, FLOOD, NON_FLOOD, NO_DATA};
use sensorflex::encoder::{ModelConfig, ModelParams, Trainability};
use sensorflex::error::Error;
use sensorflex::tokenizer::{ChannelGroup, PixelSample};
use sensorflex::trainer::{batch_gradients, train, LogSplit, Start, TrainConfig, TrainOutcome};
use std::sync::OnceLock;

fn small_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        seed: 3,
        ..Default::default()
    }
}

fn fast_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        batch_size: 100,
        max_epochs: epochs,
        early_stop_patience: epochs,
        seed: 11,
        ..Default::default()
    }
}

/// Fused pixels whose label is the sign of VV + NDVI, with a margin.
fn separable(n: usize, seed: u64) -> PixelDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = PixelDataset::default();
    while data.len() < n {
        let mut s = PixelSample::new(rng.gen_range(0..12)).unwrap();
        for g in ChannelGroup::OBSERVED {
            let vals: Vec<f64> = (0..g.channel_count())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            s.set(g, &vals).unwrap();
        }
        let score = s.get(ChannelGroup::S1).unwrap()[0] + s.get(ChannelGroup::Ndvi).unwrap()[0];
        if score.abs() < 0.2 {
            continue;
        }
        data.samples.push(s);
        data.labels
            .push(if score > 0.0 { FLOOD } else { NON_FLOOD });
    }
    data
}

fn datasets() -> &'static (PixelDataset, PixelDataset) {
    static D: OnceLock<(PixelDataset, PixelDataset)> = OnceLock::new();
    D.get_or_init(|| (separable(1000, 1), separable(300, 2)))
}

fn fifty_epochs() -> &'static TrainOutcome {
    static O: OnceLock<TrainOutcome> = OnceLock::new();
    O.get_or_init(|| {
        let (tr, va) = datasets();
        train(tr, va, &small_model(), &fast_train(50), Start::Fresh).unwrap()
    })
}

fn train_rows(o: &TrainOutcome) -> Vec<(usize, f64, f64)> {
    o.log
        .iter()
        .filter(|r| r.split == LogSplit::Train)
        .map(|r| (r.epoch, r.loss, r.f1))
        .collect()
}

#[test]
fn separable_set_is_learned() {
    let rows = train_rows(fifty_epochs());
    assert_eq!(rows.len(), 50);
    let best = rows.iter().map(|r| r.2).fold(0.0, f64::max);
    assert!(best > 0.99, "best train F1 {best}");
}

#[test]
fn loss_decreases_after_warmup() {
    let rows = train_rows(fifty_epochs());
    let violations = rows
        .windows(2)
        .filter(|w| w[0].0 >= 5 && w[1].1 > w[0].1 + 1e-3)
        .count();
    assert!(
        violations <= 2,
        "{violations} non-monotone epochs: {rows:?}"
    );
}

#[test]
fn frozen_and_reserved_tensors_keep_their_init() {
    let o = fifty_epochs();
    let init = ModelParams::init(&small_model()).unwrap();
    let roles = init.trainability();
    let mut checked = 0;
    for (((name, a), (_, b)), role) in init
        .named_tensors()
        .into_iter()
        .zip(o.last.named_tensors())
        .zip(&roles)
    {
        let untouched = match role {
            Trainability::Frozen => true,
            Trainability::Group(g) => ChannelGroup::RESERVED.contains(g),
            Trainability::Shared => false,
        };
        if untouched {
            assert_eq!(a, b, "{name} moved");
            checked += 1;
        } else if name.starts_with("blocks") {
            assert_ne!(a, b, "{name} never trained");
        }
    }
    assert!(checked >= 6);
}

#[test]
fn reserved_groups_get_zero_gradient() {
    let (tr, _) = datasets();
    let model = ModelParams::init(&small_model()).unwrap();
    let samples: Vec<&PixelSample> = tr.samples.iter().take(300).collect();
    let labels: Vec<bool> = tr.labels.iter().take(300).map(|&l| l == FLOOD).collect();
    let (grads, _, _) = batch_gradients(&model, &samples, &labels, &Default::default()).unwrap();
    for g in ChannelGroup::RESERVED {
        assert!(!grads.active_groups.contains(g));
    }
    for ((name, t), role) in grads
        .params
        .named_tensors()
        .into_iter()
        .zip(model.trainability())
    {
        if let Trainability::Group(g) = role {
            if ChannelGroup::RESERVED.contains(&g) {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name} has gradient");
            }
        }
    }
}

#[test]
fn same_seed_is_bit_identical() {
    let (tr, va) = datasets();
    let a = train(tr, va, &small_model(), &fast_train(3), Start::Fresh).unwrap();
    let b = train(tr, va, &small_model(), &fast_train(3), Start::Fresh).unwrap();
    assert_eq!(a.last, b.last);
    assert_eq!(a.log, b.log);
    assert_eq!(
        a.log.last().unwrap().loss.to_bits(),
        b.log.last().unwrap().loss.to_bits()
    );
}

#[test]
fn thread_count_does_not_change_results() {
    let (tr, va) = datasets();
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let cfg = TrainConfig {
            batch_size: 600,
            ..fast_train(2)
        };
        pool.install(|| train(tr, va, &small_model(), &cfg, Start::Fresh).unwrap())
    };
    let one = run(1);
    let four = run(4);
    assert_eq!(one.last, four.last);
    assert_eq!(one.log, four.log);
}

#[test]
fn zero_learning_rate_is_identity() {
    let (tr, va) = datasets();
    let cfg = TrainConfig {
        lr: 0.0,
        ..fast_train(2)
    };
    let o = train(tr, va, &small_model(), &cfg, Start::Fresh).unwrap();
    assert_eq!(o.last, ModelParams::init(&small_model()).unwrap());
}

#[test]
fn no_flood_pixels_is_a_config_error() {
    let (tr, va) = datasets();
    let mut dry = tr.clone();
    dry.labels.iter_mut().for_each(|l| {
        if *l == FLOOD {
            *l = NON_FLOOD;
        }
    });
    let err = train(&dry, va, &small_model(), &fast_train(1), Start::Fresh).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn incomplete_training_pixels_are_rejected() {
    let (tr, va) = datasets();
    let mut partial = tr.clone();
    let mut s = PixelSample::new(0).unwrap();
    s.set(ChannelGroup::S1, &[0.5, 0.5]).unwrap();
    partial.samples.push(s);
    partial.labels.push(FLOOD);
    let err = train(&partial, va, &small_model(), &fast_train(1), Start::Fresh).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
}

#[test]
fn empty_sets_are_rejected() {
    let (tr, _) = datasets();
    let err = train(
        tr,
        &PixelDataset::default(),
        &small_model(),
        &fast_train(1),
        Start::Fresh,
    )
    .unwrap_err();
    assert!(matches!(err, Error::EmptyInput(_)), "{err}");
}

#[test]
fn no_data_pixels_do_not_change_training() {
    let (tr, va) = datasets();
    let mut padded = tr.clone();
    for i in 0..50 {
        padded.samples.push(tr.samples[i].clone());
        padded.labels.push(NO_DATA);
    }
    let a = train(tr, va, &small_model(), &fast_train(2), Start::Fresh).unwrap();
    let b = train(&padded, va, &small_model(), &fast_train(2), Start::Fresh).unwrap();
    assert_eq!(a.last, b.last);
}

#[test]
fn resume_continues_epoch_numbering() {
    let (tr, va) = datasets();
    let first = train(tr, va, &small_model(), &fast_train(2), Start::Fresh).unwrap();
    let resumed = train(
        tr,
        va,
        &small_model(),
        &fast_train(2),
        Start::Resume(Box::new(first.best.clone()), first.state()),
    )
    .unwrap();
    let epochs: Vec<usize> = resumed.log.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, [3, 3, 4, 4]);
    assert_eq!(resumed.last_epoch, 4);
}

/// One epoch at the default batch over ~13M pixels. Slow: run with `--ignored`.
#[test]
#[ignore]
fn throughput_smoke_thirteen_million_pixels() {
    let data = separable(13_107_200, 9);
    let cfg = TrainConfig {
        max_epochs: 1,
        ..Default::default()
    };
    train(
        &data,
        &separable(1000, 10),
        &ModelConfig::default(),
        &cfg,
        Start::Fresh,
    )
    .unwrap();
}
