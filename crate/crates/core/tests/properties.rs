use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sensorflex::datapipe::{
    curate, extract_pixels, filter_flood_ratio, filter_hand_labeled, filter_temporal, Chip,
    ChipMeta, LabelSource, ManifestRecord, Split,
};
use sensorflex::encoder::{pixel_feature, ModelConfig, ModelParams};
use sensorflex::evaluator::{miou, precision_recall_f1, ConfusionCounts};
use sensorflex::gradcheck::random_pixel;
use sensorflex::head::{classify, focal_loss, FloodLabel, FocalLossConfig};
use sensorflex::nn::{softmax_in_place, uniform, LayerNorm};
use sensorflex::tensor::{matmul, Tensor};
use sensorflex::tokenizer::{
    denormalize, normalize, tokenize, ChannelGroup, EncodingTable, GroupSet, NormStats,
};
use sensorflex::trainer::shuffle_batches;
use std::sync::OnceLock;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_groups(r: &mut ChaCha8Rng) -> Vec<ChannelGroup> {
    let mut gs: Vec<ChannelGroup> = ChannelGroup::ALL
        .into_iter()
        .filter(|_| r.gen_bool(0.6))
        .collect();
    if gs.is_empty() {
        gs.push(ChannelGroup::S1);
    }
    gs
}

fn random_mask(r: &mut ChaCha8Rng) -> GroupSet {
    ChannelGroup::ALL
        .into_iter()
        .filter(|_| r.gen_bool(0.4))
        .collect()
}

fn small_model() -> &'static ModelParams {
    static M: OnceLock<ModelParams> = OnceLock::new();
    M.get_or_init(|| {
        ModelParams::init(&ModelConfig {
            d_model: 32,
            n_heads: 4,
            seed: 5,
            ..Default::default()
        })
        .unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_identity_and_associativity(seed in any::<u64>(), n in 1usize..7, k in 1usize..7, m in 1usize..7, p in 1usize..5) {
        let mut r = rng(seed);
        let a = uniform(&[n, k], 2.0, &mut r);
        let b = uniform(&[k, m], 2.0, &mut r);
        let c = uniform(&[m, p], 2.0, &mut r);
        let mut eye = Tensor::zeros(&[k, k]);
        for i in 0..k {
            eye.row_mut(i)[i] = 1.0;
        }
        prop_assert_eq!(matmul(&a, &eye).unwrap(), a.clone());
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        for (x, y) in left.data().iter().zip(right.data()) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(row in prop::collection::vec(-30.0f64..30.0, 1..20)) {
        let mut r = row.clone();
        softmax_in_place(&mut r);
        prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // The largest entry may round to exactly 1; nothing underflows over this range.
        prop_assert!(r.iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn layer_norm_ignores_row_shift(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut r = rng(seed);
        let x = uniform(&[3, 8], 4.0, &mut r);
        let mut shifted = x.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += shift);
        let ln = LayerNorm::new(8, 1e-5);
        let (a, _) = ln.forward(&x).unwrap();
        let (b, _) = ln.forward(&shifted).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((u - v).abs() < 1e-8);
        }
    }

    #[test]
    fn surviving_tokens_ignore_other_masks(seed in any::<u64>()) {
        let mut r = rng(seed);
        let table = &small_model().encodings;
        let groups = random_groups(&mut r);
        let px = random_pixel(&mut r, &groups);
        let full = tokenize(&px, GroupSet::EMPTY, table).unwrap();
        let mask = random_mask(&mut r);
        if let Ok(part) = tokenize(&px, mask, table) {
            for (t, g) in part.groups.iter().enumerate() {
                prop_assert!(!mask.contains(*g));
                let j = full.groups.iter().position(|h| h == g).unwrap();
                prop_assert_eq!(part.tokens.row(t), full.tokens.row(j));
            }
        } else {
            prop_assert!(px.present().difference(mask).is_empty());
        }
    }

    #[test]
    fn features_are_finite_on_normalized_range(seed in any::<u64>()) {
        let mut r = rng(seed);
        let model = small_model();
        let groups = random_groups(&mut r);
        let mut px = random_pixel(&mut r, &groups);
        for g in px.present().iter() {
            if g == ChannelGroup::DynamicWorld || g == ChannelGroup::Ndvi {
                continue;
            }
            let vals: Vec<f64> = (0..g.channel_count()).map(|_| r.gen_range(-10.0..10.0)).collect();
            px.set(g, &vals).unwrap();
        }
        let seq = tokenize(&px, GroupSet::EMPTY, &model.encodings).unwrap();
        let offsets = [0, seq.groups.len()];
        let (enc, _) = model.encode(&seq.tokens, &offsets).unwrap();
        prop_assert!(pixel_feature(&enc).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn focal_loss_nonnegative_and_monotone(p1 in 1e-6f64..1.0, p2 in 1e-6f64..1.0, gamma in 0.0f64..5.0, flood: bool) {
        let cfg = FocalLossConfig { gamma, alpha: None };
        let (lo, hi) = if p1 < p2 { (p1, p2) } else { (p2, p1) };
        // p_t rises with prob for flood, falls for non-flood.
        let (easy, hard) = if flood { (hi, lo) } else { (lo, hi) };
        prop_assert!(focal_loss(lo, flood, &cfg) >= 0.0);
        prop_assert!(focal_loss(easy, flood, &cfg) <= focal_loss(hard, flood, &cfg) + 1e-15);
    }

    #[test]
    fn probability_threshold_equals_logit_sign(z in -40.0f64..40.0) {
        let p = sensorflex::nn::sigmoid(z);
        prop_assert_eq!(classify(p, 0.5) == FloodLabel::Flood, z >= 0.0);
    }

    #[test]
    fn confusion_invariants(preds in prop::collection::vec(any::<bool>(), 1..300), raw in prop::collection::vec(-1i8..=1, 300)) {
        let labels = &raw[..preds.len()];
        let p: Vec<FloodLabel> = preds.iter().map(|&f| if f { FloodLabel::Flood } else { FloodLabel::NonFlood }).collect();
        let c = ConfusionCounts::from_pairs(&p, labels);
        prop_assert_eq!(c.total() as usize, labels.iter().filter(|&&l| l != -1).count());
        let flipped: Vec<FloodLabel> = preds.iter().map(|&f| if f { FloodLabel::NonFlood } else { FloodLabel::Flood }).collect();
        let f = ConfusionCounts::from_pairs(&flipped, labels);
        prop_assert_eq!((f.n_tp, f.n_fn, f.n_tn, f.n_fp), (c.n_fn, c.n_tp, c.n_fp, c.n_tn));
        let (pr, rc, f1) = precision_recall_f1(&c);
        for v in [pr, rc, f1, miou(&c)] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if pr + rc > 0.0 {
            prop_assert!((f1 - 2.0 * pr * rc / (pr + rc)).abs() < 1e-12);
            prop_assert!(f1 >= pr.min(rc) - 1e-12 && f1 <= pr.max(rc) + 1e-12);
        }
    }

    #[test]
    fn shuffled_batches_partition_indices(n in 0usize..300, bs in 1usize..64, seed: u64, epoch in 0u64..50) {
        let batches = shuffle_batches(n, bs, seed, epoch);
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= bs));
        prop_assert_eq!(batches.len(), n.div_ceil(bs));
        let mut all = batches.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn filter_order_does_not_matter(rows in prop::collection::vec((0i64..4, 0.0f64..0.2, any::<bool>()), 0..30)) {
        let records: Vec<ManifestRecord> = rows
            .iter()
            .enumerate()
            .map(|(i, (gap, ratio, hand))| ManifestRecord {
                path: format!("c{i}.sfxc"),
                location: format!("loc{}", i % 3),
                s1_date: "2020-03-10".into(),
                s2_date: (chrono::NaiveDate::from_ymd_opt(2020, 3, 10).unwrap() + chrono::Days::new(*gap as u64)).to_string(),
                split: Split::Train,
                flood_ratio: *ratio,
                label_source: if *hand { LabelSource::Hand } else { LabelSource::Weak },
            })
            .collect();
        let reference = curate(records.clone(), 0.05).unwrap();
        let a = filter_temporal(filter_flood_ratio(filter_hand_labeled(records.clone()), 0.05)).unwrap();
        let b = filter_hand_labeled(filter_temporal(filter_flood_ratio(records, 0.05)).unwrap());
        prop_assert_eq!(&a, &reference);
        prop_assert_eq!(&b, &reference);
    }

    #[test]
    fn chip_roundtrip_and_pixel_count(seed: u64, w in 1usize..24, h in 1usize..24) {
        let mut r = rng(seed);
        let n = w * h;
        let meta = ChipMeta {
            id: "p".into(),
            location: "somewhere".into(),
            s1_date: chrono::NaiveDate::from_ymd_opt(2018, 2, 15).unwrap(),
            s2_date: chrono::NaiveDate::from_ymd_opt(2018, 2, 15).unwrap(),
            split: Split::Val,
            label_source: LabelSource::Hand,
            width: w,
            height: h,
        };
        let s1 = (0..2 * n).map(|_| r.gen_range(-30.0f32..5.0)).collect();
        let s2 = (0..10 * n).map(|_| r.gen_range(0.0f32..1.0)).collect();
        let labels = (0..n).map(|_| r.gen_range(-1i8..=1)).collect();
        let chip = Chip::new(meta, s1, s2, labels).unwrap();
        let back = Chip::decode(&chip.encode()).unwrap();
        prop_assert_eq!(&back, &chip);
        prop_assert_eq!(back.encode(), chip.encode());
        prop_assert_eq!(extract_pixels(&chip).unwrap().len(), n);
    }

    #[test]
    fn normalization_roundtrips(seed: u64) {
        let mut r = rng(seed);
        let pixels: Vec<_> = (0..40).map(|_| random_pixel(&mut r, &ChannelGroup::ALL)).collect();
        let stats = NormStats::compute(&pixels);
        let back = NormStats::from_json(&stats.to_json()).unwrap();
        prop_assert_eq!(&back, &stats);
        for px in &pixels {
            let there = normalize(px, &stats).unwrap();
            let again = denormalize(&there, &stats).unwrap();
            for g in px.present().iter() {
                for (a, b) in px.get(g).unwrap().iter().zip(again.get(g).unwrap()) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn pos_and_month_tables_are_deterministic() {
    let a = EncodingTable::init(16, &mut rng(1));
    let b = EncodingTable::init(16, &mut rng(99));
    assert_eq!(a.pos_encoding, b.pos_encoding);
    assert_eq!(a.month_encoding, b.month_encoding);
    assert_ne!(a.groups, b.groups);
}
