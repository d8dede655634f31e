use sensorflex::datapipe::{synth_generate, Chip, PixelDataset, SynthConfig, NO_DATA};
use sensorflex::encoder::{ModelConfig, ModelParams};
use sensorflex::evaluator::{
    evaluate, evaluate_scenario, miou, pixel_logits, ConfusionCounts, Scenario,
};
use sensorflex::head::FloodLabel;
use sensorflex::tokenizer::{normalize, ChannelGroup, GroupSet, NormStats, PixelSample};
use std::sync::OnceLock;

fn chips() -> &'static Vec<sensorflex::datapipe::SynthChip> {
    static C: OnceLock<Vec<sensorflex::datapipe::SynthChip>> = OnceLock::new();
    C.get_or_init(|| {
        let cfg = SynthConfig {
            n_chips: 6,
            size: 24,
            noise: 0.0,
            seed: 4,
            ..Default::default()
        };
        synth_generate(&cfg).unwrap()
    })
}

fn plain_chips() -> Vec<Chip> {
    chips().iter().map(|s| s.chip.clone()).collect()
}

fn model() -> ModelParams {
    ModelParams::init(&ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        seed: 8,
        ..Default::default()
    })
    .unwrap()
}

fn stats(chips: &[Chip]) -> NormStats {
    NormStats::compute(&PixelDataset::from_chips(chips).unwrap().samples)
}

#[test]
fn planted_mask_scores_perfectly() {
    let mut total = ConfusionCounts::default();
    for s in chips() {
        let preds: Vec<FloodLabel> = s
            .planted
            .iter()
            .map(|&f| {
                if f {
                    FloodLabel::Flood
                } else {
                    FloodLabel::NonFlood
                }
            })
            .collect();
        total += ConfusionCounts::from_pairs(&preds, &s.chip.labels);
    }
    assert!(total.n_tp > 0 && total.n_tn > 0);
    assert_eq!((total.n_fp, total.n_fn), (0, 0));
    assert_eq!(miou(&total), 1.0);
}

#[test]
fn ground_truth_against_itself_is_perfect() {
    let mut c = ConfusionCounts::default();
    for s in chips() {
        for &l in &s.chip.labels {
            let p = if l == 1 {
                FloodLabel::Flood
            } else {
                FloodLabel::NonFlood
            };
            c.accumulate(p, l);
        }
    }
    assert_eq!(miou(&c), 1.0);
}

#[test]
fn fused_scenario_equals_no_mask() {
    let cs = plain_chips();
    let st = stats(&cs);
    let m = model();
    let (a, pa) = evaluate(&m, &cs, &st, None, 0.5).unwrap();
    let (b, pb) = evaluate(&m, &cs, &st, Some(GroupSet::EMPTY), 0.5).unwrap();
    let (report, pc) = evaluate_scenario(&m, &cs, &st, Scenario::MsSar, 0.5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, report.counts);
    for ((x, y), z) in pa.iter().zip(&pb).zip(&pc) {
        let bits = |p: &sensorflex::evaluator::ChipPrediction| {
            p.probs.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(x), bits(y));
        assert_eq!(bits(x), bits(z));
    }
}

#[test]
fn masking_equals_removing_the_groups() {
    let cs = plain_chips();
    let st = stats(&cs);
    let m = model();
    let raw = PixelDataset::from_chips(&cs[..2]).unwrap().samples;
    let samples: Vec<PixelSample> = raw.iter().map(|s| normalize(s, &st).unwrap()).collect();
    for sc in Scenario::ALL {
        let masked = pixel_logits(&m, &samples, sc.masked_groups()).unwrap();
        let stripped: Vec<PixelSample> = raw
            .iter()
            .map(|s| {
                let mut t = PixelSample::new(s.month).unwrap();
                for g in s.present().difference(sc.masked_groups()).iter() {
                    t.set(g, s.get(g).unwrap()).unwrap();
                }
                normalize(&t, &st).unwrap()
            })
            .collect();
        let direct = pixel_logits(&m, &stripped, GroupSet::EMPTY).unwrap();
        assert_eq!(masked, direct, "{}", sc.name());
    }
}

#[test]
fn reports_carry_band_counts() {
    let cs = plain_chips();
    let st = stats(&cs);
    let m = model();
    let bands: Vec<usize> = Scenario::ALL
        .into_iter()
        .map(|sc| evaluate_scenario(&m, &cs, &st, sc, 0.5).unwrap().0.n_bands)
        .collect();
    assert_eq!(bands, [2, 11, 13]);
    let (r, _) = evaluate_scenario(&m, &cs, &st, Scenario::SarOnly, 0.5).unwrap();
    let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(json["scenario"], "SAR_only");
    for key in ["miou", "precision", "recall", "f1", "n_bands"] {
        assert!(json.get(key).is_some(), "{key}");
    }
}

#[test]
fn no_data_pixels_are_not_counted() {
    let mut cs = plain_chips();
    let st = stats(&cs);
    let m = model();
    let (before, _) = evaluate(&m, &cs, &st, None, 0.5).unwrap();
    for l in cs[0].labels.iter_mut().take(100) {
        *l = NO_DATA;
    }
    let (after, preds) = evaluate(&m, &cs, &st, None, 0.5).unwrap();
    assert_eq!(after.total() + 100, before.total());
    assert_eq!(preds[0].preds.len(), cs[0].n_pixels());
}

#[test]
fn maps_use_the_legend_colors() {
    let cs = plain_chips();
    let (_, preds) = evaluate(&model(), &cs[..1], &stats(&cs), None, 0.5).unwrap();
    let mut p = preds.into_iter().next().unwrap();
    p.labels[0] = NO_DATA;
    p.preds[1] = FloodLabel::Flood;
    p.preds[2] = FloodLabel::NonFlood;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.png");
    p.save_png(&path).unwrap();
    let img = image::open(&path).unwrap().to_rgb8();
    assert_eq!(
        (img.width() as usize, img.height() as usize),
        (p.width, p.height)
    );
    assert_eq!(img.get_pixel(0, 0).0, [128, 128, 128]);
    assert_eq!(img.get_pixel(1, 0).0, [0, 0, 255]);
    assert_eq!(img.get_pixel(2, 0).0, [255, 255, 255]);
}

#[test]
fn sar_only_sees_only_radar() {
    let g: Vec<ChannelGroup> = GroupSet::observed()
        .difference(Scenario::SarOnly.masked_groups())
        .iter()
        .collect();
    assert_eq!(g, [ChannelGroup::S1]);
}
