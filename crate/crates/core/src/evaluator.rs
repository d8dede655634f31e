//! Confusion counts, segmentation metrics, and the sensor-availability scenarios.

use crate::datapipe::{extract_pixels, Chip, NO_DATA};
use crate::encoder::ModelParams;
use crate::error::{Error, Result};
use crate::head::{classify, FloodLabel};
use crate::nn::sigmoid;
use crate::tokenizer::{normalize, ChannelGroup, GroupSet, NormStats, PixelSample, TokenBatch};
use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::ops::{Add, AddAssign};
use std::path::Path;

/// Pixels per forward pass. Fixed so results never depend on the worker count.
pub const PIXEL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub n_tp: u64,
    pub n_fp: u64,
    pub n_tn: u64,
    pub n_fn: u64,
}

impl ConfusionCounts {
    /// Scores one pixel; flood is the positive class and no-data labels are ignored.
    pub fn accumulate(&mut self, pred: FloodLabel, label: i8) {
        match (pred, label) {
            (FloodLabel::Flood, 1) => self.n_tp += 1,
            (FloodLabel::Flood, 0) => self.n_fp += 1,
            (FloodLabel::NonFlood, 0) => self.n_tn += 1,
            (FloodLabel::NonFlood, 1) => self.n_fn += 1,
            _ => {}
        }
    }

    pub fn from_pairs(preds: &[FloodLabel], labels: &[i8]) -> Self {
        let mut c = ConfusionCounts::default();
        for (p, l) in preds.iter().zip(labels) {
            c.accumulate(*p, *l);
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.n_tp + self.n_fp + self.n_tn + self.n_fn
    }
}

impl Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            n_tp: self.n_tp + o.n_tp,
            n_fp: self.n_fp + o.n_fp,
            n_tn: self.n_tn + o.n_tn,
            n_fn: self.n_fn + o.n_fn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: ConfusionCounts) {
        *self = *self + o;
    }
}

fn ratio(num: u64, den: u64, what: &str) -> f64 {
    if den == 0 {
        warn!("{what} has a zero denominator; reporting 0");
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Mean of the flood and non-flood IoU.
pub fn miou(c: &ConfusionCounts) -> f64 {
    let flood = ratio(c.n_tp, c.n_tp + c.n_fp + c.n_fn, "flood IoU");
    let dry = ratio(c.n_tn, c.n_tn + c.n_fp + c.n_fn, "non-flood IoU");
    0.5 * (flood + dry)
}

/// `(precision, recall, f1)` of the flood class.
pub fn precision_recall_f1(c: &ConfusionCounts) -> (f64, f64, f64) {
    let precision = ratio(c.n_tp, c.n_tp + c.n_fp, "precision");
    let recall = ratio(c.n_tp, c.n_tp + c.n_fn, "recall");
    let f1 = ratio(2 * c.n_tp, 2 * c.n_tp + c.n_fp + c.n_fn, "F1");
    (precision, recall, f1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub miou: f64,
}

impl Metrics {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        let (precision, recall, f1) = precision_recall_f1(c);
        Metrics {
            precision,
            recall,
            f1,
            miou: miou(c),
        }
    }
}

/// Which sensors are available at inference time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "SAR_only")]
    SarOnly,
    #[serde(rename = "MS_only")]
    MsOnly,
    #[serde(rename = "MS_SAR")]
    MsSar,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::SarOnly, Scenario::MsOnly, Scenario::MsSar];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::SarOnly => "SAR_only",
            Scenario::MsOnly => "MS_only",
            Scenario::MsSar => "MS_SAR",
        }
    }

    /// Short name used on the command line and in report file names.
    pub fn short_name(self) -> &'static str {
        match self {
            Scenario::SarOnly => "sar",
            Scenario::MsOnly => "ms",
            Scenario::MsSar => "fused",
        }
    }

    pub fn parse(s: &str) -> Option<Scenario> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.short_name().eq_ignore_ascii_case(s) || sc.name().eq_ignore_ascii_case(s))
    }

    pub fn masked_groups(self) -> GroupSet {
        match self {
            Scenario::SarOnly => [
                ChannelGroup::S2Rgb,
                ChannelGroup::S2RedEdge,
                ChannelGroup::S2Nir,
                ChannelGroup::S2Swir,
                ChannelGroup::Ndvi,
            ]
            .into_iter()
            .collect(),
            Scenario::MsOnly => [ChannelGroup::S1].into_iter().collect(),
            Scenario::MsSar => GroupSet::EMPTY,
        }
    }

    /// Observed channels left after masking.
    pub fn n_bands(self) -> usize {
        GroupSet::observed()
            .difference(self.masked_groups())
            .iter()
            .map(|g| g.channel_count())
            .sum()
    }
}

pub const N_BANDS_COMMENT: &str =
    "n_bands counts NDVI as a channel (S1 VV/VH = 2, ten S2 bands + NDVI = 11, all = 13); counting NDVI separately gives 2/10/12";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: Scenario,
    pub n_bands: usize,
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
    pub comment: String,
}

impl ScenarioReport {
    pub fn new(scenario: Scenario, counts: ConfusionCounts) -> Self {
        let m = Metrics::from_counts(&counts);
        ScenarioReport {
            scenario,
            n_bands: scenario.n_bands(),
            miou: m.miou,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            counts,
            comment: N_BANDS_COMMENT.to_string(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Flood logits for every sample, computed in fixed-size chunks in parallel.
pub fn pixel_logits(
    model: &ModelParams,
    samples: &[PixelSample],
    mask: GroupSet,
) -> Result<Vec<f64>> {
    let parts = samples
        .par_chunks(PIXEL_CHUNK)
        .map(|chunk| {
            let batch = TokenBatch::build(chunk, mask, &model.encodings)?;
            model.logits(&batch)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

/// Per-pixel predictions of one chip.
#[derive(Clone, Debug, PartialEq)]
pub struct ChipPrediction {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub probs: Vec<f64>,
    pub preds: Vec<FloodLabel>,
    pub labels: Vec<i8>,
}

impl ChipPrediction {
    pub fn counts(&self) -> ConfusionCounts {
        ConfusionCounts::from_pairs(&self.preds, &self.labels)
    }

    /// Flood blue, non-flood white, no-data gray.
    pub fn render(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            if self.labels[i] == NO_DATA {
                image::Rgb([128, 128, 128])
            } else if self.preds[i].is_flood() {
                image::Rgb([0, 0, 255])
            } else {
                image::Rgb([255, 255, 255])
            }
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.render().save(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Internal(format!("encoding {}: {other}", path.display())),
        })
    }
}

/// Predicts every pixel of one chip with `mask` applied.
pub fn predict_chip(
    model: &ModelParams,
    chip: &Chip,
    stats: &NormStats,
    mask: GroupSet,
    threshold: f64,
) -> Result<ChipPrediction> {
    let (samples, labels): (Vec<PixelSample>, Vec<i8>) = extract_pixels(chip)?.into_iter().unzip();
    let samples = samples
        .iter()
        .map(|s| normalize(s, stats))
        .collect::<Result<Vec<_>>>()?;
    let probs: Vec<f64> = pixel_logits(model, &samples, mask)?
        .into_iter()
        .map(sigmoid)
        .collect();
    let preds = probs.iter().map(|p| classify(*p, threshold)).collect();
    Ok(ChipPrediction {
        id: chip.meta.id.clone(),
        width: chip.meta.width,
        height: chip.meta.height,
        probs,
        preds,
        labels,
    })
}

/// Scores `chips` with an optional group mask (`None` masks nothing).
pub fn evaluate(
    model: &ModelParams,
    chips: &[Chip],
    stats: &NormStats,
    mask: Option<GroupSet>,
    threshold: f64,
) -> Result<(ConfusionCounts, Vec<ChipPrediction>)> {
    if chips.is_empty() {
        return Err(Error::EmptyInput("no chips to evaluate".into()));
    }
    let mask = mask.unwrap_or(GroupSet::EMPTY);
    let mut counts = ConfusionCounts::default();
    let mut preds = Vec::with_capacity(chips.len());
    for chip in chips {
        let p = predict_chip(model, chip, stats, mask, threshold)?;
        counts += p.counts();
        preds.push(p);
    }
    Ok((counts, preds))
}

pub fn evaluate_scenario(
    model: &ModelParams,
    chips: &[Chip],
    stats: &NormStats,
    scenario: Scenario,
    threshold: f64,
) -> Result<(ScenarioReport, Vec<ChipPrediction>)> {
    let (counts, preds) = evaluate(
        model,
        chips,
        stats,
        Some(scenario.masked_groups()),
        threshold,
    )?;
    Ok((ScenarioReport::new(scenario, counts), preds))
}
