//! Chips, manifests, curation filters, pixel extraction and the synthetic generator.

pub mod chip;
pub mod manifest;
pub mod synth;

pub use chip::{Chip, ChipMeta, LabelSource, Split, FLOOD, NON_FLOOD, NO_DATA, S1_BANDS, S2_BANDS};
pub use manifest::{
    curate, filter_flood_ratio, filter_hand_labeled, filter_temporal, split_counts,
    test_locations_disjoint, Manifest, ManifestRecord, DEFAULT_MIN_FLOOD_RATIO,
};
pub use synth::{synth_generate, SynthChip, SynthConfig};

use crate::error::{Error, Result};
use crate::tokenizer::{compute_ndvi, normalize, ChannelGroup, NormStats, PixelSample};
use chrono::Datelike;
use rayon::prelude::*;

/// S2 band indices (into [`S2_BANDS`]) of each optical group.
const S2_GROUPS: [(ChannelGroup, &[usize]); 4] = [
    (ChannelGroup::S2Rgb, &[0, 1, 2]),
    (ChannelGroup::S2RedEdge, &[3, 4, 5]),
    (ChannelGroup::S2Nir, &[6, 7]),
    (ChannelGroup::S2Swir, &[8, 9]),
];
const B4: usize = 2;
const B8: usize = 6;

/// One sample per pixel in row-major order, labels passed through unchanged.
///
/// NDVI comes from B8 and B4; the month comes from the S2 acquisition date.
pub fn extract_pixels(chip: &Chip) -> Result<Vec<(PixelSample, i8)>> {
    let month = chip.meta.s2_date.month0() as u8;
    let n = chip.n_pixels();
    let s1: Vec<&[f32]> = (0..S1_BANDS.len()).map(|b| chip.s1_band(b)).collect();
    let s2: Vec<&[f32]> = (0..S2_BANDS.len()).map(|b| chip.s2_band(b)).collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = PixelSample::new(month)?;
        s.set(ChannelGroup::S1, &[s1[0][i] as f64, s1[1][i] as f64])?;
        for (g, bands) in S2_GROUPS {
            let vals: Vec<f64> = bands.iter().map(|&b| s2[b][i] as f64).collect();
            s.set(g, &vals)?;
        }
        s.set(
            ChannelGroup::Ndvi,
            &[compute_ndvi(s2[B8][i] as f64, s2[B4][i] as f64)?],
        )?;
        out.push((s, chip.labels[i]));
    }
    Ok(out)
}

/// Flattened pixels of many chips with their labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PixelDataset {
    pub samples: Vec<PixelSample>,
    pub labels: Vec<i8>,
}

impl PixelDataset {
    pub fn from_chips(chips: &[Chip]) -> Result<Self> {
        let parts = chips
            .par_iter()
            .map(extract_pixels)
            .collect::<Result<Vec<_>>>()?;
        let mut ds = PixelDataset::default();
        for (s, l) in parts.into_iter().flatten() {
            ds.samples.push(s);
            ds.labels.push(l);
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count_label(&self, label: i8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn normalized(&self, stats: &NormStats) -> Result<Self> {
        Ok(PixelDataset {
            samples: self
                .samples
                .par_iter()
                .map(|s| normalize(s, stats))
                .collect::<Result<Vec<_>>>()?,
            labels: self.labels.clone(),
        })
    }
}

/// Reads every chip of `split`, in manifest order.
pub fn load_split(manifest: &Manifest, split: Split) -> Result<Vec<Chip>> {
    let records = manifest.split(split);
    records
        .par_iter()
        .map(|r| {
            let chip = Chip::read(&manifest.resolve(r))?;
            if chip.meta.split != split {
                return Err(Error::Data(format!(
                    "chip {} is marked {} but listed under {}",
                    r.path, chip.meta.split, split
                )));
            }
            Ok(chip)
        })
        .collect()
}
