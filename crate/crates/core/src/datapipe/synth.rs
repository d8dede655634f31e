//! Procedural flood chips with a planted multi-sensor signal.
//!
//! Flood water has low VV/VH backscatter, low NIR/SWIR reflectance and negative
//! NDVI. Non-flood land is vegetation, bare soil, built-up, or a dark smooth
//! surface whose backscatter resembles water but whose optical spectrum does not.
//! Each sensor gets independent noise. Optional clouds replace S2 values with a
//! bright flat spectrum and, with `label_bias`, turn the covered labels into no-data.

use super::chip::{Chip, ChipMeta, LabelSource, Split, FLOOD, NON_FLOOD, NO_DATA, S2_BANDS};
use super::manifest::{Manifest, ManifestRecord};
use crate::error::{Error, Result};
use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_chips: usize,
    pub size: usize,
    pub seed: u64,
    /// Fraction of each chip that is flooded.
    pub flood_frac: f64,
    /// Noise multiplier; 1 is moderate, 0 is noiseless.
    pub noise: f64,
    /// Fraction of each chip under cloud.
    pub cloud_frac: f64,
    /// Mark cloud-covered pixels as no-data.
    pub label_bias: bool,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_chips: 20,
            size: 512,
            seed: 0,
            flood_frac: 0.2,
            noise: 1.0,
            cloud_frac: 0.0,
            label_bias: false,
            val_frac: 0.2,
            test_frac: 0.2,
        }
    }
}

/// Speckle standard deviation in dB at noise 1.
const SAR_SIGMA_DB: f64 = 1.5;
/// Reflectance noise standard deviation at noise 1.
const MS_SIGMA: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    Water,
    Vegetation,
    Soil,
    Urban,
    /// Smooth dry surface: water-like radar return, bright optical spectrum.
    DarkLand,
}

impl Surface {
    /// Mean `(VV, VH)` backscatter in dB.
    fn backscatter(self) -> [f64; 2] {
        match self {
            Surface::Water => [-18.0, -25.0],
            Surface::Vegetation => [-8.0, -14.0],
            Surface::Soil => [-11.0, -18.0],
            Surface::Urban => [-3.0, -10.0],
            Surface::DarkLand => [-16.0, -23.0],
        }
    }

    /// Mean reflectance for B2, B3, B4, B5, B6, B7, B8, B8A, B11, B12.
    fn reflectance(self) -> [f64; 10] {
        match self {
            Surface::Water => [
                0.060, 0.050, 0.040, 0.030, 0.020, 0.018, 0.015, 0.012, 0.008, 0.005,
            ],
            Surface::Vegetation => [
                0.030, 0.060, 0.040, 0.100, 0.250, 0.300, 0.350, 0.360, 0.200, 0.100,
            ],
            Surface::Soil => [
                0.100, 0.130, 0.160, 0.200, 0.220, 0.240, 0.260, 0.270, 0.320, 0.280,
            ],
            Surface::Urban => [
                0.120, 0.130, 0.140, 0.150, 0.160, 0.170, 0.180, 0.180, 0.200, 0.190,
            ],
            Surface::DarkLand => [
                0.180, 0.200, 0.220, 0.240, 0.260, 0.270, 0.290, 0.300, 0.380, 0.340,
            ],
        }
    }
}

/// A generated chip plus the planted truth behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthChip {
    pub chip: Chip,
    /// Planted flood mask, independent of clouds and label bias.
    pub planted: Vec<bool>,
    pub cloud: Vec<bool>,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::Config(format!(
                "chip size {} must be >= 16",
                self.size
            )));
        }
        if self.n_chips == 0 {
            return Err(Error::Config("n_chips must be >= 1".into()));
        }
        for (name, v) in [
            ("flood_frac", self.flood_frac),
            ("cloud_frac", self.cloud_frac),
            ("val_frac", self.val_frac),
            ("test_frac", self.test_frac),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        if self.val_frac + self.test_frac > 1.0 {
            return Err(Error::Config("val_frac + test_frac exceeds 1".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!(
                "noise {} must be finite and >= 0",
                self.noise
            )));
        }
        Ok(())
    }

    /// `(train, val, test)` chip counts.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.n_chips as f64;
        let val = (n * self.val_frac).round() as usize;
        let test = ((n * self.test_frac).round() as usize).min(self.n_chips - val);
        (self.n_chips - val - test, val, test)
    }

    fn split_of(&self, index: usize) -> Split {
        let (train, val, _) = self.split_sizes();
        if index < train {
            Split::Train
        } else if index < train + val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Low-frequency random field: a sum of a few random plane waves.
fn smooth_field(rng: &mut ChaCha8Rng, size: usize, waves: usize) -> Vec<f64> {
    let params: Vec<(f64, f64, f64, f64)> = (0..waves)
        .map(|_| {
            (
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(0.0..TAU),
                rng.gen_range(0.5..1.0),
            )
        })
        .collect();
    let s = size as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let v = params
                .iter()
                .map(|(u, w, ph, a)| a * (TAU * (u * x as f64 + w * y as f64) / s + ph).cos())
                .sum();
            out.push(v);
        }
    }
    out
}

/// Marks the `round(frac · n)` largest values of `field`.
fn top_fraction(field: &[f64], frac: f64) -> Vec<bool> {
    let n = field.len();
    let k = (frac * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
    let mut mask = vec![false; n];
    for &i in &order[..k] {
        mask[i] = true;
    }
    mask
}

/// Per-pixel rank of `field` scaled to `[0, 1)`.
fn ranks(field: &[f64]) -> Vec<f64> {
    let n = field.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| field[a].total_cmp(&field[b]).then(a.cmp(&b)));
    let mut r = vec![0.0; n];
    for (rank, &i) in order.iter().enumerate() {
        r[i] = rank as f64 / n as f64;
    }
    r
}

fn land_class(rank: f64) -> Surface {
    match rank {
        r if r < 0.50 => Surface::Vegetation,
        r if r < 0.75 => Surface::Soil,
        r if r < 0.90 => Surface::Urban,
        _ => Surface::DarkLand,
    }
}

pub fn generate_chip(cfg: &SynthConfig, index: usize) -> Result<SynthChip> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let size = cfg.size;
    let n = size * size;

    let planted = top_fraction(&smooth_field(&mut rng, size, 6), cfg.flood_frac);
    let land = ranks(&smooth_field(&mut rng, size, 8));
    let brightness = smooth_field(&mut rng, size, 4);
    let cloud = top_fraction(&smooth_field(&mut rng, size, 5), cfg.cloud_frac);
    // Per-chip shifts: water turbidity and radar calibration.
    let turbidity: f64 = rng.gen_range(0.0..0.02);
    let calib: f64 = rng.gen_range(-1.0..1.0);

    let mut s1 = vec![0f32; 2 * n];
    let mut s2 = vec![0f32; S2_BANDS.len() * n];
    let mut labels = vec![NON_FLOOD; n];
    for i in 0..n {
        let surface = if planted[i] {
            Surface::Water
        } else {
            land_class(land[i])
        };
        let x = (i % size) as f64 / size as f64;
        for (b, mean) in surface.backscatter().iter().enumerate() {
            let speckle: f64 = rng.sample(StandardNormal);
            let v = mean + calib + 0.8 * (x - 0.5) + cfg.noise * SAR_SIGMA_DB * speckle;
            s1[b * n + i] = v as f32;
        }
        // Common brightness scaling keeps NDVI's sign, so noiseless water stays separable.
        let scale = 1.0 + 0.05 * brightness[i];
        for (b, mean) in surface.reflectance().iter().enumerate() {
            let base = if surface == Surface::Water && b < 3 {
                mean + turbidity
            } else {
                *mean
            };
            let v = if cloud[i] {
                0.45 + 0.02 * b as f64 + cfg.noise * MS_SIGMA * rng.sample::<f64, _>(StandardNormal)
            } else {
                base * scale + cfg.noise * MS_SIGMA * rng.sample::<f64, _>(StandardNormal)
            };
            s2[b * n + i] = v.max(0.0) as f32;
        }
        labels[i] = if cfg.label_bias && cloud[i] {
            NO_DATA
        } else if planted[i] {
            FLOOD
        } else {
            NON_FLOOD
        };
    }

    let split = cfg.split_of(index);
    let location = match split {
        Split::Test => "site-holdout".to_string(),
        _ => format!("site-{}", index % 5),
    };
    // Stepping 5 months per chip visits all 12 months in any 12 consecutive chips.
    let month = (5 * index % 12) as u32 + 1;
    let year = 2019 + (index / 12) as i32;
    let s1_date =
        NaiveDate::from_ymd_opt(year, month, 1 + (index % 27) as u32).expect("valid date");
    let s2_date = s1_date + Days::new((index % 2) as u64);
    let meta = ChipMeta {
        id: format!("chip_{index:04}"),
        location,
        s1_date,
        s2_date,
        split,
        label_source: LabelSource::Hand,
        width: size,
        height: size,
    };
    Ok(SynthChip {
        chip: Chip::new(meta, s1, s2, labels)?,
        planted,
        cloud,
    })
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<SynthChip>> {
    cfg.validate()?;
    (0..cfg.n_chips).map(|i| generate_chip(cfg, i)).collect()
}

/// Writes `chips/<id>.sfxc` and `manifest.csv` under `out`.
pub fn write_dataset(chips: &[Chip], out: &Path) -> Result<Manifest> {
    let dir = out.join("chips");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut records = Vec::with_capacity(chips.len());
    for chip in chips {
        let rel = format!("chips/{}.sfxc", chip.meta.id);
        chip.write(&out.join(&rel))?;
        records.push(ManifestRecord {
            path: rel,
            location: chip.meta.location.clone(),
            s1_date: chip.meta.s1_date.to_string(),
            s2_date: chip.meta.s2_date.to_string(),
            split: chip.meta.split,
            flood_ratio: chip.flood_ratio(),
            label_source: chip.meta.label_source,
        });
    }
    let manifest = Manifest {
        records,
        base_dir: out.to_path_buf(),
    };
    manifest.write(&out.join("manifest.csv"))?;
    Ok(manifest)
}
