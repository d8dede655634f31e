//! Chip container and its binary file format.
//!
//! ```text
//! "SFXC" | u32 version | u32 len | JSON ChipMeta
//! f32 planes: VV, VH, B2, B3, B4, B5, B6, B7, B8, B8A, B11, B12 (each H·W, row-major)
//! i8 labels (H·W)
//! ```

use crate::error::{Error, Result};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

pub const CHIP_MAGIC: &[u8; 4] = b"SFXC";
pub const CHIP_VERSION: u32 = 1;

pub const NO_DATA: i8 = -1;
pub const NON_FLOOD: i8 = 0;
pub const FLOOD: i8 = 1;

pub const S1_BANDS: [&str; 2] = ["VV", "VH"];
pub const S2_BANDS: [&str; 10] = [
    "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B11", "B12",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|sp| sp.as_str() == s.trim())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Who produced the labels of a chip.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    #[default]
    Hand,
    Weak,
}

impl LabelSource {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelSource::Hand => "hand",
            LabelSource::Weak => "weak",
        }
    }

    pub fn parse(s: &str) -> Option<LabelSource> {
        match s.trim() {
            "hand" => Some(LabelSource::Hand),
            "weak" => Some(LabelSource::Weak),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChipMeta {
    pub id: String,
    pub location: String,
    pub s1_date: NaiveDate,
    pub s2_date: NaiveDate,
    pub split: Split,
    #[serde(default)]
    pub label_source: LabelSource,
    pub width: usize,
    pub height: usize,
}

/// One co-registered S1/S2 patch with per-pixel flood labels.
///
/// Bands are stored planar: `s1[b * H * W + y * W + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Chip {
    pub meta: ChipMeta,
    pub s1: Vec<f32>,
    pub s2: Vec<f32>,
    pub labels: Vec<i8>,
}

impl Chip {
    pub fn new(meta: ChipMeta, s1: Vec<f32>, s2: Vec<f32>, labels: Vec<i8>) -> Result<Self> {
        let chip = Chip {
            meta,
            s1,
            s2,
            labels,
        };
        chip.validate()?;
        Ok(chip)
    }

    pub fn n_pixels(&self) -> usize {
        self.meta.width * self.meta.height
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_pixels();
        let id = &self.meta.id;
        if self.s1.len() != S1_BANDS.len() * n
            || self.s2.len() != S2_BANDS.len() * n
            || self.labels.len() != n
        {
            return Err(Error::Data(format!(
                "chip {id}: plane sizes do not match {}x{}",
                self.meta.width, self.meta.height
            )));
        }
        if let Some(l) = self.labels.iter().find(|l| !(-1..=1).contains(*l)) {
            return Err(Error::Data(format!(
                "chip {id}: label {l} outside {{-1, 0, 1}}"
            )));
        }
        if self.s1.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("chip {id}: non-finite S1 value")));
        }
        if self.s2.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Data(format!(
                "chip {id}: S2 reflectance must be finite and >= 0"
            )));
        }
        Ok(())
    }

    pub fn s1_band(&self, b: usize) -> &[f32] {
        let n = self.n_pixels();
        &self.s1[b * n..(b + 1) * n]
    }

    pub fn s2_band(&self, b: usize) -> &[f32] {
        let n = self.n_pixels();
        &self.s2[b * n..(b + 1) * n]
    }

    /// Flood pixels over labeled pixels; 0 when nothing is labeled.
    pub fn flood_ratio(&self) -> f64 {
        let flood = self.labels.iter().filter(|&&l| l == FLOOD).count();
        let valid = self.labels.iter().filter(|&&l| l != NO_DATA).count();
        if valid == 0 {
            0.0
        } else {
            flood as f64 / valid as f64
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        let mut buf = Vec::with_capacity(
            12 + meta.len() + 4 * (self.s1.len() + self.s2.len()) + self.labels.len(),
        );
        buf.extend_from_slice(CHIP_MAGIC);
        buf.extend_from_slice(&CHIP_VERSION.to_le_bytes());
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta);
        for v in self.s1.iter().chain(&self.s2) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend(self.labels.iter().map(|l| *l as u8));
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("chip file: {m}"));
        if bytes.len() < 12 || &bytes[..4] != CHIP_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHIP_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes
            .get(12..12 + len)
            .ok_or_else(|| bad("truncated header"))?;
        let meta: ChipMeta = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let n = meta
            .width
            .checked_mul(meta.height)
            .ok_or_else(|| bad("chip dimensions overflow"))?;
        let n_f32 = (S1_BANDS.len() + S2_BANDS.len()) * n;
        let rest = &bytes[12 + len..];
        if rest.len() != 4 * n_f32 + n {
            return Err(bad(&format!(
                "expected {} payload bytes, found {}",
                4 * n_f32 + n,
                rest.len()
            )));
        }
        let floats: Vec<f32> = rest[..4 * n_f32]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels = rest[4 * n_f32..].iter().map(|b| *b as i8).collect();
        let s2 = floats[S1_BANDS.len() * n..].to_vec();
        let mut s1 = floats;
        s1.truncate(S1_BANDS.len() * n);
        Chip::new(meta, s1, s2, labels)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Chip::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_chip(labels: Vec<i8>) -> Chip {
        let n = labels.len();
        let meta = ChipMeta {
            id: "c0".into(),
            location: "here".into(),
            s1_date: NaiveDate::from_ymd_opt(2018, 9, 18).unwrap(),
            s2_date: NaiveDate::from_ymd_opt(2018, 9, 19).unwrap(),
            split: Split::Train,
            label_source: LabelSource::Hand,
            width: n,
            height: 1,
        };
        let s1 = (0..2 * n).map(|i| -10.0 - i as f32 * 0.25).collect();
        let s2 = (0..10 * n).map(|i| 0.01 * (i % 37) as f32).collect();
        Chip::new(meta, s1, s2, labels).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let chip = tiny_chip(vec![1, 0, -1, 1, 0]);
        let bytes = chip.encode();
        assert_eq!(&bytes[..4], b"SFXC");
        let back = Chip::decode(&bytes).unwrap();
        assert_eq!(back, chip);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn invariants_enforced() {
        let chip = tiny_chip(vec![1, 0]);
        let mut bad = chip.clone();
        bad.labels[0] = 2;
        assert!(bad.validate().is_err());
        let mut neg = chip.clone();
        neg.s2[3] = -0.1;
        assert!(neg.validate().is_err());
        let bytes = chip.encode();
        assert!(Chip::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn flood_ratio_ignores_no_data() {
        let mut labels = vec![0i8; 93];
        labels.extend([1; 7]);
        labels.extend([-1; 50]);
        assert!((tiny_chip(labels).flood_ratio() - 0.07).abs() < 1e-15);
        assert_eq!(tiny_chip(vec![-1, -1]).flood_ratio(), 0.0);
    }
}
