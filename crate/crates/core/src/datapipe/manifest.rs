//! Dataset manifest CSV and the curation filters.

use super::chip::{LabelSource, Split};
use crate::error::{Error, Result};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

pub const DEFAULT_MIN_FLOOD_RATIO: f64 = 0.05;
pub const MAX_DATE_GAP_DAYS: i64 = 1;

/// One row of the manifest.
///
/// `label_source` is an optional seventh CSV column; rows without it are hand-labeled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub location: String,
    pub s1_date: String,
    pub s2_date: String,
    pub split: Split,
    pub flood_ratio: f64,
    #[serde(default, skip_serializing_if = "is_hand")]
    pub label_source: LabelSource,
}

fn is_hand(s: &LabelSource) -> bool {
    *s == LabelSource::Hand
}

pub fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
        .map_err(|e| Error::Data(format!("unparsable date {s:?}: {e}")))
}

impl ManifestRecord {
    /// Absolute day gap between the two acquisitions.
    pub fn date_gap_days(&self) -> Result<i64> {
        Ok((parse_date(&self.s1_date)? - parse_date(&self.s2_date)?)
            .num_days()
            .abs())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// Directory that relative chip paths are resolved against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn from_csv_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| Error::Data(format!("manifest header: {e}")))?
            .clone();
        let expected = [
            "path",
            "location",
            "s1_date",
            "s2_date",
            "split",
            "flood_ratio",
        ];
        let got: Vec<&str> = headers.iter().collect();
        let extra_ok = got.len() == 7 && got[6] == "label_source";
        if got.len() < 6 || got[..6] != expected || (got.len() > 6 && !extra_ok) {
            return Err(Error::Data(format!(
                "manifest header must be {}, found {}",
                expected.join(","),
                got.join(",")
            )));
        }
        let mut records = Vec::new();
        for (i, row) in reader.deserialize::<ManifestRecord>().enumerate() {
            let rec = row.map_err(|e| Error::Data(format!("manifest row {}: {e}", i + 1)))?;
            if !(0.0..=1.0).contains(&rec.flood_ratio) {
                return Err(Error::Data(format!(
                    "manifest row {}: flood_ratio {} outside [0, 1]",
                    i + 1,
                    rec.flood_ratio
                )));
            }
            records.push(rec);
        }
        Ok(Manifest {
            records,
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let with_source = self
            .records
            .iter()
            .any(|r| r.label_source != LabelSource::Hand);
        let mut header = vec![
            "path",
            "location",
            "s1_date",
            "s2_date",
            "split",
            "flood_ratio",
        ];
        if with_source {
            header.push("label_source");
        }
        w.write_record(&header).expect("in-memory write");
        for r in &self.records {
            let ratio = r.flood_ratio.to_string();
            let mut row = vec![
                r.path.as_str(),
                &r.location,
                &r.s1_date,
                &r.s2_date,
                r.split.as_str(),
                &ratio,
            ];
            if with_source {
                row.push(r.label_source.as_str());
            }
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Manifest::from_csv_str(&text, base)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        let p = Path::new(&record.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }
}

/// Keeps records whose S1 and S2 acquisitions are at most one day apart.
pub fn filter_temporal(records: Vec<ManifestRecord>) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        if r.date_gap_days()? <= MAX_DATE_GAP_DAYS {
            out.push(r);
        }
    }
    Ok(out)
}

pub fn filter_hand_labeled(records: Vec<ManifestRecord>) -> Vec<ManifestRecord> {
    records
        .into_iter()
        .filter(|r| r.label_source == LabelSource::Hand)
        .collect()
}

/// Keeps records with `flood_ratio >= min_ratio`.
pub fn filter_flood_ratio(records: Vec<ManifestRecord>, min_ratio: f64) -> Vec<ManifestRecord> {
    records
        .into_iter()
        .filter(|r| r.flood_ratio >= min_ratio)
        .collect()
}

/// Temporal, then hand-label, then flood-ratio filtering.
pub fn curate(records: Vec<ManifestRecord>, min_ratio: f64) -> Result<Vec<ManifestRecord>> {
    let r = filter_temporal(records)?;
    let r = filter_hand_labeled(r);
    Ok(filter_flood_ratio(r, min_ratio))
}

pub fn split_counts(records: &[ManifestRecord]) -> BTreeMap<Split, usize> {
    let mut m = BTreeMap::new();
    for r in records {
        *m.entry(r.split).or_insert(0) += 1;
    }
    m
}

/// True when no test location also appears in train or val.
pub fn test_locations_disjoint(records: &[ManifestRecord]) -> bool {
    let fit: BTreeSet<&str> = records
        .iter()
        .filter(|r| r.split != Split::Test)
        .map(|r| r.location.as_str())
        .collect();
    records
        .iter()
        .filter(|r| r.split == Split::Test)
        .all(|r| !fit.contains(r.location.as_str()))
}
