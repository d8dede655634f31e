//! Channel groups, per-pixel samples and the token sequence fed to the encoder.
//!
//! A pixel becomes one token per channel group that is both present and not
//! masked. Each token is the group's linear embedding of its raw values plus
//! three additive encodings: a frozen sinusoidal encoding of the group's
//! canonical slot, a frozen cyclic month encoding, and a learned per-group
//! encoding. Because the slot (not the position in the shrunken sequence)
//! indexes the positional table, masking a group never changes the tokens of
//! the groups that survive.

use crate::error::{Error, Result};
use crate::nn::{join, uniform, Linear, Params};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChannelGroup {
    S1,
    S2Rgb,
    S2RedEdge,
    S2Nir,
    S2Swir,
    Ndvi,
    Era5,
    Topo,
    Location,
    DynamicWorld,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupKind {
    Continuous,
    Categorical,
    Static,
}

/// Number of land-cover classes of the categorical group.
pub const DYNAMIC_WORLD_CLASSES: usize = 9;

/// Total scalar value slots across all groups.
pub const VALUE_SLOTS: usize = 21;

impl ChannelGroup {
    /// Canonical order; a group's index here is its positional slot.
    pub const ALL: [ChannelGroup; 10] = [
        ChannelGroup::S1,
        ChannelGroup::S2Rgb,
        ChannelGroup::S2RedEdge,
        ChannelGroup::S2Nir,
        ChannelGroup::S2Swir,
        ChannelGroup::Ndvi,
        ChannelGroup::Era5,
        ChannelGroup::Topo,
        ChannelGroup::Location,
        ChannelGroup::DynamicWorld,
    ];

    /// The groups populated from Sentinel-1/Sentinel-2 chips.
    pub const OBSERVED: [ChannelGroup; 6] = [
        ChannelGroup::S1,
        ChannelGroup::S2Rgb,
        ChannelGroup::S2RedEdge,
        ChannelGroup::S2Nir,
        ChannelGroup::S2Swir,
        ChannelGroup::Ndvi,
    ];

    /// Groups that exist only so they can be masked; chips never populate them.
    pub const RESERVED: [ChannelGroup; 4] = [
        ChannelGroup::Era5,
        ChannelGroup::Topo,
        ChannelGroup::Location,
        ChannelGroup::DynamicWorld,
    ];

    pub fn slot(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ChannelGroup::S1 => "S1",
            ChannelGroup::S2Rgb => "S2_RGB",
            ChannelGroup::S2RedEdge => "S2_RedEdge",
            ChannelGroup::S2Nir => "S2_NIR",
            ChannelGroup::S2Swir => "S2_SWIR",
            ChannelGroup::Ndvi => "NDVI",
            ChannelGroup::Era5 => "ERA5",
            ChannelGroup::Topo => "TOPO",
            ChannelGroup::Location => "LOCATION",
            ChannelGroup::DynamicWorld => "DYNAMIC_WORLD",
        }
    }

    pub fn channels(self) -> &'static [&'static str] {
        match self {
            ChannelGroup::S1 => &["VV", "VH"],
            ChannelGroup::S2Rgb => &["B2", "B3", "B4"],
            ChannelGroup::S2RedEdge => &["B5", "B6", "B7"],
            ChannelGroup::S2Nir => &["B8", "B8A"],
            ChannelGroup::S2Swir => &["B11", "B12"],
            ChannelGroup::Ndvi => &["NDVI"],
            ChannelGroup::Era5 => &["temperature", "precipitation"],
            ChannelGroup::Topo => &["elevation", "slope"],
            ChannelGroup::Location => &["x", "y", "z"],
            ChannelGroup::DynamicWorld => &["land_cover"],
        }
    }

    pub fn kind(self) -> GroupKind {
        match self {
            ChannelGroup::DynamicWorld => GroupKind::Categorical,
            ChannelGroup::Topo | ChannelGroup::Location => GroupKind::Static,
            _ => GroupKind::Continuous,
        }
    }

    pub fn channel_count(self) -> usize {
        self.channels().len()
    }

    /// Width of the embedding input: channel count, or the one-hot width for categorical groups.
    pub fn input_dim(self) -> usize {
        match self.kind() {
            GroupKind::Categorical => DYNAMIC_WORLD_CLASSES,
            _ => self.channel_count(),
        }
    }

    /// Offset of this group's values inside a [`PixelSample`].
    fn value_offset(self) -> usize {
        ChannelGroup::ALL[..self.slot()]
            .iter()
            .map(|g| g.channel_count())
            .sum()
    }

    pub fn parse(name: &str) -> Option<ChannelGroup> {
        ChannelGroup::ALL
            .into_iter()
            .find(|g| g.name().eq_ignore_ascii_case(name))
    }
}

impl fmt::Display for ChannelGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A set of channel groups.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct GroupSet(u16);

impl GroupSet {
    pub const EMPTY: GroupSet = GroupSet(0);

    pub fn all() -> Self {
        ChannelGroup::ALL.into_iter().collect()
    }

    pub fn observed() -> Self {
        ChannelGroup::OBSERVED.into_iter().collect()
    }

    pub fn contains(self, g: ChannelGroup) -> bool {
        self.0 & (1 << g.slot()) != 0
    }

    pub fn insert(&mut self, g: ChannelGroup) {
        self.0 |= 1 << g.slot();
    }

    pub fn remove(&mut self, g: ChannelGroup) {
        self.0 &= !(1 << g.slot());
    }

    pub fn union(self, other: GroupSet) -> GroupSet {
        GroupSet(self.0 | other.0)
    }

    pub fn difference(self, other: GroupSet) -> GroupSet {
        GroupSet(self.0 & !other.0)
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Members in canonical order.
    pub fn iter(self) -> impl Iterator<Item = ChannelGroup> {
        ChannelGroup::ALL
            .into_iter()
            .filter(move |g| self.contains(*g))
    }
}

impl FromIterator<ChannelGroup> for GroupSet {
    fn from_iter<I: IntoIterator<Item = ChannelGroup>>(iter: I) -> Self {
        let mut s = GroupSet::EMPTY;
        for g in iter {
            s.insert(g);
        }
        s
    }
}

/// One pixel at one timestep: per-group channel values, month, and which groups are present.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelSample {
    values: [f64; VALUE_SLOTS],
    /// Month index, 0 = January.
    pub month: u8,
    present: GroupSet,
}

impl PixelSample {
    pub fn new(month: u8) -> Result<Self> {
        if month > 11 {
            return Err(Error::Data(format!("month index {month} outside 0..=11")));
        }
        Ok(PixelSample {
            values: [0.0; VALUE_SLOTS],
            month,
            present: GroupSet::EMPTY,
        })
    }

    /// Stores a group's values and marks it present.
    pub fn set(&mut self, group: ChannelGroup, values: &[f64]) -> Result<()> {
        if values.len() != group.channel_count() {
            return Err(Error::Data(format!(
                "{group} expects {} values, got {}",
                group.channel_count(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value in {group}")));
        }
        if group == ChannelGroup::Ndvi && !(-1.0..=1.0).contains(&values[0]) {
            return Err(Error::Data(format!("NDVI {} outside [-1, 1]", values[0])));
        }
        if group.kind() == GroupKind::Categorical {
            let c = values[0];
            if c.fract() != 0.0 || c < 0.0 || c >= DYNAMIC_WORLD_CLASSES as f64 {
                return Err(Error::Data(format!(
                    "{group} class {c} is not a valid class index"
                )));
            }
        }
        self.store(group, values);
        Ok(())
    }

    fn store(&mut self, group: ChannelGroup, values: &[f64]) {
        let o = group.value_offset();
        self.values[o..o + values.len()].copy_from_slice(values);
        self.present.insert(group);
    }

    pub fn get(&self, group: ChannelGroup) -> Option<&[f64]> {
        if self.present.contains(group) {
            let o = group.value_offset();
            Some(&self.values[o..o + group.channel_count()])
        } else {
            None
        }
    }

    pub fn present(&self) -> GroupSet {
        self.present
    }

    /// Embedding input for a group: raw values, or a one-hot vector for categorical groups.
    fn embedding_input(&self, group: ChannelGroup, out: &mut Vec<f64>) {
        let v = self.get(group).expect("group present");
        match group.kind() {
            GroupKind::Categorical => {
                let class = v[0] as usize;
                out.extend((0..DYNAMIC_WORLD_CLASSES).map(|c| if c == class { 1.0 } else { 0.0 }));
            }
            _ => out.extend_from_slice(v),
        }
    }
}

/// NDVI, `(b8 - b4) / (b8 + b4)`, with `0/0 = 0`.
pub fn compute_ndvi(b8: f64, b4: f64) -> Result<f64> {
    if b8 < 0.0 || b4 < 0.0 {
        return Err(Error::Data(format!(
            "negative reflectance (B8={b8}, B4={b4})"
        )));
    }
    let sum = b8 + b4;
    if sum == 0.0 {
        Ok(0.0)
    } else {
        Ok((b8 - b4) / sum)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// Per-channel standardization constants keyed by channel name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormStats {
    pub channels: BTreeMap<String, ChannelStats>,
}

impl NormStats {
    /// Mean and population standard deviation of every continuous channel
    /// present in `samples`.
    pub fn compute<'a, I>(samples: I) -> Self
    where
        I: IntoIterator<Item = &'a PixelSample>,
    {
        let mut sums: BTreeMap<&'static str, (f64, f64, u64)> = BTreeMap::new();
        for s in samples {
            for g in s.present().iter() {
                if g.kind() == GroupKind::Categorical {
                    continue;
                }
                for (name, v) in g.channels().iter().zip(s.get(g).unwrap()) {
                    let e = sums.entry(name).or_insert((0.0, 0.0, 0));
                    e.0 += v;
                    e.1 += v * v;
                    e.2 += 1;
                }
            }
        }
        let channels = sums
            .into_iter()
            .map(|(name, (s, sq, n))| {
                let mean = s / n as f64;
                let var = (sq / n as f64 - mean * mean).max(0.0);
                (
                    name.to_string(),
                    ChannelStats {
                        mean,
                        std: var.sqrt(),
                    },
                )
            })
            .collect();
        NormStats { channels }
    }

    fn lookup(&self, name: &str) -> Result<ChannelStats> {
        let st =
            self.channels.get(name).copied().ok_or_else(|| {
                Error::Config(format!("no normalization stats for channel {name}"))
            })?;
        if !(st.std > 0.0) || !st.mean.is_finite() {
            return Err(Error::Config(format!(
                "channel {name} has non-positive std {}",
                st.std
            )));
        }
        Ok(st)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("normalization stats: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }
}

/// Standardizes every present continuous channel: `(v - mean) / std`.
pub fn normalize(sample: &PixelSample, stats: &NormStats) -> Result<PixelSample> {
    map_values(sample, stats, |v, st| (v - st.mean) / st.std)
}

/// Inverse of [`normalize`].
pub fn denormalize(sample: &PixelSample, stats: &NormStats) -> Result<PixelSample> {
    map_values(sample, stats, |v, st| v * st.std + st.mean)
}

fn map_values(
    sample: &PixelSample,
    stats: &NormStats,
    f: impl Fn(f64, ChannelStats) -> f64,
) -> Result<PixelSample> {
    let mut out = sample.clone();
    for g in sample.present().iter() {
        if g.kind() == GroupKind::Categorical {
            continue;
        }
        let mut vals = [0.0; 3];
        for (i, (name, v)) in g.channels().iter().zip(sample.get(g).unwrap()).enumerate() {
            vals[i] = f(*v, stats.lookup(name)?);
        }
        out.store(g, &vals[..g.channel_count()]);
    }
    Ok(out)
}

/// Learned embedding of one channel group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupEmbedding {
    /// `[input_dim, d_model]` projection of the group's raw values.
    pub projection: Linear,
    /// Learned channel-group encoding added to every token of this group.
    pub encoding: Tensor,
}

/// Group embeddings plus the frozen positional and month tables.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodingTable {
    /// One entry per group in canonical order.
    pub groups: Vec<GroupEmbedding>,
    /// `[10, d_model]` sinusoidal table indexed by canonical group slot. Frozen.
    pub pos_encoding: Tensor,
    /// `[12, d_model]` cyclic month table. Frozen.
    pub month_encoding: Tensor,
}

impl EncodingTable {
    pub fn init<R: Rng>(d_model: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_model as f64).sqrt();
        let groups = ChannelGroup::ALL
            .iter()
            .map(|g| GroupEmbedding {
                projection: Linear::init(g.input_dim(), d_model, rng),
                encoding: uniform(&[d_model], bound, rng),
            })
            .collect();
        EncodingTable {
            groups,
            pos_encoding: sinusoidal_table(ChannelGroup::ALL.len(), d_model),
            month_encoding: month_table(d_model),
        }
    }

    /// Same layout, every tensor zero; used as a gradient accumulator.
    pub fn zeros(d_model: usize) -> Self {
        EncodingTable {
            groups: ChannelGroup::ALL
                .iter()
                .map(|g| GroupEmbedding {
                    projection: Linear::zeros(g.input_dim(), d_model),
                    encoding: Tensor::zeros(&[d_model]),
                })
                .collect(),
            pos_encoding: Tensor::zeros(&[ChannelGroup::ALL.len(), d_model]),
            month_encoding: Tensor::zeros(&[12, d_model]),
        }
    }

    pub fn d_model(&self) -> usize {
        self.pos_encoding.cols()
    }

    pub fn group(&self, g: ChannelGroup) -> &GroupEmbedding {
        &self.groups[g.slot()]
    }

    /// Trainable parameter count (frozen tables excluded).
    pub fn trainable_count(&self) -> usize {
        self.groups
            .iter()
            .map(|g| g.projection.param_count() + g.encoding.len())
            .sum()
    }

    /// Writes one token for `group` into `out` (length `d_model`).
    fn embed_token(&self, group: ChannelGroup, input: &[f64], month: u8, out: &mut [f64]) {
        let emb = self.group(group);
        let w = &emb.projection.weight;
        out.copy_from_slice(
            emb.projection
                .bias
                .as_ref()
                .expect("group projections carry a bias")
                .data(),
        );
        for (c, x) in input.iter().enumerate() {
            for (o, wv) in out.iter_mut().zip(w.row(c)) {
                *o += x * wv;
            }
        }
        let pos = self.pos_encoding.row(group.slot());
        let mon = self.month_encoding.row(month as usize);
        for (((o, p), m), e) in out.iter_mut().zip(pos).zip(mon).zip(emb.encoding.data()) {
            *o = ((*o + p) + m) + e;
        }
    }

    /// Accumulates gradients of the group embeddings for a tokenized batch.
    ///
    /// Positional and month tables are frozen and receive nothing. Groups that
    /// produced at least one token are added to `active`.
    pub fn backward(
        &self,
        batch: &TokenBatch,
        grad_tokens: &Tensor,
        grads: &mut EncodingTable,
        active: &mut GroupSet,
    ) -> Result<()> {
        if grad_tokens.rows() != batch.groups.len() || grad_tokens.cols() != self.d_model() {
            return Err(Error::Internal(format!(
                "token gradient {:?} does not match {} tokens",
                grad_tokens.shape(),
                batch.groups.len()
            )));
        }
        for (t, g) in batch.groups.iter().enumerate() {
            let dt = grad_tokens.row(t);
            let ge = &mut grads.groups[g.slot()];
            for (c, x) in batch.input(t).iter().enumerate() {
                if *x == 0.0 {
                    continue;
                }
                for (acc, d) in ge.projection.weight.row_mut(c).iter_mut().zip(dt) {
                    *acc += x * d;
                }
            }
            for (acc, d) in ge
                .projection
                .bias
                .as_mut()
                .expect("group projections carry a bias")
                .data_mut()
                .iter_mut()
                .zip(dt)
            {
                *acc += d;
            }
            for (acc, d) in ge.encoding.data_mut().iter_mut().zip(dt) {
                *acc += d;
            }
            active.insert(*g);
        }
        Ok(())
    }
}

impl Params for EncodingTable {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (g, e) in ChannelGroup::ALL.iter().zip(&self.groups) {
            let p = join(prefix, &format!("group.{}", g.name()));
            e.projection.collect(&join(&p, "projection"), out);
            out.push((join(&p, "encoding"), &e.encoding));
        }
        out.push((join(prefix, "pos_encoding"), &self.pos_encoding));
        out.push((join(prefix, "month_encoding"), &self.month_encoding));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (g, e) in ChannelGroup::ALL.iter().zip(self.groups.iter_mut()) {
            let p = join(prefix, &format!("group.{}", g.name()));
            e.projection.collect_mut(&join(&p, "projection"), out);
            out.push((join(&p, "encoding"), &mut e.encoding));
        }
        out.push((join(prefix, "pos_encoding"), &mut self.pos_encoding));
        out.push((join(prefix, "month_encoding"), &mut self.month_encoding));
    }
}

/// `pe[p, 2i] = sin(p / 10000^(2i/d))`, `pe[p, 2i+1] = cos(...)`.
pub fn sinusoidal_table(positions: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[positions, d]);
    for p in 0..positions {
        let row = t.row_mut(p);
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * pair / d as f64);
            row[i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

/// Cyclic month encoding: harmonics 1..=6 of the annual cycle, repeated across the width.
pub fn month_table(d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[12, d]);
    for m in 0..12 {
        let base = 2.0 * std::f64::consts::PI * m as f64 / 12.0;
        let row = t.row_mut(m);
        for i in 0..d {
            let harmonic = ((i / 2) % 6 + 1) as f64;
            let angle = base * harmonic;
            row[i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

/// Tokens of one pixel and the group each token came from.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub groups: Vec<ChannelGroup>,
}

/// Tokenizes one pixel: one token per group in `present \ mask`, canonical order.
pub fn tokenize(
    sample: &PixelSample,
    mask: GroupSet,
    table: &EncodingTable,
) -> Result<TokenSequence> {
    let batch = TokenBatch::build(std::slice::from_ref(sample), mask, table)?;
    Ok(TokenSequence {
        tokens: batch.tokens,
        groups: batch.groups,
    })
}

/// Tokens of many pixels stacked row-wise, with per-pixel sequence offsets.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub tokens: Tensor,
    pub offsets: Vec<usize>,
    pub groups: Vec<ChannelGroup>,
    inputs: Vec<f64>,
    input_offsets: Vec<usize>,
}

impl TokenBatch {
    pub fn build(samples: &[PixelSample], mask: GroupSet, table: &EncodingTable) -> Result<Self> {
        Self::build_from(samples.iter(), mask, table)
    }

    pub fn build_from<'a, I>(samples: I, mask: GroupSet, table: &EncodingTable) -> Result<Self>
    where
        I: IntoIterator<Item = &'a PixelSample>,
    {
        let d = table.d_model();
        let mut data = Vec::new();
        let mut offsets = vec![0];
        let mut groups = Vec::new();
        let mut inputs = Vec::new();
        let mut input_offsets = vec![0];
        for s in samples {
            let surviving = s.present().difference(mask);
            if surviving.is_empty() {
                return Err(Error::EmptyInput(
                    "every channel group of the pixel is masked or absent".into(),
                ));
            }
            for g in surviving.iter() {
                let start = inputs.len();
                s.embedding_input(g, &mut inputs);
                input_offsets.push(inputs.len());
                let base = data.len();
                data.resize(base + d, 0.0);
                table.embed_token(g, &inputs[start..], s.month, &mut data[base..]);
                groups.push(g);
            }
            offsets.push(groups.len());
        }
        if groups.is_empty() {
            return Err(Error::EmptyInput("no pixels to tokenize".into()));
        }
        Ok(TokenBatch {
            tokens: Tensor::from_vec(&[groups.len(), d], data)?,
            offsets,
            groups,
            inputs,
            input_offsets,
        })
    }

    pub fn n_pixels(&self) -> usize {
        self.offsets.len() - 1
    }

    fn input(&self, token: usize) -> &[f64] {
        &self.inputs[self.input_offsets[token]..self.input_offsets[token + 1]]
    }
}
