//! The pixel-level transformer encoder and the full model parameter set.

use crate::error::{Error, Result};
use crate::head::HeadParams;
use crate::nn::{
    join, BlockCache, BlockVariant, LayerNorm, LayerNormCache, Params, TransformerBlock,
};
use crate::tensor::Tensor;
use crate::tokenizer::{ChannelGroup, EncodingTable, GroupSet, TokenBatch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub block_variant: BlockVariant,
    pub layer_norm_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_layers: 2,
            n_heads: 8,
            mlp_ratio: 4,
            block_variant: BlockVariant::PreNorm,
            layer_norm_eps: crate::nn::layer_norm::DEFAULT_EPS,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be >= 1".into()));
        }
        if !(self.layer_norm_eps >= 0.0) {
            return Err(Error::Config("layer_norm_eps must be >= 0".into()));
        }
        Ok(())
    }
}

/// How a tensor participates in optimization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainability {
    /// Never updated (positional and month tables).
    Frozen,
    /// Updated only when the owning group produced tokens in the batch.
    Group(ChannelGroup),
    /// Updated every step.
    Shared,
}

/// Every tensor of the model: encodings, encoder blocks, final norm and head.
///
/// A zero-filled instance doubles as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encodings: EncodingTable,
    pub blocks: Vec<TransformerBlock>,
    pub final_ln: LayerNorm,
    pub head: HeadParams,
}

impl ModelParams {
    /// Randomly initialized model; initialization order is declaration order.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let encodings = EncodingTable::init(d, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| {
                TransformerBlock::init(
                    d,
                    config.n_heads,
                    config.mlp_ratio,
                    config.layer_norm_eps,
                    config.block_variant,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParams {
            config: config.clone(),
            encodings,
            blocks,
            final_ln: LayerNorm::new(d, config.layer_norm_eps),
            head: HeadParams::init(d, &mut rng),
        })
    }

    /// Same layout, every tensor zero.
    pub fn zeros_like(&self) -> Self {
        let c = &self.config;
        ModelParams {
            config: c.clone(),
            encodings: EncodingTable::zeros(c.d_model),
            blocks: (0..c.n_layers)
                .map(|_| {
                    TransformerBlock::zeros(c.d_model, c.n_heads, c.mlp_ratio, c.block_variant)
                })
                .collect(),
            final_ln: LayerNorm::zeros(c.d_model),
            head: HeadParams::zeros(c.d_model),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    /// Trainability of each tensor, aligned with [`ModelParams::named_tensors`].
    pub fn trainability(&self) -> Vec<Trainability> {
        self.named_tensors()
            .iter()
            .map(|(name, _)| trainability_of(name))
            .collect()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|(name, _)| trainability_of(name) != Trainability::Frozen)
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Runs the block stack and final layer norm over stacked token sequences.
    pub fn encode(&self, tokens: &Tensor, offsets: &[usize]) -> Result<(Tensor, EncodeCache)> {
        if tokens.rows() == 0 {
            return Err(Error::EmptyInput("encoder needs at least one token".into()));
        }
        if tokens.cols() != self.config.d_model {
            return Err(Error::Shape(format!(
                "tokens have width {}, model expects {}",
                tokens.cols(),
                self.config.d_model
            )));
        }
        let mut x = tokens.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let (y, cache) = b.forward(&x, offsets)?;
            if !y.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite activations after encoder layer {i}"
                )));
            }
            blocks.push(cache);
            x = y;
        }
        let (y, final_ln) = self.final_ln.forward(&x)?;
        if !y.is_finite() {
            return Err(Error::Numeric(
                "non-finite activations after final layer norm".into(),
            ));
        }
        Ok((y, EncodeCache { blocks, final_ln }))
    }

    /// Backward through [`ModelParams::encode`]; returns d(loss)/d(tokens).
    pub fn encode_backward(
        &self,
        grad_out: &Tensor,
        cache: EncodeCache,
        grads: &mut ModelParams,
    ) -> Result<Tensor> {
        let EncodeCache { blocks, final_ln } = cache;
        let mut g = self
            .final_ln
            .backward(grad_out, final_ln, &mut grads.final_ln)?;
        for ((b, c), gb) in self
            .blocks
            .iter()
            .zip(blocks)
            .zip(grads.blocks.iter_mut())
            .rev()
        {
            g = b.backward(&g, c, gb)?;
        }
        Ok(g)
    }

    /// Tokens → encoder → per-pixel mean feature → head logit, for every pixel of the batch.
    pub fn forward(&self, batch: &TokenBatch) -> Result<(Vec<f64>, ForwardCache)> {
        let (encoded, encode) = self.encode(&batch.tokens, &batch.offsets)?;
        let features = pixel_features(&encoded, &batch.offsets)?;
        let logits = (0..features.rows())
            .map(|p| self.head.logit(features.row(p)))
            .collect();
        Ok((
            logits,
            ForwardCache {
                encode,
                features,
                offsets: batch.offsets.clone(),
            },
        ))
    }

    /// Logits only.
    pub fn logits(&self, batch: &TokenBatch) -> Result<Vec<f64>> {
        Ok(self.forward(batch)?.0)
    }

    /// Backpropagates d(loss)/d(logit) for each pixel into `grads`.
    pub fn backward(
        &self,
        batch: &TokenBatch,
        dlogits: &[f64],
        cache: ForwardCache,
        grads: &mut Gradients,
    ) -> Result<()> {
        let ForwardCache {
            encode,
            features,
            offsets,
        } = cache;
        if dlogits.len() != features.rows() {
            return Err(Error::Internal(format!(
                "{} logit gradients for {} pixels",
                dlogits.len(),
                features.rows()
            )));
        }
        let d = self.config.d_model;
        let mut dfeat = vec![0.0; d];
        let mut dencoded = Tensor::zeros(&[*offsets.last().unwrap(), d]);
        for (p, w) in offsets.windows(2).enumerate() {
            self.head.backward(
                features.row(p),
                dlogits[p],
                &mut grads.params.head,
                &mut dfeat,
            );
            let inv = 1.0 / (w[1] - w[0]) as f64;
            for t in w[0]..w[1] {
                for (o, g) in dencoded.row_mut(t).iter_mut().zip(&dfeat) {
                    *o = g * inv;
                }
            }
        }
        let dtokens = self.encode_backward(&dencoded, encode, &mut grads.params)?;
        self.encodings.backward(
            batch,
            &dtokens,
            &mut grads.params.encodings,
            &mut grads.active_groups,
        )
    }
}

impl Params for ModelParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.encodings.collect(&join(prefix, "encodings"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.final_ln.collect(&join(prefix, "final_ln"), out);
        self.head.collect(&join(prefix, "head"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.encodings.collect_mut(&join(prefix, "encodings"), out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.final_ln.collect_mut(&join(prefix, "final_ln"), out);
        self.head.collect_mut(&join(prefix, "head"), out);
    }
}

fn trainability_of(name: &str) -> Trainability {
    if name == "encodings.pos_encoding" || name == "encodings.month_encoding" {
        return Trainability::Frozen;
    }
    if let Some(rest) = name.strip_prefix("encodings.group.") {
        let group = rest.split('.').next().unwrap_or_default();
        if let Some(g) = ChannelGroup::parse(group) {
            return Trainability::Group(g);
        }
    }
    Trainability::Shared
}

#[derive(Debug)]
pub struct EncodeCache {
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
}

#[derive(Debug)]
pub struct ForwardCache {
    encode: EncodeCache,
    features: Tensor,
    offsets: Vec<usize>,
}

/// Gradient buffers shaped like the model, plus the groups that produced tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub params: ModelParams,
    pub active_groups: GroupSet,
}

impl Gradients {
    pub fn zeros_for(model: &ModelParams) -> Self {
        Gradients {
            params: model.zeros_like(),
            active_groups: GroupSet::EMPTY,
        }
    }

    /// `self += other`, tensor by tensor in declaration order.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        let theirs = other.params.named_tensors();
        for ((_, mine), (_, t)) in self.params.named_tensors_mut().into_iter().zip(theirs) {
            mine.add_assign(t)?;
        }
        self.active_groups = self.active_groups.union(other.active_groups);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params
            .named_tensors()
            .iter()
            .all(|(_, t)| t.is_finite())
    }
}

/// Mean over each pixel's tokens, `[n_pixels, d]`.
pub fn pixel_features(encoded: &Tensor, offsets: &[usize]) -> Result<Tensor> {
    let d = encoded.cols();
    let n = offsets.len().saturating_sub(1);
    let mut out = Tensor::zeros(&[n, d]);
    for (p, w) in offsets.windows(2).enumerate() {
        if w[1] <= w[0] {
            return Err(Error::EmptyInput(format!("pixel {p} has no tokens")));
        }
        let row = out.row_mut(p);
        for t in w[0]..w[1] {
            for (o, v) in row.iter_mut().zip(encoded.row(t)) {
                *o += v;
            }
        }
        let inv = 1.0 / (w[1] - w[0]) as f64;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(out)
}

/// Mean feature of a single pixel's encoded tokens.
pub fn pixel_feature(encoded: &Tensor) -> Result<Vec<f64>> {
    Ok(pixel_features(encoded, &[0, encoded.rows()])?.into_data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform;

    #[test]
    fn default_parameter_budget() {
        let m = ModelParams::init(&ModelConfig::default()).unwrap();
        let n = m.trainable_param_count();
        assert!((300_000..=500_000).contains(&n), "{n}");
    }

    #[test]
    fn frozen_and_group_tensors_are_classified() {
        let m = ModelParams::init(&ModelConfig {
            d_model: 16,
            n_heads: 2,
            ..Default::default()
        })
        .unwrap();
        let names = m.named_tensors();
        let roles = m.trainability();
        let frozen: Vec<_> = names
            .iter()
            .zip(&roles)
            .filter(|(_, r)| **r == Trainability::Frozen)
            .map(|((n, _), _)| n.clone())
            .collect();
        assert_eq!(
            frozen,
            vec!["encodings.pos_encoding", "encodings.month_encoding"]
        );
        assert!(roles.contains(&Trainability::Group(ChannelGroup::DynamicWorld)));
        assert_eq!(
            trainability_of("encodings.group.ERA5.encoding"),
            Trainability::Group(ChannelGroup::Era5)
        );
        assert_eq!(
            trainability_of("blocks.0.attn.query.weight"),
            Trainability::Shared
        );
    }

    #[test]
    fn pixel_feature_is_token_mean() {
        let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(pixel_feature(&t).unwrap(), vec![0.5, 0.5]);
        let one = Tensor::from_rows(&[vec![3.0, -2.0]]);
        assert_eq!(pixel_feature(&one).unwrap(), vec![3.0, -2.0]);
        let same = Tensor::from_rows(&[vec![0.25, 4.0], vec![0.25, 4.0]]);
        assert_eq!(pixel_feature(&same).unwrap(), vec![0.25, 4.0]);
    }

    #[test]
    fn encode_preserves_shape() {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 4,
            seed: 3,
            ..Default::default()
        };
        let m = ModelParams::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..=6 {
            let x = uniform(&[n, 16], 1.0, &mut rng);
            let (y, _) = m.encode(&x, &[0, n]).unwrap();
            assert_eq!(y.shape(), x.shape());
        }
    }

    #[test]
    fn single_token_matches_hand_stepped_pipeline() {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            seed: 5,
            ..Default::default()
        };
        let m = ModelParams::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = uniform(&[1, 8], 1.0, &mut rng);
        let (y, _) = m.encode(&x, &[0, 1]).unwrap();

        // pre-norm block with one token: attention reduces to out(value(ln1(x)))
        let b = &m.blocks[0];
        let a = b.ln1.forward(&x).unwrap().0;
        let att = b
            .attn
            .output
            .apply(&b.attn.value.apply(&a).unwrap())
            .unwrap();
        let mut h = x.clone();
        h.add_assign(&att).unwrap();
        let c = b.ln2.forward(&h).unwrap().0;
        let pre = b.mlp.fc1.apply(&c).unwrap();
        let mut act = pre.clone();
        act.data_mut()
            .iter_mut()
            .for_each(|v| *v = crate::nn::gelu(*v));
        let mlp = b.mlp.fc2.apply(&act).unwrap();
        h.add_assign(&mlp).unwrap();
        let want = m.final_ln.forward(&h).unwrap().0;
        for (u, v) in y.data().iter().zip(want.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn self_attention_is_permutation_equivariant() {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 4,
            seed: 9,
            ..Default::default()
        };
        let m = ModelParams::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = uniform(&[3, 16], 1.0, &mut rng);
        let mut swapped = x.clone();
        swapped.row_mut(0).copy_from_slice(x.row(2));
        swapped.row_mut(2).copy_from_slice(x.row(0));
        let (y, _) = m.encode(&x, &[0, 3]).unwrap();
        let (ys, _) = m.encode(&swapped, &[0, 3]).unwrap();
        for (a, b) in [(0, 2), (1, 1), (2, 0)] {
            for (u, v) in y.row(a).iter().zip(ys.row(b)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = ModelConfig {
            d_model: 30,
            n_heads: 8,
            ..Default::default()
        };
        assert!(matches!(ModelParams::init(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_init() {
        let a = ModelParams::init(&ModelConfig::default()).unwrap();
        let b = ModelParams::init(&ModelConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(&ModelConfig {
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a, c);
    }
}
