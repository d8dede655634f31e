use super::{
    join, AttentionCache, LayerNorm, LayerNormCache, Mlp, MlpCache, MultiHeadAttention, Params,
};
use crate::error::Result;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Where the layer norms sit relative to the residual connections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlockVariant {
    /// `h = x + attn(ln1(x)); y = h + mlp(ln2(h))`
    #[default]
    PreNorm,
    /// `h = ln1(x + attn(x)); y = ln2(h + mlp(h))`
    PostNorm,
}

/// One attention + feed-forward transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub variant: BlockVariant,
}

#[derive(Debug)]
pub struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    mlp: MlpCache,
}

impl TransformerBlock {
    pub fn init<R: Rng>(
        d: usize,
        n_heads: usize,
        mlp_ratio: usize,
        eps: f64,
        variant: BlockVariant,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: LayerNorm::new(d, eps),
            attn: MultiHeadAttention::init(d, n_heads, rng)?,
            ln2: LayerNorm::new(d, eps),
            mlp: Mlp::init(d, d * mlp_ratio, rng),
            variant,
        })
    }

    pub fn zeros(d: usize, n_heads: usize, mlp_ratio: usize, variant: BlockVariant) -> Self {
        TransformerBlock {
            ln1: LayerNorm::zeros(d),
            attn: MultiHeadAttention::zeros(d, n_heads),
            ln2: LayerNorm::zeros(d),
            mlp: Mlp::zeros(d, d * mlp_ratio),
            variant,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.ln1.dim() + 2 * self.ln2.dim() + self.attn.param_count() + self.mlp.param_count()
    }

    pub fn forward(&self, x: &Tensor, offsets: &[usize]) -> Result<(Tensor, BlockCache)> {
        match self.variant {
            BlockVariant::PreNorm => {
                let (a, ln1) = self.ln1.forward(x)?;
                let (att, attn) = self.attn.forward(&a, offsets)?;
                let mut h = x.clone();
                h.add_assign(&att)?;
                let (b, ln2) = self.ln2.forward(&h)?;
                let (m, mlp) = self.mlp.forward(&b)?;
                h.add_assign(&m)?;
                Ok((
                    h,
                    BlockCache {
                        ln1,
                        attn,
                        ln2,
                        mlp,
                    },
                ))
            }
            BlockVariant::PostNorm => {
                let (att, attn) = self.attn.forward(x, offsets)?;
                let mut z1 = x.clone();
                z1.add_assign(&att)?;
                let (h, ln1) = self.ln1.forward(&z1)?;
                let (m, mlp) = self.mlp.forward(&h)?;
                let mut z2 = h;
                z2.add_assign(&m)?;
                let (y, ln2) = self.ln2.forward(&z2)?;
                Ok((
                    y,
                    BlockCache {
                        ln1,
                        attn,
                        ln2,
                        mlp,
                    },
                ))
            }
        }
    }

    pub fn backward(
        &self,
        grad_out: &Tensor,
        cache: BlockCache,
        grads: &mut TransformerBlock,
    ) -> Result<Tensor> {
        let BlockCache {
            ln1,
            attn,
            ln2,
            mlp,
        } = cache;
        match self.variant {
            BlockVariant::PreNorm => {
                let mut dh = grad_out.clone();
                let db = self.mlp.backward(grad_out, mlp, &mut grads.mlp)?;
                dh.add_assign(&self.ln2.backward(&db, ln2, &mut grads.ln2)?)?;
                let da = self.attn.backward(&dh, attn, &mut grads.attn)?;
                let mut dx = dh;
                dx.add_assign(&self.ln1.backward(&da, ln1, &mut grads.ln1)?)?;
                Ok(dx)
            }
            BlockVariant::PostNorm => {
                let dz2 = self.ln2.backward(grad_out, ln2, &mut grads.ln2)?;
                let mut dh = dz2.clone();
                dh.add_assign(&self.mlp.backward(&dz2, mlp, &mut grads.mlp)?)?;
                let dz1 = self.ln1.backward(&dh, ln1, &mut grads.ln1)?;
                let mut dx = dz1.clone();
                dx.add_assign(&self.attn.backward(&dz1, attn, &mut grads.attn)?)?;
                Ok(dx)
            }
        }
    }
}

impl Params for TransformerBlock {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.ln1.collect(&join(prefix, "ln1"), out);
        self.attn.collect(&join(prefix, "attn"), out);
        self.ln2.collect(&join(prefix, "ln2"), out);
        self.mlp.collect(&join(prefix, "mlp"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.ln1.collect_mut(&join(prefix, "ln1"), out);
        self.attn.collect_mut(&join(prefix, "attn"), out);
        self.ln2.collect_mut(&join(prefix, "ln2"), out);
        self.mlp.collect_mut(&join(prefix, "mlp"), out);
    }
}
