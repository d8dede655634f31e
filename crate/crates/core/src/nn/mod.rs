//! Differentiable layers with hand-written forward and backward passes.
//!
//! Every layer follows the same pattern: `forward` returns the output plus a
//! cache of whatever the backward pass needs, and `backward` consumes that
//! cache, accumulates parameter gradients into a same-shaped gradient struct,
//! and returns the gradient with respect to the layer input.
//!
//! Token batches are stacked into one `[tokens, d]` matrix; `offsets` marks
//! where each pixel's token sequence starts and ends (`offsets.len()` is the
//! number of sequences plus one). Attention only mixes tokens within a
//! sequence.

pub mod activation;
pub mod attention;
pub mod block;
pub mod layer_norm;
pub mod linear;
pub mod mlp;

pub use activation::{gelu, gelu_backward, gelu_grad, sigmoid, softmax_in_place};
pub use attention::{AttentionCache, MultiHeadAttention};
pub use block::{BlockCache, BlockVariant, TransformerBlock};
pub use layer_norm::{LayerNorm, LayerNormCache};
pub use linear::{Linear, LinearCache};
pub use mlp::{Mlp, MlpCache};

use crate::tensor::Tensor;
use rand::distributions::{Distribution, Uniform};
use rand::Rng;

/// Enumerates the tensors of a parameter-carrying struct in declaration order.
pub trait Params {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Tensor with entries drawn uniformly from `[-bound, bound)`.
pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let dist = Uniform::new(-bound, bound);
    let len = shape.iter().product();
    let data = (0..len).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("shape product matches length")
}

/// Sequence offsets for `n` sequences of the given lengths.
pub fn offsets_from_lengths(lengths: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(lengths.len() + 1);
    offsets.push(0);
    let mut acc = 0;
    for l in lengths {
        acc += l;
        offsets.push(acc);
    }
    offsets
}
