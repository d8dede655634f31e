use super::{join, softmax_in_place, Linear, Params};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;

/// Multi-head scaled dot-product self-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    /// No bias: it would add a per-query constant to every score, which softmax cancels.
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub n_heads: usize,
}

#[derive(Debug)]
pub struct AttentionCache {
    input: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    ctx: Tensor,
    /// Softmax weights, sequence by sequence, head by head, each `n×n` row-major.
    probs: Vec<f64>,
    offsets: Vec<usize>,
}

impl AttentionCache {
    /// Attention weights of sequence `seq`, head `head`, as an `n×n` row-major block.
    pub fn weights(&self, seq: usize, head: usize, n_heads: usize) -> &[f64] {
        let mut start = 0;
        for s in 0..seq {
            let n = self.offsets[s + 1] - self.offsets[s];
            start += n * n * n_heads;
        }
        let n = self.offsets[seq + 1] - self.offsets[seq];
        let start = start + head * n * n;
        &self.probs[start..start + n * n]
    }
}

impl MultiHeadAttention {
    pub fn init<R: Rng>(d: usize, n_heads: usize, rng: &mut R) -> Result<Self> {
        check_heads(d, n_heads)?;
        Ok(MultiHeadAttention {
            query: Linear::init(d, d, rng),
            key: Linear::init_without_bias(d, d, rng),
            value: Linear::init(d, d, rng),
            output: Linear::init(d, d, rng),
            n_heads,
        })
    }

    pub fn zeros(d: usize, n_heads: usize) -> Self {
        MultiHeadAttention {
            query: Linear::zeros(d, d),
            key: Linear::zeros_without_bias(d, d),
            value: Linear::zeros(d, d),
            output: Linear::zeros(d, d),
            n_heads,
        }
    }

    pub fn dim(&self) -> usize {
        self.query.fan_in()
    }

    pub fn param_count(&self) -> usize {
        self.query.param_count()
            + self.key.param_count()
            + self.value.param_count()
            + self.output.param_count()
    }

    /// Self-attention over a single token sequence `x: [n, d]`.
    pub fn forward_single(&self, x: &Tensor) -> Result<(Tensor, AttentionCache)> {
        self.forward(x, &[0, x.rows()])
    }

    /// Self-attention over stacked sequences; tokens attend only within their own sequence.
    pub fn forward(&self, x: &Tensor, offsets: &[usize]) -> Result<(Tensor, AttentionCache)> {
        let d = self.dim();
        check_heads(d, self.n_heads)?;
        check_offsets(offsets, x.rows())?;
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let q = self.query.apply(x)?;
        let k = self.key.apply(x)?;
        let v = self.value.apply(x)?;
        let mut ctx = Tensor::zeros(&[x.rows(), d]);
        let mut probs = Vec::new();

        for w in offsets.windows(2) {
            let (s0, s1) = (w[0], w[1]);
            let n = s1 - s0;
            for h in 0..self.n_heads {
                let cols = h * dh..(h + 1) * dh;
                let base = probs.len();
                probs.resize(base + n * n, 0.0);
                let block = &mut probs[base..];
                for i in 0..n {
                    let qi = &q.row(s0 + i)[cols.clone()];
                    let row = &mut block[i * n..(i + 1) * n];
                    for (j, slot) in row.iter_mut().enumerate() {
                        let kj = &k.row(s0 + j)[cols.clone()];
                        let mut dot = 0.0;
                        for c in 0..dh {
                            dot += qi[c] * kj[c];
                        }
                        *slot = dot * scale;
                    }
                    softmax_in_place(row);
                }
                for i in 0..n {
                    let out = &mut ctx.row_mut(s0 + i)[cols.clone()];
                    for j in 0..n {
                        let p = block[i * n + j];
                        let vj = &v.row(s0 + j)[cols.clone()];
                        for c in 0..dh {
                            out[c] += p * vj[c];
                        }
                    }
                }
            }
        }

        let y = self.output.apply(&ctx)?;
        Ok((
            y,
            AttentionCache {
                input: x.clone(),
                q,
                k,
                v,
                ctx,
                probs,
                offsets: offsets.to_vec(),
            },
        ))
    }

    pub fn backward(
        &self,
        grad_out: &Tensor,
        cache: AttentionCache,
        grads: &mut MultiHeadAttention,
    ) -> Result<Tensor> {
        let d = self.dim();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let rows = cache.input.rows();
        if grad_out.rows() != rows || grad_out.cols() != d {
            return Err(Error::Internal(format!(
                "attention backward: grad {:?} vs input {:?}",
                grad_out.shape(),
                cache.input.shape()
            )));
        }

        let dctx = self
            .output
            .backward_from_input(&cache.ctx, grad_out, &mut grads.output)?;
        let mut dq = Tensor::zeros(&[rows, d]);
        let mut dk = Tensor::zeros(&[rows, d]);
        let mut dv = Tensor::zeros(&[rows, d]);
        let (q, k, v) = (&cache.q, &cache.k, &cache.v);

        let mut p_off = 0;
        let mut dp = Vec::new();
        for w in cache.offsets.windows(2) {
            let (s0, s1) = (w[0], w[1]);
            let n = s1 - s0;
            for h in 0..self.n_heads {
                let cols = h * dh..(h + 1) * dh;
                let p = &cache.probs[p_off..p_off + n * n];
                p_off += n * n;
                dp.clear();
                dp.resize(n * n, 0.0);
                for i in 0..n {
                    let gi = &dctx.row(s0 + i)[cols.clone()];
                    for j in 0..n {
                        let vj = &v.row(s0 + j)[cols.clone()];
                        let mut acc = 0.0;
                        for c in 0..dh {
                            acc += gi[c] * vj[c];
                        }
                        dp[i * n + j] = acc;
                    }
                }
                for j in 0..n {
                    for i in 0..n {
                        let pij = p[i * n + j];
                        let gi = &dctx.row(s0 + i)[cols.clone()];
                        let out = &mut dv.row_mut(s0 + j)[cols.clone()];
                        for c in 0..dh {
                            out[c] += pij * gi[c];
                        }
                    }
                }
                // softmax backward, then through the scaled dot product
                for i in 0..n {
                    let prow = &p[i * n..(i + 1) * n];
                    let drow = &mut dp[i * n..(i + 1) * n];
                    let mut inner = 0.0;
                    for j in 0..n {
                        inner += prow[j] * drow[j];
                    }
                    for j in 0..n {
                        drow[j] = prow[j] * (drow[j] - inner) * scale;
                    }
                }
                for i in 0..n {
                    for j in 0..n {
                        let ds = dp[i * n + j];
                        {
                            let kj = &k.row(s0 + j)[cols.clone()];
                            let out = &mut dq.row_mut(s0 + i)[cols.clone()];
                            for c in 0..dh {
                                out[c] += ds * kj[c];
                            }
                        }
                        {
                            let qi = &q.row(s0 + i)[cols.clone()];
                            let out = &mut dk.row_mut(s0 + j)[cols.clone()];
                            for c in 0..dh {
                                out[c] += ds * qi[c];
                            }
                        }
                    }
                }
            }
        }

        let x = &cache.input;
        let mut dx = self.query.backward_from_input(x, &dq, &mut grads.query)?;
        dx.add_assign(&self.key.backward_from_input(x, &dk, &mut grads.key)?)?;
        dx.add_assign(&self.value.backward_from_input(x, &dv, &mut grads.value)?)?;
        Ok(dx)
    }
}

impl Params for MultiHeadAttention {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.query.collect(&join(prefix, "query"), out);
        self.key.collect(&join(prefix, "key"), out);
        self.value.collect(&join(prefix, "value"), out);
        self.output.collect(&join(prefix, "output"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.query.collect_mut(&join(prefix, "query"), out);
        self.key.collect_mut(&join(prefix, "key"), out);
        self.value.collect_mut(&join(prefix, "value"), out);
        self.output.collect_mut(&join(prefix, "output"), out);
    }
}

fn check_heads(d: usize, n_heads: usize) -> Result<()> {
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Config(format!(
            "model width {d} is not divisible by {n_heads} attention heads"
        )));
    }
    Ok(())
}

fn check_offsets(offsets: &[usize], rows: usize) -> Result<()> {
    let ok = offsets.len() >= 2
        && offsets[0] == 0
        && *offsets.last().unwrap() == rows
        && offsets.windows(2).all(|w| w[1] > w[0]);
    if ok {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "sequence offsets {offsets:?} do not partition {rows} tokens into non-empty sequences"
        )))
    }
}
