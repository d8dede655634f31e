use super::{join, Params};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Row-wise layer normalization with learned scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

#[derive(Debug)]
pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    /// gamma = 1, beta = 0.
    pub fn new(d: usize, eps: f64) -> Self {
        let mut gamma = Tensor::zeros(&[d]);
        gamma.fill(1.0);
        LayerNorm {
            gamma,
            beta: Tensor::zeros(&[d]),
            eps,
        }
    }

    pub fn zeros(d: usize) -> Self {
        LayerNorm {
            gamma: Tensor::zeros(&[d]),
            beta: Tensor::zeros(&[d]),
            eps: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        let d = self.dim();
        if d == 0 || x.cols() != d {
            return Err(Error::Shape(format!(
                "layernorm over {d} features got input {:?}",
                x.shape()
            )));
        }
        let n = x.rows();
        let mut xhat = Tensor::zeros(&[n, d]);
        let mut y = Tensor::zeros(&[n, d]);
        let mut inv_std = Vec::with_capacity(n);
        let (gamma, beta) = (self.gamma.data(), self.beta.data());
        for r in 0..n {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(r);
            for (o, v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            for (((o, xv), g), b) in y
                .row_mut(r)
                .iter_mut()
                .zip(xhat.row(r))
                .zip(gamma)
                .zip(beta)
            {
                *o = xv * g + b;
            }
        }
        Ok((y, LayerNormCache { xhat, inv_std }))
    }

    pub fn backward(
        &self,
        grad_out: &Tensor,
        cache: LayerNormCache,
        grads: &mut LayerNorm,
    ) -> Result<Tensor> {
        let d = self.dim();
        let n = cache.xhat.rows();
        if grad_out.shape() != cache.xhat.shape() {
            return Err(Error::Internal(format!(
                "layernorm backward: grad {:?} vs cache {:?}",
                grad_out.shape(),
                cache.xhat.shape()
            )));
        }
        let gamma = self.gamma.data();
        let mut dx = Tensor::zeros(&[n, d]);
        let mut dxhat = vec![0.0; d];
        for r in 0..n {
            let g = grad_out.row(r);
            let xh = cache.xhat.row(r);
            {
                let dg = grads.gamma.data_mut();
                for i in 0..d {
                    dg[i] += g[i] * xh[i];
                }
            }
            {
                let db = grads.beta.data_mut();
                for i in 0..d {
                    db[i] += g[i];
                }
            }
            let mut sum = 0.0;
            let mut sum_x = 0.0;
            for i in 0..d {
                dxhat[i] = g[i] * gamma[i];
                sum += dxhat[i];
                sum_x += dxhat[i] * xh[i];
            }
            let scale = cache.inv_std[r] / d as f64;
            for (i, o) in dx.row_mut(r).iter_mut().enumerate() {
                *o = scale * (d as f64 * dxhat[i] - sum - xh[i] * sum_x);
            }
        }
        Ok(dx)
    }
}

impl Params for LayerNorm {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_row_maps_to_zero() {
        let ln = LayerNorm::new(3, DEFAULT_EPS);
        let (y, _) = ln
            .forward(&Tensor::from_rows(&[vec![1.0, 1.0, 1.0]]))
            .unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn symmetric_pair_without_eps() {
        let ln = LayerNorm::new(2, 0.0);
        let (y, _) = ln.forward(&Tensor::from_rows(&[vec![0.0, 2.0]])).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn random_rows_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = uniform(&[10, 32], 20.0, &mut rng);
        let ln = LayerNorm::new(32, DEFAULT_EPS);
        let (y, _) = ln.forward(&x).unwrap();
        for r in 0..10 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 32.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = uniform(&[4, 16], 2.0, &mut rng);
        let mut shifted = x.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += 3.75);
        let ln = LayerNorm::new(16, DEFAULT_EPS);
        let (a, _) = ln.forward(&x).unwrap();
        let (b, _) = ln.forward(&shifted).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_width_is_rejected() {
        let ln = LayerNorm::new(0, DEFAULT_EPS);
        assert!(ln.forward(&Tensor::zeros(&[1, 0])).is_err());
    }
}
