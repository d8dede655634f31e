use super::{join, uniform, Params};
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use rand::Rng;

/// Fully connected layer, `y = x·W + b` with `W: [in, out]`; the bias is optional.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Saved input of a [`Linear::forward`] call.
#[derive(Debug)]
pub struct LinearCache {
    pub input: Tensor,
}

impl Linear {
    /// Weights and bias uniform in `±1/sqrt(fan_in)`.
    pub fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            weight: uniform(&[fan_in, fan_out], bound, rng),
            bias: Some(uniform(&[fan_out], bound, rng)),
        }
    }

    pub fn init_without_bias<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            weight: uniform(&[fan_in, fan_out], bound, rng),
            bias: None,
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Some(Tensor::zeros(&[fan_out])),
        }
    }

    pub fn zeros_without_bias(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: None,
        }
    }

    /// Bias values, all zero when the layer has none.
    pub fn bias_or_zero(&self) -> Vec<f64> {
        match &self.bias {
            Some(b) => b.data().to_vec(),
            None => vec![0.0; self.fan_out()],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LinearCache)> {
        let y = self.apply(x)?;
        Ok((y, LinearCache { input: x.clone() }))
    }

    /// Forward pass without a cache.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = matmul(x, &self.weight)?;
        let Some(bias) = &self.bias else {
            return Ok(y);
        };
        let b = bias.data();
        for r in 0..y.rows() {
            for (v, bv) in y.row_mut(r).iter_mut().zip(b) {
                *v += bv;
            }
        }
        Ok(y)
    }

    pub fn backward(
        &self,
        grad_out: &Tensor,
        cache: LinearCache,
        grads: &mut Linear,
    ) -> Result<Tensor> {
        self.backward_from_input(&cache.input, grad_out, grads)
    }

    /// Backward pass given the forward input directly; used by composite layers
    /// that already hold the input in their own cache.
    pub fn backward_from_input(
        &self,
        input: &Tensor,
        grad_out: &Tensor,
        grads: &mut Linear,
    ) -> Result<Tensor> {
        if grad_out.cols() != self.fan_out() || grad_out.rows() != input.rows() {
            return Err(Error::Internal(format!(
                "linear backward: grad {:?} does not match input {:?} -> {}",
                grad_out.shape(),
                input.shape(),
                self.fan_out()
            )));
        }
        let dw = matmul_tn(input, grad_out)?;
        grads.weight.add_assign(&dw)?;
        if let Some(b) = &mut grads.bias {
            let db = b.data_mut();
            for r in 0..grad_out.rows() {
                for (acc, g) in db.iter_mut().zip(grad_out.row(r)) {
                    *acc += g;
                }
            }
        }
        matmul_nt(grad_out, &self.weight)
    }
}

impl Params for Linear {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weight_gradient_is_input_transpose_times_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::init(3, 2, &mut rng);
        let x = uniform(&[4, 3], 1.0, &mut rng);
        let g = uniform(&[4, 2], 1.0, &mut rng);
        let (_, cache) = lin.forward(&x).unwrap();
        let mut grads = Linear::zeros(3, 2);
        lin.backward(&g, cache, &mut grads).unwrap();
        let expected = matmul(&x.transpose().unwrap(), &g).unwrap();
        assert_eq!(grads.weight, expected);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lin = Linear::init(5, 3, &mut rng);
        let x = uniform(&[2, 5], 1.0, &mut rng);
        let (_, cache) = lin.forward(&x).unwrap();
        let mut grads = Linear::zeros(5, 3);
        let dx = lin
            .backward(&Tensor::zeros(&[2, 3]), cache, &mut grads)
            .unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(grads.weight.data().iter().all(|&v| v == 0.0));
        assert!(grads
            .bias
            .as_ref()
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lin = Linear::init(16, 8, &mut rng);
        assert!(lin.weight.data().iter().all(|v| v.abs() <= 0.25));
        assert_eq!(lin.param_count(), 16 * 8 + 8);
    }
}
