use super::activation::{gelu_backward, gelu_forward};
use super::{join, Linear, Params};
use crate::error::Result;
use crate::tensor::Tensor;
use rand::Rng;

/// Two-layer feed-forward network with a GELU in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug)]
pub struct MlpCache {
    input: Tensor,
    pre: Tensor,
    act: Tensor,
}

impl Mlp {
    pub fn init<R: Rng>(d: usize, hidden: usize, rng: &mut R) -> Self {
        Mlp {
            fc1: Linear::init(d, hidden, rng),
            fc2: Linear::init(hidden, d, rng),
        }
    }

    pub fn zeros(d: usize, hidden: usize) -> Self {
        Mlp {
            fc1: Linear::zeros(d, hidden),
            fc2: Linear::zeros(hidden, d),
        }
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, MlpCache)> {
        let pre = self.fc1.apply(x)?;
        let act = gelu_forward(&pre);
        let y = self.fc2.apply(&act)?;
        Ok((
            y,
            MlpCache {
                input: x.clone(),
                pre,
                act,
            },
        ))
    }

    pub fn backward(&self, grad_out: &Tensor, cache: MlpCache, grads: &mut Mlp) -> Result<Tensor> {
        let dact = self
            .fc2
            .backward_from_input(&cache.act, grad_out, &mut grads.fc2)?;
        let dpre = gelu_backward(&cache.pre, &dact);
        self.fc1
            .backward_from_input(&cache.input, &dpre, &mut grads.fc1)
    }
}

impl Params for Mlp {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.fc1.collect(&join(prefix, "fc1"), out);
        self.fc2.collect(&join(prefix, "fc2"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.fc1.collect_mut(&join(prefix, "fc1"), out);
        self.fc2.collect_mut(&join(prefix, "fc2"), out);
    }
}
