//! Linear flood head, probability thresholding, and focal loss.

use crate::error::{Error, Result};
use crate::nn::{join, sigmoid, uniform, Params};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FloodLabel {
    NonFlood,
    Flood,
}

impl FloodLabel {
    pub fn is_flood(self) -> bool {
        self == FloodLabel::Flood
    }
}

/// Single fully connected layer mapping a pixel feature to one flood logit.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// `[d_model, 1]`
    pub weight: Tensor,
    /// `[1]`
    pub bias: Tensor,
}

impl HeadParams {
    pub fn init<R: Rng>(d_model: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_model as f64).sqrt();
        HeadParams {
            weight: uniform(&[d_model, 1], bound, rng),
            bias: uniform(&[1], bound, rng),
        }
    }

    pub fn zeros(d_model: usize) -> Self {
        HeadParams {
            weight: Tensor::zeros(&[d_model, 1]),
            bias: Tensor::zeros(&[1]),
        }
    }

    pub fn logit(&self, feature: &[f64]) -> f64 {
        let mut z = 0.0;
        for (f, w) in feature.iter().zip(self.weight.data()) {
            z += f * w;
        }
        z + self.bias.data()[0]
    }

    /// Accumulates head gradients for one pixel and returns d(loss)/d(feature).
    pub fn backward(
        &self,
        feature: &[f64],
        dlogit: f64,
        grads: &mut HeadParams,
        dfeature: &mut [f64],
    ) {
        for (g, f) in grads.weight.data_mut().iter_mut().zip(feature) {
            *g += dlogit * f;
        }
        grads.bias.data_mut()[0] += dlogit;
        for (d, w) in dfeature.iter_mut().zip(self.weight.data()) {
            *d = dlogit * w;
        }
    }
}

impl Params for HeadParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Maps a probability to a label; `prob >= threshold` is flood.
pub fn classify(prob: f64, threshold: f64) -> FloodLabel {
    if prob >= threshold {
        FloodLabel::Flood
    } else {
        FloodLabel::NonFlood
    }
}

/// Flood probability and thresholded label for one pixel feature.
pub fn predict(feature: &[f64], head: &HeadParams, threshold: f64) -> (f64, FloodLabel) {
    let prob = sigmoid(head.logit(feature));
    (prob, classify(prob, threshold))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocalLossConfig {
    pub gamma: f64,
    pub alpha: Option<f64>,
}

impl Default for FocalLossConfig {
    fn default() -> Self {
        FocalLossConfig {
            gamma: 2.0,
            alpha: None,
        }
    }
}

impl FocalLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!(
                "focal gamma {} must be >= 0",
                self.gamma
            )));
        }
        if let Some(a) = self.alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("focal alpha {a} outside [0, 1]")));
            }
        }
        Ok(())
    }

    fn alpha_t(&self, flood: bool) -> f64 {
        match self.alpha {
            Some(a) if flood => a,
            Some(a) => 1.0 - a,
            None => 1.0,
        }
    }
}

/// `-α_t (1 - p_t)^γ ln(p_t)` with `p_t = prob` for flood and `1 - prob` otherwise.
pub fn focal_loss(prob: f64, flood: bool, cfg: &FocalLossConfig) -> f64 {
    let p = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let pt = if flood { p } else { 1.0 - p };
    -cfg.alpha_t(flood) * (1.0 - pt).powf(cfg.gamma) * pt.ln()
}

/// Focal loss evaluated from the logit.
pub fn focal_loss_from_logit(logit: f64, flood: bool, cfg: &FocalLossConfig) -> f64 {
    focal_loss(sigmoid(logit), flood, cfg)
}

/// d(focal loss)/d(logit).
///
/// With `q = 1 - p_t` and `ln p_t` taken as a log-sigmoid of the signed logit:
/// `dL/dz = s·α_t·(γ·q^γ·p_t·ln p_t - q^(γ+1))`, `s = +1` for flood, `-1` otherwise.
pub fn focal_loss_grad(logit: f64, flood: bool, cfg: &FocalLossConfig) -> f64 {
    let signed = if flood { logit } else { -logit };
    let pt = sigmoid(signed);
    let q = sigmoid(-signed);
    let ln_pt = -softplus(-signed);
    let g = cfg.gamma;
    let core = if g == 0.0 {
        -q
    } else {
        g * q.powf(g) * pt * ln_pt - q.powf(g + 1.0)
    };
    let s = if flood { 1.0 } else { -1.0 };
    s * cfg.alpha_t(flood) * core
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
