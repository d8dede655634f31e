//! Central finite-difference checks of every hand-written backward pass.
//!
//! Each check perturbs sampled entries of a tensor by `±STEP`, evaluates a
//! scalar loss, and compares `(L(θ+h) - L(θ-h)) / 2h` with the analytic
//! gradient using `|a - b| / max(|a|, |b|, 1e-8)`.

use crate::encoder::{Gradients, ModelConfig, ModelParams, Trainability};
use crate::error::Result;
use crate::head::{focal_loss_from_logit, focal_loss_grad, FocalLossConfig};
use crate::nn::activation::{gelu_backward, gelu_forward};
use crate::nn::{
    uniform, BlockVariant, LayerNorm, Linear, Mlp, MultiHeadAttention, Params, TransformerBlock,
};
use crate::tensor::Tensor;
use crate::tokenizer::{ChannelGroup, EncodingTable, GroupSet, PixelSample, TokenBatch};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const SAMPLES_PER_TENSOR: usize = 100;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub layer: String,
    pub tensor: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub rows: Vec<CheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(CheckRow::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckRow> {
        self.rows.iter().filter(|r| !r.passed())
    }

    pub fn max_rel_err(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<14} {:<48} {:>7} {:>12}  status",
            "layer", "tensor", "checked", "max rel err"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<14} {:<48} {:>7} {:>12.3e}  {}",
                r.layer,
                r.tensor,
                r.checked,
                r.max_rel_err,
                if r.passed() { "pass" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Compares an analytic gradient against central differences on sampled entries.
///
/// `eval` receives the tensor with one entry perturbed and returns the loss.
pub fn check_entries<R: Rng>(
    values: &mut [f64],
    analytic: &[f64],
    samples: usize,
    rng: &mut R,
    mut eval: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<(usize, f64)> {
    let n = values.len();
    let k = samples.min(n);
    let mut idx = sample(rng, n, k).into_vec();
    idx.sort_unstable();
    let mut worst: f64 = 0.0;
    for i in idx {
        let orig = values[i];
        values[i] = orig + STEP;
        let up = eval(values)?;
        values[i] = orig - STEP;
        let down = eval(values)?;
        values[i] = orig;
        let fd = (up - down) / (2.0 * STEP);
        worst = worst.max(relative_error(analytic[i], fd));
    }
    Ok((k, worst))
}

/// Checks every tensor of a layer (and optionally its input) under `L = Σ r ⊙ f(x)`.
fn check_layer<P, F, B>(
    layer_name: &str,
    layer: &P,
    input: &Tensor,
    projection: &Tensor,
    forward: F,
    backward: B,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CheckRow>>
where
    P: Params + Clone,
    F: Fn(&P, &Tensor) -> Result<Tensor>,
    B: Fn(&P, &Tensor, &Tensor) -> Result<(P, Tensor)>,
{
    let loss = |p: &P, x: &Tensor| -> Result<f64> {
        let y = forward(p, x)?;
        Ok(y.data()
            .iter()
            .zip(projection.data())
            .map(|(a, b)| a * b)
            .sum())
    };
    let (grads, dx) = backward(layer, input, projection)?;
    let mut rows = Vec::new();

    let mut analytic = Vec::new();
    grads.collect("", &mut analytic);
    let analytic: Vec<(String, Vec<f64>)> = analytic
        .into_iter()
        .map(|(n, t)| (n, t.data().to_vec()))
        .collect();
    let mut work = layer.clone();
    for (ti, (name, g)) in analytic.iter().enumerate() {
        let mut values = {
            let mut v = Vec::new();
            work.collect("", &mut v);
            v[ti].1.data().to_vec()
        };
        let (checked, err) = check_entries(&mut values, g, SAMPLES_PER_TENSOR, rng, |vals| {
            {
                let mut v = Vec::new();
                work.collect_mut("", &mut v);
                v[ti].1.data_mut().copy_from_slice(vals);
            }
            loss(&work, input)
        })?;
        {
            let mut v = Vec::new();
            work.collect_mut("", &mut v);
            v[ti].1.data_mut().copy_from_slice(&values);
        }
        rows.push(CheckRow {
            layer: layer_name.to_string(),
            tensor: name.clone(),
            checked,
            max_rel_err: err,
        });
    }

    let mut x = input.clone();
    let mut xv = x.data().to_vec();
    let (checked, err) = check_entries(&mut xv, dx.data(), SAMPLES_PER_TENSOR, rng, |vals| {
        x.data_mut().copy_from_slice(vals);
        loss(layer, &x)
    })?;
    rows.push(CheckRow {
        layer: layer_name.to_string(),
        tensor: "input".into(),
        checked,
        max_rel_err: err,
    });
    Ok(rows)
}

/// Unit struct so parameter-free layers fit [`check_layer`].
#[derive(Clone)]
struct NoParams;

impl Params for NoParams {
    fn collect<'a>(&'a self, _: &str, _: &mut Vec<(String, &'a Tensor)>) {}
    fn collect_mut<'a>(&'a mut self, _: &str, _: &mut Vec<(String, &'a mut Tensor)>) {}
}

const D: usize = 16;
const HEADS: usize = 4;
const OFFSETS: [usize; 4] = [0, 3, 4, 8];

pub fn check_linear(rng: &mut ChaCha8Rng) -> Result<Vec<CheckRow>> {
    let lin = Linear::init(D, 12, rng);
    let x = uniform(&[5, D], 1.0, rng);
    let r = uniform(&[5, 12], 1.0, rng);
    check_layer(
        "linear",
        &lin,
        &x,
        &r,
        |l, x| l.apply(x),
        |l, x, g| {
            let (_, c) = l.forward(x)?;
            let mut grads = Linear::zeros(D, 12);
            let dx = l.backward(g, c, &mut grads)?;
            Ok((grads, dx))
        },
        rng,
    )
}

pub fn check_layer_norm(rng: &mut ChaCha8Rng) -> Result<Vec<CheckRow>> {
    let mut ln = LayerNorm::new(D, crate::nn::layer_norm::DEFAULT_EPS);
    ln.gamma = uniform(&[D], 1.5, rng);
    ln.beta = uniform(&[D], 0.5, rng);
    let x = uniform(&[6, D], 2.0, rng);
    let r = uniform(&[6, D], 1.0, rng);
    check_layer(
        "layer_norm",
        &ln,
        &x,
        &r,
        |l, x| Ok(l.forward(x)?.0),
        |l, x, g| {
            let (_, c) = l.forward(x)?;
            let mut grads = LayerNorm::zeros(D);
            let dx = l.backward(g, c, &mut grads)?;
            Ok((grads, dx))
        },
        rng,
    )
}

pub fn check_gelu(rng: &mut ChaCha8Rng) -> Result<Vec<CheckRow>> {
    let x = uniform(&[4, D], 3.0, rng);
    let r = uniform(&[4, D], 1.0, rng);
    check_layer(
        "gelu",
        &NoParams,
        &x,
        &r,
        |_, x| Ok(gelu_forward(x)),
        |_, x, g| Ok((NoParams, gelu_backward(x, g))),
        rng,
    )
}

pub fn check_attention(rng: &mut ChaCha8Rng) -> Result<Vec<CheckRow>> {
    let attn = MultiHeadAttention::init(D, HEADS, rng)?;
    let x = uniform(&[8, D], 1.5, rng);
    let r = uniform(&[8, D], 1.0, rng);
    check_layer(
        "attention",
        &attn,
        &x,
        &r,
        |a, x| Ok(a.forward(x, &OFFSETS)?.0),
        |a, x, g| {
            let (_, c) = a.forward(x, &OFFSETS)?;
            let mut grads = MultiHeadAttention::zeros(D, HEADS);
            let dx = a.backward(g, c, &mut grads)?;
            Ok((grads, dx))
        },
        rng,
    )
}

pub fn check_mlp(rng: &mut ChaCha8Rng) -> Result<Vec<CheckRow>> {
    let mlp = Mlp::init(D, 4 * D, rng);
    let x = uniform(&[5, D], 1.5, rng);
    let r = uniform(&[5, D], 1.0, rng);
    check_layer(
        "mlp",
        &mlp,
        &x,
        &r,
        |m, x| Ok(m.forward(x)?.0),
        |m, x, g| {
            let (_, c) = m.forward(x)?;
            let mut grads = Mlp::zeros(D, 4 * D);
            let dx = m.backward(g, c, &mut grads)?;
            Ok((grads, dx))
        },
        rng,
    )
}

pub fn check_block(variant: BlockVariant, rng: &mut ChaCha8Rng) -> Result<Vec<CheckRow>> {
    let mut block = TransformerBlock::init(
        D,
        HEADS,
        4,
        crate::nn::layer_norm::DEFAULT_EPS,
        variant,
        rng,
    )?;
    block.ln1.gamma = uniform(&[D], 1.5, rng);
    block.ln2.beta = uniform(&[D], 0.5, rng);
    let x = uniform(&[8, D], 1.5, rng);
    let r = uniform(&[8, D], 1.0, rng);
    let name = match variant {
        BlockVariant::PreNorm => "block_pre",
        BlockVariant::PostNorm => "block_post",
    };
    check_layer(
        name,
        &block,
        &x,
        &r,
        |b, x| Ok(b.forward(x, &OFFSETS)?.0),
        |b, x, g| {
            let (_, c) = b.forward(x, &OFFSETS)?;
            let mut grads = TransformerBlock::zeros(D, HEADS, 4, variant);
            let dx = b.backward(g, c, &mut grads)?;
            Ok((grads, dx))
        },
        rng,
    )
}

/// Random raw values for every channel group, including the reserved ones.
pub fn random_pixel(rng: &mut ChaCha8Rng, groups: &[ChannelGroup]) -> PixelSample {
    let mut s = PixelSample::new(rng.gen_range(0..12)).expect("valid month");
    for &g in groups {
        let vals: Vec<f64> = match g {
            ChannelGroup::DynamicWorld => vec![rng.gen_range(0..9) as f64],
            ChannelGroup::Ndvi => vec![rng.gen_range(-1.0..1.0)],
            _ => (0..g.channel_count())
                .map(|_| rng.gen_range(-2.0..2.0))
                .collect(),
        };
        s.set(g, &vals).expect("valid values");
    }
    s
}

pub fn check_tokenizer(rng: &mut ChaCha8Rng) -> Result<Vec<CheckRow>> {
    let table = EncodingTable::init(D, rng);
    let pixels = vec![
        random_pixel(rng, &ChannelGroup::ALL),
        random_pixel(
            rng,
            &[
                ChannelGroup::S1,
                ChannelGroup::DynamicWorld,
                ChannelGroup::Location,
            ],
        ),
    ];
    let probe = TokenBatch::build(&pixels, GroupSet::EMPTY, &table)?;
    let r = uniform(probe.tokens.shape(), 1.0, rng);
    let loss = |t: &EncodingTable| -> Result<f64> {
        let b = TokenBatch::build(&pixels, GroupSet::EMPTY, t)?;
        Ok(b.tokens
            .data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| a * b)
            .sum())
    };
    let mut grads = EncodingTable::zeros(D);
    let mut active = GroupSet::EMPTY;
    table.backward(&probe, &r, &mut grads, &mut active)?;

    let mut rows = Vec::new();
    let mut work = table.clone();
    let names: Vec<String> = {
        let mut v = Vec::new();
        grads.collect("", &mut v);
        v.into_iter().map(|(n, _)| n).collect()
    };
    for (ti, name) in names.iter().enumerate() {
        if name.ends_with("pos_encoding") || name.ends_with("month_encoding") {
            continue;
        }
        let analytic = {
            let mut v = Vec::new();
            grads.collect("", &mut v);
            v[ti].1.data().to_vec()
        };
        let mut values = {
            let mut v = Vec::new();
            work.collect("", &mut v);
            v[ti].1.data().to_vec()
        };
        let (checked, err) =
            check_entries(&mut values, &analytic, SAMPLES_PER_TENSOR, rng, |vals| {
                {
                    let mut v = Vec::new();
                    work.collect_mut("", &mut v);
                    v[ti].1.data_mut().copy_from_slice(vals);
                }
                loss(&work)
            })?;
        let mut v = Vec::new();
        work.collect_mut("", &mut v);
        v[ti].1.data_mut().copy_from_slice(&values);
        rows.push(CheckRow {
            layer: "tokenizer".into(),
            tensor: name.clone(),
            checked,
            max_rel_err: err,
        });
    }
    Ok(rows)
}

pub fn check_focal_head(rng: &mut ChaCha8Rng) -> Result<Vec<CheckRow>> {
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for cfg in [
        FocalLossConfig::default(),
        FocalLossConfig {
            gamma: 0.0,
            alpha: None,
        },
        FocalLossConfig {
            gamma: 1.5,
            alpha: Some(0.25),
        },
    ] {
        for _ in 0..40 {
            let z = rng.gen_range(-6.0..6.0);
            for flood in [false, true] {
                let fd = (focal_loss_from_logit(z + STEP, flood, &cfg)
                    - focal_loss_from_logit(z - STEP, flood, &cfg))
                    / (2.0 * STEP);
                worst = worst.max(relative_error(focal_loss_grad(z, flood, &cfg), fd));
                n += 1;
            }
        }
    }
    Ok(vec![CheckRow {
        layer: "focal_loss".into(),
        tensor: "logit".into(),
        checked: n,
        max_rel_err: worst,
    }])
}

/// Pixels and labels used by the end-to-end check: one pixel carries every
/// group, the others carry subsets, so every embedding receives gradient.
pub fn end_to_end_fixture(rng: &mut ChaCha8Rng) -> (Vec<PixelSample>, Vec<bool>) {
    let pixels = vec![
        random_pixel(rng, &ChannelGroup::ALL),
        random_pixel(
            rng,
            &[
                ChannelGroup::S1,
                ChannelGroup::Ndvi,
                ChannelGroup::DynamicWorld,
            ],
        ),
        random_pixel(rng, &[ChannelGroup::S2Nir]),
    ];
    (pixels, vec![true, false, true])
}

/// Mean focal loss of the model over a fixed pixel set.
pub fn mean_focal_loss(
    model: &ModelParams,
    batch: &TokenBatch,
    labels: &[bool],
    cfg: &FocalLossConfig,
) -> Result<f64> {
    let logits = model.logits(batch)?;
    let n = labels.len() as f64;
    Ok(logits
        .iter()
        .zip(labels)
        .map(|(z, y)| focal_loss_from_logit(*z, *y, cfg))
        .sum::<f64>()
        / n)
}

/// Analytic gradient of [`mean_focal_loss`].
pub fn mean_focal_gradients(
    model: &ModelParams,
    batch: &TokenBatch,
    labels: &[bool],
    cfg: &FocalLossConfig,
) -> Result<Gradients> {
    let (logits, cache) = model.forward(batch)?;
    let n = labels.len() as f64;
    let dlogits: Vec<f64> = logits
        .iter()
        .zip(labels)
        .map(|(z, y)| focal_loss_grad(*z, *y, cfg) / n)
        .collect();
    let mut grads = Gradients::zeros_for(model);
    model.backward(batch, &dlogits, cache, &mut grads)?;
    Ok(grads)
}

/// End-to-end check of every trainable tensor of a full model.
pub fn check_end_to_end(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Vec<CheckRow>> {
    let model = ModelParams::init(config)?;
    let (pixels, labels) = end_to_end_fixture(rng);
    let cfg = FocalLossConfig::default();
    let batch = TokenBatch::build(&pixels, GroupSet::EMPTY, &model.encodings)?;
    let grads = mean_focal_gradients(&model, &batch, &labels, &cfg)?;
    let analytic: Vec<(String, Vec<f64>)> = grads
        .params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.data().to_vec()))
        .collect();
    let roles = model.trainability();

    let mut work = model.clone();
    let mut rows = Vec::new();
    for (ti, (name, g)) in analytic.iter().enumerate() {
        if roles[ti] == Trainability::Frozen {
            continue;
        }
        let mut values = work.named_tensors()[ti].1.data().to_vec();
        let (checked, err) = check_entries(&mut values, g, SAMPLES_PER_TENSOR, rng, |vals| {
            work.named_tensors_mut()[ti]
                .1
                .data_mut()
                .copy_from_slice(vals);
            // Tokens depend on the embedding tensors, so rebuild them each time.
            let b = TokenBatch::build(&pixels, GroupSet::EMPTY, &work.encodings)?;
            mean_focal_loss(&work, &b, &labels, &cfg)
        })?;
        work.named_tensors_mut()[ti]
            .1
            .data_mut()
            .copy_from_slice(&values);
        rows.push(CheckRow {
            layer: "end_to_end".into(),
            tensor: name.clone(),
            checked,
            max_rel_err: err,
        });
    }
    Ok(rows)
}

/// Runs every suite: each layer on small random shapes, then the full default model.
pub fn run_all(seed: u64, config: &ModelConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    rows.extend(check_linear(&mut rng)?);
    rows.extend(check_layer_norm(&mut rng)?);
    rows.extend(check_gelu(&mut rng)?);
    rows.extend(check_attention(&mut rng)?);
    rows.extend(check_mlp(&mut rng)?);
    rows.extend(check_block(BlockVariant::PreNorm, &mut rng)?);
    rows.extend(check_block(BlockVariant::PostNorm, &mut rng)?);
    rows.extend(check_tokenizer(&mut rng)?);
    rows.extend(check_focal_head(&mut rng)?);
    rows.extend(check_end_to_end(config, &mut rng)?);
    Ok(GradcheckReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.0001) - 0.0001 / 1.0001).abs() < 1e-15);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn sign_bug_is_reported() {
        // f(v) = Σ v², true gradient 2v; the double returns -2v.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut v: Vec<f64> = (0..20).map(|i| i as f64 * 0.1 + 0.05).collect();
        let wrong: Vec<f64> = v.iter().map(|x| -2.0 * x).collect();
        let right: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        let f = |vals: &[f64]| Ok(vals.iter().map(|x| x * x).sum::<f64>());
        let (_, bad) = check_entries(&mut v, &wrong, 100, &mut rng, f).unwrap();
        assert!(bad > TOLERANCE);
        let (n, good) = check_entries(&mut v, &right, 100, &mut rng, f).unwrap();
        assert_eq!(n, 20);
        assert!(good < TOLERANCE);
    }

    #[test]
    fn layer_suites_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut rows = Vec::new();
        rows.extend(check_linear(&mut rng).unwrap());
        rows.extend(check_layer_norm(&mut rng).unwrap());
        rows.extend(check_gelu(&mut rng).unwrap());
        rows.extend(check_attention(&mut rng).unwrap());
        rows.extend(check_mlp(&mut rng).unwrap());
        rows.extend(check_block(BlockVariant::PreNorm, &mut rng).unwrap());
        rows.extend(check_block(BlockVariant::PostNorm, &mut rng).unwrap());
        rows.extend(check_tokenizer(&mut rng).unwrap());
        rows.extend(check_focal_head(&mut rng).unwrap());
        let report = GradcheckReport { rows };
        assert!(report.passed(), "\n{report}");
    }

    #[test]
    fn small_model_end_to_end() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 4,
            seed: 3,
            ..Default::default()
        };
        let rows = check_end_to_end(&cfg, &mut rng).unwrap();
        let report = GradcheckReport { rows };
        assert!(report.passed(), "\n{report}");
        let post = ModelConfig {
            block_variant: BlockVariant::PostNorm,
            ..cfg
        };
        let report = GradcheckReport {
            rows: check_end_to_end(&post, &mut rng).unwrap(),
        };
        assert!(report.passed(), "\n{report}");
    }
}
