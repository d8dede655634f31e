//! Command-line front end: `synth`, `train`, `eval`, `gradcheck`.

use crate::checkpoint::{self, TrainState};
use crate::datapipe::synth::write_dataset;
use crate::datapipe::{load_split, synth_generate, Chip, Manifest, PixelDataset, Split};
use crate::encoder::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_scenario, Scenario};
use crate::gradcheck;
use crate::head::DEFAULT_THRESHOLD;
use crate::nn::BlockVariant;
use crate::tokenizer::NormStats;
use crate::trainer::{metrics_csv, train, Start, TrainConfig, METRICS_HEADER};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STATS_FILE: &str = "norm_stats.json";
pub const RUN_CONFIG_FILE: &str = "run_config.toml";

#[derive(Debug, Parser)]
#[command(
    name = "sensorflex",
    version,
    about = "Sensor-flexible per-pixel flood mapping"
)]
pub struct Cli {
    /// Worker threads (default: all available cores).
    #[arg(long, global = true, env = "SENSORFLEX_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic flood dataset.
    Synth(SynthArgs),
    /// Fine-tune the model on the train split, selecting on val F1.
    Train(TrainArgs),
    /// Score a checkpoint under one or all sensor scenarios.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub chips: usize,
    #[arg(long, default_value_t = 512)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.2)]
    pub flood_frac: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.0)]
    pub cloud_frac: f64,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    pub label_bias: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// `pre_norm` or `post_norm`.
    #[arg(long)]
    pub block_variant: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// `sar`, `ms`, `fused` or `all`.
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default: the checkpoint's directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Normalization stats (default: `norm_stats.json` next to the checkpoint).
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Write per-chip PNG prediction maps.
    #[arg(long)]
    pub dump_maps: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub chips_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Everything a run needs, as stored in a TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub scenario: Option<String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    /// A top-level seed applies to both initialization and batching.
    fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.model.seed = s;
            self.train.seed = s;
        }
    }
}

fn parse_variant(s: &str) -> Result<BlockVariant> {
    match s {
        "pre_norm" => Ok(BlockVariant::PreNorm),
        "post_norm" => Ok(BlockVariant::PostNorm),
        other => Err(Error::Config(format!("unknown block variant {other:?}"))),
    }
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| Error::Config(format!("missing {what} (flag or config file)")))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let cfg = crate::datapipe::SynthConfig {
        n_chips: a.chips,
        size: a.size,
        seed: a.seed,
        flood_frac: a.flood_frac,
        noise: a.noise,
        cloud_frac: a.cloud_frac,
        label_bias: a.label_bias,
        ..Default::default()
    };
    let chips: Vec<Chip> = synth_generate(&cfg)?.into_iter().map(|s| s.chip).collect();
    create_dir(&a.out)?;
    let manifest = write_dataset(&chips, &a.out)?;
    for split in Split::ALL {
        let rs = manifest.split(split);
        let mean = rs.iter().map(|r| r.flood_ratio).sum::<f64>() / rs.len().max(1) as f64;
        println!(
            "{split:<5} {:>4} chips  mean flood ratio {mean:.4}",
            rs.len()
        );
    }
    println!(
        "{} chips of {}x{} ({} pixels) written to {}",
        chips.len(),
        a.size,
        a.size,
        chips.len() * a.size * a.size,
        a.out.display()
    );
    Ok(())
}

/// Effective configuration of a `train` invocation: file values, then flags.
pub fn train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut rc = RunConfig::load_or_default(a.config.as_deref())?;
    if a.seed.is_some() {
        rc.seed = a.seed;
    }
    rc.apply_seed();
    let (m, t) = (&mut rc.model, &mut rc.train);
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.epochs {
        t.max_epochs = v;
    }
    if let Some(v) = a.patience {
        t.early_stop_patience = v;
    }
    if let Some(v) = a.weight_decay {
        t.weight_decay = v;
    }
    if let Some(v) = a.gamma {
        t.loss.gamma = v;
    }
    if let Some(v) = a.d_model {
        m.d_model = v;
    }
    if let Some(v) = a.layers {
        m.n_layers = v;
    }
    if let Some(v) = a.heads {
        m.n_heads = v;
    }
    if let Some(v) = &a.block_variant {
        m.block_variant = parse_variant(v)?;
    }
    if a.manifest.is_some() {
        rc.paths.manifest = a.manifest.clone();
    }
    if a.out.is_some() {
        rc.paths.out = a.out.clone();
    }
    if a.resume.is_some() {
        rc.paths.checkpoint = a.resume.clone();
    }
    rc.model.validate()?;
    rc.train.validate()?;
    Ok(rc)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let rc = train_config(a)?;
    let manifest = Manifest::read(require(&rc.paths.manifest, "manifest")?)?;
    let out = require(&rc.paths.out, "output directory")?.clone();
    for split in [Split::Train, Split::Val] {
        if manifest.split(split).is_empty() {
            return Err(Error::EmptyInput(format!("manifest has no {split} chips")));
        }
    }
    create_dir(&out)?;

    let train_px = PixelDataset::from_chips(&load_split(&manifest, Split::Train)?)?;
    let stats = NormStats::compute(&train_px.samples);
    let train_px = train_px.normalized(&stats)?;
    let val_px =
        PixelDataset::from_chips(&load_split(&manifest, Split::Val)?)?.normalized(&stats)?;
    info!("{} train / {} val pixels", train_px.len(), val_px.len());

    let (start, mut log_prefix) = match &a.resume {
        Some(path) => {
            let (model, state) = checkpoint::load(path)?;
            let state = state.unwrap_or(TrainState {
                epoch: 0,
                best_val_f1: f64::NEG_INFINITY,
            });
            if model.config != rc.model {
                return Err(Error::Config(
                    "checkpoint model config differs from the run config".into(),
                ));
            }
            let prior = std::fs::read_to_string(out.join(METRICS_FILE)).unwrap_or_default();
            let kept: Vec<&str> = prior
                .lines()
                .skip(1)
                .filter(|l| {
                    l.split(',')
                        .next()
                        .and_then(|e| e.parse::<usize>().ok())
                        .is_some_and(|e| e <= state.epoch)
                })
                .collect();
            (Start::Resume(Box::new(model), state), kept.join("\n"))
        }
        None => (Start::Fresh, String::new()),
    };

    let outcome = train(&train_px, &val_px, &rc.model, &rc.train, start)?;
    checkpoint::save(
        &out.join(CHECKPOINT_FILE),
        &outcome.best,
        Some(&outcome.state()),
    )?;
    let mut csv = metrics_csv(&outcome.log);
    if !log_prefix.is_empty() {
        log_prefix.push('\n');
        csv.insert_str(METRICS_HEADER.len() + 1, &log_prefix);
    }
    write_file(&out.join(METRICS_FILE), &csv)?;
    write_file(&out.join(STATS_FILE), &stats.to_json())?;
    write_file(&out.join(RUN_CONFIG_FILE), &rc.to_toml())?;
    println!(
        "best val F1 {:.4} at epoch {} (last epoch {}); checkpoint at {}",
        outcome.best_val_f1,
        outcome.best_epoch,
        outcome.last_epoch,
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

pub fn parse_scenarios(s: &str) -> Result<Vec<Scenario>> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(Scenario::ALL.to_vec());
    }
    Scenario::parse(s).map(|sc| vec![sc]).ok_or_else(|| {
        Error::Config(format!(
            "unknown scenario {s:?}; expected sar, ms, fused or all"
        ))
    })
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let mut rc = RunConfig::load_or_default(a.config.as_deref())?;
    if a.checkpoint.is_some() {
        rc.paths.checkpoint = a.checkpoint.clone();
    }
    if a.manifest.is_some() {
        rc.paths.manifest = a.manifest.clone();
    }
    if a.out.is_some() {
        rc.paths.out = a.out.clone();
    }
    if a.scenario.is_some() {
        rc.scenario = a.scenario.clone();
    }
    let ckpt = require(&rc.paths.checkpoint, "checkpoint")?.clone();
    let scenarios = parse_scenarios(rc.scenario.as_deref().unwrap_or("all"))?;
    let split = Split::parse(&a.split)
        .ok_or_else(|| Error::Config(format!("unknown split {:?}", a.split)))?;

    let (model, _) = checkpoint::load(&ckpt)?;
    if a.config.is_some() {
        check_model_matches(&model, &rc.model)?;
    }
    let ckpt_dir = ckpt.parent().unwrap_or(Path::new(".")).to_path_buf();
    let stats_path = a.stats.clone().unwrap_or_else(|| ckpt_dir.join(STATS_FILE));
    let stats = NormStats::from_json(
        &std::fs::read_to_string(&stats_path).map_err(|e| Error::io(&stats_path, e))?,
    )?;
    let manifest = Manifest::read(require(&rc.paths.manifest, "manifest")?)?;
    let chips = load_split(&manifest, split)?;
    if chips.is_empty() {
        return Err(Error::EmptyInput(format!("manifest has no {split} chips")));
    }
    let out = rc.paths.out.clone().unwrap_or(ckpt_dir);
    create_dir(&out)?;

    println!(
        "{:<9} {:>7} {:>8} {:>9} {:>8} {:>8}",
        "scenario", "n_bands", "mIoU", "precision", "recall", "F1"
    );
    for sc in &scenarios {
        let (report, preds) = evaluate_scenario(&model, &chips, &stats, *sc, a.threshold)?;
        write_file(
            &out.join(format!("report_{}.json", sc.short_name())),
            &report.to_json(),
        )?;
        println!(
            "{:<9} {:>7} {:>8.4} {:>9.4} {:>8.4} {:>8.4}",
            sc.name(),
            report.n_bands,
            report.miou,
            report.precision,
            report.recall,
            report.f1
        );
        if a.dump_maps {
            let dir = if scenarios.len() == 1 {
                out.join("maps")
            } else {
                out.join("maps").join(sc.short_name())
            };
            create_dir(&dir)?;
            for p in &preds {
                p.save_png(&dir.join(format!("{}.png", p.id)))?;
            }
        }
    }
    Ok(())
}

/// Architecture fields of a config file must agree with the checkpoint.
fn check_model_matches(model: &ModelParams, cfg: &ModelConfig) -> Result<()> {
    let c = &model.config;
    if c.d_model != cfg.d_model
        || c.n_layers != cfg.n_layers
        || c.n_heads != cfg.n_heads
        || c.mlp_ratio != cfg.mlp_ratio
    {
        return Err(Error::Config(format!(
            "checkpoint has d_model {} / {} layers / {} heads, config asks for d_model {} / {} layers / {} heads",
            c.d_model, c.n_layers, c.n_heads, cfg.d_model, cfg.n_layers, cfg.n_heads
        )));
    }
    Ok(())
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let report = gradcheck::run_all(a.seed, &ModelConfig::default())?;
    print!("{report}");
    if report.passed() {
        println!(
            "all {} checks pass (max relative error {:.3e})",
            report.rows.len(),
            report.max_rel_err()
        );
        Ok(())
    } else {
        let failed: Vec<String> = report
            .failures()
            .map(|r| format!("{}/{} ({:.3e})", r.layer, r.tensor, r.max_rel_err))
            .collect();
        Err(Error::Numeric(format!(
            "gradient check failed: {}",
            failed.join(", ")
        )))
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}
