use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::aucode::TargetStrategy;
use crate::error::{Error, Result};
use crate::losses::{AttentionNorm, LossWeights, PenaltyMode};
use crate::models::{CriticConfig, GeneratorConfig};

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// First epoch of the linear decay.
    pub decay_start: usize,
    pub batch_size: usize,
    /// Critic updates per generator update.
    pub critic_steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub image_size: usize,
    pub num_aus: usize,
    /// Optional AU schema file; `AU1..AUn` style defaults otherwise.
    pub schema: Option<PathBuf>,
    pub gen_width: usize,
    pub gen_residual_blocks: usize,
    pub critic_width: usize,
    pub critic_layers: usize,
    pub weights: LossWeights,
    pub target_strategy: TargetStrategy,
    pub attention_norm: AttentionNorm,
    pub penalty: PenaltyMode,
    pub dataset: Option<PathBuf>,
    pub holdout_fraction: f64,
    /// Cap on held-out images used for per-epoch metrics (0 = all).
    pub eval_limit: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Epochs between checkpoints (0 = final only).
    pub checkpoint_every: usize,
    /// Generator steps between loss records in the metrics log (0 = none).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            decay_start: 20,
            batch_size: 25,
            critic_steps: 5,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
            image_size: 128,
            num_aus: 14,
            schema: None,
            gen_width: 64,
            gen_residual_blocks: 6,
            critic_width: 64,
            critic_layers: 6,
            weights: LossWeights::default(),
            target_strategy: TargetStrategy::PoolDraw,
            attention_norm: AttentionNorm::MeanSquare,
            penalty: PenaltyMode::SecondOrder,
            dataset: None,
            holdout_fraction: 0.1,
            eval_limit: 0,
            checkpoint_dir: None,
            checkpoint_every: 1,
            log_every: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::invalid(format!("bad value `{v}` for `{key}`")))
}

fn opt_path(v: &str) -> Option<PathBuf> {
    if v.is_empty() || v == "none" {
        None
    } else {
        Some(PathBuf::from(v))
    }
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl TrainConfig {
    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig::new(self.image_size, self.num_aus)
            .with_width(self.gen_width)
            .with_residual_blocks(self.gen_residual_blocks)
    }

    pub fn critic_config(&self) -> CriticConfig {
        CriticConfig::new(self.image_size, self.num_aus)
            .with_width(self.critic_width)
            .with_downsample_layers(self.critic_layers)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.decay_start >= self.epochs {
            return Err(Error::invalid(format!(
                "need 0 <= decay_start < epochs, got decay_start={} epochs={}",
                self.decay_start, self.epochs
            )));
        }
        if self.batch_size == 0 || self.critic_steps == 0 {
            return Err(Error::invalid("batch_size and critic_steps must be at least 1"));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("need lr > 0 and betas in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::invalid("holdout_fraction must be in [0, 1)"));
        }
        self.weights.validate()?;
        self.generator_config().validate()?;
        self.critic_config().validate()
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse(key, v)?,
            "decay_start" => self.decay_start = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "critic_steps" => self.critic_steps = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "num_aus" => self.num_aus = parse(key, v)?,
            "schema" => self.schema = opt_path(v),
            "gen_width" => self.gen_width = parse(key, v)?,
            "gen_residual_blocks" => self.gen_residual_blocks = parse(key, v)?,
            "critic_width" => self.critic_width = parse(key, v)?,
            "critic_layers" => self.critic_layers = parse(key, v)?,
            "lambda_gp" => self.weights.gp = parse(key, v)?,
            "lambda_a" => self.weights.attention = parse(key, v)?,
            "lambda_tv" => self.weights.tv = parse(key, v)?,
            "lambda_y" => self.weights.expression = parse(key, v)?,
            "lambda_idt" => self.weights.identity = parse(key, v)?,
            "lambda_adv" => self.weights.adversarial = parse(key, v)?,
            "target_strategy" => self.target_strategy = v.parse()?,
            "attention_norm" => self.attention_norm = v.parse()?,
            "penalty" => self.penalty = v.parse()?,
            "dataset" => self.dataset = opt_path(v),
            "holdout_fraction" => self.holdout_fraction = parse(key, v)?,
            "eval_limit" => self.eval_limit = parse(key, v)?,
            "checkpoint_dir" => self.checkpoint_dir = opt_path(v),
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            _ => return Err(Error::invalid(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults. Blank lines and
    /// `#` comments are ignored; unknown keys are errors.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply(text, origin)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`".into()))?;
            self.set(k.trim(), v.trim()).map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        TrainConfig::parse(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    /// Every field as `key = value`; `parse(to_text())` restores `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &self.weights;
        let rows: Vec<(&str, String)> = vec![
            ("epochs", self.epochs.to_string()),
            ("decay_start", self.decay_start.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("critic_steps", self.critic_steps.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("seed", self.seed.to_string()),
            ("image_size", self.image_size.to_string()),
            ("num_aus", self.num_aus.to_string()),
            ("schema", show_path(&self.schema)),
            ("gen_width", self.gen_width.to_string()),
            ("gen_residual_blocks", self.gen_residual_blocks.to_string()),
            ("critic_width", self.critic_width.to_string()),
            ("critic_layers", self.critic_layers.to_string()),
            ("lambda_gp", w.gp.to_string()),
            ("lambda_a", w.attention.to_string()),
            ("lambda_tv", w.tv.to_string()),
            ("lambda_y", w.expression.to_string()),
            ("lambda_idt", w.identity.to_string()),
            ("lambda_adv", w.adversarial.to_string()),
            ("target_strategy", self.target_strategy.to_string()),
            ("attention_norm", self.attention_norm.to_string()),
            ("penalty", self.penalty.to_string()),
            ("dataset", show_path(&self.dataset)),
            ("holdout_fraction", self.holdout_fraction.to_string()),
            ("eval_limit", self.eval_limit.to_string()),
            ("checkpoint_dir", show_path(&self.checkpoint_dir)),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("log_every", self.log_every.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Learning rate for `epoch`: `base` before `decay_start`, then
/// `base * (epochs - epoch) / (epochs - decay_start)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::invalid(format!(
            "epoch {epoch} outside the schedule of {} epochs",
            cfg.epochs
        )));
    }
    if epoch < cfg.decay_start {
        return Ok(cfg.lr);
    }
    let remaining = (cfg.epochs - epoch) as f64 / (cfg.epochs - cfg.decay_start) as f64;
    Ok(cfg.lr * remaining)
}
