//! Alternating critic/generator optimization, schedule, metrics and
//! checkpoints.

pub mod checkpoint;
pub mod config;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use rand::Rng as _;

pub use self::checkpoint::{Checkpoint, CheckpointMeta, RngState};
pub use self::config::{lr_schedule, TrainConfig};

use crate::aucode::{self, AuSchema, AuVector};
use crate::error::{Error, Result};
use crate::facedata::{self, batch_tensor, AnnotatedImage, ImageTensor, TrainingTriplet};
use crate::losses::{self, AttentionNorm, LossReport, LossWeights, PenaltyMode};
use crate::models::{au_batch, compose, Model};
use crate::numerics::ops::per_sample_sum;
use crate::numerics::{seeded, AdamState, Graph, Real, Rng, Tensor};

const GP_RNG_SALT: u64 = 0x6770_5f72_6e67;
const EVAL_SALT: u64 = 0x6576_616c;

fn batch_inputs(batch: &[TrainingTriplet]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let n = batch.first().map(|t| t.y_r.len()).ok_or_else(|| Error::invalid("empty batch"))?;
    let images: Vec<&ImageTensor> = batch.iter().map(|t| t.image).collect();
    let yr: Vec<&AuVector> = batch.iter().map(|t| t.y_r).collect();
    let yg: Vec<&AuVector> = batch.iter().map(|t| &t.y_g).collect();
    Ok((batch_tensor(&images)?, au_batch(&yr, n)?, au_batch(&yg, n)?))
}

fn check_finite(report: &LossReport, step: u64) -> Result<()> {
    match report.non_finite() {
        Some(term) => Err(Error::NonFinite {
            term: term.to_string(),
            step,
        }),
        None => Ok(()),
    }
}

/// One critic update on `batch`: fakes come from a frozen generator pass.
/// Generator parameters are untouched.
pub fn critic_step(
    model: &mut Model<f32>,
    adam: &mut AdamState<f32>,
    batch: &[TrainingTriplet],
    weights: &LossWeights,
    mode: PenaltyMode,
    rng: &mut Rng,
    step: u64,
) -> Result<LossReport> {
    let (img, yr, yg) = batch_inputs(batch)?;
    let grads = {
        let g = Graph::new();
        let gp = model.gen_params.bind(&g, false);
        let cp = model.critic_params.bind(&g, true);
        let real = g.constant(img);
        let out = model.generator.forward(&gp, real, g.constant(yg))?;
        let fake = compose(real, &out)?.detach();
        let loss = losses::critic_loss(&model.critic, &cp, real, g.constant(yr), fake, weights, mode, rng)?;
        check_finite(&loss.report, step)?;
        (cp.grad(loss.total)?, loss.report)
    };
    adam.update(&mut model.critic_params, &grads.0)?;
    Ok(grads.1)
}

/// One generator update on `batch` with both passes. Critic parameters are
/// untouched.
pub fn generator_step(
    model: &mut Model<f32>,
    adam: &mut AdamState<f32>,
    batch: &[TrainingTriplet],
    weights: &LossWeights,
    norm: AttentionNorm,
    step: u64,
) -> Result<LossReport> {
    let (img, yr, yg) = batch_inputs(batch)?;
    let (grads, report) = {
        let g = Graph::new();
        let gp = model.gen_params.bind(&g, true);
        let cp = model.critic_params.bind(&g, false);
        let loss = losses::generator_loss(
            &model.generator,
            &gp,
            &model.critic,
            &cp,
            g.constant(img),
            g.constant(yr),
            g.constant(yg),
            weights,
            norm,
        )?;
        check_finite(&loss.report, step)?;
        (gp.grad(loss.total)?, loss.report)
    };
    adam.update(&mut model.gen_params, &grads)?;
    Ok(report)
}

/// Held-out quality measures.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalMetrics {
    pub samples: usize,
    /// Mean |D_y(I) - y_r| over samples and AUs.
    pub au_mae: f64,
    /// Mean |D_y(G(I|y_g)) - y_g| for drawn targets.
    pub expression_error: f64,
    /// Mean |G(I|y_r) - I| (editing to the image's own annotation).
    pub identity_error: f64,
    /// Mean |G(G(I|y_g)|y_r) - I|.
    pub cycle_l1: f64,
    /// Mean critic input-gradient norm at real/fake interpolates.
    pub gp_norm: f64,
}

impl EvalMetrics {
    pub fn record(&self) -> String {
        format!(
            "samples={} au_mae={} expression_error={} identity_error={} cycle_l1={} gp_norm={}",
            self.samples, self.au_mae, self.expression_error, self.identity_error, self.cycle_l1, self.gp_norm
        )
    }
}

fn mean_abs<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x - *y).abs().to_f64().unwrap_or(f64::NAN))
        .sum::<f64>()
}

/// Evaluates `model` on `indices` of `data`. Targets and interpolation
/// weights come from `seed` only, so repeated calls agree.
pub fn evaluate(model: &Model<f32>, data: &[AnnotatedImage], indices: &[usize], seed: u64) -> Result<EvalMetrics> {
    if indices.is_empty() {
        return Ok(EvalMetrics::default());
    }
    let n = model.num_aus();
    let mut rng = seeded(seed ^ EVAL_SALT);
    let pool: Vec<&AuVector> = indices.iter().map(|&i| &data[i].aus).collect();
    let (mut au, mut expr, mut idt, mut cyc, mut gpn) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for chunk in indices.chunks(25) {
        let images: Vec<&ImageTensor> = chunk.iter().map(|&i| &data[i].image).collect();
        let yr: Vec<&AuVector> = chunk.iter().map(|&i| &data[i].aus).collect();
        let targets = chunk
            .iter()
            .map(|_| aucode::sample_target(&pool, crate::aucode::TargetStrategy::PoolDraw, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let yg: Vec<&AuVector> = targets.iter().collect();
        let eps: Vec<f64> = chunk.iter().map(|_| rng.random::<f64>()).collect();

        let g = Graph::new();
        let gp = model.gen_params.bind(&g, false);
        let cp = model.critic_params.bind(&g, false);
        let img = g.constant(batch_tensor::<f32>(&images)?);
        let yr_t = g.constant(au_batch::<f32>(&yr, n)?);
        let yg_t = g.constant(au_batch::<f32>(&yg, n)?);

        let real_est = model.critic.forward(&cp, img)?.aus;
        au += mean_abs(&real_est.value(), &yr_t.value());

        let same = compose(img, &model.generator.forward(&gp, img, yr_t)?)?;
        idt += mean_abs(&same.value(), &img.value());

        let fake = compose(img, &model.generator.forward(&gp, img, yg_t)?)?;
        let fake_est = model.critic.forward(&cp, fake)?.aus;
        expr += mean_abs(&fake_est.value(), &yg_t.value());

        let back = compose(fake, &model.generator.forward(&gp, fake, yr_t)?)?;
        cyc += mean_abs(&back.value(), &img.value());

        let mut es = vec![1; 4];
        es[0] = chunk.len();
        let e = g.constant(Tensor::from_f64(&es, &eps)?);
        let mixed = e.mul(img)?.add(e.neg().add_scalar(1.0).mul(fake)?)?;
        let x = g.leaf_arc(mixed.value(), true);
        let d = losses::realism(&model.critic.forward(&cp, x)?)?.sum();
        let gx = g.grad(d, &[x], false)?[0];
        let norms = per_sample_sum(gx.square())?.sqrt();
        gpn += norms.value().data().iter().map(|v| *v as f64).sum::<f64>();
    }
    let k = indices.len() as f64;
    let px = (3 * model.image_size() * model.image_size()) as f64;
    Ok(EvalMetrics {
        samples: indices.len(),
        au_mae: au / (k * n as f64),
        expression_error: expr / (k * n as f64),
        identity_error: idt / (k * px),
        cycle_l1: cyc / (k * px),
        gp_norm: gpn / k,
    })
}

/// Summary of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub critic_steps: u64,
    pub gen_steps: u64,
    /// Mean of every loss term over the epoch's steps.
    pub means: Vec<(String, f64)>,
    pub eval: EvalMetrics,
}

impl EpochMetrics {
    pub fn mean(&self, term: &str) -> Option<f64> {
        self.means.iter().find(|(n, _)| n == term).map(|(_, v)| *v)
    }

    /// `epoch=<e> lr=... <term>=<mean> ... heldout.<metric>=...`
    pub fn record(&self) -> String {
        let mut s = format!(
            "epoch={} lr={} critic_steps={} gen_steps={}",
            self.epoch, self.lr, self.critic_steps, self.gen_steps
        );
        for (k, v) in &self.means {
            s.push_str(&format!(" {k}={v}"));
        }
        for part in self.eval.record().split(' ') {
            s.push_str(" heldout.");
            s.push_str(part);
        }
        s
    }
}

#[derive(Default)]
struct Accumulator {
    sums: BTreeMap<&'static str, (f64, usize)>,
    order: Vec<&'static str>,
}

impl Accumulator {
    fn add(&mut self, r: &LossReport) {
        for (k, v) in r.entries() {
            let e = self.sums.entry(k).or_insert_with(|| {
                self.order.push(k);
                (0.0, 0)
            });
            e.0 += v;
            e.1 += 1;
        }
    }

    fn means(&self) -> Vec<(String, f64)> {
        self.order
            .iter()
            .map(|k| {
                let (s, n) = self.sums[k];
                (k.to_string(), s / n as f64)
            })
            .collect()
    }
}

/// Result of [`Trainer::run`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochMetrics>,
    /// Every line written to the metrics log, in order.
    pub log: Vec<String>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Training state over a borrowed dataset.
pub struct Trainer<'d> {
    cfg: TrainConfig,
    schema: AuSchema,
    data: &'d [AnnotatedImage],
    train_idx: Vec<usize>,
    held_idx: Vec<usize>,
    pub model: Model<f32>,
    pub gen_adam: AdamState<f32>,
    pub critic_adam: AdamState<f32>,
    rng: Rng,
    epoch: usize,
    critic_steps: u64,
    gen_steps: u64,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: TrainConfig, schema: AuSchema, data: &'d [AnnotatedImage]) -> Result<Self> {
        cfg.validate()?;
        let mut init = seeded(cfg.seed);
        let model = Model::init(cfg.generator_config(), cfg.critic_config(), &mut init)?;
        let gen_adam = AdamState::new(&model.gen_params, cfg.lr, cfg.beta1, cfg.beta2);
        let critic_adam = AdamState::new(&model.critic_params, cfg.lr, cfg.beta1, cfg.beta2);
        let rng = seeded(cfg.seed ^ GP_RNG_SALT);
        Self::assemble(cfg, schema, data, model, gen_adam, critic_adam, rng, 0, 0, 0)
    }

    /// Continues the run stored in `ck` on the same dataset.
    pub fn resume(ck: Checkpoint, data: &'d [AnnotatedImage]) -> Result<Self> {
        let m = ck.meta;
        Self::assemble(
            m.config,
            m.schema,
            data,
            ck.model,
            ck.gen_adam,
            ck.critic_adam,
            m.rng.restore(),
            m.epoch,
            m.critic_steps,
            m.gen_steps,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cfg: TrainConfig,
        schema: AuSchema,
        data: &'d [AnnotatedImage],
        model: Model<f32>,
        gen_adam: AdamState<f32>,
        critic_adam: AdamState<f32>,
        rng: Rng,
        epoch: usize,
        critic_steps: u64,
        gen_steps: u64,
    ) -> Result<Self> {
        if schema.len() != cfg.num_aus {
            return Err(Error::AuLength {
                expected: cfg.num_aus,
                got: schema.len(),
            });
        }
        for item in data {
            if item.aus.len() != cfg.num_aus {
                return Err(Error::AuLength {
                    expected: cfg.num_aus,
                    got: item.aus.len(),
                });
            }
            if item.image.height() != cfg.image_size || item.image.width() != cfg.image_size {
                return Err(Error::invalid(format!(
                    "{} is {}x{}, training expects {}x{}",
                    item.source,
                    item.image.height(),
                    item.image.width(),
                    cfg.image_size,
                    cfg.image_size
                )));
            }
        }
        let (train_idx, mut held_idx) = facedata::split_indices(data.len(), cfg.seed, cfg.holdout_fraction);
        if train_idx.is_empty() {
            return Err(Error::invalid("cannot train on an empty dataset"));
        }
        if cfg.eval_limit > 0 {
            held_idx.truncate(cfg.eval_limit);
        }
        Ok(Trainer {
            cfg,
            schema,
            data,
            train_idx,
            held_idx,
            model,
            gen_adam,
            critic_adam,
            rng,
            epoch,
            critic_steps,
            gen_steps,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn schema(&self) -> &AuSchema {
        &self.schema
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step_counts(&self) -> (u64, u64) {
        (self.critic_steps, self.gen_steps)
    }

    pub fn held_out(&self) -> &[usize] {
        &self.held_idx
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train_idx
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// Runs one pass over the training split: groups of `critic_steps`
    /// critic batches followed by one generator batch, all drawn from the
    /// same shuffled stream. Returns the epoch summary and the per-step log
    /// lines.
    pub fn run_epoch(&mut self) -> Result<(EpochMetrics, Vec<String>)> {
        if self.is_finished() {
            return Err(Error::invalid("training already finished"));
        }
        let epoch = self.epoch;
        let lr = lr_schedule(epoch, &self.cfg)?;
        self.gen_adam.lr = lr;
        self.critic_adam.lr = lr;
        let batches = facedata::make_triplets(
            self.data,
            &self.train_idx,
            self.cfg.seed,
            epoch,
            self.cfg.target_strategy,
            self.cfg.batch_size,
        )?;
        let mut acc = Accumulator::default();
        let mut lines = Vec::new();
        let group = self.cfg.critic_steps + 1;
        for (i, batch) in batches.iter().enumerate() {
            if i % group < self.cfg.critic_steps {
                let gen_digest = cfg!(debug_assertions).then(|| self.model.gen_params.digest());
                self.critic_steps += 1;
                let r = critic_step(
                    &mut self.model,
                    &mut self.critic_adam,
                    batch,
                    &self.cfg.weights,
                    self.cfg.penalty,
                    &mut self.rng,
                    self.critic_steps,
                )?;
                if let Some(d) = gen_digest {
                    debug_assert_eq!(d, self.model.gen_params.digest(), "critic step touched the generator");
                }
                acc.add(&r);
            } else {
                let critic_digest = cfg!(debug_assertions).then(|| self.model.critic_params.digest());
                self.gen_steps += 1;
                let r = generator_step(
                    &mut self.model,
                    &mut self.gen_adam,
                    batch,
                    &self.cfg.weights,
                    self.cfg.attention_norm,
                    self.gen_steps,
                )?;
                if let Some(d) = critic_digest {
                    debug_assert_eq!(d, self.model.critic_params.digest(), "generator step touched the critic");
                }
                if self.cfg.log_every > 0 && self.gen_steps % self.cfg.log_every as u64 == 0 {
                    lines.push(r.record(self.gen_steps));
                }
                acc.add(&r);
            }
        }
        self.epoch += 1;
        let eval = evaluate(&self.model, self.data, &self.held_idx, self.cfg.seed)?;
        let metrics = EpochMetrics {
            epoch: self.epoch,
            lr,
            critic_steps: self.critic_steps,
            gen_steps: self.gen_steps,
            means: acc.means(),
            eval,
        };
        lines.push(metrics.record());
        Ok((metrics, lines))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                version: checkpoint::FORMAT_VERSION,
                epoch: self.epoch,
                critic_steps: self.critic_steps,
                gen_steps: self.gen_steps,
                config: self.cfg.clone(),
                schema: self.schema.clone(),
                rng: RngState::capture(&self.rng),
                digests: BTreeMap::new(),
            },
            model: self.model.clone(),
            gen_adam: self.gen_adam.clone(),
            critic_adam: self.critic_adam.clone(),
        }
    }

    /// Trains to the configured epoch count, writing checkpoints and the
    /// metrics log when a checkpoint directory is configured.
    pub fn run(&mut self) -> Result<TrainOutcome> {
        let dir = self.cfg.checkpoint_dir.clone();
        let mut log_file = match &dir {
            Some(d) => {
                std::fs::create_dir_all(d)?;
                Some(OpenOptions::new().create(true).append(true).open(d.join("metrics.log"))?)
            }
            None => None,
        };
        let mut outcome = TrainOutcome {
            epochs: Vec::new(),
            log: Vec::new(),
            final_checkpoint: None,
        };
        while !self.is_finished() {
            let (m, lines) = self.run_epoch()?;
            if let Some(f) = log_file.as_mut() {
                for l in &lines {
                    writeln!(f, "{l}")?;
                }
                f.flush()?;
            }
            log::info!("{}", m.record());
            outcome.log.extend(lines);
            outcome.epochs.push(m);
            if let Some(d) = &dir {
                let every = self.cfg.checkpoint_every;
                let last = self.is_finished();
                if last || (every > 0 && self.epoch % every == 0) {
                    let ck = self.checkpoint();
                    let path = d.join(format!("epoch_{:04}.ganm", self.epoch));
                    checkpoint::save(&ck, &path)?;
                    if last {
                        let fin = d.join("final.ganm");
                        checkpoint::save(&ck, &fin)?;
                        outcome.final_checkpoint = Some(fin);
                    }
                }
            }
        }
        Ok(outcome)
    }
}

/// Loads the configured dataset and trains from scratch.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let dir = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::invalid("config has no `dataset`"))?;
    let schema = match &cfg.schema {
        Some(p) => AuSchema::load(p)?,
        None if cfg.num_aus == AuSchema::default().len() => AuSchema::default(),
        None => AuSchema::numbered(cfg.num_aus)?,
    };
    let data = facedata::load_dataset_dir(dir, &schema)?;
    Trainer::new(cfg.clone(), schema, &data)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facedata::synth::{self, SyntheticAuMap, SyntheticSpec};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            decay_start: 0,
            batch_size: 2,
            image_size: 32,
            num_aus: 4,
            gen_width: 4,
            gen_residual_blocks: 1,
            critic_width: 4,
            critic_layers: 5,
            seed: 3,
            holdout_fraction: 0.2,
            checkpoint_every: 1,
            log_every: 1,
            ..TrainConfig::default()
        }
    }

    fn tiny_data(n: usize) -> (AuSchema, Vec<AnnotatedImage>) {
        let schema = AuSchema::numbered(4).unwrap();
        let spec = SyntheticSpec::new(n, 32, 5).with_schema(schema.clone(), SyntheticAuMap::leading());
        (schema, synth::generate(&spec).unwrap())
    }

    #[test]
    fn steps_are_isolated_and_deterministic() {
        let (schema, data) = tiny_data(4);
        let run = || {
            let mut t = Trainer::new(tiny_cfg(), schema.clone(), &data).unwrap();
            let batches = facedata::make_triplets(&data, &[0, 1, 2, 3], 1, 0, Default::default(), 2).unwrap();
            let gd = t.model.gen_params.digest();
            let w = t.cfg.weights;
            let c = critic_step(&mut t.model, &mut t.critic_adam, &batches[0], &w, PenaltyMode::SecondOrder, &mut t.rng, 1)
                .unwrap();
            assert_eq!(gd, t.model.gen_params.digest());
            assert!(c.get("gp").unwrap() >= 0.0);
            let cd = t.model.critic_params.digest();
            let g = generator_step(&mut t.model, &mut t.gen_adam, &batches[1], &w, AttentionNorm::MeanSquare, 1)
                .unwrap();
            assert_eq!(cd, t.model.critic_params.digest());
            assert!(g.get("attn_tv_first").is_some() && g.get("attn_tv_cycle").is_some());
            assert_eq!(t.critic_adam.step, 1);
            assert_eq!(t.gen_adam.step, 1);
            (c, g, t.model.gen_params.digest())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_sample_generator_step_smoke() {
        let (schema, data) = tiny_data(2);
        let mut t = Trainer::new(tiny_cfg(), schema, &data).unwrap();
        let batch = vec![TrainingTriplet {
            image: &data[0].image,
            y_r: &data[0].aus,
            y_g: data[1].aus.clone(),
        }];
        let before = t.model.gen_params.digest();
        let w = t.cfg.weights;
        generator_step(&mut t.model, &mut t.gen_adam, &batch, &w, AttentionNorm::MeanSquare, 1).unwrap();
        assert_ne!(before, t.model.gen_params.digest());
    }

    #[test]
    fn update_ratio_and_epoch_records() {
        let (schema, data) = tiny_data(30);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..tiny_cfg()
        };
        let mut t = Trainer::new(cfg, schema, &data).unwrap();
        let out = t.run().unwrap();
        assert_eq!(out.epochs.len(), 2);
        // 24 training images in batches of 2: 12 batches = 2 groups of 5 + 1.
        assert_eq!(t.step_counts(), (20, 4));
        assert_eq!(out.epochs[1].lr, 5e-5);
        let log = std::fs::read_to_string(dir.path().join("metrics.log")).unwrap();
        assert_eq!(log.lines().filter(|l| l.starts_with("epoch=")).count(), 2);
        assert_eq!(log.lines().filter(|l| l.starts_with("step=")).count(), 4);
        assert!(dir.path().join("epoch_0001.ganm").exists());
        assert!(out.final_checkpoint.unwrap().ends_with("final.ganm"));
    }

    #[test]
    fn resume_reproduces_the_trajectory() {
        let (schema, data) = tiny_data(30);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..tiny_cfg()
        };
        let full = Trainer::new(cfg.clone(), schema.clone(), &data).unwrap().run().unwrap();
        let ck = checkpoint::load(&dir.path().join("epoch_0001.ganm")).unwrap();
        let mut resumed = Trainer::resume(ck, &data).unwrap();
        let (m, _) = resumed.run_epoch().unwrap();
        assert_eq!(m.record(), full.epochs[1].record());
        let fin = checkpoint::load(&dir.path().join("final.ganm")).unwrap();
        assert_eq!(resumed.model.gen_params, fin.model.gen_params);
        assert_eq!(resumed.model.critic_params, fin.model.critic_params);
    }

    #[test]
    fn non_finite_loss_names_the_term() {
        let (schema, data) = tiny_data(4);
        let mut t = Trainer::new(tiny_cfg(), schema, &data).unwrap();
        let name = t.model.critic_params.names().next().unwrap().clone();
        t.model.critic_params.get_mut(&name).unwrap().data_mut()[0] = f32::NAN;
        let before = t.model.gen_params.clone();
        let batches = facedata::make_triplets(&data, &[0, 1, 2, 3], 1, 0, Default::default(), 2).unwrap();
        let w = t.cfg.weights;
        match generator_step(&mut t.model, &mut t.gen_adam, &batches[0], &w, AttentionNorm::MeanSquare, 7) {
            Err(Error::NonFinite { term, step }) => {
                assert_eq!(step, 7);
                assert!(!term.is_empty());
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(t.model.gen_params, before);
    }

    #[test]
    fn evaluation_is_repeatable() {
        let (schema, data) = tiny_data(6);
        let t = Trainer::new(tiny_cfg(), schema, &data).unwrap();
        let a = evaluate(&t.model, &data, &[0, 1, 2], 4).unwrap();
        assert_eq!(a, evaluate(&t.model, &data, &[0, 1, 2], 4).unwrap());
        assert_eq!(a.samples, 3);
        assert!(a.identity_error >= 0.0 && a.gp_norm > 0.0);
    }
}
