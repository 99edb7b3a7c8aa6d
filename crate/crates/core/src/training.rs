//! Alternating discriminator / generator updates with attention-weighted targets.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array4, Axis};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionMap, Normalization};
use crate::error::{Error, Result};
use crate::networks::checkpoint::{load_params_into, load_tensors, read_json, save_params, save_tensors, write_json};
use crate::networks::{latent_to_4d, DiscriminatorConfig, DiscriminatorState, GeneratorConfig, GeneratorState};
use crate::nn::{clip_global_norm, Adam, AdamConfig, Graph, ParamStore, Real};
use crate::rng::{derive_seed, standard_normal, stream_rng};
use crate::schedule::NoiseSchedule;

/// Which discriminator pass supplies the attention features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSource {
    Fake,
    Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Spatial size of the discriminator tap used for attention.
    pub attn_scale: usize,
    pub use_latent: bool,
    pub use_attention: bool,
    pub attention_source: AttentionSource,
    pub attention_normalization: Normalization,
    /// Draw independent noise for every forward-process sample instead of sharing one.
    pub fresh_noise: bool,
    pub generator_lr: f64,
    pub discriminator_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            attn_scale: 32,
            use_latent: true,
            use_attention: true,
            attention_source: AttentionSource::Fake,
            attention_normalization: Normalization::MinMax,
            fresh_noise: false,
            generator_lr: 1e-4,
            discriminator_lr: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            grad_clip: 1.0,
            batch_size: 8,
            max_steps: 5000,
            seed: 0,
            checkpoint_interval: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, discriminator: &DiscriminatorConfig) -> Result<()> {
        if !discriminator.tap_scales().contains(&self.attn_scale) {
            return Err(Error::config(
                "train.attn_scale",
                format!(
                    "{} is not a discriminator feature size (available: {:?})",
                    self.attn_scale,
                    discriminator.tap_scales()
                ),
            ));
        }
        for (key, v) in [
            ("train.generator_lr", self.generator_lr),
            ("train.discriminator_lr", self.discriminator_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be a positive finite number"));
            }
        }
        for (key, v) in [("train.adam_beta1", self.adam_beta1), ("train.adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(key, "must lie in [0, 1)"));
            }
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::config("train.grad_clip", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            ..AdamConfig::default()
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub t: usize,
    pub generator_loss: f64,
    pub discriminator_real_loss: f64,
    pub discriminator_fake_loss: f64,
    /// Fraction of the real and fake pairs classified correctly before the update.
    pub discriminator_accuracy: f64,
    pub wall_time_s: f64,
}

impl TrainLogRecord {
    /// The record with its timing field zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_time_s: 0.0,
            ..self.clone()
        }
    }
}

/// Training images and labels in model space (`[-1, 1]`).
#[derive(Debug, Clone)]
pub struct TrainData<F> {
    pub images: Array4<F>,
    pub labels: Array4<F>,
}

impl<F: Real> TrainData<F> {
    pub fn new(images: Array4<F>, labels: Array4<F>) -> Result<Self> {
        let (n, _, h, w) = images.dim();
        let (nl, _, hl, wl) = labels.dim();
        if n == 0 {
            return Err(Error::config("data", "training set is empty"));
        }
        if (n, h, w) != (nl, hl, wl) {
            return Err(Error::Shape(format!(
                "images {:?} and labels {:?} disagree",
                images.shape(),
                labels.shape()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, indices: &[usize]) -> Batch<F> {
        Batch {
            x0: self.labels.select(Axis(0), indices),
            image: self.images.select(Axis(0), indices),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batch<F> {
    /// Clean labels in `[-1, 1]`.
    pub x0: Array4<F>,
    pub image: Array4<F>,
}

/// Random draws shared by the discriminator and generator updates of one step.
#[derive(Debug, Clone)]
pub struct StepNoise<F> {
    /// Noise forming `x_t`.
    pub eps: Array4<F>,
    /// Noise for the real previous state; equals `eps` unless fresh noise is on.
    pub eps_prev: Array4<F>,
    /// Noise for the generated previous state.
    pub eps_fake: Array4<F>,
    /// Noise for the attention-weighted `x_t`.
    pub eps_att: Array4<F>,
    /// Latent codes, `[N, latent_dim]`; zeros when the latent pathway is off.
    pub z: Array2<F>,
}

impl<F: Real> StepNoise<F> {
    pub fn draw(rng: &mut ChaCha8Rng, label_shape: (usize, usize, usize, usize), latent_dim: usize, config: &TrainConfig) -> Self {
        let eps: Array4<F> = standard_normal(rng, label_shape);
        let (eps_prev, eps_fake, eps_att) = if config.fresh_noise {
            (
                standard_normal(rng, label_shape),
                standard_normal(rng, label_shape),
                standard_normal(rng, label_shape),
            )
        } else {
            (eps.clone(), eps.clone(), eps.clone())
        };
        let z = if config.use_latent {
            standard_normal(rng, (label_shape.0, latent_dim))
        } else {
            Array2::zeros((label_shape.0, latent_dim))
        };
        Self {
            eps,
            eps_prev,
            eps_fake,
            eps_att,
            z,
        }
    }
}

/// Outcome of the two discriminator updates of one step.
#[derive(Debug, Clone)]
pub struct DiscriminatorStep<F> {
    pub real_loss: f64,
    pub fake_loss: f64,
    pub accuracy: f64,
    /// Label-resolution attention map, all ones when attention is off.
    pub attention: AttentionMap<F>,
}

/// Networks, optimizers and step counter of a training run.
#[derive(Debug, Clone)]
pub struct Trainer<F: Real> {
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    pub generator: GeneratorState<F>,
    pub discriminator: DiscriminatorState<F>,
    pub generator_opt: Adam<F>,
    pub discriminator_opt: Adam<F>,
    /// Completed steps.
    pub step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    step: u64,
    train: TrainConfig,
    generator: GeneratorConfig,
    discriminator: DiscriminatorConfig,
    schedule: NoiseSchedule,
    generator_opt_steps: u64,
    discriminator_opt_steps: u64,
}

impl<F: Real> Trainer<F> {
    pub fn new(
        config: TrainConfig,
        generator: &GeneratorConfig,
        discriminator: &DiscriminatorConfig,
        schedule: NoiseSchedule,
    ) -> Result<Self> {
        config.validate(discriminator)?;
        if (generator.resolution, generator.label_channels) != (discriminator.resolution, discriminator.label_channels) {
            return Err(Error::config(
                "discriminator.resolution",
                "generator and discriminator must share resolution and label channels",
            ));
        }
        let generator = GeneratorState::new(generator, derive_seed(config.seed, 1))?;
        let discriminator = DiscriminatorState::new(discriminator, derive_seed(config.seed, 2))?;
        let generator_opt = Adam::new(config.adam(config.generator_lr), &generator.params);
        let discriminator_opt = Adam::new(config.adam(config.discriminator_lr), &discriminator.params);
        Ok(Self {
            config,
            schedule,
            generator,
            discriminator,
            generator_opt,
            discriminator_opt,
            step: 0,
        })
    }

    /// Draws the step index, batch and noise for step number `step`.
    pub fn draw_step(&self, data: &TrainData<F>, step: u64) -> (usize, Batch<F>, StepNoise<F>) {
        let mut rng = stream_rng(self.config.seed, step + 1);
        let t = rng.random_range(1..=self.schedule.timesteps());
        let n = data.len();
        let indices: Vec<usize> = if self.config.batch_size <= n {
            sample_indices(&mut rng, n, self.config.batch_size).into_vec()
        } else {
            (0..self.config.batch_size).map(|_| rng.random_range(0..n)).collect()
        };
        let batch = data.batch(&indices);
        let noise = StepNoise::draw(&mut rng, batch.x0.dim(), self.generator.config().latent_dim, &self.config);
        (t, batch, noise)
    }

    /// Loss and gradients of one discriminator pass with target `label`, plus
    /// logits and the requested feature tap.
    fn discriminator_pass(
        &self,
        x_t: &Array4<F>,
        x_prev: &Array4<F>,
        t: usize,
        label: F,
        tap: Option<usize>,
    ) -> Result<(f64, Vec<Array4<F>>, Vec<F>, Option<Array4<F>>)> {
        self.discriminator.net.check_inputs(x_t, x_prev)?;
        let mut g = Graph::new();
        let p = self.discriminator.params.bind(&mut g, true);
        let (a, b) = (g.input(x_t.clone()), g.input(x_prev.clone()));
        let pass = self.discriminator.net.forward(&mut g, &p, a, b, t);
        let loss = g.bce_with_logits(pass.logits, label);
        let value = g.scalar(loss).to_f64().unwrap();
        let logits = g.value(pass.logits).iter().copied().collect();
        let features = tap.and_then(|s| pass.tap(s)).map(|v| g.value(v).clone());
        let grads = g.backward(loss);
        Ok((value, self.discriminator.params.collect_grads(&p, &grads), logits, features))
    }

    /// Discriminator cross-entropy and its parameter gradients for one pair.
    pub fn discriminator_loss(&self, x_t: &Array4<F>, x_prev: &Array4<F>, t: usize, real: bool) -> Result<(f64, Vec<Array4<F>>)> {
        let label = if real { F::one() } else { F::zero() };
        let (loss, grads, _, _) = self.discriminator_pass(x_t, x_prev, t, label, None)?;
        Ok((loss, grads))
    }

    /// Mean squared error between `x0` and `G(x_t_att, t, z, I)`, with parameter gradients.
    pub fn generator_loss(
        &self,
        x_t_att: &Array4<F>,
        t: usize,
        z: &Array2<F>,
        image: &Array4<F>,
        x0: &Array4<F>,
    ) -> Result<(f64, Vec<Array4<F>>)> {
        self.generator.net.check_inputs(x_t_att, z, image)?;
        if x0.dim() != x_t_att.dim() {
            return Err(Error::Shape(format!(
                "target {:?} does not match input {:?}",
                x0.shape(),
                x_t_att.shape()
            )));
        }
        let mut g = Graph::new();
        let p = self.generator.params.bind(&mut g, true);
        let (xv, zv, iv) = (
            g.input(x_t_att.clone()),
            g.input(latent_to_4d(z)),
            g.input(image.clone()),
        );
        let out = self.generator.net.forward(&mut g, &p, xv, t, zv, iv);
        let loss = g.mse(out, x0);
        let value = g.scalar(loss).to_f64().unwrap();
        let grads = g.backward(loss);
        Ok((value, self.generator.params.collect_grads(&p, &grads)))
    }

    fn apply(clip: f64, opt: &mut Adam<F>, params: &mut ParamStore<F>, mut grads: Vec<Array4<F>>) {
        if clip > 0.0 {
            clip_global_norm(&mut grads, clip);
        }
        opt.step(params, &grads);
    }

    /// Real update then fake update of the discriminator. The generator is only read.
    pub fn discriminator_step(&mut self, batch: &Batch<F>, t: usize, noise: &StepNoise<F>) -> Result<DiscriminatorStep<F>> {
        let s = &self.schedule;
        let x_t = s.forward_sample(&batch.x0, t, &noise.eps)?;
        let x_prev = s.forward_reparam_prev(&batch.x0, t, &noise.eps_prev)?;
        let x0_hat = self.generator.predict_x0(&x_t, t, &noise.z, &batch.image)?;
        let x_prev_fake = s.forward_reparam_prev(&x0_hat, t, &noise.eps_fake)?;

        let cfg = &self.config;
        let tap_for = |source| (cfg.use_attention && cfg.attention_source == source).then_some(cfg.attn_scale);
        let (real_loss, grads, real_logits, real_features) =
            self.discriminator_pass(&x_t, &x_prev, t, F::one(), tap_for(AttentionSource::Real))?;
        finite("discriminator real loss", real_loss, self.step, t)?;
        Self::apply(cfg.grad_clip, &mut self.discriminator_opt, &mut self.discriminator.params, grads);

        let cfg = &self.config;
        let tap_for = |source| (cfg.use_attention && cfg.attention_source == source).then_some(cfg.attn_scale);
        let (fake_loss, grads, fake_logits, fake_features) =
            self.discriminator_pass(&x_t, &x_prev_fake, t, F::zero(), tap_for(AttentionSource::Fake))?;
        finite("discriminator fake loss", fake_loss, self.step, t)?;
        Self::apply(cfg.grad_clip, &mut self.discriminator_opt, &mut self.discriminator.params, grads);

        let correct = real_logits.iter().filter(|&&l| l > F::zero()).count()
            + fake_logits.iter().filter(|&&l| l < F::zero()).count();
        let accuracy = correct as f64 / (real_logits.len() + fake_logits.len()) as f64;

        let (n, _, h, w) = batch.x0.dim();
        let attention = match real_features.or(fake_features) {
            Some(features) => {
                let raw = attention::attention_map(&features)?;
                match self.config.attention_normalization {
                    Normalization::MinMax => attention::normalize_and_upsample(&raw, h, w)?,
                    Normalization::Raw => attention::upsample_bilinear(&raw, h, w)?,
                }
            }
            None => AttentionMap::ones(n, h, w),
        };
        Ok(DiscriminatorStep {
            real_loss,
            fake_loss,
            accuracy,
            attention,
        })
    }

    /// One generator update on attention-weighted targets. The discriminator is untouched.
    pub fn generator_step(&mut self, batch: &Batch<F>, t: usize, noise: &StepNoise<F>, attention: &AttentionMap<F>) -> Result<f64> {
        let x0_att = attention::apply_attention(&batch.x0, attention)?;
        let x_t_att = self.schedule.forward_sample(&x0_att, t, &noise.eps_att)?;
        let (loss, grads) = self.generator_loss(&x_t_att, t, &noise.z, &batch.image, &batch.x0)?;
        finite("generator loss", loss, self.step, t)?;
        Self::apply(self.config.grad_clip, &mut self.generator_opt, &mut self.generator.params, grads);
        Ok(loss)
    }

    /// Runs the next step and advances the counter.
    pub fn train_step(&mut self, data: &TrainData<F>) -> Result<TrainLogRecord> {
        let start = Instant::now();
        let (t, batch, noise) = self.draw_step(data, self.step);
        let d = self.discriminator_step(&batch, t, &noise)?;
        let generator_loss = self.generator_step(&batch, t, &noise, &d.attention)?;
        self.step += 1;
        Ok(TrainLogRecord {
            step: self.step,
            t,
            generator_loss,
            discriminator_real_loss: d.real_loss,
            discriminator_fake_loss: d.fake_loss,
            discriminator_accuracy: d.accuracy,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    }

    /// Trains until `config.max_steps`, appending JSON lines to `log` and
    /// checkpointing into `checkpoint_dir` when given.
    pub fn train(
        &mut self,
        data: &TrainData<F>,
        checkpoint_dir: Option<&Path>,
        mut log: Option<&mut dyn Write>,
    ) -> Result<Vec<TrainLogRecord>> {
        let mut records = Vec::new();
        while self.step < self.config.max_steps {
            let record = match self.train_step(data) {
                Ok(r) => r,
                Err(e @ Error::NonFinite(_)) => {
                    if let Some(dir) = checkpoint_dir {
                        self.dump_diagnostics(dir, &e)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&record)?;
                writeln!(w, "{line}").map_err(|e| Error::io(PathBuf::from("<train log>"), e))?;
            }
            if record.step % 50 == 0 || record.step == self.config.max_steps {
                tracing::info!(
                    step = record.step,
                    t = record.t,
                    g_loss = record.generator_loss,
                    d_real = record.discriminator_real_loss,
                    d_fake = record.discriminator_fake_loss,
                    d_acc = record.discriminator_accuracy,
                    "train"
                );
            }
            records.push(record);
            let interval = self.config.checkpoint_interval;
            if let Some(dir) = checkpoint_dir {
                if interval > 0 && self.step.is_multiple_of(interval) && self.step < self.config.max_steps {
                    self.save(&dir.join(format!("step-{:06}", self.step)))?;
                }
            }
        }
        if let Some(dir) = checkpoint_dir {
            self.save(&dir.join("final"))?;
        }
        Ok(records)
    }

    fn dump_diagnostics(&self, dir: &Path, error: &Error) -> Result<()> {
        let path = dir.join("diagnostics");
        self.save(&path)?;
        std::fs::write(path.join("error.txt"), error.to_string()).map_err(|e| Error::io(&path, e))
    }

    /// Held-out real/fake accuracy of the discriminator over `data`, with step
    /// indices and noise drawn from `seed`. Parameters are not updated.
    pub fn discriminator_accuracy(&self, data: &TrainData<F>, seed: u64) -> Result<f64> {
        let mut rng = stream_rng(seed, 0);
        let (mut correct, mut total) = (0usize, 0usize);
        let bs = self.config.batch_size.max(1);
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(bs) {
            let batch = data.batch(chunk);
            let t = rng.random_range(1..=self.schedule.timesteps());
            let noise = StepNoise::draw(&mut rng, batch.x0.dim(), self.generator.config().latent_dim, &self.config);
            let x_t = self.schedule.forward_sample(&batch.x0, t, &noise.eps)?;
            let x_prev = self.schedule.forward_reparam_prev(&batch.x0, t, &noise.eps_prev)?;
            let x0_hat = self.generator.predict_x0(&x_t, t, &noise.z, &batch.image)?;
            let x_fake = self.schedule.forward_reparam_prev(&x0_hat, t, &noise.eps_fake)?;
            let real = self.discriminator.forward(&x_t, &x_prev, t)?.logits;
            let fake = self.discriminator.forward(&x_t, &x_fake, t)?.logits;
            correct += real.iter().filter(|&&l| l > F::zero()).count() + fake.iter().filter(|&&l| l < F::zero()).count();
            total += real.len() + fake.len();
        }
        Ok(correct as f64 / total as f64)
    }

    /// Writes networks, optimizer moments and metadata into directory `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_params(&dir.join("generator.safetensors"), &self.generator.params)?;
        save_params(&dir.join("discriminator.safetensors"), &self.discriminator.params)?;
        let mut moments = Vec::new();
        for (prefix, store, opt) in [
            ("generator", &self.generator.params, &self.generator_opt),
            ("discriminator", &self.discriminator.params, &self.discriminator_opt),
        ] {
            for ((name, _), (m, v)) in store.iter().zip(opt.first.iter().zip(&opt.second)) {
                moments.push((format!("{prefix}.m.{name}"), m));
                moments.push((format!("{prefix}.v.{name}"), v));
            }
        }
        save_tensors(&dir.join("optimizer.safetensors"), moments)?;
        write_json(
            &dir.join("checkpoint.json"),
            &CheckpointMeta {
                step: self.step,
                train: self.config.clone(),
                generator: self.generator.config().clone(),
                discriminator: self.discriminator.config().clone(),
                schedule: self.schedule.clone(),
                generator_opt_steps: self.generator_opt.steps,
                discriminator_opt_steps: self.discriminator_opt.steps,
            },
        )
    }

    /// Restores a trainer written by [`Trainer::save`]. Training resumes at the saved step.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta: CheckpointMeta = read_json(&dir.join("checkpoint.json"))?;
        let mut trainer = Self::new(meta.train, &meta.generator, &meta.discriminator, meta.schedule)?;
        load_params_into(&dir.join("generator.safetensors"), &mut trainer.generator.params)?;
        load_params_into(&dir.join("discriminator.safetensors"), &mut trainer.discriminator.params)?;
        let mut moments = load_tensors::<F>(&dir.join("optimizer.safetensors"))?;
        for (prefix, store, opt) in [
            ("generator", &trainer.generator.params, &mut trainer.generator_opt),
            ("discriminator", &trainer.discriminator.params, &mut trainer.discriminator_opt),
        ] {
            for (i, (name, value)) in store.iter().enumerate() {
                for (kind, buf) in [("m", &mut opt.first), ("v", &mut opt.second)] {
                    let key = format!("{prefix}.{kind}.{name}");
                    let tensor = moments
                        .remove(&key)
                        .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks `{key}`")))?;
                    if tensor.dim() != value.dim() {
                        return Err(Error::Checkpoint(format!("optimizer state `{key}` has the wrong shape")));
                    }
                    buf[i] = tensor;
                }
            }
        }
        if let Some(extra) = moments.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected optimizer tensor `{extra}`")));
        }
        trainer.generator_opt.steps = meta.generator_opt_steps;
        trainer.discriminator_opt.steps = meta.discriminator_opt_steps;
        trainer.step = meta.step;
        Ok(trainer)
    }
}

/// Generator and schedule stored in a checkpoint directory, for inference.
pub fn load_generator<F: Real>(dir: &Path) -> Result<(GeneratorState<F>, NoiseSchedule, TrainConfig)> {
    let meta: CheckpointMeta = read_json(&dir.join("checkpoint.json"))?;
    let mut generator = GeneratorState::new(&meta.generator, 0)?;
    load_params_into(&dir.join("generator.safetensors"), &mut generator.params)?;
    Ok((generator, meta.schedule, meta.train))
}

fn finite(what: &str, value: f64, step: u64, t: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} is {value} at step {} (t = {t})", step + 1)))
    }
}
