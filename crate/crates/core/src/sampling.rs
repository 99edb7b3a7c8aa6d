//! Few-step reverse process and multi-instance prediction.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array2, Array4, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::GeneratorState;
use crate::nn::Real;
use crate::rng::{derive_seed, standard_normal, stream_rng};
use crate::schedule::NoiseSchedule;

/// Anything that maps `(x_t, t, z, I)` to a clean-label estimate.
pub trait Denoiser<F: Real>: Sync {
    fn latent_dim(&self) -> usize;

    /// Step count the model was trained for, when known.
    fn trained_timesteps(&self) -> Option<usize> {
        None
    }

    fn predict_x0(&self, x_t: &Array4<F>, t: usize, z: &Array2<F>, image: &Array4<F>) -> Result<Array4<F>>;
}

impl<F: Real, D: Denoiser<F> + ?Sized> Denoiser<F> for &D {
    fn latent_dim(&self) -> usize {
        (**self).latent_dim()
    }

    fn trained_timesteps(&self) -> Option<usize> {
        (**self).trained_timesteps()
    }

    fn predict_x0(&self, x_t: &Array4<F>, t: usize, z: &Array2<F>, image: &Array4<F>) -> Result<Array4<F>> {
        (**self).predict_x0(x_t, t, z, image)
    }
}

impl<F: Real> Denoiser<F> for GeneratorState<F> {
    fn latent_dim(&self) -> usize {
        self.config().latent_dim
    }

    fn predict_x0(&self, x_t: &Array4<F>, t: usize, z: &Array2<F>, image: &Array4<F>) -> Result<Array4<F>> {
        GeneratorState::predict_x0(self, x_t, t, z, image)
    }
}

/// A generator paired with the step count it was trained with.
#[derive(Debug, Clone)]
pub struct TrainedGenerator<F: Real> {
    pub state: GeneratorState<F>,
    pub timesteps: usize,
}

impl<F: Real> Denoiser<F> for TrainedGenerator<F> {
    fn latent_dim(&self) -> usize {
        self.state.config().latent_dim
    }

    fn trained_timesteps(&self) -> Option<usize> {
        Some(self.timesteps)
    }

    fn predict_x0(&self, x_t: &Array4<F>, t: usize, z: &Array2<F>, image: &Array4<F>) -> Result<Array4<F>> {
        self.state.predict_x0(x_t, t, z, image)
    }
}

/// Wraps a denoiser and counts its evaluations.
#[derive(Debug)]
pub struct CountingDenoiser<D> {
    pub inner: D,
    calls: AtomicUsize,
}

impl<D> CountingDenoiser<D> {
    pub fn new(inner: D) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<F: Real, D: Denoiser<F>> Denoiser<F> for CountingDenoiser<D> {
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    fn trained_timesteps(&self) -> Option<usize> {
        self.inner.trained_timesteps()
    }

    fn predict_x0(&self, x_t: &Array4<F>, t: usize, z: &Array2<F>, image: &Array4<F>) -> Result<Array4<F>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict_x0(x_t, t, z, image)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub n_instances: usize,
    /// Binary decision threshold on the averaged probability.
    pub threshold: f64,
    pub seed: u64,
    /// Draw a fresh latent at every step; zeros otherwise.
    pub use_latent: bool,
    /// Add posterior noise at steps above 1.
    pub stochastic: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            n_instances: 5,
            threshold: 0.5,
            seed: 0,
            use_latent: true,
            stochastic: false,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_instances == 0 {
            return Err(Error::config("inference.n_instances", "must be at least 1"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("inference.threshold", "must lie strictly between 0 and 1"));
        }
        Ok(())
    }
}

fn check_timesteps<F: Real>(denoiser: &impl Denoiser<F>, schedule: &NoiseSchedule) -> Result<()> {
    match denoiser.trained_timesteps() {
        Some(t) if t != schedule.timesteps() => Err(Error::config(
            "diffusion.timesteps",
            format!("model was trained with T = {t} but the schedule has T = {}", schedule.timesteps()),
        )),
        _ => Ok(()),
    }
}

/// One reverse chain from `x_T ~ N(0, I)`, returned in probability space `[0, 1]`.
/// `label_channels` sets the channel count of the generated label.
pub fn sample_once<F: Real>(
    image: &Array4<F>,
    label_channels: usize,
    denoiser: &impl Denoiser<F>,
    schedule: &NoiseSchedule,
    seed: u64,
    use_latent: bool,
    stochastic: bool,
) -> Result<Array4<F>> {
    check_timesteps(denoiser, schedule)?;
    let (n, _, h, w) = image.dim();
    let mut rng = stream_rng(seed, 0);
    let mut x: Array4<F> = standard_normal(&mut rng, (n, label_channels, h, w));
    for t in (1..=schedule.timesteps()).rev() {
        let z = if use_latent {
            standard_normal(&mut rng, (n, denoiser.latent_dim()))
        } else {
            Array2::zeros((n, denoiser.latent_dim()))
        };
        let x0_hat = denoiser.predict_x0(&x, t, &z, image)?;
        x = if stochastic && t > 1 {
            schedule.posterior_step_noisy(&x, &x0_hat, t, &mut rng)?
        } else {
            schedule.posterior_step(&x, &x0_hat, t)?
        };
    }
    let half = F::lit(0.5);
    x.mapv_inplace(|v| ((v + F::one()) * half).max(F::zero()).min(F::one()));
    Ok(x)
}

/// Instance-averaged probabilities and the hard decision derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<F> {
    /// `[N, K, H, W]` in `[0, 1]`.
    pub mean: Array4<F>,
    /// `[N, K, H, W]`, 0/1 for binary labels or one-hot over channels.
    pub mask: Array4<F>,
}

/// Seed of instance `i` under base seed `seed`.
pub fn instance_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, 0x696e7374 + i as u64)
}

/// Runs `n_instances` chains with derived seeds and averages them in probability space.
pub fn predict<F: Real>(
    image: &Array4<F>,
    label_channels: usize,
    denoiser: &impl Denoiser<F>,
    schedule: &NoiseSchedule,
    config: &InferenceConfig,
) -> Result<Prediction<F>> {
    config.validate()?;
    let seeds: Vec<u64> = (0..config.n_instances).map(|i| instance_seed(config.seed, i)).collect();
    predict_with_seeds(image, label_channels, denoiser, schedule, config, &seeds)
}

/// [`predict`] with explicit instance seeds.
pub fn predict_with_seeds<F: Real>(
    image: &Array4<F>,
    label_channels: usize,
    denoiser: &impl Denoiser<F>,
    schedule: &NoiseSchedule,
    config: &InferenceConfig,
    seeds: &[u64],
) -> Result<Prediction<F>> {
    if seeds.is_empty() {
        return Err(Error::config("inference.n_instances", "must be at least 1"));
    }
    let instances = seeds
        .par_iter()
        .map(|&s| sample_once(image, label_channels, denoiser, schedule, s, config.use_latent, config.stochastic))
        .collect::<Result<Vec<_>>>()?;
    let mean = average(&instances);
    let mask = decide(&mean, config.threshold);
    Ok(Prediction { mean, mask })
}

/// [`predict`] over consecutive chunks of at most `chunk` images, to bound memory.
pub fn predict_in_chunks<F: Real>(
    images: &Array4<F>,
    label_channels: usize,
    denoiser: &impl Denoiser<F>,
    schedule: &NoiseSchedule,
    config: &InferenceConfig,
    chunk: usize,
) -> Result<Prediction<F>> {
    let n = images.dim().0;
    if n == 0 {
        return Err(Error::Data("no images to predict".into()));
    }
    let mut means = Vec::new();
    let mut masks = Vec::new();
    for start in (0..n).step_by(chunk.max(1)) {
        let end = (start + chunk.max(1)).min(n);
        let part = predict(
            &images.slice(ndarray::s![start..end, .., .., ..]).to_owned(),
            label_channels,
            denoiser,
            schedule,
            config,
        )?;
        means.push(part.mean);
        masks.push(part.mask);
    }
    let join = |parts: &[Array4<F>]| {
        let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("chunks share a shape")
    };
    Ok(Prediction {
        mean: join(&means),
        mask: join(&masks),
    })
}

/// Element-wise mean, summed in sorted order so the result does not depend on instance order.
pub fn average<F: Real>(instances: &[Array4<F>]) -> Array4<F> {
    let count = F::from_usize(instances.len()).unwrap();
    let mut values = Vec::with_capacity(instances.len());
    Array4::from_shape_fn(instances[0].raw_dim(), |idx| {
        values.clear();
        values.extend(instances.iter().map(|a| a[idx]));
        values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        values.iter().copied().fold(F::zero(), |acc, v| acc + v) / count
    })
}

/// Threshold (one channel) or per-pixel argmax (several channels) of averaged probabilities.
pub fn decide<F: Real>(mean: &Array4<F>, threshold: f64) -> Array4<F> {
    let k = mean.dim().1;
    if k == 1 {
        let th = F::lit(threshold);
        return mean.mapv(|p| if p >= th { F::one() } else { F::zero() });
    }
    let mut mask = Array4::zeros(mean.raw_dim());
    for (probs, mut out) in mean.axis_iter(Axis(0)).zip(mask.axis_iter_mut(Axis(0))) {
        let (_, h, w) = probs.dim();
        for y in 0..h {
            for x in 0..w {
                let mut best = 0;
                for c in 1..k {
                    if probs[[c, y, x]] > probs[[best, y, x]] {
                        best = c;
                    }
                }
                out[[best, y, x]] = F::one();
            }
        }
    }
    mask
}

/// Foreground probability per pixel: the single channel, or one minus background.
pub fn foreground_probability<F: Real>(mean: &Array4<F>) -> Array4<F> {
    if mean.dim().1 == 1 {
        return mean.clone();
    }
    let bg = mean.index_axis(Axis(1), 0);
    let mut out = Array4::zeros((mean.dim().0, 1, mean.dim().2, mean.dim().3));
    Zip::from(out.index_axis_mut(Axis(1), 0))
        .and(&bg)
        .for_each(|o, &b| *o = F::one() - b);
    out
}
