//! Generator `x0 = G(x_t, t, z, I)`, discriminator `D(x_t, x_{t-1}, t)` and their states.

pub mod checkpoint;
mod discriminator;
mod embed;
mod generator;
mod layers;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array4, Axis};

pub use discriminator::{Discriminator, DiscriminatorConfig, DiscriminatorPass};
pub use embed::sinusoidal_embed;
pub use generator::{Generator, GeneratorConfig, OUTPUT_INIT_GAIN};

use crate::error::{Error, Result};
use crate::nn::{Graph, ParamStore, Real};

/// Generator architecture plus its parameter values.
#[derive(Debug, Clone)]
pub struct GeneratorState<F: Real> {
    pub net: Generator,
    pub params: ParamStore<F>,
}

impl<F: Real> GeneratorState<F> {
    pub fn new(config: &GeneratorConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = Generator::build(config, &mut params, seed)?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &GeneratorConfig {
        self.net.config()
    }

    pub fn encoder_param_count(&self) -> usize {
        self.net.encoder_param_count(&self.params)
    }

    /// Encoded conditioning image, `[N, condition_channels, H, W]`.
    pub fn encode_condition(&self, image: &Array4<F>) -> Result<Array4<F>> {
        let c = self.config();
        if image.dim().1 != c.image_channels || image.dim().2 != c.resolution || image.dim().3 != c.resolution {
            return Err(Error::Shape(format!(
                "image {:?}, expected [N, {}, {}, {}]",
                image.shape(),
                c.image_channels,
                c.resolution,
                c.resolution
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let img = g.input(image.clone());
        let out = self.net.encode(&mut g, &p, img);
        Ok(g.value(out).clone())
    }

    /// Inference-mode forward pass returning `x0_hat`.
    pub fn predict_x0(&self, x_t: &Array4<F>, t: usize, z: &Array2<F>, image: &Array4<F>) -> Result<Array4<F>> {
        if t == 0 {
            return Err(Error::Index("generator step must be at least 1".into()));
        }
        self.net.check_inputs(x_t, z, image)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let (xv, zv, iv) = (
            g.input(x_t.clone()),
            g.input(latent_to_4d(z)),
            g.input(image.clone()),
        );
        let out = self.net.forward(&mut g, &p, xv, t, zv, iv);
        Ok(g.value(out).clone())
    }
}

/// Discriminator architecture plus its parameter values.
#[derive(Debug, Clone)]
pub struct DiscriminatorState<F: Real> {
    pub net: Discriminator,
    pub params: ParamStore<F>,
}

/// Values from an inference-mode discriminator pass.
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput<F> {
    /// One logit per sample.
    pub logits: Array1<F>,
    /// Feature maps keyed by spatial size.
    pub features: BTreeMap<usize, Array4<F>>,
}

impl<F: Real> DiscriminatorState<F> {
    pub fn new(config: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = Discriminator::build(config, &mut params, seed)?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        self.net.config()
    }

    pub fn forward(&self, x_t: &Array4<F>, x_prev: &Array4<F>, t: usize) -> Result<DiscriminatorOutput<F>> {
        if t == 0 {
            return Err(Error::Index("discriminator step must be at least 1".into()));
        }
        self.net.check_inputs(x_t, x_prev)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let (a, b) = (g.input(x_t.clone()), g.input(x_prev.clone()));
        let pass = self.net.forward(&mut g, &p, a, b, t);
        let logits = g.value(pass.logits).index_axis(Axis(1), 0).index_axis(Axis(1), 0).index_axis(Axis(1), 0).to_owned();
        let features = pass.taps().map(|(s, v)| (s, g.value(v).clone())).collect();
        Ok(DiscriminatorOutput { logits, features })
    }
}

/// `[N, L]` latent batch as the `[N, L, 1, 1]` layout the graph expects.
pub fn latent_to_4d<F: Real>(z: &Array2<F>) -> Array4<F> {
    let (n, l) = z.dim();
    z.as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, l, 1, 1))
        .unwrap()
}
