//! Time-conditioned real/fake discriminator over `(x_t, x_{t-1})` pairs.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use super::embed::sinusoidal_embed;
use super::generator::validate_pyramid;
use super::layers::{Conv, GroupNorm, Linear, Mlp, ResBlock};
use crate::error::{Error, Result};
use crate::nn::{Bound, Graph, ParamStore, Real, Var};
use crate::rng::stream_rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub resolution: usize,
    pub label_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_scale: usize,
    pub time_embed_dim: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            label_channels: 1,
            base_channels: 64,
            channel_multipliers: vec![1, 2, 4],
            blocks_per_scale: 1,
            time_embed_dim: 128,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("discriminator.resolution", self.resolution),
            ("discriminator.label_channels", self.label_channels),
            ("discriminator.base_channels", self.base_channels),
            ("discriminator.blocks_per_scale", self.blocks_per_scale),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        validate_pyramid("discriminator", self.resolution, &self.channel_multipliers)?;
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::config(
                "discriminator.time_embed_dim",
                "must be a positive even number",
            ));
        }
        Ok(())
    }

    /// Spatial sizes of the feature taps, one per level, largest first.
    pub fn tap_scales(&self) -> Vec<usize> {
        (0..self.channel_multipliers.len())
            .map(|level| self.resolution >> level)
            .collect()
    }
}

/// Logits plus the per-level feature maps of one discriminator pass.
#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorPass {
    pub logits: Var,
    taps: [Option<(usize, Var)>; 8],
}

impl DiscriminatorPass {
    /// Feature map produced at spatial size `scale`, if that level exists.
    pub fn tap(&self, scale: usize) -> Option<Var> {
        self.taps
            .iter()
            .flatten()
            .find(|(s, _)| *s == scale)
            .map(|(_, v)| *v)
    }

    pub fn taps(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.taps.iter().flatten().copied()
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    time_mlp: Mlp,
    conv_in: Conv,
    levels: Vec<Vec<ResBlock>>,
    out_norm: GroupNorm,
    head: Linear,
}

impl Discriminator {
    pub fn build<F: Real>(config: &DiscriminatorConfig, store: &mut ParamStore<F>, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.channel_multipliers.len() > 8 {
            return Err(Error::config("discriminator.channel_multipliers", "at most 8 levels"));
        }
        let rng = &mut stream_rng(seed, 0x6469_73);
        let emb = config.time_embed_dim;
        let time_mlp = Mlp::new(store, rng, "time_mlp", emb, emb);
        let mut ch = config.base_channels * config.channel_multipliers[0];
        let conv_in = Conv::new(store, rng, "conv_in", 2 * config.label_channels, ch, 3, 1, 1.0);
        let mut levels = Vec::new();
        for (level, &m) in config.channel_multipliers.iter().enumerate() {
            let out = config.base_channels * m;
            let blocks = (0..config.blocks_per_scale)
                .map(|b| {
                    let block = ResBlock::new(store, rng, &format!("level.{level}.{b}"), ch, out, Some(emb));
                    ch = out;
                    block
                })
                .collect();
            levels.push(blocks);
        }
        let out_norm = GroupNorm::new(store, "out_norm", ch);
        let head = Linear::new(store, rng, "head", ch, 1);
        Ok(Self {
            config: config.clone(),
            time_mlp,
            conv_in,
            levels,
            out_norm,
            head,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    /// `D(x_t, x_prev, t)`: inputs are `[N, label, H, W]`; logits are `[N, 1, 1, 1]`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x_t: Var, x_prev: Var, t: usize) -> DiscriminatorPass {
        let batch = g.value(x_t).dim().0;
        let dim = self.config.time_embed_dim;
        let sin = sinusoidal_embed(t, dim).expect("validated width");
        let temb = g.input(Array4::from_shape_fn((batch, dim, 1, 1), |(_, k, _, _)| F::lit(sin[k])));
        let emb = self.time_mlp.forward(g, p, temb);
        let emb = g.silu(emb);

        let input = g.concat(x_t, x_prev);
        let mut h = self.conv_in.forward(g, p, input);
        let mut taps = [None; 8];
        let n_levels = self.levels.len();
        for (level, blocks) in self.levels.iter().enumerate() {
            for block in blocks {
                h = block.forward(g, p, h, Some(emb));
            }
            taps[level] = Some((self.config.resolution >> level, h));
            if level + 1 < n_levels {
                h = g.avg_pool2(h);
            }
        }
        let h = self.out_norm.forward(g, p, h);
        let h = g.silu(h);
        let pooled = g.spatial_mean(h);
        let logits = self.head.forward(g, p, pooled);
        DiscriminatorPass { logits, taps }
    }

    pub(crate) fn check_inputs<F: Real>(&self, x_t: &Array4<F>, x_prev: &Array4<F>) -> Result<()> {
        let c = &self.config;
        if x_t.dim() != x_prev.dim() {
            return Err(Error::Shape(format!(
                "x_t {:?} and x_prev {:?} differ",
                x_t.shape(),
                x_prev.shape()
            )));
        }
        let (_, lc, h, w) = x_t.dim();
        if (lc, h, w) != (c.label_channels, c.resolution, c.resolution) {
            return Err(Error::Shape(format!(
                "discriminator input {:?}, expected [N, {}, {}, {}]",
                x_t.shape(),
                c.label_channels,
                c.resolution,
                c.resolution
            )));
        }
        Ok(())
    }
}
