//! Conditional x0-predicting U-Net.

use std::ops::Range;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use super::embed::sinusoidal_embed;
use super::layers::{Conv, GroupNorm, Mlp, ResBlock};
use crate::error::{Error, Result};
use crate::nn::{Bound, Graph, ParamStore, Real, Var};
use crate::rng::stream_rng;

/// Gain applied to the fan-in bound of the output projection.
pub const OUTPUT_INIT_GAIN: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Square input side in pixels.
    pub resolution: usize,
    /// 1 for binary labels, K for K-way one-hot labels.
    pub label_channels: usize,
    pub image_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_scale: usize,
    pub time_embed_dim: usize,
    pub latent_dim: usize,
    /// Width of the encoded image that is concatenated with the noisy label.
    pub condition_channels: usize,
    /// Hidden width of the condition encoder.
    pub encoder_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            label_channels: 1,
            image_channels: 1,
            base_channels: 64,
            channel_multipliers: vec![1, 2, 4],
            blocks_per_scale: 2,
            time_embed_dim: 128,
            latent_dim: 100,
            condition_channels: 16,
            encoder_channels: 32,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.resolution", self.resolution),
            ("model.label_channels", self.label_channels),
            ("model.image_channels", self.image_channels),
            ("model.base_channels", self.base_channels),
            ("model.blocks_per_scale", self.blocks_per_scale),
            ("model.latent_dim", self.latent_dim),
            ("model.condition_channels", self.condition_channels),
            ("model.encoder_channels", self.encoder_channels),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        validate_pyramid("model", self.resolution, &self.channel_multipliers)?;
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::config("model.time_embed_dim", "must be a positive even number"));
        }
        Ok(())
    }
}

pub(crate) fn validate_pyramid(section: &str, resolution: usize, multipliers: &[usize]) -> Result<()> {
    if multipliers.is_empty() || multipliers.contains(&0) {
        return Err(Error::config(
            format!("{section}.channel_multipliers"),
            "must be a non-empty list of positive integers",
        ));
    }
    let factor = 1usize << (multipliers.len() - 1);
    if !resolution.is_multiple_of(factor) {
        return Err(Error::config(
            format!("{section}.resolution"),
            format!("{resolution} is not divisible by {factor} for {} levels", multipliers.len()),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct ConditionEncoder {
    stem: Conv,
    block: ResBlock,
    head: Conv,
}

/// Generator layer graph. Holds parameter ids only; values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    time_mlp: Mlp,
    latent_mlp: Mlp,
    encoder: ConditionEncoder,
    encoder_params: Range<usize>,
    conv_in: Conv,
    down: Vec<Vec<ResBlock>>,
    mid: [ResBlock; 2],
    up: Vec<Vec<ResBlock>>,
    out_norm: GroupNorm,
    out_conv: Conv,
}

impl Generator {
    /// Registers all parameters in `store`, initialised from `seed`.
    pub fn build<F: Real>(config: &GeneratorConfig, store: &mut ParamStore<F>, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = &mut stream_rng(seed, 0x6765_6e);
        let emb = config.time_embed_dim;
        let time_mlp = Mlp::new(store, rng, "time_mlp", emb, emb);
        let latent_mlp = Mlp::new(store, rng, "latent_mlp", config.latent_dim, emb);

        let enc_start = store.len();
        let encoder = ConditionEncoder {
            stem: Conv::new(store, rng, "encoder.stem", config.image_channels, config.encoder_channels, 3, 1, 1.0),
            block: ResBlock::new(store, rng, "encoder.block", config.encoder_channels, config.encoder_channels, None),
            head: Conv::new(store, rng, "encoder.head", config.encoder_channels, config.condition_channels, 3, 1, 1.0),
        };
        let encoder_params = enc_start..store.len();

        let mults = &config.channel_multipliers;
        let mut ch = config.base_channels * mults[0];
        let conv_in = Conv::new(
            store,
            rng,
            "conv_in",
            config.label_channels + config.condition_channels,
            ch,
            3,
            1,
            1.0,
        );
        let mut skip_channels = vec![ch];
        let mut down = Vec::new();
        for (level, &m) in mults.iter().enumerate() {
            let out = config.base_channels * m;
            let mut blocks = Vec::new();
            for b in 0..config.blocks_per_scale {
                blocks.push(ResBlock::new(store, rng, &format!("down.{level}.{b}"), ch, out, Some(emb)));
                ch = out;
                skip_channels.push(ch);
            }
            if level + 1 < mults.len() {
                skip_channels.push(ch);
            }
            down.push(blocks);
        }
        let mid = [
            ResBlock::new(store, rng, "mid.0", ch, ch, Some(emb)),
            ResBlock::new(store, rng, "mid.1", ch, ch, Some(emb)),
        ];
        let mut up = vec![Vec::new(); mults.len()];
        for level in (0..mults.len()).rev() {
            let out = config.base_channels * mults[level];
            for b in 0..=config.blocks_per_scale {
                let skip = skip_channels.pop().expect("skip bookkeeping");
                up[level].push(ResBlock::new(store, rng, &format!("up.{level}.{b}"), ch + skip, out, Some(emb)));
                ch = out;
            }
        }
        debug_assert!(skip_channels.is_empty());
        let out_norm = GroupNorm::new(store, "out_norm", ch);
        let out_conv = Conv::new(store, rng, "out_conv", ch, config.label_channels, 3, 1, OUTPUT_INIT_GAIN);
        Ok(Self {
            config: config.clone(),
            time_mlp,
            latent_mlp,
            encoder,
            encoder_params,
            conv_in,
            down,
            mid,
            up,
            out_norm,
            out_conv,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Parameter count of the condition encoder.
    pub fn encoder_param_count<F: Real>(&self, store: &ParamStore<F>) -> usize {
        store.num_scalars_in(self.encoder_params.clone())
    }

    /// Small residual encoder for the conditioning image, at input resolution.
    pub fn encode<F: Real>(&self, g: &mut Graph<F>, p: &Bound, image: Var) -> Var {
        let h = self.encoder.stem.forward(g, p, image);
        let h = self.encoder.block.forward(g, p, h, None);
        let h = g.silu(h);
        self.encoder.head.forward(g, p, h)
    }

    /// Step embedding plus mapped latent, shared by every residual block.
    fn embedding<F: Real>(&self, g: &mut Graph<F>, p: &Bound, batch: usize, t: usize, z: Var) -> Var {
        let dim = self.config.time_embed_dim;
        let sin = sinusoidal_embed(t, dim).expect("validated width");
        let temb = Array4::from_shape_fn((batch, dim, 1, 1), |(_, k, _, _)| F::lit(sin[k]));
        let temb = g.input(temb);
        let temb = self.time_mlp.forward(g, p, temb);
        let zemb = self.latent_mlp.forward(g, p, z);
        let emb = g.add(temb, zemb);
        g.silu(emb)
    }

    /// `x0_hat = G(x_t, t, z, I)`. `x_t` is `[N, label, H, W]`, `z` is `[N, L, 1, 1]`,
    /// `image` is `[N, image_channels, H, W]`. Shapes must already be validated.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x_t: Var, t: usize, z: Var, image: Var) -> Var {
        let batch = g.value(x_t).dim().0;
        let emb = self.embedding(g, p, batch, t, z);
        let cond = self.encode(g, p, image);
        let input = g.concat(x_t, cond);
        let mut h = self.conv_in.forward(g, p, input);
        let mut skips = vec![h];
        let levels = self.down.len();
        for (level, blocks) in self.down.iter().enumerate() {
            for block in blocks {
                h = block.forward(g, p, h, Some(emb));
                skips.push(h);
            }
            if level + 1 < levels {
                h = g.avg_pool2(h);
                skips.push(h);
            }
        }
        for block in &self.mid {
            h = block.forward(g, p, h, Some(emb));
        }
        for level in (0..levels).rev() {
            for block in &self.up[level] {
                let skip = skips.pop().expect("skip bookkeeping");
                let joined = g.concat(h, skip);
                h = block.forward(g, p, joined, Some(emb));
            }
            if level > 0 {
                h = g.upsample2(h);
            }
        }
        let h = self.out_norm.forward(g, p, h);
        let h = g.silu(h);
        self.out_conv.forward(g, p, h)
    }

    pub(crate) fn check_inputs<F: Real>(
        &self,
        x_t: &Array4<F>,
        z: &Array2<F>,
        image: &Array4<F>,
    ) -> Result<()> {
        let c = &self.config;
        let (n, lc, h, w) = x_t.dim();
        if (lc, h, w) != (c.label_channels, c.resolution, c.resolution) {
            return Err(Error::Shape(format!(
                "label input {:?}, expected [N, {}, {}, {}]",
                x_t.shape(),
                c.label_channels,
                c.resolution,
                c.resolution
            )));
        }
        if image.dim() != (n, c.image_channels, c.resolution, c.resolution) {
            return Err(Error::Shape(format!(
                "image input {:?}, expected [{n}, {}, {}, {}]",
                image.shape(),
                c.image_channels,
                c.resolution,
                c.resolution
            )));
        }
        if z.dim() != (n, c.latent_dim) {
            return Err(Error::Shape(format!(
                "latent {:?}, expected [{n}, {}]",
                z.shape(),
                c.latent_dim
            )));
        }
        Ok(())
    }
}
