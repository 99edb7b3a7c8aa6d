//! Parameterised building blocks shared by the generator and discriminator.

use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{Bound, Graph, ParamId, ParamStore, Real, Var};

/// Largest divisor of `channels` that is at most 8.
pub(crate) fn norm_groups(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

fn uniform<F: Real>(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize), bound: f64) -> Array4<F> {
    Array4::from_shape_simple_fn(shape, || F::lit(rng.random_range(-bound..=bound)))
}

#[derive(Debug, Clone)]
pub(crate) struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        let bound = gain / ((cin * kernel * kernel) as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(rng, (cout, cin, kernel, kernel), bound));
        let b = store.add(format!("{name}.bias"), Array4::zeros((1, cout, 1, 1)));
        Self {
            w,
            b,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p[self.w], Some(p[self.b]), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<F: Real>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        let bound = 1.0 / (cin as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(rng, (cout, cin, 1, 1), bound));
        let b = store.add(format!("{name}.bias"), Array4::zeros((1, cout, 1, 1)));
        Self { w, b }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Var {
        g.linear(x, p[self.w], Some(p[self.b]))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Array4::ones((1, channels, 1, 1)));
        let beta = store.add(format!("{name}.beta"), Array4::zeros((1, channels, 1, 1)));
        Self {
            gamma,
            beta,
            groups: norm_groups(channels),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Var {
        g.group_norm(x, p[self.gamma], p[self.beta], self.groups)
    }
}

/// Two-layer perceptron with a SiLU in between.
#[derive(Debug, Clone)]
pub(crate) struct Mlp {
    first: Linear,
    second: Linear,
}

impl Mlp {
    pub fn new<F: Real>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            first: Linear::new(store, rng, &format!("{name}.0"), cin, cout),
            second: Linear::new(store, rng, &format!("{name}.1"), cout, cout),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Var {
        let h = self.first.forward(g, p, x);
        let h = g.silu(h);
        self.second.forward(g, p, h)
    }
}

/// Pre-activation residual block. When built with an embedding width, the
/// embedding drives a per-channel scale and shift after the second norm.
#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    norm2: GroupNorm,
    emb_scale: Option<Linear>,
    emb_shift: Option<Linear>,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        emb_dim: Option<usize>,
    ) -> Self {
        let norm1 = GroupNorm::new(store, &format!("{name}.norm1"), cin);
        let conv1 = Conv::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, 1, 1.0);
        let norm2 = GroupNorm::new(store, &format!("{name}.norm2"), cout);
        let (emb_scale, emb_shift) = match emb_dim {
            Some(e) => (
                Some(Linear::new(store, rng, &format!("{name}.emb_scale"), e, cout)),
                Some(Linear::new(store, rng, &format!("{name}.emb_shift"), e, cout)),
            ),
            None => (None, None),
        };
        let conv2 = Conv::new(store, rng, &format!("{name}.conv2"), cout, cout, 3, 1, 1.0);
        let skip = (cin != cout).then(|| Conv::new(store, rng, &format!("{name}.skip"), cin, cout, 1, 1, 1.0));
        Self {
            norm1,
            conv1,
            norm2,
            emb_scale,
            emb_shift,
            conv2,
            skip,
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x: Var, emb: Option<Var>) -> Var {
        let h = self.norm1.forward(g, p, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, p, h);
        let mut h = self.norm2.forward(g, p, h);
        if let (Some(emb), Some(scale), Some(shift)) = (emb, &self.emb_scale, &self.emb_shift) {
            let sc = scale.forward(g, p, emb);
            let sh = shift.forward(g, p, emb);
            h = g.scale_shift(h, sc, sh);
        }
        let h = g.silu(h);
        let h = self.conv2.forward(g, p, h);
        let skip = match &self.skip {
            Some(conv) => conv.forward(g, p, x),
            None => x,
        };
        g.add(h, skip)
    }
}
