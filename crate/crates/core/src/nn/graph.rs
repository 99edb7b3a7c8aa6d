use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array4, ArrayView2, Axis, Zip};

use super::conv::{col2im, im2col, ConvGeometry};
use super::Real;

const GROUP_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    /// `x * (1 + scale) + shift` with per-sample, per-channel `scale` / `shift`.
    ScaleShift {
        x: Var,
        scale: Var,
        shift: Var,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    Silu(Var),
    Concat(Var, Var),
    AvgPool2(Var),
    Upsample2(Var),
    SpatialMean(Var),
    Mse {
        pred: Var,
        target: Array4<F>,
    },
    BceWithLogits {
        logits: Var,
        target: F,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Array4<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// A recorded forward computation.
#[derive(Debug, Default)]
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array4<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf node. Gradients are only accumulated for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Array4<F>, requires_grad: bool) -> Var {
        let value = value.as_standard_layout().into_owned();
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A constant input.
    pub fn input(&mut self, value: Array4<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Array4<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a single-element node such as a loss.
    pub fn scalar(&self, v: Var) -> F {
        let value = self.value(v);
        assert_eq!(value.len(), 1, "node is not a scalar");
        value.iter().copied().next().unwrap()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, h, wd) = xv.dim();
        let (o, ci, kh, kw) = wv.dim();
        assert_eq!(c, ci, "conv2d input channels");
        assert_eq!(kh, kw, "conv2d expects square kernels");
        let geo = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            kernel: kh,
            stride,
            pad,
        };
        let (ho, wo) = (geo.out_height(), geo.out_width());
        let w2 = wv.view().into_shape_with_order((o, geo.col_rows())).unwrap();
        let mut out = Array4::<F>::zeros((n, o, ho, wo));
        let x_slice = xv.as_slice().expect("standard layout");
        let per_image = c * h * wd;
        let mut cols = if geo.is_pointwise() {
            Vec::new()
        } else {
            vec![F::zero(); geo.col_rows() * geo.col_cols()]
        };
        for i in 0..n {
            let image = &x_slice[i * per_image..(i + 1) * per_image];
            let cols_view = if geo.is_pointwise() {
                ArrayView2::from_shape((c, h * wd), image).unwrap()
            } else {
                im2col(image, &geo, &mut cols);
                ArrayView2::from_shape((geo.col_rows(), geo.col_cols()), &cols).unwrap()
            };
            let mut out_i = out.index_axis_mut(Axis(0), i);
            let mut out_mat = out_i
                .view_mut()
                .into_shape_with_order((o, ho * wo))
                .unwrap();
            general_mat_mul(F::one(), &w2, &cols_view, F::zero(), &mut out_mat);
        }
        if let Some(b) = b {
            let bias = self.value(b);
            assert_eq!(bias.len(), o, "conv2d bias length");
            for (ch, &bv) in bias.iter().enumerate() {
                out.slice_mut(s![.., ch, .., ..]).mapv_inplace(|v| v + bv);
            }
        }
        let rg = self.needs(&[x, w]) || b.is_some_and(|b| self.needs(&[b]));
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        )
    }

    /// `y = x W^T + b` on `[N, in, 1, 1]` inputs with `W` stored as `[out, in, 1, 1]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let n = xv.dim().0;
        let (o, i, _, _) = wv.dim();
        assert_eq!(xv.len(), n * i, "linear input width");
        let x2 = xv.view().into_shape_with_order((n, i)).unwrap();
        let w2 = wv.view().into_shape_with_order((o, i)).unwrap();
        let mut y = x2.dot(&w2.t());
        if let Some(b) = b {
            let bias = self.value(b).view().into_shape_with_order(o).unwrap();
            y += &bias;
        }
        let out = y.into_shape_with_order((n, o, 1, 1)).unwrap();
        let rg = self.needs(&[x, w]) || b.is_some_and(|b| self.needs(&[b]));
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shapes");
        let out = self.value(a) + self.value(b);
        let rg = self.needs(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn scale_shift(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let xv = self.value(x);
        let (n, c, _, _) = xv.dim();
        let sc = self.value(scale);
        let sh = self.value(shift);
        assert_eq!(sc.dim(), (n, c, 1, 1), "scale shape");
        assert_eq!(sh.dim(), (n, c, 1, 1), "shift shape");
        let mut out = xv.clone();
        for i in 0..n {
            for ch in 0..c {
                let a = F::one() + sc[[i, ch, 0, 0]];
                let b = sh[[i, ch, 0, 0]];
                out.slice_mut(s![i, ch, .., ..]).mapv_inplace(|v| v * a + b);
            }
        }
        let rg = self.needs(&[x, scale, shift]);
        self.push(out, Op::ScaleShift { x, scale, shift }, rg)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dim();
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels, {groups} groups");
        let gv = self.value(gamma);
        let bv = self.value(beta);
        assert_eq!(gv.len(), c);
        assert_eq!(bv.len(), c);
        let per_group = c / groups * h * w;
        let m = F::from_usize(per_group).unwrap();
        let eps = F::lit(GROUP_NORM_EPS);
        let src = xv.as_slice().unwrap();
        let gamma_s: Vec<F> = gv.iter().copied().collect();
        let beta_s: Vec<F> = bv.iter().copied().collect();
        let mut out = vec![F::zero(); src.len()];
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        for (gi, chunk) in src.chunks_exact(per_group).enumerate() {
            let mean = chunk.iter().copied().sum::<F>() / m;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / m;
            let rstd = F::one() / (var + eps).sqrt();
            means.push(mean);
            rstds.push(rstd);
            let g = gi % groups;
            let dst = &mut out[gi * per_group..(gi + 1) * per_group];
            for (k, (o, &v)) in dst.iter_mut().zip(chunk).enumerate() {
                let ch = g * (c / groups) + k / (h * w);
                *o = (v - mean) * rstd * gamma_s[ch] + beta_s[ch];
            }
        }
        let out = Array4::from_shape_vec((n, c, h, w), out).unwrap();
        let rg = self.needs(&[x, gamma, beta]);
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
            rg,
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v * sigmoid(v));
        let rg = self.needs(&[x]);
        self.push(out, Op::Silu(x), rg)
    }

    /// Channel-wise concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (n, ca, h, w) = av.dim();
        let (nb, cb, hb, wb) = bv.dim();
        assert_eq!((n, h, w), (nb, hb, wb), "concat shapes");
        let mut out = Array4::zeros((n, ca + cb, h, w));
        out.slice_mut(s![.., ..ca, .., ..]).assign(av);
        out.slice_mut(s![.., ca.., .., ..]).assign(bv);
        let rg = self.needs(&[a, b]);
        self.push(out, Op::Concat(a, b), rg)
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even sizes");
        let quarter = F::lit(0.25);
        let out = Array4::from_shape_fn((n, c, h / 2, w / 2), |(i, ch, y, x)| {
            (xv[[i, ch, 2 * y, 2 * x]]
                + xv[[i, ch, 2 * y, 2 * x + 1]]
                + xv[[i, ch, 2 * y + 1, 2 * x]]
                + xv[[i, ch, 2 * y + 1, 2 * x + 1]])
                * quarter
        });
        let rg = self.needs(&[x]);
        self.push(out, Op::AvgPool2(x), rg)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dim();
        let out = Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(i, ch, y, x)| {
            xv[[i, ch, y / 2, x / 2]]
        });
        let rg = self.needs(&[x]);
        self.push(out, Op::Upsample2(x), rg)
    }

    /// Mean over the spatial axes, giving `[N, C, 1, 1]`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dim();
        let area = F::from_usize(h * w).unwrap();
        let out = Array4::from_shape_fn((n, c, 1, 1), |(i, ch, _, _)| {
            xv.slice(s![i, ch, .., ..]).sum() / area
        });
        let rg = self.needs(&[x]);
        self.push(out, Op::SpatialMean(x), rg)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Array4<F>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.dim(), target.dim(), "mse shapes");
        let count = F::from_usize(pv.len()).unwrap();
        let sum = Zip::from(pv)
            .and(target)
            .fold(F::zero(), |acc, &p, &t| acc + (p - t) * (p - t));
        let out = Array4::from_elem((1, 1, 1, 1), sum / count);
        let rg = self.needs(&[pred]);
        self.push(
            out,
            Op::Mse {
                pred,
                target: target.clone(),
            },
            rg,
        )
    }

    /// Mean binary cross-entropy of `logits` against a constant label in `{0, 1}`.
    pub fn bce_with_logits(&mut self, logits: Var, target: F) -> Var {
        let lv = self.value(logits);
        let count = F::from_usize(lv.len()).unwrap();
        let sum = lv.iter().fold(F::zero(), |acc, &l| {
            acc + l.max(F::zero()) - l * target + (-l.abs()).exp().ln_1p()
        });
        let out = Array4::from_elem((1, 1, 1, 1), sum / count);
        let rg = self.needs(&[logits]);
        self.push(out, Op::BceWithLogits { logits, target }, rg)
    }

    /// Reverse pass from a scalar node. Returns gradients for every leaf that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Array4<F>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Array4::ones((1, 1, 1, 1)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(grad);
                continue;
            }
            self.backprop(&node.op, &grad, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array4<F>>], v: Var, g: Array4<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    fn backprop(&self, op: &Op<F>, grad: &Array4<F>, grads: &mut [Option<Array4<F>>]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv2d_backward(*x, *w, *b, *stride, *pad, grad, grads),
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let n = xv.dim().0;
                let (o, i, _, _) = wv.dim();
                let g2 = grad.view().into_shape_with_order((n, o)).unwrap();
                if self.requires_grad(*x) {
                    let w2 = wv.view().into_shape_with_order((o, i)).unwrap();
                    let dx = g2.dot(&w2).into_shape_with_order((n, i, 1, 1)).unwrap();
                    self.accumulate(grads, *x, dx);
                }
                if self.requires_grad(*w) {
                    let x2 = xv.view().into_shape_with_order((n, i)).unwrap();
                    let dw = g2.t().dot(&x2).into_shape_with_order((o, i, 1, 1)).unwrap();
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let db = g2.sum_axis(Axis(0));
                        let shape = self.value(*b).raw_dim();
                        self.accumulate(grads, *b, db.into_shape_with_order(shape).unwrap());
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, grad.clone());
                self.accumulate(grads, *b, grad.clone());
            }
            Op::ScaleShift { x, scale, shift } => {
                let xv = self.value(*x);
                let sc = self.value(*scale);
                let (n, c, _, _) = xv.dim();
                if self.requires_grad(*x) {
                    let mut dx = grad.clone();
                    for i in 0..n {
                        for ch in 0..c {
                            let a = F::one() + sc[[i, ch, 0, 0]];
                            dx.slice_mut(s![i, ch, .., ..]).mapv_inplace(|v| v * a);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.requires_grad(*scale) {
                    let dscale = Array4::from_shape_fn((n, c, 1, 1), |(i, ch, _, _)| {
                        Zip::from(grad.slice(s![i, ch, .., ..]))
                            .and(xv.slice(s![i, ch, .., ..]))
                            .fold(F::zero(), |acc, &g, &v| acc + g * v)
                    });
                    self.accumulate(grads, *scale, dscale);
                }
                if self.requires_grad(*shift) {
                    let dshift = Array4::from_shape_fn((n, c, 1, 1), |(i, ch, _, _)| {
                        grad.slice(s![i, ch, .., ..]).sum()
                    });
                    self.accumulate(grads, *shift, dshift);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => self.group_norm_backward(*x, *gamma, *beta, *groups, mean, rstd, grad, grads),
            Op::Silu(x) => {
                let xv = self.value(*x);
                let dx = Zip::from(grad).and(xv).map_collect(|&g, &v| {
                    let s = sigmoid(v);
                    g * s * (F::one() + v * (F::one() - s))
                });
                self.accumulate(grads, *x, dx);
            }
            Op::Concat(a, b) => {
                let ca = self.value(*a).dim().1;
                self.accumulate(grads, *a, grad.slice(s![.., ..ca, .., ..]).to_owned());
                self.accumulate(grads, *b, grad.slice(s![.., ca.., .., ..]).to_owned());
            }
            Op::AvgPool2(x) => {
                let (n, c, h, w) = self.value(*x).dim();
                let quarter = F::lit(0.25);
                let dx = Array4::from_shape_fn((n, c, h, w), |(i, ch, y, xx)| {
                    grad[[i, ch, y / 2, xx / 2]] * quarter
                });
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = self.value(*x).dim();
                let dx = Array4::from_shape_fn((n, c, h, w), |(i, ch, y, xx)| {
                    grad[[i, ch, 2 * y, 2 * xx]]
                        + grad[[i, ch, 2 * y, 2 * xx + 1]]
                        + grad[[i, ch, 2 * y + 1, 2 * xx]]
                        + grad[[i, ch, 2 * y + 1, 2 * xx + 1]]
                });
                self.accumulate(grads, *x, dx);
            }
            Op::SpatialMean(x) => {
                let (n, c, h, w) = self.value(*x).dim();
                let area = F::from_usize(h * w).unwrap();
                let dx = Array4::from_shape_fn((n, c, h, w), |(i, ch, _, _)| {
                    grad[[i, ch, 0, 0]] / area
                });
                self.accumulate(grads, *x, dx);
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred);
                let scale = grad[[0, 0, 0, 0]] * F::lit(2.0) / F::from_usize(pv.len()).unwrap();
                let dx = Zip::from(pv)
                    .and(target)
                    .map_collect(|&p, &t| (p - t) * scale);
                self.accumulate(grads, *pred, dx);
            }
            Op::BceWithLogits { logits, target } => {
                let lv = self.value(*logits);
                let scale = grad[[0, 0, 0, 0]] / F::from_usize(lv.len()).unwrap();
                let dx = lv.mapv(|l| (sigmoid(l) - *target) * scale);
                self.accumulate(grads, *logits, dx);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        grad: &Array4<F>,
        grads: &mut [Option<Array4<F>>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, h, wd) = xv.dim();
        let (o, _, k, _) = wv.dim();
        let geo = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
        };
        let (rows, ncols) = (geo.col_rows(), geo.col_cols());
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        let grad = grad.as_standard_layout();
        let g_slice = grad.as_slice().unwrap();
        let x_slice = xv.as_slice().unwrap();
        let per_image = c * h * wd;

        if need_w {
            let mut dw = Array2::<F>::zeros((o, rows));
            let mut cols = vec![F::zero(); if geo.is_pointwise() { 0 } else { rows * ncols }];
            for i in 0..n {
                let image = &x_slice[i * per_image..(i + 1) * per_image];
                let cols_view = if geo.is_pointwise() {
                    ArrayView2::from_shape((rows, ncols), image).unwrap()
                } else {
                    im2col(image, &geo, &mut cols);
                    ArrayView2::from_shape((rows, ncols), &cols).unwrap()
                };
                let g_i = ArrayView2::from_shape((o, ncols), &g_slice[i * o * ncols..(i + 1) * o * ncols])
                    .unwrap();
                general_mat_mul(F::one(), &g_i, &cols_view.t(), F::one(), &mut dw);
            }
            self.accumulate(grads, w, dw.into_shape_with_order((o, c, k, k)).unwrap());
        }
        if let Some(b) = b {
            if self.requires_grad(b) {
                let db = grad.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                let shape = self.value(b).raw_dim();
                self.accumulate(grads, b, db.into_shape_with_order(shape).unwrap());
            }
        }
        if need_x {
            let w2 = wv.view().into_shape_with_order((o, rows)).unwrap();
            let mut dx = vec![F::zero(); n * per_image];
            let mut dcols = Array2::<F>::zeros((rows, ncols));
            for i in 0..n {
                let g_i = ArrayView2::from_shape((o, ncols), &g_slice[i * o * ncols..(i + 1) * o * ncols])
                    .unwrap();
                let dst = &mut dx[i * per_image..(i + 1) * per_image];
                if geo.is_pointwise() {
                    let mut dst_view = ndarray::ArrayViewMut2::from_shape((rows, ncols), dst).unwrap();
                    general_mat_mul(F::one(), &w2.t(), &g_i, F::zero(), &mut dst_view);
                } else {
                    general_mat_mul(F::one(), &w2.t(), &g_i, F::zero(), &mut dcols);
                    col2im(dcols.as_slice().unwrap(), &geo, dst);
                }
            }
            self.accumulate(grads, x, Array4::from_shape_vec((n, c, h, wd), dx).unwrap());
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn group_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: &[F],
        rstd: &[F],
        grad: &Array4<F>,
        grads: &mut [Option<Array4<F>>],
    ) {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dim();
        let hw = h * w;
        let cpg = c / groups;
        let per_group = cpg * hw;
        let m = F::from_usize(per_group).unwrap();
        let gamma_s: Vec<F> = self.value(gamma).iter().copied().collect();
        let grad = grad.as_standard_layout();
        let g_slice = grad.as_slice().unwrap();
        let x_slice = xv.as_slice().unwrap();
        let mut dgamma = vec![F::zero(); c];
        let mut dbeta = vec![F::zero(); c];
        let mut dx = vec![F::zero(); x_slice.len()];
        for gi in 0..n * groups {
            let g = gi % groups;
            let range = gi * per_group..(gi + 1) * per_group;
            let xs = &x_slice[range.clone()];
            let gs = &g_slice[range.clone()];
            let (mu, rs) = (mean[gi], rstd[gi]);
            let mut sum_dxhat = F::zero();
            let mut sum_dxhat_xhat = F::zero();
            for k in 0..per_group {
                let ch = g * cpg + k / hw;
                let xhat = (xs[k] - mu) * rs;
                let dxhat = gs[k] * gamma_s[ch];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
                dgamma[ch] += gs[k] * xhat;
                dbeta[ch] += gs[k];
            }
            let dst = &mut dx[range];
            for k in 0..per_group {
                let ch = g * cpg + k / hw;
                let xhat = (xs[k] - mu) * rs;
                let dxhat = gs[k] * gamma_s[ch];
                dst[k] = rs / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
            }
        }
        if self.requires_grad(x) {
            self.accumulate(grads, x, Array4::from_shape_vec((n, c, h, w), dx).unwrap());
        }
        if self.requires_grad(gamma) {
            let shape = self.value(gamma).raw_dim();
            self.accumulate(grads, gamma, Array4::from_shape_vec(shape, dgamma).unwrap());
        }
        if self.requires_grad(beta) {
            let shape = self.value(beta).raw_dim();
            self.accumulate(grads, beta, Array4::from_shape_vec(shape, dbeta).unwrap());
        }
    }
}

fn sigmoid<F: Real>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Array4<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Array4<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` when nothing flowed there.
    pub fn get_or_zeros(&self, v: Var, like: &Array4<F>) -> Array4<F> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array4::zeros(like.raw_dim()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn pseudo(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut state = seed.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(1);
        Array::from_shape_simple_fn(shape, || {
            state = state
                .wrapping_mul(6_364_136_223_846_793_005)
                .wrapping_add(1_442_695_040_888_963_407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    /// Central-difference check of d(loss)/d(leaf) for every element of `leaf_value`.
    fn check<B>(leaf_value: Array4<f64>, build: B)
    where
        B: Fn(&mut Graph<f64>, Var) -> Var,
    {
        let mut g = Graph::new();
        let leaf = g.leaf(leaf_value.clone(), true);
        let loss = build(&mut g, leaf);
        let analytic = g.backward(loss).get_or_zeros(leaf, &leaf_value);
        let h = 1e-6;
        for idx in 0..leaf_value.len() {
            let eval = |delta: f64| {
                let mut v = leaf_value.clone();
                v.as_slice_mut().unwrap()[idx] += delta;
                let mut g = Graph::new();
                let leaf = g.leaf(v, true);
                let loss = build(&mut g, leaf);
                g.scalar(loss)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "element {idx}: analytic {a}, numeric {numeric}");
        }
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let x = pseudo((2, 3, 5, 6), 1);
        let w = pseudo((4, 3, 3, 3), 2);
        let b = pseudo((1, 4, 1, 1), 3);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
            let y = g.conv2d(xv, wv, Some(bv), stride, pad);
            let out = g.value(y);
            let (_, _, ho, wo) = out.dim();
            for n in 0..2 {
                for o in 0..4 {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = b[[0, o, 0, 0]];
                            for c in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if iy >= 0 && ix >= 0 && iy < 5 && ix < 6 {
                                            acc += w[[o, c, ky, kx]] * x[[n, c, iy as usize, ix as usize]];
                                        }
                                    }
                                }
                            }
                            assert!((out[[n, o, oy, ox]] - acc).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let w = pseudo((4, 3, 3, 3), 2);
        let x = pseudo((2, 3, 5, 4), 1);
        let target = pseudo((2, 4, 3, 2), 9);
        let w2 = w.clone();
        check(x.clone(), move |g, leaf| {
            let wv = g.input(w2.clone());
            let y = g.conv2d(leaf, wv, None, 2, 1);
            g.mse(y, &target)
        });
        let target = pseudo((2, 4, 5, 4), 7);
        check(w, move |g, leaf| {
            let xv = g.input(x.clone());
            let y = g.conv2d(xv, leaf, None, 1, 1);
            g.mse(y, &target)
        });
    }

    #[test]
    fn pointwise_conv_and_linear_gradients() {
        let x = pseudo((2, 3, 4, 4), 4);
        let target = pseudo((2, 5, 4, 4), 5);
        check(pseudo((5, 3, 1, 1), 6), move |g, leaf| {
            let xv = g.input(x.clone());
            let y = g.conv2d(xv, leaf, None, 1, 0);
            g.mse(y, &target)
        });
        let w = pseudo((5, 3, 1, 1), 6);
        let target = pseudo((3, 5, 1, 1), 8);
        check(pseudo((3, 3, 1, 1), 7), move |g, leaf| {
            let wv = g.input(w.clone());
            let y = g.linear(leaf, wv, None);
            g.mse(y, &target)
        });
    }

    #[test]
    fn group_norm_and_scale_shift_gradients() {
        let target = pseudo((2, 4, 3, 3), 11);
        let gamma = pseudo((1, 4, 1, 1), 12);
        let beta = pseudo((1, 4, 1, 1), 13);
        let scale = pseudo((2, 4, 1, 1), 14);
        let t2 = target.clone();
        check(pseudo((2, 4, 3, 3), 10), move |g, leaf| {
            let (gm, bt) = (g.input(gamma.clone()), g.input(beta.clone()));
            let y = g.group_norm(leaf, gm, bt, 2);
            g.mse(y, &t2)
        });
        let x = pseudo((2, 4, 3, 3), 10);
        check(scale, move |g, leaf| {
            let xv = g.input(x.clone());
            let shift = g.input(pseudo((2, 4, 1, 1), 15));
            let y = g.scale_shift(xv, leaf, shift);
            g.mse(y, &target)
        });
    }

    #[test]
    fn elementwise_and_resampling_gradients() {
        let target = pseudo((1, 4, 4, 4), 21);
        check(pseudo((1, 2, 4, 4), 20), move |g, leaf| {
            let a = g.silu(leaf);
            let p = g.avg_pool2(a);
            let u = g.upsample2(p);
            let c = g.concat(u, leaf);
            let s = g.add(c, c);
            g.mse(s, &target)
        });
        check(pseudo((3, 2, 2, 2), 22), move |g, leaf| {
            let m = g.spatial_mean(leaf);
            let w = g.input(pseudo((1, 2, 1, 1), 23));
            let logit = g.linear(m, w, None);
            g.bce_with_logits(logit, 1.0)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(pseudo((1, 1, 2, 2), 1));
        let w = g.leaf(pseudo((1, 1, 1, 1), 2), true);
        let y = g.conv2d(x, w, None, 1, 0);
        let loss = g.mse(y, &Array4::zeros((1, 1, 2, 2)));
        let grads = g.backward(loss);
        assert!(grads.get(x).is_none());
        assert!(grads.get(w).is_some());
    }
}
