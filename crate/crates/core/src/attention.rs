//! Spatial attention from discriminator feature maps.
//!
//! The attention map is the channel mean of one discriminator feature tap,
//! rescaled per sample to `[0, 1]`, upsampled to the label size and multiplied
//! into the ground-truth label.

use std::path::Path;

use ndarray::{s, Array3, Array4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Raw channel means.
    Raw,
    /// Per-sample affine rescale to `[0, 1]`; constant maps become all ones.
    MinMax,
}

/// Per-sample attention weights for a batch, `[N, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<F> {
    pub weights: Array3<F>,
    /// Spatial size of the discriminator tap the map came from.
    pub source_scale: usize,
    pub normalization: Normalization,
}

impl<F: Real> AttentionMap<F> {
    pub fn height(&self) -> usize {
        self.weights.dim().1
    }

    pub fn width(&self) -> usize {
        self.weights.dim().2
    }

    /// All-ones map, the identity under [`apply_attention`].
    pub fn ones(batch: usize, height: usize, width: usize) -> Self {
        Self {
            weights: Array3::ones((batch, height, width)),
            source_scale: height,
            normalization: Normalization::MinMax,
        }
    }
}

/// Channel mean of `features` (`[N, C, H', W']`).
pub fn attention_map<F: Real>(features: &Array4<F>) -> Result<AttentionMap<F>> {
    let (n, c, h, _) = features.dim();
    if c == 0 || n == 0 {
        return Err(Error::Shape("attention needs at least one feature channel".into()));
    }
    let weights = features.sum_axis(Axis(1)) / F::from_usize(c).unwrap();
    Ok(AttentionMap {
        weights,
        source_scale: h,
        normalization: Normalization::Raw,
    })
}

/// Per-sample min-max rescale to `[0, 1]`. A constant map becomes all ones.
pub fn normalize_minmax<F: Real>(map: &AttentionMap<F>) -> AttentionMap<F> {
    let mut weights = map.weights.clone();
    for mut sample in weights.axis_iter_mut(Axis(0)) {
        let lo = sample.iter().copied().fold(F::infinity(), F::min);
        let hi = sample.iter().copied().fold(F::neg_infinity(), F::max);
        let range = hi - lo;
        if range > F::zero() && range.is_finite() {
            sample.mapv_inplace(|v| ((v - lo) / range).max(F::zero()).min(F::one()));
        } else {
            sample.fill(F::one());
        }
    }
    AttentionMap {
        weights,
        source_scale: map.source_scale,
        normalization: Normalization::MinMax,
    }
}

/// Corner-aligned bilinear resize to `height x width`, which must be integer
/// multiples of the map size.
pub fn upsample_bilinear<F: Real>(map: &AttentionMap<F>, height: usize, width: usize) -> Result<AttentionMap<F>> {
    let (n, h, w) = map.weights.dim();
    if h == 0 || w == 0 || !height.is_multiple_of(h) || !width.is_multiple_of(w) {
        return Err(Error::Shape(format!(
            "cannot upsample a {h}x{w} attention map to {height}x{width} by an integer factor"
        )));
    }
    let axis = |out: usize, src: usize| -> Vec<(usize, usize, F)> {
        (0..out)
            .map(|i| {
                if src == 1 || out == 1 {
                    return (0, 0, F::zero());
                }
                let pos = i as f64 * (src - 1) as f64 / (out - 1) as f64;
                let lo = (pos.floor() as usize).min(src - 1);
                let hi = (lo + 1).min(src - 1);
                (lo, hi, F::lit(pos - lo as f64))
            })
            .collect()
    };
    let ys = axis(height, h);
    let xs = axis(width, w);
    let mut weights = Array3::zeros((n, height, width));
    for (mut dst, src) in weights.axis_iter_mut(Axis(0)).zip(map.weights.axis_iter(Axis(0))) {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[[y0, x0]] * (F::one() - fx) + src[[y0, x1]] * fx;
                let bottom = src[[y1, x0]] * (F::one() - fx) + src[[y1, x1]] * fx;
                dst[[oy, ox]] = top * (F::one() - fy) + bottom * fy;
            }
        }
    }
    Ok(AttentionMap {
        weights,
        source_scale: map.source_scale,
        normalization: map.normalization,
    })
}

/// Min-max normalization followed by bilinear upsampling to `height x width`.
pub fn normalize_and_upsample<F: Real>(map: &AttentionMap<F>, height: usize, width: usize) -> Result<AttentionMap<F>> {
    upsample_bilinear(&normalize_minmax(map), height, width)
}

/// `x0 ⊙ A`, broadcasting the map across label channels.
pub fn apply_attention<F: Real>(x0: &Array4<F>, map: &AttentionMap<F>) -> Result<Array4<F>> {
    let (n, _, h, w) = x0.dim();
    if map.weights.dim() != (n, h, w) {
        return Err(Error::Shape(format!(
            "attention {:?} does not match label {:?}",
            map.weights.shape(),
            x0.shape()
        )));
    }
    let mut out = x0.clone();
    for (mut sample, a) in out.axis_iter_mut(Axis(0)).zip(map.weights.axis_iter(Axis(0))) {
        for mut channel in sample.axis_iter_mut(Axis(0)) {
            Zip::from(&mut channel).and(&a).for_each(|x, &w| *x *= w);
        }
    }
    Ok(out)
}

/// Writes one sample of a map as an 8-bit grayscale PNG, rescaling its range to 0..=255.
pub fn write_png<F: Real>(map: &AttentionMap<F>, sample: usize, path: &Path) -> Result<()> {
    let plane = map.weights.slice(s![sample, .., ..]);
    let lo = plane.iter().copied().fold(F::infinity(), F::min);
    let hi = plane.iter().copied().fold(F::neg_infinity(), F::max);
    let range = (hi - lo).to_f64().unwrap();
    let (h, w) = plane.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = plane[[y as usize, x as usize]];
        let scaled = if range > 0.0 {
            (v - lo).to_f64().unwrap() / range
        } else {
            1.0
        };
        image::Luma([(scaled * 255.0).round() as u8])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array};

    fn single(plane: ndarray::Array2<f64>) -> AttentionMap<f64> {
        let (h, w) = plane.dim();
        AttentionMap {
            weights: plane.into_shape_with_order((1, h, w)).unwrap(),
            source_scale: h,
            normalization: Normalization::Raw,
        }
    }

    #[test]
    fn channel_mean_example() {
        let mut f = Array4::<f64>::zeros((1, 2, 2, 2));
        f.slice_mut(s![0, 0, .., ..]).assign(&arr2(&[[0.0, 2.0], [4.0, 6.0]]));
        f.slice_mut(s![0, 1, .., ..]).fill(2.0);
        let a = attention_map(&f).unwrap();
        assert_eq!(a.weights.slice(s![0, .., ..]), arr2(&[[1.0, 2.0], [3.0, 4.0]]));
        assert_eq!(a.source_scale, 2);

        let constant = Array4::from_elem((2, 3, 4, 4), 0.7);
        assert!(attention_map(&constant).unwrap().weights.iter().all(|&v| (v - 0.7f64).abs() < 1e-15));
        assert!(attention_map(&Array4::<f64>::zeros((1, 0, 2, 2))).is_err());
    }

    #[test]
    fn minmax_examples() {
        let a = normalize_minmax(&single(arr2(&[[1.0, 2.0], [3.0, 4.0]])));
        let expected = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (got, want) in a.weights.iter().zip(expected) {
            assert!((got - want).abs() < 1e-15);
        }
        let flat = normalize_minmax(&single(Array::from_elem((3, 3), -5.0)));
        assert!(flat.weights.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn bilinear_preserves_corners_and_interpolates() {
        let a = single(arr2(&[[0.0, 1.0], [2.0, 3.0]]));
        let up = upsample_bilinear(&a, 4, 4).unwrap();
        let p = up.weights.index_axis(Axis(0), 0);
        let p = |y: usize, x: usize| p[(y, x)];
        assert_eq!(p(0, 0), 0.0);
        assert_eq!(p(0, 3), 1.0);
        assert_eq!(p(3, 0), 2.0);
        assert_eq!(p(3, 3), 3.0);
        // Corner-aligned: output row 1 sits at source y = 1/3.
        assert!((p(1, 0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((p(1, 1) - (2.0 / 3.0 + 1.0 / 3.0)).abs() < 1e-12);
        assert!(upsample_bilinear(&a, 5, 4).is_err());
    }

    #[test]
    fn apply_attention_examples() {
        let x0 = Array4::from_shape_fn((1, 2, 2, 2), |(_, c, y, x)| if (c + y + x) % 2 == 0 { 1.0 } else { -1.0 });
        assert_eq!(apply_attention(&x0, &AttentionMap::ones(1, 2, 2)).unwrap(), x0);
        let zeros = AttentionMap {
            weights: Array3::zeros((1, 2, 2)),
            source_scale: 2,
            normalization: Normalization::MinMax,
        };
        assert!(apply_attention(&x0, &zeros).unwrap().iter().all(|&v| v == 0.0));
        let half = AttentionMap {
            weights: Array3::from_elem((1, 2, 2), 0.5),
            source_scale: 2,
            normalization: Normalization::MinMax,
        };
        assert!(apply_attention(&x0, &half).unwrap().iter().all(|&v| v == 0.5 || v == -0.5));
        assert!(apply_attention(&x0, &AttentionMap::ones(1, 4, 4)).is_err());
    }
}
