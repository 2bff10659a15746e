//! Attention maps derived from binary masks.
//!
//! Three transforms are provided, each operating on the mask after it has
//! been down-sampled to the encoder's output resolution:
//!
//! * **shape**: nearest-neighbour lattice sampling, values stay in {0, 1};
//! * **contour**: the shape map blurred by a unit-sum Gaussian and rescaled
//!   so its maximum is 1, spreading attention across the object boundary;
//! * **center**: the distance of each foreground pixel to the nearest
//!   background pixel divided by the largest such distance, peaking at the
//!   object centre.

use serde::{Deserialize, Serialize};

use crate::distance::{distance_to_background, Metric};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_FACTOR: usize = 4;
pub const DEFAULT_SIGMA: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttentionKind {
    Shape,
    Contour { sigma: f64 },
    Center { metric: Metric },
}

impl AttentionKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttentionKind::Shape => "shape",
            AttentionKind::Contour { .. } => "contour",
            AttentionKind::Center { .. } => "center",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MapStatus {
    Ok,
    /// The source had no foreground; normalization was skipped and the map
    /// is all zero.
    EmptyForeground,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<T> {
    pub kind: AttentionKind,
    pub factor: usize,
    pub width: usize,
    pub height: usize,
    pub values: Vec<T>,
    pub status: MapStatus,
}

impl<T: Scalar> AttentionMap<T> {
    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.width + j]
    }

    pub fn max(&self) -> T {
        self.values.iter().copied().fold(T::zero(), T::max)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(&[1, self.height, self.width], self.values.clone()).expect("map extent")
    }

    /// 8-bit preview: values scaled by 255 and rounded.
    pub fn preview_bytes(&self) -> Vec<u8> {
        self.values
            .iter()
            .map(|v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

fn check_factor(mask: &Mask, factor: usize) -> Result<()> {
    if factor == 0 {
        return Err(Error::InvalidArgument("down-sampling factor must be positive".into()));
    }
    if !mask.width().is_multiple_of(factor) || !mask.height().is_multiple_of(factor) {
        return Err(Error::InvalidArgument(format!(
            "mask {}x{} is not divisible by factor {factor}",
            mask.width(),
            mask.height()
        )));
    }
    Ok(())
}

/// Nearest-neighbour down-sampling of `mask` by `factor`, sampling the
/// top-left pixel of every `factor x factor` cell.
pub fn downsample(mask: &Mask, factor: usize) -> Result<Mask> {
    check_factor(mask, factor)?;
    let (w, h) = (mask.width() / factor, mask.height() / factor);
    Ok(Mask::from_fn(w, h, |i, j| mask.get(i * factor, j * factor)))
}

pub fn shape_map<T: Scalar>(mask: &Mask, factor: usize) -> Result<AttentionMap<T>> {
    let small = downsample(mask, factor)?;
    Ok(AttentionMap {
        kind: AttentionKind::Shape,
        factor,
        width: small.width(),
        height: small.height(),
        values: small.values().iter().map(|&v| T::of(v as f64)).collect(),
        status: MapStatus::Ok,
    })
}

/// Unit-sum sampled Gaussian with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Zero-padded separable blur of a row-major `w x h` grid.
fn separable_blur(values: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, &k) in kernel.iter().enumerate() {
                let jj = j as isize + t as isize - r;
                if jj >= 0 && jj < w as isize {
                    acc += k * values[i * w + jj as usize];
                }
            }
            tmp[i * w + j] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, &k) in kernel.iter().enumerate() {
                let ii = i as isize + t as isize - r;
                if ii >= 0 && ii < h as isize {
                    acc += k * tmp[ii as usize * w + j];
                }
            }
            out[i * w + j] = acc;
        }
    }
    out
}

pub fn contour_map<T: Scalar>(mask: &Mask, factor: usize, sigma: f64) -> Result<AttentionMap<T>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let small = downsample(mask, factor)?;
    let (w, h) = (small.width(), small.height());
    let base: Vec<f64> = small.values().iter().map(|&v| v as f64).collect();
    let blurred = separable_blur(&base, w, h, &gaussian_kernel(sigma));
    let peak = blurred.iter().copied().fold(0.0, f64::max);
    let (values, status) = if peak > 0.0 {
        (blurred.iter().map(|&v| T::of(v / peak)).collect(), MapStatus::Ok)
    } else {
        (vec![T::zero(); w * h], MapStatus::EmptyForeground)
    };
    Ok(AttentionMap {
        kind: AttentionKind::Contour { sigma },
        factor,
        width: w,
        height: h,
        values,
        status,
    })
}

pub fn center_map<T: Scalar>(mask: &Mask, factor: usize, metric: Metric) -> Result<AttentionMap<T>> {
    let small = downsample(mask, factor)?;
    if small.is_empty() {
        return Err(Error::EmptyForeground(format!(
            "center map needs foreground after down-sampling {}x{} by {factor}",
            mask.width(),
            mask.height()
        )));
    }
    let dist = distance_to_background(&small, metric);
    let peak = dist.iter().copied().fold(0.0, f64::max);
    Ok(AttentionMap {
        kind: AttentionKind::Center { metric },
        factor,
        width: small.width(),
        height: small.height(),
        values: dist.iter().map(|&d| T::of(d / peak)).collect(),
        status: MapStatus::Ok,
    })
}

pub fn attention_map<T: Scalar>(mask: &Mask, kind: AttentionKind, factor: usize) -> Result<AttentionMap<T>> {
    match kind {
        AttentionKind::Shape => shape_map(mask, factor),
        AttentionKind::Contour { sigma } => contour_map(mask, factor, sigma),
        AttentionKind::Center { metric } => center_map(mask, factor, metric),
    }
}

/// Stacks one attention map per mask into an `[N, H/f, W/f]` tensor.
///
/// `kinds` holds either one kind per mask or a single kind for all.
pub fn build_supervision<T: Scalar>(masks: &[Mask], kinds: &[AttentionKind], factor: usize) -> Result<Tensor<T>> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidArgument("supervision needs at least one mask".into()))?;
    if kinds.len() != 1 && kinds.len() != masks.len() {
        return Err(Error::InvalidArgument(format!(
            "{} kinds for {} masks",
            kinds.len(),
            masks.len()
        )));
    }
    let mut data = Vec::new();
    let mut extent = (0, 0);
    for (t, mask) in masks.iter().enumerate() {
        if (mask.width(), mask.height()) != (first.width(), first.height()) {
            return Err(Error::InvalidArgument(format!(
                "mask {t} is {}x{}, mask 0 is {}x{}",
                mask.width(),
                mask.height(),
                first.width(),
                first.height()
            )));
        }
        let kind = kinds[if kinds.len() == 1 { 0 } else { t }];
        let map = attention_map::<T>(mask, kind, factor)?;
        extent = (map.height, map.width);
        data.extend(map.values);
    }
    Tensor::new(&[masks.len(), extent.0, extent.1], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_factor_one_is_identity() {
        let m = Mask::from_fn(6, 4, |i, j| (i * j) % 3 == 1);
        let map = shape_map::<f64>(&m, 1).unwrap();
        let expect: Vec<f64> = m.values().iter().map(|&v| v as f64).collect();
        assert_eq!(map.values, expect);
    }

    #[test]
    fn shape_samples_top_left() {
        let mut m = Mask::empty(4, 4);
        m.set(0, 0, true);
        let map = shape_map::<f32>(&m, 4).unwrap();
        assert_eq!((map.width, map.height), (1, 1));
        assert_eq!(map.values, vec![1.0]);
    }

    #[test]
    fn rejects_non_divisible_factor() {
        let m = Mask::empty(10, 8);
        assert!(shape_map::<f32>(&m, 4).is_err());
        assert!(contour_map::<f32>(&m, 3, 1.0).is_err());
        assert!(shape_map::<f32>(&m, 0).is_err());
    }

    #[test]
    fn contour_single_pixel_gaussian_ratio() {
        let m = Mask::from_fn(9, 9, |i, j| i == 4 && j == 4);
        let map = contour_map::<f64>(&m, 1, 1.0).unwrap();
        assert_eq!(map.get(4, 4), 1.0);
        let ratio = (-0.5f64).exp();
        for (i, j) in [(3, 4), (5, 4), (4, 3), (4, 5)] {
            assert!((map.get(i, j) - ratio).abs() < 1e-12);
        }
        assert!((map.get(3, 3) - ratio * ratio).abs() < 1e-12);
    }

    #[test]
    fn contour_empty_mask_is_flagged() {
        let map = contour_map::<f32>(&Mask::empty(8, 8), 2, 1.0).unwrap();
        assert_eq!(map.status, MapStatus::EmptyForeground);
        assert!(map.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn contour_all_ones_saturates_in_interior() {
        let m = Mask::from_fn(32, 32, |_, _| true);
        let map = contour_map::<f64>(&m, 1, 1.0).unwrap();
        assert_eq!(map.max(), 1.0);
        assert!((map.get(16, 16) - 1.0).abs() < 1e-12);
        // non-increasing from the centre towards the corner along the diagonal
        for k in 0..15 {
            assert!(map.get(k, k) <= map.get(k + 1, k + 1) + 1e-15);
        }
    }

    #[test]
    fn center_rejects_empty() {
        let err = center_map::<f32>(&Mask::empty(8, 8), 4, Metric::Chebyshev).unwrap_err();
        assert!(matches!(err, Error::EmptyForeground(_)));
    }

    #[test]
    fn center_single_pixel() {
        let m = Mask::from_fn(5, 5, |i, j| i == 1 && j == 3);
        let map = center_map::<f64>(&m, 1, Metric::Euclidean).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let want = if (i, j) == (1, 3) { 1.0 } else { 0.0 };
                assert_eq!(map.get(i, j), want);
            }
        }
    }

    #[test]
    fn supervision_shapes() {
        let masks: Vec<Mask> = (0..4).map(|k| Mask::from_fn(64, 64, |i, j| i + j > 10 * k + 20)).collect();
        let t = build_supervision::<f32>(&masks, &[AttentionKind::Shape], 4).unwrap();
        assert_eq!(t.shape(), &[4, 16, 16]);

        let one = build_supervision::<f32>(&masks[..1], &[AttentionKind::Shape], 4).unwrap();
        assert_eq!(one.data(), shape_map::<f32>(&masks[0], 4).unwrap().values.as_slice());

        let mut odd = masks.clone();
        odd.push(Mask::empty(32, 64));
        assert!(build_supervision::<f32>(&odd, &[AttentionKind::Shape], 4).is_err());
    }

    #[test]
    fn supervision_permutes_with_inputs() {
        let masks: Vec<Mask> = (0..3).map(|k| Mask::from_fn(16, 16, |i, j| i * 3 + j < 12 + 7 * k)).collect();
        let kinds = [
            AttentionKind::Shape,
            AttentionKind::Contour { sigma: 1.0 },
            AttentionKind::Center { metric: Metric::Chebyshev },
        ];
        let a = build_supervision::<f64>(&masks, &kinds, 2).unwrap();
        let perm = [2, 0, 1];
        let pm: Vec<Mask> = perm.iter().map(|&p| masks[p].clone()).collect();
        let pk: Vec<AttentionKind> = perm.iter().map(|&p| kinds[p]).collect();
        let b = build_supervision::<f64>(&pm, &pk, 2).unwrap();
        let plane = 64;
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(
                &b.data()[dst * plane..(dst + 1) * plane],
                &a.data()[src * plane..(src + 1) * plane]
            );
        }
    }
}
