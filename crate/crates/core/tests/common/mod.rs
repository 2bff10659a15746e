//! Brute-force reference implementations shared by the oracle and
//! acceptance test targets. Every `check_*` function compares the library
//! against an independent computation and returns a description of the first
//! mismatch.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use tnet_core::attention::{center_map, contour_map, shape_map};
use tnet_core::distance::{chebyshev_dt, distance_to_background, squared_edt, UNREACHABLE};
use tnet_core::metrics::hausdorff95;
use tnet_core::{Graph, Mask, Metric, Tensor};

pub type Check = Result<(), String>;

pub fn random_mask(rng: &mut Xoshiro256PlusPlus, w: usize, h: usize) -> Mask {
    let density = rng.random_range(0.05..0.95);
    Mask::from_fn(w, h, |_, _| rng.random_bool(density))
}

/// Masks whose sides are random multiples of `multiple_of`, up to 32.
pub fn random_masks(seed: u64, count: usize, multiple_of: usize) -> Vec<Mask> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let steps = 32 / multiple_of;
    (0..count)
        .map(|_| {
            let w = multiple_of * rng.random_range(1..=steps);
            let h = multiple_of * rng.random_range(1..=steps);
            random_mask(&mut rng, w, h)
        })
        .collect()
}

pub fn brute_dt(w: usize, h: usize, sites: &[bool], metric: Metric) -> Vec<u64> {
    let mut out = vec![UNREACHABLE; w * h];
    for i in 0..h {
        for j in 0..w {
            for si in 0..h {
                for sj in 0..w {
                    if !sites[si * w + sj] {
                        continue;
                    }
                    let (di, dj) = (i.abs_diff(si) as u64, j.abs_diff(sj) as u64);
                    let d = match metric {
                        Metric::Euclidean => di * di + dj * dj,
                        Metric::Chebyshev => di.max(dj),
                    };
                    out[i * w + j] = out[i * w + j].min(d);
                }
            }
        }
    }
    out
}

/// Distance to the nearest background pixel, enumerating every background
/// pixel plus the one-pixel ring around the image.
pub fn brute_distance_to_background(mask: &Mask, metric: Metric) -> Vec<f64> {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let mut background = Vec::new();
    for i in -1..=h {
        for j in -1..=w {
            let inside = i >= 0 && j >= 0 && i < h && j < w;
            if !inside || !mask.get(i as usize, j as usize) {
                background.push((i, j));
            }
        }
    }
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let best = background
                .iter()
                .map(|&(bi, bj)| {
                    let (di, dj) = ((i - bi).abs(), (j - bj).abs());
                    match metric {
                        Metric::Euclidean => ((di * di + dj * dj) as f64).sqrt(),
                        Metric::Chebyshev => di.max(dj) as f64,
                    }
                })
                .fold(f64::INFINITY, f64::min);
            out.push(best);
        }
    }
    out
}

pub fn brute_boundary(mask: &Mask) -> Vec<(i64, i64)> {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let on = |i: i64, j: i64| i >= 0 && j >= 0 && i < h && j < w && mask.get(i as usize, j as usize);
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if on(i, j) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(di, dj)| !on(i + di, j + dj)) {
                out.push((i, j));
            }
        }
    }
    out
}

pub fn brute_hausdorff95(a: &Mask, b: &Mask) -> f64 {
    let (ba, bb) = (brute_boundary(a), brute_boundary(b));
    let nearest = |p: (i64, i64), set: &[(i64, i64)]| {
        set.iter()
            .map(|q| (((p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)) as f64).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let mut pooled: Vec<f64> = ba.iter().map(|&p| nearest(p, &bb)).collect();
    pooled.extend(bb.iter().map(|&p| nearest(p, &ba)));
    pooled.sort_by(f64::total_cmp);
    let rank = (0.95 * pooled.len() as f64).ceil() as usize;
    pooled[rank.max(1) - 1]
}

/// Zero-padded dense 2-D convolution with a normalized isotropic Gaussian,
/// rescaled to a maximum of 1.
pub fn dense_contour(small: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::new();
    for di in -r..=r {
        for dj in -r..=r {
            kernel.push((di, dj, (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp()));
        }
    }
    let total: f64 = kernel.iter().map(|k| k.2).sum();
    let mut out = vec![0.0; w * h];
    for i in 0..h as i64 {
        for j in 0..w as i64 {
            let mut acc = 0.0;
            for &(di, dj, k) in &kernel {
                let (ii, jj) = (i + di, j + dj);
                if ii >= 0 && jj >= 0 && ii < h as i64 && jj < w as i64 {
                    acc += k / total * small[(ii * w as i64 + jj) as usize];
                }
            }
            out[(i * w as i64 + j) as usize] = acc;
        }
    }
    let peak = out.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v /= peak);
    }
    out
}

pub fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, bias: &[f64], pad: usize) -> Tensor<f64> {
    let [b, c, h, w] = x.shape().try_into().unwrap();
    let [f, _, ks, _] = k.shape().try_into().unwrap();
    let (oh, ow) = (h + 2 * pad - ks + 1, w + 2 * pad - ks + 1);
    let (xd, kd) = (x.data(), k.data());
    Tensor::from_fn(&[b, f, oh, ow], |idx| {
        let (n, o, i, j) = (idx / (f * oh * ow), idx / (oh * ow) % f, idx / ow % oh, idx % ow);
        let mut acc = bias[o];
        for ci in 0..c {
            for di in 0..ks {
                for dj in 0..ks {
                    let (ii, jj) = ((i + di) as i64 - pad as i64, (j + dj) as i64 - pad as i64);
                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                        acc += kd[((o * c + ci) * ks + di) * ks + dj]
                            * xd[((n * c + ci) * h + ii as usize) * w + jj as usize];
                    }
                }
            }
        }
        acc
    })
}

/// Raw distance transforms on `count` random site grids up to 32x32.
pub fn check_distance_transforms(seed: u64, count: usize) -> Check {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    for n in 0..count {
        let (w, h) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let density = rng.random_range(0.0..0.3);
        let sites: Vec<bool> = (0..w * h).map(|_| rng.random_bool(density)).collect();
        if squared_edt(w, h, &sites) != brute_dt(w, h, &sites, Metric::Euclidean) {
            return Err(format!("squared EDT differs on grid {n} ({w}x{h})"));
        }
        if chebyshev_dt(w, h, &sites) != brute_dt(w, h, &sites, Metric::Chebyshev) {
            return Err(format!("Chebyshev DT differs on grid {n} ({w}x{h})"));
        }
    }
    Ok(())
}

/// Foreground-to-background distances on `count` random masks up to 32x32,
/// both metrics, compared exactly.
pub fn check_distance_to_background(seed: u64, count: usize) -> Check {
    for (n, mask) in random_masks(seed, count, 1).iter().enumerate() {
        for metric in [Metric::Euclidean, Metric::Chebyshev] {
            if distance_to_background(mask, metric) != brute_distance_to_background(mask, metric) {
                return Err(format!("{metric:?} distance differs on mask {n}"));
            }
        }
    }
    Ok(())
}

/// HD95 on `count` random non-empty mask pairs up to 32x32, compared
/// exactly; pairs with an empty side must be rejected.
pub fn check_hausdorff95(seed: u64, count: usize) -> Check {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut checked = 0;
    while checked < count {
        let (w, h) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let a = random_mask(&mut rng, w, h);
        let b = random_mask(&mut rng, w, h);
        if a.is_empty() || b.is_empty() {
            if hausdorff95(&a, &b).is_ok() {
                return Err(format!("HD95 accepted an empty mask ({w}x{h})"));
            }
            continue;
        }
        let (got, want) = (hausdorff95(&a, &b).map_err(|e| e.to_string())?, brute_hausdorff95(&a, &b));
        if got != want {
            return Err(format!("HD95 pair {checked} ({w}x{h}): {got} vs {want}"));
        }
        checked += 1;
    }
    Ok(())
}

pub fn check_shape_maps(seed: u64, count: usize) -> Check {
    for factor in [1, 2, 4, 8] {
        for (n, mask) in random_masks(seed + factor as u64, count, factor).iter().enumerate() {
            let map = shape_map::<f64>(mask, factor).map_err(|e| e.to_string())?;
            if (map.width, map.height) != (mask.width() / factor, mask.height() / factor) {
                return Err(format!("shape map {n} has extent {}x{}", map.width, map.height));
            }
            for i in 0..map.height {
                for j in 0..map.width {
                    let want = if mask.get(i * factor, j * factor) { 1.0 } else { 0.0 };
                    if map.get(i, j) != want {
                        return Err(format!("shape map {n}, factor {factor}, pixel ({i}, {j})"));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Returns the largest deviation from the dense-convolution reference.
pub fn check_contour_maps(seed: u64, count: usize, tol: f64) -> Result<f64, String> {
    let factor = 4;
    let mut worst: f64 = 0.0;
    for (n, mask) in random_masks(seed, count, factor).iter().enumerate() {
        let sigma = [0.5, 1.0, 2.0, 3.5][n % 4];
        let (w, h) = (mask.width() / factor, mask.height() / factor);
        let small: Vec<f64> = (0..h)
            .flat_map(|i| (0..w).map(move |j| (i, j)))
            .map(|(i, j)| if mask.get(i * factor, j * factor) { 1.0 } else { 0.0 })
            .collect();
        let want = dense_contour(&small, w, h, sigma);
        let map = contour_map::<f64>(mask, factor, sigma).map_err(|e| e.to_string())?;
        for (a, b) in map.values.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
        if worst >= tol {
            return Err(format!("contour map {n}: deviation {worst:.3e}"));
        }
    }
    Ok(worst)
}

pub fn check_center_maps(seed: u64, count: usize) -> Check {
    let factor = 2;
    for (n, mask) in random_masks(seed, count, factor).iter().enumerate() {
        let small = Mask::from_fn(mask.width() / factor, mask.height() / factor, |i, j| {
            mask.get(i * factor, j * factor)
        });
        for metric in [Metric::Euclidean, Metric::Chebyshev] {
            let result = center_map::<f64>(mask, factor, metric);
            if small.is_empty() {
                if result.is_ok() {
                    return Err(format!("center map {n} accepted an empty mask"));
                }
                continue;
            }
            let dist = brute_distance_to_background(&small, metric);
            let peak = dist.iter().copied().fold(0.0, f64::max);
            let map = result.map_err(|e| e.to_string())?;
            if map.values.iter().zip(&dist).any(|(a, d)| (a - d / peak).abs() > 1e-12) {
                return Err(format!("{metric:?} center map {n} differs"));
            }
        }
    }
    Ok(())
}

pub fn check_conv2d(seed: u64, count: usize) -> Check {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    for n in 0..count {
        let (b, c, f) = (rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..5));
        let ks = [1, 3, 5][rng.random_range(0..3)];
        let pad = rng.random_range(0..=ks / 2);
        let (h, w) = (rng.random_range(ks..12), rng.random_range(ks..12));
        let x = Tensor::from_fn(&[b, c, h, w], |_| rng.random_range(-1.0..1.0));
        let k = Tensor::from_fn(&[f, c, ks, ks], |_| rng.random_range(-1.0..1.0));
        let bias: Vec<f64> = (0..f).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut g = Graph::<f64>::new();
        let (xi, ki) = (g.constant(x.clone()), g.constant(k.clone()));
        let bi = g.constant(Tensor::new(&[f], bias.clone()).unwrap());
        let y = g.conv2d(xi, ki, bi, pad).map_err(|e| e.to_string())?;
        let want = naive_conv(&x, &k, &bias, pad);
        if g.value(y).shape() != want.shape()
            || g.value(y).data().iter().zip(want.data()).any(|(a, e)| (a - e).abs() > 1e-12)
        {
            return Err(format!("conv2d case {n} differs from direct summation"));
        }
    }
    Ok(())
}
