//! Exact distance transforms on binary grids.
//!
//! Euclidean distances use the separable lower-envelope algorithm of
//! Felzenszwalb and Huttenlocher on squared integer distances, so results
//! are exact. Chebyshev distances use a two-pass 3x3 chamfer sweep with unit
//! weights, which is exact for the chessboard metric.

use serde::{Deserialize, Serialize};

use crate::mask::Mask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Chebyshev,
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "chebyshev" => Ok(Metric::Chebyshev),
            other => Err(format!("unknown metric `{other}` (expected euclidean or chebyshev)")),
        }
    }
}

/// Marker for "no site reachable".
pub const UNREACHABLE: u64 = u64::MAX;

/// Squared Euclidean distance from each cell to the nearest `site` cell.
pub fn squared_edt(width: usize, height: usize, sites: &[bool]) -> Vec<u64> {
    assert_eq!(sites.len(), width * height);
    let mut cols = vec![UNREACHABLE; width * height];
    let mut f = vec![UNREACHABLE; height.max(width)];
    let mut out = vec![0u64; height.max(width)];
    for j in 0..width {
        for i in 0..height {
            f[i] = if sites[i * width + j] { 0 } else { UNREACHABLE };
        }
        lower_envelope(&f[..height], &mut out[..height]);
        for i in 0..height {
            cols[i * width + j] = out[i];
        }
    }
    let mut result = vec![UNREACHABLE; width * height];
    for i in 0..height {
        lower_envelope(&cols[i * width..(i + 1) * width], &mut result[i * width..(i + 1) * width]);
    }
    result
}

/// One-dimensional squared distance transform of the sampled function `f`:
/// `out[q] = min_p f[p] + (q - p)^2`, skipping unreachable samples.
fn lower_envelope(f: &[u64], out: &mut [u64]) {
    let n = f.len();
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    let val = |p: usize| f[p] as f64 + (p * p) as f64;
    for q in (0..n).filter(|&q| f[q] != UNREACHABLE) {
        loop {
            let Some(&last) = v.last() else {
                v.push(q);
                z.clear();
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = (val(q) - val(last)) / (2.0 * (q as f64 - last as f64));
            if s <= *z.last().expect("z tracks v") {
                v.pop();
                z.pop();
                if v.is_empty() {
                    continue;
                }
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = UNREACHABLE);
        return;
    }
    z.push(f64::INFINITY);
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q.abs_diff(p) as u64;
        *o = f[p] + d * d;
    }
}

/// Chebyshev distance from each cell to the nearest `site` cell.
pub fn chebyshev_dt(width: usize, height: usize, sites: &[bool]) -> Vec<u64> {
    assert_eq!(sites.len(), width * height);
    let mut d: Vec<u64> = sites.iter().map(|&s| if s { 0 } else { UNREACHABLE }).collect();
    let relax = |d: &mut [u64], idx: usize, from: usize| {
        let cand = d[from].saturating_add(1);
        if cand < d[idx] {
            d[idx] = cand;
        }
    };
    for i in 0..height {
        for j in 0..width {
            let idx = i * width + j;
            if j > 0 {
                relax(&mut d, idx, idx - 1);
            }
            if i > 0 {
                let up = idx - width;
                relax(&mut d, idx, up);
                if j > 0 {
                    relax(&mut d, idx, up - 1);
                }
                if j + 1 < width {
                    relax(&mut d, idx, up + 1);
                }
            }
        }
    }
    for i in (0..height).rev() {
        for j in (0..width).rev() {
            let idx = i * width + j;
            if j + 1 < width {
                relax(&mut d, idx, idx + 1);
            }
            if i + 1 < height {
                let down = idx + width;
                relax(&mut d, idx, down);
                if j > 0 {
                    relax(&mut d, idx, down - 1);
                }
                if j + 1 < width {
                    relax(&mut d, idx, down + 1);
                }
            }
        }
    }
    d
}

/// Distance from every pixel to the nearest background pixel, where the
/// ring of pixels just outside the image counts as background. Background
/// pixels get 0.
pub fn distance_to_background(mask: &Mask, metric: Metric) -> Vec<f64> {
    let (w, h) = (mask.width(), mask.height());
    let (pw, ph) = (w + 2, h + 2);
    let mut sites = vec![true; pw * ph];
    for i in 0..h {
        for j in 0..w {
            sites[(i + 1) * pw + j + 1] = !mask.get(i, j);
        }
    }
    let padded = match metric {
        Metric::Euclidean => squared_edt(pw, ph, &sites),
        Metric::Chebyshev => chebyshev_dt(pw, ph, &sites),
    };
    let mut out = Vec::with_capacity(w * h);
    for i in 0..h {
        for j in 0..w {
            let raw = padded[(i + 1) * pw + j + 1];
            out.push(match metric {
                Metric::Euclidean => (raw as f64).sqrt(),
                Metric::Chebyshev => raw as f64,
            });
        }
    }
    out
}
