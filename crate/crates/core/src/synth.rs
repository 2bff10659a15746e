//! Deterministic synthetic single-object images.
//!
//! Every sample draws from its own `Xoshiro256PlusPlus` stream seeded with
//! `seed + index * 0x9E3779B97F4A7C15` (wrapping), expanded by SplitMix64.
//! Mask rasterization uses only IEEE-754 additions, multiplications,
//! divisions and comparisons, so masks are identical on every platform.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;
use crate::tns;

const STREAM_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Ellipse,
    Rectangle,
    Blob,
}

impl std::str::FromStr for ShapeFamily {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ellipse" => Ok(Self::Ellipse),
            "rectangle" => Ok(Self::Rectangle),
            "blob" => Ok(Self::Blob),
            other => Err(format!("unknown shape family `{other}` (expected ellipse, rectangle or blob)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    pub family: ShapeFamily,
    /// Inclusive range of object radii (semi-axes), pixels.
    pub radius: (f64, f64),
    pub noise_sigma: f64,
    pub foreground: f64,
    pub background: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            count: 250,
            size: 64,
            family: ShapeFamily::Ellipse,
            radius: (5.0, 14.0),
            noise_sigma: 0.1,
            foreground: 0.7,
            background: 0.3,
        }
    }
}

impl SynthSpec {
    /// Border that objects never enter.
    pub fn margin(&self) -> f64 {
        (self.size / 8) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.count == 0 {
            return bad("count must be at least 1".into());
        }
        if self.size < 8 {
            return bad(format!("size {} is too small", self.size));
        }
        let (lo, hi) = self.radius;
        if !(lo >= 1.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("radius range {lo}..{hi} must satisfy 1 <= min <= max"));
        }
        if hi >= self.size as f64 / 2.0 - self.margin() {
            return bad(format!(
                "radius {hi} cannot fit inside a {}-pixel margin of a {}-pixel image",
                self.margin(),
                self.size
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        for v in [self.foreground, self.background] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("intensity {v} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, size, size]` intensities in [0, 1].
    pub image: Tensor<f32>,
    pub mask: Mask,
    /// Foreground centroid `(x, y)` in pixels.
    pub center: (f64, f64),
}

/// Geometry drawn for one sample before rasterization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeParams {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    /// Satellite discs of a blob: `(dx, dy, radius)` relative to the centre.
    pub lobes: [(f64, f64, f64); 2],
}

fn sample_rng(seed: u64, index: usize) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed.wrapping_add((index as u64).wrapping_mul(STREAM_STRIDE)))
}

fn draw_params(spec: &SynthSpec, rng: &mut Xoshiro256PlusPlus) -> ShapeParams {
    let (lo, hi) = spec.radius;
    let mut radius = || if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let (a, b) = (radius(), radius());
    let (a, b) = match spec.family {
        ShapeFamily::Blob => (a, a),
        _ => (a, b),
    };
    let m = spec.margin();
    let size = spec.size as f64;
    // pixel centres sit at integer coordinates 0..size-1
    let mut centre = |r: f64| {
        let (min, max) = (m + r, size - 1.0 - m - r);
        if max > min {
            rng.random_range(min..=max)
        } else {
            (min + max) / 2.0
        }
    };
    let cx = centre(a);
    let cy = centre(b);
    let mut lobes = [(0.0, 0.0, 0.0); 2];
    if spec.family == ShapeFamily::Blob {
        for lobe in &mut lobes {
            let dx: f64 = rng.random_range(-1.0..=1.0);
            let dy: f64 = rng.random_range(-1.0..=1.0);
            let norm = dx.abs().max(dy.abs()).max(1e-9);
            // offset <= 0.55 a and lobe radius 0.45 a keep the union within a
            let reach = rng.random_range(0.2..=0.55) * a / norm;
            *lobe = (dx * reach * (1.0 / std::f64::consts::SQRT_2), dy * reach * (1.0 / std::f64::consts::SQRT_2), 0.45 * a);
        }
    }
    ShapeParams { cx, cy, a, b, lobes }
}

pub fn rasterize(family: ShapeFamily, size: usize, p: &ShapeParams) -> Mask {
    Mask::from_fn(size, size, |i, j| {
        let (x, y) = (j as f64 - p.cx, i as f64 - p.cy);
        match family {
            ShapeFamily::Ellipse => (x / p.a) * (x / p.a) + (y / p.b) * (y / p.b) <= 1.0,
            ShapeFamily::Rectangle => x.abs() <= p.a && y.abs() <= p.b,
            ShapeFamily::Blob => {
                let core = 0.7 * p.a;
                x * x + y * y <= core * core
                    || p.lobes.iter().any(|&(dx, dy, r)| {
                        let (u, v) = (x - dx, y - dy);
                        u * u + v * v <= r * r
                    })
            }
        }
    })
}

/// Draws the geometry of sample `index` without rendering it.
pub fn shape_params(spec: &SynthSpec, index: usize) -> ShapeParams {
    draw_params(spec, &mut sample_rng(spec.seed, index))
}

fn render(spec: &SynthSpec, index: usize) -> Result<Sample> {
    let mut rng = sample_rng(spec.seed, index);
    let params = draw_params(spec, &mut rng);
    let mask = rasterize(spec.family, spec.size, &params);
    let center = mask
        .centroid()
        .ok_or_else(|| Error::InvalidArgument(format!("sample {index} rasterized to an empty mask")))?;
    let noise = (spec.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, spec.noise_sigma).expect("validated sigma"));
    let pixels = mask
        .values()
        .iter()
        .map(|&m| {
            let base = if m != 0 { spec.foreground } else { spec.background };
            let v = match &noise {
                Some(n) => (base + n.sample(&mut rng)).clamp(0.0, 1.0),
                None => base,
            };
            v as f32
        })
        .collect();
    let image = Tensor::new(&[1, spec.size, spec.size], pixels)?;
    Ok(Sample { image, mask, center })
}

pub fn generate(spec: &SynthSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..spec.count).map(|i| render(spec, i)).collect()
}

/// Seeded shuffle, then a prefix of `round(fraction * n)` samples for
/// training and the rest for testing.
pub fn split<S: Clone>(samples: &[S], train_fraction: f64, seed: u64) -> Result<(Vec<S>, Vec<S>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("train fraction {train_fraction} must lie in (0, 1)")));
    }
    let n_train = (train_fraction * samples.len() as f64).round() as usize;
    if n_train == 0 || n_train == samples.len() {
        return Err(Error::InvalidArgument(format!(
            "fraction {train_fraction} of {} samples leaves one side empty",
            samples.len()
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut Xoshiro256PlusPlus::seed_from_u64(seed));
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

pub fn image_file(index: usize) -> String {
    format!("{index:04}_img.tns")
}

pub fn mask_file(index: usize) -> String {
    format!("{index:04}_mask.pgm")
}

/// Writes `NNNN_img.tns`, `NNNN_mask.pgm`, `centers.csv` and `spec.json`.
pub fn save_dataset(dir: &Path, spec: &SynthSpec, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut centers = BufWriter::new(fs::File::create(dir.join("centers.csv"))?);
    writeln!(centers, "index,cx,cy")?;
    for (i, s) in samples.iter().enumerate() {
        tns::save(&s.image, dir.join(image_file(i)))?;
        let mut f = BufWriter::new(fs::File::create(dir.join(mask_file(i)))?);
        s.mask.write_pgm(&mut f)?;
        f.flush()?;
        writeln!(centers, "{i},{},{}", s.center.0, s.center.1)?;
    }
    centers.flush()?;
    fs::write(dir.join("spec.json"), serde_json::to_string_pretty(spec)? + "\n")?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(SynthSpec, Vec<Sample>)> {
    let spec: SynthSpec = serde_json::from_str(&fs::read_to_string(dir.join("spec.json"))?)?;
    let reader = BufReader::new(fs::File::open(dir.join("centers.csv"))?);
    let mut samples = Vec::new();
    for (n, line) in reader.lines().enumerate().skip(1) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("centers.csv line {}: {e}", n + 1)))
        };
        if fields.len() != 3 {
            return Err(Error::Format(format!("centers.csv line {}: expected 3 fields", n + 1)));
        }
        let index: usize = fields[0]
            .trim()
            .parse()
            .map_err(|e| Error::Format(format!("centers.csv line {}: {e}", n + 1)))?;
        let image = tns::load(dir.join(image_file(index)))?;
        let mask = Mask::read_pgm(BufReader::new(fs::File::open(dir.join(mask_file(index)))?))?;
        samples.push(Sample {
            image,
            mask,
            center: (parse(fields[1])?, parse(fields[2])?),
        });
    }
    Ok((spec, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(family: ShapeFamily) -> SynthSpec {
        SynthSpec {
            count: 20,
            family,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic() {
        let spec = small(ShapeFamily::Blob);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = SynthSpec { seed: 8, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn noiseless_binary_image_equals_mask() {
        let spec = SynthSpec {
            noise_sigma: 0.0,
            foreground: 1.0,
            background: 0.0,
            ..small(ShapeFamily::Rectangle)
        };
        for s in generate(&spec).unwrap() {
            let m: Vec<f32> = s.mask.values().iter().map(|&v| v as f32).collect();
            assert_eq!(s.image.data(), m.as_slice());
        }
    }

    #[test]
    fn ellipse_centroid_near_sampled_centre() {
        let spec = small(ShapeFamily::Ellipse);
        for (i, s) in generate(&spec).unwrap().iter().enumerate() {
            let p = shape_params(&spec, i);
            assert!((s.center.0 - p.cx).abs() <= 0.5, "{i}: {} vs {}", s.center.0, p.cx);
            assert!((s.center.1 - p.cy).abs() <= 0.5, "{i}: {} vs {}", s.center.1, p.cy);
        }
    }

    #[test]
    fn masks_nonempty_and_inside_margin() {
        for family in [ShapeFamily::Ellipse, ShapeFamily::Rectangle, ShapeFamily::Blob] {
            let spec = small(family);
            let m = spec.margin() as usize;
            for s in generate(&spec).unwrap() {
                let (r0, c0, r1, c1) = s.mask.bounding_box().expect("nonempty");
                assert!(r0 >= m && c0 >= m && r1 < spec.size - m && c1 < spec.size - m, "{family:?}");
                let (x, y) = s.center;
                assert!(x >= c0 as f64 && x <= c1 as f64 && y >= r0 as f64 && y <= r1 as f64);
                assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn infeasible_radius_rejected() {
        let spec = SynthSpec {
            radius: (5.0, 30.0),
            ..SynthSpec::default()
        };
        assert!(generate(&spec).is_err());
        assert!(generate(&SynthSpec { count: 0, ..SynthSpec::default() }).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let items: Vec<usize> = (0..200).collect();
        let (a, b) = split(&items, 0.8, 3).unwrap();
        assert_eq!((a.len(), b.len()), (160, 40));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, items);
        assert_eq!(split(&items, 0.8, 3).unwrap(), (a, b));
        assert!(split(&items, 1.0, 3).is_err());
        assert!(split(&items[..2], 0.1, 3).is_err());
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { count: 3, ..SynthSpec::default() };
        let samples = generate(&spec).unwrap();
        save_dataset(dir.path(), &spec, &samples).unwrap();
        let (spec2, loaded) = load_dataset(dir.path()).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(loaded, samples);
    }
}
