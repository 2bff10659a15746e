//! Finite-difference verification of every differentiable operation.
//!
//! Each case builds a small double-precision graph from random inputs. A
//! non-scalar output is projected to a scalar with fixed random weights, so
//! the whole Jacobian is exercised. Analytic gradients from
//! [`Graph::backward`] are compared against central differences
//! `(f(x + h) - f(x - h)) / 2h` on sampled coordinates of every input.
//!
//! ReLU and max-pooling make the composite networks piecewise smooth. When
//! `x + h` or `x - h` lands on a different piece than `x` (detected through
//! [`Graph::branch_signature`]), the one-sided difference on the side that
//! stays on the piece of `x` is used instead; if both sides leave it, the
//! coordinate is counted as skipped.
//!
//! A coordinate passes when the absolute error is at most `abs_floor` or
//! the relative error `|a - n| / max(|a|, |n|)` is below `rel_tol`.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::losses::DICE_EPS;
use crate::model::{Encoder, LocHead, ModelConfig, SegDecoder};
use crate::optim::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckConfig {
    pub seeds: usize,
    pub first_seed: u64,
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// Coordinates checked per input tensor; smaller tensors are checked
    /// exhaustively.
    pub probes: usize,
    /// Corrupts one analytic gradient entry per case, for testing the
    /// harness itself.
    pub inject_fault: bool,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            seeds: 10,
            first_seed: 0,
            step: 1e-6,
            rel_tol: 1e-4,
            abs_floor: 1e-6,
            probes: 6,
            inject_fault: false,
        }
    }
}

type Inputs = Box<dyn Fn(&mut Xoshiro256PlusPlus) -> Vec<Tensor<f64>>>;
type Forward = Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>>;

/// One differentiable computation under test.
pub struct Case {
    pub name: String,
    inputs: Inputs,
    forward: Forward,
}

impl Case {
    pub fn new(
        name: impl Into<String>,
        inputs: impl Fn(&mut Xoshiro256PlusPlus) -> Vec<Tensor<f64>> + 'static,
        forward: impl Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId> + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            inputs: Box::new(inputs),
            forward: Box::new(forward),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub name: String,
    pub seeds: usize,
    pub coordinates: usize,
    pub failures: usize,
    /// Coordinates where both perturbations crossed a non-smooth point.
    pub skipped: usize,
    /// Coordinates checked with a one-sided difference.
    pub one_sided: usize,
    /// Largest relative error among coordinates whose gradient magnitude
    /// exceeds the absolute floor. Such a coordinate may still pass on the
    /// floor when its absolute error is tiny.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub error: Option<String>,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.error.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub config: CheckConfig,
    pub cases: Vec<CaseReport>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseReport::passed)
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<28} {:>6} {:>8} {:>9} {:>12} {:>12}  result\n",
            "case", "seeds", "coords", "one-sided", "max rel err", "max abs err"
        );
        for c in &self.cases {
            let result = match (&c.error, c.failures) {
                (Some(e), _) => format!("ERROR {e}"),
                (None, 0) => "ok".into(),
                (None, n) => format!("FAIL ({n} coordinates)"),
            };
            let _ = writeln!(
                out,
                "{:<28} {:>6} {:>8} {:>9} {:>12.3e} {:>12.3e}  {result}",
                c.name, c.seeds, c.coordinates, c.one_sided, c.max_rel_error, c.max_abs_error
            );
        }
        out
    }
}

fn uniform(rng: &mut Xoshiro256PlusPlus, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, so ReLU kinks are never straddled.
fn away_from_zero(rng: &mut Xoshiro256PlusPlus, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

fn bound_from(nodes: &[NodeId]) -> Bound {
    Bound(nodes.to_vec())
}

fn store_tensors(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    store.iter().map(|(_, t)| t.clone()).collect()
}

/// Network configuration for the composite cases: the default
/// with four supervision channels.
fn composite_config() -> ModelConfig {
    ModelConfig::default()
}

/// Every differentiable graph operation, plus the encoder, decoder,
/// localization head and both losses composed end to end on 16x16 inputs.
pub fn default_cases() -> Vec<Case> {
    let mut cases = vec![
        Case::new(
            "conv2d_3x3_pad1",
            |r| {
                vec![
                    uniform(r, &[2, 3, 5, 6], -1.0, 1.0),
                    uniform(r, &[4, 3, 3, 3], -1.0, 1.0),
                    uniform(r, &[4], -1.0, 1.0),
                ]
            },
            |g, x| g.conv2d(x[0], x[1], x[2], 1),
        ),
        Case::new(
            "conv2d_3x3_valid",
            |r| {
                vec![
                    uniform(r, &[1, 2, 5, 5], -1.0, 1.0),
                    uniform(r, &[3, 2, 3, 3], -1.0, 1.0),
                    uniform(r, &[3], -1.0, 1.0),
                ]
            },
            |g, x| g.conv2d(x[0], x[1], x[2], 0),
        ),
        Case::new(
            "conv2d_1x1",
            |r| {
                vec![
                    uniform(r, &[2, 3, 4, 4], -1.0, 1.0),
                    uniform(r, &[5, 3, 1, 1], -1.0, 1.0),
                    uniform(r, &[5], -1.0, 1.0),
                ]
            },
            |g, x| g.conv2d(x[0], x[1], x[2], 0),
        ),
        Case::new(
            "maxpool2",
            // distinct values: ties would make the max non-differentiable
            |r| vec![uniform(r, &[2, 3, 6, 8], -1.0, 1.0)],
            |g, x| g.maxpool2(x[0]),
        ),
        Case::new(
            "upsample2_nearest",
            |r| vec![uniform(r, &[2, 2, 3, 4], -1.0, 1.0)],
            |g, x| g.upsample2_nearest(x[0]),
        ),
        Case::new(
            "sigmoid",
            |r| vec![uniform(r, &[2, 3, 4, 4], -4.0, 4.0)],
            |g, x| Ok(g.sigmoid(x[0])),
        ),
        Case::new("relu", |r| vec![away_from_zero(r, &[2, 3, 4, 4])], |g, x| Ok(g.relu(x[0]))),
        Case::new(
            "concat_channels",
            |r| vec![uniform(r, &[2, 2, 3, 3], -1.0, 1.0), uniform(r, &[2, 3, 3, 3], -1.0, 1.0)],
            |g, x| g.concat_channels(x[0], x[1]),
        ),
        Case::new(
            "add",
            |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[2, 3, 4], -1.0, 1.0)],
            |g, x| g.add(x[0], x[1]),
        ),
        Case::new(
            "mul",
            |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[2, 3, 4], -1.0, 1.0)],
            |g, x| g.mul(x[0], x[1]),
        ),
        Case::new("sum", |r| vec![uniform(r, &[3, 5], -1.0, 1.0)], |g, x| Ok(g.sum(x[0]))),
        Case::new("mean", |r| vec![uniform(r, &[3, 5], -1.0, 1.0)], |g, x| Ok(g.mean(x[0]))),
        Case::new(
            "dice_loss",
            |r| vec![uniform(r, &[2, 3, 4, 4], 0.05, 0.95), uniform(r, &[2, 3, 4, 4], 0.0, 1.0)],
            |g, x| g.dice_loss(x[0], x[1], DICE_EPS),
        ),
        Case::new(
            "mse",
            |r| vec![uniform(r, &[4, 2], 0.0, 1.0), uniform(r, &[4, 2], 0.0, 1.0)],
            |g, x| g.mse(x[0], x[1]),
        ),
        Case::new(
            "spatial_soft_argmax",
            |r| vec![uniform(r, &[2, 1, 5, 7], -2.0, 2.0)],
            |g, x| g.spatial_soft_argmax(x[0]),
        ),
    ];

    let config = composite_config();
    let n = config.bottleneck_channels;

    // image, supervision target, then encoder parameters
    let enc_cfg = config.clone();
    cases.push(Case::new(
        "encoder+supervision_dice",
        move |r| {
            let enc = Encoder::<f64>::new(enc_cfg.clone(), r.random()).expect("valid config");
            let mut v = vec![uniform(r, &[2, 1, 16, 16], 0.0, 1.0), uniform(r, &[2, n, 4, 4], 0.0, 1.0)];
            v.extend(store_tensors(&enc.params));
            v
        },
        {
            let enc = Encoder::<f64>::new(config.clone(), 0).expect("valid config");
            move |g, x| {
                let out = enc.forward(g, &bound_from(&x[2..]), x[0])?;
                g.dice_loss(out.supervision, x[1], DICE_EPS)
            }
        },
    ));

    // image, mask target, encoder parameters, decoder parameters
    let enc_len = Encoder::<f64>::new(config.clone(), 0).expect("valid config").params.len();
    let full_cfg = config.clone();
    cases.push(Case::new(
        "encoder+decoder+dice",
        move |r| {
            let enc = Encoder::<f64>::new(full_cfg.clone(), r.random()).expect("valid config");
            let dec = SegDecoder::<f64>::new(full_cfg.clone(), r.random()).expect("valid config");
            let mut v = vec![uniform(r, &[2, 1, 16, 16], 0.0, 1.0), uniform(r, &[2, n, 16, 16], 0.0, 1.0)];
            v.extend(store_tensors(&enc.params));
            v.extend(store_tensors(&dec.params));
            v
        },
        {
            let enc = Encoder::<f64>::new(config.clone(), 0).expect("valid config");
            let dec = SegDecoder::<f64>::new(config.clone(), 0).expect("valid config");
            move |g, x| {
                let out = enc.forward(g, &bound_from(&x[2..2 + enc_len]), x[0])?;
                let pred = dec.forward(g, &bound_from(&x[2 + enc_len..]), out.f1, out.f2, out.f4)?;
                g.dice_loss(pred, x[1], DICE_EPS)
            }
        },
    ));

    let loc_cfg = config.clone();
    cases.push(Case::new(
        "encoder+loc_head+mse",
        move |r| {
            let enc = Encoder::<f64>::new(loc_cfg.clone(), r.random()).expect("valid config");
            let head = LocHead::<f64>::new(loc_cfg.clone(), r.random()).expect("valid config");
            let mut v = vec![uniform(r, &[2, 1, 16, 16], 0.0, 1.0), uniform(r, &[2, 2], 0.0, 1.0)];
            v.extend(store_tensors(&enc.params));
            v.extend(store_tensors(&head.params));
            v
        },
        {
            let enc = Encoder::<f64>::new(config.clone(), 0).expect("valid config");
            let head = LocHead::<f64>::new(config, 0).expect("valid config");
            move |g, x| {
                let out = enc.forward(g, &bound_from(&x[2..2 + enc_len]), x[0])?;
                let pred = head.forward(g, &bound_from(&x[2 + enc_len..]), out.f4)?;
                g.mse(pred, x[1])
            }
        },
    ));
    cases
}

/// Scalar objective: the output itself, or its inner product with fixed
/// random weights.
struct Evaluation {
    value: f64,
    signature: u64,
    grads: Vec<Vec<f64>>,
}

fn objective(case: &Case, values: &[Tensor<f64>], weights_seed: u64, with_grad: bool) -> Result<Evaluation> {
    let mut g = Graph::new();
    let nodes: Vec<NodeId> = values.iter().map(|v| g.param(v)).collect();
    let out = (case.forward)(&mut g, &nodes)?;
    let loss = if g.value(out).numel() == 1 {
        out
    } else {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(weights_seed);
        let shape = g.value(out).shape().to_vec();
        let w = g.constant(uniform(&mut rng, &shape, -1.0, 1.0));
        let prod = g.mul(out, w)?;
        g.sum(prod)
    };
    let value = g.value(loss).data()[0];
    let signature = g.branch_signature();
    if !with_grad {
        return Ok(Evaluation {
            value,
            signature,
            grads: Vec::new(),
        });
    }
    g.backward(loss)?;
    let grads = nodes
        .iter()
        .map(|&n| g.grad(n).map_or_else(|| vec![0.0; g.value(n).numel()], <[f64]>::to_vec))
        .collect();
    Ok(Evaluation { value, signature, grads })
}

fn check_seed(case: &Case, config: &CheckConfig, seed: u64, report: &mut CaseReport) -> Result<()> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut values = (case.inputs)(&mut rng);
    let weights_seed = rng.random();
    let centre = objective(case, &values, weights_seed, true)?;
    let mut grads = centre.grads;
    if config.inject_fault {
        let g0 = &mut grads[0][0];
        *g0 += 1e-2 * g0.abs().max(1.0);
    }
    let h = config.step;
    for i in 0..values.len() {
        let numel = values[i].numel();
        let coords: Vec<usize> = if numel <= config.probes {
            (0..numel).collect()
        } else {
            let mut c = sample(&mut rng, numel, config.probes).into_vec();
            if config.inject_fault && i == 0 && !c.contains(&0) {
                c[0] = 0;
            }
            c
        };
        for k in coords {
            let original = values[i].data()[k];
            values[i].data_mut()[k] = original + h;
            let plus = objective(case, &values, weights_seed, false)?;
            values[i].data_mut()[k] = original - h;
            let minus = objective(case, &values, weights_seed, false)?;
            values[i].data_mut()[k] = original;
            let numeric = match (plus.signature == centre.signature, minus.signature == centre.signature) {
                (true, true) => (plus.value - minus.value) / (2.0 * h),
                (true, false) => {
                    report.one_sided += 1;
                    (plus.value - centre.value) / h
                }
                (false, true) => {
                    report.one_sided += 1;
                    (centre.value - minus.value) / h
                }
                (false, false) => {
                    report.skipped += 1;
                    continue;
                }
            };
            let analytic = grads[i][k];
            let abs = (analytic - numeric).abs();
            let scale = analytic.abs().max(numeric.abs());
            let rel = if scale > 0.0 { abs / scale } else { 0.0 };
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if scale > config.abs_floor {
                report.max_rel_error = report.max_rel_error.max(rel);
            }
            if !(abs <= config.abs_floor || rel < config.rel_tol) {
                report.failures += 1;
            }
        }
    }
    Ok(())
}

pub fn check_case(case: &Case, config: &CheckConfig) -> CaseReport {
    let mut report = CaseReport {
        name: case.name.clone(),
        seeds: config.seeds,
        coordinates: 0,
        failures: 0,
        skipped: 0,
        one_sided: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        error: None,
    };
    for s in 0..config.seeds as u64 {
        if let Err(e) = check_seed(case, config, config.first_seed + s, &mut report) {
            report.error = Some(e.to_string());
            break;
        }
    }
    report
}

/// Runs the cases whose names contain `filter` (all when `None`).
pub fn run(config: &CheckConfig, filter: Option<&str>) -> GradReport {
    let cases = default_cases()
        .iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .map(|c| check_case(c, config))
        .collect();
    GradReport {
        config: config.clone(),
        cases,
    }
}
