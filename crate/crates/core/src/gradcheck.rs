//! Central finite-difference checks against recorded gradients.
//!
//! The function under test is a closure that records a scalar on a fresh
//! [`Graph`] from a list of input tensors. Analytic gradients come from one
//! backward pass; numeric ones from `(f(x+eps) - f(x-eps)) / 2eps`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub const REL_FLOOR: f64 = 1e-8;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Which derivatives to compare.
#[derive(Debug, Clone)]
pub enum Probe {
    /// Every coordinate of every input.
    All,
    /// Explicit `(input, flat index)` coordinates.
    Coordinates(Vec<(usize, usize)>),
    /// Per input: the coordinate with the largest analytic gradient, `random`
    /// further coordinates, and one directional derivative along a random
    /// unit-length ±1 direction spanning the whole tensor.
    Sampled { random: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub input: usize,
    /// `None` for a directional derivative.
    pub index: Option<usize>,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub comparisons: Vec<Comparison>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.comparisons.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Comparison> {
        self.comparisons
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    let v = g.value(out);
    if !v.is_scalar() {
        return Err(Error::contract("grad_check", "function must return a scalar"));
    }
    Ok((v.item(), g.kink_fingerprint()))
}

/// Smallest step tried when a difference straddles a kink, relative to `eps`.
const MIN_STEP_FRACTION: f64 = 1.0 / 1024.0;

/// Compares analytic and central-difference gradients of `f` at `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, probe: &Probe) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::contract("grad_check", format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    let base = g.kink_fingerprint();
    let mut grads = g.backward(out)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .map(|&id| grads.take(id).expect("variables always receive a gradient"))
        .collect();

    // The step shrinks until both evaluations sit on the same smooth piece
    // as the base point.
    let central = |input: usize, direction: &dyn Fn(&mut Tensor, f64)| -> Result<f64> {
        let mut h = eps;
        loop {
            let mut plus = inputs.to_vec();
            direction(&mut plus[input], h);
            let mut minus = inputs.to_vec();
            direction(&mut minus[input], -h);
            let (fp, kp) = evaluate(&f, &plus)?;
            let (fm, km) = evaluate(&f, &minus)?;
            if (kp == base && km == base) || h <= eps * MIN_STEP_FRACTION {
                return Ok((fp - fm) / (2.0 * h));
            }
            h /= 4.0;
        }
    };

    let mut comparisons = Vec::new();
    let mut coordinate = |input: usize, index: usize| -> Result<()> {
        let numeric = central(input, &|t: &mut Tensor, h| t.data_mut()[index] += h)?;
        let a = analytic[input].data()[index];
        comparisons.push(Comparison {
            input,
            index: Some(index),
            analytic: a,
            numeric,
            rel_err: relative_error(a, numeric),
        });
        Ok(())
    };

    match probe {
        Probe::All => {
            for (input, t) in inputs.iter().enumerate() {
                for index in 0..t.len() {
                    coordinate(input, index)?;
                }
            }
        }
        Probe::Coordinates(list) => {
            for &(input, index) in list {
                if input >= inputs.len() || index >= inputs[input].len() {
                    return Err(Error::contract("grad_check", format!("coordinate ({input}, {index}) out of range")));
                }
                coordinate(input, index)?;
            }
        }
        Probe::Sampled { random, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut directions = Vec::new();
            for (input, t) in inputs.iter().enumerate() {
                let grad = analytic[input].data();
                let largest = (0..t.len())
                    .max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs()))
                    .unwrap_or(0);
                coordinate(input, largest)?;
                for _ in 0..(*random).min(t.len().saturating_sub(1)) {
                    coordinate(input, rng.random_range(0..t.len()))?;
                }
                let unit = 1.0 / (t.len() as f64).sqrt();
                let dir: Vec<f64> = (0..t.len())
                    .map(|_| if rng.random::<bool>() { unit } else { -unit })
                    .collect();
                directions.push(dir);
            }
            for (input, dir) in directions.iter().enumerate() {
                let numeric = central(input, &|t: &mut Tensor, h| {
                    for (v, d) in t.data_mut().iter_mut().zip(dir) {
                        *v += h * d;
                    }
                })?;
                let a: f64 = analytic[input].data().iter().zip(dir).map(|(g, d)| g * d).sum();
                comparisons.push(Comparison {
                    input,
                    index: None,
                    analytic: a,
                    numeric,
                    rel_err: relative_error(a, numeric),
                });
            }
        }
    }
    Ok(GradCheckReport { comparisons })
}

/// Result of one named check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub comparisons: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    fn from_report(name: &str, report: &GradCheckReport, tolerance: f64) -> Self {
        CheckOutcome {
            name: name.to_string(),
            max_rel_err: report.max_rel_err(),
            tolerance,
            comparisons: report.comparisons.len(),
        }
    }
}

pub const OP_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-4;
pub const OP_EPS: f64 = 1e-5;
pub const MODEL_EPS: f64 = 1e-5;

/// Uniform values in `[-1, 1]` kept at least `gap` away from zero.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(gap..1.0);
            if rng.random::<bool>() { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// A shuffled grid of values spaced by `step`, so no two entries are close.
fn spread(shape: &[usize], step: f64, rng: &mut ChaCha8Rng) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * step).collect();
    data.shuffle(rng);
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), lo, hi, rng)
}

/// `sum(y * r)` for a fixed random `r`, so every output entry matters.
fn project(g: &mut Graph, y: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(uniform(&shape, -1.0, 1.0, &mut rng));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

type OpFn = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

/// Finite-difference checks of every recorded op and loss on small random
/// inputs, each with all coordinates probed.
pub fn op_suite() -> Result<Vec<CheckOutcome>> {
    use crate::graph::NormMode;
    use crate::loss::{record_ce, record_dice, record_sec};

    let mut rng = ChaCha8Rng::seed_from_u64(0x0A11);
    let r = &mut rng;
    let labels: Vec<usize> = (0..2 * 9).map(|i| (i * 7 + 3) % 4).collect();
    let weights: Vec<f64> = (0..2 * 9).map(|i| 0.5 + (i % 5) as f64 * 0.25).collect();
    let presence = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0];
    let run_mean = vec![0.1, -0.2, 0.3];
    let run_var = vec![0.5, 1.5, 2.0];

    let mut cases: Vec<(&str, Vec<Tensor>, OpFn)> = vec![
        (
            "conv2d_5x5",
            vec![uniform(&[2, 3, 6, 6], -1.0, 1.0, r), uniform(&[4, 3, 5, 5], -0.5, 0.5, r), uniform(&[4], -0.5, 0.5, r)],
            Box::new(|g, x| {
                let y = g.conv2d(x[0], x[1], Some(x[2]), 2)?;
                project(g, y, 1)
            }),
        ),
        (
            "conv2d_1x1",
            vec![uniform(&[2, 5, 4, 4], -1.0, 1.0, r), uniform(&[3, 5, 1, 1], -0.5, 0.5, r), uniform(&[3], -0.5, 0.5, r)],
            Box::new(|g, x| {
                let y = g.conv2d(x[0], x[1], Some(x[2]), 0)?;
                project(g, y, 2)
            }),
        ),
        (
            "conv2d_3x3_unbatched",
            vec![uniform(&[3, 5, 5], -1.0, 1.0, r), uniform(&[2, 3, 3, 3], -0.5, 0.5, r)],
            Box::new(|g, x| {
                let y = g.conv2d(x[0], x[1], None, 1)?;
                project(g, y, 3)
            }),
        ),
        (
            "maxpool2d",
            vec![spread(&[2, 3, 4, 4], 0.01, r)],
            Box::new(|g, x| {
                let y = g.maxpool2d(x[0])?;
                project(g, y, 4)
            }),
        ),
        (
            "upsample2d",
            vec![uniform(&[2, 3, 3, 3], -1.0, 1.0, r)],
            Box::new(|g, x| {
                let y = g.upsample2d(x[0])?;
                project(g, y, 5)
            }),
        ),
        (
            "dense",
            vec![uniform(&[2, 5], -1.0, 1.0, r), uniform(&[4, 5], -1.0, 1.0, r), uniform(&[4], -1.0, 1.0, r)],
            Box::new(|g, x| {
                let y = g.dense(x[0], x[1], Some(x[2]))?;
                project(g, y, 6)
            }),
        ),
        (
            "dense_unbatched",
            vec![uniform(&[5], -1.0, 1.0, r), uniform(&[3, 5], -1.0, 1.0, r)],
            Box::new(|g, x| {
                let y = g.dense(x[0], x[1], None)?;
                project(g, y, 7)
            }),
        ),
        (
            "relu",
            vec![away_from_zero(&[2, 3, 4], 0.01, r)],
            Box::new(|g, x| {
                let y = g.relu(x[0]);
                project(g, y, 8)
            }),
        ),
        (
            "sigmoid",
            vec![uniform(&[2, 3, 4], -4.0, 4.0, r)],
            Box::new(|g, x| {
                let y = g.sigmoid(x[0]);
                project(g, y, 9)
            }),
        ),
        (
            "softmax_channels",
            vec![uniform(&[2, 4, 3, 3], -2.0, 2.0, r)],
            Box::new(|g, x| {
                let y = g.softmax_channels(x[0])?;
                project(g, y, 10)
            }),
        ),
        (
            "add",
            vec![uniform(&[2, 3, 2, 2], -1.0, 1.0, r), uniform(&[2, 3, 2, 2], -1.0, 1.0, r)],
            Box::new(|g, x| {
                let y = g.add(x[0], x[1])?;
                project(g, y, 11)
            }),
        ),
        (
            "mul",
            vec![uniform(&[2, 3, 2, 2], -1.0, 1.0, r), uniform(&[2, 3, 2, 2], -1.0, 1.0, r)],
            Box::new(|g, x| {
                let y = g.mul(x[0], x[1])?;
                project(g, y, 12)
            }),
        ),
        (
            "max",
            {
                let a = uniform(&[2, 3, 2, 2], -1.0, 1.0, r);
                let d = away_from_zero(&[2, 3, 2, 2], 0.05, r);
                let b = Tensor::new(a.shape().to_vec(), a.data().iter().zip(d.data()).map(|(x, y)| x + y).collect())?;
                vec![a, b]
            },
            Box::new(|g, x| {
                let y = g.max(x[0], x[1])?;
                project(g, y, 13)
            }),
        ),
        (
            "square",
            vec![uniform(&[2, 3, 2], -1.0, 1.0, r)],
            Box::new(|g, x| {
                let y = g.square(x[0]);
                project(g, y, 14)
            }),
        ),
        (
            "scale_channels",
            vec![uniform(&[2, 3, 4, 4], -1.0, 1.0, r), uniform(&[2, 3], 0.0, 1.0, r)],
            Box::new(|g, x| {
                let y = g.scale_channels(x[0], x[1])?;
                project(g, y, 15)
            }),
        ),
        (
            "scale_spatial",
            vec![uniform(&[2, 3, 4, 4], -1.0, 1.0, r), uniform(&[2, 1, 4, 4], 0.0, 1.0, r)],
            Box::new(|g, x| {
                let y = g.scale_spatial(x[0], x[1])?;
                project(g, y, 16)
            }),
        ),
        (
            "select_channel",
            vec![uniform(&[2, 3, 4, 4], -1.0, 1.0, r)],
            Box::new(|g, x| {
                let y = g.select_channel(x[0], 1)?;
                project(g, y, 17)
            }),
        ),
        (
            "concat_channels",
            vec![uniform(&[2, 2, 3, 3], -1.0, 1.0, r), uniform(&[2, 3, 3, 3], -1.0, 1.0, r)],
            Box::new(|g, x| {
                let y = g.concat_channels(&[x[0], x[1]])?;
                project(g, y, 18)
            }),
        ),
        (
            "global_avg_pool",
            vec![uniform(&[2, 3, 4, 4], -1.0, 1.0, r)],
            Box::new(|g, x| {
                let y = g.global_avg_pool(x[0])?;
                project(g, y, 19)
            }),
        ),
        (
            "batch_norm_batch_stats",
            vec![uniform(&[2, 3, 4, 4], -1.0, 1.0, r), uniform(&[3], 0.5, 1.5, r), uniform(&[3], -0.5, 0.5, r)],
            Box::new(|g, x| {
                let (y, _) = g.batch_norm(x[0], x[1], x[2], NormMode::Batch)?;
                project(g, y, 20)
            }),
        ),
        (
            "batch_norm_running_stats",
            vec![uniform(&[2, 3, 4, 4], -1.0, 1.0, r), uniform(&[3], 0.5, 1.5, r), uniform(&[3], -0.5, 0.5, r)],
            Box::new(move |g, x| {
                let (y, _) = g.batch_norm(
                    x[0],
                    x[1],
                    x[2],
                    NormMode::Running {
                        mean: &run_mean,
                        var: &run_var,
                    },
                )?;
                project(g, y, 21)
            }),
        ),
        (
            "dropout",
            vec![uniform(&[2, 3, 4, 4], -1.0, 1.0, r)],
            Box::new(|g, x| {
                let y = g.dropout(x[0], 0.3, true, 99)?;
                project(g, y, 22)
            }),
        ),
        (
            "mean",
            vec![uniform(&[2, 3, 4], -1.0, 1.0, r)],
            Box::new(|g, x| {
                let s = g.square(x[0]);
                Ok(g.mean(s))
            }),
        ),
        (
            "combine",
            vec![uniform(&[3], -1.0, 1.0, r), uniform(&[4], -1.0, 1.0, r)],
            Box::new(|g, x| {
                let a = g.square(x[0]);
                let a = g.sum(a);
                let b = g.sum(x[1]);
                g.combine(&[(a, 0.7), (b, -1.3)])
            }),
        ),
        (
            "weighted_cross_entropy",
            vec![uniform(&[2, 4, 3, 3], -2.0, 2.0, r)],
            {
                let (labels, weights) = (labels.clone(), weights.clone());
                Box::new(move |g, x| {
                    let p = g.softmax_channels(x[0])?;
                    record_ce(g, p, &labels, Some(&weights))
                })
            },
        ),
        (
            "dice",
            vec![uniform(&[2, 4, 3, 3], -2.0, 2.0, r)],
            {
                let labels = labels.clone();
                Box::new(move |g, x| {
                    let p = g.softmax_channels(x[0])?;
                    record_dice(g, p, &labels)
                })
            },
        ),
        (
            "structure_existence",
            vec![uniform(&[2, 4], -2.0, 2.0, r)],
            Box::new(move |g, x| {
                let p = g.sigmoid(x[0]);
                record_sec(g, p, &presence)
            }),
        ),
    ];

    let mut out = Vec::with_capacity(cases.len());
    for (name, inputs, f) in cases.drain(..) {
        let report = grad_check(f, &inputs, OP_EPS, &Probe::All)?;
        out.push(CheckOutcome::from_report(name, &report, OP_TOLERANCE));
    }
    Ok(out)
}

/// End-to-end check of the full total loss of the toy network (32x32, 8
/// filters, 5 classes, one neighbour slice each side, skull head and context
/// encoding on) with respect to every parameter tensor, on a batch of two.
/// `random` extra coordinates are probed per tensor besides its largest
/// gradient entry and one whole-tensor directional derivative.
pub fn model_check(random: usize) -> Result<CheckOutcome> {
    use crate::loss::{presence_vector, record_total_loss, LossTargets, DEFAULT_LAMBDA_SEC};
    use crate::model::{build_model, AcenetConfig};
    use crate::params::{Mode, Session};

    let cfg = AcenetConfig::toy();
    let model = build_model(&cfg, 11)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xE2E);
    let (n, hw) = (2, cfg.input_size * cfg.input_size);
    let input = uniform(&[n, cfg.in_channels(), cfg.input_size, cfg.input_size], 0.0, 1.0, &mut rng);
    let labels: Vec<usize> = (0..n * hw).map(|_| rng.random_range(0..cfg.num_structures)).collect();
    let skull: Vec<usize> = (0..n * hw).map(|_| rng.random_range(0..2)).collect();
    let weights: Vec<f64> = (0..n * hw).map(|_| rng.random_range(0.5..2.0)).collect();
    let mut presence = Vec::new();
    for s in 0..n {
        let p = presence_vector(&labels[s * hw..(s + 1) * hw], cfg.num_structures)?;
        presence.extend(p.into_iter().map(|b| if b { 1.0 } else { 0.0 }));
    }
    let ids: Vec<_> = model.store.ids().collect();
    let params: Vec<Tensor> = model.store.iter().map(|(_, _, t)| t.clone()).collect();

    let f = |g: &mut Graph, leaves: &[NodeId]| -> Result<NodeId> {
        let bindings: Vec<_> = ids.iter().copied().zip(leaves.iter().copied()).collect();
        let mut sess = Session::from_graph(std::mem::take(g), &model.store, Mode::Train, 5, &bindings);
        let x = sess.graph.constant(input.clone());
        let nodes = model.forward(&mut sess, x)?;
        let targets = LossTargets {
            labels: &labels,
            skull: &skull,
            presence: &presence,
            weights: Some(&weights),
        };
        let (loss, _) = record_total_loss(
            &mut sess.graph,
            nodes.brain_logits,
            nodes.skull_logits,
            nodes.presence_logits,
            &targets,
            DEFAULT_LAMBDA_SEC,
        )?;
        *g = sess.into_graph();
        Ok(loss)
    };
    let report = grad_check(f, &params, MODEL_EPS, &Probe::Sampled { random, seed: 17 })?;
    Ok(CheckOutcome::from_report("toy_network_total_loss", &report, MODEL_TOLERANCE))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.25, 3.0, -0.75]).unwrap();
        let x = Tensor::new(vec![3], vec![1.0, 2.0, -1.5]).unwrap();
        let report = grad_check(
            |g, ids| {
                let y = g.dense(ids[1], ids[0], None)?;
                Ok(g.sum(y))
            },
            &[w, x],
            1e-5,
            &Probe::All,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-9, "{:?}", report.worst());
    }

    #[test]
    fn relu_near_kink_with_sampled_inputs() {
        let eps = 1e-5;
        let x = Tensor::new(vec![4], vec![10.0 * eps, -10.0 * eps, 0.3, -0.7]).unwrap();
        let report = grad_check(
            |g, ids| {
                let r = g.relu(ids[0]);
                let s = g.square(r);
                Ok(g.sum(s))
            },
            &[x],
            eps,
            &Probe::All,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-5, "{:?}", report.worst());
    }

    #[test]
    fn eps_outside_range_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|g, ids| Ok(g.square(ids[0])), &[x], 1e-2, &Probe::All).is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-10, 0.0) - 1e-2).abs() < 1e-15);
    }
}
