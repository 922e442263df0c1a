//! Segmentation losses, pixel class weights, structure-presence targets and
//! the poly learning-rate schedule.
//!
//! Loss functions take class probabilities `[C,H,W]` or `[N,C,H,W]` and flat
//! integer labels (`N*H*W`, sample-major). Each returns its value together
//! with the gradient with respect to the probabilities so it can be recorded
//! via [`Graph::scalar_fn`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{nchw, Tensor};

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
/// Dice denominator stabilizer.
pub const DICE_EPS: f64 = 1e-8;
pub const DEFAULT_LAMBDA_SEC: f64 = 0.1;

fn check_labels(op: &'static str, probs: &Tensor, labels: &[usize]) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = nchw(op, probs.shape())?;
    let p = h * w;
    if labels.len() != n * p {
        return Err(Error::contract(op, format!("{} labels for {} pixels", labels.len(), n * p)));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::contract(op, format!("label {bad} outside [0,{c})")));
    }
    Ok((n, c, p))
}

/// Pixel-mean cross-entropy `-log p_label(x)`. With `weights` (one per pixel)
/// each term is multiplied by its weight and the sum divided by the total weight.
pub fn ce_loss_with_grad(probs: &Tensor, labels: &[usize], weights: Option<&[f64]>) -> Result<(f64, Tensor)> {
    let (n, c, p) = check_labels("ce_loss", probs, labels)?;
    if let Some(w) = weights {
        if w.len() != labels.len() {
            return Err(Error::contract("ce_loss", format!("{} weights for {} pixels", w.len(), labels.len())));
        }
    }
    let norm = match weights {
        Some(w) => w.iter().sum::<f64>(),
        None => labels.len() as f64,
    };
    let pd = probs.data();
    let mut grad = vec![0.0; pd.len()];
    let mut total = 0.0;
    for s in 0..n {
        for px in 0..p {
            let flat = s * p + px;
            let idx = (s * c + labels[flat]) * p + px;
            let wgt = weights.map_or(1.0, |w| w[flat]);
            let q = pd[idx];
            total += wgt * -q.max(PROB_FLOOR).ln();
            if q > PROB_FLOOR {
                grad[idx] = -wgt / (q * norm);
            }
        }
    }
    Ok((total / norm, Tensor::new(probs.shape().to_vec(), grad)?))
}

pub fn ce_loss(probs: &Tensor, labels: &[usize], weights: Option<&[f64]>) -> Result<f64> {
    ce_loss_with_grad(probs, labels, weights).map(|(v, _)| v)
}

/// Soft Dice `-2Σpg / (Σp² + Σg² + eps)` per class and sample, averaged over
/// all classes (background included) and samples.
pub fn dice_loss_with_grad(probs: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, c, p) = check_labels("dice_loss", probs, labels)?;
    let pd = probs.data();
    let mut grad = vec![0.0; pd.len()];
    let mut total = 0.0;
    let terms = (n * c) as f64;
    for s in 0..n {
        let lab = &labels[s * p..(s + 1) * p];
        for l in 0..c {
            let plane = &pd[(s * c + l) * p..(s * c + l + 1) * p];
            let mut inter = 0.0;
            let mut p2 = 0.0;
            let mut g2 = 0.0;
            for (q, &t) in plane.iter().zip(lab) {
                let g = if t == l { 1.0 } else { 0.0 };
                inter += q * g;
                p2 += q * q;
                g2 += g * g;
            }
            let denom = p2 + g2 + DICE_EPS;
            total += -2.0 * inter / denom;
            let gplane = &mut grad[(s * c + l) * p..(s * c + l + 1) * p];
            for ((d, q), &t) in gplane.iter_mut().zip(plane).zip(lab) {
                let g = if t == l { 1.0 } else { 0.0 };
                *d = (-2.0 * g / denom + 4.0 * inter * q / (denom * denom)) / terms;
            }
        }
    }
    Ok((total / terms, Tensor::new(probs.shape().to_vec(), grad)?))
}

pub fn dice_loss(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    dice_loss_with_grad(probs, labels).map(|(v, _)| v)
}

/// Mean binary cross-entropy of presence probabilities `[K]` or `[N,K]`
/// against 0/1 targets.
pub fn sec_loss_with_grad(probs: &Tensor, truth: &[f64]) -> Result<(f64, Tensor)> {
    if probs.len() != truth.len() {
        return Err(Error::contract(
            "sec_loss",
            format!("{} probabilities vs {} targets", probs.len(), truth.len()),
        ));
    }
    let m = truth.len() as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; truth.len()];
    for ((d, &q), &y) in grad.iter_mut().zip(probs.data()).zip(truth) {
        let q = q.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        total += -(y * q.ln() + (1.0 - y) * (1.0 - q).ln());
        *d = -(y / q - (1.0 - y) / (1.0 - q)) / m;
    }
    Ok((total / m, Tensor::new(probs.shape().to_vec(), grad)?))
}

pub fn sec_loss(probs: &Tensor, truth: &[bool]) -> Result<f64> {
    let t: Vec<f64> = truth.iter().map(|&b| f64::from(u8::from(b))).collect();
    sec_loss_with_grad(probs, &t).map(|(v, _)| v)
}

pub fn record_ce(g: &mut Graph, probs: NodeId, labels: &[usize], weights: Option<&[f64]>) -> Result<NodeId> {
    let (v, grad) = ce_loss_with_grad(g.value(probs), labels, weights)?;
    g.scalar_fn(probs, v, grad)
}

pub fn record_dice(g: &mut Graph, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (v, grad) = dice_loss_with_grad(g.value(probs), labels)?;
    g.scalar_fn(probs, v, grad)
}

pub fn record_sec(g: &mut Graph, probs: NodeId, truth: &[f64]) -> Result<NodeId> {
    let (v, grad) = sec_loss_with_grad(g.value(probs), truth)?;
    g.scalar_fn(probs, v, grad)
}

/// Every loss term of one evaluation, retained for logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_ce_brain: f64,
    pub l_dice_brain: f64,
    pub l_ce_skull: f64,
    pub l_dice_skull: f64,
    pub l_sec: f64,
    pub l_total: f64,
    pub lambda_sec: f64,
}

/// Composes the total from its parts. Absent skull or context terms are 0.
pub fn total_loss(
    l_ce_brain: f64,
    l_dice_brain: f64,
    skull: Option<(f64, f64)>,
    l_sec: Option<f64>,
    lambda_sec: f64,
) -> LossBundle {
    let (l_ce_skull, l_dice_skull) = skull.unwrap_or((0.0, 0.0));
    let l_sec = l_sec.unwrap_or(0.0);
    LossBundle {
        l_ce_brain,
        l_dice_brain,
        l_ce_skull,
        l_dice_skull,
        l_sec,
        l_total: l_ce_skull + l_dice_skull + l_ce_brain + l_dice_brain + lambda_sec * l_sec,
        lambda_sec,
    }
}

/// Targets for one batch of slice stacks.
#[derive(Debug, Clone)]
pub struct LossTargets<'a> {
    pub labels: &'a [usize],
    pub skull: &'a [usize],
    pub presence: &'a [f64],
    pub weights: Option<&'a [f64]>,
}

/// Records all loss terms on the graph and returns the total node.
pub fn record_total_loss(
    g: &mut Graph,
    brain_logits: NodeId,
    skull_logits: Option<NodeId>,
    presence_logits: Option<NodeId>,
    targets: &LossTargets<'_>,
    lambda_sec: f64,
) -> Result<(NodeId, LossBundle)> {
    let brain = g.softmax_channels(brain_logits)?;
    let ce_b = record_ce(g, brain, targets.labels, targets.weights)?;
    let dice_b = record_dice(g, brain, targets.labels)?;
    let mut terms = vec![(ce_b, 1.0), (dice_b, 1.0)];
    let skull = match skull_logits {
        Some(logits) => {
            let probs = g.softmax_channels(logits)?;
            let ce_s = record_ce(g, probs, targets.skull, None)?;
            let dice_s = record_dice(g, probs, targets.skull)?;
            terms.push((ce_s, 1.0));
            terms.push((dice_s, 1.0));
            Some((g.value(ce_s).item(), g.value(dice_s).item()))
        }
        None => None,
    };
    let sec = match presence_logits {
        Some(logits) => {
            let probs = g.sigmoid(logits);
            let sec = record_sec(g, probs, targets.presence)?;
            terms.push((sec, lambda_sec));
            Some(g.value(sec).item())
        }
        None => None,
    };
    let total = g.combine(&terms)?;
    let bundle = total_loss(g.value(ce_b).item(), g.value(dice_b).item(), skull, sec, lambda_sec);
    Ok((total, bundle))
}

/// Voxel-count label frequencies over a training set, indexed by label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelFrequencies {
    pub freq: Vec<f64>,
}

impl LabelFrequencies {
    pub fn from_labels<'a>(volumes: impl IntoIterator<Item = &'a [usize]>, num_labels: usize) -> Result<Self> {
        let mut counts = vec![0usize; num_labels];
        let mut total = 0usize;
        for vol in volumes {
            for &l in vol {
                if l >= num_labels {
                    return Err(Error::contract("class_weight_map", format!("label {l} outside [0,{num_labels})")));
                }
                counts[l] += 1;
                total += 1;
            }
        }
        if total == 0 {
            return Err(Error::contract("class_weight_map", "no voxels"));
        }
        Ok(LabelFrequencies {
            freq: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        })
    }

    pub fn median(&self) -> f64 {
        let mut f = self.freq.clone();
        f.sort_by(f64::total_cmp);
        let m = f.len();
        if m % 2 == 1 {
            f[m / 2]
        } else {
            0.5 * (f[m / 2 - 1] + f[m / 2])
        }
    }

    /// `median(f) / f_l`; errors when label `l` never occurs.
    pub fn balance(&self, label: usize) -> Result<f64> {
        match self.freq.get(label) {
            Some(&f) if f > 0.0 => Ok(self.median() / f),
            _ => Err(Error::contract("class_weight_map", format!("label {label} absent from training frequencies"))),
        }
    }
}

/// Per-pixel weights for one `h x w` label slice: `median(f)/f_l`, plus
/// `2·median(f)/f_l` at pixels with a differing 4-neighbour.
pub fn class_weight_map(slice: &[usize], h: usize, w: usize, freqs: &LabelFrequencies) -> Result<Vec<f64>> {
    if slice.len() != h * w {
        return Err(Error::contract("class_weight_map", "slice length does not match dimensions"));
    }
    let boundary = boundary_pixels(slice, h, w);
    slice
        .iter()
        .zip(&boundary)
        .map(|(&l, &b)| {
            let base = freqs.balance(l)?;
            Ok(if b { 3.0 * base } else { base })
        })
        .collect()
}

/// Pixels whose label differs from at least one 4-neighbour within the slice.
pub fn boundary_pixels(slice: &[usize], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let l = slice[y * w + x];
            let differs = (y > 0 && slice[(y - 1) * w + x] != l)
                || (y + 1 < h && slice[(y + 1) * w + x] != l)
                || (x > 0 && slice[y * w + x - 1] != l)
                || (x + 1 < w && slice[y * w + x + 1] != l);
            out[y * w + x] = differs;
        }
    }
    out
}

/// Entry `i-1` is true iff label `i >= 1` occurs in the slice.
pub fn presence_vector(slice: &[usize], num_structures: usize) -> Result<Vec<bool>> {
    let mut present = vec![false; num_structures.saturating_sub(1)];
    for &l in slice {
        if l >= num_structures {
            return Err(Error::contract("presence_vector", format!("label {l} outside [0,{num_structures})")));
        }
        if l > 0 {
            present[l - 1] = true;
        }
    }
    Ok(present)
}

pub const POLY_POWER: f64 = 0.9;

/// `base_lr * (1 - iter/iter_total)^power`.
pub fn poly_lr(base_lr: f64, iter: usize, iter_total: usize, power: f64) -> Result<f64> {
    if iter_total == 0 {
        return Err(Error::contract("poly_lr", "iter_total must be positive"));
    }
    if iter > iter_total {
        return Err(Error::contract("poly_lr", format!("iter {iter} beyond iter_total {iter_total}")));
    }
    Ok(base_lr * (1.0 - iter as f64 / iter_total as f64).powf(power))
}
