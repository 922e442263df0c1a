//! Volume inference and evaluation: overlap scores, Hausdorff distance, the
//! Wilcoxon signed-rank test, attention-map export and report files.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{normalize_intensity, stack_input, Dtype, Volume};
use crate::error::{Error, Result};
use crate::model::{BlockMaps, ModelParams};
use crate::tensor::Tensor;

/// Slices per forward pass during volume inference.
const INFER_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub labels: Volume,
    pub brain_mask: Volume,
}

fn argmax_channels(logits: &Tensor, sample: usize, out: &mut Vec<usize>) {
    let s = logits.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    let base = sample * c * hw;
    let d = logits.data();
    for p in 0..hw {
        let mut best = 0;
        for k in 1..c {
            if d[base + k * hw + p] > d[base + best * hw + p] {
                best = k;
            }
        }
        out.push(best);
    }
}

/// Slice-by-slice eval-mode segmentation. Voxels outside the predicted brain
/// mask are forced to background. Without a skull head the mask is the set
/// of voxels given a nonzero label.
pub fn segment_volume(params: &ModelParams, intensity: &Volume) -> Result<Segmentation> {
    let cfg = &params.config;
    let [depth, h, w] = intensity.dims();
    if h != cfg.input_size || w != cfg.input_size {
        return Err(Error::contract(
            "segment_volume",
            format!("slices are {h}x{w}, model input size is {}", cfg.input_size),
        ));
    }
    let normalized;
    let vol = if intensity.intensity_normalized {
        intensity
    } else {
        normalized = normalize_intensity(intensity);
        &normalized
    };
    let mut labels = Vec::with_capacity(vol.len());
    let mut mask = Vec::with_capacity(vol.len());
    let channels = cfg.in_channels();
    for start in (0..depth).step_by(INFER_CHUNK) {
        let end = (start + INFER_CHUNK).min(depth);
        let mut data = Vec::with_capacity((end - start) * channels * h * w);
        for d in start..end {
            data.extend_from_slice(stack_input(vol, d, cfg.s)?.0.data());
        }
        let batch = Tensor::new(vec![end - start, channels, h, w], data)?;
        let out = params.predict(&batch, false)?;
        for i in 0..end - start {
            let from = labels.len();
            argmax_channels(&out.brain_logits, i, &mut labels);
            match &out.skull_logits {
                Some(sk) => argmax_channels(sk, i, &mut mask),
                None => mask.extend(labels[from..].iter().map(|&l| usize::from(l != 0))),
            }
        }
    }
    for (l, &m) in labels.iter_mut().zip(&mask) {
        if m == 0 {
            *l = 0;
        }
    }
    let to_f = |v: Vec<usize>| v.into_iter().map(|x| x as f64).collect::<Vec<_>>();
    let dtype = if cfg.num_structures <= 256 { Dtype::U8 } else { Dtype::I16 };
    Ok(Segmentation {
        labels: Volume::new([depth, h, w], dtype, to_f(labels))?,
        brain_mask: Volume::new([depth, h, w], Dtype::U8, to_f(mask))?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapFlag {
    BothEmpty,
    PredEmpty,
    TruthEmpty,
}

impl OverlapFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            OverlapFlag::BothEmpty => "both_empty",
            OverlapFlag::PredEmpty => "pred_empty",
            OverlapFlag::TruthEmpty => "truth_empty",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub dice: f64,
    pub jaccard: f64,
    pub flag: Option<OverlapFlag>,
}

/// Dice and Jaccard of two binary masks; both empty scores 1.
pub fn mask_overlap(pred: &[bool], truth: &[bool]) -> Result<Overlap> {
    if pred.len() != truth.len() {
        return Err(Error::contract("overlap", format!("mask lengths {} and {}", pred.len(), truth.len())));
    }
    let (mut p, mut t, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        p += a as usize;
        t += b as usize;
        both += (a && b) as usize;
    }
    let flag = match (p, t) {
        (0, 0) => Some(OverlapFlag::BothEmpty),
        (0, _) => Some(OverlapFlag::PredEmpty),
        (_, 0) => Some(OverlapFlag::TruthEmpty),
        _ => None,
    };
    if p + t == 0 {
        return Ok(Overlap {
            dice: 1.0,
            jaccard: 1.0,
            flag,
        });
    }
    Ok(Overlap {
        dice: 2.0 * both as f64 / (p + t) as f64,
        jaccard: both as f64 / (p + t - both) as f64,
        flag,
    })
}

pub fn label_mask(labels: &[f64], label: usize) -> Vec<bool> {
    labels.iter().map(|&v| v == label as f64).collect()
}

/// Per-label overlap between two label volumes.
pub fn overlap_metrics(pred: &Volume, truth: &Volume, labels: &[usize]) -> Result<Vec<(usize, Overlap)>> {
    if pred.dims() != truth.dims() {
        return Err(Error::contract(
            "overlap_metrics",
            format!("dims {:?} and {:?}", pred.dims(), truth.dims()),
        ));
    }
    labels
        .iter()
        .map(|&l| Ok((l, mask_overlap(&label_mask(pred.data(), l), &label_mask(truth.data(), l))?)))
        .collect()
}

/// Mean Dice over labels `1..num_structures`.
pub fn mean_foreground_dice(pred: &Volume, truth: &Volume, num_structures: usize) -> Result<f64> {
    let labels: Vec<usize> = (1..num_structures).collect();
    if labels.is_empty() {
        return Err(Error::Metric("no foreground labels".into()));
    }
    let scores = overlap_metrics(pred, truth, &labels)?;
    Ok(scores.iter().map(|(_, o)| o.dice).sum::<f64>() / labels.len() as f64)
}

/// Mask voxels with a face neighbour outside the mask or on the volume edge.
pub fn boundary_voxels(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [nd, nh, nw] = dims;
    let idx = |d: usize, h: usize, w: usize| (d * nh + h) * nw + w;
    let mut out = vec![false; mask.len()];
    for d in 0..nd {
        for h in 0..nh {
            for w in 0..nw {
                let i = idx(d, h, w);
                if !mask[i] {
                    continue;
                }
                let edge = d == 0 || h == 0 || w == 0 || d + 1 == nd || h + 1 == nh || w + 1 == nw;
                out[i] = edge
                    || !mask[idx(d - 1, h, w)]
                    || !mask[idx(d + 1, h, w)]
                    || !mask[idx(d, h - 1, w)]
                    || !mask[idx(d, h + 1, w)]
                    || !mask[idx(d, h, w - 1)]
                    || !mask[idx(d, h, w + 1)];
            }
        }
    }
    out
}

const FAR: f64 = 1e20;

/// Lower envelope of parabolas along one line (Felzenszwalb-Huttenlocher).
fn edt_line(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every voxel to the nearest seed.
pub fn squared_distance_transform(seeds: &[bool], dims: [usize; 3]) -> Vec<f64> {
    let mut dist: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let longest = *dims.iter().max().unwrap_or(&1);
    let (mut f, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut z) = (vec![0usize; longest], vec![0.0; longest + 1]);
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        for start in 0..dist.len() {
            if (start / stride) % n != 0 {
                continue;
            }
            for i in 0..n {
                f[i] = dist[start + i * stride];
            }
            edt_line(&f[..n], &mut out[..n], &mut v, &mut z);
            for i in 0..n {
                dist[start + i * stride] = out[i];
            }
        }
    }
    dist
}

/// Symmetric Hausdorff distance between the boundaries of two masks, in voxels.
pub fn hausdorff(pred: &[bool], truth: &[bool], dims: [usize; 3]) -> Result<f64> {
    let n = dims.iter().product::<usize>();
    if pred.len() != n || truth.len() != n {
        return Err(Error::contract("hausdorff", format!("mask lengths do not match dims {dims:?}")));
    }
    if !pred.iter().any(|&b| b) || !truth.iter().any(|&b| b) {
        return Err(Error::Metric("hausdorff distance of an empty mask".into()));
    }
    let bp = boundary_voxels(pred, dims);
    let bt = boundary_voxels(truth, dims);
    let to_t = squared_distance_transform(&bt, dims);
    let to_p = squared_distance_transform(&bp, dims);
    let directed = |from: &[bool], dist: &[f64]| {
        from.iter()
            .zip(dist)
            .filter(|(&b, _)| b)
            .map(|(_, &d)| d)
            .fold(0.0, f64::max)
    };
    Ok(directed(&bp, &to_t).max(directed(&bt, &to_p)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    Exact,
    NormalApproximation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    pub statistic: f64,
    pub n_effective: usize,
    pub p_two_sided: f64,
    pub method: TestMethod,
}

/// Largest sample size evaluated exactly.
pub const EXACT_LIMIT: usize = 25;

/// Two-sided Wilcoxon signed-rank test; exact for up to 25 nonzero differences.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<PairedTestResult> {
    wilcoxon_with_method(a, b, None)
}

/// As [`wilcoxon_signed_rank`], optionally forcing the method.
pub fn wilcoxon_with_method(a: &[f64], b: &[f64], method: Option<TestMethod>) -> Result<PairedTestResult> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Metric(format!(
            "paired test needs equal lengths >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|&v| v != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Metric("non-finite paired difference".into()));
    }
    let n = d.len();
    let method = method.unwrap_or(if n <= EXACT_LIMIT { TestMethod::Exact } else { TestMethod::NormalApproximation });
    if n == 0 {
        return Ok(PairedTestResult {
            statistic: 0.0,
            n_effective: 0,
            p_two_sided: 1.0,
            method,
        });
    }

    // Mid-ranks, doubled so ties stay integral.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].abs().total_cmp(&d[j].abs()));
    let mut rank2 = vec![0usize; n];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[order[j + 1]].abs() == d[order[i]].abs() {
            j += 1;
        }
        // Ranks i+1..=j+1 share (i+1 + j+1)/2.
        for &k in &order[i..=j] {
            rank2[k] = i + j + 2;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    let w_plus2: usize = (0..n).filter(|&k| d[k] > 0.0).map(|k| rank2[k]).sum();
    let total2 = n * (n + 1);
    let w2 = w_plus2.min(total2 - w_plus2);
    let statistic = w2 as f64 / 2.0;

    let p = match method {
        TestMethod::Exact => {
            let mut counts = vec![0.0f64; total2 + 1];
            counts[0] = 1.0;
            for &r in &rank2 {
                for s in (r..=total2).rev() {
                    counts[s] += counts[s - r];
                }
            }
            let tail: f64 = counts[..=w2].iter().sum();
            2.0 * tail / 2f64.powi(n as i32)
        }
        TestMethod::NormalApproximation => {
            let nf = n as f64;
            let mean = nf * (nf + 1.0) / 4.0;
            let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
            let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
            if var <= 0.0 {
                1.0
            } else {
                let z = ((statistic - mean).abs() - 0.5).max(0.0) / var.sqrt();
                let std = Normal::standard();
                2.0 * std.cdf(-z)
            }
        }
    };
    Ok(PairedTestResult {
        statistic,
        n_effective: n,
        p_two_sided: p.min(1.0),
        method,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Input,
    Attention,
    Output,
}

impl MapKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MapKind::Input => "input",
            MapKind::Attention => "attention",
            MapKind::Output => "output",
        }
    }
}

/// One exported image before quantization, values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MapImage {
    pub block: String,
    pub kind: MapKind,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Mean of absolute values over channels of a `[C,H,W]` or `[1,C,H,W]` tensor.
pub fn channel_mean_abs(t: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let s = t.shape();
    let (c, h, w) = match s.len() {
        3 => (s[0], s[1], s[2]),
        4 if s[0] == 1 => (s[1], s[2], s[3]),
        _ => return Err(Error::contract("channel_mean_abs", format!("expected one sample, got {s:?}"))),
    };
    let hw = h * w;
    let mut out = vec![0.0; hw];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(&t.data()[ch * hw..(ch + 1) * hw]) {
            *o += v.abs();
        }
    }
    out.iter_mut().for_each(|o| *o /= c as f64);
    Ok((h, w, out))
}

/// Min-max to `[0,1]`; a constant image maps to zeros.
pub fn normalize_unit(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; values.len()]
    }
}

pub fn quantize(values: &[f64]) -> Vec<u8> {
    values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Normalized input-feature, attention and output-feature images per block.
pub fn block_images(maps: &[BlockMaps]) -> Result<Vec<MapImage>> {
    let mut images = Vec::with_capacity(maps.len() * 3);
    for m in maps {
        for (kind, t) in [
            (MapKind::Input, &m.input),
            (MapKind::Attention, &m.attention),
            (MapKind::Output, &m.output),
        ] {
            let (height, width, raw) = channel_mean_abs(t)?;
            images.push(MapImage {
                block: m.name.clone(),
                kind,
                height,
                width,
                values: normalize_unit(&raw),
            });
        }
    }
    Ok(images)
}

/// Eval-mode traced forward of one `[2s+1,H,W]` stack, then one 8-bit PGM per
/// block and map kind in `out_dir`. Returns the written paths and the images
/// before quantization.
pub fn export_attention(params: &ModelParams, input: &Tensor, out_dir: &Path) -> Result<(Vec<PathBuf>, Vec<MapImage>)> {
    if input.rank() != 3 {
        return Err(Error::contract("export_attention", format!("expected one stack, got {:?}", input.shape())));
    }
    let out = params.predict(input, true)?;
    let images = block_images(&out.diagnostics)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let path = out_dir.join(format!("{:02}_{}_{}.pgm", i / 3, img.block, img.kind.as_str()));
        write_pgm(&path, img.width, img.height, &quantize(&img.values))?;
        paths.push(path);
    }
    Ok((paths, images))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureRow {
    pub label: usize,
    pub name: String,
    pub dice: f64,
    pub jaccard: f64,
    /// `None` when either mask is empty.
    pub hausdorff: Option<f64>,
    pub flags: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd {
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub rows: Vec<StructureRow>,
    pub skull_dice: Option<f64>,
}

/// Sample mean and standard deviation over rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub dice: MeanStd,
    pub jaccard: MeanStd,
    pub hausdorff: MeanStd,
}

impl StructureReport {
    pub fn aggregate(&self) -> Aggregate {
        let col = |f: &dyn Fn(&StructureRow) -> Option<f64>| mean_std(&self.rows.iter().filter_map(f).collect::<Vec<_>>());
        Aggregate {
            dice: col(&|r| Some(r.dice)),
            jaccard: col(&|r| Some(r.jaccard)),
            hausdorff: col(&|r| r.hausdorff),
        }
    }

    pub fn dice_of(&self, label: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.label == label).map(|r| r.dice)
    }
}

pub fn structure_name(label: usize) -> String {
    format!("structure_{label}")
}

/// Scores every label in `labels`; masks, when both given, add a skull-strip Dice.
pub fn build_report(
    pred: &Volume,
    truth: &Volume,
    labels: &[usize],
    masks: Option<(&Volume, &Volume)>,
) -> Result<StructureReport> {
    let dims = truth.dims();
    let mut rows = Vec::with_capacity(labels.len());
    for (label, o) in overlap_metrics(pred, truth, labels)? {
        let pm = label_mask(pred.data(), label);
        let tm = label_mask(truth.data(), label);
        let hausdorff = match o.flag {
            Some(_) => None,
            None => Some(hausdorff(&pm, &tm, dims)?),
        };
        rows.push(StructureRow {
            label,
            name: structure_name(label),
            dice: o.dice,
            jaccard: o.jaccard,
            hausdorff,
            flags: o.flag.map(|f| f.as_str().to_string()).unwrap_or_default(),
        });
    }
    let skull_dice = match masks {
        Some((p, t)) => {
            let pm: Vec<bool> = p.data().iter().map(|&v| v != 0.0).collect();
            let tm: Vec<bool> = t.data().iter().map(|&v| v != 0.0).collect();
            Some(mask_overlap(&pm, &tm)?.dice)
        }
        None => None,
    };
    Ok(StructureReport { rows, skull_dice })
}

/// Per-structure paired comparison across cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureComparison {
    pub label: usize,
    pub name: String,
    pub dice_a: Vec<f64>,
    pub dice_b: Vec<f64>,
    pub test: Option<PairedTestResult>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

/// Companion file content: raw Dice lists and paired tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSet {
    pub hausdorff_definition: String,
    pub structures: Vec<StructureComparison>,
    /// Test over all (case, structure) Dice pairs pooled.
    pub overall: Option<PairedTestResult>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub overall_note: Option<String>,
}

pub const HAUSDORFF_DEFINITION: &str =
    "symmetric maximum over 6-connected boundary voxels, Euclidean distance in voxel units";

fn paired(a: &[f64], b: &[f64]) -> (Option<PairedTestResult>, Option<String>) {
    match wilcoxon_signed_rank(a, b) {
        Ok(t) => (Some(t), None),
        Err(e) => (None, Some(e.to_string())),
    }
}

/// Collects per-case Dice lists of method `a` (and `b` when given) and runs the
/// paired tests.
pub fn compare_reports(a: &[StructureReport], b: Option<&[StructureReport]>) -> Result<ComparisonSet> {
    let first = a.first().ok_or_else(|| Error::Metric("no reports to compare".into()))?;
    if let Some(b) = b {
        if b.len() != a.len() {
            return Err(Error::Metric(format!("{} cases against {}", a.len(), b.len())));
        }
    }
    let dice_list = |reports: &[StructureReport], label: usize| -> Result<Vec<f64>> {
        reports
            .iter()
            .map(|r| r.dice_of(label).ok_or_else(|| Error::Metric(format!("label {label} missing from a report"))))
            .collect()
    };
    let mut structures = Vec::new();
    let (mut pooled_a, mut pooled_b) = (Vec::new(), Vec::new());
    for row in &first.rows {
        let dice_a = dice_list(a, row.label)?;
        let (dice_b, (test, note)) = match b {
            Some(b) => {
                let db = dice_list(b, row.label)?;
                let t = paired(&dice_a, &db);
                (db, t)
            }
            None => (Vec::new(), (None, None)),
        };
        pooled_a.extend_from_slice(&dice_a);
        pooled_b.extend_from_slice(&dice_b);
        structures.push(StructureComparison {
            label: row.label,
            name: row.name.clone(),
            dice_a,
            dice_b,
            test,
            note,
        });
    }
    let (overall, overall_note) = if b.is_some() { paired(&pooled_a, &pooled_b) } else { (None, None) };
    Ok(ComparisonSet {
        hausdorff_definition: HAUSDORFF_DEFINITION.to_string(),
        structures,
        overall,
        overall_note,
    })
}

pub const CSV_HEADER: [&str; 6] = ["label", "name", "dice", "jaccard", "hausdorff", "flags"];

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:?}")
    }
}

/// Writes the CSV report and, when given, the comparison companion as JSON.
pub fn emit_report(report: &StructureReport, comparisons: Option<&ComparisonSet>, csv_path: &Path) -> Result<()> {
    let io = |e: csv::Error| Error::Metric(format!("{}: {e}", csv_path.display()));
    let mut w = csv::Writer::from_path(csv_path).map_err(io)?;
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in &report.rows {
        w.write_record([
            r.label.to_string(),
            r.name.clone(),
            fmt_num(r.dice),
            fmt_num(r.jaccard),
            r.hausdorff.map(fmt_num).unwrap_or_default(),
            r.flags.clone(),
        ])
        .map_err(io)?;
    }
    let agg = report.aggregate();
    for (label, pick) in [("mean", 0), ("std", 1)] {
        let get = |m: MeanStd| if pick == 0 { m.mean } else { m.std };
        w.write_record([
            label.to_string(),
            "all".to_string(),
            fmt_num(get(agg.dice)),
            fmt_num(get(agg.jaccard)),
            fmt_num(get(agg.hausdorff)),
            String::new(),
        ])
        .map_err(io)?;
    }
    if let Some(sd) = report.skull_dice {
        w.write_record(["skull", "brain_mask", &fmt_num(sd), "", "", ""]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))?;

    if let Some(c) = comparisons {
        write_comparisons(c, &csv_path.with_extension("json"))?;
    }
    Ok(())
}

/// Pretty-printed JSON of a comparison set.
pub fn write_comparisons(comparisons: &ComparisonSet, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(comparisons).map_err(|e| Error::Metric(e.to_string()))?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

/// Structure rows parsed back from a report CSV (aggregate rows skipped).
pub fn read_report_rows(csv_path: &Path) -> Result<Vec<StructureRow>> {
    let err = |e: csv::Error| Error::format(csv_path.display().to_string(), e.to_string());
    let mut r = csv::Reader::from_path(csv_path).map_err(err)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(err)?;
        let Ok(label) = rec[0].parse::<usize>() else { continue };
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| Error::format(CSV_HEADER[i], format!("'{}' is not a number", &rec[i])))
        };
        rows.push(StructureRow {
            label,
            name: rec[1].to_string(),
            dice: num(2)?,
            jaccard: num(3)?,
            hausdorff: if rec[4].is_empty() { None } else { Some(num(4)?) },
            flags: rec[5].to_string(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_overlap() {
        let o = mask_overlap(&[true, true, false], &[true, false, false]).unwrap();
        assert_eq!(o.dice, 2.0 / 3.0);
        assert_eq!(o.jaccard, 0.5);
        let e = mask_overlap(&[false; 3], &[false; 3]).unwrap();
        assert_eq!((e.dice, e.jaccard, e.flag), (1.0, 1.0, Some(OverlapFlag::BothEmpty)));
        let d = mask_overlap(&[true, false], &[false, true]).unwrap();
        assert_eq!((d.dice, d.jaccard), (0.0, 0.0));
    }

    #[test]
    fn two_points_three_apart() {
        let dims = [1, 1, 4];
        let a = [true, false, false, false];
        let b = [false, false, false, true];
        assert_eq!(hausdorff(&a, &b, dims).unwrap(), 3.0);
        assert_eq!(hausdorff(&a, &a, dims).unwrap(), 0.0);
        assert!(hausdorff(&a, &[false; 4], dims).is_err());
    }

    #[test]
    fn interior_voxels_are_not_boundary() {
        let dims = [3, 3, 3];
        let b = boundary_voxels(&[true; 27], dims);
        assert_eq!(b.iter().filter(|&&x| x).count(), 26);
        assert!(!b[13]);
    }

    #[test]
    fn exact_wilcoxon_all_positive() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [0.0; 6];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.method, TestMethod::Exact);
        assert_eq!(r.p_two_sided, 0.03125);
        let same = wilcoxon_signed_rank(&a, &a).unwrap();
        assert_eq!(same.p_two_sided, 1.0);
    }

    #[test]
    fn pgm_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        write_pgm(&p, 2, 1, &[0, 255]).unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"P5\n2 1\n255\n\x00\xff");
    }
}
