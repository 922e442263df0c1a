//! Volumes, on-disk formats, slice-stack extraction, synthetic phantoms and
//! batch iteration.
//!
//! Volumes are indexed `[d, h, w]` with `d` the coronal slice index and `w`
//! varying fastest in memory and on disk.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::presence_vector;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    I16,
    F32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::I16 => 2,
            Dtype::F32 => 4,
        }
    }

    fn decode(self, bytes: &[u8]) -> Vec<f64> {
        match self {
            Dtype::U8 => bytes.iter().map(|&b| b as f64).collect(),
            Dtype::I16 => bytes
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
                .collect(),
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    dtype: Dtype,
    data: Vec<f64>,
    pub intensity_normalized: bool,
}

impl Volume {
    pub fn new(dims: [usize; 3], dtype: Dtype, data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::contract("volume", format!("dims {dims:?} must all be >= 1")));
        }
        let n = dims.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::contract(
                "volume",
                format!("data length {} does not match dims {dims:?} ({n})", data.len()),
            ));
        }
        Ok(Volume {
            dims,
            dtype,
            data,
            intensity_normalized: false,
        })
    }

    pub fn zeros(dims: [usize; 3], dtype: Dtype) -> Self {
        Volume {
            dims,
            dtype,
            data: vec![0.0; dims.iter().product()],
            intensity_normalized: false,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(d, h, w)]
    }

    /// The `[H,W]` plane at coronal index `d`.
    pub fn slice(&self, d: usize) -> &[f64] {
        let plane = self.dims[1] * self.dims[2];
        &self.data[d * plane..(d + 1) * plane]
    }

    /// Values as label codes. Fails on negative or fractional entries.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.data
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::format("labels", format!("value {v} is not a label code")))
                }
            })
            .collect()
    }

    fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.len() * self.dtype.size());
        for &v in &self.data {
            match self.dtype {
                Dtype::U8 => {
                    if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                        return Err(Error::format("data", format!("{v} is not representable as u8")));
                    }
                    out.push(v as u8);
                }
                Dtype::I16 => {
                    if v.fract() != 0.0 || !(i16::MIN as f64..=i16::MAX as f64).contains(&v) {
                        return Err(Error::format("data", format!("{v} is not representable as i16")));
                    }
                    out.extend_from_slice(&(v as i16).to_le_bytes());
                }
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
        Ok(out)
    }
}

/// Sidecar header of the raw format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawHeader {
    pub dims: [usize; 3],
    pub dtype: Dtype,
    /// Payload path, relative to the header's directory.
    pub data: String,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_raw_volume(header_path: &Path) -> Result<Volume> {
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let header: RawHeader =
        toml::from_str(&text).map_err(|e| Error::format(header_path.display().to_string(), e.to_string()))?;
    let payload = header_path.parent().unwrap_or(Path::new("")).join(&header.data);
    let bytes = read_file(&payload)?;
    let expected = header.dims.iter().product::<usize>() * header.dtype.size();
    if bytes.len() != expected {
        return Err(Error::format(
            "data",
            format!(
                "{} holds {} bytes, dims {:?} of {:?} need {expected}",
                payload.display(),
                bytes.len(),
                header.dims,
                header.dtype
            ),
        ));
    }
    Volume::new(header.dims, header.dtype, header.dtype.decode(&bytes))
}

/// Writes `<stem>.toml` style header at `header_path` and the payload next to
/// it as `<stem>.raw`. Returns the payload path.
pub fn save_raw_volume(volume: &Volume, header_path: &Path) -> Result<PathBuf> {
    let stem = header_path
        .file_stem()
        .ok_or_else(|| Error::format("header path", "missing file name"))?
        .to_string_lossy()
        .into_owned();
    let data_name = format!("{stem}.raw");
    let payload = header_path.with_file_name(&data_name);
    write_file(&payload, &volume.encode()?)?;
    let header = RawHeader {
        dims: volume.dims,
        dtype: volume.dtype,
        data: data_name,
    };
    let text = toml::to_string(&header).map_err(|e| Error::format("header", e.to_string()))?;
    write_file(header_path, text.as_bytes())?;
    Ok(payload)
}

const NIFTI_HEADER: usize = 348;

/// Uncompressed single-file NIfTI-1 with u8, i16 or f32 voxels. The first
/// image axis becomes the coronal index.
pub fn load_nifti_minimal(path: &Path) -> Result<Volume> {
    let bytes = read_file(path)?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        return Err(Error::format("compression", "gzip-compressed NIfTI is not supported"));
    }
    if bytes.len() < NIFTI_HEADER {
        return Err(Error::format("sizeof_hdr", format!("file has only {} bytes", bytes.len())));
    }
    let i16_at = |o: usize| i16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let f32_at = |o: usize| f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let sizeof_hdr = i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if sizeof_hdr != NIFTI_HEADER as i32 {
        return Err(Error::format(
            "sizeof_hdr",
            format!("{sizeof_hdr} (expected 348, little-endian)"),
        ));
    }
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::format("magic", format!("{:?} is not \"n+1\"", &bytes[344..348])));
    }
    let dim: Vec<i16> = (0..8).map(|i| i16_at(40 + 2 * i)).collect();
    if !(3..=7).contains(&dim[0]) {
        return Err(Error::format("dim", format!("dim[0] = {} (need a 3-D volume)", dim[0])));
    }
    if dim[1..4].iter().any(|&d| d < 1) || dim[4..=dim[0] as usize].iter().any(|&d| d != 1) {
        return Err(Error::format("dim", format!("{:?} is not a single 3-D volume", &dim[..=dim[0] as usize])));
    }
    let dtype = match i16_at(70) {
        2 => Dtype::U8,
        4 => Dtype::I16,
        16 => Dtype::F32,
        other => return Err(Error::format("datatype", format!("code {other} not supported"))),
    };
    let offset = f32_at(108);
    if offset < NIFTI_HEADER as f32 || offset.fract() != 0.0 {
        return Err(Error::format("vox_offset", format!("{offset}")));
    }
    let offset = offset as usize;
    let (nx, ny, nz) = (dim[1] as usize, dim[2] as usize, dim[3] as usize);
    let n = nx * ny * nz;
    let end = offset + n * dtype.size();
    if bytes.len() < end {
        return Err(Error::format(
            "vox_offset",
            format!("payload needs bytes {offset}..{end}, file has {}", bytes.len()),
        ));
    }
    let raw = dtype.decode(&bytes[offset..end]);
    let slope = f32_at(112) as f64;
    let inter = f32_at(116) as f64;
    let scaled = slope != 0.0 && slope.is_finite();

    // NIfTI stores x fastest; x is mapped to d, y to h, z to w.
    let mut data = vec![0.0; n];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let v = raw[x + nx * (y + ny * z)];
                data[(x * ny + y) * nz + z] = if scaled { v * slope + inter } else { v };
            }
        }
    }
    let dtype = if scaled && (slope != 1.0 || inter != 0.0) { Dtype::F32 } else { dtype };
    Volume::new([nx, ny, nz], dtype, data)
}

/// Volume format chosen by extension: `.nii` is NIfTI, anything else a raw header.
pub fn load_volume(path: &Path) -> Result<Volume> {
    if path.extension().is_some_and(|e| e == "nii") {
        load_nifti_minimal(path)
    } else {
        load_raw_volume(path)
    }
}

/// Per-volume min-max scaling to `[0,1]`; a constant volume maps to zeros.
pub fn normalize_intensity(volume: &Volume) -> Volume {
    let (lo, hi) = volume
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let data = if range > 0.0 {
        volume.data.iter().map(|&v| (v - lo) / range).collect()
    } else {
        vec![0.0; volume.len()]
    };
    Volume {
        dims: volume.dims,
        dtype: Dtype::F32,
        data,
        intensity_normalized: true,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCase {
    pub intensity: Volume,
    pub labels: Volume,
    pub brain_mask: Volume,
}

impl LabeledCase {
    pub fn new(intensity: Volume, labels: Volume, brain_mask: Volume) -> Result<Self> {
        let case = LabeledCase {
            intensity,
            labels,
            brain_mask,
        };
        case.validate()?;
        Ok(case)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.intensity.dims;
        if self.labels.dims != dims || self.brain_mask.dims != dims {
            return Err(Error::contract(
                "labeled_case",
                format!(
                    "dims differ: intensity {dims:?}, labels {:?}, mask {:?}",
                    self.labels.dims, self.brain_mask.dims
                ),
            ));
        }
        for (i, (&l, &m)) in self.labels.data.iter().zip(&self.brain_mask.data).enumerate() {
            if m != 0.0 && m != 1.0 {
                return Err(Error::contract("labeled_case", format!("mask value {m} at voxel {i} is not binary")));
            }
            if l != 0.0 && m == 0.0 {
                return Err(Error::contract("labeled_case", format!("label {l} at voxel {i} lies outside the brain mask")));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.intensity.dims
    }

    /// Same case with min-max normalized intensities (no-op if already flagged).
    pub fn normalized(mut self) -> Self {
        if !self.intensity.intensity_normalized {
            self.intensity = normalize_intensity(&self.intensity);
        }
        self
    }
}

pub const INTENSITY_FILE: &str = "intensity.toml";
pub const LABELS_FILE: &str = "labels.toml";
pub const MASK_FILE: &str = "mask.toml";

/// Writes a case as three raw volumes in `dir`, creating it if needed.
pub fn save_case(case: &LabeledCase, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_raw_volume(&case.intensity, &dir.join(INTENSITY_FILE))?;
    save_raw_volume(&case.labels, &dir.join(LABELS_FILE))?;
    save_raw_volume(&case.brain_mask, &dir.join(MASK_FILE))?;
    Ok(())
}

pub fn load_case(dir: &Path) -> Result<LabeledCase> {
    LabeledCase::new(
        load_raw_volume(&dir.join(INTENSITY_FILE))?,
        load_raw_volume(&dir.join(LABELS_FILE))?,
        load_raw_volume(&dir.join(MASK_FILE))?,
    )
}

/// Every subdirectory of `root` holding an intensity header, in name order.
pub fn load_cases(root: &Path) -> Result<Vec<(String, LabeledCase)>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.join(INTENSITY_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::format(root.display().to_string(), "no case directories found"));
    }
    dirs.iter()
        .map(|d| {
            let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, load_case(d)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack {
    /// `[2s+1, H, W]`; channel `s` is the centre slice.
    pub input: Tensor,
    pub center_labels: Vec<usize>,
    /// 1 inside the brain mask, 0 elsewhere.
    pub center_skull: Vec<usize>,
    pub presence: Vec<bool>,
    pub case_id: usize,
    pub slice_index: usize,
    /// Source slice of each input channel.
    pub sources: Vec<usize>,
}

/// Source slices for a stack of `2s+1` around `center`. Neighbours outside
/// `[0, depth)` are replaced by the centre slice itself.
pub fn stack_sources(center: usize, s: usize, depth: usize) -> Vec<usize> {
    (0..=2 * s)
        .map(|k| {
            let idx = center as isize + k as isize - s as isize;
            if idx < 0 || idx >= depth as isize {
                center
            } else {
                idx as usize
            }
        })
        .collect()
}

/// The `[2s+1, H, W]` input around `slice_index` and its source slices.
pub fn stack_input(volume: &Volume, slice_index: usize, s: usize) -> Result<(Tensor, Vec<usize>)> {
    let [depth, h, w] = volume.dims();
    if slice_index >= depth {
        return Err(Error::contract(
            "extract_slice_stack",
            format!("slice {slice_index} outside [0,{depth})"),
        ));
    }
    let sources = stack_sources(slice_index, s, depth);
    let mut input = Vec::with_capacity(sources.len() * h * w);
    for &src in &sources {
        input.extend_from_slice(volume.slice(src));
    }
    Ok((Tensor::new(vec![sources.len(), h, w], input)?, sources))
}

pub fn extract_slice_stack(
    case: &LabeledCase,
    case_id: usize,
    slice_index: usize,
    s: usize,
    num_structures: usize,
) -> Result<SliceStack> {
    let (input, sources) = stack_input(&case.intensity, slice_index, s)?;
    let center_labels: Vec<usize> = case
        .labels
        .slice(slice_index)
        .iter()
        .map(|&v| v as usize)
        .collect();
    let center_skull = case
        .brain_mask
        .slice(slice_index)
        .iter()
        .map(|&v| usize::from(v != 0.0))
        .collect();
    let presence = presence_vector(&center_labels, num_structures)?;
    Ok(SliceStack {
        input,
        center_labels,
        center_skull,
        presence,
        case_id,
        slice_index,
        sources,
    })
}

/// Background tissue level inside the brain.
pub const TISSUE_LEVEL: f64 = 0.3;
pub const SKULL_LEVEL: f64 = 1.0;
/// Structure base levels are spread evenly over this band.
pub const STRUCTURE_BAND: (f64, f64) = (0.45, 0.8);
const PLACEMENT_TRIES: usize = 500;

/// Base intensity of structure `label` (1-based) among `n`.
pub fn structure_level(label: usize, n: usize) -> f64 {
    let (lo, hi) = STRUCTURE_BAND;
    if n <= 1 {
        return (lo + hi) / 2.0;
    }
    lo + (hi - lo) * (label - 1) as f64 / (n - 1) as f64
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Squared normalized radius; `<= 1` inside.
    fn rho2(&self, p: [usize; 3]) -> f64 {
        (0..3)
            .map(|a| {
                let t = (p[a] as f64 - self.center[a]) / self.radii[a];
                t * t
            })
            .sum()
    }

    fn bounds(&self, axis: usize, pad: f64, len: usize) -> std::ops::Range<usize> {
        let lo = (self.center[axis] - self.radii[axis] - pad).floor().max(0.0) as usize;
        let hi = ((self.center[axis] + self.radii[axis] + pad).ceil() as usize + 1).min(len);
        lo..hi
    }
}

/// A deterministic synthetic head: ellipsoidal brain, a shell of skull
/// outside it, and `n_structures` disjoint ellipsoids labelled `1..=n`.
/// Intensities are raw (not normalized) with Gaussian noise.
pub fn synth_phantom(seed: u64, dims: [usize; 3], n_structures: usize, noise_sigma: f64) -> Result<LabeledCase> {
    if dims.iter().any(|&d| d < 16) {
        return Err(Error::contract("synth_phantom", format!("dims {dims:?} must be >= 16 per axis")));
    }
    if n_structures + 1 > 256 {
        return Err(Error::contract("synth_phantom", "at most 255 structures"));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::contract("synth_phantom", format!("noise sigma {noise_sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let brain = Ellipsoid {
        center: dims.map(|d| (d as f64 - 1.0) / 2.0 + rng.random_range(-0.5..0.5)),
        radii: dims.map(|d| d as f64 * rng.random_range(0.34..0.38)),
    };
    let n = dims.iter().product::<usize>();
    let [_, dh, dw] = dims;
    let idx = |p: [usize; 3]| (p[0] * dh + p[1]) * dw + p[2];
    let mut mask = vec![0.0; n];
    let mut skull = vec![false; n];
    for d in 0..dims[0] {
        for h in 0..dh {
            for w in 0..dw {
                let r2 = brain.rho2([d, h, w]);
                if r2 <= 1.0 {
                    mask[idx([d, h, w])] = 1.0;
                } else if (1.15f64.powi(2)..=1.3f64.powi(2)).contains(&r2) {
                    skull[idx([d, h, w])] = true;
                }
            }
        }
    }
    let brain_voxels = mask.iter().filter(|&&m| m == 1.0).count();
    let min_voxels = (brain_voxels as f64 * 1e-3).ceil().max(1.0) as usize;

    let fit = (4.0 / n_structures.max(4) as f64).cbrt().max(0.4);
    let mut labels = vec![0usize; n];
    for label in 1..=n_structures {
        let mut placed = false;
        for attempt in 0..PLACEMENT_TRIES {
            // Elongated along the slice axis so neighbouring slices carry signal.
            // Sizes shrink with the structure count and with failed attempts.
            let shrink = 1.0 - 0.7 * attempt as f64 / PLACEMENT_TRIES as f64;
            let scale = rng.random_range(0.18..0.3) * fit * shrink;
            let radii = [
                brain.radii[0] * scale * rng.random_range(1.4..2.0),
                brain.radii[1] * scale * rng.random_range(0.8..1.3),
                brain.radii[2] * scale * rng.random_range(0.8..1.3),
            ];
            let dir: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
            let cand = Ellipsoid {
                center: std::array::from_fn(|a| brain.center[a] + dir[a] * brain.radii[a]),
                radii: radii.map(|r| r.max(1.0)),
            };
            let ranges: Vec<_> = (0..3).map(|a| cand.bounds(a, 1.0, dims[a])).collect();
            let mut voxels = Vec::new();
            let mut ok = true;
            'scan: for d in ranges[0].clone() {
                for h in ranges[1].clone() {
                    for w in ranges[2].clone() {
                        let p = [d, h, w];
                        let r2 = cand.rho2(p);
                        // One-voxel gap around every structure.
                        let grown = (0..3)
                            .map(|a| {
                                let t = (p[a] as f64 - cand.center[a]) / (cand.radii[a] + 1.0);
                                t * t
                            })
                            .sum::<f64>();
                        if grown <= 1.0 && labels[idx(p)] != 0 {
                            ok = false;
                            break 'scan;
                        }
                        if r2 <= 1.0 {
                            if mask[idx(p)] == 0.0 {
                                ok = false;
                                break 'scan;
                            }
                            voxels.push(idx(p));
                        }
                    }
                }
            }
            if ok && voxels.len() >= min_voxels {
                for v in voxels {
                    labels[v] = label;
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place structure {label} of {n_structures} in {dims:?} after {PLACEMENT_TRIES} tries"
            )));
        }
    }

    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::Generation(e.to_string()))?;
    let intensity: Vec<f64> = (0..n)
        .map(|i| {
            let base = if labels[i] != 0 {
                structure_level(labels[i], n_structures)
            } else if mask[i] == 1.0 {
                TISSUE_LEVEL
            } else if skull[i] {
                SKULL_LEVEL
            } else {
                0.0
            };
            base + noise.sample(&mut rng)
        })
        .collect();

    LabeledCase::new(
        Volume::new(dims, Dtype::F32, intensity)?,
        Volume::new(dims, Dtype::U8, labels.into_iter().map(|l| l as f64).collect())?,
        Volume::new(dims, Dtype::U8, mask)?,
    )
}

/// Every `(case, slice)` pair once, shuffled when a seed is given.
pub fn epoch_order(cases: &[LabeledCase], shuffle_seed: Option<u64>) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = cases
        .iter()
        .enumerate()
        .flat_map(|(c, case)| (0..case.dims()[0]).map(move |d| (c, d)))
        .collect();
    if let Some(seed) = shuffle_seed {
        pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    pairs
}

/// Iterator over one epoch of slice-stack batches.
pub struct BatchIter<'a> {
    cases: &'a [LabeledCase],
    order: Vec<(usize, usize)>,
    pos: usize,
    batch_size: usize,
    s: usize,
    num_structures: usize,
}

pub fn batch_iter(
    cases: &[LabeledCase],
    batch_size: usize,
    s: usize,
    num_structures: usize,
    shuffle_seed: Option<u64>,
) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::contract("batch_iter", "batch size must be >= 1"));
    }
    Ok(BatchIter {
        cases,
        order: epoch_order(cases, shuffle_seed),
        pos: 0,
        batch_size,
        s,
        num_structures,
    })
}

impl BatchIter<'_> {
    pub fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Vec<SliceStack>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end]
            .iter()
            .map(|&(c, d)| extract_slice_stack(&self.cases[c], c, d, self.s, self.num_structures))
            .collect();
        self.pos = end;
        Some(batch)
    }
}

/// A batch laid out for one forward pass.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[N, 2s+1, H, W]`.
    pub input: Tensor,
    /// `N*H*W` structure labels.
    pub labels: Vec<usize>,
    pub skull: Vec<usize>,
    /// `N*(C-1)` presence targets as 0/1.
    pub presence: Vec<f64>,
}

impl Batch {
    pub fn assemble(stacks: &[SliceStack]) -> Result<Self> {
        let first = stacks
            .first()
            .ok_or_else(|| Error::contract("batch", "empty batch"))?;
        let shape = first.input.shape().to_vec();
        let mut input = Vec::with_capacity(stacks.len() * first.input.len());
        let mut labels = Vec::new();
        let mut skull = Vec::new();
        let mut presence = Vec::new();
        for st in stacks {
            if st.input.shape() != shape.as_slice() {
                return Err(Error::contract(
                    "batch",
                    format!("stack shape {:?} differs from {shape:?}", st.input.shape()),
                ));
            }
            input.extend_from_slice(st.input.data());
            labels.extend_from_slice(&st.center_labels);
            skull.extend_from_slice(&st.center_skull);
            presence.extend(st.presence.iter().map(|&p| if p { 1.0 } else { 0.0 }));
        }
        let mut full = vec![stacks.len()];
        full.extend_from_slice(&shape);
        Ok(Batch {
            input: Tensor::new(full, input)?,
            labels,
            skull,
            presence,
        })
    }
}
