//! Hyperspectral cube and label-raster handling: container IO, normalization,
//! patch extraction, train/test splits, and synthetic scene generation.
//!
//! Container format: a single JSON header line
//! `{"magic":"HSC1","H":h,"W":w,"C":c,"dtype":"f32","order":"HWC"}` followed
//! by raw little-endian payload in row-major H,W,C order. Cubes use `f32`
//! payloads, label rasters use `i32` with `-1` marking unlabeled pixels.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use thiserror::Error;

use crate::rng::{substream, SPLIT, SYNTH};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload size mismatch: expected {expected} bytes, found {actual}")]
    PayloadSizeMismatch { expected: usize, actual: usize },
    #[error("non-finite value at payload offset {offset}")]
    NonFinite { offset: usize },
    #[error("label {value} at pixel {pixel} outside [-1, {num_classes})")]
    LabelOutOfRange {
        value: i32,
        pixel: usize,
        num_classes: usize,
    },
    #[error("cube is constant; minmax normalization undefined")]
    ConstantCube,
    #[error("band {band} is constant; standardize normalization undefined")]
    ConstantBand { band: usize },
    #[error("patch size {p} must be odd")]
    EvenPatchSize { p: usize },
    #[error("patch center ({row}, {col}) outside {height}x{width} raster")]
    CenterOutOfRange {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },
    #[error("class {class} has {size} labeled pixels; too few to split")]
    ClassTooSmall { class: usize, size: usize },
    #[error("class {class} has no labeled pixels")]
    EmptyClass { class: usize },
    #[error("invalid split fraction {fraction}; need 0 < f < 1")]
    BadFraction { fraction: f64 },
    #[error("degenerate synthetic spec: {0}")]
    DegenerateSpec(String),
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// H×W×C reflectance raster. Values are kept as `f64` in memory and stored as
/// `f32` on disk; loaders reject non-finite payloads.
#[derive(Debug, Clone)]
pub struct HsiCube {
    pub values: Array3<f64>,
    pub band_wavelengths: Option<Vec<f64>>,
}

impl HsiCube {
    pub fn new(values: Array3<f64>) -> Result<Self, DataError> {
        let (h, w, c) = values.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(DataError::DegenerateSpec(format!(
                "cube dims {h}x{w}x{c} must all be >= 1"
            )));
        }
        if let Some((offset, _)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(DataError::NonFinite { offset });
        }
        Ok(HsiCube {
            values,
            band_wavelengths: None,
        })
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn bands(&self) -> usize {
        self.values.dim().2
    }
}

/// H×W class raster; `-1` marks unlabeled pixels, other values index into
/// `class_names`.
#[derive(Debug, Clone)]
pub struct LabelRaster {
    pub labels: Array2<i32>,
    pub class_names: Vec<String>,
}

impl LabelRaster {
    pub fn new(labels: Array2<i32>, class_names: Vec<String>) -> Result<Self, DataError> {
        let n = class_names.len();
        for (pixel, &v) in labels.iter().enumerate() {
            if v < -1 || v >= n as i32 {
                return Err(DataError::LabelOutOfRange {
                    value: v,
                    pixel,
                    num_classes: n,
                });
            }
        }
        Ok(LabelRaster {
            labels,
            class_names,
        })
    }

    pub fn height(&self) -> usize {
        self.labels.dim().0
    }

    pub fn width(&self) -> usize {
        self.labels.dim().1
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Linear indices (row * W + col) of all labeled pixels, ascending.
    pub fn labeled_indices(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &v)| v >= 0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn label_at(&self, pixel: usize) -> i32 {
        let w = self.width();
        self.labels[[pixel / w, pixel % w]]
    }
}

/// One P×P×C training instance centered on a pixel.
#[derive(Debug, Clone)]
pub struct Instance {
    pub patch: Array3<f64>,
    pub center: (usize, usize),
    pub label: Option<usize>,
}

/// How many training pixels to take from each class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitStrategy {
    /// Fraction of each class, rounded half-up, at least 1 and at most
    /// class size − 1.
    Fraction { fraction: f64 },
    /// Fixed count per class, capped at class size − 1.
    PerClassCount { count: usize },
}

/// Disjoint train/test partition of the labeled pixels.
#[derive(Debug, Clone)]
pub struct SampleSplit {
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub strategy: SplitStrategy,
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// Container IO
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ContainerHeader {
    magic: String,
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "W")]
    w: usize,
    #[serde(rename = "C")]
    c: usize,
    dtype: String,
    order: String,
}

const MAGIC: &str = "HSC1";

fn read_header<R: BufRead>(reader: &mut R, want_dtype: &str) -> Result<ContainerHeader, DataError> {
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header: ContainerHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| DataError::MalformedHeader(e.to_string()))?;
    if header.magic != MAGIC {
        return Err(DataError::MalformedHeader(format!(
            "bad magic {:?}",
            header.magic
        )));
    }
    if header.dtype != want_dtype {
        return Err(DataError::MalformedHeader(format!(
            "dtype {:?}, expected {:?}",
            header.dtype, want_dtype
        )));
    }
    if header.order != "HWC" {
        return Err(DataError::MalformedHeader(format!(
            "order {:?}, expected \"HWC\"",
            header.order
        )));
    }
    if header.h == 0 || header.w == 0 || header.c == 0 {
        return Err(DataError::MalformedHeader(format!(
            "dims {}x{}x{} must all be >= 1",
            header.h, header.w, header.c
        )));
    }
    Ok(header)
}

fn write_header<W: Write>(
    out: &mut W,
    h: usize,
    w: usize,
    c: usize,
    dtype: &str,
) -> Result<(), DataError> {
    let header = ContainerHeader {
        magic: MAGIC.to_string(),
        h,
        w,
        c,
        dtype: dtype.to_string(),
        order: "HWC".to_string(),
    };
    let line = serde_json::to_string(&header).expect("header serializes");
    out.write_all(line.as_bytes())?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Load a reflectance cube from the HSC1 container.
pub fn load_cube(path: &Path) -> Result<HsiCube, DataError> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let header = read_header(&mut reader, "f32")?;
    let count = header.h * header.w * header.c;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    if payload.len() != count * 4 {
        return Err(DataError::PayloadSizeMismatch {
            expected: count * 4,
            actual: payload.len(),
        });
    }
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        let v = f32::from_le_bytes(payload[i * 4..i * 4 + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(DataError::NonFinite { offset: i });
        }
        values.push(v as f64);
    }
    let array = Array3::from_shape_vec((header.h, header.w, header.c), values)
        .expect("shape matches payload length");
    HsiCube::new(array)
}

/// Save a cube in the HSC1 container; values are cast to `f32`.
pub fn save_cube(cube: &HsiCube, path: &Path) -> Result<(), DataError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut out, cube.height(), cube.width(), cube.bands(), "f32")?;
    let mut bytes = Vec::with_capacity(cube.values.len() * 4);
    for &v in cube.values.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&bytes)?;
    Ok(())
}

/// Load a label raster (dtype i32, C = 1) with its class names taken from a
/// sidecar field-free convention: callers supply names separately when known.
pub fn load_labels(path: &Path, class_names: Vec<String>) -> Result<LabelRaster, DataError> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let header = read_header(&mut reader, "i32")?;
    if header.c != 1 {
        return Err(DataError::MalformedHeader(format!(
            "label raster must have C=1, got {}",
            header.c
        )));
    }
    let count = header.h * header.w;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    if payload.len() != count * 4 {
        return Err(DataError::PayloadSizeMismatch {
            expected: count * 4,
            actual: payload.len(),
        });
    }
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        values.push(i32::from_le_bytes(payload[i * 4..i * 4 + 4].try_into().unwrap()));
    }
    let labels = Array2::from_shape_vec((header.h, header.w), values)
        .expect("shape matches payload length");
    let names = if class_names.is_empty() {
        let n = labels.iter().copied().max().unwrap_or(-1).max(-1) + 1;
        (0..n).map(|k| format!("class-{k}")).collect()
    } else {
        class_names
    };
    LabelRaster::new(labels, names)
}

pub fn save_labels(raster: &LabelRaster, path: &Path) -> Result<(), DataError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut out, raster.height(), raster.width(), 1, "i32")?;
    let mut bytes = Vec::with_capacity(raster.labels.len() * 4);
    for &v in raster.labels.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&bytes)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeMode {
    Minmax,
    Standardize,
}

/// Minmax maps the global min/max to [0, 1]; standardize gives each band zero
/// mean and unit (population) standard deviation.
pub fn normalize_cube(cube: &HsiCube, mode: NormalizeMode) -> Result<HsiCube, DataError> {
    let mut out = cube.clone();
    match mode {
        NormalizeMode::Minmax => {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &v in cube.values.iter() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi <= lo {
                return Err(DataError::ConstantCube);
            }
            let scale = 1.0 / (hi - lo);
            out.values.mapv_inplace(|v| (v - lo) * scale);
        }
        NormalizeMode::Standardize => {
            let (h, w, c) = cube.values.dim();
            let n = (h * w) as f64;
            for band in 0..c {
                let mut mean = 0.0;
                for &v in cube.values.slice(ndarray::s![.., .., band]).iter() {
                    mean += v;
                }
                mean /= n;
                let mut var = 0.0;
                for &v in cube.values.slice(ndarray::s![.., .., band]).iter() {
                    var += (v - mean) * (v - mean);
                }
                var /= n;
                if var == 0.0 {
                    return Err(DataError::ConstantBand { band });
                }
                let inv = 1.0 / var.sqrt();
                out.values
                    .slice_mut(ndarray::s![.., .., band])
                    .mapv_inplace(|v| (v - mean) * inv);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Patch extraction
// ---------------------------------------------------------------------------

/// Reflect an out-of-range index back into [0, n) without repeating the edge
/// sample (numpy `reflect` convention).
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        } else {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

/// Extract P×P×C patches centered on the given linear pixel indices, with
/// reflect padding at the scene borders.
pub fn extract_patches(
    cube: &HsiCube,
    labels: Option<&LabelRaster>,
    centers: &[usize],
    p: usize,
) -> Result<Vec<Instance>, DataError> {
    if p % 2 == 0 {
        return Err(DataError::EvenPatchSize { p });
    }
    let (h, w, c) = cube.values.dim();
    let half = (p / 2) as isize;
    let mut out = Vec::with_capacity(centers.len());
    for &pixel in centers {
        let row = pixel / w;
        let col = pixel % w;
        if row >= h || col >= w {
            return Err(DataError::CenterOutOfRange {
                row,
                col,
                height: h,
                width: w,
            });
        }
        let mut patch = Array3::<f64>::zeros((p, p, c));
        for dy in -half..=half {
            let sy = reflect_index(row as isize + dy, h);
            for dx in -half..=half {
                let sx = reflect_index(col as isize + dx, w);
                for band in 0..c {
                    patch[[(dy + half) as usize, (dx + half) as usize, band]] =
                        cube.values[[sy, sx, band]];
                }
            }
        }
        let label = labels.and_then(|l| {
            let v = l.labels[[row, col]];
            (v >= 0).then_some(v as usize)
        });
        out.push(Instance {
            patch,
            center: (row, col),
            label,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Train/test splits
// ---------------------------------------------------------------------------

/// Deterministic per-class split of the labeled pixels.
pub fn split_samples(
    labels: &LabelRaster,
    strategy: SplitStrategy,
    seed: u64,
) -> Result<SampleSplit, DataError> {
    if let SplitStrategy::Fraction { fraction } = strategy {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(DataError::BadFraction { fraction });
        }
    }
    let n_classes = labels.num_classes();
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    let w = labels.width();
    for ((r, c), &v) in labels.labels.indexed_iter() {
        if v >= 0 {
            per_class[v as usize].push(r * w + c);
        }
    }
    let mut rng = substream(seed, SPLIT);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, pixels) in per_class.iter().enumerate() {
        let size = pixels.len();
        if size == 0 {
            return Err(DataError::EmptyClass { class });
        }
        if size < 2 {
            return Err(DataError::ClassTooSmall { class, size });
        }
        let want = match strategy {
            SplitStrategy::Fraction { fraction } => {
                // round half-up, at least one training pixel per class
                ((fraction * size as f64 + 0.5).floor() as usize).max(1)
            }
            SplitStrategy::PerClassCount { count } => count,
        };
        let take = want.min(size - 1);
        let mut shuffled = pixels.clone();
        shuffled.shuffle(&mut rng);
        train.extend_from_slice(&shuffled[..take]);
        test.extend_from_slice(&shuffled[take..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SampleSplit {
        train_indices: train,
        test_indices: test,
        strategy,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

/// Shape and noise level of a generated test scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub classes: usize,
    pub noise_sigma: f64,
}

/// Generate a fully labeled cube: N smooth endmember spectra, a Voronoi label
/// map, and per-pixel Gaussian noise. Values are rounded through `f32` so a
/// save/load round-trip is bit-identical.
///
/// The first two classes get well-separated parent spectra and are assigned
/// to the two cells sharing the longest border; every further class is a
/// spectral blend of the parents plus a small high-frequency signature, so
/// spatially pooled boundary patches of the parents genuinely resemble blend
/// classes and per-pixel spectra alone stay unambiguous.
pub fn synth_cube(spec: &SynthSpec, seed: u64) -> Result<(HsiCube, LabelRaster), DataError> {
    let SynthSpec {
        height: h,
        width: w,
        bands: c,
        classes: n,
        noise_sigma,
    } = *spec;
    if h == 0 || w == 0 || c == 0 || n == 0 {
        return Err(DataError::DegenerateSpec("zero dimension".into()));
    }
    if n > h * w {
        return Err(DataError::DegenerateSpec(format!(
            "{n} classes cannot tile {h}x{w} pixels"
        )));
    }
    if !(noise_sigma >= 0.0) {
        return Err(DataError::DegenerateSpec(format!(
            "noise sigma {noise_sigma} must be >= 0"
        )));
    }
    let mut rng = substream(seed, SYNTH);

    // Two smooth, well-separated parents.
    let mut parents = Array2::<f64>::zeros((2, c));
    for (k, base) in [(0usize, 0.35), (1usize, 0.65)] {
        let a1 = rng.gen_range(0.08..0.14);
        let a2 = rng.gen_range(0.04..0.08);
        let f1 = rng.gen_range(1..=3) as f64;
        let f2 = rng.gen_range(2..=5) as f64;
        let p1 = rng.gen_range(0.0..std::f64::consts::TAU);
        let p2 = rng.gen_range(0.0..std::f64::consts::TAU);
        for band in 0..c {
            let x = (band as f64 + 0.5) / c as f64;
            let v = base
                + a1 * (std::f64::consts::TAU * f1 * x + p1).sin()
                + a2 * (std::f64::consts::TAU * f2 * x + p2).sin();
            parents[[k, band]] = v.clamp(0.05, 0.95);
        }
    }
    let mut endmembers = Array2::<f64>::zeros((n, c));
    for k in 0..n.min(2) {
        endmembers.row_mut(k).assign(&parents.row(k));
    }
    for k in 2..n {
        // blend weight away from the midpoints already used
        let lambda = match k {
            2 => 0.5,
            _ => rng.gen_range(0.25..0.75),
        };
        let amp = 0.015;
        let freq = rng.gen_range(4..=7) as f64;
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for band in 0..c {
            let x = (band as f64 + 0.5) / c as f64;
            let blend = lambda * parents[[0, band]] + (1.0 - lambda) * parents[[1, band]];
            let delta = amp * (std::f64::consts::TAU * freq * x + phase).sin();
            endmembers[[k, band]] = (blend + delta).clamp(0.05, 0.95);
        }
    }

    // Voronoi partition around n distinct seed pixels; ties go to the lower
    // cell index, which keeps every cell convex and hence 4-connected.
    let mut cells: Vec<usize> = (0..h * w).collect();
    cells.shuffle(&mut rng);
    let seeds: Vec<(f64, f64)> = cells[..n]
        .iter()
        .map(|&pix| ((pix / w) as f64, (pix % w) as f64))
        .collect();
    let mut cell_of = Array2::<usize>::zeros((h, w));
    for r in 0..h {
        for col in 0..w {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (k, &(sr, sc)) in seeds.iter().enumerate() {
                let d = (r as f64 - sr).powi(2) + (col as f64 - sc).powi(2);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            cell_of[[r, col]] = best;
        }
    }

    // Assign the parent classes to the pair of cells with the longest shared
    // border so the mixture ambiguity is always present.
    let mut border = Array2::<usize>::zeros((n, n));
    for r in 0..h {
        for col in 0..w {
            let here = cell_of[[r, col]];
            if r + 1 < h {
                let below = cell_of[[r + 1, col]];
                if below != here {
                    border[[here.min(below), here.max(below)]] += 1;
                }
            }
            if col + 1 < w {
                let right = cell_of[[r, col + 1]];
                if right != here {
                    border[[here.min(right), here.max(right)]] += 1;
                }
            }
        }
    }
    let mut class_of_cell: Vec<usize> = (0..n).collect();
    if n >= 2 {
        let (mut pa, mut pb, mut best) = (0usize, 1.min(n - 1), 0usize);
        for i in 0..n {
            for j in i + 1..n {
                if border[[i, j]] > best {
                    best = border[[i, j]];
                    pa = i;
                    pb = j;
                }
            }
        }
        let mut next = 2usize;
        for (cell, slot) in class_of_cell.iter_mut().enumerate() {
            *slot = if cell == pa {
                0
            } else if cell == pb {
                1
            } else {
                let k = next;
                next += 1;
                k
            };
        }
    }
    let mut labels = Array2::<i32>::zeros((h, w));
    for r in 0..h {
        for col in 0..w {
            labels[[r, col]] = class_of_cell[cell_of[[r, col]]] as i32;
        }
    }

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut values = Array3::<f64>::zeros((h, w, c));
    for r in 0..h {
        for col in 0..w {
            let k = labels[[r, col]] as usize;
            for band in 0..c {
                let noise = if noise_sigma > 0.0 {
                    noise_sigma * normal.sample(&mut rng)
                } else {
                    0.0
                };
                values[[r, col, band]] = (endmembers[[k, band]] + noise) as f32 as f64;
            }
        }
    }

    let cube = HsiCube::new(values)?;
    let names = (0..n).map(|k| format!("class-{k}")).collect();
    let raster = LabelRaster::new(labels, names)?;
    Ok((cube, raster))
}

// ---------------------------------------------------------------------------
// Classification-map rendering
// ---------------------------------------------------------------------------

/// Fixed 24-bit palette for classification maps; class k uses entry k mod 22,
/// unlabeled (-1) pixels are black.
pub const CLASS_PALETTE: [[u8; 3]; 22] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
    [128, 128, 0],
    [255, 215, 180],
    [0, 0, 128],
    [128, 128, 128],
    [255, 255, 255],
    [100, 160, 60],
];

/// Write a binary P6 PPM image of a class raster using [`CLASS_PALETTE`].
pub fn write_class_map_ppm(labels: &Array2<i32>, path: &Path) -> Result<(), DataError> {
    let (h, w) = labels.dim();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let mut bytes = Vec::with_capacity(h * w * 3);
    for &v in labels.iter() {
        let rgb = if v < 0 {
            [0u8, 0, 0]
        } else {
            CLASS_PALETTE[v as usize % CLASS_PALETTE.len()]
        };
        bytes.extend_from_slice(&rgb);
    }
    out.write_all(&bytes)?;
    Ok(())
}
