//! Case layout, intensity normalization, and the procedural phantom dataset.
//!
//! A case directory holds `flair.tnsr`, `t1.tnsr`, `t1c.tnsr`, `t2.tnsr`
//! (2D float32), `labels.tnsr` (2D uint8, raw codes 0-4) and a `meta.txt`
//! of `key=value` lines (`case_id`, `grade`, `height`, `width`).
//!
//! Raw label coding: 1 = necrosis, 2 = edema, 3 = non-enhancing tumor,
//! 4 = enhancing tumor, 0 = everything else. Code 5 (non-tumor brain) never
//! appears on disk; it exists only in derived semantic maps.

use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, Ix2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::rng::derive_rng;
use crate::tensor::{read_tensor, write_tensor, Tensor, TensorError};

pub const MODALITY_NAMES: [&str; 4] = ["flair", "t1", "t1c", "t2"];
/// Highest raw label code; 5 is reserved for semantic maps.
pub const MAX_RAW_LABEL: u8 = 4;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing modality file \"{name}\" in {dir}")]
    MissingModality { name: String, dir: String },
    #[error("invalid raw label {code} (raw cases use 0-4; code 5 exists only in semantic maps)")]
    InvalidRawLabel { code: u8 },
    #[error("shape mismatch: {name} is {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("{name} has dtype {found}, expected {expected}")]
    DtypeMismatch {
        name: String,
        found: &'static str,
        expected: &'static str,
    },
    #[error("malformed meta.txt: {reason}")]
    BadMeta { reason: String },
    #[error("phantom dimensions {height}x{width} too small: nested tumor structures need at least 32x32")]
    PhantomTooSmall { height: usize, width: usize },
    #[error("invalid phantom config: {reason}")]
    BadPhantomConfig { reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Tumor grade of a case; phantom cases carry their own marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grade {
    HG,
    LG,
    Phantom,
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Grade::HG => write!(f, "HG"),
            Grade::LG => write!(f, "LG"),
            Grade::Phantom => write!(f, "phantom"),
        }
    }
}

impl Grade {
    fn parse(s: &str) -> Result<Self, DatasetError> {
        match s {
            "HG" => Ok(Grade::HG),
            "LG" => Ok(Grade::LG),
            "phantom" => Ok(Grade::Phantom),
            other => Err(DatasetError::BadMeta {
                reason: format!("unknown grade \"{other}\""),
            }),
        }
    }
}

/// One subject: four registered modalities plus the raw label map.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalCase {
    pub case_id: String,
    pub grade: Grade,
    pub flair: Array2<f32>,
    pub t1: Array2<f32>,
    pub t1c: Array2<f32>,
    pub t2: Array2<f32>,
    pub labels: Array2<u8>,
}

impl MultimodalCase {
    pub fn new(
        case_id: String,
        grade: Grade,
        flair: Array2<f32>,
        t1: Array2<f32>,
        t1c: Array2<f32>,
        t2: Array2<f32>,
        labels: Array2<u8>,
    ) -> Result<Self, DatasetError> {
        let expected = flair.dim();
        for (name, arr) in [("t1", &t1), ("t1c", &t1c), ("t2", &t2)] {
            if arr.dim() != expected {
                return Err(DatasetError::ShapeMismatch {
                    name: name.to_string(),
                    found: vec![arr.dim().0, arr.dim().1],
                    expected: vec![expected.0, expected.1],
                });
            }
        }
        if labels.dim() != expected {
            return Err(DatasetError::ShapeMismatch {
                name: "labels".to_string(),
                found: vec![labels.dim().0, labels.dim().1],
                expected: vec![expected.0, expected.1],
            });
        }
        if let Some(&code) = labels.iter().find(|&&c| c > MAX_RAW_LABEL) {
            return Err(DatasetError::InvalidRawLabel { code });
        }
        Ok(MultimodalCase {
            case_id,
            grade,
            flair,
            t1,
            t1c,
            t2,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.flair.dim().0
    }

    pub fn width(&self) -> usize {
        self.flair.dim().1
    }

    /// Modalities in the fixed channel order used everywhere downstream.
    pub fn modalities(&self) -> [(&'static str, &Array2<f32>); 4] {
        [
            ("flair", &self.flair),
            ("t1", &self.t1),
            ("t1c", &self.t1c),
            ("t2", &self.t2),
        ]
    }

    /// Stack modalities into a 4xHxW image (FLAIR, T1, T1c, T2).
    pub fn image_stack(&self) -> Array3<f32> {
        let (h, w) = self.flair.dim();
        let mut out = Array3::zeros((4, h, w));
        for (c, (_, m)) in self.modalities().into_iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), c).assign(m);
        }
        out
    }

    /// Pixels with signal in any modality; skull-stripped images are zero
    /// outside the head, so this is the brain support mask.
    pub fn brain_mask(&self) -> Array2<bool> {
        let (h, w) = self.flair.dim();
        Array2::from_shape_fn((h, w), |(i, j)| {
            self.flair[(i, j)] != 0.0
                || self.t1[(i, j)] != 0.0
                || self.t1c[(i, j)] != 0.0
                || self.t2[(i, j)] != 0.0
        })
    }
}

/// Shift/scale an image to zero mean and unit variance (population std over
/// all pixels). A constant image has no meaningful z-score; it maps to zeros
/// with a warning rather than erroring, so batch pipelines survive blank
/// slices.
pub fn zscore_normalize(image: &Array2<f32>) -> Array2<f32> {
    const EPS: f64 = 1e-8;
    let n = image.len() as f64;
    let mean = image.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = image
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if std < EPS {
        eprintln!("warning: z-score of a constant image; returning zeros");
        return Array2::zeros(image.dim());
    }
    image.mapv(|v| ((v as f64 - mean) / std) as f32)
}

/// Parameters of the procedural phantom generator.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub num_cases: usize,
    pub height: usize,
    pub width: usize,
    pub tumor_probability: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            num_cases: 50,
            height: 64,
            width: 64,
            tumor_probability: 0.9,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

/// Per-tissue mean intensities (FLAIR, T1, T1c, T2), chosen so every tumor
/// subclass is separable in at least one modality: edema is bright in FLAIR
/// and T2, enhancing tumor is bright in T1c, necrosis is dark in T1c.
const TISSUE_MEANS: [(u8, [f32; 4]); 5] = [
    (0, [0.35, 0.45, 0.45, 0.35]), // non-tumor brain (raw code 0 inside brain)
    (1, [0.45, 0.25, 0.15, 0.55]), // necrosis
    (2, [0.75, 0.35, 0.40, 0.75]), // edema
    (3, [0.55, 0.40, 0.45, 0.50]), // non-enhancing tumor
    (4, [0.55, 0.40, 0.85, 0.50]), // enhancing tumor
];

fn tissue_mean(code: u8, modality: usize) -> f32 {
    TISSUE_MEANS
        .iter()
        .find(|(c, _)| *c == code)
        .map(|(_, m)| m[modality])
        .expect("label codes are 0-4 by construction")
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 - self.cy) / self.ry;
        let dx = (x as f64 - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }
}

fn disk_contains(cy: f64, cx: f64, r: f64, y: usize, x: usize) -> bool {
    let dy = y as f64 - cy;
    let dx = x as f64 - cx;
    dy * dy + dx * dx <= r * r
}

/// Deterministic synthetic dataset: elliptical "brain" with fixed per-tissue
/// contrasts and, with probability `tumor_probability`, a nested tumor —
/// an edema region containing necrosis / non-enhancing / enhancing sub-blobs.
pub fn generate_phantom_dataset(cfg: &PhantomConfig) -> Result<Vec<MultimodalCase>, DatasetError> {
    if cfg.height < 32 || cfg.width < 32 {
        return Err(DatasetError::PhantomTooSmall {
            height: cfg.height,
            width: cfg.width,
        });
    }
    if !(0.0..=1.0).contains(&cfg.tumor_probability) {
        return Err(DatasetError::BadPhantomConfig {
            reason: format!("tumor_probability {} outside [0,1]", cfg.tumor_probability),
        });
    }
    if cfg.noise_std < 0.0 || !cfg.noise_std.is_finite() {
        return Err(DatasetError::BadPhantomConfig {
            reason: format!("noise_std {} must be a non-negative float", cfg.noise_std),
        });
    }
    if cfg.num_cases == 0 {
        return Err(DatasetError::BadPhantomConfig {
            reason: "num_cases must be positive".into(),
        });
    }

    let (h, w) = (cfg.height, cfg.width);
    let mut cases = Vec::with_capacity(cfg.num_cases);
    for idx in 0..cfg.num_cases {
        let mut rng = derive_rng(cfg.seed, "phantom.case", idx as u64);

        let brain = Ellipse {
            cy: h as f64 * (0.5 + rng.random_range(-0.02..0.02)),
            cx: w as f64 * (0.5 + rng.random_range(-0.02..0.02)),
            ry: h as f64 * 0.40 * rng.random_range(0.92..1.0),
            rx: w as f64 * 0.40 * rng.random_range(0.92..1.0),
        };
        let has_tumor = rng.random_bool(cfg.tumor_probability);

        let mut labels = Array2::<u8>::zeros((h, w));
        if has_tumor {
            // Tumor center stays well inside the brain so all sub-blobs fit.
            let ty = brain.cy + 0.30 * brain.ry * rng.random_range(-1.0..1.0);
            let tx = brain.cx + 0.30 * brain.rx * rng.random_range(-1.0..1.0);
            let edema = Ellipse {
                cy: ty,
                cx: tx,
                ry: brain.ry * rng.random_range(0.30..0.40),
                rx: brain.rx * rng.random_range(0.30..0.40),
            };
            let blob_r = (0.30 * edema.ry.min(edema.rx)).max(2.0);
            // Sub-blob centers 120 degrees apart, far enough to not overlap.
            let dist = (2.2 * blob_r).max(0.45 * edema.ry.min(edema.rx));
            let theta0 = rng.random_range(0.0..std::f64::consts::TAU);
            let blob_codes: [u8; 3] = [1, 3, 4]; // necrosis, non-enhancing, enhancing
            let blobs: Vec<(f64, f64, u8)> = blob_codes
                .iter()
                .enumerate()
                .map(|(k, &code)| {
                    let th = theta0 + k as f64 * std::f64::consts::TAU / 3.0;
                    (ty + dist * th.sin(), tx + dist * th.cos(), code)
                })
                .collect();

            for y in 0..h {
                for x in 0..w {
                    if !brain.contains(y, x) {
                        continue;
                    }
                    // Edema covers its ellipse plus every sub-blob, so each
                    // subclass is always surrounded by (or adjacent to) edema.
                    let in_blob = blobs
                        .iter()
                        .find(|(by, bx, _)| disk_contains(*by, *bx, blob_r, y, x));
                    if let Some((_, _, code)) = in_blob {
                        labels[(y, x)] = *code;
                    } else if edema.contains(y, x) {
                        labels[(y, x)] = 2;
                    }
                }
            }
        }

        let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).unwrap();
        let mut planes: Vec<Array2<f32>> = Vec::with_capacity(4);
        for modality in 0..4 {
            let mut img = Array2::<f32>::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    if brain.contains(y, x) {
                        let mut v = tissue_mean(labels[(y, x)], modality) as f64;
                        if cfg.noise_std > 0.0 {
                            v += noise.sample(&mut rng);
                        }
                        // Keep brain tissue strictly positive: exact zero is
                        // reserved for background (the brain-mask rule).
                        img[(y, x)] = v.clamp(0.02, 1.0) as f32;
                    }
                }
            }
            planes.push(img);
        }
        let t2 = planes.pop().unwrap();
        let t1c = planes.pop().unwrap();
        let t1 = planes.pop().unwrap();
        let flair = planes.pop().unwrap();

        cases.push(MultimodalCase::new(
            format!("phantom_{idx:04}"),
            Grade::Phantom,
            flair,
            t1,
            t1c,
            t2,
            labels,
        )?);
    }
    Ok(cases)
}

fn as_2d_f32(t: Tensor, name: &str) -> Result<Array2<f32>, DatasetError> {
    match t {
        Tensor::F32(a) => a
            .into_dimensionality::<Ix2>()
            .map_err(|_| DatasetError::ShapeMismatch {
                name: name.to_string(),
                found: vec![],
                expected: vec![],
            }),
        Tensor::U8(_) => Err(DatasetError::DtypeMismatch {
            name: name.to_string(),
            found: "uint8",
            expected: "float32",
        }),
    }
}

/// Write a case directory (tensors + meta.txt). Creates the directory.
pub fn save_case(case: &MultimodalCase, dir: impl AsRef<Path>) -> Result<(), DatasetError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    for (name, img) in case.modalities() {
        let t = Tensor::F32(img.clone().into_dyn());
        write_tensor(&t, dir.join(format!("{name}.tnsr")))?;
    }
    write_tensor(
        &Tensor::U8(case.labels.clone().into_dyn()),
        dir.join("labels.tnsr"),
    )?;
    let meta = format!(
        "case_id={}\ngrade={}\nheight={}\nwidth={}\n",
        case.case_id,
        case.grade,
        case.height(),
        case.width()
    );
    let meta_path = dir.join("meta.txt");
    fs::write(&meta_path, meta).map_err(|source| DatasetError::Io {
        path: meta_path.display().to_string(),
        source,
    })?;
    Ok(())
}

fn read_meta(dir: &Path) -> Result<(String, Grade, usize, usize), DatasetError> {
    let path = dir.join("meta.txt");
    let text = fs::read_to_string(&path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut case_id = None;
    let mut grade = None;
    let mut height = None;
    let mut width = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| DatasetError::BadMeta {
            reason: format!("line \"{line}\" is not key=value"),
        })?;
        match key {
            "case_id" => case_id = Some(value.to_string()),
            "grade" => grade = Some(Grade::parse(value)?),
            "height" => {
                height = Some(value.parse::<usize>().map_err(|_| DatasetError::BadMeta {
                    reason: format!("height \"{value}\" is not an integer"),
                })?)
            }
            "width" => {
                width = Some(value.parse::<usize>().map_err(|_| DatasetError::BadMeta {
                    reason: format!("width \"{value}\" is not an integer"),
                })?)
            }
            other => {
                return Err(DatasetError::BadMeta {
                    reason: format!("unknown key \"{other}\""),
                })
            }
        }
    }
    match (case_id, grade, height, width) {
        (Some(c), Some(g), Some(h), Some(w)) => Ok((c, g, h, w)),
        _ => Err(DatasetError::BadMeta {
            reason: "missing one of case_id/grade/height/width".into(),
        }),
    }
}

/// Load a case directory, validating dtypes, shapes against meta.txt, and
/// raw label codes.
pub fn load_case(dir: impl AsRef<Path>) -> Result<MultimodalCase, DatasetError> {
    let dir = dir.as_ref();
    let (case_id, grade, height, width) = read_meta(dir)?;

    let mut planes = Vec::with_capacity(4);
    for name in MODALITY_NAMES {
        let path = dir.join(format!("{name}.tnsr"));
        if !path.is_file() {
            return Err(DatasetError::MissingModality {
                name: name.to_string(),
                dir: dir.display().to_string(),
            });
        }
        let img = as_2d_f32(read_tensor(&path)?, name)?;
        if img.dim() != (height, width) {
            return Err(DatasetError::ShapeMismatch {
                name: name.to_string(),
                found: vec![img.dim().0, img.dim().1],
                expected: vec![height, width],
            });
        }
        planes.push(img);
    }

    let labels_path = dir.join("labels.tnsr");
    if !labels_path.is_file() {
        return Err(DatasetError::MissingModality {
            name: "labels".to_string(),
            dir: dir.display().to_string(),
        });
    }
    let labels: ArrayD<u8> = match read_tensor(&labels_path)? {
        Tensor::U8(a) => a,
        Tensor::F32(_) => {
            return Err(DatasetError::DtypeMismatch {
                name: "labels".to_string(),
                found: "float32",
                expected: "uint8",
            })
        }
    };
    let labels = labels
        .into_dimensionality::<Ix2>()
        .map_err(|_| DatasetError::ShapeMismatch {
            name: "labels".to_string(),
            found: vec![],
            expected: vec![height, width],
        })?;
    if labels.dim() != (height, width) {
        return Err(DatasetError::ShapeMismatch {
            name: "labels".to_string(),
            found: vec![labels.dim().0, labels.dim().1],
            expected: vec![height, width],
        });
    }

    let t2 = planes.pop().unwrap();
    let t1c = planes.pop().unwrap();
    let t1 = planes.pop().unwrap();
    let flair = planes.pop().unwrap();
    MultimodalCase::new(case_id, grade, flair, t1, t1c, t2, labels)
}

/// Deterministic train/val/test split over case indices.
pub fn split_cases(
    num_cases: usize,
    val_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut indices: Vec<usize> = (0..num_cases).collect();
    let mut rng = derive_rng(seed, "dataset.split", 0);
    indices.shuffle(&mut rng);
    let clamp_count = |frac: f64| -> usize {
        if frac <= 0.0 || num_cases == 0 {
            0
        } else {
            ((num_cases as f64 * frac).round() as usize).clamp(1, num_cases)
        }
    };
    let n_test = clamp_count(test_fraction);
    let n_val = clamp_count(val_fraction).min(num_cases.saturating_sub(n_test));
    let test = indices[..n_test].to_vec();
    let val = indices[n_test..n_test + n_val].to_vec();
    let train = indices[n_test + n_val..].to_vec();
    (train, val, test)
}
