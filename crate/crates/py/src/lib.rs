//! Python bindings for the core pipeline: phantom data generation, label
//! geometry (boundaries, elastic deformation), intensity normalization,
//! overlap metrics, and the `.tnsr` tensor file format.
//!
//! Images and masks cross the boundary as flat row-major lists plus explicit
//! `(height, width)` so the module needs no numpy dependency; everything
//! round-trips losslessly through plain Python types.

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use tumorsynth::dataset::{self, MultimodalCase, PhantomConfig};
use tumorsynth::evaluation::{self, Region};
use tumorsynth::labels::{self, DeformParams, SemanticLabelMap};
use tumorsynth::rng;
use tumorsynth::tensor::{read_tensor, write_tensor, Tensor};

fn to_array2_f32(data: Vec<f32>, height: usize, width: usize) -> PyResult<Array2<f32>> {
    Array2::from_shape_vec((height, width), data)
        .map_err(|_| PyValueError::new_err("data length does not match height × width"))
}

fn to_array2_u8(data: Vec<u8>, height: usize, width: usize) -> PyResult<Array2<u8>> {
    Array2::from_shape_vec((height, width), data)
        .map_err(|_| PyValueError::new_err("data length does not match height × width"))
}

fn to_array2_bool(data: Vec<bool>, height: usize, width: usize) -> PyResult<Array2<bool>> {
    Array2::from_shape_vec((height, width), data)
        .map_err(|_| PyValueError::new_err("data length does not match height × width"))
}

fn flat<T: Clone>(a: &Array2<T>) -> Vec<T> {
    a.iter().cloned().collect()
}

/// One synthetic subject: four modality planes, raw labels (0–4), and the
/// derived semantic codes (tumor 1–4, brain 5, background 0).
#[pyclass]
struct PhantomCase {
    #[pyo3(get)]
    case_id: String,
    #[pyo3(get)]
    grade: String,
    #[pyo3(get)]
    height: usize,
    #[pyo3(get)]
    width: usize,
    #[pyo3(get)]
    flair: Vec<f32>,
    #[pyo3(get)]
    t1: Vec<f32>,
    #[pyo3(get)]
    t1c: Vec<f32>,
    #[pyo3(get)]
    t2: Vec<f32>,
    #[pyo3(get)]
    labels: Vec<u8>,
    #[pyo3(get)]
    semantic: Vec<u8>,
}

impl PhantomCase {
    fn from_case(case: &MultimodalCase) -> Self {
        let semantic = labels::build_semantic_label_map(case);
        PhantomCase {
            case_id: case.case_id.clone(),
            grade: case.grade.to_string(),
            height: case.height(),
            width: case.width(),
            flair: flat(&case.flair),
            t1: flat(&case.t1),
            t1c: flat(&case.t1c),
            t2: flat(&case.t2),
            labels: flat(&case.labels),
            semantic: flat(&semantic.codes),
        }
    }
}

/// Generate `num_cases` procedural phantom subjects (deterministic in `seed`).
#[pyfunction]
#[pyo3(signature = (num_cases, height, width, tumor_probability, noise_std, seed))]
fn generate_phantom_cases(
    num_cases: usize,
    height: usize,
    width: usize,
    tumor_probability: f64,
    noise_std: f64,
    seed: u64,
) -> PyResult<Vec<PhantomCase>> {
    let cfg = PhantomConfig {
        num_cases,
        height,
        width,
        tumor_probability,
        noise_std,
        seed,
    };
    let cases =
        dataset::generate_phantom_dataset(&cfg).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(cases.iter().map(PhantomCase::from_case).collect())
}

/// Shift/scale an image to zero mean and unit population variance.
#[pyfunction]
fn zscore_normalize(image: Vec<f32>, height: usize, width: usize) -> PyResult<Vec<f32>> {
    let img = to_array2_f32(image, height, width)?;
    Ok(flat(&dataset::zscore_normalize(&img)))
}

/// Dice overlap of two boolean masks (both empty scores 1.0).
#[pyfunction]
fn dice(pred: Vec<bool>, gt: Vec<bool>, height: usize, width: usize) -> PyResult<f64> {
    let p = to_array2_bool(pred, height, width)?;
    let g = to_array2_bool(gt, height, width)?;
    Ok(evaluation::dice(&p, &g))
}

/// Fraction of predicted pixels that are correct (empty prediction scores 0.0
/// unless the ground truth is empty too).
#[pyfunction]
fn precision(pred: Vec<bool>, gt: Vec<bool>, height: usize, width: usize) -> PyResult<f64> {
    let p = to_array2_bool(pred, height, width)?;
    let g = to_array2_bool(gt, height, width)?;
    Ok(evaluation::precision(&p, &g))
}

/// Fraction of ground-truth pixels recovered by the prediction.
#[pyfunction]
fn sensitivity(pred: Vec<bool>, gt: Vec<bool>, height: usize, width: usize) -> PyResult<f64> {
    let p = to_array2_bool(pred, height, width)?;
    let g = to_array2_bool(gt, height, width)?;
    Ok(evaluation::sensitivity(&p, &g))
}

/// Boolean mask of one evaluation region ("complete", "core", or
/// "enhancing") from raw labels 0–4.
#[pyfunction]
fn region_mask(
    labels: Vec<u8>,
    height: usize,
    width: usize,
    region: &str,
) -> PyResult<Vec<bool>> {
    let reg = match region {
        "complete" => Region::Complete,
        "core" => Region::Core,
        "enhancing" => Region::Enhancing,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown region \"{other}\" (expected complete|core|enhancing)"
            )))
        }
    };
    let l = to_array2_u8(labels, height, width)?;
    Ok(flat(&evaluation::region_mask(&l, reg)))
}

/// 0/1 mask of the complete tumor (semantic codes 1–4).
#[pyfunction]
fn complete_tumor_mask(semantic: Vec<u8>, height: usize, width: usize) -> PyResult<Vec<u8>> {
    let m = SemanticLabelMap::new(to_array2_u8(semantic, height, width)?);
    Ok(flat(&labels::complete_tumor_mask(&m)))
}

/// Inner one-pixel contour of a 0/1 mask, as 0.0/1.0 regression targets.
#[pyfunction]
fn extract_boundary(mask: Vec<u8>, height: usize, width: usize) -> PyResult<Vec<f32>> {
    let m = to_array2_u8(mask, height, width)?;
    Ok(flat(&labels::extract_boundary(&m).mask))
}

/// Elastically deform semantic codes with a smoothed random displacement
/// field (`alpha` pixels of displacement, Gaussian scale `sigma`); α = 0 is
/// the identity and deformation never invents codes absent from the source.
#[pyfunction]
fn elastic_deform_labels(
    semantic: Vec<u8>,
    height: usize,
    width: usize,
    alpha: f64,
    sigma: f64,
    seed: u64,
) -> PyResult<Vec<u8>> {
    let m = SemanticLabelMap::new(to_array2_u8(semantic, height, width)?);
    let out = labels::elastic_deform_labels(&m, &DeformParams { alpha, sigma, seed });
    Ok(flat(&out.codes))
}

/// Derive a stream seed from a master seed and a purpose label (the same
/// derivation every pipeline stage uses).
#[pyfunction]
fn derive_seed(master_seed: u64, purpose: &str, index: u64) -> u64 {
    rng::derive_seed(master_seed, purpose, index)
}

/// Write a float tensor to a `.tnsr` file.
#[pyfunction]
fn write_tensor_f32(path: &str, shape: Vec<usize>, data: Vec<f32>) -> PyResult<()> {
    let arr = ndarray::ArrayD::from_shape_vec(shape, data)
        .map_err(|_| PyValueError::new_err("data length does not match shape"))?;
    write_tensor(&Tensor::F32(arr), path).map_err(|e| PyIOError::new_err(e.to_string()))
}

/// Read a float tensor from a `.tnsr` file; returns `(shape, data)`.
#[pyfunction]
fn read_tensor_f32(path: &str) -> PyResult<(Vec<usize>, Vec<f32>)> {
    let t = read_tensor(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let arr = t
        .as_f32()
        .ok_or_else(|| PyValueError::new_err("tensor is not f32"))?;
    Ok((arr.shape().to_vec(), arr.iter().cloned().collect()))
}

/// Write a byte tensor (e.g. label maps) to a `.tnsr` file.
#[pyfunction]
fn write_tensor_u8(path: &str, shape: Vec<usize>, data: Vec<u8>) -> PyResult<()> {
    let arr = ndarray::ArrayD::from_shape_vec(shape, data)
        .map_err(|_| PyValueError::new_err("data length does not match shape"))?;
    write_tensor(&Tensor::U8(arr), path).map_err(|e| PyIOError::new_err(e.to_string()))
}

/// Read a byte tensor from a `.tnsr` file; returns `(shape, data)`.
#[pyfunction]
fn read_tensor_u8(path: &str) -> PyResult<(Vec<usize>, Vec<u8>)> {
    let t = read_tensor(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let arr = t
        .as_u8()
        .ok_or_else(|| PyValueError::new_err("tensor is not u8"))?;
    Ok((arr.shape().to_vec(), arr.iter().cloned().collect()))
}

#[pymodule]
fn tumorsynth_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PhantomCase>()?;
    m.add_function(wrap_pyfunction!(generate_phantom_cases, m)?)?;
    m.add_function(wrap_pyfunction!(zscore_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(precision, m)?)?;
    m.add_function(wrap_pyfunction!(sensitivity, m)?)?;
    m.add_function(wrap_pyfunction!(region_mask, m)?)?;
    m.add_function(wrap_pyfunction!(complete_tumor_mask, m)?)?;
    m.add_function(wrap_pyfunction!(extract_boundary, m)?)?;
    m.add_function(wrap_pyfunction!(elastic_deform_labels, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add_function(wrap_pyfunction!(write_tensor_f32, m)?)?;
    m.add_function(wrap_pyfunction!(read_tensor_f32, m)?)?;
    m.add_function(wrap_pyfunction!(write_tensor_u8, m)?)?;
    m.add_function(wrap_pyfunction!(read_tensor_u8, m)?)?;
    Ok(())
}
