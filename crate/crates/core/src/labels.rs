//! Semantic label maps and the operations that feed the generator:
//! boundary extraction, elastic deformation, one-hot encoding, and the
//! image/label pyramids.

use ndarray::{Array2, Array3};
use rand::Rng;
use thiserror::Error;

use crate::dataset::MultimodalCase;
use crate::rng::derive_rng;

/// Number of semantic classes (codes 0-5).
pub const NUM_SEMANTIC_CLASSES: usize = 6;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("downsample factor {factor} not in {{2,4,8}}")]
    BadFactor { factor: usize },
    #[error("spatial dims {height}x{width} not divisible by factor {factor}")]
    NotDivisible {
        height: usize,
        width: usize,
        factor: usize,
    },
}

/// Integer map with codes 1=necrosis, 2=edema, 3=non-enhancing tumor,
/// 4=enhancing tumor, 5=non-tumor brain, 0=background — exactly this coding
/// everywhere in the system.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticLabelMap {
    pub codes: Array2<u8>,
}

impl SemanticLabelMap {
    pub fn new(codes: Array2<u8>) -> Self {
        debug_assert!(codes.iter().all(|&c| (c as usize) < NUM_SEMANTIC_CLASSES));
        SemanticLabelMap { codes }
    }

    pub fn height(&self) -> usize {
        self.codes.dim().0
    }

    pub fn width(&self) -> usize {
        self.codes.dim().1
    }
}

/// Binary target for the boundary-regression branch: 1.0 exactly on the
/// inner one-pixel contour of the complete tumor.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryTarget {
    pub mask: Array2<f32>,
}

/// Elastic deformation parameters: a per-pixel uniform displacement field
/// smoothed by a Gaussian of scale `sigma` and scaled by `alpha` (pixels).
#[derive(Debug, Clone, PartialEq)]
pub struct DeformParams {
    pub alpha: f64,
    pub sigma: f64,
    pub seed: u64,
}

/// Semantic map from raw labels plus a brain mask: tumor codes 1-4 dominate,
/// code 5 marks brain tissue outside the tumor, 0 is background.
pub fn semantic_from_parts(raw_labels: &Array2<u8>, brain_mask: &Array2<bool>) -> SemanticLabelMap {
    let codes = ndarray::Zip::from(raw_labels)
        .and(brain_mask)
        .map_collect(|&code, &brain| if code != 0 { code } else if brain { 5 } else { 0 });
    SemanticLabelMap::new(codes)
}

/// Build the generator's conditioning map for a case. The brain mask is the
/// nonzero support of the (skull-stripped, un-normalized) modalities.
pub fn build_semantic_label_map(case: &MultimodalCase) -> SemanticLabelMap {
    semantic_from_parts(&case.labels, &case.brain_mask())
}

/// 1 where the semantic code is a tumor subclass {1,2,3,4}, else 0.
pub fn complete_tumor_mask(m: &SemanticLabelMap) -> Array2<u8> {
    m.codes.mapv(|c| u8::from((1..=4).contains(&c)))
}

/// Inner one-pixel contour: mask==1 and at least one 4-connected neighbor
/// is 0 (out-of-image counts as 0).
pub fn extract_boundary(mask: &Array2<u8>) -> BoundaryTarget {
    let (h, w) = mask.dim();
    let get = |y: isize, x: isize| -> u8 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0
        } else {
            mask[(y as usize, x as usize)]
        }
    };
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            if mask[(y, x)] == 0 {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            if get(yi - 1, xi) == 0 || get(yi + 1, xi) == 0 || get(yi, xi - 1) == 0 || get(yi, xi + 1) == 0
            {
                out[(y, x)] = 1.0;
            }
        }
    }
    BoundaryTarget { mask: out }
}

/// Normalized 1D Gaussian taps truncated at 3 sigma.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian smoothing with zero padding at the borders.
fn smooth(field: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let kernel = gaussian_kernel(sigma);
    let radius = kernel.len() / 2;
    let (h, w) = field.dim();
    let mut rows = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let sx = x as isize + i as isize - radius as isize;
                if sx >= 0 && (sx as usize) < w {
                    acc += kv * field[(y, sx as usize)];
                }
            }
            rows[(y, x)] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let sy = y as isize + i as isize - radius as isize;
                if sy >= 0 && (sy as usize) < h {
                    acc += kv * rows[(sy as usize, x)];
                }
            }
            out[(y, x)] = acc;
        }
    }
    out
}

/// Elastic deformation of an integer code map: smoothed uniform displacement
/// field, nearest-neighbor resampling (codes stay integral), out-of-image
/// samples take code 0. `alpha = 0` is exactly the identity.
pub fn elastic_deform_codes(codes: &Array2<u8>, p: &DeformParams) -> Array2<u8> {
    assert!(p.sigma > 0.0, "deformation sigma must be positive");
    if p.alpha == 0.0 {
        return codes.clone();
    }
    let (h, w) = codes.dim();
    let mut rng = derive_rng(p.seed, "deform.field", 0);
    let mut dy = Array2::<f64>::zeros((h, w));
    let mut dx = Array2::<f64>::zeros((h, w));
    // Draw row-major, y-axis first, so the field is a pure function of seed.
    for v in dy.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    for v in dx.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let dy = smooth(&dy, p.sigma).mapv(|v| v * p.alpha);
    let dx = smooth(&dx, p.sigma).mapv(|v| v * p.alpha);

    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let sy = (y as f64 + dy[(y, x)]).round() as isize;
            let sx = (x as f64 + dx[(y, x)]).round() as isize;
            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                out[(y, x)] = codes[(sy as usize, sx as usize)];
            }
        }
    }
    out
}

pub fn elastic_deform_labels(m: &SemanticLabelMap, p: &DeformParams) -> SemanticLabelMap {
    SemanticLabelMap::new(elastic_deform_codes(&m.codes, p))
}

/// One-hot encoding, 6 channels; channels sum to 1 at every pixel.
pub fn one_hot(m: &SemanticLabelMap) -> Array3<f32> {
    let (h, w) = m.codes.dim();
    let mut out = Array3::<f32>::zeros((NUM_SEMANTIC_CLASSES, h, w));
    for ((y, x), &c) in m.codes.indexed_iter() {
        out[(c as usize, y, x)] = 1.0;
    }
    out
}

/// Bilinear downsampling with aligned sampling: for integer factors this is
/// the mean over each factor-by-factor block, so constants are preserved and
/// outputs stay within the input range.
pub fn downsample_bilinear(img: &Array3<f32>, factor: usize) -> Result<Array3<f32>, LabelError> {
    if ![2, 4, 8].contains(&factor) {
        return Err(LabelError::BadFactor { factor });
    }
    let (c, h, w) = img.dim();
    if h % factor != 0 || w % factor != 0 {
        return Err(LabelError::NotDivisible {
            height: h,
            width: w,
            factor,
        });
    }
    let (ho, wo) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = Array3::<f32>::zeros((c, ho, wo));
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let mut acc = 0.0f64;
                for by in 0..factor {
                    for bx in 0..factor {
                        acc += img[(ch, y * factor + by, x * factor + bx)] as f64;
                    }
                }
                out[(ch, y, x)] = (acc * norm) as f32;
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor decimation by 2 with a fixed top-left sampling offset:
/// out[i,j] = in[2i, 2j]. Used to build the coarse generator's half-size
/// conditioning map; codes are preserved as integers.
pub fn downsample_labels_nearest(m: &SemanticLabelMap) -> SemanticLabelMap {
    let (h, w) = m.codes.dim();
    let codes = Array2::from_shape_fn((h / 2, w / 2), |(i, j)| m.codes[(2 * i, 2 * j)]);
    SemanticLabelMap::new(codes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_phantom_dataset, Grade, PhantomConfig};
    use proptest::prelude::*;

    fn phantom_case() -> MultimodalCase {
        let cfg = PhantomConfig {
            num_cases: 1,
            height: 32,
            width: 32,
            tumor_probability: 1.0,
            noise_std: 0.05,
            seed: 5,
        };
        generate_phantom_dataset(&cfg).unwrap().pop().unwrap()
    }

    #[test]
    fn semantic_map_empty_case() {
        let zero = Array2::<f32>::zeros((8, 8));
        let case = MultimodalCase::new(
            "empty".into(),
            Grade::Phantom,
            zero.clone(),
            zero.clone(),
            zero.clone(),
            zero,
            Array2::<u8>::zeros((8, 8)),
        )
        .unwrap();
        let sem = build_semantic_label_map(&case);
        assert!(sem.codes.iter().all(|&c| c == 0));
    }

    #[test]
    fn semantic_map_marks_brain_as_5() {
        // tumor-free phantom: semantic map is 5 exactly on the brain support
        let cfg = PhantomConfig {
            num_cases: 1,
            height: 32,
            width: 32,
            tumor_probability: 0.0,
            noise_std: 0.05,
            seed: 2,
        };
        let case = generate_phantom_dataset(&cfg).unwrap().pop().unwrap();
        let sem = build_semantic_label_map(&case);
        let mask = case.brain_mask();
        for ((y, x), &c) in sem.codes.indexed_iter() {
            assert_eq!(c, if mask[(y, x)] { 5 } else { 0 });
        }
    }

    #[test]
    fn semantic_map_tumor_codes_dominate() {
        let case = phantom_case();
        let sem = build_semantic_label_map(&case);
        for ((y, x), &raw) in case.labels.indexed_iter() {
            if raw != 0 {
                assert_eq!(sem.codes[(y, x)], raw);
            }
        }
    }

    #[test]
    fn complete_mask_equals_union_oracle() {
        let sem = build_semantic_label_map(&phantom_case());
        let mask = complete_tumor_mask(&sem);
        // set-union oracle: OR of the per-code masks
        let mut oracle = Array2::<u8>::zeros(sem.codes.dim());
        for code in 1..=4u8 {
            ndarray::Zip::from(&mut oracle)
                .and(&sem.codes)
                .for_each(|o, &c| {
                    if c == code {
                        *o = 1;
                    }
                });
        }
        assert_eq!(mask, oracle);
        // all-5 map has an empty complete mask
        let all5 = SemanticLabelMap::new(Array2::from_elem((4, 4), 5));
        assert!(complete_tumor_mask(&all5).iter().all(|&v| v == 0));
    }

    fn brute_force_boundary(mask: &Array2<u8>) -> Array2<f32> {
        let (h, w) = mask.dim();
        let mut out = Array2::<f32>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                if mask[(y, x)] == 0 {
                    continue;
                }
                let mut edge = false;
                for (dy, dx) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        edge = true;
                    } else if mask[(ny as usize, nx as usize)] == 0 {
                        edge = true;
                    }
                }
                if edge {
                    out[(y, x)] = 1.0;
                }
            }
        }
        out
    }

    #[test]
    fn boundary_of_3x3_block_has_8_pixels() {
        let mut mask = Array2::<u8>::zeros((7, 7));
        for y in 2..5 {
            for x in 2..5 {
                mask[(y, x)] = 1;
            }
        }
        let b = extract_boundary(&mask);
        assert_eq!(b.mask.iter().filter(|&&v| v == 1.0).count(), 8);
        assert_eq!(b.mask[(3, 3)], 0.0);
    }

    #[test]
    fn boundary_edge_cases() {
        let empty = Array2::<u8>::zeros((5, 5));
        assert!(extract_boundary(&empty).mask.iter().all(|&v| v == 0.0));
        let mut single = Array2::<u8>::zeros((5, 5));
        single[(2, 2)] = 1;
        let b = extract_boundary(&single);
        assert_eq!(b.mask[(2, 2)], 1.0);
        assert_eq!(b.mask.iter().filter(|&&v| v == 1.0).count(), 1);
    }

    #[test]
    fn boundary_matches_brute_force_on_random_masks() {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(9, "test.boundary", 0);
        for _ in 0..20 {
            let mask = Array2::from_shape_fn((11, 13), |_| rng.random_range(0..=1u8));
            let b = extract_boundary(&mask);
            assert_eq!(b.mask, brute_force_boundary(&mask));
            // boundary is a subset of the mask
            for ((y, x), &v) in b.mask.indexed_iter() {
                if v == 1.0 {
                    assert_eq!(mask[(y, x)], 1);
                }
            }
        }
    }

    #[test]
    fn deform_alpha_zero_is_identity() {
        let sem = build_semantic_label_map(&phantom_case());
        let p = DeformParams {
            alpha: 0.0,
            sigma: 10.0,
            seed: 1,
        };
        assert_eq!(elastic_deform_labels(&sem, &p), sem);
    }

    #[test]
    fn deform_is_deterministic_and_contained() {
        let sem = build_semantic_label_map(&phantom_case());
        let input_codes: std::collections::BTreeSet<u8> = sem.codes.iter().copied().collect();
        for trial in 0..10u64 {
            let p = DeformParams {
                alpha: 300.0,
                sigma: 10.0,
                seed: trial,
            };
            let a = elastic_deform_labels(&sem, &p);
            let b = elastic_deform_labels(&sem, &p);
            assert_eq!(a, b);
            for &c in a.codes.iter() {
                assert!(c == 0 || input_codes.contains(&c));
            }
        }
    }

    #[test]
    fn one_hot_identities() {
        let all_zero = SemanticLabelMap::new(Array2::zeros((4, 4)));
        let enc = one_hot(&all_zero);
        assert!(enc.index_axis(ndarray::Axis(0), 0).iter().all(|&v| v == 1.0));
        let mut m = Array2::<u8>::zeros((4, 4));
        m[(1, 2)] = 4;
        let enc = one_hot(&SemanticLabelMap::new(m));
        assert_eq!(enc[(4, 1, 2)], 1.0);
        assert_eq!(enc[(0, 1, 2)], 0.0);
    }

    #[test]
    fn bilinear_downsample_hand_case() {
        let img = Array3::from_shape_vec((1, 2, 2), vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let out = downsample_bilinear(&img, 2).unwrap();
        assert_eq!(out.dim(), (1, 1, 1));
        assert!((out[(0, 0, 0)] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn bilinear_downsample_rejects_bad_dims() {
        let img = Array3::<f32>::zeros((1, 6, 6));
        assert!(matches!(
            downsample_bilinear(&img, 4).unwrap_err(),
            LabelError::NotDivisible { .. }
        ));
        assert!(matches!(
            downsample_bilinear(&img, 3).unwrap_err(),
            LabelError::BadFactor { factor: 3 }
        ));
    }

    #[test]
    fn nearest_downsample_checkerboard_phase() {
        // checkerboard of {0,5}: fixed top-left sampling picks phase (0,0)
        let m = SemanticLabelMap::new(Array2::from_shape_fn((8, 8), |(y, x)| {
            if (y + x) % 2 == 0 {
                0
            } else {
                5
            }
        }));
        let down = downsample_labels_nearest(&m);
        assert!(down.codes.iter().all(|&c| c == 0));
        let constant = SemanticLabelMap::new(Array2::from_elem((8, 8), 3));
        assert!(downsample_labels_nearest(&constant)
            .codes
            .iter()
            .all(|&c| c == 3));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn prop_one_hot_argmax_roundtrip(seed in 0u64..1000) {
            let mut rng = crate::rng::derive_rng(seed, "prop.onehot", 0);
            let m = SemanticLabelMap::new(Array2::from_shape_fn((6, 7), |_| rng.random_range(0..6u8)));
            let enc = one_hot(&m);
            for ((y, x), &c) in m.codes.indexed_iter() {
                let mut sum = 0.0;
                let mut best = 0usize;
                for ch in 0..NUM_SEMANTIC_CLASSES {
                    sum += enc[(ch, y, x)];
                    if enc[(ch, y, x)] > enc[(best, y, x)] {
                        best = ch;
                    }
                }
                prop_assert!((sum - 1.0).abs() < 1e-6);
                prop_assert_eq!(best as u8, c);
            }
        }

        #[test]
        fn prop_downsample_respects_bounds(seed in 0u64..1000) {
            let mut rng = crate::rng::derive_rng(seed, "prop.down", 0);
            let img = Array3::from_shape_fn((2, 8, 8), |_| rng.random_range(-4.0f32..4.0));
            let lo = img.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = img.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            for factor in [2usize, 4, 8] {
                let out = downsample_bilinear(&img, factor).unwrap();
                for &v in out.iter() {
                    prop_assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
                }
            }
        }

        #[test]
        fn prop_deform_codeset_containment(seed in 0u64..500, alpha in 0.0f64..500.0) {
            let mut rng = crate::rng::derive_rng(seed, "prop.deform", 0);
            let m = SemanticLabelMap::new(Array2::from_shape_fn((16, 16), |_| rng.random_range(0..6u8)));
            let input: std::collections::BTreeSet<u8> = m.codes.iter().copied().collect();
            let p = DeformParams { alpha, sigma: 4.0, seed };
            let out = elastic_deform_labels(&m, &p);
            for &c in out.codes.iter() {
                prop_assert!(c == 0 || input.contains(&c));
            }
        }
    }
}
