//! Region-mask construction and Dice / Precision / Sensitivity metrics for
//! the three tumor evaluation regions, plus report rendering (CSV and a
//! fixed-width text table).
//!
//! Empty-mask conventions, also documented in the report header: when both
//! masks are empty the metric is 1.0 (a tumor-free case predicted tumor-free
//! is a perfect answer); when exactly the denominator mask is empty the
//! metric is 0.0.

use ndarray::{Array2, Axis, Ix4};

use crate::dataset::{zscore_normalize, MultimodalCase};
use crate::networks::NetworkError;
use crate::nn::{ParamStore, Tape};
use crate::unet::SegmentationNet;

/// The three evaluation regions as code subsets of the raw labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    /// Necrosis, edema, non-enhancing and enhancing tumor: {1,2,3,4}.
    Complete,
    /// Necrosis, non-enhancing and enhancing tumor: {1,3,4}.
    Core,
    /// Enhancing tumor only: {4}.
    Enhancing,
}

pub const REGIONS: [Region; 3] = [Region::Complete, Region::Core, Region::Enhancing];

impl Region {
    pub fn codes(self) -> &'static [u8] {
        match self {
            Region::Complete => &[1, 2, 3, 4],
            Region::Core => &[1, 3, 4],
            Region::Enhancing => &[4],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Complete => "complete",
            Region::Core => "core",
            Region::Enhancing => "enhancing",
        }
    }
}

/// Binary membership mask of a region over a raw label map.
pub fn region_mask(labels: &Array2<u8>, region: Region) -> Array2<bool> {
    labels.mapv(|c| region.codes().contains(&c))
}

fn counts(pred: &Array2<bool>, gt: &Array2<bool>) -> (usize, usize, usize) {
    assert_eq!(pred.dim(), gt.dim(), "metric masks must share dims");
    let mut inter = 0;
    let mut p = 0;
    let mut g = 0;
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    (inter, p, g)
}

/// 2|P∩G| / (|P|+|G|); both empty → 1.0.
pub fn dice(pred: &Array2<bool>, gt: &Array2<bool>) -> f64 {
    let (inter, p, g) = counts(pred, gt);
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

/// |P∩G| / |P|; empty P → 1.0 if G is also empty, else 0.0.
pub fn precision(pred: &Array2<bool>, gt: &Array2<bool>) -> f64 {
    let (inter, p, g) = counts(pred, gt);
    if p == 0 {
        if g == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        inter as f64 / p as f64
    }
}

/// |P∩G| / |G|; empty G → 1.0 if P is also empty, else 0.0.
pub fn sensitivity(pred: &Array2<bool>, gt: &Array2<bool>) -> f64 {
    let (inter, p, g) = counts(pred, gt);
    if g == 0 {
        if p == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        inter as f64 / g as f64
    }
}

/// Metrics for one case, region-ordered complete/core/enhancing.
#[derive(Clone, Debug)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dice: [f64; 3],
    pub precision: [f64; 3],
    pub sensitivity: [f64; 3],
}

impl CaseMetrics {
    pub fn from_masks(case_id: String, pred: &Array2<u8>, gt: &Array2<u8>) -> Self {
        let mut dice_v = [0.0; 3];
        let mut prec_v = [0.0; 3];
        let mut sens_v = [0.0; 3];
        for (i, region) in REGIONS.iter().enumerate() {
            let pm = region_mask(pred, *region);
            let gm = region_mask(gt, *region);
            dice_v[i] = dice(&pm, &gm);
            prec_v[i] = precision(&pm, &gm);
            sens_v[i] = sensitivity(&pm, &gm);
        }
        Self {
            case_id,
            dice: dice_v,
            precision: prec_v,
            sensitivity: sens_v,
        }
    }
}

/// Mean metrics over a case set, with the per-case breakdown retained.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub cases: Vec<CaseMetrics>,
    pub mean_dice: [f64; 3],
    pub mean_precision: [f64; 3],
    pub mean_sensitivity: [f64; 3],
}

impl EvalReport {
    pub fn from_cases(cases: Vec<CaseMetrics>) -> Self {
        assert!(!cases.is_empty(), "evaluation needs at least one case");
        let n = cases.len() as f64;
        let mut mean_dice = [0.0; 3];
        let mut mean_precision = [0.0; 3];
        let mut mean_sensitivity = [0.0; 3];
        for c in &cases {
            for i in 0..3 {
                mean_dice[i] += c.dice[i] / n;
                mean_precision[i] += c.precision[i] / n;
                mean_sensitivity[i] += c.sensitivity[i] / n;
            }
        }
        Self {
            cases,
            mean_dice,
            mean_precision,
            mean_sensitivity,
        }
    }

    /// The nine aggregate values in table column order:
    /// Dice (complete, core, enhancing), then Precision, then Sensitivity.
    pub fn table_row(&self) -> [f64; 9] {
        let mut row = [0.0; 9];
        row[..3].copy_from_slice(&self.mean_dice);
        row[3..6].copy_from_slice(&self.mean_precision);
        row[6..].copy_from_slice(&self.mean_sensitivity);
        row
    }

    pub const CSV_HEADER: &'static str = "case_id,dice_complete,dice_core,dice_enh,\
precision_complete,precision_core,precision_enh,\
sensitivity_complete,sensitivity_core,sensitivity_enh";

    /// Per-case rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        let fmt_row = |id: &str, d: &[f64; 3], p: &[f64; 3], s: &[f64; 3]| {
            format!(
                "{id},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                d[0], d[1], d[2], p[0], p[1], p[2], s[0], s[1], s[2]
            )
        };
        for c in &self.cases {
            out.push_str(&fmt_row(&c.case_id, &c.dice, &c.precision, &c.sensitivity));
        }
        out.push_str(&fmt_row(
            "mean",
            &self.mean_dice,
            &self.mean_precision,
            &self.mean_sensitivity,
        ));
        out
    }

    pub fn to_table(&self, label: &str) -> String {
        render_metrics_table(&[(label.to_string(), self.table_row())])
    }
}

/// Fixed-width text table in the paper-style column order: one row per
/// model, grouped Dice | Precision | Sensitivity, each over the regions
/// complete / core / enhancing.
pub fn render_metrics_table(rows: &[(String, [f64; 9])]) -> String {
    let label_w = rows
        .iter()
        .map(|(l, _)| l.len())
        .chain(["model".len()])
        .max()
        .unwrap()
        .max(5);
    let mut out = String::new();
    out.push_str("(empty prediction and ground-truth masks score 1.0)\n");
    out.push_str(&format!(
        "{:<label_w$} | {:^20} | {:^20} | {:^20}\n",
        "model", "Dice", "Precision", "Sensitivity"
    ));
    out.push_str(&format!(
        "{:<label_w$} | {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6}\n",
        "", "comp", "core", "enh", "comp", "core", "enh", "comp", "core", "enh"
    ));
    let width = out.lines().map(str::len).max().unwrap();
    out.push_str(&"-".repeat(width));
    out.push('\n');
    for (label, v) in rows {
        out.push_str(&format!(
            "{label:<label_w$} | {:>6.3} {:>6.3} {:>6.3} | {:>6.3} {:>6.3} {:>6.3} | {:>6.3} {:>6.3} {:>6.3}\n",
            v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]
        ));
    }
    out
}

/// Argmax class map from a single case's normalized modalities.
pub fn predict_labels(
    net: &SegmentationNet,
    store: &mut ParamStore,
    case: &MultimodalCase,
) -> Result<Array2<u8>, NetworkError> {
    let (h, w) = case.labels.dim();
    let mut input = ndarray::Array4::<f32>::zeros((1, 4, h, w));
    for (m, (_, img)) in case.modalities().into_iter().enumerate() {
        input
            .index_axis_mut(Axis(0), 0)
            .index_axis_mut(Axis(0), m)
            .assign(&zscore_normalize(img));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(input.into_dyn());
    let logits = net.forward(&mut tape, store, x, false)?;
    let lv = tape.value(logits).view().into_dimensionality::<Ix4>().unwrap();
    let c = lv.shape()[1];
    let pred = Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0u8;
        let mut best_v = f32::NEG_INFINITY;
        for ci in 0..c {
            let v = lv[(0, ci, y, x)];
            if v > best_v {
                best_v = v;
                best = ci as u8;
            }
        }
        best
    });
    Ok(pred)
}

/// Run the network over every case and aggregate per-region metrics.
pub fn evaluate(
    net: &SegmentationNet,
    store: &mut ParamStore,
    cases: &[MultimodalCase],
) -> Result<EvalReport, NetworkError> {
    let mut per_case = Vec::with_capacity(cases.len());
    for case in cases {
        let pred = predict_labels(net, store, case)?;
        per_case.push(CaseMetrics::from_masks(
            case.case_id.clone(),
            &pred,
            &case.labels,
        ));
    }
    Ok(EvalReport::from_cases(per_case))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn mask_from(bits: &[u8], w: usize) -> Array2<bool> {
        Array2::from_shape_vec((bits.len() / w, w), bits.iter().map(|&b| b != 0).collect())
            .unwrap()
    }

    #[test]
    fn region_masks_follow_code_membership() {
        let labels =
            Array2::from_shape_vec((2, 3), vec![0u8, 1, 2, 3, 4, 2]).unwrap();
        // independent membership scan
        for region in REGIONS {
            let mask = region_mask(&labels, region);
            for (idx, &code) in labels.indexed_iter() {
                assert_eq!(mask[idx], region.codes().contains(&code));
            }
        }
        // all-edema map has an empty core
        let edema = Array2::from_elem((4, 4), 2u8);
        assert!(!region_mask(&edema, Region::Core).iter().any(|&b| b));
        assert!(region_mask(&edema, Region::Complete).iter().all(|&b| b));
        // all-zero map is empty everywhere
        let zero = Array2::zeros((4, 4));
        for region in REGIONS {
            assert!(!region_mask(&zero, region).iter().any(|&b| b));
        }
    }

    #[test]
    fn metric_hand_oracles() {
        let a = mask_from(&[1, 1, 0, 0], 2);
        let b = mask_from(&[1, 0, 1, 0], 2);
        // |P|=2, |G|=2, overlap 1 → dice 0.5
        assert_abs_diff_eq!(dice(&a, &b), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(dice(&a, &a), 1.0, epsilon = 1e-12);
        let disjoint = mask_from(&[0, 0, 1, 1], 2);
        assert_abs_diff_eq!(dice(&a, &disjoint), 0.0, epsilon = 1e-12);
        // P ⊃ G strictly: |P|=4, |G|=2 → precision 0.5, sensitivity 1.0
        let p = mask_from(&[1, 1, 1, 1], 2);
        let g = mask_from(&[1, 1, 0, 0], 2);
        assert_abs_diff_eq!(precision(&p, &g), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(sensitivity(&p, &g), 1.0, epsilon = 1e-12);
        // empty pred vs nonempty gt
        let empty = mask_from(&[0, 0, 0, 0], 2);
        assert_abs_diff_eq!(precision(&empty, &g), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sensitivity(&empty, &g), 0.0, epsilon = 1e-12);
        // both empty
        assert_abs_diff_eq!(dice(&empty, &empty), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(precision(&empty, &empty), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sensitivity(&empty, &empty), 1.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn metric_invariants(seed in 0u64..500) {
            let mut rng = derive_rng(seed, "eval.prop", 0);
            let labels = Array2::from_shape_fn((8, 8), |_| rng.random_range(0..5u8));
            let pred = Array2::from_shape_fn((8, 8), |_| rng.random_range(0..5u8));
            // region monotonicity: enhancing ⊆ core ⊆ complete
            let enh = region_mask(&labels, Region::Enhancing);
            let core = region_mask(&labels, Region::Core);
            let complete = region_mask(&labels, Region::Complete);
            for ((&e, &c), &t) in enh.iter().zip(core.iter()).zip(complete.iter()) {
                prop_assert!(!e || c);
                prop_assert!(!c || t);
            }
            for region in REGIONS {
                let p = region_mask(&pred, region);
                let g = region_mask(&labels, region);
                let d = dice(&p, &g);
                prop_assert!((0.0..=1.0).contains(&d));
                prop_assert!((dice(&g, &p) - d).abs() < 1e-12);
                prop_assert!((precision(&p, &g) - sensitivity(&g, &p)).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&precision(&p, &g)));
                prop_assert!((0.0..=1.0).contains(&sensitivity(&p, &g)));
            }
        }
    }

    #[test]
    fn report_aggregates_are_case_means() {
        let gt1 = Array2::from_shape_vec((2, 2), vec![4u8, 0, 0, 0]).unwrap();
        let gt2 = Array2::from_shape_vec((2, 2), vec![2u8, 2, 0, 0]).unwrap();
        let perfect = CaseMetrics::from_masks("a".into(), &gt1, &gt1);
        let other = CaseMetrics::from_masks("b".into(), &gt1, &gt2);
        let report = EvalReport::from_cases(vec![perfect.clone(), other.clone()]);
        for i in 0..3 {
            assert_abs_diff_eq!(perfect.dice[i], 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(
                report.mean_dice[i],
                (perfect.dice[i] + other.dice[i]) / 2.0,
                epsilon = 1e-12
            );
        }
        assert_eq!(report.cases.len(), 2);
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 1 + 2 + 1);
        assert!(csv.lines().next().unwrap().starts_with("case_id,dice_complete"));
        assert!(csv.lines().last().unwrap().starts_with("mean,"));
    }

    #[test]
    fn table_renders_nine_metric_columns_per_row() {
        let gt = Array2::from_shape_vec((2, 2), vec![4u8, 2, 1, 0]).unwrap();
        let report = EvalReport::from_cases(vec![CaseMetrics::from_masks(
            "c".into(),
            &gt,
            &gt,
        )]);
        let table = report.to_table("proposed");
        let data_line = table.lines().last().unwrap();
        assert!(data_line.starts_with("proposed"));
        let nums: Vec<&str> = data_line
            .split_whitespace()
            .filter(|t| t.parse::<f64>().is_ok())
            .collect();
        assert_eq!(nums.len(), 9);
        assert!(table.contains("Dice") && table.contains("Precision") && table.contains("Sensitivity"));
    }
}
