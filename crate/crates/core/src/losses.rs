//! Training objectives: the adversarial two-player losses over the
//! four-member discriminator ensemble, the boundary mean-square error, the
//! discriminator-feature matching ("perceptual") loss, and their weighted
//! combination.
//!
//! Each loss exists in two forms: a pure scalar function of plain tensors
//! (used for reporting and as an independent oracle in tests) and a tape
//! builder that assembles the same value as a differentiable node.

use ndarray::{Array4, ArrayD, Ix4};

use crate::labels::BoundaryTarget;
use crate::nn::{NodeId, Tape};

/// Clamp for log arguments so saturated sigmoids stay finite.
pub const LOG_EPS: f32 = 1e-7;

/// Index of the boundary-probability channel in the 2-way softmax output.
pub const BOUNDARY_CHANNEL: usize = 1;

/// Weights of the boundary and perceptual terms in the full objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 10.0,
        }
    }
}

/// Which real/fake feature pairing the perceptual loss compares.
///
/// `Printed` follows the equation as written: features of (x, c) against
/// (G(z), z), where z is the deformed condition — the two sides see
/// different conditions. `Matched` pairs (x, c) with (G(c), c) so the
/// compared features share their conditioning; it is the default because
/// feature matching across different conditions has no alignment guarantee.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PerceptualMode {
    #[default]
    Matched,
    Printed,
}

impl std::fmt::Display for PerceptualMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PerceptualMode::Matched => write!(f, "matched"),
            PerceptualMode::Printed => write!(f, "printed"),
        }
    }
}

impl std::str::FromStr for PerceptualMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "matched" => Ok(Self::Matched),
            "printed" => Ok(Self::Printed),
            other => Err(format!(
                "unknown perceptual mode {other:?} (expected matched|printed)"
            )),
        }
    }
}

/// One iteration's loss values, with per-member breakdowns.
#[derive(Clone, Debug, Default)]
pub struct LossReport {
    pub d_loss: f64,
    pub g_adv: f64,
    pub l_b: f64,
    pub l_p: f64,
    pub total: f64,
    pub adv_per_member: [f64; 4],
    pub perc_per_member: [f64; 4],
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "iteration,d_loss,g_adv,l_b,l_p,total";

    pub fn csv_row(&self, iteration: u64) -> String {
        format!(
            "{iteration},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.d_loss, self.g_adv, self.l_b, self.l_p, self.total
        )
    }
}

fn clamped_ln(v: f32) -> f64 {
    (v.clamp(LOG_EPS, 1.0 - LOG_EPS) as f64).ln()
}

fn mean_ln(pred: &ArrayD<f32>, one_minus: bool) -> f64 {
    let total: f64 = pred
        .iter()
        .map(|&v| clamped_ln(if one_minus { 1.0 - v } else { v }))
        .sum();
    total / pred.len() as f64
}

/// Discriminator objective: −Σ_k [mean log D_k(real) + mean log(1 − D_k(fake))].
/// The ensemble maximizes the payoff, i.e. minimizes this negation.
pub fn adv_loss_discriminator(real_preds: &[ArrayD<f32>], fake_preds: &[ArrayD<f32>]) -> f64 {
    assert_eq!(real_preds.len(), fake_preds.len());
    real_preds
        .iter()
        .zip(fake_preds)
        .map(|(r, f)| -(mean_ln(r, false) + mean_ln(f, true)))
        .sum()
}

/// Generator adversarial term in the non-saturating form −Σ_k mean log D_k(fake).
/// (The literal min-max log(1−D) form saturates early; the surrogate has the
/// same fixed points.)
pub fn adv_loss_generator(fake_preds: &[ArrayD<f32>]) -> f64 {
    fake_preds.iter().map(|f| -mean_ln(f, false)).sum()
}

/// Per-member generator adversarial terms (breakdown for reporting).
pub fn adv_loss_generator_per_member(fake_preds: &[ArrayD<f32>]) -> Vec<f64> {
    fake_preds.iter().map(|f| -mean_ln(f, false)).collect()
}

/// Boundary regression: mean over batch items and all pixels of
/// (P(x) − y)², where P is channel 1 of the 2-way softmax.
pub fn boundary_loss(pred: &Array4<f32>, targets: &[BoundaryTarget]) -> f64 {
    let (n, c, h, w) = pred.dim();
    assert_eq!(c, 2, "boundary prediction has 2 softmax channels");
    assert_eq!(n, targets.len());
    let mut total = 0.0f64;
    for (ni, t) in targets.iter().enumerate() {
        assert_eq!(t.mask.dim(), (h, w));
        for y in 0..h {
            for x in 0..w {
                let d = pred[(ni, BOUNDARY_CHANNEL, y, x)] as f64 - t.mask[(y, x)] as f64;
                total += d * d;
            }
        }
    }
    total / (n * h * w) as f64
}

/// Feature matching over the ensemble: Σ_k Σ_i (1/N_i)·‖real_ki − fake_ki‖².
pub fn perceptual_loss(real_feats: &[Vec<ArrayD<f32>>], fake_feats: &[Vec<ArrayD<f32>>]) -> f64 {
    assert_eq!(real_feats.len(), fake_feats.len());
    let mut total = 0.0f64;
    for (rm, fm) in real_feats.iter().zip(fake_feats) {
        assert_eq!(rm.len(), fm.len());
        for (r, f) in rm.iter().zip(fm) {
            assert_eq!(r.shape(), f.shape());
            let ss: f64 = r
                .iter()
                .zip(f.iter())
                .map(|(&a, &b)| {
                    let d = a as f64 - b as f64;
                    d * d
                })
                .sum();
            total += ss / r.len() as f64;
        }
    }
    total
}

/// Full generator objective: g_adv + λ₁·l_b + λ₂·l_p.
pub fn total_generator_objective(g_adv: f64, l_b: f64, l_p: f64, w: LossWeights) -> f64 {
    g_adv + w.lambda1 * l_b + w.lambda2 * l_p
}

// ---------------------------------------------------------------------------
// Tape builders
// ---------------------------------------------------------------------------

/// Tape form of [`adv_loss_discriminator`]. Returns the scalar loss node.
pub fn adv_loss_discriminator_tape(
    tape: &mut Tape,
    real_preds: &[NodeId],
    fake_preds: &[NodeId],
) -> NodeId {
    assert_eq!(real_preds.len(), fake_preds.len());
    let mut terms = Vec::with_capacity(2 * real_preds.len());
    for (&r, &f) in real_preds.iter().zip(fake_preds) {
        let lr = tape.log_clamped(r, LOG_EPS);
        let mr = tape.mean_all(lr);
        let omf = tape.one_minus(f);
        let lf = tape.log_clamped(omf, LOG_EPS);
        let mf = tape.mean_all(lf);
        terms.push((mr, -1.0));
        terms.push((mf, -1.0));
    }
    tape.weighted_sum(terms)
}

/// Tape form of [`adv_loss_generator`]. Returns the total node and the
/// per-member scalar nodes (for the report breakdown).
pub fn adv_loss_generator_tape(tape: &mut Tape, fake_preds: &[NodeId]) -> (NodeId, Vec<NodeId>) {
    let mut members = Vec::with_capacity(fake_preds.len());
    for &f in fake_preds {
        let lf = tape.log_clamped(f, LOG_EPS);
        let mf = tape.mean_all(lf);
        let neg = tape.weighted_sum(vec![(mf, -1.0)]);
        members.push(neg);
    }
    let total = tape.weighted_sum(members.iter().map(|&m| (m, 1.0)).collect());
    (total, members)
}

/// Tape form of [`boundary_loss`]: slices the boundary channel out of the
/// softmax output and regresses it on the stacked binary targets.
pub fn boundary_loss_tape(
    tape: &mut Tape,
    boundary_prob: NodeId,
    targets: &[BoundaryTarget],
) -> NodeId {
    let shape = tape.value(boundary_prob).shape().to_vec();
    assert_eq!(shape[1], 2);
    assert_eq!(shape[0], targets.len());
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let mut stacked = Array4::<f32>::zeros((n, 1, h, w));
    for (ni, t) in targets.iter().enumerate() {
        assert_eq!(t.mask.dim(), (h, w));
        stacked
            .index_axis_mut(ndarray::Axis(0), ni)
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(&t.mask);
    }
    let pred = tape.slice_channels(boundary_prob, BOUNDARY_CHANNEL, 1);
    let target = tape.leaf(stacked.into_dyn());
    tape.mse_against(pred, target)
}

/// Tape form of [`perceptual_loss`]. Callers pass real features already
/// detached. Returns the total node and per-member scalar nodes.
pub fn perceptual_loss_tape(
    tape: &mut Tape,
    real_feats: &[Vec<NodeId>],
    fake_feats: &[Vec<NodeId>],
) -> (NodeId, Vec<NodeId>) {
    assert_eq!(real_feats.len(), fake_feats.len());
    let mut members = Vec::with_capacity(real_feats.len());
    for (rm, fm) in real_feats.iter().zip(fake_feats) {
        assert_eq!(rm.len(), fm.len());
        let mut terms = Vec::with_capacity(rm.len());
        for (&r, &f) in rm.iter().zip(fm) {
            let n = tape.value(r).len() as f64;
            let node = tape.sum_sq_diff_scaled(r, f, 1.0 / n);
            terms.push((node, 1.0));
        }
        members.push(tape.weighted_sum(terms));
    }
    let total = tape.weighted_sum(members.iter().map(|&m| (m, 1.0)).collect());
    (total, members)
}

/// Tape form of [`total_generator_objective`].
pub fn total_generator_objective_tape(
    tape: &mut Tape,
    g_adv: NodeId,
    l_b: NodeId,
    l_p: NodeId,
    w: LossWeights,
) -> NodeId {
    tape.weighted_sum(vec![(g_adv, 1.0), (l_b, w.lambda1), (l_p, w.lambda2)])
}

/// Convenience for tests and training: read a prediction node back as an
/// owned 4-D array.
pub fn node_array4(tape: &Tape, id: NodeId) -> Array4<f32> {
    tape.value(id)
        .view()
        .into_dimensionality::<Ix4>()
        .expect("NCHW node")
        .to_owned()
}
