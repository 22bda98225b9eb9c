//! Training loops: alternating adversarial optimization of the
//! generator/discriminator pair, synthetic-pair generation for augmentation,
//! the traditional rotation/zoom/flip baseline, and the downstream
//! segmentation trainer.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::checkpoint::{pack_store, unpack_store, Checkpoint, CheckpointError};
use crate::dataset::{zscore_normalize, MultimodalCase};
use crate::evaluation::evaluate;
use crate::labels::{
    build_semantic_label_map, complete_tumor_mask, elastic_deform_codes, elastic_deform_labels,
    extract_boundary, semantic_from_parts, BoundaryTarget, DeformParams, SemanticLabelMap,
};
use crate::losses::{
    adv_loss_discriminator_tape, adv_loss_generator_tape, boundary_loss_tape,
    perceptual_loss_tape, total_generator_objective_tape, LossReport, LossWeights, PerceptualMode,
};
use crate::networks::{
    batch_one_hot, DiscriminatorEnsemble, GeneratorBundle, NetworkError, NUM_MODALITIES,
};
use crate::nn::adam::Adam;
use crate::nn::layers::Init;
use crate::nn::{NodeId, ParamId, ParamStore, Tape};
use crate::rng::{derive_rng, derive_seed};
use crate::tensor::Tensor;
use crate::unet::SegmentationNet;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("non-finite {term} at iteration {iteration}")]
    NonFinite { iteration: u64, term: &'static str },
    #[error("proposed augmentation requires a generator checkpoint")]
    MissingCheckpoint,
    #[error("training set is empty")]
    EmptyDataset,
    #[error("checkpoint is missing metadata key {0:?}")]
    MissingMeta(String),
    #[error("checkpoint metadata {key}={value:?} is not a valid integer")]
    BadMeta { key: String, value: String },
    #[error("checkpoint optimizer state for {0:?} is incomplete")]
    BrokenOptimizerState(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Adam hyperparameters plus run length for one training stage. For the
/// adversarial stage `iterations` counts optimizer iterations; for the
/// segmentation stage it counts epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 4,
            iterations: 2000,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(format!("learning rate {} must be positive", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(format!("{name} {b} must lie in [0, 1)"));
            }
        }
        if self.batch_size == 0 {
            return Err("batch size must be positive".into());
        }
        if self.iterations == 0 {
            return Err("iteration/epoch count must be positive".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> Adam {
        Adam::new(self.learning_rate, self.beta1, self.beta2)
    }
}

/// Whether elastic deformation is applied to the raw labels (tumor moves
/// inside the original brain silhouette) or to the full semantic map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DeformOrder {
    #[default]
    RawFirst,
    SemanticFirst,
}

impl fmt::Display for DeformOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeformOrder::RawFirst => write!(f, "raw_first"),
            DeformOrder::SemanticFirst => write!(f, "semantic_first"),
        }
    }
}

impl FromStr for DeformOrder {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw_first" => Ok(Self::RawFirst),
            "semantic_first" => Ok(Self::SemanticFirst),
            other => Err(format!(
                "unknown deform order {other:?} (expected raw_first|semantic_first)"
            )),
        }
    }
}

/// Which augmentation the segmentation trainer applies to training samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AugMode {
    #[default]
    None,
    Traditional,
    Proposed,
}

impl fmt::Display for AugMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugMode::None => write!(f, "none"),
            AugMode::Traditional => write!(f, "traditional"),
            AugMode::Proposed => write!(f, "proposed"),
        }
    }
}

impl FromStr for AugMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "traditional" => Ok(Self::Traditional),
            "proposed" => Ok(Self::Proposed),
            other => Err(format!(
                "unknown augmentation mode {other:?} (expected none|traditional|proposed)"
            )),
        }
    }
}

/// Full augmentation policy: the mode, the fraction of proposed-mode samples
/// replaced by synthetic pairs, and the deformation parameters used when
/// synthesizing (ignored by the other modes).
#[derive(Clone, Debug)]
pub struct AugmentationMode {
    pub mode: AugMode,
    pub mix_probability: f64,
    pub deform: DeformParams,
}

impl Default for AugmentationMode {
    fn default() -> Self {
        Self {
            mode: AugMode::None,
            mix_probability: 0.5,
            deform: DeformParams {
                alpha: 300.0,
                sigma: 10.0,
                seed: 0,
            },
        }
    }
}

/// Stack the four modalities z-score normalized, in fixed channel order.
pub fn normalized_stack(case: &MultimodalCase) -> Array3<f32> {
    let (h, w) = (case.height(), case.width());
    let mut out = Array3::zeros((NUM_MODALITIES, h, w));
    for (m, (_, img)) in case.modalities().into_iter().enumerate() {
        out.index_axis_mut(Axis(0), m).assign(&zscore_normalize(img));
    }
    out
}

/// Deform a case's labels into a generator conditioning map, returning both
/// the semantic map and the deformed raw labels (codes 0-4).
pub fn deformed_conditioning(
    case: &MultimodalCase,
    p: &DeformParams,
    order: DeformOrder,
) -> (SemanticLabelMap, Array2<u8>) {
    match order {
        DeformOrder::RawFirst => {
            let raw = elastic_deform_codes(&case.labels, p);
            let semantic = semantic_from_parts(&raw, &case.brain_mask());
            (semantic, raw)
        }
        DeformOrder::SemanticFirst => {
            let semantic = elastic_deform_labels(&build_semantic_label_map(case), p);
            let raw = semantic.codes.mapv(|c| if c == 5 { 0 } else { c });
            (semantic, raw)
        }
    }
}

/// Append one CSV line, writing the header first when the file is new.
pub fn append_csv_line(path: &Path, header: &str, line: &str) -> Result<(), std::io::Error> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    writeln!(f, "{line}")?;
    Ok(())
}

fn finite_or_abort(value: f64, iteration: u64, term: &'static str) -> Result<f64, TrainingError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TrainingError::NonFinite { iteration, term })
    }
}

fn meta_u64(ck: &Checkpoint, key: &str) -> Result<u64, TrainingError> {
    let raw = ck
        .meta_get(key)
        .ok_or_else(|| TrainingError::MissingMeta(key.to_string()))?;
    raw.parse().map_err(|_| TrainingError::BadMeta {
        key: key.to_string(),
        value: raw.to_string(),
    })
}

fn export_optimizer(ck: &mut Checkpoint, store: &ParamStore, opt: &Adam, prefix: &str) {
    for (name, m, v) in opt.export_state(store) {
        ck.push(format!("{prefix}.m.{name}"), Tensor::F32(m));
        ck.push(format!("{prefix}.v.{name}"), Tensor::F32(v));
    }
    ck.set_meta(format!("{prefix}.t"), opt.t);
}

fn import_optimizer(
    ck: &Checkpoint,
    store: &ParamStore,
    opt: &mut Adam,
    prefix: &str,
) -> Result<(), TrainingError> {
    let t = meta_u64(ck, &format!("{prefix}.t"))?;
    let m_prefix = format!("{prefix}.m.");
    let mut entries = Vec::new();
    for (name, tensor) in ck.tensors() {
        let Some(param_name) = name.strip_prefix(&m_prefix) else {
            continue;
        };
        let Tensor::F32(m) = tensor else {
            return Err(TrainingError::BrokenOptimizerState(name.to_string()));
        };
        let Some(Tensor::F32(v)) = ck.tensor(&format!("{prefix}.v.{param_name}")) else {
            return Err(TrainingError::BrokenOptimizerState(param_name.to_string()));
        };
        entries.push((param_name.to_string(), m.clone(), v.clone()));
    }
    opt.import_state(store, t, entries);
    Ok(())
}

/// Everything needed to run (or resume) adversarial training: the parameter
/// store shared by both networks, both optimizers, and the iteration counter.
pub struct GanTrainer {
    pub store: ParamStore,
    pub bundle: GeneratorBundle,
    pub ensemble: DiscriminatorEnsemble,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub iteration: u64,
    gen_ids: Vec<ParamId>,
    disc_ids: Vec<ParamId>,
}

/// Run-level settings for [`GanTrainer::train`].
#[derive(Clone, Debug)]
pub struct GanRunConfig {
    pub opt: OptimizerConfig,
    pub weights: LossWeights,
    pub perceptual_mode: PerceptualMode,
    pub deform: DeformParams,
    pub deform_order: DeformOrder,
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
    /// Assert the update-isolation contract every iteration (tests only;
    /// snapshots every parameter twice per iteration).
    pub check_isolation: bool,
}

impl GanRunConfig {
    pub fn new(opt: OptimizerConfig) -> Self {
        Self {
            opt,
            weights: LossWeights::default(),
            perceptual_mode: PerceptualMode::default(),
            deform: DeformParams {
                alpha: 300.0,
                sigma: 10.0,
                seed: 0,
            },
            deform_order: DeformOrder::default(),
            checkpoint_every: 0,
            checkpoint_dir: None,
            loss_csv: None,
            check_isolation: false,
        }
    }
}

struct GanSample {
    image: Array3<f32>,
    semantic: SemanticLabelMap,
}

struct GanBatch {
    real: Array4<f32>,
    c_maps: Vec<SemanticLabelMap>,
    z_maps: Vec<SemanticLabelMap>,
    boundaries: Vec<BoundaryTarget>,
}

impl GanTrainer {
    pub fn new(init_seed: u64, filters_div: usize, opt: &OptimizerConfig) -> Self {
        let mut store = ParamStore::new();
        let init = Init::new(init_seed);
        let bundle = GeneratorBundle::new(&mut store, &init, filters_div);
        let ensemble = DiscriminatorEnsemble::new(&mut store, &init, filters_div);
        let gen_ids: Vec<ParamId> = store
            .ids_with_prefix("gen.")
            .into_iter()
            .filter(|&id| store.is_trainable(id))
            .collect();
        let disc_ids: Vec<ParamId> = store
            .ids_with_prefix("disc.")
            .into_iter()
            .filter(|&id| store.is_trainable(id))
            .collect();
        Self {
            store,
            bundle,
            ensemble,
            opt_g: opt.adam(),
            opt_d: opt.adam(),
            iteration: 0,
            gen_ids,
            disc_ids,
        }
    }

    /// Write parameters, normalization buffers, both optimizers' moments and
    /// the iteration counter as one archive.
    pub fn save(&self, path: &Path) -> Result<(), TrainingError> {
        let mut ck = Checkpoint::new();
        pack_store(&mut ck, &self.store);
        export_optimizer(&mut ck, &self.store, &self.opt_g, "opt_g");
        export_optimizer(&mut ck, &self.store, &self.opt_d, "opt_d");
        ck.set_meta("kind", "gan");
        ck.set_meta("iteration", self.iteration);
        ck.save(path)?;
        Ok(())
    }

    /// Rebuild a trainer from [`GanTrainer::save`] output; training resumes
    /// at the stored iteration counter.
    pub fn load(path: &Path, filters_div: usize, opt: &OptimizerConfig) -> Result<Self, TrainingError> {
        let ck = Checkpoint::load(path)?;
        let mut trainer = Self::new(0, filters_div, opt);
        unpack_store(&ck, &mut trainer.store)?;
        trainer.iteration = meta_u64(&ck, "iteration")?;
        import_optimizer(&ck, &trainer.store, &mut trainer.opt_g, "opt_g")?;
        import_optimizer(&ck, &trainer.store, &mut trainer.opt_d, "opt_d")?;
        Ok(trainer)
    }

    /// Run iterations `self.iteration + 1 ..= cfg.opt.iterations`, returning
    /// one loss row per iteration and honoring the checkpoint cadence.
    pub fn train(
        &mut self,
        cases: &[MultimodalCase],
        cfg: &GanRunConfig,
    ) -> Result<Vec<(u64, LossReport)>, TrainingError> {
        let samples = prepare_gan_samples(cases)?;
        let mut rows = Vec::new();
        while self.iteration < cfg.opt.iterations as u64 {
            let it = self.iteration + 1;
            let batch = assemble_gan_batch(&samples, cfg, it);
            let report = self.train_iteration(&batch, cfg, it)?;
            self.iteration = it;
            if let Some(csv) = &cfg.loss_csv {
                append_csv_line(csv, LossReport::CSV_HEADER, &report.csv_row(it))?;
            }
            if cfg.checkpoint_every > 0 && it.is_multiple_of(cfg.checkpoint_every as u64) {
                if let Some(dir) = &cfg.checkpoint_dir {
                    fs::create_dir_all(dir)?;
                    self.save(&dir.join(format!("gan_{it:06}.ckpt")))?;
                }
            }
            rows.push((it, report));
        }
        Ok(rows)
    }

    /// One alternation step: a discriminator update on (real, detached fake),
    /// then a generator update against the freshly updated discriminator.
    fn train_iteration(
        &mut self,
        batch: &GanBatch,
        cfg: &GanRunConfig,
        it: u64,
    ) -> Result<LossReport, TrainingError> {
        let mut tape = Tape::new();

        // Generator forward on the deformed conditioning z.
        let gen_out = self
            .bundle
            .generator_forward(&mut tape, &mut self.store, &batch.z_maps, true)?;

        // Discriminator update: fake detached so no gradient reaches the
        // generator.
        let x_node = tape.leaf(batch.real.clone().into_dyn());
        let c_node = tape.leaf(batch_one_hot(&batch.c_maps).into_dyn());
        let z_node = tape.leaf(batch_one_hot(&batch.z_maps).into_dyn());
        let fake_detached = tape.detach(gen_out.final_image);
        let d_real =
            self.ensemble
                .discriminator_forward(&mut tape, &mut self.store, x_node, c_node, true)?;
        let d_fake = self.ensemble.discriminator_forward(
            &mut tape,
            &mut self.store,
            fake_detached,
            z_node,
            true,
        )?;
        let real_preds: Vec<NodeId> = d_real.iter().map(|r| r.prediction_map).collect();
        let fake_preds: Vec<NodeId> = d_fake.iter().map(|r| r.prediction_map).collect();
        let d_loss_node = adv_loss_discriminator_tape(&mut tape, &real_preds, &fake_preds);
        let d_loss = finite_or_abort(tape.scalar_value(d_loss_node), it, "d_loss")?;

        let gen_before = cfg
            .check_isolation
            .then(|| snapshot(&self.store, &self.gen_ids));
        tape.backward(d_loss_node, &mut self.store);
        if cfg.check_isolation {
            for &id in &self.gen_ids {
                assert!(
                    self.store.grad(id).is_none(),
                    "discriminator loss leaked a gradient into {}",
                    self.store.name(id)
                );
            }
        }
        self.opt_d.step(&mut self.store, &self.disc_ids);
        self.store.zero_grads();
        if let Some(before) = gen_before {
            assert_unchanged(&self.store, &self.gen_ids, &before, "generator");
        }

        // Generator update against the post-step discriminator.
        let d_fake_live = self.ensemble.discriminator_forward(
            &mut tape,
            &mut self.store,
            gen_out.final_image,
            z_node,
            true,
        )?;
        let live_preds: Vec<NodeId> = d_fake_live.iter().map(|r| r.prediction_map).collect();
        let (g_adv_node, adv_members) = adv_loss_generator_tape(&mut tape, &live_preds);
        let l_b_node = boundary_loss_tape(&mut tape, gen_out.boundary_prob, &batch.boundaries);

        // Perceptual features: the real side always comes from (x, c) and is
        // detached; the fake side depends on the configured pairing.
        let d_real_perc =
            self.ensemble
                .discriminator_forward(&mut tape, &mut self.store, x_node, c_node, true)?;
        let real_feats: Vec<Vec<NodeId>> = d_real_perc
            .iter()
            .map(|r| r.features.iter().map(|&f| tape.detach(f)).collect())
            .collect();
        let fake_feats: Vec<Vec<NodeId>> = match cfg.perceptual_mode {
            PerceptualMode::Printed => d_fake_live.iter().map(|r| r.features.clone()).collect(),
            PerceptualMode::Matched => {
                let g_c = self.bundle.generator_forward(
                    &mut tape,
                    &mut self.store,
                    &batch.c_maps,
                    true,
                )?;
                let d_gc = self.ensemble.discriminator_forward(
                    &mut tape,
                    &mut self.store,
                    g_c.final_image,
                    c_node,
                    true,
                )?;
                d_gc.iter().map(|r| r.features.clone()).collect()
            }
        };
        let (l_p_node, perc_members) = perceptual_loss_tape(&mut tape, &real_feats, &fake_feats);
        let total_node =
            total_generator_objective_tape(&mut tape, g_adv_node, l_b_node, l_p_node, cfg.weights);

        let g_adv = finite_or_abort(tape.scalar_value(g_adv_node), it, "g_adv")?;
        let l_b = finite_or_abort(tape.scalar_value(l_b_node), it, "l_b")?;
        let l_p = finite_or_abort(tape.scalar_value(l_p_node), it, "l_p")?;
        let total = finite_or_abort(tape.scalar_value(total_node), it, "total")?;

        let disc_before = cfg
            .check_isolation
            .then(|| snapshot(&self.store, &self.disc_ids));
        tape.backward(total_node, &mut self.store);
        self.opt_g.step(&mut self.store, &self.gen_ids);
        self.store.zero_grads();
        if let Some(before) = disc_before {
            assert_unchanged(&self.store, &self.disc_ids, &before, "discriminator");
        }

        let scalars = |nodes: &[NodeId]| -> [f64; 4] {
            let v: Vec<f64> = nodes.iter().map(|&n| tape.scalar_value(n)).collect();
            v.try_into().expect("one scalar per discriminator")
        };
        Ok(LossReport {
            d_loss,
            g_adv,
            l_b,
            l_p,
            total,
            adv_per_member: scalars(&adv_members),
            perc_per_member: scalars(&perc_members),
        })
    }
}

fn snapshot(store: &ParamStore, ids: &[ParamId]) -> Vec<ndarray::ArrayD<f32>> {
    ids.iter().map(|&id| store.value(id).clone()).collect()
}

fn assert_unchanged(
    store: &ParamStore,
    ids: &[ParamId],
    before: &[ndarray::ArrayD<f32>],
    side: &str,
) {
    for (&id, old) in ids.iter().zip(before) {
        assert_eq!(
            store.value(id),
            old,
            "{side} parameter {} moved during the opposing update",
            store.name(id)
        );
    }
}

fn prepare_gan_samples(cases: &[MultimodalCase]) -> Result<Vec<GanSample>, TrainingError> {
    if cases.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    let (h, w) = (cases[0].height(), cases[0].width());
    for c in cases {
        if (c.height(), c.width()) != (h, w) {
            return Err(NetworkError::MixedBatch(h, w, c.height(), c.width()).into());
        }
    }
    Ok(cases
        .iter()
        .map(|c| GanSample {
            image: normalized_stack(c),
            semantic: build_semantic_label_map(c),
        })
        .collect())
}

/// Draw the batch for one iteration. Sample choice, deformation fields and
/// therefore the whole iteration are pure functions of (seed, iteration).
fn assemble_gan_batch(samples: &[GanSample], cfg: &GanRunConfig, it: u64) -> GanBatch {
    let b = cfg.opt.batch_size;
    let (h, w) = {
        let s = samples[0].image.dim();
        (s.1, s.2)
    };
    let mut rng = derive_rng(cfg.opt.seed, "gan.batch", it);
    let mut real = Array4::zeros((b, NUM_MODALITIES, h, w));
    let mut c_maps = Vec::with_capacity(b);
    let mut z_maps = Vec::with_capacity(b);
    let mut boundaries = Vec::with_capacity(b);
    for slot in 0..b {
        let sample = &samples[rng.random_range(0..samples.len())];
        real.index_axis_mut(Axis(0), slot).assign(&sample.image);
        let deform = DeformParams {
            seed: derive_seed(cfg.opt.seed, "gan.deform", it * b as u64 + slot as u64),
            ..cfg.deform
        };
        // Deform the semantic map directly: during GAN training only the
        // conditioning map is needed, and both orders agree on it up to
        // which pixels carry brain code 5.
        let z = match cfg.deform_order {
            DeformOrder::RawFirst => {
                let raw = elastic_deform_codes(&sample.semantic.codes.mapv(|c| if c == 5 { 0 } else { c }), &deform);
                let brain = sample.semantic.codes.mapv(|c| c != 0);
                semantic_from_parts(&raw, &brain)
            }
            DeformOrder::SemanticFirst => elastic_deform_labels(&sample.semantic, &deform),
        };
        boundaries.push(extract_boundary(&complete_tumor_mask(&z)));
        z_maps.push(z);
        c_maps.push(sample.semantic.clone());
    }
    GanBatch {
        real,
        c_maps,
        z_maps,
        boundaries,
    }
}

/// A trained generator loaded for synthesis (parameters only; no optimizer
/// state is needed once training is over).
pub struct SynthSource {
    pub bundle: GeneratorBundle,
    pub store: ParamStore,
}

impl SynthSource {
    pub fn load(path: &Path, filters_div: usize) -> Result<Self, TrainingError> {
        let ck = Checkpoint::load(path)?;
        let mut store = ParamStore::new();
        let bundle = GeneratorBundle::new(&mut store, &Init::new(0), filters_div);
        unpack_store(&ck, &mut store)?;
        Ok(Self { bundle, store })
    }

    pub fn from_trainer(trainer: &GanTrainer) -> Self {
        let mut store = ParamStore::new();
        let bundle = GeneratorBundle::new(&mut store, &Init::new(0), trainer_filters_div(trainer));
        let mut ck = Checkpoint::new();
        pack_store(&mut ck, &trainer.store);
        unpack_store(&ck, &mut store).expect("trainer store holds every generator tensor");
        Self { bundle, store }
    }
}

fn trainer_filters_div(trainer: &GanTrainer) -> usize {
    // The coarse first layer is 64/filters_div output channels on 6 inputs.
    let id = trainer
        .store
        .ids_with_prefix("gen.coarse.first.conv.w")
        .into_iter()
        .next()
        .expect("coarse first conv present");
    64 / trainer.store.value(id).shape()[0]
}

/// Synthesize one augmented training pair: deform the case's labels, render
/// an image from the deformed semantic map with the trained generator, and
/// return (z-scored image, deformed raw labels 0-4).
pub fn synthesize_augmented_pair(
    synth: &mut SynthSource,
    case: &MultimodalCase,
    deform: &DeformParams,
    order: DeformOrder,
) -> Result<(Array3<f32>, Array2<u8>), TrainingError> {
    let (z, deformed_raw) = deformed_conditioning(case, deform, order);
    let mut tape = Tape::new();
    let out = synth
        .bundle
        .generator_forward(&mut tape, &mut synth.store, &[z], false)?;
    let image = tape.value(out.final_image);
    let (h, w) = (case.height(), case.width());
    let mut stacked = Array3::zeros((NUM_MODALITIES, h, w));
    for m in 0..NUM_MODALITIES {
        let channel = image
            .index_axis(Axis(0), 0)
            .index_axis(Axis(0), m)
            .to_owned()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("HW channel");
        stacked
            .index_axis_mut(Axis(0), m)
            .assign(&zscore_normalize(&channel));
    }
    Ok((stacked, deformed_raw))
}

/// Rotation in degrees, isotropic zoom about the image center with crop/pad
/// back to the original size, and optional horizontal flip. Images are
/// resampled bilinearly, labels with nearest neighbor; out-of-image samples
/// are zero.
pub fn apply_affine_augment(
    image: &Array3<f32>,
    labels: &Array2<u8>,
    angle_deg: f64,
    zoom: f64,
    flip: bool,
) -> (Array3<f32>, Array2<u8>) {
    let (ch, h, w) = image.dim();
    assert_eq!(labels.dim(), (h, w));
    let (ci, cj) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let source = |i: usize, j: usize| -> (f64, f64) {
        let mut x = j as f64 - cj;
        let y = i as f64 - ci;
        if flip {
            x = -x;
        }
        let sy = (-sin * x + cos * y) / zoom + ci;
        let sx = (cos * x + sin * y) / zoom + cj;
        (sy, sx)
    };
    let mut out_img = Array3::zeros((ch, h, w));
    let mut out_lab = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let (sy, sx) = source(i, j);
            for c in 0..ch {
                out_img[(c, i, j)] = bilinear_at(&image.index_axis(Axis(0), c), sy, sx);
            }
            let (ri, rj) = (sy.round(), sx.round());
            if (0.0..h as f64).contains(&ri) && (0.0..w as f64).contains(&rj) {
                out_lab[(i, j)] = labels[(ri as usize, rj as usize)];
            }
        }
    }
    (out_img, out_lab)
}

fn bilinear_at(img: &ndarray::ArrayView2<'_, f32>, sy: f64, sx: f64) -> f32 {
    let (h, w) = img.dim();
    let (i0, j0) = (sy.floor(), sx.floor());
    let (di, dj) = (sy - i0, sx - j0);
    let mut acc = 0.0f64;
    for (ii, wi) in [(i0, 1.0 - di), (i0 + 1.0, di)] {
        for (jj, wj) in [(j0, 1.0 - dj), (j0 + 1.0, dj)] {
            let weight = wi * wj;
            if weight == 0.0 {
                continue;
            }
            if (0.0..h as f64).contains(&ii) && (0.0..w as f64).contains(&jj) {
                acc += weight * img[(ii as usize, jj as usize)] as f64;
            }
        }
    }
    acc as f32
}

/// The traditional baseline: rotation ~ U(-10, 10) degrees, zoom ~
/// U(0.98, 1.02), horizontal flip with probability 0.5, all drawn from the
/// seed.
pub fn traditional_augment(
    image: &Array3<f32>,
    labels: &Array2<u8>,
    seed: u64,
) -> (Array3<f32>, Array2<u8>) {
    let mut rng = derive_rng(seed, "aug.traditional", 0);
    let angle = rng.random_range(-10.0..10.0);
    let zoom = rng.random_range(0.98..1.02);
    let flip = rng.random_bool(0.5);
    apply_affine_augment(image, labels, angle, zoom, flip)
}

pub const SEG_CSV_HEADER: &str = "epoch,dice_complete,dice_core,dice_enh";

/// One epoch's validation Dice row.
#[derive(Clone, Copy, Debug)]
pub struct EpochRow {
    pub epoch: u64,
    pub dice_complete: f64,
    pub dice_core: f64,
    pub dice_enh: f64,
}

impl EpochRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6}",
            self.epoch, self.dice_complete, self.dice_core, self.dice_enh
        )
    }
}

/// Run-level settings for [`train_segmentation`].
#[derive(Clone, Debug)]
pub struct SegRunConfig {
    pub opt: OptimizerConfig,
    pub filters_div: usize,
    pub augmentation: AugmentationMode,
    pub deform_order: DeformOrder,
    pub metrics_csv: Option<PathBuf>,
}

impl SegRunConfig {
    pub fn new(opt: OptimizerConfig) -> Self {
        Self {
            opt,
            filters_div: 1,
            augmentation: AugmentationMode::default(),
            deform_order: DeformOrder::default(),
            metrics_csv: None,
        }
    }
}

/// A trained segmentation model plus its per-epoch validation log and the
/// real/synthetic sample counters (instrumentation for the augmentation
/// contract).
pub struct SegOutcome {
    pub net: SegmentationNet,
    pub store: ParamStore,
    pub rows: Vec<EpochRow>,
    pub real_samples: u64,
    pub synthetic_samples: u64,
}

impl SegOutcome {
    pub fn save(&self, path: &Path) -> Result<(), TrainingError> {
        let mut ck = Checkpoint::new();
        pack_store(&mut ck, &self.store);
        ck.set_meta("kind", "seg");
        ck.set_meta("epochs", self.rows.len() as u64);
        ck.save(path)?;
        Ok(())
    }
}

/// Load a segmentation checkpoint for evaluation.
pub fn load_segmentation(
    path: &Path,
    filters_div: usize,
) -> Result<(SegmentationNet, ParamStore), TrainingError> {
    let ck = Checkpoint::load(path)?;
    let mut store = ParamStore::new();
    let net = SegmentationNet::new(&mut store, &Init::new(0), filters_div);
    unpack_store(&ck, &mut store)?;
    Ok((net, store))
}

/// Train the segmentation network with per-sample augmentation according to
/// the mode; validation cases are evaluated untouched after every epoch.
pub fn train_segmentation(
    train_cases: &[MultimodalCase],
    val_cases: &[MultimodalCase],
    cfg: &SegRunConfig,
    mut synth: Option<&mut SynthSource>,
) -> Result<SegOutcome, TrainingError> {
    if train_cases.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    if cfg.augmentation.mode == AugMode::Proposed && synth.is_none() {
        return Err(TrainingError::MissingCheckpoint);
    }
    let mut store = ParamStore::new();
    let net = SegmentationNet::new(&mut store, &Init::new(cfg.opt.seed), cfg.filters_div);
    let seg_ids: Vec<ParamId> = store
        .ids_with_prefix("seg.")
        .into_iter()
        .filter(|&id| store.is_trainable(id))
        .collect();
    let mut opt = cfg.opt.adam();
    let prepared: Vec<Array3<f32>> = train_cases.iter().map(normalized_stack).collect();
    let (h, w) = (train_cases[0].height(), train_cases[0].width());
    let seed = cfg.opt.seed;
    let mut rows = Vec::new();
    let (mut real_samples, mut synthetic_samples) = (0u64, 0u64);
    let mut counter = 0u64;

    for epoch in 1..=cfg.opt.iterations as u64 {
        let mut order: Vec<usize> = (0..train_cases.len()).collect();
        order.shuffle(&mut derive_rng(seed, "seg.shuffle", epoch));
        for chunk in order.chunks(cfg.opt.batch_size) {
            let b = chunk.len();
            let mut x = Array4::zeros((b, NUM_MODALITIES, h, w));
            let mut t = ndarray::Array3::<u8>::zeros((b, h, w));
            for (slot, &idx) in chunk.iter().enumerate() {
                counter += 1;
                let (img, lab) = augmented_sample(
                    &cfg.augmentation,
                    cfg.deform_order,
                    &prepared[idx],
                    &train_cases[idx],
                    seed,
                    counter,
                    synth.as_deref_mut(),
                    &mut real_samples,
                    &mut synthetic_samples,
                )?;
                x.index_axis_mut(Axis(0), slot).assign(&img);
                t.index_axis_mut(Axis(0), slot).assign(&lab);
            }
            let mut tape = Tape::new();
            let x_node = tape.leaf(x.into_dyn());
            let logits = net.forward(&mut tape, &mut store, x_node, true)?;
            let loss_node = tape.cross_entropy_mean(logits, t.into_dyn());
            finite_or_abort(tape.scalar_value(loss_node), counter, "cross_entropy")?;
            tape.backward(loss_node, &mut store);
            opt.step(&mut store, &seg_ids);
            store.zero_grads();
        }
        let report = evaluate(&net, &mut store, val_cases)?;
        let row = EpochRow {
            epoch,
            dice_complete: report.mean_dice[0],
            dice_core: report.mean_dice[1],
            dice_enh: report.mean_dice[2],
        };
        if let Some(csv) = &cfg.metrics_csv {
            append_csv_line(csv, SEG_CSV_HEADER, &row.csv_row())?;
        }
        rows.push(row);
    }
    Ok(SegOutcome {
        net,
        store,
        rows,
        real_samples,
        synthetic_samples,
    })
}

#[allow(clippy::too_many_arguments)]
fn augmented_sample(
    aug: &AugmentationMode,
    order: DeformOrder,
    prepared: &Array3<f32>,
    case: &MultimodalCase,
    seed: u64,
    counter: u64,
    synth: Option<&mut SynthSource>,
    real_samples: &mut u64,
    synthetic_samples: &mut u64,
) -> Result<(Array3<f32>, Array2<u8>), TrainingError> {
    match aug.mode {
        AugMode::None => {
            *real_samples += 1;
            Ok((prepared.clone(), case.labels.clone()))
        }
        AugMode::Traditional => {
            *real_samples += 1;
            Ok(traditional_augment(
                prepared,
                &case.labels,
                derive_seed(seed, "seg.aug", counter),
            ))
        }
        AugMode::Proposed => {
            let mut rng = derive_rng(seed, "seg.mix", counter);
            if rng.random_bool(aug.mix_probability) {
                *synthetic_samples += 1;
                let deform = DeformParams {
                    seed: derive_seed(seed, "seg.deform", counter),
                    ..aug.deform
                };
                synthesize_augmented_pair(
                    synth.expect("checked before training"),
                    case,
                    &deform,
                    order,
                )
            } else {
                *real_samples += 1;
                Ok((prepared.clone(), case.labels.clone()))
            }
        }
    }
}
