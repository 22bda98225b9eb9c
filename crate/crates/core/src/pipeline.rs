//! Command layer: each public function implements one CLI subcommand as a
//! composition of the stage modules, reading everything from the validated
//! config and writing only under the caller's output directory.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::config::{ConfigError, ExperimentConfig};
use crate::dataset::{
    generate_phantom_dataset, load_case, save_case, split_cases, DatasetError, Grade,
    MultimodalCase,
};
use crate::evaluation::{evaluate, render_metrics_table, EvalReport};
use crate::labels::{complete_tumor_mask, extract_boundary, semantic_from_parts, DeformParams};
use crate::networks::NetworkError;
use crate::rng::derive_seed;
use crate::tensor::{write_tensor, Tensor, TensorError};
use crate::training::{
    load_segmentation, synthesize_augmented_pair, train_segmentation, AugMode, GanRunConfig,
    GanTrainer, SegRunConfig, SynthSource, TrainingError,
};

/// Command failures split by exit code: configuration problems (exit 2)
/// versus runtime failures (exit 3).
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Runtime(_) => 3,
        }
    }
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

impl From<TrainingError> for PipelineError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::MissingCheckpoint => PipelineError::Config(e.to_string()),
            other => PipelineError::Runtime(other.to_string()),
        }
    }
}

impl From<DatasetError> for PipelineError {
    fn from(e: DatasetError) -> Self {
        PipelineError::Runtime(e.to_string())
    }
}

impl From<NetworkError> for PipelineError {
    fn from(e: NetworkError) -> Self {
        PipelineError::Runtime(e.to_string())
    }
}

impl From<CheckpointError> for PipelineError {
    fn from(e: CheckpointError) -> Self {
        PipelineError::Runtime(e.to_string())
    }
}

impl From<TensorError> for PipelineError {
    fn from(e: TensorError) -> Self {
        PipelineError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Runtime(e.to_string())
    }
}

/// Where a run reads its dataset and writes its artifacts.
pub struct Workspace {
    pub out_dir: PathBuf,
    pub data_dir: PathBuf,
}

impl Workspace {
    /// Relative `data.dir` values resolve under the output directory, so a
    /// run touches nothing outside it.
    pub fn new(cfg: &ExperimentConfig, out_dir: &Path) -> Self {
        let data_dir = if cfg.data_dir.is_absolute() {
            cfg.data_dir.clone()
        } else {
            out_dir.join(&cfg.data_dir)
        };
        Self {
            out_dir: out_dir.to_path_buf(),
            data_dir,
        }
    }

    pub fn gan_checkpoint(&self) -> PathBuf {
        self.out_dir.join("gan_final.ckpt")
    }

    pub fn seg_checkpoint(&self) -> PathBuf {
        self.out_dir.join("seg_final.ckpt")
    }
}

/// Load every case directory under the data dir, sorted by name.
pub fn load_dataset(data_dir: &Path) -> Result<Vec<MultimodalCase>, PipelineError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(data_dir)
        .map_err(|e| {
            PipelineError::Runtime(format!("cannot read data dir {}: {e}", data_dir.display()))
        })?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(PipelineError::Runtime(format!(
            "data dir {} holds no case directories",
            data_dir.display()
        )));
    }
    dirs.iter()
        .map(|d| load_case(d).map_err(PipelineError::from))
        .collect()
}

/// Deterministic train/val/test split of the loaded cases.
pub fn split_dataset(
    cfg: &ExperimentConfig,
    cases: Vec<MultimodalCase>,
) -> (
    Vec<MultimodalCase>,
    Vec<MultimodalCase>,
    Vec<MultimodalCase>,
) {
    let (train_idx, val_idx, test_idx) = split_cases(
        cases.len(),
        cfg.val_fraction,
        cfg.test_fraction,
        cfg.split_seed(),
    );
    let mut slots: Vec<Option<MultimodalCase>> = cases.into_iter().map(Some).collect();
    let take = |idx: &[usize], slots: &mut Vec<Option<MultimodalCase>>| {
        idx.iter()
            .map(|&i| slots[i].take().expect("split indices are disjoint"))
            .collect::<Vec<_>>()
    };
    let train = take(&train_idx, &mut slots);
    let val = take(&val_idx, &mut slots);
    let test = take(&test_idx, &mut slots);
    (train, val, test)
}

/// Generate the phantom dataset into the data dir, one directory per case.
pub fn cmd_phantom(cfg: &ExperimentConfig, out_dir: &Path, verbose: bool) -> Result<(), PipelineError> {
    let ws = Workspace::new(cfg, out_dir);
    let cases = generate_phantom_dataset(&cfg.phantom())?;
    fs::create_dir_all(&ws.data_dir)?;
    for case in &cases {
        save_case(case, ws.data_dir.join(&case.case_id))?;
    }
    if verbose {
        eprintln!(
            "wrote {} cases under {}",
            cases.len(),
            ws.data_dir.display()
        );
    }
    println!("phantom: {} cases -> {}", cases.len(), ws.data_dir.display());
    Ok(())
}

/// Adversarial training on the training split; writes the loss CSV, cadence
/// checkpoints, and the final checkpoint. Pass `resume` to continue a run.
pub fn cmd_train_gan(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    verbose: bool,
) -> Result<(), PipelineError> {
    let ws = Workspace::new(cfg, out_dir);
    let (train, _, _) = split_dataset(cfg, load_dataset(&ws.data_dir)?);
    let mut run = GanRunConfig::new(cfg.gan);
    run.weights = cfg.loss_weights();
    run.perceptual_mode = cfg.perceptual_mode;
    run.deform = cfg.deform();
    run.deform_order = cfg.deform_order;
    run.checkpoint_every = cfg.gan_checkpoint_every;
    run.checkpoint_dir = Some(ws.out_dir.join("checkpoints"));
    run.loss_csv = Some(ws.out_dir.join("gan_loss.csv"));
    fs::create_dir_all(&ws.out_dir)?;
    let mut trainer = match resume {
        Some(path) => GanTrainer::load(path, cfg.gan_filters_div, &cfg.gan)?,
        None => GanTrainer::new(
            derive_seed(cfg.seed, "stage.gan.init", 0),
            cfg.gan_filters_div,
            &cfg.gan,
        ),
    };
    let start = trainer.iteration;
    let rows = trainer.train(&train, &run)?;
    if verbose {
        for (it, r) in &rows {
            eprintln!("iteration {it}: {}", r.csv_row(*it));
        }
    }
    trainer.save(&ws.gan_checkpoint())?;
    println!(
        "train-gan: iterations {}..={} on {} cases -> {}",
        start + 1,
        trainer.iteration,
        train.len(),
        ws.gan_checkpoint().display()
    );
    Ok(())
}

/// Synthesize `cfg.synth_count` cases from deformed training labels, each
/// written as a case directory plus the boundary target used to condition
/// the generator.
pub fn cmd_synth(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    checkpoint: &Path,
    verbose: bool,
) -> Result<(), PipelineError> {
    let ws = Workspace::new(cfg, out_dir);
    let (train, _, _) = split_dataset(cfg, load_dataset(&ws.data_dir)?);
    let mut synth = SynthSource::load(checkpoint, cfg.gan_filters_div)?;
    let synth_dir = ws.out_dir.join("synth");
    fs::create_dir_all(&synth_dir)?;
    for i in 0..cfg.synth_count {
        let source = &train[i % train.len()];
        let deform = DeformParams {
            seed: derive_seed(cfg.seed, "stage.synth", i as u64),
            ..cfg.deform()
        };
        let (image, labels) =
            synthesize_augmented_pair(&mut synth, source, &deform, cfg.deform_order)?;
        let case = MultimodalCase::new(
            format!("synth_{i:04}"),
            Grade::Phantom,
            image.index_axis(ndarray::Axis(0), 0).to_owned(),
            image.index_axis(ndarray::Axis(0), 1).to_owned(),
            image.index_axis(ndarray::Axis(0), 2).to_owned(),
            image.index_axis(ndarray::Axis(0), 3).to_owned(),
            labels.clone(),
        )?;
        let dir = synth_dir.join(&case.case_id);
        save_case(&case, &dir)?;
        let semantic = semantic_from_parts(&labels, &source.brain_mask());
        let boundary = extract_boundary(&complete_tumor_mask(&semantic));
        write_tensor(
            &Tensor::F32(boundary.mask.into_dyn()),
            dir.join("boundary.tnsr"),
        )?;
        if verbose {
            eprintln!("synthesized {} from {}", case.case_id, source.case_id);
        }
    }
    println!(
        "synth: {} cases -> {}",
        cfg.synth_count,
        synth_dir.display()
    );
    Ok(())
}

/// Train the segmentation network under the requested augmentation mode.
pub fn cmd_train_seg(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    mode: Option<AugMode>,
    checkpoint: Option<&Path>,
    verbose: bool,
) -> Result<(), PipelineError> {
    let ws = Workspace::new(cfg, out_dir);
    let (train, val, _) = split_dataset(cfg, load_dataset(&ws.data_dir)?);
    let mode = mode.unwrap_or(cfg.aug_mode);
    let mut synth = load_synth_source(cfg, mode, checkpoint)?;
    let mut run = SegRunConfig::new(cfg.seg);
    run.filters_div = cfg.seg_filters_div;
    run.augmentation = cfg.augmentation();
    run.augmentation.mode = mode;
    run.deform_order = cfg.deform_order;
    run.metrics_csv = Some(ws.out_dir.join("seg_metrics.csv"));
    fs::create_dir_all(&ws.out_dir)?;
    let outcome = train_segmentation(&train, &val, &run, synth.as_mut())?;
    if verbose {
        for row in &outcome.rows {
            eprintln!("epoch {}: {}", row.epoch, row.csv_row());
        }
        eprintln!(
            "samples: {} real, {} synthetic",
            outcome.real_samples, outcome.synthetic_samples
        );
    }
    outcome.save(&ws.seg_checkpoint())?;
    let last = outcome.rows.last().expect("at least one epoch");
    println!(
        "train-seg: mode {mode}, {} epochs, final val dice {:.4}/{:.4}/{:.4} -> {}",
        outcome.rows.len(),
        last.dice_complete,
        last.dice_core,
        last.dice_enh,
        ws.seg_checkpoint().display()
    );
    Ok(())
}

fn load_synth_source(
    cfg: &ExperimentConfig,
    mode: AugMode,
    checkpoint: Option<&Path>,
) -> Result<Option<SynthSource>, PipelineError> {
    if mode != AugMode::Proposed {
        return Ok(None);
    }
    let path = checkpoint.ok_or_else(|| {
        PipelineError::Config(
            "proposed augmentation requires --checkpoint pointing at a generator archive".into(),
        )
    })?;
    if !path.is_file() {
        return Err(PipelineError::Config(format!(
            "generator checkpoint {} does not exist",
            path.display()
        )));
    }
    Ok(Some(SynthSource::load(path, cfg.gan_filters_div)?))
}

/// Evaluate a segmentation checkpoint on the test split; writes the CSV and
/// prints the metrics table.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    checkpoint: &Path,
) -> Result<(), PipelineError> {
    let ws = Workspace::new(cfg, out_dir);
    let (_, _, test) = split_dataset(cfg, load_dataset(&ws.data_dir)?);
    if test.is_empty() {
        return Err(PipelineError::Config(
            "test split is empty; raise data.test_fraction or data.num_cases".into(),
        ));
    }
    let (net, mut store) = load_segmentation(checkpoint, cfg.seg_filters_div)?;
    let report = evaluate(&net, &mut store, &test)?;
    fs::create_dir_all(&ws.out_dir)?;
    fs::write(ws.out_dir.join("eval.csv"), report.to_csv())?;
    print!("{}", report.to_table("test"));
    Ok(())
}

pub const COMPARE_CSV_HEADER: &str = "mode,seed,dice_complete,dice_core,dice_enh,\
     precision_complete,precision_core,precision_enh,\
     sensitivity_complete,sensitivity_core,sensitivity_enh";

/// Train the segmentation network under all three augmentation modes over
/// `seeds` seeds each and print a three-row comparison of test metrics.
pub fn cmd_compare(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    seeds: usize,
    checkpoint: Option<&Path>,
    verbose: bool,
) -> Result<(), PipelineError> {
    if seeds == 0 {
        return Err(PipelineError::Config("--seeds must be positive".into()));
    }
    let ws = Workspace::new(cfg, out_dir);
    let (train, val, test) = split_dataset(cfg, load_dataset(&ws.data_dir)?);
    if test.is_empty() {
        return Err(PipelineError::Config(
            "test split is empty; raise data.test_fraction or data.num_cases".into(),
        ));
    }
    fs::create_dir_all(&ws.out_dir)?;
    let csv_path = ws.out_dir.join("compare.csv");
    let mut table_rows = Vec::new();
    for (mode_idx, mode) in [AugMode::None, AugMode::Traditional, AugMode::Proposed]
        .into_iter()
        .enumerate()
    {
        let mut synth = load_synth_source(cfg, mode, checkpoint)?;
        let mut mean = [0.0f64; 9];
        for s in 0..seeds {
            let mut run = SegRunConfig::new(cfg.seg);
            run.opt.seed = derive_seed(
                cfg.seed,
                "stage.compare",
                (mode_idx * 1_000 + s) as u64,
            );
            run.filters_div = cfg.seg_filters_div;
            run.augmentation = cfg.augmentation();
            run.augmentation.mode = mode;
            run.deform_order = cfg.deform_order;
            let outcome = train_segmentation(&train, &val, &run, synth.as_mut())?;
            let (net, mut store) = (outcome.net, outcome.store);
            let report = evaluate(&net, &mut store, &test)?;
            let row = report.table_row();
            record_compare_row(&csv_path, mode, s, &row)?;
            if verbose {
                eprintln!("mode {mode} seed {s}: test dice {:.4}", row[0]);
            }
            for (acc, v) in mean.iter_mut().zip(row) {
                *acc += v / seeds as f64;
            }
        }
        table_rows.push((mode.to_string(), mean));
    }
    print!("{}", render_metrics_table(&table_rows));
    Ok(())
}

fn record_compare_row(
    path: &Path,
    mode: AugMode,
    seed: usize,
    row: &[f64; 9],
) -> Result<(), PipelineError> {
    let values: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
    crate::training::append_csv_line(
        path,
        COMPARE_CSV_HEADER,
        &format!("{mode},{seed},{}", values.join(",")),
    )?;
    Ok(())
}

/// Re-export for the CLI: the full EvalReport of a trained net on given
/// cases (used by tests to avoid re-reading CSVs).
pub fn evaluate_cases(
    net: &crate::unet::SegmentationNet,
    store: &mut crate::nn::ParamStore,
    cases: &[MultimodalCase],
) -> Result<EvalReport, PipelineError> {
    Ok(evaluate(net, store, cases)?)
}
