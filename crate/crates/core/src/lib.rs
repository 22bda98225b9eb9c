//! Multimodal brain-MR slice synthesis with a coarse-to-fine boundary-aware
//! conditional GAN, used as learned data augmentation for tumor segmentation.
//!
//! The pipeline: procedural phantom cases stand in for gated clinical data;
//! a two-stage generator synthesizes 4-modality slices from elastically
//! deformed semantic label maps while a four-scale discriminator ensemble
//! provides adversarial and feature-matching signals; synthetic pairs then
//! augment a U-Net segmentation trainer, evaluated with Dice / Precision /
//! Sensitivity over the standard complete / core / enhancing tumor regions.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod evaluation;
pub mod labels;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod training;
pub mod unet;
pub mod tensor;

pub use dataset::{
    generate_phantom_dataset, load_case, save_case, split_cases, zscore_normalize, DatasetError,
    Grade, MultimodalCase, PhantomConfig,
};
pub use labels::{
    build_semantic_label_map, complete_tumor_mask, downsample_bilinear, downsample_labels_nearest,
    elastic_deform_labels, extract_boundary, one_hot, BoundaryTarget, DeformParams, LabelError,
    SemanticLabelMap,
};
pub use tensor::{read_tensor, write_tensor, Dtype, Tensor, TensorError};
