//! The synthesis networks: a coarse generator that sketches half-resolution
//! multimodal slices from a semantic map, a boundary-aware fine generator
//! that refines them at full resolution (fusing the coarse feature maps into
//! its trunk), and an ensemble of four conditional patch discriminators that
//! judge the result at scales 1, ½, ¼ and ⅛.

use ndarray::{Array4, Axis};
use thiserror::Error;

use crate::labels::{
    downsample_labels_nearest, one_hot, LabelError, SemanticLabelMap, NUM_SEMANTIC_CLASSES,
};
use crate::nn::kernels::Pad4;
use crate::nn::layers::{Activation, Conv2d, ConvBlock, Init, PadKind, ResidualBlock, UpBlock};
use crate::nn::{NodeId, ParamStore, Tape};

pub const NUM_MODALITIES: usize = 4;
pub const NUM_DISCRIMINATORS: usize = 4;
/// Full-resolution inputs must divide by this (half-res input + 4 stride-2
/// stages must round-trip exactly through the matching upsampling stages).
pub const SPATIAL_DIVISOR: usize = 32;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("input spatial dims {height}x{width} must be divisible by {divisor}")]
    IndivisibleInput {
        height: usize,
        width: usize,
        divisor: usize,
    },
    #[error("fusion shape mismatch: coarse features {coarse:?} vs fine trunk {fine:?}")]
    FusionShapeMismatch { coarse: Vec<usize>, fine: Vec<usize> },
    #[error("generator needs at least one semantic map")]
    EmptyBatch,
    #[error("semantic maps in a batch must share dims: {0}x{1} vs {2}x{3}")]
    MixedBatch(usize, usize, usize, usize),
    #[error(transparent)]
    Label(#[from] LabelError),
}

/// Filter width helper: the `filters_div` knob shrinks every channel count
/// for cheap test-size models while keeping the architecture shape.
fn fdiv(base: usize, div: usize) -> usize {
    debug_assert!(base.is_multiple_of(div), "filters_div must divide {base}");
    (base / div).max(1)
}

/// Stack per-case one-hot maps into an NCHW batch.
pub fn batch_one_hot(maps: &[SemanticLabelMap]) -> Array4<f32> {
    assert!(!maps.is_empty());
    let (h, w) = (maps[0].height(), maps[0].width());
    let mut out = Array4::zeros((maps.len(), NUM_SEMANTIC_CLASSES, h, w));
    for (n, m) in maps.iter().enumerate() {
        out.index_axis_mut(Axis(0), n).assign(&one_hot(m));
    }
    out
}

/// Half-resolution synthesis trunk:
/// c7s1-64, d128, d256, d512, d1024, 4×R1024, u512, u256, u128, u64, c7s1-4.
pub struct CoarseGenerator {
    first: ConvBlock,
    downs: Vec<ConvBlock>,
    res: Vec<ResidualBlock>,
    ups: Vec<UpBlock>,
    head: ConvBlock,
}

impl CoarseGenerator {
    pub fn new(store: &mut ParamStore, init: &Init, prefix: &str, filters_div: usize) -> Self {
        let f = |b| fdiv(b, filters_div);
        let first = ConvBlock::c7s1(
            store,
            init,
            &format!("{prefix}.first"),
            NUM_SEMANTIC_CLASSES,
            f(64),
            true,
            Activation::Relu,
        );
        let widths = [64, 128, 256, 512, 1024];
        let downs = (0..4)
            .map(|i| {
                ConvBlock::down(
                    store,
                    init,
                    &format!("{prefix}.down{i}"),
                    f(widths[i]),
                    f(widths[i + 1]),
                )
            })
            .collect();
        let res = (0..4)
            .map(|i| ResidualBlock::new(store, init, &format!("{prefix}.res{i}"), f(1024), f(1024)))
            .collect();
        let ups = (0..4)
            .map(|i| {
                UpBlock::new(
                    store,
                    init,
                    &format!("{prefix}.up{i}"),
                    f(widths[4 - i]),
                    f(widths[3 - i]),
                )
            })
            .collect();
        let head = ConvBlock::c7s1(
            store,
            init,
            &format!("{prefix}.head"),
            f(64),
            NUM_MODALITIES,
            false,
            Activation::Tanh,
        );
        Self {
            first,
            downs,
            res,
            ups,
            head,
        }
    }

    /// Run the half-resolution path. Returns `(image, features)` where
    /// `features` is the 64-channel activation feeding the image head — the
    /// map that gets fused into the fine trunk.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        cond_half: NodeId,
        training: bool,
    ) -> Result<(NodeId, NodeId), NetworkError> {
        let (h, w) = {
            let s = tape.value(cond_half).shape();
            (s[2], s[3])
        };
        let div = SPATIAL_DIVISOR / 2;
        if h % div != 0 || w % div != 0 {
            return Err(NetworkError::IndivisibleInput {
                height: h,
                width: w,
                divisor: div,
            });
        }
        let mut x = self.first.forward(tape, store, cond_half, training);
        for block in &self.downs {
            x = block.forward(tape, store, x, training);
        }
        for block in &self.res {
            x = block.forward(tape, store, x, training);
        }
        for block in &self.ups {
            x = block.forward(tape, store, x, training);
        }
        let image = self.head.forward(tape, store, x, training);
        Ok((image, x))
    }
}

#[derive(Debug)]
pub struct FineOutputs {
    pub final_image: NodeId,
    pub branch_image: NodeId,
    pub boundary_prob: NodeId,
}

/// Full-resolution refinement trunk with the boundary branch:
/// c7s1-32, d64, [+ coarse features], 3×R64, u32, then two heads
/// (c7s1-4 image, c7s1-2 boundary softmax) whose concatenation passes
/// through R64, R64 and a final c7s1-4.
pub struct FineGenerator {
    first: ConvBlock,
    down: ConvBlock,
    res: Vec<ResidualBlock>,
    up: UpBlock,
    image_head: ConvBlock,
    boundary_head: ConvBlock,
    post: Vec<ResidualBlock>,
    head: ConvBlock,
}

impl FineGenerator {
    pub fn new(store: &mut ParamStore, init: &Init, prefix: &str, filters_div: usize) -> Self {
        let f = |b| fdiv(b, filters_div);
        let first = ConvBlock::c7s1(
            store,
            init,
            &format!("{prefix}.first"),
            NUM_SEMANTIC_CLASSES,
            f(32),
            true,
            Activation::Relu,
        );
        let down = ConvBlock::down(store, init, &format!("{prefix}.down"), f(32), f(64));
        let res = (0..3)
            .map(|i| ResidualBlock::new(store, init, &format!("{prefix}.res{i}"), f(64), f(64)))
            .collect();
        let up = UpBlock::new(store, init, &format!("{prefix}.up"), f(64), f(32));
        let image_head = ConvBlock::c7s1(
            store,
            init,
            &format!("{prefix}.image_head"),
            f(32),
            NUM_MODALITIES,
            false,
            Activation::Tanh,
        );
        let boundary_head = ConvBlock::c7s1(
            store,
            init,
            &format!("{prefix}.boundary_head"),
            f(32),
            2,
            false,
            Activation::None,
        );
        // the concatenated branch outputs always have 4 + 2 = 6 channels
        let post = vec![
            ResidualBlock::new(store, init, &format!("{prefix}.post0"), 6, f(64)),
            ResidualBlock::new(store, init, &format!("{prefix}.post1"), f(64), f(64)),
        ];
        let head = ConvBlock::c7s1(
            store,
            init,
            &format!("{prefix}.head"),
            f(64),
            NUM_MODALITIES,
            false,
            Activation::Tanh,
        );
        Self {
            first,
            down,
            res,
            up,
            image_head,
            boundary_head,
            post,
            head,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        cond_full: NodeId,
        coarse_features: NodeId,
        training: bool,
    ) -> Result<FineOutputs, NetworkError> {
        let mut t = self.first.forward(tape, store, cond_full, training);
        t = self.down.forward(tape, store, t, training);
        let trunk_shape = tape.value(t).shape().to_vec();
        let coarse_shape = tape.value(coarse_features).shape().to_vec();
        if trunk_shape != coarse_shape {
            return Err(NetworkError::FusionShapeMismatch {
                coarse: coarse_shape,
                fine: trunk_shape,
            });
        }
        t = tape.add(t, coarse_features);
        for block in &self.res {
            t = block.forward(tape, store, t, training);
        }
        t = self.up.forward(tape, store, t, training);
        let branch_image = self.image_head.forward(tape, store, t, training);
        let boundary_logits = self.boundary_head.forward(tape, store, t, training);
        let boundary_prob = tape.softmax_channels(boundary_logits);
        let mut y = tape.concat_channels(branch_image, boundary_prob);
        for block in &self.post {
            y = block.forward(tape, store, y, training);
        }
        let final_image = self.head.forward(tape, store, y, training);
        Ok(FineOutputs {
            final_image,
            branch_image,
            boundary_prob,
        })
    }
}

/// All tensors produced by one generator pass, as tape nodes.
#[derive(Debug)]
pub struct GeneratorOutput {
    /// Refined multimodal image, 4×H×W in [−1,1].
    pub final_image: NodeId,
    /// The image branch before boundary concatenation (unsupervised).
    pub branch_image: NodeId,
    /// 2-channel softmax; channel 1 is the tumor-boundary probability.
    pub boundary_prob: NodeId,
    /// Half-resolution sketch from the coarse stage (for inspection).
    pub coarse_image: NodeId,
}

pub struct GeneratorBundle {
    pub coarse: CoarseGenerator,
    pub fine: FineGenerator,
}

impl GeneratorBundle {
    pub fn new(store: &mut ParamStore, init: &Init, filters_div: usize) -> Self {
        Self {
            coarse: CoarseGenerator::new(store, init, "gen.coarse", filters_div),
            fine: FineGenerator::new(store, init, "gen.fine", filters_div),
        }
    }

    /// Condition both stages on a batch of semantic maps: the coarse path
    /// sees a nearest-neighbor half-size one-hot map, the fine path the
    /// full-size one-hot map, and the coarse features are fused into the
    /// fine trunk.
    pub fn generator_forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        maps: &[SemanticLabelMap],
        training: bool,
    ) -> Result<GeneratorOutput, NetworkError> {
        if maps.is_empty() {
            return Err(NetworkError::EmptyBatch);
        }
        let (h, w) = (maps[0].height(), maps[0].width());
        for m in maps {
            if (m.height(), m.width()) != (h, w) {
                return Err(NetworkError::MixedBatch(h, w, m.height(), m.width()));
            }
        }
        if h % SPATIAL_DIVISOR != 0 || w % SPATIAL_DIVISOR != 0 {
            return Err(NetworkError::IndivisibleInput {
                height: h,
                width: w,
                divisor: SPATIAL_DIVISOR,
            });
        }
        let halves: Vec<SemanticLabelMap> = maps.iter().map(downsample_labels_nearest).collect();
        let cond_half = tape.leaf(batch_one_hot(&halves).into_dyn());
        let cond_full = tape.leaf(batch_one_hot(maps).into_dyn());
        let (coarse_image, features) = self.coarse.forward(tape, store, cond_half, training)?;
        let fine = self
            .fine
            .forward(tape, store, cond_full, features, training)?;
        Ok(GeneratorOutput {
            final_image: fine.final_image,
            branch_image: fine.branch_image,
            boundary_prob: fine.boundary_prob,
            coarse_image,
        })
    }
}

/// One conditional patch discriminator: C64, C128, C256, C512, then a
/// 4×4 stride-1 convolution to one channel and a sigmoid.
pub struct PatchDiscriminator {
    layers: Vec<ConvBlock>,
    final_conv: Conv2d,
}

impl PatchDiscriminator {
    pub fn new(store: &mut ParamStore, init: &Init, prefix: &str, filters_div: usize) -> Self {
        let f = |b| fdiv(b, filters_div);
        let widths = [
            NUM_MODALITIES + NUM_SEMANTIC_CLASSES,
            f(64),
            f(128),
            f(256),
            f(512),
        ];
        let layers = (0..4)
            .map(|i| {
                ConvBlock::new(
                    store,
                    init,
                    &format!("{prefix}.c{i}"),
                    widths[i],
                    widths[i + 1],
                    4,
                    2,
                    PadKind::CeilHalf,
                    true,
                    Activation::LeakyRelu(0.2),
                )
            })
            .collect();
        let final_conv = Conv2d::new(
            store,
            init,
            &format!("{prefix}.final"),
            f(512),
            1,
            4,
            1,
            PadKind::Valid,
            true,
        );
        Self { layers, final_conv }
    }

    /// Returns the sigmoid prediction map and the four post-activation
    /// feature tensors (used by the feature-matching loss).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        x: NodeId,
        training: bool,
    ) -> (NodeId, Vec<NodeId>) {
        let mut features = Vec::with_capacity(self.layers.len());
        let mut t = x;
        for block in &self.layers {
            t = block.forward(tape, store, t, training);
            features.push(t);
        }
        // the valid 4×4 needs at least 4 cells per axis; extend small maps
        // with zeros on the bottom/right
        let (h, w) = {
            let s = tape.value(t).shape();
            (s[2], s[3])
        };
        if h < 4 || w < 4 {
            t = tape.pad_zero(
                t,
                Pad4 {
                    top: 0,
                    left: 0,
                    bottom: 4usize.saturating_sub(h),
                    right: 4usize.saturating_sub(w),
                },
            );
        }
        let logits = self.final_conv.forward(tape, store, t);
        let pred = tape.sigmoid(logits);
        (pred, features)
    }
}

/// Per-member result of a discriminator pass.
#[derive(Debug)]
pub struct DiscriminatorRecord {
    /// 1×h_k×w_k patch predictions in (0,1).
    pub prediction_map: NodeId,
    /// Post-activation outputs of C64..C512, coarsest scale last.
    pub features: Vec<NodeId>,
}

/// Four architecturally identical discriminators with independent
/// parameters, fed the same 10-channel (image ⧺ one-hot condition) input
/// block-mean-downsampled by 1, 2, 4 and 8.
pub struct DiscriminatorEnsemble {
    members: Vec<PatchDiscriminator>,
}

impl DiscriminatorEnsemble {
    pub fn new(store: &mut ParamStore, init: &Init, filters_div: usize) -> Self {
        let members = (0..NUM_DISCRIMINATORS)
            .map(|k| PatchDiscriminator::new(store, init, &format!("disc.m{k}"), filters_div))
            .collect();
        Self { members }
    }

    pub fn discriminator_forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        image: NodeId,
        cond: NodeId,
        training: bool,
    ) -> Result<Vec<DiscriminatorRecord>, NetworkError> {
        let ishape = tape.value(image).shape().to_vec();
        let cshape = tape.value(cond).shape().to_vec();
        assert_eq!(
            (ishape[0], &ishape[2..]),
            (cshape[0], &cshape[2..]),
            "image and condition must share batch and spatial dims"
        );
        let (h, w) = (ishape[2], ishape[3]);
        let max_factor = 1 << (NUM_DISCRIMINATORS - 1);
        if h % max_factor != 0 || w % max_factor != 0 {
            return Err(NetworkError::IndivisibleInput {
                height: h,
                width: w,
                divisor: max_factor,
            });
        }
        let joint = tape.concat_channels(image, cond);
        let mut records = Vec::with_capacity(self.members.len());
        for (k, member) in self.members.iter().enumerate() {
            let input = if k == 0 {
                joint
            } else {
                tape.block_mean(joint, 1 << k)
            };
            let (prediction_map, features) = member.forward(tape, store, input, training);
            records.push(DiscriminatorRecord {
                prediction_map,
                features,
            });
        }
        Ok(records)
    }
}
