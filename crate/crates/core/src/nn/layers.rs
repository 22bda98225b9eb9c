//! Reusable layer builders: convolutions with named parameters, batch norm,
//! residual and upsampling blocks. Construction registers parameters in a
//! [`ParamStore`]; `forward` appends ops to a [`Tape`].

use ndarray::{ArrayD, IxDyn};
use rand_distr::{Distribution, Normal};

use super::kernels::Pad4;
use super::{NodeId, ParamId, ParamStore, Tape};
use crate::rng::derive_rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Std-dev of the Gaussian used for all convolution weights.
pub const WEIGHT_STD: f32 = 0.02;

/// Deterministic parameter initialization: every tensor is drawn from a
/// stream derived from (seed, parameter name), so values do not depend on
/// construction order.
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn normal(&self, name: &str, shape: &[usize], std: f32) -> ArrayD<f32> {
        let mut rng = derive_rng(self.seed, name, 0);
        let dist = Normal::new(0.0f32, std).expect("valid std");
        ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(&mut rng))
    }
}

/// Spatial padding policy for a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadKind {
    /// k/2 on every side; stride-1 "same" output (odd kernels).
    Same,
    /// Asymmetric padding so a stride-2 output has ceil(n/2) cells.
    CeilHalf,
    /// No padding.
    Valid,
}

pub struct Conv2d {
    pub w: ParamId,
    /// Absent when the convolution feeds a batch norm: the norm's mean
    /// subtraction makes such a bias exactly gradient-free, so it would be
    /// untrainable dead weight.
    pub b: Option<ParamId>,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: PadKind,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &Init,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: PadKind,
        bias: bool,
    ) -> Self {
        if pad == PadKind::Same {
            assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        }
        let w = store.add_param(
            format!("{name}.w"),
            init.normal(&format!("{name}.w"), &[cout, cin, kernel, kernel], WEIGHT_STD),
        );
        let b = bias.then(|| store.add_param(format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout]))));
        Self {
            w,
            b,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let (h, w) = {
            let s = tape.value(x).shape();
            (s[2], s[3])
        };
        let pad = match self.pad {
            PadKind::Same => Pad4::uniform(self.kernel / 2),
            PadKind::CeilHalf => Pad4::ceil_half(self.kernel, h, w),
            PadKind::Valid => Pad4::uniform(0),
        };
        let wn = tape.param(store, self.w);
        let bn = match self.b {
            Some(b) => tape.param(store, b),
            None => tape.leaf(ArrayD::zeros(IxDyn(&[self.cout]))),
        };
        tape.conv2d(x, wn, bn, self.stride, pad)
    }
}

/// Transposed convolution, fixed 3×3 / stride 2 / pad 1 / output-pad 1:
/// exactly doubles both spatial dimensions. Always feeds a batch norm
/// here, so it carries no bias.
pub struct ConvT2d {
    pub w: ParamId,
    pub cout: usize,
}

impl ConvT2d {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, cin: usize, cout: usize) -> Self {
        let w = store.add_param(
            format!("{name}.w"),
            init.normal(&format!("{name}.w"), &[cin, cout, 3, 3], WEIGHT_STD),
        );
        Self { w, cout }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let wn = tape.param(store, self.w);
        let bn = tape.leaf(ArrayD::zeros(IxDyn(&[self.cout])));
        tape.conv_transpose2d(x, wn, bn)
    }
}

pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add_param(
            format!("{name}.gamma"),
            ArrayD::from_elem(IxDyn(&[channels]), 1.0f32),
        );
        let beta = store.add_param(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels])));
        let running_mean = store.add_buffer(
            format!("{name}.running_mean"),
            ArrayD::zeros(IxDyn(&[channels])),
        );
        let running_var = store.add_buffer(
            format!("{name}.running_var"),
            ArrayD::from_elem(IxDyn(&[channels]), 1.0f32),
        );
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        x: NodeId,
        training: bool,
    ) -> NodeId {
        let gn = tape.param(store, self.gamma);
        let bn = tape.param(store, self.beta);
        tape.batch_norm(
            store,
            x,
            gn,
            bn,
            self.running_mean,
            self.running_var,
            training,
            BN_MOMENTUM,
            BN_EPS,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    None,
    Relu,
    LeakyRelu(f32),
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: NodeId) -> NodeId {
        match self {
            Activation::None => x,
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu(s) => tape.leaky_relu(x, s),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// Convolution followed by optional batch norm and an activation.
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: Option<BatchNorm2d>,
    pub act: Activation,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &Init,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: PadKind,
        with_bn: bool,
        act: Activation,
    ) -> Self {
        let conv = Conv2d::new(
            store,
            init,
            &format!("{name}.conv"),
            cin,
            cout,
            kernel,
            stride,
            pad,
            !with_bn,
        );
        let bn = with_bn.then(|| BatchNorm2d::new(store, &format!("{name}.bn"), cout));
        Self { conv, bn, act }
    }

    /// 7×7 stride-1 block (`c7s1-k`).
    pub fn c7s1(
        store: &mut ParamStore,
        init: &Init,
        name: &str,
        cin: usize,
        cout: usize,
        with_bn: bool,
        act: Activation,
    ) -> Self {
        Self::new(store, init, name, cin, cout, 7, 1, PadKind::Same, with_bn, act)
    }

    /// 3×3 stride-2 downsampling block (`dk`).
    pub fn down(store: &mut ParamStore, init: &Init, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(
            store,
            init,
            name,
            cin,
            cout,
            3,
            2,
            PadKind::CeilHalf,
            true,
            Activation::Relu,
        )
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        x: NodeId,
        training: bool,
    ) -> NodeId {
        let mut y = self.conv.forward(tape, store, x);
        if let Some(bn) = &self.bn {
            y = bn.forward(tape, store, y, training);
        }
        self.act.apply(tape, y)
    }
}

/// Two 3×3 convolutions with batch norm; identity skip, or a 1×1
/// projection (with its own batch norm) when the channel count changes.
pub struct ResidualBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    proj: Option<(Conv2d, BatchNorm2d)>,
}

impl ResidualBlock {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, cin: usize, cout: usize) -> Self {
        let conv1 = Conv2d::new(
            store, init, &format!("{name}.conv1"), cin, cout, 3, 1, PadKind::Same, false,
        );
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), cout);
        let conv2 = Conv2d::new(
            store, init, &format!("{name}.conv2"), cout, cout, 3, 1, PadKind::Same, false,
        );
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), cout);
        let proj = (cin != cout).then(|| {
            (
                Conv2d::new(
                    store, init, &format!("{name}.proj"), cin, cout, 1, 1, PadKind::Valid, false,
                ),
                BatchNorm2d::new(store, &format!("{name}.proj_bn"), cout),
            )
        });
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            proj,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        x: NodeId,
        training: bool,
    ) -> NodeId {
        let mut y = self.conv1.forward(tape, store, x);
        y = self.bn1.forward(tape, store, y, training);
        y = tape.relu(y);
        y = self.conv2.forward(tape, store, y);
        y = self.bn2.forward(tape, store, y, training);
        let skip = match &self.proj {
            Some((conv, bn)) => {
                let p = conv.forward(tape, store, x);
                bn.forward(tape, store, p, training)
            }
            None => x,
        };
        let sum = tape.add(y, skip);
        tape.relu(sum)
    }
}

/// Fractional-stride upsampling block (`uk`): transposed 3×3 conv that
/// doubles the resolution, then batch norm and ReLU.
pub struct UpBlock {
    convt: ConvT2d,
    bn: BatchNorm2d,
}

impl UpBlock {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, cin: usize, cout: usize) -> Self {
        let convt = ConvT2d::new(store, init, &format!("{name}.convt"), cin, cout);
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), cout);
        Self { convt, bn }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        x: NodeId,
        training: bool,
    ) -> NodeId {
        let y = self.convt.forward(tape, store, x);
        let y = self.bn.forward(tape, store, y, training);
        tape.relu(y)
    }
}
