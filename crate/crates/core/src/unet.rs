//! U-Net segmentation network: a depth-4 encoder–decoder with skip
//! connections, 4 input modalities, 5 output classes (raw label codes 0–4).
//! Downsampling is 2×2 max pooling; upsampling is bilinear followed by a
//! 3×3 convolution; every convolution pair carries batch norm and ReLU.

use crate::networks::NetworkError;
use crate::nn::layers::{Activation, Conv2d, ConvBlock, Init, PadKind};
use crate::nn::{NodeId, ParamStore, Tape};

pub const NUM_INPUT_CHANNELS: usize = 4;
pub const NUM_CLASSES: usize = 5;
/// Four pooling stages must divide the input exactly.
pub const SEG_SPATIAL_DIVISOR: usize = 16;

/// Two (conv 3×3 → BN → ReLU) stages.
struct DoubleConv {
    a: ConvBlock,
    b: ConvBlock,
}

impl DoubleConv {
    fn new(store: &mut ParamStore, init: &Init, name: &str, cin: usize, cout: usize) -> Self {
        let mk = |store: &mut ParamStore, n: &str, ci| {
            ConvBlock::new(
                store,
                init,
                n,
                ci,
                cout,
                3,
                1,
                PadKind::Same,
                true,
                Activation::Relu,
            )
        };
        let a = mk(store, &format!("{name}.a"), cin);
        let b = mk(store, &format!("{name}.b"), cout);
        Self { a, b }
    }

    fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: NodeId, training: bool) -> NodeId {
        let y = self.a.forward(tape, store, x, training);
        self.b.forward(tape, store, y, training)
    }
}

/// Bilinear 2× upsampling followed by a 3×3 conv block.
struct UpSample {
    conv: ConvBlock,
}

impl UpSample {
    fn new(store: &mut ParamStore, init: &Init, name: &str, cin: usize, cout: usize) -> Self {
        let conv = ConvBlock::new(
            store,
            init,
            name,
            cin,
            cout,
            3,
            1,
            PadKind::Same,
            true,
            Activation::Relu,
        );
        Self { conv }
    }

    fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: NodeId, training: bool) -> NodeId {
        let up = tape.upsample2_bilinear(x);
        self.conv.forward(tape, store, up, training)
    }
}

pub struct SegmentationNet {
    encoders: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    ups: Vec<UpSample>,
    decoders: Vec<DoubleConv>,
    head: Conv2d,
}

impl SegmentationNet {
    /// `filters_div` shrinks the channel widths for test-size models.
    pub fn new(store: &mut ParamStore, init: &Init, filters_div: usize) -> Self {
        let f = |b: usize| (b / filters_div).max(1);
        let widths = [32, 64, 128, 256].map(f);
        let bottleneck_width = f(512);
        let mut encoders = Vec::new();
        let mut cin = NUM_INPUT_CHANNELS;
        for (i, &w) in widths.iter().enumerate() {
            encoders.push(DoubleConv::new(store, init, &format!("seg.enc{i}"), cin, w));
            cin = w;
        }
        let bottleneck = DoubleConv::new(store, init, "seg.bottleneck", cin, bottleneck_width);
        let mut ups = Vec::new();
        let mut decoders = Vec::new();
        let mut up_cin = bottleneck_width;
        for (i, &w) in widths.iter().enumerate().rev() {
            ups.push(UpSample::new(store, init, &format!("seg.up{i}"), up_cin, w));
            decoders.push(DoubleConv::new(
                store,
                init,
                &format!("seg.dec{i}"),
                2 * w,
                w,
            ));
            up_cin = w;
        }
        let head = Conv2d::new(
            store,
            init,
            "seg.head",
            widths[0],
            NUM_CLASSES,
            1,
            1,
            PadKind::Valid,
            true,
        );
        Self {
            encoders,
            bottleneck,
            ups,
            decoders,
            head,
        }
    }

    /// Per-pixel class logits with the same spatial dims as the input.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        x: NodeId,
        training: bool,
    ) -> Result<NodeId, NetworkError> {
        let (h, w) = {
            let s = tape.value(x).shape();
            (s[2], s[3])
        };
        if h % SEG_SPATIAL_DIVISOR != 0 || w % SEG_SPATIAL_DIVISOR != 0 {
            return Err(NetworkError::IndivisibleInput {
                height: h,
                width: w,
                divisor: SEG_SPATIAL_DIVISOR,
            });
        }
        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut t = x;
        for enc in &self.encoders {
            let s = enc.forward(tape, store, t, training);
            skips.push(s);
            t = tape.maxpool2(s);
        }
        t = self.bottleneck.forward(tape, store, t, training);
        for (up, dec) in self.ups.iter().zip(&self.decoders) {
            let skip = skips.pop().expect("one skip per decoder stage");
            let u = up.forward(tape, store, t, training);
            let cat = tape.concat_channels(u, skip);
            t = dec.forward(tape, store, cat, training);
        }
        Ok(self.head.forward(tape, store, t))
    }
}
