use rand::Rng;

use super::backbone::{spatial_tap, EncoderOutput, Tap, TapLayout};
use crate::nn::{BatchNorm, Conv2d, ConvSpec, ParamStore, Session, Unary, Var};

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
    relu6: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        p: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        relu6: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let spec = ConvSpec::grouped(stride, k / 2, groups);
        ConvBn {
            conv: Conv2d::new(store, &format!("{p}.0"), cin, cout, k, spec, false, rng),
            bn: BatchNorm::new(store, &format!("{p}.1"), cout),
            relu6,
        }
    }

    fn forward(&self, s: &mut Session, x: Var) -> Var {
        let h = self.conv.forward(s, x);
        let h = self.bn.forward(s, h);
        if self.relu6 {
            s.graph.unary(h, Unary::Relu6)
        } else {
            h
        }
    }
}

#[derive(Clone, Debug)]
struct InvertedResidual {
    layers: Vec<ConvBn>,
    residual: bool,
}

impl InvertedResidual {
    fn new(store: &mut ParamStore, p: &str, cin: usize, cout: usize, stride: usize, t: usize, rng: &mut impl Rng) -> Self {
        let hidden = cin * t;
        let mut layers = Vec::new();
        if t != 1 {
            layers.push(ConvBn::new(store, &format!("{p}conv.{}", layers.len()), cin, hidden, 1, 1, 1, true, rng));
        }
        let i = layers.len();
        layers.push(ConvBn::new(store, &format!("{p}conv.{i}"), hidden, hidden, 3, stride, hidden, true, rng));
        // The projection is a bare conv + bn with no activation.
        let j = i + 1;
        let proj = Conv2d::new(store, &format!("{p}conv.{j}"), hidden, cout, 1, ConvSpec::new(1, 0), false, rng);
        let bn = BatchNorm::new(store, &format!("{p}conv.{}", j + 1), cout);
        layers.push(ConvBn {
            conv: proj,
            bn,
            relu6: false,
        });
        InvertedResidual {
            layers,
            residual: stride == 1 && cin == cout,
        }
    }

    fn forward(&self, s: &mut Session, x: Var) -> Var {
        let mut h = x;
        for l in &self.layers {
            h = l.forward(s, h);
        }
        if self.residual {
            s.graph.add(h, x)
        } else {
            h
        }
    }
}

/// Inverted-residual network with a 1280-channel head convolution.
#[derive(Clone, Debug)]
pub struct MobileNet {
    stem: ConvBn,
    blocks: Vec<InvertedResidual>,
    head: ConvBn,
}

const V2_SETTINGS: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
];

impl MobileNet {
    pub fn v2(store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Self {
        let stem = ConvBn::new(store, &format!("{prefix}features.0"), 3, 32, 3, 2, 1, true, rng);
        let mut cin = 32;
        let mut blocks = Vec::new();
        for &(t, c, n, stride) in &V2_SETTINGS {
            for i in 0..n {
                let p = format!("{prefix}features.{}.", blocks.len() + 1);
                blocks.push(InvertedResidual::new(store, &p, cin, c, if i == 0 { stride } else { 1 }, t, rng));
                cin = c;
            }
        }
        let head = ConvBn::new(store, &format!("{prefix}features.{}", blocks.len() + 1), cin, 1280, 1, 1, 1, true, rng);
        MobileNet { stem, blocks, head }
    }

    pub fn forward(&self, s: &mut Session, x: Var, scope: &str) -> EncoderOutput {
        let mut taps = Vec::new();
        s.graph.set_scope(format!("{scope}features.0"));
        let mut h = self.stem.forward(s, x);
        for (i, b) in self.blocks.iter().enumerate() {
            s.graph.set_scope(format!("{scope}features.{}", i + 1));
            h = b.forward(s, h);
        }
        spatial_tap(&mut taps, "last_block", h);
        s.graph.set_scope(format!("{scope}features.{}", self.blocks.len() + 1));
        let h = self.head.forward(s, h);
        spatial_tap(&mut taps, "final_conv", h);
        let features = s.graph.global_avg_pool(h);
        taps.push(Tap {
            name: "features".into(),
            var: features,
            layout: TapLayout::Vector,
        });
        EncoderOutput { features, taps }
    }
}
