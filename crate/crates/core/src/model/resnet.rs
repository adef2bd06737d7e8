use rand::Rng;

use super::backbone::{spatial_tap, EncoderOutput, Tap, TapLayout};
use crate::nn::{BatchNorm, Conv2d, ConvSpec, ParamStore, Session, Var};

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        conv: &str,
        bn: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ConvBn {
            conv: Conv2d::new(store, conv, cin, cout, k, ConvSpec::new(stride, k / 2), false, rng),
            bn: BatchNorm::new(store, bn, cout),
        }
    }

    fn forward(&self, s: &mut Session, x: Var) -> Var {
        let h = self.conv.forward(s, x);
        self.bn.forward(s, h)
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    reduce: ConvBn,
    spatial: ConvBn,
    expand: ConvBn,
    shortcut: Option<ConvBn>,
}

impl Bottleneck {
    fn new(store: &mut ParamStore, p: &str, cin: usize, width: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let cout = width * 4;
        let shortcut = (stride != 1 || cin != cout)
            .then(|| ConvBn::new(store, &format!("{p}downsample.0"), &format!("{p}downsample.1"), cin, cout, 1, stride, rng));
        Bottleneck {
            reduce: ConvBn::new(store, &format!("{p}conv1"), &format!("{p}bn1"), cin, width, 1, 1, rng),
            spatial: ConvBn::new(store, &format!("{p}conv2"), &format!("{p}bn2"), width, width, 3, stride, rng),
            expand: ConvBn::new(store, &format!("{p}conv3"), &format!("{p}bn3"), width, cout, 1, 1, rng),
            shortcut,
        }
    }

    fn forward(&self, s: &mut Session, x: Var) -> Var {
        let h = self.reduce.forward(s, x);
        let h = s.graph.relu(h);
        let h = self.spatial.forward(s, h);
        let h = s.graph.relu(h);
        let h = self.expand.forward(s, h);
        let skip = match &self.shortcut {
            Some(sc) => sc.forward(s, x),
            None => x,
        };
        let sum = s.graph.add(h, skip);
        s.graph.relu(sum)
    }
}

/// Bottleneck residual network producing globally pooled features.
#[derive(Clone, Debug)]
pub struct ResNet {
    stem: ConvBn,
    stages: Vec<Vec<Bottleneck>>,
    feature_dim: usize,
}

impl ResNet {
    pub fn resnet50(store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Self {
        Self::new(store, prefix, &[3, 4, 6, 3], rng)
    }

    pub fn new(store: &mut ParamStore, prefix: &str, blocks: &[usize], rng: &mut impl Rng) -> Self {
        let stem = ConvBn::new(store, &format!("{prefix}conv1"), &format!("{prefix}bn1"), 3, 64, 7, 2, rng);
        let mut cin = 64;
        let mut stages = Vec::new();
        for (i, &count) in blocks.iter().enumerate() {
            let width = 64 << i;
            let mut stage = Vec::new();
            for b in 0..count {
                let stride = if b == 0 && i > 0 { 2 } else { 1 };
                let p = format!("{prefix}layer{}.{b}.", i + 1);
                stage.push(Bottleneck::new(store, &p, cin, width, stride, rng));
                cin = width * 4;
            }
            stages.push(stage);
        }
        ResNet {
            stem,
            stages,
            feature_dim: cin,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn forward(&self, s: &mut Session, x: Var, scope: &str) -> EncoderOutput {
        let mut taps = Vec::new();
        s.graph.set_scope(format!("{scope}conv1"));
        let h = self.stem.forward(s, x);
        let h = s.graph.relu(h);
        let mut h = s.graph.max_pool(h, 3, 2, 1);
        for (i, stage) in self.stages.iter().enumerate() {
            let name = format!("layer{}", i + 1);
            s.graph.set_scope(format!("{scope}{name}"));
            for block in stage {
                h = block.forward(s, h);
            }
            spatial_tap(&mut taps, name, h);
        }
        s.graph.set_scope(format!("{scope}pool"));
        let features = s.graph.global_avg_pool(h);
        taps.push(Tap {
            name: "features".into(),
            var: features,
            layout: TapLayout::Vector,
        });
        EncoderOutput { features, taps }
    }
}
