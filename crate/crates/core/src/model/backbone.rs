use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mobilenet::MobileNet;
use super::resnet::ResNet;
use super::transformer::VisionTransformer;
use crate::error::{Error, Result};
use crate::geometry::{ImageBuffer, CHANNELS};
use crate::nn::{ConvSpec, Conv2d, Linear, ParamStore, Session, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneFamily {
    /// 50-layer bottleneck residual network.
    ResidualConv,
    /// Base-size patch transformer with layer scale and mean pooling.
    ImageTransformer,
    /// Inverted-residual depthwise network.
    MobileConv,
    /// Two small convolutions on an 8x average-pooled input.
    TinyTest,
}

impl BackboneFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackboneFamily::ResidualConv => "residual-conv",
            BackboneFamily::ImageTransformer => "image-transformer",
            BackboneFamily::MobileConv => "mobile-conv",
            BackboneFamily::TinyTest => "tiny-test",
        }
    }

    /// Feature width fixed by the architecture, if any.
    pub fn native_dim(&self) -> Option<usize> {
        match self {
            BackboneFamily::ResidualConv => Some(2048),
            BackboneFamily::ImageTransformer => Some(768),
            BackboneFamily::MobileConv => Some(1280),
            BackboneFamily::TinyTest => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub family: BackboneFamily,
    pub feature_dim: usize,
    /// Weights to load after initialization, keyed by encoder-relative name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_checkpoint: Option<PathBuf>,
    /// Block count override for the transformer family (default 12).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
}

impl BackboneSpec {
    pub fn tiny(feature_dim: usize) -> Self {
        BackboneSpec {
            family: BackboneFamily::TinyTest,
            feature_dim,
            pretrained_checkpoint: None,
            depth: None,
        }
    }

    pub fn of_family(family: BackboneFamily) -> Self {
        BackboneSpec {
            family,
            feature_dim: family.native_dim().unwrap_or(16),
            pretrained_checkpoint: None,
            depth: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 8 {
            return Err(Error::Config(format!("feature_dim must be at least 8, got {}", self.feature_dim)));
        }
        if let Some(native) = self.family.native_dim() {
            if native != self.feature_dim {
                return Err(Error::Config(format!(
                    "{:?} backbones produce {native}-dim features, config says {}",
                    self.family, self.feature_dim
                )));
            }
        }
        match (self.family, self.depth) {
            (_, None) => {}
            (BackboneFamily::ImageTransformer, Some(d)) if (1..=24).contains(&d) => {}
            (BackboneFamily::ImageTransformer, Some(d)) => {
                return Err(Error::Config(format!("transformer depth {d} outside 1..=24")));
            }
            (family, Some(_)) => {
                return Err(Error::Config(format!("depth override is only valid for image-transformer, not {family:?}")));
            }
        }
        Ok(())
    }
}

/// How a tap's activation is laid out, for Grad-CAM.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TapLayout {
    /// `[N, C, H, W]`.
    Spatial,
    /// `[N, T, C]` where tokens `skip..` form a `grid_h x grid_w` grid.
    Tokens { grid_h: usize, grid_w: usize, skip: usize },
    /// `[N, F]`, no spatial structure.
    Vector,
}

/// A named intermediate activation recorded during the forward pass.
#[derive(Clone, Debug)]
pub struct Tap {
    pub name: String,
    pub var: Var,
    pub layout: TapLayout,
}

pub struct EncoderOutput {
    pub features: Var,
    pub taps: Vec<Tap>,
}

impl EncoderOutput {
    pub fn tap(&self, name: &str) -> Option<&Tap> {
        self.taps.iter().find(|t| t.name == name)
    }
}

pub(crate) fn spatial_tap(taps: &mut Vec<Tap>, name: impl Into<String>, var: Var) {
    taps.push(Tap {
        name: name.into(),
        var,
        layout: TapLayout::Spatial,
    });
}

const TINY_POOL: usize = 8;
const TINY_CH1: usize = 8;
const TINY_CH2: usize = 8;
const TINY_INPUT: usize = 224;

/// The small deterministic test backbone.
#[derive(Clone, Debug)]
pub struct TinyNet {
    conv1: Conv2d,
    conv2: Conv2d,
    proj: Linear,
}

impl TinyNet {
    fn new(store: &mut ParamStore, prefix: &str, feature_dim: usize, rng: &mut impl Rng) -> Self {
        let grid = TINY_INPUT / TINY_POOL / 2;
        TinyNet {
            conv1: Conv2d::new(store, &format!("{prefix}conv1"), 3, TINY_CH1, 3, ConvSpec::new(1, 1), true, rng),
            conv2: Conv2d::new(store, &format!("{prefix}conv2"), TINY_CH1, TINY_CH2, 3, ConvSpec::new(2, 1), true, rng),
            proj: Linear::new(store, &format!("{prefix}proj"), TINY_CH2 * grid * grid, feature_dim, rng),
        }
    }

    fn forward(&self, s: &mut Session, x: Var, scope: &str) -> EncoderOutput {
        let mut taps = Vec::new();
        s.graph.set_scope(format!("{scope}conv1"));
        let h = self.conv1.forward(s, x);
        let h = s.graph.relu(h);
        spatial_tap(&mut taps, "conv1", h);
        s.graph.set_scope(format!("{scope}conv2"));
        let h = self.conv2.forward(s, h);
        let h = s.graph.relu(h);
        spatial_tap(&mut taps, "conv2", h);
        s.graph.set_scope(format!("{scope}proj"));
        let flat = s.graph.flatten(h);
        let features = self.proj.forward(s, flat);
        taps.push(Tap {
            name: "features".into(),
            var: features,
            layout: TapLayout::Vector,
        });
        EncoderOutput { features, taps }
    }
}

/// Any of the supported backbone architectures.
#[derive(Clone, Debug)]
pub enum Backbone {
    Tiny(TinyNet),
    Residual(Box<ResNet>),
    Mobile(Box<MobileNet>),
    Transformer(Box<VisionTransformer>),
}

impl Backbone {
    /// Registers parameters under `prefix` (which should end with `.`).
    pub fn build(spec: &BackboneSpec, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        Ok(match spec.family {
            BackboneFamily::TinyTest => Backbone::Tiny(TinyNet::new(store, prefix, spec.feature_dim, rng)),
            BackboneFamily::ResidualConv => Backbone::Residual(Box::new(ResNet::resnet50(store, prefix, rng))),
            BackboneFamily::MobileConv => Backbone::Mobile(Box::new(MobileNet::v2(store, prefix, rng))),
            BackboneFamily::ImageTransformer => Backbone::Transformer(Box::new(VisionTransformer::base(
                store,
                prefix,
                spec.depth.unwrap_or(12),
                rng,
            ))),
        })
    }

    pub fn family(&self) -> BackboneFamily {
        match self {
            Backbone::Tiny(_) => BackboneFamily::TinyTest,
            Backbone::Residual(_) => BackboneFamily::ResidualConv,
            Backbone::Mobile(_) => BackboneFamily::MobileConv,
            Backbone::Transformer(_) => BackboneFamily::ImageTransformer,
        }
    }

    /// Name of the last spatial tap, the default Grad-CAM layer.
    pub fn default_tap(&self) -> String {
        match self {
            Backbone::Tiny(_) => "conv2".into(),
            Backbone::Residual(_) => "layer4".into(),
            Backbone::Mobile(_) => "final_conv".into(),
            Backbone::Transformer(t) => t.last_block_name(),
        }
    }

    /// Converts RGB images into the network's input tensor. Every image
    /// must be `224 x 224`.
    pub fn prepare(&self, images: &[&ImageBuffer]) -> Result<Tensor> {
        for img in images {
            if img.width() != TINY_INPUT || img.height() != TINY_INPUT {
                return Err(Error::Shape(format!(
                    "encoders take {TINY_INPUT}x{TINY_INPUT} views, got {}x{}",
                    img.width(),
                    img.height()
                )));
            }
        }
        Ok(match self {
            Backbone::Tiny(_) => pooled_input(images, TINY_POOL, [0.5; 3], [0.25; 3]),
            Backbone::Residual(_) | Backbone::Mobile(_) => {
                planar_input(images, [0.485, 0.456, 0.406], [0.229, 0.224, 0.225])
            }
            Backbone::Transformer(_) => planar_input(images, [0.5; 3], [0.5; 3]),
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var, scope: &str) -> EncoderOutput {
        match self {
            Backbone::Tiny(net) => net.forward(s, x, scope),
            Backbone::Residual(net) => net.forward(s, x, scope),
            Backbone::Mobile(net) => net.forward(s, x, scope),
            Backbone::Transformer(net) => net.forward(s, x, scope),
        }
    }
}

/// `[N, 3, H, W]` normalized planar tensor.
pub(crate) fn planar_input(images: &[&ImageBuffer], mean: [f64; 3], std: [f64; 3]) -> Tensor {
    let (w, h) = (images[0].width(), images[0].height());
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        for c in 0..CHANNELS {
            data.extend(
                img.data()
                    .iter()
                    .skip(c)
                    .step_by(CHANNELS)
                    .map(|&v| (f64::from(v) / 255.0 - mean[c]) / std[c]),
            );
        }
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}

/// Normalized planar tensor average-pooled by `k` in one pass.
pub(crate) fn pooled_input(images: &[&ImageBuffer], k: usize, mean: [f64; 3], std: [f64; 3]) -> Tensor {
    let (w, h) = (images[0].width(), images[0].height());
    let (wo, ho) = (w / k, h / k);
    let mut data = vec![0.0; images.len() * 3 * wo * ho];
    let scale = 1.0 / (255.0 * (k * k) as f64);
    for (n, img) in images.iter().enumerate() {
        let src = img.data();
        for c in 0..CHANNELS {
            let plane = &mut data[(n * 3 + c) * wo * ho..(n * 3 + c + 1) * wo * ho];
            for y in 0..ho * k {
                let row = &src[y * w * CHANNELS..(y + 1) * w * CHANNELS];
                let dst = &mut plane[(y / k) * wo..(y / k + 1) * wo];
                for (x, d) in dst.iter_mut().enumerate() {
                    let mut acc = 0u32;
                    for xx in x * k..x * k + k {
                        acc += u32::from(row[xx * CHANNELS + c]);
                    }
                    *d += f64::from(acc);
                }
            }
            for v in plane.iter_mut() {
                *v = (*v * scale - mean[c]) / std[c];
            }
        }
    }
    Tensor::new(vec![images.len(), 3, ho, wo], data)
}
