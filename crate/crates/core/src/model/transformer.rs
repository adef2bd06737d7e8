use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::backbone::{EncoderOutput, Tap, TapLayout};
use crate::nn::{Conv2d, ConvSpec, LayerNorm, Linear, ParamId, ParamKind, ParamStore, Session, Tensor, Unary, Var};

const PATCH: usize = 16;
const WIDTH: usize = 768;
const HEADS: usize = 12;
const MLP: usize = 3072;
const LAYER_SCALE: f64 = 0.1;
const GRID: usize = 224 / PATCH;

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    gamma1: ParamId,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    gamma2: ParamId,
}

impl Block {
    fn new(store: &mut ParamStore, p: &str, rng: &mut impl Rng) -> Self {
        Block {
            norm1: LayerNorm::new(store, &format!("{p}norm1"), WIDTH),
            q: Linear::new(store, &format!("{p}attn.q"), WIDTH, WIDTH, rng),
            k: Linear::new(store, &format!("{p}attn.k"), WIDTH, WIDTH, rng),
            v: Linear::new(store, &format!("{p}attn.v"), WIDTH, WIDTH, rng),
            proj: Linear::new(store, &format!("{p}attn.proj"), WIDTH, WIDTH, rng),
            gamma1: store.add(format!("{p}gamma_1"), Tensor::full(&[WIDTH], LAYER_SCALE), ParamKind::Weight),
            norm2: LayerNorm::new(store, &format!("{p}norm2"), WIDTH),
            fc1: Linear::new(store, &format!("{p}mlp.fc1"), WIDTH, MLP, rng),
            fc2: Linear::new(store, &format!("{p}mlp.fc2"), MLP, WIDTH, rng),
            gamma2: store.add(format!("{p}gamma_2"), Tensor::full(&[WIDTH], LAYER_SCALE), ParamKind::Weight),
        }
    }

    fn forward(&self, s: &mut Session, x: Var) -> Var {
        let h = self.norm1.forward(s, x);
        let q = self.q.forward(s, h);
        let k = self.k.forward(s, h);
        let v = self.v.forward(s, h);
        let a = s.graph.attention(q, k, v, HEADS);
        let a = self.proj.forward(s, a);
        let g1 = s.param(self.gamma1);
        let a = s.graph.mul_trailing(a, g1);
        let x = s.graph.add(x, a);
        let h = self.norm2.forward(s, x);
        let h = self.fc1.forward(s, h);
        let h = s.graph.unary(h, Unary::Gelu);
        let h = self.fc2.forward(s, h);
        let g2 = s.param(self.gamma2);
        let h = s.graph.mul_trailing(h, g2);
        s.graph.add(x, h)
    }
}

/// Pre-norm patch transformer with layer scale. Features are the layer-
/// normalized mean of the patch tokens.
#[derive(Clone, Debug)]
pub struct VisionTransformer {
    patch_embed: Conv2d,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

fn trunc_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| loop {
                let v: f64 = dist.sample(rng);
                if v.abs() <= 2.0 * std {
                    break v;
                }
            })
            .collect(),
    )
}

impl VisionTransformer {
    pub fn base(store: &mut ParamStore, prefix: &str, depth: usize, rng: &mut impl Rng) -> Self {
        let patch_embed = Conv2d::new(
            store,
            &format!("{prefix}patch_embed.proj"),
            3,
            WIDTH,
            PATCH,
            ConvSpec::new(PATCH, 0),
            true,
            rng,
        );
        let cls = store.add(format!("{prefix}cls_token"), trunc_normal(&[WIDTH], 0.02, rng), ParamKind::Weight);
        let pos = store.add(
            format!("{prefix}pos_embed"),
            trunc_normal(&[GRID * GRID + 1, WIDTH], 0.02, rng),
            ParamKind::Weight,
        );
        let blocks = (0..depth)
            .map(|i| Block::new(store, &format!("{prefix}blocks.{i}."), rng))
            .collect();
        let norm = LayerNorm::new(store, &format!("{prefix}fc_norm"), WIDTH);
        VisionTransformer {
            patch_embed,
            cls,
            pos,
            blocks,
            norm,
        }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn last_block_name(&self) -> String {
        format!("blocks.{}", self.blocks.len() - 1)
    }

    pub fn forward(&self, s: &mut Session, x: Var, scope: &str) -> EncoderOutput {
        let mut taps = Vec::new();
        s.graph.set_scope(format!("{scope}patch_embed"));
        let h = self.patch_embed.forward(s, x);
        let h = s.graph.nchw_to_tokens(h);
        let cls = s.param(self.cls);
        let h = s.graph.prepend_token(h, cls);
        let pos = s.param(self.pos);
        let mut h = s.graph.add_trailing(h, pos);
        for (i, b) in self.blocks.iter().enumerate() {
            let name = format!("blocks.{i}");
            s.graph.set_scope(format!("{scope}{name}"));
            h = b.forward(s, h);
            taps.push(Tap {
                name,
                var: h,
                layout: TapLayout::Tokens {
                    grid_h: GRID,
                    grid_w: GRID,
                    skip: 1,
                },
            });
        }
        s.graph.set_scope(format!("{scope}fc_norm"));
        let pooled = s.graph.mean_tokens(h, 1);
        let features = self.norm.forward(s, pooled);
        taps.push(Tap {
            name: "features".into(),
            var: features,
            layout: TapLayout::Vector,
        });
        EncoderOutput { features, taps }
    }
}
