use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, BatchNorm, Linear, ParamStore, Session, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    #[serde(default = "default_h1")]
    pub h1: usize,
    #[serde(default = "default_f")]
    pub f: usize,
    #[serde(default = "default_stage2_hidden")]
    pub stage2_hidden: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub activation: Activation,
}

fn default_h1() -> usize {
    512
}
fn default_f() -> usize {
    256
}
fn default_stage2_hidden() -> usize {
    512
}
fn default_dropout() -> f64 {
    0.3
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            h1: default_h1(),
            f: default_f(),
            stage2_hidden: default_stage2_hidden(),
            dropout: default_dropout(),
            activation: Activation::default(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h1 == 0 || self.f == 0 || self.stage2_hidden == 0 {
            return Err(Error::Config("fusion widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Two-stage head. Stage one maps concatenated view features through two
/// linear layers and the activation; stage two batch-normalizes the result
/// together with the pose feature and reduces it to one logit.
#[derive(Clone, Debug)]
pub struct FusionHead {
    pub config: FusionConfig,
    pub view_dim: usize,
    pub pose_dim: usize,
    fc1: Linear,
    fc2: Linear,
    bn: BatchNorm,
    fc3: Linear,
    out: Linear,
}

impl FusionHead {
    /// `view_dim` is the total width of the concatenated view features;
    /// `pose_dim` may be zero.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: FusionConfig,
        view_dim: usize,
        pose_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let joint = config.f + pose_dim;
        Ok(FusionHead {
            config,
            view_dim,
            pose_dim,
            fc1: Linear::new(store, &format!("{prefix}stage1.fc1"), view_dim, config.h1, rng),
            fc2: Linear::new(store, &format!("{prefix}stage1.fc2"), config.h1, config.f, rng),
            bn: BatchNorm::new(store, &format!("{prefix}stage2.bn"), joint),
            fc3: Linear::new(store, &format!("{prefix}stage2.fc1"), joint, config.stage2_hidden, rng),
            out: Linear::new(store, &format!("{prefix}stage2.fc2"), config.stage2_hidden, 1, rng),
        })
    }

    /// Returns `[N, 1]` logits.
    pub fn fuse(&self, s: &mut Session, views: &[Var], pose: Option<Var>) -> Result<Var> {
        let width: usize = views.iter().map(|&v| s.graph.value(v).dim(1)).sum();
        if width != self.view_dim {
            return Err(Error::Config(format!(
                "fusion head expects {} view features, got {width}",
                self.view_dim
            )));
        }
        let pose_width = pose.map_or(0, |p| s.graph.value(p).dim(1));
        if pose_width != self.pose_dim {
            return Err(Error::Config(format!(
                "fusion head expects a {}-dim pose feature, got {pose_width}",
                self.pose_dim
            )));
        }
        let act = self.config.activation;
        s.graph.set_scope("fusion.stage1");
        let x = if views.len() == 1 { views[0] } else { s.graph.concat(views) };
        let h = self.fc1.forward(s, x);
        let h = self.fc2.forward(s, h);
        let h = s.activate(h, act);
        s.graph.set_scope("fusion.stage2");
        let joint = match pose {
            Some(p) => s.graph.concat(&[h, p]),
            None => h,
        };
        let h = self.bn.forward(s, joint);
        let h = self.fc3.forward(s, h);
        let h = s.dropout(h, self.config.dropout);
        let h = s.activate(h, act);
        Ok(self.out.forward(s, h))
    }
}
