//! The detector: three view encoders, a pose encoder and the fusion head.

mod backbone;
pub mod checkpoint;
mod fusion;
mod mobilenet;
mod resnet;
mod transformer;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, BackboneFamily, BackboneSpec, EncoderOutput, Tap, TapLayout};
pub use checkpoint::{Archive, Entry, EntryKind, FORMAT_VERSION};
pub use fusion::{FusionConfig, FusionHead};

use crate::artifact::config_hash;
use crate::error::{Error, Result};
use crate::geometry::{ImageBuffer, ViewKind, ViewSource};
use crate::nn::{softmax_rows, Linear, Mode, ParamStore, Session, Tensor, Var};

/// Number of discrete head orientations.
pub const POSE_CLASSES: usize = 13;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Architecture shared by the view encoders (each gets its own weights).
    pub view_backbone: BackboneSpec,
    /// Pose encoder architecture; defaults to `view_backbone`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_backbone: Option<BackboneSpec>,
    /// Views that get an encoder, in fusion order.
    #[serde(default = "all_views")]
    pub views: Vec<ViewKind>,
    /// Feed the pose logits into the fusion head.
    #[serde(default = "yes")]
    pub use_pose: bool,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub seed: u64,
}

fn all_views() -> Vec<ViewKind> {
    ViewKind::ALL.to_vec()
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    /// All three views plus pose over the small test backbone.
    pub fn tiny(feature_dim: usize, seed: u64) -> Self {
        ModelConfig {
            view_backbone: BackboneSpec::tiny(feature_dim),
            pose_backbone: None,
            views: all_views(),
            use_pose: true,
            fusion: FusionConfig::default(),
            seed,
        }
    }

    pub fn pose_spec(&self) -> &BackboneSpec {
        self.pose_backbone.as_ref().unwrap_or(&self.view_backbone)
    }

    pub fn validate(&self) -> Result<()> {
        self.view_backbone.validate()?;
        self.pose_spec().validate()?;
        self.fusion.validate()?;
        if self.views.is_empty() {
            return Err(Error::Config("at least one view is required".into()));
        }
        for (i, v) in self.views.iter().enumerate() {
            if self.views[..i].contains(v) {
                return Err(Error::Config(format!("view `{v}` listed twice")));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

fn stream(kind: Option<ViewKind>) -> u64 {
    match kind {
        Some(ViewKind::Global) => 1,
        Some(ViewKind::Middle) => 2,
        Some(ViewKind::Local) => 3,
        None => 4,
    }
}

const FUSION_STREAM: u64 = 5;
const POSE_PREFIX: &str = "pose.";
const FUSION_PREFIX: &str = "fusion.";

fn view_prefix(kind: ViewKind) -> String {
    format!("{kind}.")
}

/// A backbone with a 13-way linear classifier on top.
#[derive(Clone, Debug)]
pub struct PoseEncoder {
    pub backbone: Backbone,
    head: Linear,
}

impl PoseEncoder {
    fn forward(&self, s: &mut Session, x: Var) -> (Var, EncoderOutput) {
        let enc = self.backbone.forward(s, x, POSE_PREFIX);
        s.graph.set_scope("pose.head");
        (self.head.forward(s, enc.features), enc)
    }
}

/// How the pose branch is fed for a batch.
#[derive(Clone, Debug)]
pub enum PoseInput {
    /// Pose branch not evaluated.
    None,
    /// Prepared middle views for the pose backbone.
    Image(Tensor),
    /// Precomputed `[N, 13]` logits (valid while the encoder is frozen).
    Logits(Tensor),
}

/// Network-ready inputs for one batch.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    /// One tensor per configured view, in config order.
    pub views: Vec<Tensor>,
    pub pose: PoseInput,
}

impl PreparedBatch {
    pub fn len(&self) -> usize {
        self.views[0].dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stacks per-sample batches (each of batch size 1 or more).
    pub fn concat(parts: &[&PreparedBatch]) -> PreparedBatch {
        let views = (0..parts[0].views.len())
            .map(|i| Tensor::stack_leading(&parts.iter().map(|p| &p.views[i]).collect::<Vec<_>>()))
            .collect();
        let pose = match &parts[0].pose {
            PoseInput::None => PoseInput::None,
            PoseInput::Image(_) => PoseInput::Image(Tensor::stack_leading(
                &parts.iter().map(|p| p.pose.tensor().expect("uniform pose input")).collect::<Vec<_>>(),
            )),
            PoseInput::Logits(_) => PoseInput::Logits(Tensor::stack_leading(
                &parts.iter().map(|p| p.pose.tensor().expect("uniform pose input")).collect::<Vec<_>>(),
            )),
        };
        PreparedBatch { views, pose }
    }
}

impl PoseInput {
    fn tensor(&self) -> Option<&Tensor> {
        match self {
            PoseInput::None => None,
            PoseInput::Image(t) | PoseInput::Logits(t) => Some(t),
        }
    }
}

/// Graph handles produced by one forward pass.
pub struct ForwardVars {
    /// `[N, 1]` fusion logit.
    pub logit: Var,
    /// `[N, 1]` fake probability.
    pub prob: Var,
    /// `[N, 13]` pose logits, when the pose branch ran.
    pub pose_logits: Option<Var>,
    /// Per-view encoder outputs, in config order.
    pub encoders: Vec<(ViewKind, EncoderOutput)>,
}

/// Eval-mode predictions for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub pose_logits: Vec<[f64; POSE_CLASSES]>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct DetectorModel {
    config: ModelConfig,
    pub store: ParamStore,
    encoders: Vec<(ViewKind, Backbone)>,
    pose: PoseEncoder,
    fusion: FusionHead,
}

impl DetectorModel {
    /// Seeded initialization, then any pretrained encoder weights named in
    /// the config.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let rng_for = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(config.seed);
            r.set_stream(s);
            r
        };
        let mut encoders = Vec::new();
        for &kind in &config.views {
            let mut rng = rng_for(stream(Some(kind)));
            let bb = Backbone::build(&config.view_backbone, &mut store, &view_prefix(kind), &mut rng)?;
            encoders.push((kind, bb));
        }
        let pose_spec = config.pose_spec();
        let mut rng = rng_for(stream(None));
        let backbone = Backbone::build(pose_spec, &mut store, POSE_PREFIX, &mut rng)?;
        let head = Linear::new(&mut store, "pose.head", pose_spec.feature_dim, POSE_CLASSES, &mut rng);
        let mut rng = rng_for(FUSION_STREAM);
        let pose_dim = if config.use_pose { POSE_CLASSES } else { 0 };
        let fusion = FusionHead::new(
            &mut store,
            FUSION_PREFIX,
            config.fusion,
            config.views.len() * config.view_backbone.feature_dim,
            pose_dim,
            &mut rng,
        )?;
        let mut model = DetectorModel {
            config: config.clone(),
            store,
            encoders,
            pose: PoseEncoder { backbone, head },
            fusion,
        };
        for &kind in &config.views {
            if let Some(path) = &config.view_backbone.pretrained_checkpoint {
                model.load_component(&view_prefix(kind), path)?;
            }
        }
        if let Some(path) = &pose_spec.pretrained_checkpoint {
            model.load_component(POSE_PREFIX, path)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn views(&self) -> Vec<ViewKind> {
        self.encoders.iter().map(|(k, _)| *k).collect()
    }

    pub fn encoder(&self, kind: ViewKind) -> Option<&Backbone> {
        self.encoders.iter().find(|(k, _)| *k == kind).map(|(_, b)| b)
    }

    pub fn pose_encoder(&self) -> &PoseEncoder {
        &self.pose
    }

    pub fn fusion(&self) -> &FusionHead {
        &self.fusion
    }

    pub fn parameter_count(&self) -> usize {
        self.store.weight_count()
    }

    pub fn view_prefix(kind: ViewKind) -> String {
        view_prefix(kind)
    }

    pub fn set_pose_frozen(&mut self, frozen: bool) {
        self.store.set_trainable(POSE_PREFIX, !frozen);
    }

    pub fn pose_frozen(&self) -> bool {
        self.store
            .ids_with_prefix(POSE_PREFIX)
            .all(|id| !self.store.is_trainable(id))
    }

    /// Freezes or unfreezes one view encoder.
    pub fn set_view_frozen(&mut self, kind: ViewKind, frozen: bool) {
        self.store.set_trainable(&view_prefix(kind), !frozen);
    }

    /// Prepares network inputs. `pose` selects whether the pose branch
    /// gets images.
    pub fn prepare<V: ViewSource>(&self, triples: &[&V], with_pose: bool) -> Result<PreparedBatch> {
        if triples.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let views = self
            .encoders
            .iter()
            .map(|(kind, bb)| bb.prepare(&triples.iter().map(|t| t.view_image(*kind)).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let pose = if with_pose {
            PoseInput::Image(self.prepare_pose(&triples.iter().map(|t| t.view_image(ViewKind::Middle)).collect::<Vec<_>>())?)
        } else {
            PoseInput::None
        };
        Ok(PreparedBatch { views, pose })
    }

    pub fn prepare_pose(&self, middle: &[&ImageBuffer]) -> Result<Tensor> {
        self.pose.backbone.prepare(middle)
    }

    /// Whether the fusion head consumes the pose feature.
    pub fn uses_pose(&self) -> bool {
        self.config.use_pose
    }

    /// Builds the forward graph in `s`.
    ///
    /// A frozen pose encoder always runs with inference statistics, so its
    /// output does not depend on the session mode.
    pub fn forward_session(&self, s: &mut Session, batch: &PreparedBatch) -> Result<ForwardVars> {
        if batch.views.len() != self.encoders.len() {
            return Err(Error::Shape(format!(
                "batch has {} view tensors, model has {} encoders",
                batch.views.len(),
                self.encoders.len()
            )));
        }
        let mut encoders = Vec::new();
        for ((kind, bb), x) in self.encoders.iter().zip(&batch.views) {
            s.graph.set_scope(format!("{kind}.input"));
            let xv = s.graph.input(x.clone());
            let out = bb.forward(s, xv, &view_prefix(*kind));
            encoders.push((*kind, out));
        }
        let pose_logits = match &batch.pose {
            PoseInput::None => None,
            PoseInput::Logits(t) => Some(s.graph.input(t.clone())),
            PoseInput::Image(t) => {
                let xv = s.graph.input(t.clone());
                let prev = if self.pose_frozen() { Some(s.set_mode(Mode::Eval)) } else { None };
                let (logits, _) = self.pose.forward(s, xv);
                if let Some(m) = prev {
                    s.set_mode(m);
                }
                Some(logits)
            }
        };
        let feats: Vec<Var> = encoders.iter().map(|(_, e)| e.features).collect();
        let fused_pose = if self.config.use_pose {
            Some(pose_logits.ok_or_else(|| Error::Shape("model fuses pose but the batch has no pose input".into()))?)
        } else {
            None
        };
        let logit = self.fusion.fuse(s, &feats, fused_pose)?;
        s.graph.set_scope("fusion.output");
        let prob = s.graph.sigmoid(logit);
        if let Some(layer) = s.graph.fault() {
            return Err(Error::NumericFault {
                layer: layer.to_string(),
                batch: None,
            });
        }
        Ok(ForwardVars {
            logit,
            prob,
            pose_logits,
            encoders,
        })
    }

    /// Pose logits for prepared middle views, in inference mode.
    pub fn pose_logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut s = Session::new(&self.store, Mode::Eval, 0);
        let xv = s.graph.input(x.clone());
        let (logits, _) = self.pose.forward(&mut s, xv);
        if let Some(layer) = s.graph.fault() {
            return Err(Error::NumericFault {
                layer: layer.to_string(),
                batch: None,
            });
        }
        Ok(s.graph.value(logits).clone())
    }

    /// Pose-branch graph in the given session; used by pose pretraining.
    pub fn pose_forward_session(&self, s: &mut Session, x: &Tensor) -> Var {
        let xv = s.graph.input(x.clone());
        self.pose.forward(s, xv).0
    }

    /// Eval-mode probabilities and pose logits.
    pub fn forward<V: ViewSource>(&self, triples: &[&V]) -> Result<Prediction> {
        let batch = self.prepare(triples, true)?;
        self.forward_prepared(&batch)
    }

    pub fn forward_prepared(&self, batch: &PreparedBatch) -> Result<Prediction> {
        let mut s = Session::new(&self.store, Mode::Eval, 0);
        let out = self.forward_session(&mut s, batch)?;
        let probs = s.graph.value(out.prob).data().to_vec();
        let pose_logits = match out.pose_logits {
            Some(v) => s
                .graph
                .value(v)
                .data()
                .chunks(POSE_CLASSES)
                .map(|c| c.try_into().expect("13 logits"))
                .collect(),
            None => Vec::new(),
        };
        Ok(Prediction { probs, pose_logits })
    }

    /// Pose class per middle view.
    pub fn predict_pose(&self, middle: &[&ImageBuffer]) -> Result<Vec<usize>> {
        let logits = self.pose_logits(&self.prepare_pose(middle)?)?;
        Ok(logits.data().chunks(POSE_CLASSES).map(argmax).collect())
    }

    /// Row-wise softmax of pose logits.
    pub fn pose_probabilities(logits: &Tensor) -> Tensor {
        softmax_rows(logits)
    }

    /// Copies tensors from `path` into the parameters under `prefix`.
    /// Archive names are relative to the prefix; extra archive entries
    /// (such as a classifier the encoder does not have) are ignored.
    pub fn load_component(&mut self, prefix: &str, path: &Path) -> Result<()> {
        let archive = Archive::load(path)?;
        let ids: Vec<_> = self.store.ids_with_prefix(prefix).collect();
        for id in ids {
            let name = self.store.entry(id).name.clone();
            let rel = &name[prefix.len()..];
            let entry = archive.get(rel).ok_or_else(|| Error::IncompatibleCheckpoint {
                name: rel.to_string(),
                detail: format!("missing from {}", path.display()),
            })?;
            assign(&mut self.store, id, &name, &entry.tensor)?;
        }
        Ok(())
    }

    /// Writes the parameters under `prefix` with prefix-relative names.
    pub fn save_component(&self, prefix: &str, path: &Path) -> Result<()> {
        let entries = self
            .store
            .ids_with_prefix(prefix)
            .map(|id| {
                let e = self.store.entry(id);
                Entry {
                    name: e.name[prefix.len()..].to_string(),
                    kind: e.kind.into(),
                    tensor: e.value.clone(),
                }
            })
            .collect();
        Archive {
            header: serde_json::json!({ "component": prefix.trim_end_matches('.') }),
            entries,
        }
        .save(path)
    }

    pub fn pose_prefix() -> &'static str {
        POSE_PREFIX
    }

    /// Archive of the config and every parameter, plus caller extras.
    pub fn to_archive(&self, extra_header: serde_json::Value, extra: Vec<Entry>) -> Result<Archive> {
        let mut entries: Vec<Entry> = self
            .store
            .entries()
            .iter()
            .map(|e| Entry {
                name: e.name.clone(),
                kind: e.kind.into(),
                tensor: e.value.clone(),
            })
            .collect();
        entries.extend(extra);
        Ok(Archive {
            header: serde_json::json!({
                "model": self.config,
                "config_hash": self.config.hash()?,
                "pose_frozen": self.pose_frozen(),
                "extra": extra_header,
            }),
            entries,
        })
    }

    /// Builds the model described by the archive header and loads its
    /// parameters.
    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(
            archive
                .header
                .get("model")
                .cloned()
                .ok_or_else(|| Error::CorruptCheckpoint("header has no model config".into()))?,
        )
        .map_err(|e| Error::CorruptCheckpoint(format!("model config: {e}")))?;
        Self::from_archive_with(archive, &config)
    }

    /// Loads the archive's parameters into a model built from `config`.
    pub fn from_archive_with(archive: &Archive, config: &ModelConfig) -> Result<Self> {
        let mut plain = config.clone();
        strip_pretrained(&mut plain);
        let mut model = Self::build(&plain)?;
        model.config = config.clone();
        model.load_entries(archive)?;
        let frozen = archive.header.get("pose_frozen").and_then(|v| v.as_bool()).unwrap_or(false);
        model.set_pose_frozen(frozen);
        Ok(model)
    }

    fn load_entries(&mut self, archive: &Archive) -> Result<()> {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let name = self.store.entry(id).name.clone();
            let entry = archive.get(&name).ok_or_else(|| Error::IncompatibleCheckpoint {
                name: name.clone(),
                detail: "not present in checkpoint".into(),
            })?;
            assign(&mut self.store, id, &name, &entry.tensor)?;
        }
        for e in &archive.entries {
            if e.kind != EntryKind::State && self.store.find(&e.name).is_none() {
                return Err(Error::IncompatibleCheckpoint {
                    name: e.name.clone(),
                    detail: "checkpoint tensor has no counterpart in the model".into(),
                });
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive(serde_json::Value::Null, Vec::new())?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    /// Loads `path` into a model built from `config` rather than the
    /// config stored in the file.
    pub fn load_with(path: &Path, config: &ModelConfig) -> Result<Self> {
        Self::from_archive_with(&Archive::load(path)?, config)
    }
}

fn strip_pretrained(c: &mut ModelConfig) {
    c.view_backbone.pretrained_checkpoint = None;
    if let Some(p) = &mut c.pose_backbone {
        p.pretrained_checkpoint = None;
    }
}

fn assign(store: &mut ParamStore, id: crate::nn::ParamId, name: &str, t: &Tensor) -> Result<()> {
    let target = store.get_mut(id);
    if target.shape() != t.shape() {
        return Err(Error::IncompatibleCheckpoint {
            name: name.to_string(),
            detail: format!("shape {:?} in checkpoint, {:?} in model", t.shape(), target.shape()),
        });
    }
    *target = t.clone();
    Ok(())
}
