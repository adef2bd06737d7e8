use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Var};
use super::ops::{ConvSpec, Unary};
use super::params::{ParamId, ParamKind, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    Eval,
}

/// One forward (and optional backward) pass over a borrowed parameter store.
///
/// Batch-norm running-statistic updates produced in training mode are
/// collected rather than applied, so the store stays immutable while the
/// graph is alive.
pub struct Session<'a> {
    pub graph: Graph,
    params: &'a ParamStore,
    param_vars: HashMap<ParamId, Var>,
    mode: Mode,
    rng: ChaCha8Rng,
    updates: Vec<(ParamId, Tensor)>,
}

impl<'a> Session<'a> {
    pub fn new(params: &'a ParamStore, mode: Mode, seed: u64) -> Self {
        Self::with_graph(Graph::new(), params, mode, seed)
    }

    pub fn with_graph(graph: Graph, params: &'a ParamStore, mode: Mode, seed: u64) -> Self {
        Session {
            graph,
            params,
            param_vars: HashMap::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            updates: Vec::new(),
        }
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Switches mode, returning the previous one.
    pub fn set_mode(&mut self, mode: Mode) -> Mode {
        std::mem::replace(&mut self.mode, mode)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self
            .graph
            .leaf(self.params.get(id).clone(), self.params.is_trainable(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn record_update(&mut self, id: ParamId, value: Tensor) {
        self.updates.push((id, value));
    }

    pub fn updates(&self) -> &[(ParamId, Tensor)] {
        &self.updates
    }

    /// Gradients of every trainable parameter touched by this session.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .param_vars
            .iter()
            .filter(|(id, _)| self.params.is_trainable(**id))
            .map(|(&id, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.params.get(id).shape()));
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Drains the collected buffer updates; see [`apply_updates`].
    pub fn take_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.updates)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if self.mode == Mode::Eval || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let n = self.graph.value(x).len();
        let mask = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.graph.apply_mask(x, mask)
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Var {
        match act {
            Activation::Identity => x,
            Activation::Relu => self.graph.unary(x, Unary::Relu),
            Activation::Relu6 => self.graph.unary(x, Unary::Relu6),
            Activation::Gelu => self.graph.unary(x, Unary::Gelu),
        }
    }
}

/// Applies buffer updates collected by a session.
pub fn apply_updates(store: &mut ParamStore, updates: Vec<(ParamId, Tensor)>) {
    for (id, value) in updates {
        *store.get_mut(id) = value;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    #[default]
    Relu,
    Relu6,
    Gelu,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
    )
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(&[out_dim, in_dim], bound, rng),
            ParamKind::Weight,
        );
        let bias = store.add(format!("{name}.bias"), uniform(&[out_dim], bound, rng), ParamKind::Weight);
        Linear {
            weight,
            bias: Some(bias),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch / spec.groups * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(&[out_ch, in_ch / spec.groups, kernel, kernel], bound, rng),
            ParamKind::Weight,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                uniform(&[out_ch], 1.0 / (fan_in as f64).sqrt(), rng),
                ParamKind::Weight,
            )
        });
        Conv2d { weight, bias, spec }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.conv2d(x, w, b, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.weight"), Tensor::full(&[channels], 1.0), ParamKind::Weight),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[channels]), ParamKind::Weight),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), ParamKind::Buffer),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[channels], 1.0), ParamKind::Buffer),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        let params = s.params();
        let running = (params.get(self.running_mean), params.get(self.running_var));
        let train = s.mode() == Mode::Train;
        let (y, stats) = s.graph.batch_norm(x, gamma, beta, running, train, self.eps);
        if let Some(stats) = stats {
            let m = self.momentum;
            let blend = |old: &Tensor, new: &Tensor| {
                Tensor::new(
                    old.shape().to_vec(),
                    old.data().iter().zip(new.data()).map(|(o, n)| (1.0 - m) * o + m * n).collect(),
                )
            };
            let mean = blend(params.get(self.running_mean), &stats.mean);
            let var = blend(params.get(self.running_var), &stats.var);
            s.record_update(self.running_mean, mean);
            s.record_update(self.running_var, var);
        }
        y
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.weight"), Tensor::full(&[width], 1.0), ParamKind::Weight),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[width]), ParamKind::Weight),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        s.graph.layer_norm(x, gamma, beta, self.eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_mode_dropout_is_identity() {
        let store = ParamStore::new();
        let mut s = Session::new(&store, Mode::Eval, 0);
        let x = s.graph.input(Tensor::full(&[2, 4], 3.0));
        assert_eq!(s.dropout(x, 0.5), x);
    }

    #[test]
    fn train_dropout_is_seeded_and_rescaled() {
        let store = ParamStore::new();
        let run = |seed| {
            let mut s = Session::new(&store, Mode::Train, seed);
            let x = s.graph.input(Tensor::full(&[1, 64], 1.0));
            let y = s.dropout(x, 0.25);
            s.graph.value(y).clone()
        };
        let a = run(7);
        assert_eq!(a, run(7));
        assert!(a.data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
    }

    #[test]
    fn batch_norm_updates_running_stats_only_in_train_mode() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let data = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 6.0]);
        let mut s = Session::new(&store, Mode::Train, 0);
        let x = s.graph.input(data.clone());
        bn.forward(&mut s, x);
        let updates = s.take_updates();
        assert_eq!(updates.len(), 2);
        // running_mean = 0.9 * 0 + 0.1 * [2, 4]
        let mean = &updates[0].1;
        assert!((mean.data()[0] - 0.2).abs() < 1e-12 && (mean.data()[1] - 0.4).abs() < 1e-12);
        let mut s = Session::new(&store, Mode::Eval, 0);
        let x = s.graph.input(data);
        bn.forward(&mut s, x);
        assert!(s.updates().is_empty());
    }
}
