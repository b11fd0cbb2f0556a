//! Feature extractor / classifier composition.
//!
//! A [`Network`] is split into a feature extractor `F` and a classifier `C`
//! whose parameter sets are disjoint, so the alternating updates can step
//! one part while leaving the other untouched.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MudaError, Result};
use crate::ndcore::{BatchNorm, Dense, Dropout, Layer, LayerCache, LayerKind, Mode, Parameter, PassContext, Tensor};

pub const TOY_HIDDEN_UNITS: usize = 15;
pub const TOY_DROPOUT_RATE: f64 = 0.5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

fn default_bn_momentum() -> f64 {
    BN_MOMENTUM
}

fn default_bn_eps() -> f64 {
    BN_EPS
}

/// Declarative description of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    Relu,
    BatchNorm {
        #[serde(default = "default_bn_momentum")]
        momentum: f64,
        #[serde(default = "default_bn_eps")]
        eps: f64,
    },
    Dropout {
        rate: f64,
    },
    Softmax,
}

impl LayerSpec {
    pub fn batch_norm() -> Self {
        LayerSpec::BatchNorm {
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub num_classes: usize,
    pub feature_layers: Vec<LayerSpec>,
    pub classifier_layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Five dense layers with 15 hidden units, batch norm after the first
    /// three, ReLU activations, dropout 0.5 after the fourth. `F` is
    /// everything through the dropout; `C` is the output layer and softmax.
    pub fn toy(input_dim: usize, num_classes: usize) -> Self {
        let h = TOY_HIDDEN_UNITS;
        let mut feature_layers = Vec::new();
        for _ in 0..3 {
            feature_layers.push(LayerSpec::Dense { units: h });
            feature_layers.push(LayerSpec::batch_norm());
            feature_layers.push(LayerSpec::Relu);
        }
        feature_layers.push(LayerSpec::Dense { units: h });
        feature_layers.push(LayerSpec::Relu);
        feature_layers.push(LayerSpec::Dropout { rate: TOY_DROPOUT_RATE });
        NetworkSpec {
            input_dim,
            num_classes,
            feature_layers,
            classifier_layers: vec![LayerSpec::Dense { units: num_classes }, LayerSpec::Softmax],
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.feature_layers.iter().chain(&self.classifier_layers)
    }

    /// Checks dimension chaining and the softmax placement.
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(MudaError::config("network.input_dim", "must be positive"));
        }
        if self.num_classes < 2 {
            return Err(MudaError::config("network.num_classes", "need at least 2 classes"));
        }
        if self.classifier_layers.is_empty() {
            return Err(MudaError::config(
                "network.classifier_layers",
                "classifier must not be empty",
            ));
        }
        if self.classifier_layers.last() != Some(&LayerSpec::Softmax) {
            return Err(MudaError::config(
                "network.classifier_layers",
                "classifier must end with softmax",
            ));
        }
        let total = self.feature_layers.len() + self.classifier_layers.len();
        let mut dim = self.input_dim;
        for (i, layer) in self.layers().enumerate() {
            let path = layer_path(self.feature_layers.len(), i);
            match layer {
                LayerSpec::Dense { units } => {
                    if *units == 0 {
                        return Err(MudaError::config(path, "dense layer needs at least one unit"));
                    }
                    dim = *units;
                }
                LayerSpec::Dropout { rate } => {
                    crate::ndcore::layers::validate_rate(*rate).map_err(|e| MudaError::config(path, e.to_string()))?;
                }
                LayerSpec::BatchNorm { momentum, eps } => {
                    if !(0.0..=1.0).contains(momentum) || *eps <= 0.0 {
                        return Err(MudaError::config(
                            path,
                            "batch norm needs momentum in [0,1] and eps > 0",
                        ));
                    }
                }
                LayerSpec::Softmax if i + 1 != total => {
                    return Err(MudaError::config(path, "softmax is only allowed as the final layer"));
                }
                _ => {}
            }
        }
        if dim != self.num_classes {
            return Err(MudaError::config(
                "network.classifier_layers",
                format!("output width {dim} does not match num_classes {}", self.num_classes),
            ));
        }
        Ok(())
    }
}

fn layer_path(n_feature: usize, i: usize) -> String {
    if i < n_feature {
        format!("network.feature_layers[{i}]")
    } else {
        format!("network.classifier_layers[{}]", i - n_feature)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamScope {
    Feature,
    Classifier,
    All,
}

/// Forward intermediates of one full pass, consumed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    pub mode: Mode,
    pub dropout_active: bool,
    caches: Vec<LayerCache>,
}

impl Trace {
    /// Dropout masks of this pass, in layer order (`None` where dropout was inactive).
    pub fn dropout_masks(&self) -> Vec<Option<&Tensor>> {
        self.caches
            .iter()
            .filter_map(|c| match c {
                LayerCache::Dropout { mask } => Some(mask.as_ref()),
                _ => None,
            })
            .collect()
    }
}

/// Parameter gradients in network parameter order (`F` first, then `C`).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
    feature_count: usize,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            tensors: net
                .parameters(ParamScope::All)
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
            feature_count: net.feature_param_count(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(MudaError::State("gradient sets of different networks".into()));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Zeroes every gradient outside `scope`.
    pub fn restrict(&mut self, scope: ParamScope) {
        let fc = self.feature_count;
        for (i, t) in self.tensors.iter_mut().enumerate() {
            let keep = match scope {
                ParamScope::All => true,
                ParamScope::Feature => i < fc,
                ParamScope::Classifier => i >= fc,
            };
            if !keep {
                t.fill(0.0);
            }
        }
    }

    pub fn scope(&self, scope: ParamScope) -> &[Tensor] {
        match scope {
            ParamScope::All => &self.tensors,
            ParamScope::Feature => &self.tensors[..self.feature_count],
            ParamScope::Classifier => &self.tensors[self.feature_count..],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|&v| v == 0.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    feature: Vec<Layer>,
    classifier: Vec<Layer>,
}

impl Network {
    /// Builds a network with seed-reproducible initialization: He-uniform for
    /// every dense layer except the output layer, which is Xavier-uniform.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_dense = spec.layers().filter(|l| matches!(l, LayerSpec::Dense { .. })).count();
        let mut dense_seen = 0;
        let mut dim = spec.input_dim;
        let mut build = |layer: &LayerSpec| -> Result<Layer> {
            Ok(match layer {
                LayerSpec::Dense { units } => {
                    dense_seen += 1;
                    let limit = if dense_seen == n_dense {
                        (6.0 / (dim + units) as f64).sqrt()
                    } else {
                        (6.0 / dim as f64).sqrt()
                    };
                    let w: Vec<f64> = (0..dim * units).map(|_| rng.random_range(-limit..limit)).collect();
                    let layer = Dense::new(Tensor::new(vec![dim, *units], w)?, Tensor::zeros(&[1, *units]))?;
                    dim = *units;
                    Layer::Dense(layer)
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::BatchNorm { momentum, eps } => Layer::BatchNorm(BatchNorm::new(dim, *momentum, *eps)?),
                LayerSpec::Dropout { rate } => Layer::Dropout(Dropout::new(*rate)?),
                LayerSpec::Softmax => Layer::Softmax,
            })
        };
        let feature = spec.feature_layers.iter().map(&mut build).collect::<Result<Vec<_>>>()?;
        let classifier = spec
            .classifier_layers
            .iter()
            .map(&mut build)
            .collect::<Result<Vec<_>>>()?;
        let mut net = Network {
            spec,
            feature,
            classifier,
        };
        net.assign_names();
        Ok(net)
    }

    /// The toy two-moons network with two inputs and two classes.
    pub fn toy(seed: u64) -> Self {
        Network::new(NetworkSpec::toy(2, 2), seed).expect("toy spec is valid")
    }

    fn assign_names(&mut self) {
        for (prefix, layers) in [("F", &mut self.feature), ("C", &mut self.classifier)] {
            for (i, layer) in layers.iter_mut().enumerate() {
                let kind = kind_name(layer.kind());
                for p in layer.params_mut() {
                    let leaf = p.name.rsplit('.').next().unwrap_or("").to_string();
                    p.name = format!("{prefix}.{i}.{kind}.{leaf}");
                }
            }
        }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn feature_layers(&self) -> &[Layer] {
        &self.feature
    }

    pub fn classifier_layers(&self) -> &[Layer] {
        &self.classifier
    }

    fn layers(&self) -> impl DoubleEndedIterator<Item = &Layer> {
        self.feature.iter().chain(&self.classifier)
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.feature.iter_mut().chain(self.classifier.iter_mut())
    }

    pub fn feature_param_count(&self) -> usize {
        self.feature.iter().map(|l| l.params().len()).sum()
    }

    pub fn parameters(&self, scope: ParamScope) -> Vec<&Parameter> {
        let (f, c) = match scope {
            ParamScope::Feature => (true, false),
            ParamScope::Classifier => (false, true),
            ParamScope::All => (true, true),
        };
        let mut out = Vec::new();
        if f {
            out.extend(self.feature.iter().flat_map(Layer::params));
        }
        if c {
            out.extend(self.classifier.iter().flat_map(Layer::params));
        }
        out
    }

    pub fn parameters_mut(&mut self, scope: ParamScope) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        if scope != ParamScope::Classifier {
            out.extend(self.feature.iter_mut().flat_map(Layer::params_mut));
        }
        if scope != ParamScope::Feature {
            out.extend(self.classifier.iter_mut().flat_map(Layer::params_mut));
        }
        out
    }

    pub fn parameter_values(&self, scope: ParamScope) -> Vec<Tensor> {
        self.parameters(scope).into_iter().map(|p| p.value.clone()).collect()
    }

    pub fn set_parameter_values(&mut self, scope: ParamScope, values: &[Tensor]) -> Result<()> {
        let mut params = self.parameters_mut(scope);
        if params.len() != values.len() {
            return Err(MudaError::State(format!(
                "expected {} parameter tensors, got {}",
                params.len(),
                values.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(values) {
            p.value.ensure_same_shape(v, "parameter assignment")?;
            p.value = v.clone();
        }
        Ok(())
    }

    pub fn zero_grad(&mut self, scope: ParamScope) {
        for p in self.parameters_mut(scope) {
            p.zero_grad();
        }
    }

    /// Adds `grads` into the stored parameter gradients.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        let mut params = self.parameters_mut(ParamScope::All);
        if params.len() != grads.tensors.len() {
            return Err(MudaError::State("gradient count does not match network".into()));
        }
        for (p, g) in params.iter_mut().zip(&grads.tensors) {
            p.grad.add_assign(g)?;
        }
        Ok(())
    }

    /// Sets every dropout layer in `F` to `rho_f` and every one in `C` to `rho_c`.
    pub fn set_dropout_rates(&mut self, rho_f: f64, rho_c: f64) -> Result<()> {
        for (layers, rate) in [(&mut self.feature, rho_f), (&mut self.classifier, rho_c)] {
            for layer in layers.iter_mut() {
                if let Layer::Dropout(d) = layer {
                    d.set_rate(rate)?;
                }
            }
        }
        Ok(())
    }

    pub fn dropout_rates(&self) -> Vec<f64> {
        self.layers()
            .filter_map(|l| match l {
                Layer::Dropout(d) => Some(d.rate()),
                _ => None,
            })
            .collect()
    }

    /// Applies rates in the order of [`Network::dropout_rates`].
    pub fn set_each_dropout_rate(&mut self, rates: &[f64]) -> Result<()> {
        let count = self.dropout_rates().len();
        if rates.len() != count {
            return Err(MudaError::Validation(format!(
                "{} dropout rates for {count} dropout layers",
                rates.len()
            )));
        }
        let mut it = rates.iter();
        for layer in self.layers_mut() {
            if let Layer::Dropout(d) = layer {
                d.set_rate(*it.next().expect("counted"))?;
            }
        }
        Ok(())
    }

    /// True if some dropout layer has a positive rate.
    pub fn is_stochastic(&self) -> bool {
        self.dropout_rates().iter().any(|&r| r > 0.0)
    }

    /// Full forward pass to softmax scores. With `dropout_active`, every
    /// dropout layer draws a fresh mask from `rng`.
    pub fn forward(
        &self,
        x: &Tensor,
        mode: Mode,
        dropout_active: bool,
        rng: &mut dyn RngCore,
    ) -> Result<(Tensor, Trace)> {
        if x.ndim() != 2 || x.cols() != self.spec.input_dim {
            return Err(MudaError::Shape {
                context: "network input vs input_dim",
                left: x.shape().to_vec(),
                right: vec![self.spec.input_dim],
            });
        }
        let mut ctx = PassContext {
            mode,
            dropout_active,
            rng,
        };
        let mut caches = Vec::with_capacity(self.feature.len() + self.classifier.len());
        let mut h = x.clone();
        for layer in self.layers() {
            let (out, cache) = layer.forward(&h, &mut ctx)?;
            caches.push(cache);
            h = out;
        }
        Ok((
            h,
            Trace {
                mode,
                dropout_active,
                caches,
            },
        ))
    }

    /// Deterministic scores: eval mode, dropout inactive.
    pub fn scores(&self, x: &Tensor) -> Result<Tensor> {
        // Inactive dropout never draws, so any generator will do.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(x, Mode::Eval, false, &mut rng)?.0)
    }

    /// Argmax labels of the deterministic scores, ties to the lowest class.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.scores(x)?.argmax_rows())
    }

    /// Backpropagates a gradient w.r.t. the softmax scores.
    pub fn backward(&self, trace: &Trace, grad_scores: &Tensor) -> Result<Gradients> {
        self.backward_through(trace, grad_scores, false)
    }

    /// Backpropagates a gradient w.r.t. the logits feeding the final softmax.
    pub fn backward_from_logits(&self, trace: &Trace, grad_logits: &Tensor) -> Result<Gradients> {
        self.backward_through(trace, grad_logits, true)
    }

    fn backward_through(&self, trace: &Trace, grad: &Tensor, skip_softmax: bool) -> Result<Gradients> {
        let n_layers = self.feature.len() + self.classifier.len();
        if trace.caches.len() != n_layers {
            return Err(MudaError::State("trace does not match network layout".into()));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for layer in self.layers() {
            offsets.push(off);
            off += layer.params().len();
        }
        let mut g = grad.clone();
        for (i, (layer, cache)) in self
            .layers()
            .zip(&trace.caches)
            .enumerate()
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
        {
            if skip_softmax && i + 1 == n_layers {
                continue;
            }
            let (dx, pgrads) = layer.backward(cache, &g)?;
            for (j, pg) in pgrads.into_iter().enumerate() {
                grads.tensors[offsets[i] + j] = pg;
            }
            g = dx;
        }
        Ok(grads)
    }

    /// Folds the batch statistics recorded in a train-mode `trace` into the
    /// batch-norm running estimates.
    pub fn commit_running_stats(&mut self, trace: &Trace) -> Result<()> {
        if trace.caches.len() != self.feature.len() + self.classifier.len() {
            return Err(MudaError::State("trace does not match network layout".into()));
        }
        let caches = trace.caches.clone();
        for (layer, cache) in self.layers_mut().zip(&caches) {
            if let (
                Layer::BatchNorm(bn),
                LayerCache::BatchNorm {
                    batch_stats: Some(s), ..
                },
            ) = (layer, cache)
            {
                bn.update_running(s);
            }
        }
        Ok(())
    }

    /// All named state tensors: parameters plus batch-norm running statistics.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for p in self.parameters(ParamScope::All) {
            out.insert(p.name.clone(), p.value.clone());
        }
        for (prefix, layers) in [("F", &self.feature), ("C", &self.classifier)] {
            for (i, layer) in layers.iter().enumerate() {
                if let Layer::BatchNorm(bn) = layer {
                    out.insert(format!("{prefix}.{i}.batch_norm.running_mean"), bn.running_mean.clone());
                    out.insert(format!("{prefix}.{i}.batch_norm.running_var"), bn.running_var.clone());
                }
            }
        }
        out
    }

    /// Rebuilds a network from its spec and [`Network::state_tensors`].
    pub fn from_state(spec: NetworkSpec, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut net = Network::new(spec, 0)?;
        let take = |name: &str, target: &Tensor| -> Result<Tensor> {
            let t = tensors
                .get(name)
                .ok_or_else(|| MudaError::Validation(format!("checkpoint is missing tensor `{name}`")))?;
            target.ensure_same_shape(t, "checkpoint tensor")?;
            Ok(t.clone())
        };
        for p in net.parameters_mut(ParamScope::All) {
            p.value = take(&p.name, &p.value)?;
        }
        for (prefix, layers) in [("F", &mut net.feature), ("C", &mut net.classifier)] {
            for (i, layer) in layers.iter_mut().enumerate() {
                if let Layer::BatchNorm(bn) = layer {
                    bn.running_mean = take(&format!("{prefix}.{i}.batch_norm.running_mean"), &bn.running_mean)?;
                    bn.running_var = take(&format!("{prefix}.{i}.batch_norm.running_var"), &bn.running_var)?;
                }
            }
        }
        let expected = net.state_tensors().len();
        if tensors.len() != expected {
            return Err(MudaError::Validation(format!(
                "checkpoint holds {} tensors, network expects {expected}",
                tensors.len()
            )));
        }
        Ok(net)
    }
}

fn kind_name(kind: LayerKind) -> &'static str {
    match kind {
        LayerKind::Dense => "dense",
        LayerKind::Relu => "relu",
        LayerKind::BatchNorm => "batch_norm",
        LayerKind::Dropout => "dropout",
        LayerKind::Softmax => "softmax",
    }
}
