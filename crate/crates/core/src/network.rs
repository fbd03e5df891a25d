//! Feed-forward conv net with a hand-written backward pass whose error
//! pathway is chosen per call by a [`FeedbackRule`].
//!
//! The architecture is data-driven ([`Architecture`]) so the same code runs
//! the five-layer CIFAR model and the tiny nets used by gradient checks.
//! Weight gradients are always `delta x input`; only the signal sent to the
//! layer below depends on the rule.

use serde::{Deserialize, Serialize};

use crate::conv::{ConvGeometry, PoolGeometry};
use crate::error::{Error, Result};
use crate::feedback::{effective_feedback, FeedbackRule};
use crate::rng::Rng;
use crate::tensor::{gemm, randn, Op, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Square kernel, stride 1, no padding.
    Conv {
        out_channels: usize,
        kernel: usize,
        relu: bool,
    },
    /// 2x2, stride 2.
    MaxPool,
    Dense { out_features: usize, relu: bool },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// `[channels, height, width]` of one input sample.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// Conv(3->64, 5x5) - pool - Conv(64->64, 5x5) - pool - FC 576-384-192-10 on 24x24 inputs.
    pub fn cifar() -> Self {
        Architecture {
            input: [3, 24, 24],
            layers: vec![
                LayerSpec::Conv { out_channels: 64, kernel: 5, relu: true },
                LayerSpec::MaxPool,
                LayerSpec::Conv { out_channels: 64, kernel: 5, relu: true },
                LayerSpec::MaxPool,
                LayerSpec::Dense { out_features: 384, relu: true },
                LayerSpec::Dense { out_features: 192, relu: true },
                LayerSpec::Dense { out_features: 10, relu: false },
            ],
        }
    }

    /// Weights plus biases, or `None` if a size overflows. Does not check geometry.
    pub fn param_count(&self) -> Option<usize> {
        let [c, h, w] = self.input;
        let (mut features, mut spatial) = (c, Some((h, w)));
        let mut total = 0usize;
        for spec in &self.layers {
            match *spec {
                LayerSpec::Conv { out_channels, kernel, .. } => {
                    let (h, w) = spatial?;
                    let weights = out_channels.checked_mul(features)?.checked_mul(kernel.checked_mul(kernel)?)?;
                    total = total.checked_add(weights)?.checked_add(out_channels)?;
                    spatial = Some((h.saturating_sub(kernel) + 1, w.saturating_sub(kernel) + 1));
                    features = out_channels;
                }
                LayerSpec::MaxPool => {
                    let (h, w) = spatial?;
                    spatial = Some((h / 2, w / 2));
                }
                LayerSpec::Dense { out_features, .. } => {
                    let inputs = match spatial.take() {
                        Some((h, w)) => features.checked_mul(h)?.checked_mul(w)?,
                        None => features,
                    };
                    total = total.checked_add(out_features.checked_mul(inputs)?)?.checked_add(out_features)?;
                    features = out_features;
                }
            }
        }
        Some(total)
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self.layers.last()? {
            LayerSpec::Dense { out_features, .. } => Some(*out_features),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv(ConvGeometry),
    Dense { in_features: usize, out_features: usize },
}

/// One weight-bearing layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState<T: Scalar = f32> {
    pub name: String,
    pub kind: LayerKind,
    /// `[C_out, C_in, k, k]` for conv, `[out, in]` for dense.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub relu: bool,
    feedback: Option<Tensor<T>>,
}

impl<T: Scalar> LayerState<T> {
    /// The fixed random feedback `B0` drawn at initialization, if this layer has one.
    pub fn feedback(&self) -> Option<&Tensor<T>> {
        self.feedback.as_ref()
    }

    /// Replace `B0`. Only meant for building fixtures; training never calls it.
    pub fn replace_feedback(&mut self, b0: Tensor<T>) -> Result<()> {
        let ok = b0.shape() == self.weight.shape() || b0.shape() == self.dense_feedback_shape();
        if !ok {
            return Err(Error::dim(format!(
                "{}: feedback {:?} fits neither {:?} nor {:?}",
                self.name,
                b0.shape(),
                self.weight.shape(),
                self.dense_feedback_shape()
            )));
        }
        self.feedback = Some(b0);
        Ok(())
    }

    pub fn in_features(&self) -> usize {
        match &self.kind {
            LayerKind::Conv(g) => g.in_features(),
            LayerKind::Dense { in_features, .. } => *in_features,
        }
    }

    pub fn out_features(&self) -> usize {
        match &self.kind {
            LayerKind::Conv(g) => g.out_features(),
            LayerKind::Dense { out_features, .. } => *out_features,
        }
    }

    /// Output shape of one sample.
    pub fn out_shape(&self) -> Vec<usize> {
        match &self.kind {
            LayerKind::Conv(g) => vec![g.out_channels, g.out_h(), g.out_w()],
            LayerKind::Dense { out_features, .. } => vec![*out_features],
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerKind::Conv(_))
    }

    fn fan_in(&self) -> usize {
        self.weight.shape()[1..].iter().product()
    }

    fn forward_raw(&self, input: &[T], batch: usize) -> Vec<T> {
        let mut out = match &self.kind {
            LayerKind::Conv(g) => g.forward(input, batch, self.weight.data()),
            LayerKind::Dense { in_features, out_features } => {
                let mut out = vec![T::zero(); batch * out_features];
                gemm(
                    batch,
                    *in_features,
                    *out_features,
                    T::one(),
                    input,
                    Op::N,
                    self.weight.data(),
                    Op::T,
                    T::zero(),
                    &mut out,
                );
                out
            }
        };
        let bias = self.bias.data();
        let per_channel = self.out_features() / bias.len();
        for (i, v) in out.iter_mut().enumerate() {
            *v = *v + bias[(i / per_channel) % bias.len()];
        }
        out
    }

    /// `(dW, dbias)` from this layer's input activations and its pre-activation error.
    pub fn param_grad(&self, input: &Tensor<T>, delta: &Tensor<T>) -> Result<ParamGrad<T>> {
        let batch = input.shape()[0];
        if input.len() != batch * self.in_features() || delta.len() != batch * self.out_features() {
            return Err(Error::dim(format!(
                "{}: input {:?} / delta {:?} do not fit the layer",
                self.name,
                input.shape(),
                delta.shape()
            )));
        }
        Ok(self.param_grad_raw(input.data(), delta.data(), batch))
    }

    fn param_grad_raw(&self, input: &[T], delta: &[T], batch: usize) -> ParamGrad<T> {
        let weight = match &self.kind {
            LayerKind::Conv(g) => g.kernel_grad(input, delta, batch),
            LayerKind::Dense { in_features, out_features } => {
                let mut dw = vec![T::zero(); in_features * out_features];
                gemm(
                    *out_features,
                    batch,
                    *in_features,
                    T::one(),
                    delta,
                    Op::T,
                    input,
                    Op::N,
                    T::zero(),
                    &mut dw,
                );
                dw
            }
        };
        let channels = self.bias.len();
        let per_channel = self.out_features() / channels;
        let mut bias = vec![T::zero(); channels];
        for (i, &d) in delta.iter().enumerate() {
            let c = (i / per_channel) % channels;
            bias[c] = bias[c] + d;
        }
        ParamGrad {
            weight: Tensor::new(self.weight.shape().to_vec(), weight).expect("weight grad shape"),
            bias: Tensor::new(self.bias.shape().to_vec(), bias).expect("bias grad shape"),
        }
    }

    /// Sends `delta` (error at this layer's pre-activation) to the layer's input space.
    fn propagate(&self, delta: &[T], batch: usize, rule: FeedbackRule) -> Result<Vec<T>> {
        let fb = effective_feedback(self, rule)?;
        let (din, dout) = (self.in_features(), self.out_features());
        let dense = |matrix: &[T]| {
            let mut out = vec![T::zero(); batch * din];
            gemm(batch, dout, din, T::one(), delta, Op::N, matrix, Op::N, T::zero(), &mut out);
            out
        };
        Ok(match &self.kind {
            LayerKind::Conv(_) if fb.shape().len() == 2 => dense(fb.data()),
            LayerKind::Conv(g) => g.transpose(delta, batch, fb.data()),
            LayerKind::Dense { .. } => dense(fb.data()),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
enum Stage<T: Scalar> {
    Param(LayerState<T>),
    Pool(PoolGeometry),
}

#[derive(Clone, Debug, Default)]
struct ForwardCache<T> {
    batch: usize,
    /// Input to each stage, flattened `[N, features]`.
    inputs: Vec<Vec<T>>,
    /// Pre-activation of each param stage with a ReLU.
    pre: Vec<Option<Vec<T>>>,
    argmax: Vec<Option<Vec<u32>>>,
    logits: Vec<T>,
}

/// Result of one backward pass.
#[derive(Clone, Debug)]
pub struct Backward<T: Scalar = f32> {
    /// Per weight layer, in forward order.
    pub grads: Vec<ParamGrad<T>>,
    /// Error at each weight layer's pre-activation, `[N, ...out_shape]`.
    pub deltas: Vec<Tensor<T>>,
    /// Gradient with respect to each weight layer's post-activation output.
    pub output_grads: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub seed: u64,
    /// Standard deviation of `B0`; required when the rule draws one.
    pub sigma: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Network<T: Scalar = f32> {
    arch: Architecture,
    rule: FeedbackRule,
    stages: Vec<Stage<T>>,
    cache: Option<ForwardCache<T>>,
}

impl<T: Scalar> PartialEq for Network<T> {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.rule == other.rule && self.stages == other.stages
    }
}

impl<T: Scalar> Network<T> {
    /// Builds the layer stack with He-normal weights (`std = sqrt(2 / fan_in)`),
    /// zero biases and, when `rule` needs it, `B0 ~ N(0, sigma^2)` for every
    /// weight layer that has a layer below it.
    pub fn new(arch: Architecture, rule: FeedbackRule, init: &InitConfig) -> Result<Self> {
        let mut net = Self::skeleton(arch, rule)?;
        let mut weights_rng = Rng::for_component(init.seed, "weights");
        for layer in net.param_layers_mut() {
            let std = (2.0 / layer.fan_in() as f64).sqrt();
            layer.weight = randn(&mut weights_rng, layer.weight.shape(), std)?;
        }
        if rule.uses_initial_feedback() {
            let sigma = init.sigma.ok_or_else(|| {
                Error::Config(format!("rule {rule} needs a feedback scale sigma"))
            })?;
            let mut fb_rng = Rng::for_component(init.seed, "feedback");
            for (i, stage) in net.stages.iter_mut().enumerate() {
                let Stage::Param(layer) = stage else { continue };
                if i == 0 {
                    continue;
                }
                let shape = if layer.is_conv() && rule.dense_conv_feedback() {
                    layer.dense_feedback_shape()
                } else {
                    layer.weight.shape().to_vec()
                };
                layer.feedback = Some(randn(&mut fb_rng, &shape, sigma)?);
            }
        }
        Ok(net)
    }

    /// All-zero parameters and no feedback matrices, with geometry checked.
    pub fn skeleton(arch: Architecture, rule: FeedbackRule) -> Result<Self> {
        let mut stages = Vec::with_capacity(arch.layers.len());
        let mut shape: Vec<usize> = arch.input.to_vec();
        let (mut convs, mut fcs) = (0, 0);
        for spec in &arch.layers {
            match *spec {
                LayerSpec::Conv { out_channels, kernel, relu } => {
                    let [c, h, w] = <[usize; 3]>::try_from(shape.as_slice()).map_err(|_| {
                        Error::dim("conv layer after a dense layer")
                    })?;
                    let g = ConvGeometry::new([c, h, w], out_channels, [kernel, kernel], 1, 0)?;
                    convs += 1;
                    shape = vec![out_channels, g.out_h(), g.out_w()];
                    stages.push(Stage::Param(LayerState {
                        name: format!("conv{convs}"),
                        kind: LayerKind::Conv(g),
                        weight: Tensor::zeros(&g.kernel_shape()),
                        bias: Tensor::zeros(&[out_channels]),
                        relu,
                        feedback: None,
                    }));
                }
                LayerSpec::MaxPool => {
                    let [c, h, w] = <[usize; 3]>::try_from(shape.as_slice())
                        .map_err(|_| Error::dim("max pool after a dense layer"))?;
                    let g = PoolGeometry::new([c, h, w])?;
                    shape = vec![c, g.out_h(), g.out_w()];
                    stages.push(Stage::Pool(g));
                }
                LayerSpec::Dense { out_features, relu } => {
                    let in_features: usize = shape.iter().product();
                    fcs += 1;
                    shape = vec![out_features];
                    stages.push(Stage::Param(LayerState {
                        name: format!("fc{fcs}"),
                        kind: LayerKind::Dense { in_features, out_features },
                        weight: Tensor::zeros(&[out_features, in_features]),
                        bias: Tensor::zeros(&[out_features]),
                        relu,
                        feedback: None,
                    }));
                }
            }
        }
        if !matches!(stages.last(), Some(Stage::Param(l)) if !l.is_conv()) {
            return Err(Error::Config("architecture must end in a dense layer".into()));
        }
        Ok(Network { arch, rule, stages, cache: None })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    /// The rule this network was initialized for (decides which `B0` exist).
    pub fn rule(&self) -> FeedbackRule {
        self.rule
    }

    pub fn param_layers(&self) -> impl Iterator<Item = &LayerState<T>> {
        self.stages.iter().filter_map(|s| match s {
            Stage::Param(l) => Some(l),
            Stage::Pool(_) => None,
        })
    }

    pub fn param_layers_mut(&mut self) -> impl Iterator<Item = &mut LayerState<T>> {
        self.stages.iter_mut().filter_map(|s| match s {
            Stage::Param(l) => Some(l),
            Stage::Pool(_) => None,
        })
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.param_layers().map(|l| l.name.clone()).collect()
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.param_layers()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::Config(format!("no layer named {name:?}")))
    }

    pub fn layer(&self, name: &str) -> Result<&LayerState<T>> {
        let i = self.layer_index(name)?;
        Ok(self.param_layers().nth(i).expect("index from position"))
    }

    /// Parameters in `[w1, b1, w2, b2, ...]` order.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.param_layers().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.param_layers_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.param_layers().last().map(|l| l.out_features()).unwrap_or(0)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Logits for `batch[N, C, H, W]`; caches what the backward pass needs.
    pub fn forward(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let s = batch.shape();
        if s.len() != 4 || s[1..] != self.arch.input {
            return Err(Error::dim(format!(
                "network expects [N, {:?}] input, got {s:?}",
                self.arch.input
            )));
        }
        let n = s[0];
        let mut cache = ForwardCache {
            batch: n,
            inputs: Vec::with_capacity(self.stages.len()),
            pre: Vec::with_capacity(self.stages.len()),
            argmax: Vec::with_capacity(self.stages.len()),
            logits: Vec::new(),
        };
        let mut x = batch.data().to_vec();
        for stage in &self.stages {
            let (out, pre, arg) = match stage {
                Stage::Param(layer) => {
                    let u = layer.forward_raw(&x, n);
                    if layer.relu {
                        let a = u.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
                        (a, Some(u), None)
                    } else {
                        (u, None, None)
                    }
                }
                Stage::Pool(g) => {
                    let (out, arg) = g.forward(&x, n);
                    (out, None, Some(arg))
                }
            };
            cache.inputs.push(std::mem::replace(&mut x, out));
            cache.pre.push(pre);
            cache.argmax.push(arg);
        }
        cache.logits = x.clone();
        let classes = self.num_classes();
        self.cache = Some(cache);
        Tensor::new(vec![n, classes], x)
    }

    /// Inference without touching the cache.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut scratch = Network {
            arch: self.arch.clone(),
            rule: self.rule,
            stages: self.stages.clone(),
            cache: None,
        };
        scratch.forward(batch)
    }

    fn cache(&self) -> Result<&ForwardCache<T>> {
        self.cache
            .as_ref()
            .ok_or_else(|| Error::State("backward or activation read before forward".into()))
    }

    fn param_stage_indices(&self) -> Vec<usize> {
        self.stages
            .iter()
            .enumerate()
            .filter_map(|(i, s)| matches!(s, Stage::Param(_)).then_some(i))
            .collect()
    }

    /// Post-activation output of weight layer `layer` from the last forward pass,
    /// shaped `[N, ...out_shape]` (for conv layers this is before pooling).
    pub fn activation(&self, layer: usize) -> Result<Tensor<T>> {
        let cache = self.cache()?;
        let stages = self.param_stage_indices();
        let &stage = stages
            .get(layer)
            .ok_or_else(|| Error::Config(format!("no weight layer {layer}")))?;
        let data = match cache.inputs.get(stage + 1) {
            Some(next_input) => next_input.clone(),
            None => cache.logits.clone(),
        };
        let l = self.param_layers().nth(layer).expect("checked above");
        let mut shape = vec![cache.batch];
        shape.extend(l.out_shape());
        Tensor::new(shape, data)
    }

    /// Input seen by weight layer `layer` in the last forward pass, `[N, ...]`.
    pub fn layer_input(&self, layer: usize) -> Result<Tensor<T>> {
        let cache = self.cache()?;
        let stages = self.param_stage_indices();
        let &stage = stages
            .get(layer)
            .ok_or_else(|| Error::Config(format!("no weight layer {layer}")))?;
        let x = cache.inputs[stage].clone();
        let n = cache.batch;
        let f = x.len() / n;
        Tensor::new(vec![n, f], x)
    }

    /// Backward pass from `dlogits` (gradient of the objective w.r.t. the logits).
    ///
    /// The top layer's error is `dlogits` itself for every rule; each weight
    /// layer then sends its error down through `effective_feedback(layer, rule)`.
    /// Pooling routes by argmax and ReLU masks are applied on every path.
    pub fn backward(&self, dlogits: &Tensor<T>, rule: FeedbackRule) -> Result<Backward<T>> {
        let cache = self.cache()?;
        let n = cache.batch;
        if dlogits.shape() != [n, self.num_classes()] {
            return Err(Error::dim(format!(
                "dlogits {:?} does not match cached batch [{n}, {}]",
                dlogits.shape(),
                self.num_classes()
            )));
        }
        let params = self.param_stage_indices().len();
        let mut grads = Vec::with_capacity(params);
        let mut deltas = Vec::with_capacity(params);
        let mut output_grads = Vec::with_capacity(params);
        let mut g = dlogits.data().to_vec();
        for (i, stage) in self.stages.iter().enumerate().rev() {
            match stage {
                Stage::Param(layer) => {
                    let delta = match &cache.pre[i] {
                        Some(u) => g
                            .iter()
                            .zip(u)
                            .map(|(&g, &u)| if u > T::zero() { g } else { T::zero() })
                            .collect(),
                        None => g.clone(),
                    };
                    grads.push(layer.param_grad_raw(&cache.inputs[i], &delta, n));
                    let mut shape = vec![n];
                    shape.extend(layer.out_shape());
                    output_grads.push(Tensor::new(shape.clone(), std::mem::take(&mut g))?);
                    if i > 0 {
                        g = layer.propagate(&delta, n, rule)?;
                    }
                    deltas.push(Tensor::new(shape, delta)?);
                }
                Stage::Pool(pool) => {
                    let arg = cache.argmax[i].as_ref().expect("pool stage caches argmax");
                    g = pool.backward(&g, arg, n);
                }
            }
        }
        grads.reverse();
        deltas.reverse();
        output_grads.reverse();
        Ok(Backward { grads, deltas, output_grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax_cross_entropy;

    #[test]
    fn cifar_shapes_trace() {
        let net = Network::<f32>::skeleton(Architecture::cifar(), FeedbackRule::Bp).unwrap();
        let shapes: Vec<_> = net.param_layers().map(|l| (l.name.clone(), l.out_shape())).collect();
        assert_eq!(shapes[0], ("conv1".into(), vec![64, 20, 20]));
        assert_eq!(shapes[1], ("conv2".into(), vec![64, 6, 6]));
        assert_eq!(net.layer("fc1").unwrap().in_features(), 576);
        assert_eq!(net.num_classes(), 10);
    }

    #[test]
    fn param_count_matches_skeleton() {
        let net = Network::<f32>::skeleton(Architecture::cifar(), FeedbackRule::Bp).unwrap();
        let real: usize = net.params().iter().map(|p| p.len()).sum();
        assert_eq!(Architecture::cifar().param_count(), Some(real));
        let huge = Architecture {
            input: [3, 24, 24],
            layers: vec![LayerSpec::Dense { out_features: usize::MAX / 2, relu: false }],
        };
        assert_eq!(huge.param_count(), None);
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let mut net = Network::<f32>::skeleton(Architecture::cifar(), FeedbackRule::Bp).unwrap();
        let x = Tensor::from_fn(&[2, 3, 24, 24], |i| (i % 7) as f32);
        let y = net.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 10]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let mut net = Network::<f32>::skeleton(Architecture::cifar(), FeedbackRule::Bp).unwrap();
        assert!(matches!(
            net.forward(&Tensor::zeros(&[1, 3, 32, 32])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let net = Network::<f32>::skeleton(Architecture::cifar(), FeedbackRule::Bp).unwrap();
        let d = Tensor::zeros(&[1, 10]);
        assert!(matches!(net.backward(&d, FeedbackRule::Bp), Err(Error::State(_))));
    }

    #[test]
    fn feedback_shapes_follow_rule() {
        let init = InitConfig { seed: 42, sigma: Some(0.05) };
        let fa = Network::<f32>::new(Architecture::cifar(), FeedbackRule::FaRandom, &init).unwrap();
        let shapes: Vec<_> = fa.param_layers().map(|l| l.feedback().map(|b| b.shape().to_vec())).collect();
        assert_eq!(shapes[0], None);
        assert_eq!(shapes[1], Some(vec![64 * 6 * 6, 64 * 10 * 10]));
        assert_eq!(shapes[2], Some(vec![384, 576]));
        let toe = Network::<f32>::new(Architecture::cifar(), FeedbackRule::FaToeplitz, &init).unwrap();
        assert_eq!(toe.layer("conv2").unwrap().feedback().unwrap().shape(), &[64, 64, 5, 5]);
        let sn = Network::<f32>::new(Architecture::cifar(), FeedbackRule::UsfSn, &init).unwrap();
        assert!(sn.param_layers().all(|l| l.feedback().is_none()));
        assert!(Network::<f32>::new(
            Architecture::cifar(),
            FeedbackRule::UsfInit,
            &InitConfig { seed: 42, sigma: None }
        )
        .is_err());
    }

    #[test]
    fn forward_weights_shared_across_rules() {
        let init = InitConfig { seed: 42, sigma: Some(0.1) };
        let a = Network::<f32>::new(Architecture::cifar(), FeedbackRule::Bp, &init).unwrap();
        let b = Network::<f32>::new(Architecture::cifar(), FeedbackRule::FaToeplitz, &init).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn batch_permutation_permutes_logits() {
        let init = InitConfig { seed: 1, sigma: None };
        let mut net = Network::<f32>::new(Architecture::cifar(), FeedbackRule::Bp, &init).unwrap();
        let mut rng = Rng::new(2);
        let x: Tensor<f32> = randn(&mut rng, &[3, 3, 24, 24], 1.0).unwrap();
        let y = net.forward(&x).unwrap();
        let perm = [2usize, 0, 1];
        let per = x.row_len();
        let xp = Tensor::from_fn(x.shape(), |i| x.data()[perm[i / per] * per + i % per]);
        let yp = net.forward(&xp).unwrap();
        for (r, &p) in perm.iter().enumerate() {
            assert_eq!(yp.row(r), y.row(p));
        }
    }

    #[test]
    fn weight_grads_depend_only_on_delta_and_input() {
        let init = InitConfig { seed: 4, sigma: Some(0.05) };
        for rule in FeedbackRule::ALL {
            let mut net = Network::<f64>::new(Architecture::cifar(), rule, &init).unwrap();
            let x: Tensor<f64> = randn(&mut Rng::new(9), &[2, 3, 24, 24], 1.0).unwrap();
            let logits = net.forward(&x).unwrap();
            let (_, d) = softmax_cross_entropy(&logits, &[1, 7]).unwrap();
            let back = net.backward(&d, rule).unwrap();
            for (i, layer) in net.param_layers().enumerate() {
                let input = net.layer_input(i).unwrap();
                let recomputed = layer.param_grad(&input, &back.deltas[i]).unwrap();
                assert_eq!(recomputed, back.grads[i], "{rule} {}", layer.name);
            }
        }
    }

    #[test]
    fn feedback_is_never_mutated_by_backward() {
        let init = InitConfig { seed: 5, sigma: Some(0.05) };
        for rule in [FeedbackRule::FaRandom, FeedbackRule::FaToeplitz, FeedbackRule::UsfInit] {
            let mut net = Network::<f32>::new(Architecture::cifar(), rule, &init).unwrap();
            let before: Vec<_> = net.param_layers().map(|l| l.feedback().cloned()).collect();
            let x: Tensor<f32> = randn(&mut Rng::new(1), &[2, 3, 24, 24], 1.0).unwrap();
            for _ in 0..3 {
                let logits = net.forward(&x).unwrap();
                let (_, d) = softmax_cross_entropy(&logits, &[0, 1]).unwrap();
                net.backward(&d, rule).unwrap();
            }
            let after: Vec<_> = net.param_layers().map(|l| l.feedback().cloned()).collect();
            assert_eq!(before, after);
        }
    }

    #[test]
    fn activation_is_post_relu_pre_pool() {
        let init = InitConfig { seed: 3, sigma: None };
        let mut net = Network::<f32>::new(Architecture::cifar(), FeedbackRule::Bp, &init).unwrap();
        let x: Tensor<f32> = randn(&mut Rng::new(3), &[2, 3, 24, 24], 1.0).unwrap();
        let logits = net.forward(&x).unwrap();
        let a1 = net.activation(0).unwrap();
        assert_eq!(a1.shape(), &[2, 64, 20, 20]);
        assert!(a1.data().iter().all(|&v| v >= 0.0));
        assert_eq!(net.activation(4).unwrap(), logits);
    }
}
