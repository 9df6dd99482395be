//! A small fully connected classifier with exact reverse-mode gradients.
//!
//! The network maps an input vector through `L` hidden blocks
//! (affine + ReLU/identity) and a final affine block producing the logits.
//! Hidden activations can be declared as `channels × positions` maps, in which
//! case the extracted features are per-channel spatial means.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::features::FeatureBundle;
use crate::linalg::{argmax, dot, Matrix};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative; the ReLU subgradient at exactly 0 is 0.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Declares a hidden activation as a channel-major `channels × positions` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMap {
    pub channels: usize,
    pub positions: usize,
}

impl ChannelMap {
    pub fn pool(&self, activation: &[f64]) -> Vec<f64> {
        let p = self.positions as f64;
        activation
            .chunks_exact(self.positions)
            .map(|c| c.iter().sum::<f64>() / p)
            .collect()
    }

    fn unpool_grad(&self, pooled_grad: &[f64]) -> Vec<f64> {
        let p = self.positions as f64;
        pooled_grad
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g / p, self.positions))
            .collect()
    }
}

/// One affine block `act(W·x + b)` with `W` stored row-major, `d_out × d_in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub d_in: usize,
    pub d_out: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_map: Option<ChannelMap>,
}

impl Dense {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::param("bias length must equal weight rows"));
        }
        Ok(Self {
            d_in: weights.cols(),
            d_out: weights.rows(),
            activation,
            weights: weights.into_vec(),
            bias,
            channel_map: None,
        })
    }

    pub fn with_channel_map(mut self, map: ChannelMap) -> Self {
        self.channel_map = Some(map);
        self
    }

    #[inline]
    fn weight_row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.d_in..(o + 1) * self.d_in]
    }

    fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        (0..self.d_out)
            .map(|o| dot(self.weight_row(o), x) + self.bias[o])
            .collect()
    }

    /// `Wᵀ·g`.
    fn backward_input(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d_in];
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            for (d, &w) in out.iter_mut().zip(self.weight_row(o)) {
                *d += go * w;
            }
        }
        out
    }

    pub fn feature_dim(&self) -> usize {
        self.channel_map.map_or(self.d_out, |m| m.channels)
    }
}

/// Per-coordinate input bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl InputBox {
    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Self {
        Self {
            lo: vec![lo; dim],
            hi: vec![hi; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn clip(&self, x: &mut [f64]) {
        for ((v, &lo), &hi) in x.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(lo, hi);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(&self.lo)
                .zip(&self.hi)
                .all(|((v, &lo), &hi)| *v >= lo && *v <= hi)
    }
}

/// Feed-forward classifier. The last block produces the logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyNet {
    layers: Vec<Dense>,
    input_box: InputBox,
    n_classes: usize,
}

/// Output of a forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Vec<f64>,
    /// Post-activation output of every hidden block (before pooling).
    pub activations: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
}

/// A differentiable scalar computed from a hidden layer's (pooled) features.
pub trait LayerHead: Sync {
    fn value_and_grad(&self, features: &[f64]) -> (f64, Vec<f64>);
}

/// The scalar whose input gradient is requested.
#[derive(Clone, Copy)]
pub enum ScalarHead<'a> {
    /// Cross-entropy `J(x, t)`.
    CrossEntropy(usize),
    /// Raw logit `i`.
    Logit(usize),
    /// A function of hidden layer `layer`'s pooled features.
    Layer {
        layer: usize,
        head: &'a dyn LayerHead,
    },
}

/// Value of a head together with its gradient with respect to the input.
#[derive(Clone, Debug)]
pub struct HeadEval {
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// Hidden widths and activation layout used by [`TinyNet::init`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    /// Optional `(layer index, channels)` declaring that hidden layer as a channel map.
    #[serde(default)]
    pub channel_maps: Vec<(usize, usize)>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: vec![32, 24, 16],
            channel_maps: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 40,
            learning_rate: 0.05,
            batch_size: 32,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("logits must be non-empty and finite"));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / s).collect())
}

/// Predicted class and its softmax probability.
pub fn softmax_confidence(logits: &[f64]) -> Result<(usize, f64)> {
    let p = softmax(logits)?;
    let k = argmax(&p);
    Ok((k, p[k]))
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln()
}

/// `−log softmax(logits)[t]`.
pub fn cross_entropy_from_logits(logits: &[f64], t: usize) -> f64 {
    log_sum_exp(logits) - logits[t]
}

/// Loss with per-layer weight and bias gradients.
type BatchGradient = (f64, Vec<Vec<f64>>, Vec<Vec<f64>>);

impl TinyNet {
    pub fn new(layers: Vec<Dense>, input_box: InputBox) -> Result<Self> {
        let last = layers
            .last()
            .ok_or_else(|| Error::param("network needs at least the logit block"))?;
        if last.activation != Activation::Identity {
            return Err(Error::param("logit block must use the identity activation"));
        }
        if last.channel_map.is_some() {
            return Err(Error::param("logit block cannot be a channel map"));
        }
        let n_classes = last.d_out;
        if n_classes < 2 {
            return Err(Error::param("network needs at least two classes"));
        }
        if layers[0].d_in != input_box.dim() || input_box.lo.len() != input_box.hi.len() {
            return Err(Error::param("input box dimension must match the first block"));
        }
        if input_box.lo.iter().zip(&input_box.hi).any(|(l, h)| l > h) {
            return Err(Error::param("input box has lo > hi"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.d_in * l.d_out || l.bias.len() != l.d_out {
                return Err(Error::param(format!("block {i} has inconsistent shapes")));
            }
            if let Some(m) = l.channel_map {
                if m.channels == 0 || m.channels * m.positions != l.d_out {
                    return Err(Error::param(format!(
                        "block {i}: channel map {}x{} does not cover {} units",
                        m.channels, m.positions, l.d_out
                    )));
                }
            }
        }
        for w in layers.windows(2) {
            if w[0].d_out != w[1].d_in {
                return Err(Error::param("consecutive block dimensions do not chain"));
            }
        }
        Ok(Self {
            layers,
            input_box,
            n_classes,
        })
    }

    /// He-initialised network with the given architecture.
    pub fn init(
        input_dim: usize,
        n_classes: usize,
        arch: &Architecture,
        input_box: InputBox,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = rng::from_seed(seed);
        let mut dims = vec![input_dim];
        dims.extend(&arch.hidden);
        dims.push(n_classes);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, w) in dims.windows(2).enumerate() {
            let (d_in, d_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, (2.0 / d_in as f64).sqrt())
                .map_err(|e| Error::param(e.to_string()))?;
            let weights = (0..d_in * d_out).map(|_| normal.sample(&mut rng)).collect();
            let last = i == dims.len() - 2;
            let mut layer = Dense {
                d_in,
                d_out,
                activation: if last {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
                weights,
                bias: vec![0.0; d_out],
                channel_map: None,
            };
            if let Some(&(_, channels)) = arch.channel_maps.iter().find(|(l, _)| *l == i) {
                if last || channels == 0 || d_out % channels != 0 {
                    return Err(Error::param(format!(
                        "cannot declare hidden layer {i} of width {d_out} as {channels} channels"
                    )));
                }
                layer.channel_map = Some(ChannelMap {
                    channels,
                    positions: d_out / channels,
                });
            }
            layers.push(layer);
        }
        Self::new(layers, input_box)
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in
    }

    /// Number of hidden (scored) layers.
    pub fn n_hidden(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_box(&self) -> &InputBox {
        &self.input_box
    }

    pub fn layer_names(&self) -> Vec<String> {
        (1..=self.n_hidden()).map(|l| format!("h{l}")).collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        if x.len() != self.input_dim() {
            return Err(Error::param(format!(
                "input has length {} but the network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut activations = Vec::with_capacity(self.n_hidden());
        let mut cur = x.to_vec();
        for layer in &self.layers {
            let z = layer.pre_activation(&cur);
            cur = z.iter().map(|&v| layer.activation.apply(v)).collect();
            pre_activations.push(z);
            activations.push(cur.clone());
        }
        let logits = activations.pop().expect("at least one block");
        Ok(Forward {
            logits,
            activations,
            pre_activations,
        })
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.logits)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Features of hidden layer `l` (pooled if declared as a channel map).
    pub fn layer_features(&self, fwd: &Forward, l: usize) -> Vec<f64> {
        match self.layers[l].channel_map {
            Some(m) => m.pool(&fwd.activations[l]),
            None => fwd.activations[l].clone(),
        }
    }

    pub fn cross_entropy(&self, x: &[f64], t: usize) -> Result<f64> {
        if t >= self.n_classes {
            return Err(Error::param(format!("target class {t} out of range")));
        }
        Ok(cross_entropy_from_logits(&self.logits(x)?, t))
    }

    /// Backpropagate `grad` (w.r.t. the output of block `from`) to the input.
    fn backprop(&self, fwd: &Forward, from: usize, mut grad: Vec<f64>) -> Vec<f64> {
        for l in (0..=from).rev() {
            let layer = &self.layers[l];
            for (g, &z) in grad.iter_mut().zip(&fwd.pre_activations[l]) {
                *g *= layer.activation.derivative(z);
            }
            grad = layer.backward_input(&grad);
        }
        grad
    }

    /// Exact gradient of the selected scalar with respect to the input.
    pub fn input_gradient(&self, x: &[f64], head: ScalarHead<'_>) -> Result<HeadEval> {
        let fwd = self.forward(x)?;
        let top = self.layers.len() - 1;
        match head {
            ScalarHead::CrossEntropy(t) | ScalarHead::Logit(t) if t >= self.n_classes => Err(
                Error::param(format!("class {t} out of range for {} classes", self.n_classes)),
            ),
            ScalarHead::CrossEntropy(t) => {
                let mut g = softmax(&fwd.logits)?;
                g[t] -= 1.0;
                let value = cross_entropy_from_logits(&fwd.logits, t);
                Ok(HeadEval {
                    value,
                    gradient: self.backprop(&fwd, top, g),
                })
            }
            ScalarHead::Logit(i) => {
                let mut g = vec![0.0; self.n_classes];
                g[i] = 1.0;
                Ok(HeadEval {
                    value: fwd.logits[i],
                    gradient: self.backprop(&fwd, top, g),
                })
            }
            ScalarHead::Layer { layer, head } => {
                if layer >= self.n_hidden() {
                    return Err(Error::param(format!(
                        "hidden layer {layer} does not exist ({} hidden layers)",
                        self.n_hidden()
                    )));
                }
                let feats = self.layer_features(&fwd, layer);
                let (value, fg) = head.value_and_grad(&feats);
                let g = match self.layers[layer].channel_map {
                    Some(m) => m.unpool_grad(&fg),
                    None => fg,
                };
                Ok(HeadEval {
                    value,
                    gradient: self.backprop(&fwd, layer, g),
                })
            }
        }
    }

    /// Logits and the full input Jacobian of the logits (row `k` = `∇ₓ logit_k`).
    pub fn logit_jacobian(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let fwd = self.forward(x)?;
        let top = self.layers.len() - 1;
        let jac = (0..self.n_classes)
            .map(|k| {
                let mut g = vec![0.0; self.n_classes];
                g[k] = 1.0;
                self.backprop(&fwd, top, g)
            })
            .collect();
        Ok((fwd.logits, jac))
    }

    /// Run every input through the network and collect pooled hidden features.
    pub fn extract_features<X: AsRef<[f64]> + Sync>(&self, inputs: &[X]) -> Result<FeatureBundle> {
        use rayon::prelude::*;
        let passes: Vec<Forward> = inputs
            .par_iter()
            .map(|x| self.forward(x.as_ref()))
            .collect::<Result<_>>()?;
        let n = passes.len();
        let mut layers = Vec::with_capacity(self.n_hidden());
        for l in 0..self.n_hidden() {
            let d = self.layers[l].feature_dim();
            let mut data = Vec::with_capacity(n * d);
            for f in &passes {
                data.extend(self.layer_features(f, l));
            }
            layers.push(Matrix::from_vec(n, d, data)?);
        }
        let mut logits = Vec::with_capacity(n * self.n_classes);
        for f in &passes {
            logits.extend_from_slice(&f.logits);
        }
        FeatureBundle::new(
            self.layer_names(),
            layers,
            Matrix::from_vec(n, self.n_classes, logits)?,
        )
    }

    pub fn accuracy(&self, examples: &[Example]) -> Result<f64> {
        if examples.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        for e in examples {
            if self.predict(&e.input)? == e.true_label {
                correct += 1;
            }
        }
        Ok(correct as f64 / examples.len() as f64)
    }

    /// Mean cross-entropy over `batch`, plus the parameter gradients.
    fn batch_gradient(&self, batch: &[&Example]) -> Result<BatchGradient> {
        let mut gw: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect();
        let mut gb: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.d_out]).collect();
        let mut loss = 0.0;
        for e in batch {
            let fwd = self.forward(&e.input)?;
            loss += cross_entropy_from_logits(&fwd.logits, e.true_label);
            let mut g = softmax(&fwd.logits)?;
            g[e.true_label] -= 1.0;
            for l in (0..self.layers.len()).rev() {
                let layer = &self.layers[l];
                for (v, &z) in g.iter_mut().zip(&fwd.pre_activations[l]) {
                    *v *= layer.activation.derivative(z);
                }
                let input: &[f64] = if l == 0 { &e.input } else { &fwd.activations[l - 1] };
                for (o, &go) in g.iter().enumerate() {
                    gb[l][o] += go;
                    if go == 0.0 {
                        continue;
                    }
                    let row = &mut gw[l][o * layer.d_in..(o + 1) * layer.d_in];
                    for (w, &xi) in row.iter_mut().zip(input) {
                        *w += go * xi;
                    }
                }
                if l > 0 {
                    g = layer.backward_input(&g);
                }
            }
        }
        let scale = 1.0 / batch.len() as f64;
        for v in gw.iter_mut().chain(gb.iter_mut()) {
            v.iter_mut().for_each(|x| *x *= scale);
        }
        Ok((loss * scale, gw, gb))
    }

    /// Minibatch SGD with momentum on the mean cross-entropy.
    pub fn train(
        &self,
        train: &[Example],
        test: Option<&[Example]>,
        opts: &TrainOptions,
        seed: u64,
    ) -> Result<(TinyNet, TrainReport)> {
        if opts.batch_size == 0 || !(opts.learning_rate > 0.0) {
            return Err(Error::param("batch size and learning rate must be positive"));
        }
        for e in train {
            if e.true_label >= self.n_classes || e.input.len() != self.input_dim() {
                return Err(Error::param("training example does not fit the network"));
            }
        }
        let mut net = self.clone();
        let mut rng = rng::from_seed(seed);
        let mut vel_w: Vec<Vec<f64>> = net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect();
        let mut vel_b: Vec<Vec<f64>> = net.layers.iter().map(|l| vec![0.0; l.d_out]).collect();
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut final_loss = f64::NAN;
        for epoch in 0..opts.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(opts.batch_size) {
                let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
                let (loss, gw, gb) = net.batch_gradient(&batch)?;
                if !loss.is_finite() {
                    return Err(Error::Training(format!("non-finite loss at epoch {epoch}")));
                }
                epoch_loss += loss * batch.len() as f64;
                for (l, layer) in net.layers.iter_mut().enumerate() {
                    for ((w, v), g) in layer.weights.iter_mut().zip(&mut vel_w[l]).zip(&gw[l]) {
                        *v = opts.momentum * *v - opts.learning_rate * g;
                        *w += *v;
                    }
                    for ((b, v), g) in layer.bias.iter_mut().zip(&mut vel_b[l]).zip(&gb[l]) {
                        *v = opts.momentum * *v - opts.learning_rate * g;
                        *b += *v;
                    }
                }
            }
            final_loss = epoch_loss / train.len().max(1) as f64;
            if !final_loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss at epoch {epoch}")));
            }
        }
        let report = TrainReport {
            final_loss,
            train_accuracy: net.accuracy(train)?,
            test_accuracy: test.map(|t| net.accuracy(t)).transpose()?,
        };
        Ok((net, report))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::param(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: TinyNet = serde_json::from_str(s)
            .map_err(|e| Error::Format(crate::error::FormatError::MalformedHeader(e.to_string())))?;
        TinyNet::new(raw.layers, raw.input_box)
    }
}
