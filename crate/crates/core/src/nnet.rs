//! Dense rectifier network with hand-derived gradients, the three training
//! losses, Nesterov SGD and the cosine learning-rate schedule.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::datasets::LabeledSet;
use crate::error::{ensure_dim, Error, Result};
use crate::seed;

/// Added to the logit norm under LogitNorm so a zero logit vector stays finite.
pub const LOGIT_NORM_EPS: f64 = 1e-12;

/// One affine layer; `weights` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    pub fn weight(&self, out: usize, inp: usize) -> f64 {
        self.weights[out * self.inputs + inp]
    }

    pub fn weight_row(&self, out: usize) -> &[f64] {
        &self.weights[out * self.inputs..(out + 1) * self.inputs]
    }

    pub fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.bias.iter().enumerate().map(|(o, b)| b + dot(self.weight_row(o), x)));
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpClassifier {
    layers: Vec<Dense>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub logits: Vec<f64>,
    /// Post-activation of the last hidden layer (the input itself when the
    /// network has no hidden layer).
    pub penultimate: Vec<f64>,
}

/// Per-layer activations kept for backpropagation.
struct Trace {
    /// `inputs[l]` is the input to layer `l` (post-activation of layer l-1).
    inputs: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl MlpClassifier {
    /// He-initialised network: weights ~ N(0, 2 / fan_in), zero biases.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::invalid("a network needs at least input and output dimensions"));
        }
        if layer_dims.contains(&0) {
            return Err(Error::invalid("layer dimensions must be at least 1"));
        }
        let layers = layer_dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let mut rng = seed::stream(seed, "nnet.init", l as u64);
                let std = (2.0 / w[0] as f64).sqrt();
                let mut layer = Dense::zeros(w[0], w[1]);
                for v in &mut layer.weights {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = std * z;
                }
                layer
            })
            .collect();
        Ok(MlpClassifier { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("a network needs at least one layer"));
        }
        for pair in layers.windows(2) {
            ensure_dim(pair[0].outputs, pair[1].inputs)?;
        }
        for l in &layers {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::invalid("layer parameter shapes inconsistent with its dimensions"));
            }
        }
        Ok(MlpClassifier { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn last_layer(&self) -> &Dense {
        self.layers.last().expect("nonempty")
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].inputs];
        dims.extend(self.layers.iter().map(|l| l.outputs));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn num_classes(&self) -> usize {
        self.last_layer().outputs
    }

    pub fn feature_dim(&self) -> usize {
        self.last_layer().inputs
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            layer.apply(&current, &mut next);
            if l < last {
                for v in &mut next {
                    *v = v.max(0.0);
                }
            }
            inputs.push(std::mem::replace(&mut current, std::mem::take(&mut next)));
        }
        Trace { inputs, logits: current }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        ensure_dim(self.input_dim(), x.len())?;
        let mut t = self.trace(x);
        let penultimate = t.inputs.pop().expect("nonempty");
        Ok(Forward { logits: t.logits, penultimate })
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.logits)
    }

    /// Logits from penultimate features, i.e. the final affine layer alone.
    pub fn head(&self, features: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        self.last_layer().apply(features, &mut out);
        out
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Backpropagate `d_logits` through the trace, accumulating parameter
    /// gradients into `grads` (when given) and returning the input gradient.
    fn backward(&self, trace: &Trace, d_logits: &[f64], mut grads: Option<&mut Gradients>, want_input: bool) -> Vec<f64> {
        let mut delta = d_logits.to_vec();
        let mut d_input = Vec::new();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &trace.inputs[l];
            if let Some(g) = grads.as_deref_mut() {
                let gl = &mut g.layers[l];
                for (o, &dv) in delta.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    gl.bias[o] += dv;
                    let row = &mut gl.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (w, &a) in row.iter_mut().zip(input) {
                        *w += dv * a;
                    }
                }
            }
            if l == 0 && !want_input {
                break;
            }
            let mut back = vec![0.0; layer.inputs];
            for (o, &dv) in delta.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                for (b, &w) in back.iter_mut().zip(layer.weight_row(o)) {
                    *b += dv * w;
                }
            }
            if l > 0 {
                // Rectifier derivative: inputs to layer l are post-activations of layer l-1.
                for (b, &a) in back.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *b = 0.0;
                    }
                }
                delta = back;
            } else {
                d_input = back;
            }
        }
        d_input
    }

    /// Gradient of -log max_i softmax(f(x))_i with respect to the input.
    pub fn input_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_dim(self.input_dim(), x.len())?;
        let trace = self.trace(x);
        let mut d = softmax(&trace.logits);
        d[argmax(&trace.logits)] -= 1.0;
        Ok(self.backward(&trace, &d, None, true))
    }
}

/// Gradients laid out exactly like the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpClassifier) -> Self {
        Gradients { layers: model.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect() }
    }

    fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= s);
        }
    }

    fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += s * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += s * y;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias))
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossMode {
    CrossEntropy,
    /// Outlier exposure: cross-entropy plus `lambda` times the cross-entropy
    /// between the uniform distribution and the outliers' softmax.
    OutlierExposure { lambda: f64 },
    /// Cross-entropy on unit-normalised logits divided by `tau`.
    LogitNorm { tau: f64 },
}

impl LossMode {
    pub const DEFAULT_OE_LAMBDA: f64 = 0.5;
    pub const DEFAULT_LOGITNORM_TAU: f64 = 0.04;

    pub fn validate(&self) -> Result<()> {
        match *self {
            LossMode::CrossEntropy => Ok(()),
            LossMode::OutlierExposure { lambda } if lambda >= 0.0 && lambda.is_finite() => Ok(()),
            LossMode::OutlierExposure { lambda } => Err(Error::invalid(format!("OE lambda {lambda} must be >= 0"))),
            LossMode::LogitNorm { tau } if tau > 0.0 && tau.is_finite() => Ok(()),
            LossMode::LogitNorm { tau } => Err(Error::invalid(format!("LogitNorm tau {tau} must be > 0"))),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            LossMode::CrossEntropy => "ce",
            LossMode::OutlierExposure { .. } => "oe",
            LossMode::LogitNorm { .. } => "logitnorm",
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub gradients: Gradients,
}

/// Cross-entropy on `logits` for `label`; returns the loss and d loss / d logits.
fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let mut d = softmax(logits);
    d[label] -= 1.0;
    (lse - logits[label], d)
}

fn logit_norm_ce(logits: &[f64], label: usize, tau: f64) -> (f64, Vec<f64>) {
    let norm = dot(logits, logits).sqrt();
    let n = norm + LOGIT_NORM_EPS;
    let z: Vec<f64> = logits.iter().map(|l| l / (tau * n)).collect();
    let (value, g) = cross_entropy(&z, label);
    let gl = dot(&g, logits);
    let d = logits
        .iter()
        .zip(&g)
        .map(|(&l, &gi)| {
            let radial = if norm > 0.0 { l * gl / (tau * n * n * norm) } else { 0.0 };
            gi / (tau * n) - radial
        })
        .collect();
    (value, d)
}

/// Cross-entropy between the uniform distribution and softmax(logits).
fn uniform_ce(logits: &[f64]) -> (f64, Vec<f64>) {
    let k = logits.len() as f64;
    let mean = logits.iter().sum::<f64>() / k;
    let d = softmax(logits).into_iter().map(|p| p - 1.0 / k).collect();
    (log_sum_exp(logits) - mean, d)
}

/// Batch-mean loss and its exact parameter gradient.
pub fn loss(model: &MlpClassifier, batch: &LabeledSet, mode: LossMode, outliers: Option<&LabeledSet>) -> Result<LossOutput> {
    mode.validate()?;
    if batch.is_empty() {
        return Err(Error::invalid("loss needs a nonempty batch"));
    }
    ensure_dim(model.input_dim(), batch.dim())?;
    let mut grads = Gradients::zeros_like(model);
    let mut total = 0.0;
    for (x, &y) in batch.rows().zip(batch.labels()) {
        if y >= model.num_classes() {
            return Err(Error::invalid(format!("label {y} outside the model's {} classes", model.num_classes())));
        }
        let trace = model.trace(x);
        let (value, d) = match mode {
            LossMode::LogitNorm { tau } => logit_norm_ce(&trace.logits, y, tau),
            _ => cross_entropy(&trace.logits, y),
        };
        total += value;
        model.backward(&trace, &d, Some(&mut grads), false);
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    let mut value = total / n;

    if let LossMode::OutlierExposure { lambda } = mode {
        let out = outliers.ok_or_else(|| Error::invalid("outlier-exposure loss needs an outlier batch"))?;
        if out.is_empty() {
            return Err(Error::invalid("outlier batch is empty"));
        }
        ensure_dim(model.input_dim(), out.dim())?;
        let mut og = Gradients::zeros_like(model);
        let mut otot = 0.0;
        for x in out.rows() {
            let trace = model.trace(x);
            let (v, d) = uniform_ce(&trace.logits);
            otot += v;
            model.backward(&trace, &d, Some(&mut og), false);
        }
        let m = out.len() as f64;
        value += lambda * otot / m;
        grads.add_scaled(&og, lambda / m);
    }
    Ok(LossOutput { value, gradients: grads })
}

/// lr0 * (1 + cos(pi * step / total_steps)) / 2.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::invalid(format!("step {step} beyond schedule length {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(lr0);
    }
    let frac = step as f64 / total_steps as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub lr0: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub step: usize,
    pub total_steps: usize,
    velocity: Vec<Dense>,
}

impl OptimState {
    pub fn new(model: &MlpClassifier, lr0: f64, momentum: f64, weight_decay: f64, nesterov: bool, total_steps: usize) -> Self {
        OptimState {
            lr0,
            momentum,
            nesterov,
            weight_decay,
            step: 0,
            total_steps,
            velocity: Gradients::zeros_like(model).layers,
        }
    }

    pub fn current_lr(&self) -> Result<f64> {
        cosine_lr(self.step, self.total_steps, self.lr0)
    }
}

fn sgd_update(p: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, st: &OptimState) {
    let mu = st.momentum;
    for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        let g = g + st.weight_decay * *p;
        *v = mu * *v + g;
        if st.nesterov {
            *p -= lr * (g + mu * *v);
        } else {
            *p -= lr * *v;
        }
    }
}

/// One SGD step at the scheduled learning rate; weight decay applies to all
/// parameters, biases included. Returns the learning rate used.
pub fn sgd_step(model: &mut MlpClassifier, grads: &Gradients, state: &mut OptimState) -> Result<f64> {
    if grads.layers.len() != model.layers.len() {
        return Err(Error::DimensionMismatch { expected: model.layers.len(), got: grads.layers.len() });
    }
    let lr = state.current_lr()?;
    let mut velocity = std::mem::take(&mut state.velocity);
    for ((layer, g), v) in model.layers.iter_mut().zip(&grads.layers).zip(&mut velocity) {
        ensure_dim(layer.weights.len(), g.weights.len())?;
        ensure_dim(layer.bias.len(), g.bias.len())?;
        sgd_update(&mut layer.weights, &g.weights, &mut v.weights, lr, state);
        sgd_update(&mut layer.bias, &g.bias, &mut v.bias, lr, state);
    }
    state.velocity = velocity;
    state.step += 1;
    Ok(lr)
}

pub fn to_checkpoint_string(model: &MlpClassifier) -> String {
    let mut out = String::from("mlp v1\n");
    let dims: Vec<String> = model.layer_dims().iter().map(|d| d.to_string()).collect();
    out.push_str(&dims.join(" "));
    out.push('\n');
    for layer in &model.layers {
        for o in 0..layer.outputs {
            push_row(&mut out, layer.weight_row(o));
        }
        push_row(&mut out, &layer.bias);
    }
    out
}

pub(crate) fn push_row(out: &mut String, row: &[f64]) {
    for (i, v) in row.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}

pub(crate) fn parse_row(line: Option<(usize, &str)>, width: usize, origin: &Path) -> Result<Vec<f64>> {
    let (i, text) = line.ok_or_else(|| Error::parse(origin, 0, "unexpected end of file"))?;
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::parse(origin, i + 1, format!("bad number `{t}`"))))
        .collect::<Result<_>>()?;
    if vals.len() != width {
        return Err(Error::parse(origin, i + 1, format!("expected {width} values, found {}", vals.len())));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::parse(origin, i + 1, "non-finite value"));
    }
    Ok(vals)
}

pub fn parse_checkpoint(text: &str, origin: &Path) -> Result<MlpClassifier> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "mlp v1")) => {}
        _ => return Err(Error::parse(origin, 1, "expected `mlp v1` header")),
    }
    let (di, dims_line) = lines.next().ok_or_else(|| Error::parse(origin, 2, "missing layer dims"))?;
    let dims: Vec<usize> = dims_line
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::parse(origin, di + 1, format!("bad layer dim `{t}`"))))
        .collect::<Result<_>>()?;
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::parse(origin, di + 1, "need at least two positive layer dims"));
    }
    let mut layers = Vec::new();
    for w in dims.windows(2) {
        let mut layer = Dense::zeros(w[0], w[1]);
        for o in 0..w[1] {
            let row = parse_row(lines.next(), w[0], origin)?;
            layer.weights[o * w[0]..(o + 1) * w[0]].copy_from_slice(&row);
        }
        layer.bias = parse_row(lines.next(), w[1], origin)?;
        layers.push(layer);
    }
    MlpClassifier::from_layers(layers)
}

pub fn save_checkpoint(model: &MlpClassifier, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_checkpoint_string(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MlpClassifier> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_layer(weights: Vec<f64>, bias: Vec<f64>, inputs: usize) -> MlpClassifier {
        let outputs = bias.len();
        MlpClassifier::from_layers(vec![Dense { inputs, outputs, weights, bias }]).unwrap()
    }

    #[test]
    fn init_zero_bias_and_determinism() {
        let m = MlpClassifier::init(&[2, 3], 5).unwrap();
        assert_eq!(m.layers()[0].bias, vec![0.0; 3]);
        assert_eq!(m, MlpClassifier::init(&[2, 3], 5).unwrap());
        assert_ne!(m, MlpClassifier::init(&[2, 3], 6).unwrap());
        assert!(MlpClassifier::init(&[4], 0).is_err());
        assert!(MlpClassifier::init(&[], 0).is_err());
        assert!(MlpClassifier::init(&[3, 0, 2], 0).is_err());
    }

    #[test]
    fn init_variance_is_he_scaled() {
        let fan_in = 100;
        let m = MlpClassifier::init(&[fan_in, 100], 11).unwrap();
        let w = &m.layers()[0].weights;
        assert_eq!(w.len(), 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let target = 2.0 / fan_in as f64;
        assert!((var - target).abs() / target < 0.05, "variance {var} vs {target}");
    }

    #[test]
    fn forward_simple_models() {
        let zero = single_layer(vec![0.0; 6], vec![0.0; 3], 2);
        assert_eq!(zero.logits(&[1.0, -2.0]).unwrap(), vec![0.0; 3]);
        let ident = single_layer(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2);
        let f = ident.forward(&[0.3, -7.0]).unwrap();
        assert_eq!(f.logits, vec![0.3, -7.0]);
        assert_eq!(f.penultimate, vec![0.3, -7.0]);
        assert!(ident.forward(&[1.0]).is_err());
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn forward_matches_matrix_oracle() {
        let m = MlpClassifier::init(&[3, 4, 2], 9).unwrap();
        let x = [0.5, -1.25, 2.0];
        let l0 = &m.layers()[0];
        let l1 = &m.layers()[1];
        let mut h = [0.0; 4];
        for o in 0..4 {
            let mut s = l0.bias[o];
            for i in 0..3 {
                s += l0.weights[o * 3 + i] * x[i];
            }
            h[o] = if s > 0.0 { s } else { 0.0 };
        }
        let f = m.forward(&x).unwrap();
        for o in 0..2 {
            let mut s = l1.bias[o];
            for i in 0..4 {
                s += l1.weights[o * 4 + i] * h[i];
            }
            assert!((f.logits[o] - s).abs() < 1e-12);
        }
        assert_eq!(f.penultimate, h.to_vec());
    }

    #[test]
    fn softmax_properties() {
        let v = [1.0, -3.0, 200.0, 4.5];
        let p = softmax(&v);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let shifted: Vec<f64> = v.iter().map(|x| x + 17.0).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(argmax(&[2.0, 2.0, 1.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn cross_entropy_limits() {
        // Uniform softmax over K classes gives ln K.
        let m = single_layer(vec![0.0; 4 * 2], vec![0.0; 4], 2);
        let batch = LabeledSet::new(vec![1.0, 2.0], vec![3], 2, 4).unwrap();
        let out = loss(&m, &batch, LossMode::CrossEntropy, None).unwrap();
        assert!((out.value - 4f64.ln()).abs() < 1e-15);
        // Saturated one-hot output gives zero loss.
        let m = single_layer(vec![0.0; 4], vec![1000.0, 0.0], 2);
        let batch = LabeledSet::new(vec![1.0, 2.0], vec![0], 2, 2).unwrap();
        let out = loss(&m, &batch, LossMode::CrossEntropy, None).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn oe_with_zero_lambda_is_ce() {
        let m = MlpClassifier::init(&[2, 5, 3], 1).unwrap();
        let batch = LabeledSet::new(vec![0.1, 0.2, -1.0, 0.7], vec![2, 0], 2, 3).unwrap();
        let outl = LabeledSet::unlabeled(vec![5.0, 5.0], 2).unwrap();
        let ce = loss(&m, &batch, LossMode::CrossEntropy, None).unwrap();
        let oe = loss(&m, &batch, LossMode::OutlierExposure { lambda: 0.0 }, Some(&outl)).unwrap();
        assert_eq!(ce.value, oe.value);
        assert_eq!(ce.gradients, oe.gradients);
        assert!(loss(&m, &batch, LossMode::OutlierExposure { lambda: 0.5 }, None).is_err());
    }

    #[test]
    fn logit_norm_is_scale_invariant() {
        let batch = LabeledSet::new(vec![0.3, -0.4], vec![1], 2, 3).unwrap();
        let w = vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5];
        let base = single_layer(w.clone(), vec![0.1, 0.2, -0.3], 2);
        let mode = LossMode::LogitNorm { tau: 0.04 };
        let v = loss(&base, &batch, mode, None).unwrap().value;
        for c in [0.01, 0.5, 3.0, 250.0] {
            let scaled = single_layer(w.iter().map(|x| x * c).collect(), vec![0.1 * c, 0.2 * c, -0.3 * c], 2);
            let vc = loss(&scaled, &batch, mode, None).unwrap().value;
            assert!((v - vc).abs() < 1e-9, "c={c}: {v} vs {vc}");
        }
        // Zero logits stay finite thanks to the norm guard.
        let zero = single_layer(vec![0.0; 6], vec![0.0; 3], 2);
        let out = loss(&zero, &batch, mode, None).unwrap();
        assert!((out.value - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 0.1).unwrap(), 0.1);
        assert!(cosine_lr(100, 100, 0.1).unwrap().abs() < 1e-17);
        assert!((cosine_lr(50, 100, 0.1).unwrap() - 0.05).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 0.1).is_err());
        let mut prev = f64::INFINITY;
        for s in 0..=37 {
            let lr = cosine_lr(s, 37, 0.3).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    fn scalar_model(p: f64) -> MlpClassifier {
        single_layer(vec![p], vec![0.0], 1)
    }

    fn scalar_grad(g: f64) -> Gradients {
        Gradients { layers: vec![Dense { inputs: 1, outputs: 1, weights: vec![g], bias: vec![0.0] }] }
    }

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let mut m = MlpClassifier::init(&[3, 4, 2], 2).unwrap();
        let before = m.clone();
        let mut st = OptimState::new(&m, 0.1, 0.9, 0.0, true, 10);
        let g = Gradients::zeros_like(&m);
        sgd_step(&mut m, &g, &mut st).unwrap();
        assert_eq!(m, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn nesterov_first_step_closed_form() {
        let (p0, g, wd, lr, mu) = (1.5, 0.2, 0.01, 0.1, 0.9);
        let mut m = scalar_model(p0);
        let mut st = OptimState::new(&m, lr, mu, wd, true, 10);
        sgd_step(&mut m, &scalar_grad(g), &mut st).unwrap();
        let gp = g + wd * p0;
        let expected = p0 - lr * (1.0 + mu) * gp;
        assert!((m.layers()[0].weights[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn three_steps_match_unrolled_recurrence() {
        for nesterov in [true, false] {
            let (lr0, mu, wd, total) = (0.2, 0.9, 5e-4, 8);
            let grads = [0.7, -0.3, 1.1];
            let mut m = scalar_model(2.0);
            let mut st = OptimState::new(&m, lr0, mu, wd, nesterov, total);
            for g in grads {
                sgd_step(&mut m, &scalar_grad(g), &mut st).unwrap();
            }
            let (mut p, mut v) = (2.0f64, 0.0f64);
            for (t, g) in grads.iter().enumerate() {
                let lr = lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos());
                let gp = g + wd * p;
                v = mu * v + gp;
                p -= if nesterov { lr * (gp + mu * v) } else { lr * v };
            }
            assert!((m.layers()[0].weights[0] - p).abs() < 1e-14, "nesterov={nesterov}");
        }
    }

    #[test]
    fn input_gradient_stationary_cases() {
        let zero = MlpClassifier::from_layers(vec![Dense::zeros(3, 4)]).unwrap();
        assert_eq!(zero.input_gradient(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0; 3]);
        // Linear model with uniform softmax at x = 0 whose winning row is the
        // mean of all rows: the gradient mean_w - w_argmax vanishes.
        let sym = single_layer(vec![0.0, 0.0, 1.0, 2.0, -1.0, -2.0], vec![0.0; 3], 2);
        let g = sym.input_gradient(&[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15), "{g:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = MlpClassifier::init(&[4, 7, 3], 21).unwrap();
        let text = to_checkpoint_string(&m);
        assert!(text.starts_with("mlp v1\n4 7 3\n"));
        assert_eq!(parse_checkpoint(&text, Path::new("mem")).unwrap(), m);
        assert!(parse_checkpoint("mlp v2\n", Path::new("mem")).is_err());
        assert!(parse_checkpoint("mlp v1\n2 2\n1 2\n", Path::new("mem")).is_err());
    }
}
