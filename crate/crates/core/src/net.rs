//! Feedforward stacks of uGMM or dense layers.
//!
//! In a uGMM network every layer consumes the log-density activations of
//! the previous one; the first layer sees the raw (standardised) features.
//! The FFNN baseline is affine + ReLU on hidden layers and affine only at
//! the output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Matrix, Rng};
use crate::ugmm::{self, ComponentMask, DropoutSpec, UgmmLayerParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ugmm,
    Ffnn,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Ugmm => "uGMM-NN",
            ModelKind::Ffnn => "FFNN",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Softmax over the output layer, cross-entropy loss.
    Discriminative,
    /// Output `c` is read as `ln P(y = c, x)`; the true-class output is maximised.
    Generative,
}

/// Dropout on hidden layer `layer`, indexed into `layer_widths`.
///
/// For uGMM networks this masks the mixture components of the neurons that
/// make up that layer; for the FFNN it drops the layer's units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutPlacement {
    pub layer: usize,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub kind: ModelKind,
    pub layer_widths: Vec<usize>,
    #[serde(default)]
    pub dropout: Vec<DropoutPlacement>,
    pub mode: Mode,
    pub seed: u64,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        let widths = &self.layer_widths;
        if widths.len() < 2 {
            return Err(Error::config("layer_widths", "needs an input and an output width"));
        }
        if let Some(i) = widths.iter().position(|&w| w == 0) {
            return Err(Error::config("layer_widths", format!("width {i} is zero")));
        }
        if self.mode == Mode::Generative && self.kind != ModelKind::Ugmm {
            // An unbounded logit has no likelihood to maximise.
            return Err(Error::config("mode", "generative training needs the ugmm model"));
        }
        if self.n_classes() < 2 {
            return Err(Error::config("layer_widths", "output width (class count) must be at least 2"));
        }
        let mut seen = Vec::new();
        for d in &self.dropout {
            if d.layer == 0 || d.layer >= widths.len() - 1 {
                return Err(Error::config(
                    "dropout.layer",
                    format!("{} is not a hidden layer of {:?}", d.layer, widths),
                ));
            }
            if seen.contains(&d.layer) {
                return Err(Error::config("dropout.layer", format!("{} listed twice", d.layer)));
            }
            seen.push(d.layer);
            DropoutSpec::new(d.p, true)?;
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_widths.last().unwrap_or(&0)
    }

    /// Dropout probability applied to the output of parameter layer `i`.
    pub(crate) fn dropout_for_layer(&self, i: usize) -> Option<f64> {
        self.dropout.iter().find(|d| d.layer == i + 1).map(|d| d.p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayerParams {
    /// `out × in`.
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl DenseLayerParams {
    pub fn new(w: Matrix, b: Vec<f64>) -> Result<Self> {
        if b.len() != w.rows() {
            return Err(Error::Shape(format!("bias length {} vs {} rows", b.len(), w.rows())));
        }
        Ok(Self { w, b })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init(n_in: usize, n_out: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (n_in + n_out) as f64).sqrt();
        let w = (0..n_in * n_out).map(|_| rng.uniform_range(-limit, limit)).collect();
        Self { w: Matrix::from_vec(n_out, n_in, w).expect("length matches"), b: vec![0.0; n_out] }
    }

    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self { w: Matrix::zeros(n_out, n_in), b: vec![0.0; n_out] }
    }

    /// `X Wᵀ + b`.
    pub fn affine(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.w.cols() {
            return Err(Error::Shape(format!(
                "dense layer expects {} inputs, got {}",
                self.w.cols(),
                x.cols()
            )));
        }
        let mut z = Matrix::zeros(x.rows(), self.w.rows());
        for (b, xb) in x.iter_rows().enumerate() {
            for (j, zj) in z.row_mut(b).iter_mut().enumerate() {
                *zj = self.b[j] + dot(self.w.row(j), xb);
            }
        }
        Ok(z)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Ugmm(UgmmLayerParams),
    Dense(DenseLayerParams),
}

impl Layer {
    pub fn n_in(&self) -> usize {
        match self {
            Layer::Ugmm(p) => p.n_in(),
            Layer::Dense(p) => p.w.cols(),
        }
    }

    pub fn n_out(&self) -> usize {
        match self {
            Layer::Ugmm(p) => p.n_out(),
            Layer::Dense(p) => p.w.rows(),
        }
    }

    fn zeros_like(&self) -> Layer {
        match self {
            Layer::Ugmm(p) => Layer::Ugmm(UgmmLayerParams::zeros(p.n_in(), p.n_out())),
            Layer::Dense(p) => Layer::Dense(DenseLayerParams::zeros(p.w.cols(), p.w.rows())),
        }
    }

    fn tensors(&self) -> Vec<&[f64]> {
        match self {
            Layer::Ugmm(p) => vec![p.mu.as_slice(), p.log_sigma.as_slice(), p.pi_logit.as_slice()],
            Layer::Dense(p) => vec![p.w.as_slice(), &p.b],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Layer::Ugmm(p) => vec![
                p.mu.as_mut_slice(),
                p.log_sigma.as_mut_slice(),
                p.pi_logit.as_mut_slice(),
            ],
            Layer::Dense(p) => vec![p.w.as_mut_slice(), &mut p.b],
        }
    }
}

/// Every layer's parameters, in forward order. Also used as the container
/// for gradients and optimizer moments, which share its shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    layers: Vec<Layer>,
    /// Component-dropout rate of each uGMM layer (0 when undropped), used to
    /// rescale the mixtures at inference.
    dropout_rates: Vec<f64>,
}

impl NetworkParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network has no layers".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].n_out() != pair[1].n_in() {
                return Err(Error::Shape(format!(
                    "layer {i} emits {} values but layer {} expects {}",
                    pair[0].n_out(),
                    i + 1,
                    pair[1].n_in()
                )));
            }
        }
        let dropout_rates = vec![0.0; layers.len()];
        Ok(Self { layers, dropout_rates })
    }

    /// Records the spec's component-dropout rates. Training with rate `p`
    /// removes each component with probability `p` without renormalising,
    /// so the mixture a neuron sees in training has on average `1 - p` of
    /// its mass. Inference, which keeps every component, scales the mixture
    /// weights by the same `1 - p` (the weight-scaling rule of classic
    /// dropout) so downstream layers see activations on the scale they were
    /// trained on.
    pub fn with_component_dropout(mut self, spec: &NetworkSpec) -> Self {
        for (i, layer) in self.layers.iter().enumerate() {
            self.dropout_rates[i] = match layer {
                Layer::Ugmm(_) => spec.dropout_for_layer(i).unwrap_or(0.0),
                Layer::Dense(_) => 0.0,
            };
        }
        self
    }

    pub fn dropout_rates(&self) -> &[f64] {
        &self.dropout_rates
    }

    /// Draws parameters layer by layer, in row-major order within a tensor.
    pub fn init(spec: &NetworkSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| match spec.kind {
                ModelKind::Ugmm => Layer::Ugmm(UgmmLayerParams::init(w[0], w[1], rng)),
                ModelKind::Ffnn => Layer::Dense(DenseLayerParams::init(w[0], w[1], rng)),
            })
            .collect();
        Ok(Self::new(layers)?.with_component_dropout(spec))
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Layer::zeros_like).collect(),
            dropout_rates: self.dropout_rates.clone(),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, Layer::n_out)
    }

    /// Widths `[input, hidden..., output]`.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_width()).chain(self.layers.iter().map(Layer::n_out)).collect()
    }

    /// Whether these parameters have the layout `spec` describes.
    pub fn matches(&self, spec: &NetworkSpec) -> bool {
        self.widths() == spec.layer_widths
            && self.layers.iter().all(|l| match (l, spec.kind) {
                (Layer::Ugmm(_), ModelKind::Ugmm) | (Layer::Dense(_), ModelKind::Ffnn) => true,
                _ => false,
            })
    }

    /// Flat views of every tensor in declaration order: per layer
    /// `mu, log_sigma, pi_logit` (uGMM) or `w, b` (dense).
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(Layer::tensors).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(Layer::tensors_mut).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn clamp_log_sigma(&mut self) {
        for layer in &mut self.layers {
            if let Layer::Ugmm(p) = layer {
                p.clamp_log_sigma();
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Dropout masks for one training pass over `batch` rows. Layers are
    /// visited in order; unmasked layers draw nothing from `rng`.
    pub fn sample_masks(&self, spec: &NetworkSpec, batch: usize, rng: &mut Rng) -> Result<Vec<Option<LayerMask>>> {
        let mut masks = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let Some(p) = spec.dropout_for_layer(i) else {
                masks.push(None);
                continue;
            };
            let drop = DropoutSpec::new(p, true)?;
            masks.push(Some(match layer {
                Layer::Ugmm(l) => LayerMask::Components(ugmm::sample_mask(drop, l.n_out(), l.n_in(), rng)),
                Layer::Dense(l) => {
                    let scale = 1.0 / (1.0 - p);
                    let keep = (0..batch * l.w.rows())
                        .map(|_| if rng.uniform() < 1.0 - p { scale } else { 0.0 })
                        .collect();
                    LayerMask::Units(Matrix::from_vec(batch, l.w.rows(), keep)?)
                }
            }));
        }
        Ok(masks)
    }

    /// Whole-network pass. Masks are sampled only when `training` is set.
    pub fn forward(&self, spec: &NetworkSpec, x: &Matrix, training: bool, rng: &mut Rng) -> Result<ForwardCache> {
        let masks = if training {
            self.sample_masks(spec, x.rows(), rng)?
        } else {
            vec![None; self.layers.len()]
        };
        self.forward_with_masks(x, masks)
    }

    /// Inference pass: no masks, no randomness. uGMM layers trained with
    /// component dropout are rescaled as described in
    /// [`with_component_dropout`](Self::with_component_dropout).
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_with_masks(x, vec![None; self.layers.len()])?.outputs)
    }

    /// Forward pass with explicit masks. A uGMM layer given no mask applies
    /// its inference rescaling, if any.
    pub fn forward_with_masks(&self, x: &Matrix, masks: Vec<Option<LayerMask>>) -> Result<ForwardCache> {
        if masks.len() != self.layers.len() {
            return Err(Error::Shape(format!("{} masks for {} layers", masks.len(), self.layers.len())));
        }
        if x.cols() != self.input_width() {
            return Err(Error::Shape(format!(
                "network expects {} input features, got {}",
                self.input_width(),
                x.cols()
            )));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for (i, (layer, mask)) in self.layers.iter().zip(&masks).enumerate() {
            let out = match (layer, mask) {
                (Layer::Ugmm(p), None) => {
                    pre.push(None);
                    let mut a = ugmm::forward(p, &current, None)?;
                    let rate = self.dropout_rates[i];
                    if rate > 0.0 {
                        let shift = (1.0 - rate).ln();
                        a.as_mut_slice().iter_mut().for_each(|v| *v += shift);
                    }
                    a
                }
                (Layer::Ugmm(p), Some(LayerMask::Components(m))) => {
                    pre.push(None);
                    ugmm::forward(p, &current, Some(m))?
                }
                (Layer::Dense(p), mask) => {
                    let z = p.affine(&current)?;
                    let out = if i == last {
                        z.clone()
                    } else {
                        let mut h = z.relu();
                        if let Some(m) = mask {
                            let LayerMask::Units(scale) = m else {
                                return Err(Error::Shape(format!("layer {i}: component mask on a dense layer")));
                            };
                            if scale.shape() != h.shape() {
                                return Err(Error::Shape(format!("layer {i}: unit mask shape {:?}", scale.shape())));
                            }
                            for (v, s) in h.as_mut_slice().iter_mut().zip(scale.as_slice()) {
                                *v *= s;
                            }
                        }
                        h
                    };
                    pre.push(Some(z));
                    out
                }
                (Layer::Ugmm(_), Some(LayerMask::Units(_))) => {
                    return Err(Error::Shape(format!("layer {i}: unit mask on a uGMM layer")));
                }
            };
            inputs.push(std::mem::replace(&mut current, out));
        }
        Ok(ForwardCache { inputs, pre, outputs: current, masks })
    }

    /// Gradients of `Σ dOut ⊙ outputs` with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Matrix) -> Result<NetworkParams> {
        Ok(self.backward_with_input(cache, d_out)?.0)
    }

    /// As [`backward`](Self::backward), also returning the gradient with
    /// respect to the network input.
    pub fn backward_with_input(&self, cache: &ForwardCache, d_out: &Matrix) -> Result<(NetworkParams, Matrix)> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::Shape("forward cache belongs to a different network".into()));
        }
        if d_out.shape() != cache.outputs.shape() {
            return Err(Error::Shape(format!(
                "output gradient {:?} vs outputs {:?}",
                d_out.shape(),
                cache.outputs.shape()
            )));
        }
        let last = self.layers.len() - 1;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = d_out.clone();
        for i in (0..self.layers.len()).rev() {
            let x = &cache.inputs[i];
            let out = if i == last { &cache.outputs } else { &cache.inputs[i + 1] };
            match (&self.layers[i], &cache.masks[i]) {
                (Layer::Ugmm(p), mask) => {
                    let m = match mask {
                        Some(LayerMask::Components(m)) => Some(m),
                        Some(LayerMask::Units(_)) => return Err(Error::Shape("unit mask on a uGMM layer".into())),
                        None => None,
                    };
                    let g = ugmm::backward(p, x, out, &upstream, m)?;
                    grads.push(Layer::Ugmm(g.params));
                    upstream = g.d_x;
                }
                (Layer::Dense(p), mask) => {
                    let z = cache.pre[i]
                        .as_ref()
                        .ok_or_else(|| Error::Shape("dense layer without cached pre-activation".into()))?;
                    let mut dz = upstream;
                    if i != last {
                        let scale = match mask {
                            Some(LayerMask::Units(s)) => Some(s.as_slice()),
                            _ => None,
                        };
                        for (idx, (d, &zv)) in dz.as_mut_slice().iter_mut().zip(z.as_slice()).enumerate() {
                            let s = scale.map_or(1.0, |s| s[idx]);
                            *d = if zv > 0.0 { *d * s } else { 0.0 };
                        }
                    }
                    let mut g = DenseLayerParams::zeros(p.w.cols(), p.w.rows());
                    let mut dx = Matrix::zeros(x.rows(), x.cols());
                    for b in 0..x.rows() {
                        let xb = x.row(b);
                        let dxb = dx.row_mut(b);
                        for (j, &d) in dz.row(b).iter().enumerate() {
                            if d == 0.0 {
                                continue;
                            }
                            g.b[j] += d;
                            for ((gw, &xv), (dxv, &w)) in g
                                .w
                                .row_mut(j)
                                .iter_mut()
                                .zip(xb)
                                .zip(dxb.iter_mut().zip(p.w.row(j)))
                            {
                                *gw += d * xv;
                                *dxv += d * w;
                            }
                        }
                    }
                    grads.push(Layer::Dense(g));
                    upstream = dx;
                }
            }
        }
        grads.reverse();
        let dropout_rates = self.dropout_rates.clone();
        Ok((NetworkParams { layers: grads, dropout_rates }, upstream))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerMask {
    /// Mixture-component mask of a uGMM layer.
    Components(ComponentMask),
    /// Per-sample, per-unit scale of a dense hidden layer: `0` or `1/(1-p)`.
    Units(Matrix),
}

/// Everything the reverse pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[i]` is what layer `i` consumed; `inputs[0]` is the batch.
    pub inputs: Vec<Matrix>,
    /// Dense pre-activations, `None` for uGMM layers.
    pub pre: Vec<Option<Matrix>>,
    pub outputs: Matrix,
    pub masks: Vec<Option<LayerMask>>,
}

/// Row-wise argmax of the outputs; ties go to the lowest class index.
///
/// Both modes reduce to the same rule: softmax is monotone, and in generative
/// mode `P(y=c | x)` and `P(y=c, x)` share their argmax.
pub fn predict(outputs: &Matrix, _mode: Mode) -> Vec<usize> {
    outputs
        .iter_rows()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
