//! Sequential network assembly: feature extractor, optional channel max
//! pooling, classifier head.

mod io;
mod spec;

pub use io::{load_model, save_model};
pub use spec::{Head, HeadOrder, HeadPreset, LayerShape, LayerSpec, ModelSpec, Variant};

use crate::cmp::{cmp_backward, cmp_forward, CmpCache, CmpConfig};
use crate::error::{Error, Result};
use crate::ops::{self, BnState, Mode, ParamGroup, ParamTensor};
use crate::tensor::{Rng, Tensor};

/// Trainable state of one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    None,
    Conv { weight: ParamTensor, bias: ParamTensor },
    Dense { weight: ParamTensor, bias: ParamTensor },
    BatchNorm(BnState),
}

/// Parameters, normalisation statistics and the dropout stream of a built
/// network.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub layers: Vec<LayerParams>,
    pub rng: Rng,
}

impl ModelState {
    /// Trainable tensors in layer order, with stable names such as
    /// `03.conv.weight`.
    pub fn named_params(&self) -> Vec<(String, &ParamTensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerParams::None => {}
                LayerParams::Conv { weight, bias } => {
                    out.push((format!("{i:02}.conv.weight"), weight));
                    out.push((format!("{i:02}.conv.bias"), bias));
                }
                LayerParams::Dense { weight, bias } => {
                    out.push((format!("{i:02}.dense.weight"), weight));
                    out.push((format!("{i:02}.dense.bias"), bias));
                }
                LayerParams::BatchNorm(bn) => {
                    out.push((format!("{i:02}.bn.gamma"), &bn.gamma));
                    out.push((format!("{i:02}.bn.beta"), &bn.beta));
                }
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut ParamTensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                LayerParams::None => {}
                LayerParams::Conv { weight, bias } => {
                    out.push((format!("{i:02}.conv.weight"), weight));
                    out.push((format!("{i:02}.conv.bias"), bias));
                }
                LayerParams::Dense { weight, bias } => {
                    out.push((format!("{i:02}.dense.weight"), weight));
                    out.push((format!("{i:02}.dense.bias"), bias));
                }
                LayerParams::BatchNorm(bn) => {
                    out.push((format!("{i:02}.bn.gamma"), &mut bn.gamma));
                    out.push((format!("{i:02}.bn.beta"), &mut bn.beta));
                }
            }
        }
        out
    }

    /// Every persisted tensor: parameters followed, per BN layer, by its
    /// running statistics.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerParams::None => {}
                LayerParams::Conv { weight, bias } => {
                    out.push((format!("{i:02}.conv.weight"), &weight.value));
                    out.push((format!("{i:02}.conv.bias"), &bias.value));
                }
                LayerParams::Dense { weight, bias } => {
                    out.push((format!("{i:02}.dense.weight"), &weight.value));
                    out.push((format!("{i:02}.dense.bias"), &bias.value));
                }
                LayerParams::BatchNorm(bn) => {
                    out.push((format!("{i:02}.bn.gamma"), &bn.gamma.value));
                    out.push((format!("{i:02}.bn.beta"), &bn.beta.value));
                    out.push((format!("{i:02}.bn.running_mean"), &bn.running_mean));
                    out.push((format!("{i:02}.bn.running_var"), &bn.running_var));
                }
            }
        }
        out
    }

    pub(crate) fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                LayerParams::None => {}
                LayerParams::Conv { weight, bias } => {
                    out.push((format!("{i:02}.conv.weight"), &mut weight.value));
                    out.push((format!("{i:02}.conv.bias"), &mut bias.value));
                }
                LayerParams::Dense { weight, bias } => {
                    out.push((format!("{i:02}.dense.weight"), &mut weight.value));
                    out.push((format!("{i:02}.dense.bias"), &mut bias.value));
                }
                LayerParams::BatchNorm(bn) => {
                    out.push((format!("{i:02}.bn.gamma"), &mut bn.gamma.value));
                    out.push((format!("{i:02}.bn.beta"), &mut bn.beta.value));
                    out.push((format!("{i:02}.bn.running_mean"), &mut bn.running_mean));
                    out.push((format!("{i:02}.bn.running_var"), &mut bn.running_var));
                }
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }
}

/// Per-layer forward cache.
#[derive(Debug)]
enum LayerCache {
    Conv(ops::ConvCache),
    MaxPool(ops::MaxPoolCache),
    Gap(ops::GapCache),
    Cmp(CmpCache),
    Dense(ops::DenseCache),
    BatchNorm(ops::BnCache),
    Elu(ops::EluCache),
    Dropout(ops::DropoutCache),
}

/// Everything backward needs from one forward pass.
#[derive(Debug)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    batch: usize,
}

/// A validated spec with its built state.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    shapes: Vec<LayerShape>,
    pub state: ModelState,
}

/// Builds and initialises a network. Deterministic in `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    Model::build(spec, &mut Rng::new(seed))
}

impl Model {
    pub fn build(spec: &ModelSpec, rng: &mut Rng) -> Result<Self> {
        let shapes = spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (index, (layer, shape)) in spec.layers.iter().zip(&shapes).enumerate() {
            let [c, h, w] = shape.input;
            let params = match *layer {
                LayerSpec::Conv {
                    out_channels, kernel, ..
                } => {
                    let fan_in = c * kernel * kernel;
                    LayerParams::Conv {
                        weight: ParamTensor::init_uniform(
                            rng,
                            &[out_channels, c, kernel, kernel],
                            fan_in,
                            ParamGroup::Conv,
                        )?,
                        bias: ParamTensor::new(Tensor::zeros(&[out_channels])?, ParamGroup::Conv),
                    }
                }
                LayerSpec::Dense { units } => {
                    let fan_in = c * h * w;
                    LayerParams::Dense {
                        weight: ParamTensor::init_uniform(rng, &[units, fan_in], fan_in, ParamGroup::Fc)?,
                        bias: ParamTensor::new(Tensor::zeros(&[units])?, ParamGroup::Fc),
                    }
                }
                LayerSpec::BatchNorm => {
                    let mut bn = BnState::new(c)?;
                    if follows_conv(spec, index) {
                        bn.gamma.group = ParamGroup::Conv;
                        bn.beta.group = ParamGroup::Conv;
                    }
                    LayerParams::BatchNorm(bn)
                }
                _ => LayerParams::None,
            };
            layers.push(params);
        }
        Ok(Self {
            spec: spec.clone(),
            shapes,
            state: ModelState {
                layers,
                rng: rng.fork(),
            },
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layer_shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    fn cmp_config(&self, index: usize) -> CmpConfig {
        self.shapes[index].cmp.expect("validated cmp layer")
    }

    /// Runs the network on `x (B, C, H, W)` and returns logits `(B, P)`.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, ForwardCache)> {
        let (batch, c, h, w) = x.dims4()?;
        if [c, h, w] != self.spec.input {
            return Err(Error::shape(format!(
                "model expects inputs of shape [B, {}, {}, {}], got {:?}",
                self.spec.input[0],
                self.spec.input[1],
                self.spec.input[2],
                x.shape()
            )));
        }
        let mut caches = Vec::with_capacity(self.spec.layers.len());
        let mut cur = x.clone();
        for i in 0..self.spec.layers.len() {
            let cmp = self.shapes[i].cmp;
            let layer = &self.spec.layers[i];
            let attribute = |e: Error| Error::Layer {
                index: i,
                kind: layer.kind(),
                source: Box::new(e),
            };
            let params = &mut self.state.layers[i];
            let (next, cache) = match (layer, params) {
                (LayerSpec::Conv { stride, pad, .. }, LayerParams::Conv { weight, bias }) => {
                    let (y, c) = ops::conv2d_forward(&cur, weight, bias, *stride, *pad).map_err(attribute)?;
                    (y, LayerCache::Conv(c))
                }
                (LayerSpec::MaxPool, _) => {
                    let (y, c) = ops::maxpool2d_forward(&cur).map_err(attribute)?;
                    (y, LayerCache::MaxPool(c))
                }
                (LayerSpec::Gap, _) => {
                    let (y, c) = ops::global_avg_pool_forward(&cur).map_err(attribute)?;
                    (y, LayerCache::Gap(c))
                }
                (LayerSpec::Cmp { .. }, _) => {
                    let (y, c) = cmp_forward(&cur, &cmp.expect("validated cmp layer")).map_err(attribute)?;
                    (y, LayerCache::Cmp(c))
                }
                (LayerSpec::Dense { .. }, LayerParams::Dense { weight, bias }) => {
                    let (y, c) = ops::dense_forward(&cur, weight, bias).map_err(attribute)?;
                    (y, LayerCache::Dense(c))
                }
                (LayerSpec::BatchNorm, LayerParams::BatchNorm(bn)) => {
                    let (y, c) = ops::batchnorm_forward(&cur, bn, mode).map_err(attribute)?;
                    (y, LayerCache::BatchNorm(c))
                }
                (LayerSpec::Elu, _) => {
                    let (y, c) = ops::elu_forward(&cur);
                    (y, LayerCache::Elu(c))
                }
                (LayerSpec::Dropout { p }, _) => {
                    let (y, c) = ops::dropout_forward(&cur, *p, mode, &mut self.state.rng).map_err(attribute)?;
                    (y, LayerCache::Dropout(c))
                }
                _ => {
                    return Err(attribute(Error::shape("layer parameters do not match the spec")));
                }
            };
            caches.push(cache);
            cur = next;
        }
        let logits = cur.reshape(&[batch, self.spec.num_classes])?;
        Ok((logits, ForwardCache { layers: caches, batch }))
    }

    /// Back-propagates `grad_logits (B, P)`, overwriting every parameter
    /// gradient. Returns the gradient with respect to the input.
    pub fn backward(&mut self, cache: &ForwardCache, grad_logits: &Tensor) -> Result<Tensor> {
        if grad_logits.shape() != [cache.batch, self.spec.num_classes] {
            return Err(Error::shape(format!(
                "logit gradient shape {:?}, expected [{}, {}]",
                grad_logits.shape(),
                cache.batch,
                self.spec.num_classes
            )));
        }
        self.state.zero_grad();
        let mut grad = grad_logits.clone().reshape(&[cache.batch, self.spec.num_classes, 1, 1])?;
        for i in (0..self.spec.layers.len()).rev() {
            let layer = &self.spec.layers[i];
            let attribute = |e: Error| Error::Layer {
                index: i,
                kind: layer.kind(),
                source: Box::new(e),
            };
            let cmp = self.shapes[i].cmp;
            grad = match (&cache.layers[i], &mut self.state.layers[i]) {
                (LayerCache::Conv(c), LayerParams::Conv { weight, bias }) => {
                    ops::conv2d_backward(&grad, c, weight, bias)
                }
                (LayerCache::MaxPool(c), _) => ops::maxpool2d_backward(&grad, c),
                (LayerCache::Gap(c), _) => ops::global_avg_pool_backward(&grad, c),
                (LayerCache::Cmp(c), _) => cmp_backward(&grad, c, &cmp.expect("validated cmp layer")),
                (LayerCache::Dense(c), LayerParams::Dense { weight, bias }) => {
                    ops::dense_backward(&grad, c, weight, bias)
                }
                (LayerCache::BatchNorm(c), LayerParams::BatchNorm(bn)) => ops::batchnorm_backward(&grad, c, bn),
                (LayerCache::Elu(c), _) => ops::elu_backward(&grad, c),
                (LayerCache::Dropout(c), _) => ops::dropout_backward(&grad, c),
                _ => Err(Error::shape("cache does not match layer")),
            }
            .map_err(attribute)?;
        }
        Ok(grad)
    }

    /// Eval-mode class predictions.
    pub fn predict(&mut self, x: &Tensor) -> Result<Vec<usize>> {
        let (logits, _) = self.forward(x, Mode::Eval)?;
        Ok(argmax_rows(&logits))
    }

    /// The CMP layer's configuration, when the model has one.
    pub fn cmp(&self) -> Option<CmpConfig> {
        self.spec
            .layers
            .iter()
            .position(|l| matches!(l, LayerSpec::Cmp { .. }))
            .map(|i| self.cmp_config(i))
    }
}

/// BN layers inside the feature extractor share the conv learning rate.
fn follows_conv(spec: &ModelSpec, index: usize) -> bool {
    spec.layers[..index]
        .iter()
        .rev()
        .find(|l| matches!(l, LayerSpec::Conv { .. } | LayerSpec::Dense { .. }))
        .is_some_and(|l| matches!(l, LayerSpec::Conv { .. }))
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let p = logits.shape()[logits.rank() - 1];
    logits
        .data()
        .chunks_exact(p)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// One row of a parameter report.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCount {
    pub index: usize,
    pub kind: &'static str,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub per_layer: Vec<LayerCount>,
    pub total: usize,
    /// Flattened input width of the first dense layer.
    pub fc1_in_features: usize,
    /// Weights plus bias of the first dense layer.
    pub fc1_params: usize,
    pub fc1_weights: usize,
}

/// Exact parameter counts from shapes alone; nothing is allocated.
pub fn count_parameters(spec: &ModelSpec) -> Result<ParamReport> {
    let shapes = spec.validate()?;
    let mut per_layer = Vec::with_capacity(spec.layers.len());
    let mut fc1 = None;
    for (i, (layer, shape)) in spec.layers.iter().zip(&shapes).enumerate() {
        let [c, h, w] = shape.input;
        let params = match *layer {
            LayerSpec::Conv {
                out_channels, kernel, ..
            } => out_channels * c * kernel * kernel + out_channels,
            LayerSpec::Dense { units } => {
                let fan_in = c * h * w;
                if fc1.is_none() {
                    fc1 = Some((fan_in, units));
                }
                units * fan_in + units
            }
            LayerSpec::BatchNorm => 2 * c,
            _ => 0,
        };
        per_layer.push(LayerCount {
            index: i,
            kind: layer.kind(),
            params,
        });
    }
    let (fc1_in_features, units) = fc1.expect("validated spec ends in a dense layer");
    Ok(ParamReport {
        total: per_layer.iter().map(|l| l.params).sum(),
        per_layer,
        fc1_in_features,
        fc1_params: fc1_in_features * units + units,
        fc1_weights: fc1_in_features * units,
    })
}
