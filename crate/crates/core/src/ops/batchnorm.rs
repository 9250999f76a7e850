use crate::error::{Error, Result};
use crate::ops::{Mode, ParamGroup, ParamTensor};
use crate::tensor::Tensor;

/// Per-channel batch normalization parameters and running statistics.
///
/// Statistics are taken over the batch and spatial axes. Dense activations
/// arrive as `(B, F, 1, 1)` and so normalize per feature.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub gamma: ParamTensor,
    pub beta: ParamTensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BnState {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPSILON: f64 = 1e-5;

    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: ParamTensor::new(Tensor::full(&[channels], 1.0)?, ParamGroup::Fc),
            beta: ParamTensor::new(Tensor::zeros(&[channels])?, ParamGroup::Fc),
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], 1.0)?,
            momentum: Self::DEFAULT_MOMENTUM,
            epsilon: Self::DEFAULT_EPSILON,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Clone, Debug)]
pub struct BnCache {
    mode: Mode,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    shape: [usize; 4],
}

pub fn batchnorm_forward(x: &Tensor, state: &mut BnState, mode: Mode) -> Result<(Tensor, BnCache)> {
    let (b, c, h, w) = x.dims4()?;
    if c != state.channels() {
        return Err(Error::shape(format!(
            "batchnorm has {} channels, input has {c}",
            state.channels()
        )));
    }
    let plane = h * w;
    let count = (b * plane) as f64;
    let src = x.data();
    let at = |bi: usize, ch: usize| &src[(bi * c + ch) * plane..(bi * c + ch + 1) * plane];

    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Train => (0..c)
            .map(|ch| {
                let mean = (0..b).map(|bi| at(bi, ch).iter().sum::<f64>()).sum::<f64>() / count;
                let var = (0..b)
                    .map(|bi| at(bi, ch).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
                    .sum::<f64>()
                    / count;
                (mean, var)
            })
            .unzip(),
        Mode::Eval => (state.running_mean.data().to_vec(), state.running_var.data().to_vec()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.epsilon).sqrt()).collect();

    let gamma = state.gamma.value.data();
    let beta = state.beta.value.data();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            for p in 0..plane {
                let xh = (src[off + p] - mean[ch]) * inv_std[ch];
                xhat[off + p] = xh;
                y[off + p] = gamma[ch] * xh + beta[ch];
            }
        }
    }

    if mode == Mode::Train {
        let m = state.momentum;
        // unbiased estimate for the running variance when more than one value
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for ch in 0..c {
            let rm = &mut state.running_mean.data_mut()[ch];
            *rm = (1.0 - m) * *rm + m * mean[ch];
            let rv = &mut state.running_var.data_mut()[ch];
            *rv = (1.0 - m) * *rv + m * var[ch] * unbias;
        }
    }

    Ok((
        Tensor::from_vec(x.shape(), y)?,
        BnCache {
            mode,
            xhat,
            inv_std,
            shape: [b, c, h, w],
        },
    ))
}

pub fn batchnorm_backward(grad_y: &Tensor, cache: &BnCache, state: &mut BnState) -> Result<Tensor> {
    if grad_y.shape() != cache.shape {
        return Err(Error::shape(format!(
            "batchnorm backward: grad shape {:?}, expected {:?}",
            grad_y.shape(),
            cache.shape
        )));
    }
    let [b, c, h, w] = cache.shape;
    let plane = h * w;
    let count = (b * plane) as f64;
    let gy = grad_y.data();
    let gamma = state.gamma.value.data().to_vec();
    let mut dx = vec![0.0; gy.len()];

    for (ch, &g) in gamma.iter().enumerate() {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for bi in 0..b {
            let off = (bi * c + ch) * plane;
            for p in 0..plane {
                sum_g += gy[off + p];
                sum_gx += gy[off + p] * cache.xhat[off + p];
            }
        }
        state.gamma.grad.data_mut()[ch] += sum_gx;
        state.beta.grad.data_mut()[ch] += sum_g;

        let scale = g * cache.inv_std[ch];
        for bi in 0..b {
            let off = (bi * c + ch) * plane;
            for p in 0..plane {
                dx[off + p] = match cache.mode {
                    Mode::Train => {
                        scale * (gy[off + p] - sum_g / count - cache.xhat[off + p] * sum_gx / count)
                    }
                    Mode::Eval => scale * gy[off + p],
                };
            }
        }
    }
    Tensor::from_vec(&cache.shape, dx)
}
