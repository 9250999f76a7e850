//! Central finite-difference checks for every differentiable operator.
//!
//! Each suite draws small random inputs, forms the scalar probe
//! `L = sum(w * op(x))` with random weights `w`, runs the operator's
//! backward with upstream gradient `w`, and compares every input and
//! parameter gradient against `(L(v + h) - L(v - h)) / 2h`.

use std::fmt;

use crate::cmp::{cmp_backward, cmp_forward, make_cmp_config, CmpConfig};
use crate::error::Result;
use crate::ops::{self, BnState, Mode, ParamGroup, ParamTensor};
use crate::tensor::{Rng, Tensor};

pub const STEP: f64 = 1e-5;

/// Denominator floor so exact zeros compare by absolute error.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central differences of `f` with respect to every entry of `values`.
pub fn numeric_gradient(values: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = values.to_vec();
    (0..values.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Random tensor whose entries are pairwise at least `0.009` apart, so a
/// finite-difference step never reorders them.
pub fn tie_free(rng: &mut Rng, shape: &[usize]) -> Result<Tensor> {
    let len: usize = shape.iter().product();
    let mut levels: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut levels);
    let data = levels
        .into_iter()
        .map(|l| (l as f64 - len as f64 / 2.0) * 0.01 + rng.uniform(0.0, 1e-3))
        .collect();
    Tensor::from_vec(shape, data)
}

fn with_data(t: &Tensor, data: &[f64]) -> Tensor {
    Tensor::from_vec(t.shape(), data.to_vec()).expect("same shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradOp {
    Cmp,
    Conv2d,
    Dense,
    BatchNorm,
    Elu,
    SoftmaxCrossEntropy,
    MaxPool,
    GlobalAvgPool,
}

impl GradOp {
    pub const ALL: [GradOp; 8] = [
        GradOp::Cmp,
        GradOp::Conv2d,
        GradOp::Dense,
        GradOp::BatchNorm,
        GradOp::Elu,
        GradOp::SoftmaxCrossEntropy,
        GradOp::MaxPool,
        GradOp::GlobalAvgPool,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradOp::Cmp => "cmp",
            GradOp::Conv2d => "conv",
            GradOp::Dense => "dense",
            GradOp::BatchNorm => "bn",
            GradOp::Elu => "elu",
            GradOp::SoftmaxCrossEntropy => "softmax",
            GradOp::MaxPool => "maxpool",
            GradOp::GlobalAvgPool => "gap",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.name() == name)
    }

    pub fn run(self, seed: u64) -> Result<GradReport> {
        let mut rng = Rng::new(seed);
        let max = match self {
            GradOp::Cmp => check_cmp(&mut rng)?,
            GradOp::Conv2d => check_conv(&mut rng)?,
            GradOp::Dense => check_dense(&mut rng)?,
            GradOp::BatchNorm => check_batchnorm(&mut rng)?,
            GradOp::Elu => check_elu(&mut rng)?,
            GradOp::SoftmaxCrossEntropy => check_softmax(&mut rng)?,
            GradOp::MaxPool => check_maxpool(&mut rng)?,
            GradOp::GlobalAvgPool => check_gap(&mut rng)?,
        };
        Ok(GradReport { op: self, max_rel_error: max })
    }
}

impl fmt::Display for GradOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradReport {
    pub op: GradOp,
    pub max_rel_error: f64,
}

/// Checks one CMP configuration on a tie-free input.
pub fn check_cmp_config(rng: &mut Rng, cfg: &CmpConfig, batch: usize, m: usize, n: usize) -> Result<f64> {
    let x = tie_free(rng, &[batch, cfg.in_channels(), m, n])?;
    let (y, cache) = cmp_forward(&x, cfg)?;
    let w = Tensor::uniform(rng, y.shape(), 0.5, 1.5)?;
    let analytic = cmp_backward(&w, &cache, cfg)?;
    let numeric = numeric_gradient(x.data(), STEP, |v| {
        dot(&cmp_forward(&with_data(&x, v), cfg).unwrap().0, &w)
    });
    Ok(max_relative_error(analytic.data(), &numeric))
}

fn check_cmp(rng: &mut Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for (c, r, s) in [(8, 3.0, 2), (4, 2.0, 2), (6, 2.0, 2), (5, 2.0, 2), (7, 2.5, 3), (8, 8.0, 2)] {
        let cfg = make_cmp_config(c, r, s)?;
        worst = worst.max(check_cmp_config(rng, &cfg, 2, 3, 3)?);
    }
    Ok(worst)
}

fn check_conv(rng: &mut Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for &(stride, pad) in &[(1, 1), (2, 0)] {
        let x = Tensor::uniform(rng, &[2, 3, 5, 5], -1.0, 1.0)?;
        let mut weight = ParamTensor::init_uniform(rng, &[4, 3, 3, 3], 27, ParamGroup::Conv)?;
        let mut bias = ParamTensor::init_uniform(rng, &[4], 27, ParamGroup::Conv)?;
        let (y, cache) = ops::conv2d_forward(&x, &weight, &bias, stride, pad)?;
        let w = Tensor::uniform(rng, y.shape(), -1.0, 1.0)?;
        let dx = ops::conv2d_backward(&w, &cache, &mut weight, &mut bias)?;

        let probe = |x: &Tensor, wt: &ParamTensor, b: &ParamTensor| {
            dot(&ops::conv2d_forward(x, wt, b, stride, pad).unwrap().0, &w)
        };
        let nx = numeric_gradient(x.data(), STEP, |v| probe(&with_data(&x, v), &weight, &bias));
        let nw = numeric_gradient(weight.value.data(), STEP, |v| {
            let mut wt = weight.clone();
            wt.value = with_data(&weight.value, v);
            probe(&x, &wt, &bias)
        });
        let nb = numeric_gradient(bias.value.data(), STEP, |v| {
            let mut b = bias.clone();
            b.value = with_data(&bias.value, v);
            probe(&x, &weight, &b)
        });
        worst = worst
            .max(max_relative_error(dx.data(), &nx))
            .max(max_relative_error(weight.grad.data(), &nw))
            .max(max_relative_error(bias.grad.data(), &nb));
    }
    Ok(worst)
}

fn check_dense(rng: &mut Rng) -> Result<f64> {
    let x = Tensor::uniform(rng, &[3, 2, 2, 2], -1.0, 1.0)?;
    let mut weight = ParamTensor::init_uniform(rng, &[5, 8], 8, ParamGroup::Fc)?;
    let mut bias = ParamTensor::init_uniform(rng, &[5], 8, ParamGroup::Fc)?;
    let (y, cache) = ops::dense_forward(&x, &weight, &bias)?;
    let w = Tensor::uniform(rng, y.shape(), -1.0, 1.0)?;
    let dx = ops::dense_backward(&w, &cache, &mut weight, &mut bias)?;

    let probe = |x: &Tensor, wt: &ParamTensor, b: &ParamTensor| dot(&ops::dense_forward(x, wt, b).unwrap().0, &w);
    let nx = numeric_gradient(x.data(), STEP, |v| probe(&with_data(&x, v), &weight, &bias));
    let nw = numeric_gradient(weight.value.data(), STEP, |v| {
        let mut wt = weight.clone();
        wt.value = with_data(&weight.value, v);
        probe(&x, &wt, &bias)
    });
    let nb = numeric_gradient(bias.value.data(), STEP, |v| {
        let mut b = bias.clone();
        b.value = with_data(&bias.value, v);
        probe(&x, &weight, &b)
    });
    Ok(max_relative_error(dx.data(), &nx)
        .max(max_relative_error(weight.grad.data(), &nw))
        .max(max_relative_error(bias.grad.data(), &nb)))
}

fn check_batchnorm(rng: &mut Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for mode in [Mode::Train, Mode::Eval] {
        let x = Tensor::uniform(rng, &[4, 3, 2, 2], -2.0, 2.0)?;
        let mut st = BnState::new(3)?;
        st.gamma.value = Tensor::uniform(rng, &[3], 0.5, 1.5)?;
        st.beta.value = Tensor::uniform(rng, &[3], -0.5, 0.5)?;
        st.running_mean = Tensor::uniform(rng, &[3], -0.2, 0.2)?;
        st.running_var = Tensor::uniform(rng, &[3], 0.5, 1.5)?;
        let w = Tensor::uniform(rng, x.shape(), -1.0, 1.0)?;

        let probe = |x: &Tensor, st: &BnState| {
            let mut st = st.clone();
            dot(&ops::batchnorm_forward(x, &mut st, mode).unwrap().0, &w)
        };
        let mut trained = st.clone();
        let (_, cache) = ops::batchnorm_forward(&x, &mut trained, mode)?;
        let dx = ops::batchnorm_backward(&w, &cache, &mut trained)?;

        let nx = numeric_gradient(x.data(), STEP, |v| probe(&with_data(&x, v), &st));
        let ng = numeric_gradient(st.gamma.value.data(), STEP, |v| {
            let mut s = st.clone();
            s.gamma.value = with_data(&st.gamma.value, v);
            probe(&x, &s)
        });
        let nb = numeric_gradient(st.beta.value.data(), STEP, |v| {
            let mut s = st.clone();
            s.beta.value = with_data(&st.beta.value, v);
            probe(&x, &s)
        });
        worst = worst
            .max(max_relative_error(dx.data(), &nx))
            .max(max_relative_error(trained.gamma.grad.data(), &ng))
            .max(max_relative_error(trained.beta.grad.data(), &nb));
    }
    Ok(worst)
}

fn check_elu(rng: &mut Rng) -> Result<f64> {
    // keep clear of the kink at zero
    let x = Tensor::uniform(rng, &[2, 3, 3, 3], 0.01, 2.0)?
        .map(|v| if v < 1.0 { v - 1.005 } else { v - 0.99 });
    let (y, cache) = ops::elu_forward(&x);
    let w = Tensor::uniform(rng, y.shape(), -1.0, 1.0)?;
    let dx = ops::elu_backward(&w, &cache)?;
    let nx = numeric_gradient(x.data(), STEP, |v| dot(&ops::elu_forward(&with_data(&x, v)).0, &w));
    Ok(max_relative_error(dx.data(), &nx))
}

fn check_softmax(rng: &mut Rng) -> Result<f64> {
    let logits = Tensor::uniform(rng, &[4, 5], -3.0, 3.0)?;
    let labels = [0, 4, 2, 2];
    let (_, grad) = ops::softmax_cross_entropy(&logits, &labels)?;
    let n = numeric_gradient(logits.data(), STEP, |v| {
        ops::softmax_cross_entropy(&with_data(&logits, v), &labels).unwrap().0
    });
    Ok(max_relative_error(grad.data(), &n))
}

fn check_maxpool(rng: &mut Rng) -> Result<f64> {
    let x = tie_free(rng, &[2, 2, 4, 6])?;
    let (y, cache) = ops::maxpool2d_forward(&x)?;
    let w = Tensor::uniform(rng, y.shape(), 0.5, 1.5)?;
    let dx = ops::maxpool2d_backward(&w, &cache)?;
    let nx = numeric_gradient(x.data(), STEP, |v| {
        dot(&ops::maxpool2d_forward(&with_data(&x, v)).unwrap().0, &w)
    });
    Ok(max_relative_error(dx.data(), &nx))
}

fn check_gap(rng: &mut Rng) -> Result<f64> {
    let x = Tensor::uniform(rng, &[2, 3, 4, 3], -1.0, 1.0)?;
    let (y, cache) = ops::global_avg_pool_forward(&x)?;
    let w = Tensor::uniform(rng, y.shape(), -1.0, 1.0)?;
    let dx = ops::global_avg_pool_backward(&w, &cache)?;
    let nx = numeric_gradient(x.data(), STEP, |v| {
        dot(&ops::global_avg_pool_forward(&with_data(&x, v)).unwrap().0, &w)
    });
    Ok(max_relative_error(dx.data(), &nx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_quadratic() {
        let g = numeric_gradient(&[1.0, -2.0], 1e-5, |v| v[0] * v[0] + 3.0 * v[1]);
        assert!((g[0] - 2.0).abs() < 1e-9 && (g[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn tie_free_is_well_separated() {
        let t = tie_free(&mut Rng::new(3), &[2, 3, 4, 4]).unwrap();
        let mut v = t.data().to_vec();
        v.sort_by(f64::total_cmp);
        assert!(v.windows(2).all(|w| w[1] - w[0] > 0.008));
    }

    #[test]
    fn every_operator_passes() {
        for op in GradOp::ALL {
            let report = op.run(17).unwrap();
            let tol = if op == GradOp::Cmp { 1e-6 } else { 1e-4 };
            assert!(report.max_rel_error < tol, "{op}: {}", report.max_rel_error);
        }
    }
}
