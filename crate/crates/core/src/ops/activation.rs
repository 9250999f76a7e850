use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::tensor::{Rng, Tensor};

const ELU_ALPHA: f64 = 1.0;

pub fn elu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        ELU_ALPHA * v.exp_m1()
    }
}

fn elu_grad(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        ELU_ALPHA * v.exp()
    }
}

#[derive(Clone, Debug)]
pub struct EluCache {
    input: Tensor,
}

pub fn elu_forward(x: &Tensor) -> (Tensor, EluCache) {
    (x.map(elu), EluCache { input: x.clone() })
}

pub fn elu_backward(grad_y: &Tensor, cache: &EluCache) -> Result<Tensor> {
    grad_y.mul(&cache.input.map(elu_grad))
}

/// Inverted-dropout mask: 0 for dropped, `1/(1-p)` for kept coordinates.
#[derive(Clone, Debug)]
pub struct DropoutCache {
    mask: Option<Tensor>,
}

impl DropoutCache {
    pub fn mask(&self) -> Option<&Tensor> {
        self.mask.as_ref()
    }
}

pub fn dropout_forward(x: &Tensor, p: f64, mode: Mode, rng: &mut Rng) -> Result<(Tensor, DropoutCache)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::arg(format!("dropout probability must be in [0, 1), got {p}")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok((x.clone(), DropoutCache { mask: None }));
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
        .collect();
    let mask = Tensor::from_vec(x.shape(), mask)?;
    Ok((x.mul(&mask)?, DropoutCache { mask: Some(mask) }))
}

pub fn dropout_backward(grad_y: &Tensor, cache: &DropoutCache) -> Result<Tensor> {
    match &cache.mask {
        Some(mask) => grad_y.mul(mask),
        None => Ok(grad_y.clone()),
    }
}
