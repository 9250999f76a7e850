use crate::error::{Error, Result};
use crate::ops::ParamTensor;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

#[derive(Clone, Debug)]
pub struct DenseCache {
    input: Vec<f64>,
    in_shape: Vec<usize>,
    batch: usize,
    features: usize,
}

/// Flattens `x` to `(B, F)` and applies `y = x W^T + b` with
/// `weight (out, F)`, `bias (out)`. Output is `(B, out, 1, 1)`.
pub fn dense_forward(x: &Tensor, weight: &ParamTensor, bias: &ParamTensor) -> Result<(Tensor, DenseCache)> {
    let batch = x.shape()[0];
    let features = x.len() / batch;
    let (out, w_in) = weight.value.dims2()?;
    if w_in != features {
        return Err(Error::shape(format!(
            "dense layer expects {w_in} input features, got {features} from shape {:?}",
            x.shape()
        )));
    }
    if bias.value.shape() != [out] {
        return Err(Error::shape(format!(
            "dense bias shape {:?}, expected [{out}]",
            bias.value.shape()
        )));
    }
    let mut y = Vec::with_capacity(batch * out);
    for _ in 0..batch {
        y.extend_from_slice(bias.value.data());
    }
    gemm_nt(batch, features, out, x.data(), weight.value.data(), &mut y);
    Ok((
        Tensor::from_vec(&[batch, out, 1, 1], y)?,
        DenseCache {
            input: x.data().to_vec(),
            in_shape: x.shape().to_vec(),
            batch,
            features,
        },
    ))
}

pub fn dense_backward(
    grad_y: &Tensor,
    cache: &DenseCache,
    weight: &mut ParamTensor,
    bias: &mut ParamTensor,
) -> Result<Tensor> {
    let (out, _) = weight.value.dims2()?;
    if grad_y.shape()[0] != cache.batch || grad_y.len() != cache.batch * out {
        return Err(Error::shape(format!(
            "dense backward: grad shape {:?}, expected {} x {out}",
            grad_y.shape(),
            cache.batch
        )));
    }
    let gy = grad_y.data();
    gemm_tn(out, cache.batch, cache.features, gy, &cache.input, weight.grad.data_mut());
    let bgrad = bias.grad.data_mut();
    for row in gy.chunks_exact(out) {
        for (acc, g) in bgrad.iter_mut().zip(row) {
            *acc += g;
        }
    }
    let mut dx = vec![0.0; cache.batch * cache.features];
    gemm_nn(cache.batch, out, cache.features, gy, weight.value.data(), &mut dx);
    Tensor::from_vec(&cache.in_shape, dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::ParamGroup;
    use crate::tensor::Rng;

    #[test]
    fn identity_weights_flatten() {
        let x = Tensor::uniform(&mut Rng::new(1), &[3, 2, 2, 1], -1.0, 1.0).unwrap();
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let w = ParamTensor::new(Tensor::from_vec(&[4, 4], eye).unwrap(), ParamGroup::Fc);
        let b = ParamTensor::new(Tensor::zeros(&[4]).unwrap(), ParamGroup::Fc);
        let (y, _) = dense_forward(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[3, 4, 1, 1]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn backward_shapes_and_bias_grad() {
        let mut rng = Rng::new(3);
        let x = Tensor::uniform(&mut rng, &[2, 3, 1, 1], -1.0, 1.0).unwrap();
        let mut w = ParamTensor::init_uniform(&mut rng, &[2, 3], 3, ParamGroup::Fc).unwrap();
        let mut b = ParamTensor::new(Tensor::zeros(&[2]).unwrap(), ParamGroup::Fc);
        let (_, cache) = dense_forward(&x, &w, &b).unwrap();
        let gy = Tensor::from_vec(&[2, 2, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let dx = dense_backward(&gy, &cache, &mut w, &mut b).unwrap();
        assert_eq!(dx.shape(), x.shape());
        assert_eq!(b.grad.data(), &[4.0, 6.0]);
    }

    #[test]
    fn feature_mismatch() {
        let x = Tensor::zeros(&[2, 5]).unwrap();
        let w = ParamTensor::new(Tensor::zeros(&[2, 4]).unwrap(), ParamGroup::Fc);
        let b = ParamTensor::new(Tensor::zeros(&[2]).unwrap(), ParamGroup::Fc);
        assert!(matches!(dense_forward(&x, &w, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn densenet_head_parameter_count() {
        let fan_in = 7 * 7 * 2208;
        assert_eq!(fan_in * 256, 27_697_152);
        assert_eq!(fan_in * 256 + 256, 27_697_408);
    }
}
