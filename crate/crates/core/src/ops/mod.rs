//! Differentiable building blocks. Each operator exposes a forward that
//! returns its output plus a cache, and a backward that consumes the cache,
//! accumulates parameter gradients, and returns the input gradient.

mod activation;
mod batchnorm;
mod conv;
mod dense;
mod loss;
mod pool;

pub use activation::{dropout_backward, dropout_forward, elu, elu_backward, elu_forward, DropoutCache, EluCache};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, BnCache, BnState};
pub use conv::{conv2d_backward, conv2d_forward, conv_output_dim, ConvCache};
pub use dense::{dense_backward, dense_forward, DenseCache};
pub use loss::softmax_cross_entropy;
pub use pool::{
    global_avg_pool_backward, global_avg_pool_forward, maxpool2d_backward, maxpool2d_forward, GapCache,
    MaxPoolCache,
};

use crate::tensor::{Rng, Tensor};

/// Learning-rate group of a parameter. Convolution weights train at a
/// fraction of the fully connected learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Conv,
    Fc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub value: Tensor,
    pub grad: Tensor,
    pub group: ParamGroup,
}

impl ParamTensor {
    pub fn new(value: Tensor, group: ParamGroup) -> Self {
        let grad = value.map(|_| 0.0);
        Self { value, grad, group }
    }

    /// Uniform in `±sqrt(1 / fan_in)`.
    pub fn init_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize, group: ParamGroup) -> crate::Result<Self> {
        let bound = (1.0 / fan_in as f64).sqrt();
        Ok(Self::new(Tensor::uniform(rng, shape, -bound, bound)?, group))
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}
