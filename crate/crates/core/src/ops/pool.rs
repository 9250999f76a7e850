use crate::error::{Error, Result};
use crate::tensor::Tensor;

const POOL: usize = 2;

/// Argmax positions (flat input indices) for spatial max pooling.
#[derive(Clone, Debug)]
pub struct MaxPoolCache {
    argmax: Vec<usize>,
    in_shape: [usize; 4],
    out_shape: [usize; 4],
}

/// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.
pub fn maxpool2d_forward(x: &Tensor) -> Result<(Tensor, MaxPoolCache)> {
    let (b, c, h, w) = x.dims4()?;
    if h < POOL || w < POOL {
        return Err(Error::shape(format!(
            "maxpool needs spatial extent >= {POOL}, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / POOL, w / POOL);
    let src = x.data();
    let mut y = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(y.capacity());
    for plane in 0..b * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + (i * POOL) * w + j * POOL;
                for di in 0..POOL {
                    for dj in 0..POOL {
                        let idx = base + (i * POOL + di) * w + j * POOL + dj;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                y.push(src[best]);
                argmax.push(best);
            }
        }
    }
    let out_shape = [b, c, oh, ow];
    Ok((
        Tensor::from_vec(&out_shape, y)?,
        MaxPoolCache {
            argmax,
            in_shape: [b, c, h, w],
            out_shape,
        },
    ))
}

pub fn maxpool2d_backward(grad_y: &Tensor, cache: &MaxPoolCache) -> Result<Tensor> {
    if grad_y.shape() != cache.out_shape {
        return Err(Error::shape(format!(
            "maxpool backward: grad shape {:?}, expected {:?}",
            grad_y.shape(),
            cache.out_shape
        )));
    }
    let mut dx = Tensor::zeros(&cache.in_shape)?;
    let d = dx.data_mut();
    for (&idx, &g) in cache.argmax.iter().zip(grad_y.data()) {
        d[idx] += g;
    }
    Ok(dx)
}

#[derive(Clone, Debug)]
pub struct GapCache {
    in_shape: [usize; 4],
}

/// Mean over each channel's spatial map: `(B,C,M,N) -> (B,C,1,1)`.
pub fn global_avg_pool_forward(x: &Tensor) -> Result<(Tensor, GapCache)> {
    let (b, c, m, n) = x.dims4()?;
    let plane = m * n;
    let y = x
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Ok((Tensor::from_vec(&[b, c, 1, 1], y)?, GapCache { in_shape: [b, c, m, n] }))
}

pub fn global_avg_pool_backward(grad_y: &Tensor, cache: &GapCache) -> Result<Tensor> {
    let [b, c, m, n] = cache.in_shape;
    if grad_y.shape() != [b, c, 1, 1] {
        return Err(Error::shape(format!(
            "GAP backward: grad shape {:?}, expected [{b}, {c}, 1, 1]",
            grad_y.shape()
        )));
    }
    let plane = m * n;
    let mut dx = Vec::with_capacity(b * c * plane);
    for &g in grad_y.data() {
        dx.extend(std::iter::repeat_n(g / plane as f64, plane));
    }
    Tensor::from_vec(&cache.in_shape, dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_routes_to_max() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, cache) = maxpool2d_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = Tensor::from_vec(&[1, 1, 1, 1], vec![2.5]).unwrap();
        assert_eq!(maxpool2d_backward(&g, &cache).unwrap().data(), &[0.0, 0.0, 0.0, 2.5]);
    }

    #[test]
    fn maxpool_constant_and_ties() {
        let x = Tensor::full(&[2, 3, 4, 4], -0.5).unwrap();
        let (y, cache) = maxpool2d_forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2, 2]);
        assert!(y.data().iter().all(|&v| v == -0.5));
        // ties route to the first position in row-major order
        let g = Tensor::full(&[2, 3, 2, 2], 1.0).unwrap();
        let dx = maxpool2d_backward(&g, &cache).unwrap();
        assert_eq!(&dx.data()[..4], &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(dx.sum(), 24.0);
    }

    #[test]
    fn maxpool_drops_odd_edge_and_rejects_tiny_maps() {
        let x = Tensor::zeros(&[1, 1, 5, 3]).unwrap();
        assert_eq!(maxpool2d_forward(&x).unwrap().0.shape(), &[1, 1, 2, 1]);
        assert!(maxpool2d_forward(&Tensor::zeros(&[1, 1, 1, 4]).unwrap()).is_err());
    }

    #[test]
    fn gap_examples() {
        let x = Tensor::full(&[1, 1, 7, 7], 3.0).unwrap();
        assert!((global_avg_pool_forward(&x).unwrap().0.data()[0] - 3.0).abs() < 1e-15);

        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, cache) = global_avg_pool_forward(&x).unwrap();
        assert_eq!(y.data(), &[2.5]);
        let g = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
        assert_eq!(global_avg_pool_backward(&g, &cache).unwrap().data(), &[0.5; 4]);
    }
}
