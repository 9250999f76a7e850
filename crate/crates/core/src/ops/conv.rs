use crate::error::{Error, Result};
use crate::ops::ParamTensor;
use crate::parallel;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Output extent of a strided, zero-padded window sweep.
pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::shape("kernel and stride must be positive"));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::shape(format!(
            "kernel {kernel} does not fit input {input} with padding {pad}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Geometry {
    batch: usize,
    in_c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolded input patches, one `(patch, cols)` matrix per sample.
#[derive(Clone, Debug)]
pub struct ConvCache {
    geom: Geometry,
    cols: Vec<Vec<f64>>,
}

fn im2col(g: &Geometry, x: &[f64]) -> Vec<f64> {
    let l = g.cols();
    let mut cols = vec![0.0; g.patch() * l];
    for ci in 0..g.in_c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oi in 0..g.oh {
                    let iy = (oi * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for oj in 0..g.ow {
                        let ix = (oj * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oi * g.ow + oj] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(g: &Geometry, cols: &[f64], dx: &mut [f64]) {
    let l = g.cols();
    for ci in 0..g.in_c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * l..(row + 1) * l];
                for oi in 0..g.oh {
                    let iy = (oi * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ci * g.h + iy as usize) * g.w;
                    for oj in 0..g.ow {
                        let ix = (oj * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x (B,Cin,H,W)` with `weight (Cout,Cin,kh,kw)`
/// plus per-channel `bias (Cout)`.
pub fn conv2d_forward(
    x: &Tensor,
    weight: &ParamTensor,
    bias: &ParamTensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, ConvCache)> {
    let (batch, in_c, h, w) = x.dims4()?;
    let (out_c, w_in, kh, kw) = weight.value.dims4()?;
    if w_in != in_c {
        return Err(Error::shape(format!(
            "conv weight expects {w_in} input channels, got {in_c}"
        )));
    }
    if bias.value.shape() != [out_c] {
        return Err(Error::shape(format!(
            "conv bias shape {:?}, expected [{out_c}]",
            bias.value.shape()
        )));
    }
    let g = Geometry {
        batch,
        in_c,
        h,
        w,
        out_c,
        kh,
        kw,
        oh: conv_output_dim(h, kh, stride, pad)?,
        ow: conv_output_dim(w, kw, stride, pad)?,
        stride,
        pad,
    };
    let sample = in_c * h * w;
    let l = g.cols();
    let wdata = weight.value.data();
    let bdata = bias.value.data();

    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = parallel::map_indexed(batch, |b| {
        let cols = im2col(&g, &x.data()[b * sample..(b + 1) * sample]);
        let mut out = vec![0.0; out_c * l];
        for (o, row) in out.chunks_mut(l).enumerate() {
            row.fill(bdata[o]);
        }
        gemm_nn(out_c, g.patch(), l, wdata, &cols, &mut out);
        (cols, out)
    });

    let mut y = Vec::with_capacity(batch * out_c * l);
    let mut cols = Vec::with_capacity(batch);
    for (c, out) in per_sample {
        y.extend_from_slice(&out);
        cols.push(c);
    }
    Ok((
        Tensor::from_vec(&[batch, out_c, g.oh, g.ow], y)?,
        ConvCache { geom: g, cols },
    ))
}

/// Accumulates weight and bias gradients; returns the input gradient.
pub fn conv2d_backward(
    grad_y: &Tensor,
    cache: &ConvCache,
    weight: &mut ParamTensor,
    bias: &mut ParamTensor,
) -> Result<Tensor> {
    let g = cache.geom;
    if grad_y.shape() != [g.batch, g.out_c, g.oh, g.ow] {
        return Err(Error::shape(format!(
            "conv backward: grad shape {:?} does not match output [{}, {}, {}, {}]",
            grad_y.shape(),
            g.batch,
            g.out_c,
            g.oh,
            g.ow
        )));
    }
    let l = g.cols();
    let k = g.patch();
    let sample = g.in_c * g.h * g.w;
    let wdata = weight.value.data();
    let gy = grad_y.data();

    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = parallel::map_indexed(g.batch, |b| {
        let gy_b = &gy[b * g.out_c * l..(b + 1) * g.out_c * l];
        let mut dw = vec![0.0; g.out_c * k];
        gemm_nt(g.out_c, l, k, gy_b, &cache.cols[b], &mut dw);
        let mut dcols = vec![0.0; k * l];
        gemm_tn(k, g.out_c, l, wdata, gy_b, &mut dcols);
        let mut dx = vec![0.0; sample];
        col2im(&g, &dcols, &mut dx);
        (dw, dx)
    });

    let mut dx_all = Vec::with_capacity(g.batch * sample);
    let wgrad = weight.grad.data_mut();
    for (dw, dx) in per_sample {
        for (acc, v) in wgrad.iter_mut().zip(&dw) {
            *acc += v;
        }
        dx_all.extend_from_slice(&dx);
    }
    let bgrad = bias.grad.data_mut();
    for b in 0..g.batch {
        for (o, acc) in bgrad.iter_mut().enumerate() {
            let start = (b * g.out_c + o) * l;
            *acc += gy[start..start + l].iter().sum::<f64>();
        }
    }
    Tensor::from_vec(&[g.batch, g.in_c, g.h, g.w], dx_all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::ParamGroup;
    use crate::tensor::Rng;

    fn param(shape: &[usize], data: Vec<f64>) -> ParamTensor {
        ParamTensor::new(Tensor::from_vec(shape, data).unwrap(), ParamGroup::Conv)
    }

    /// Direct seven-loop convolution.
    fn direct(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
        let (bn, ci, h, wd) = x.dims4().unwrap();
        let (co, _, kh, kw) = w.dims4().unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; bn * co * oh * ow];
        for n in 0..bn {
            for o in 0..co {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b.data()[o];
                        for c in 0..ci {
                            for u in 0..kh {
                                for v in 0..kw {
                                    let y = (i * stride + u) as isize - pad as isize;
                                    let xx = (j * stride + v) as isize - pad as isize;
                                    if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                        acc += w.data()[((o * ci + c) * kh + u) * kw + v]
                                            * x.data()[((n * ci + c) * h + y as usize) * wd + xx as usize];
                                    }
                                }
                            }
                        }
                        out[((n * co + o) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut rng = Rng::new(2);
        let x = Tensor::uniform(&mut rng, &[2, 3, 4, 5], -1.0, 1.0).unwrap();
        let mut eye = vec![0.0; 9];
        for c in 0..3 {
            eye[c * 3 + c] = 1.0;
        }
        let w = param(&[3, 3, 1, 1], eye);
        let b = param(&[3], vec![0.0; 3]);
        let (y, _) = conv2d_forward(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_kernel_sums_window() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = param(&[1, 1, 2, 2], vec![1.0; 4]);
        let b = param(&[1], vec![0.0]);
        let (y, _) = conv2d_forward(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn matches_direct_loops() {
        let mut rng = Rng::new(9);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let x = Tensor::uniform(&mut rng, &[2, 3, 7, 6], -1.0, 1.0).unwrap();
            let w = ParamTensor::init_uniform(&mut rng, &[4, 3, 3, 2], 18, ParamGroup::Conv).unwrap();
            let b = ParamTensor::init_uniform(&mut rng, &[4], 18, ParamGroup::Conv).unwrap();
            let (y, _) = conv2d_forward(&x, &w, &b, stride, pad).unwrap();
            let expect = direct(&x, &w.value, &b.value, stride, pad);
            for (a, e) in y.data().iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn impossible_geometry_is_a_shape_error() {
        let x = Tensor::zeros(&[1, 1, 2, 2]).unwrap();
        let w = param(&[1, 1, 3, 3], vec![0.0; 9]);
        let b = param(&[1], vec![0.0]);
        assert!(matches!(conv2d_forward(&x, &w, &b, 1, 0), Err(Error::Shape(_))));
        assert!(conv2d_forward(&x, &w, &b, 1, 1).is_ok());
        let w2 = param(&[1, 2, 1, 1], vec![0.0; 2]);
        assert!(conv2d_forward(&x, &w2, &b, 1, 0).is_err());
    }

    #[test]
    fn threads_do_not_change_results() {
        let mut rng = Rng::new(4);
        let x = Tensor::uniform(&mut rng, &[5, 2, 6, 6], -1.0, 1.0).unwrap();
        let mut w = ParamTensor::init_uniform(&mut rng, &[3, 2, 3, 3], 18, ParamGroup::Conv).unwrap();
        let mut b = ParamTensor::init_uniform(&mut rng, &[3], 18, ParamGroup::Conv).unwrap();
        let gy = Tensor::uniform(&mut rng, &[5, 3, 6, 6], -1.0, 1.0).unwrap();

        let run = |w: &mut ParamTensor, b: &mut ParamTensor| {
            w.zero_grad();
            b.zero_grad();
            let (y, cache) = conv2d_forward(&x, w, b, 1, 1).unwrap();
            let dx = conv2d_backward(&gy, &cache, w, b).unwrap();
            (y, dx, w.grad.clone(), b.grad.clone())
        };
        let serial = run(&mut w, &mut b);
        parallel::set_threads(3);
        let par = run(&mut w, &mut b);
        parallel::set_threads(1);
        assert_eq!(serial, par);
    }
}
