//! Channel max pooling (CMP).
//!
//! A CMP layer maps a `(B, C, M, N)` feature tensor to `(B, ceil(C/r), M, N)`.
//! Output channel `i` is the per-pixel maximum over the contiguous input
//! channel window `[i*s, i*s + k - 1]`, where the window length is
//!
//! ```text
//! k = C - s * (ceil(C/r) - 1)
//! ```
//!
//! so the last window always ends on channel `C - 1`. Windows overlap when
//! `k > s`, tile exactly when `k == s`, and skip channels when `k < s`.
//!
//! Backward routes each output gradient to the channel recorded in the
//! forward argmax cache; lower channel indices win ties.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Quotients within this distance of an integer snap to it before `ceil`.
const CEIL_SNAP: f64 = 1e-9;

/// `ceil(c / r)` with the integer snap applied.
pub fn compressed_channels(c: usize, r: f64) -> usize {
    let q = c as f64 / r;
    let nearest = q.round();
    if (q - nearest).abs() <= CEIL_SNAP {
        nearest as usize
    } else {
        q.ceil() as usize
    }
}

/// Validated CMP hyperparameters plus the derived window geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CmpConfig {
    in_channels: usize,
    compression: f64,
    stride: usize,
    out_channels: usize,
    kernel: usize,
}

impl CmpConfig {
    /// Validates `(C, r, s)` and derives the output channel count and kernel size.
    pub fn new(in_channels: usize, compression: f64, stride: usize) -> Result<Self> {
        if in_channels <= 1 {
            return Err(Error::arg(format!(
                "CMP needs C > 1 input channels, got {in_channels}"
            )));
        }
        if !(compression.is_finite() && compression > 1.0) {
            return Err(Error::arg(format!(
                "CMP compression factor must be a finite real > 1, got {compression}"
            )));
        }
        if stride <= 1 {
            return Err(Error::arg(format!("CMP stride must be > 1, got {stride}")));
        }
        let out_channels = compressed_channels(in_channels, compression);
        let kernel = in_channels as i64 - stride as i64 * (out_channels as i64 - 1);
        if kernel < 1 {
            return Err(Error::InvalidCmpConfig {
                channels: in_channels,
                compression,
                stride,
                kernel,
            });
        }
        Ok(Self {
            in_channels,
            compression,
            stride,
            out_channels,
            kernel: kernel as usize,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn compression(&self) -> f64 {
        self.compression
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel
    }

    /// True when some input channels fall between windows (`k < s`).
    pub fn has_gaps(&self) -> bool {
        self.out_channels > 1 && self.kernel < self.stride
    }

    /// Input channels pooled into output channel `i`.
    pub fn window(&self, i: usize) -> Range<usize> {
        let start = i * self.stride;
        start..start + self.kernel
    }

    /// Input channels that belong to no window.
    pub fn uncovered_channels(&self) -> Vec<usize> {
        let mut covered = vec![false; self.in_channels];
        for i in 0..self.out_channels {
            for c in self.window(i) {
                covered[c] = true;
            }
        }
        (0..self.in_channels).filter(|&c| !covered[c]).collect()
    }
}

/// Same as [`CmpConfig::new`].
pub fn make_cmp_config(in_channels: usize, compression: f64, stride: usize) -> Result<CmpConfig> {
    CmpConfig::new(in_channels, compression, stride)
}

/// Uniform-partition stride `floor(C / ceil(C/r))`, clamped to at least 2.
/// Returns 2 when there is only one output channel.
pub fn suggest_stride(in_channels: usize, compression: f64) -> Result<usize> {
    if in_channels <= 1 || !(compression.is_finite() && compression > 1.0) {
        return Err(Error::arg(format!(
            "suggest_stride needs C > 1 and finite r > 1, got C={in_channels}, r={compression}"
        )));
    }
    let out = compressed_channels(in_channels, compression);
    if out == 1 {
        // a single window spans every channel whatever the stride
        return Ok(2);
    }
    let stride = (in_channels / out).max(2);
    let kernel = in_channels as i64 - stride as i64 * (out as i64 - 1);
    if kernel < 1 {
        return Err(Error::NoValidStride {
            channels: in_channels,
            compression,
        });
    }
    Ok(stride)
}

/// Argmax record from a forward pass, indexed like the output tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct CmpCache {
    argmax: Vec<usize>,
    out_shape: [usize; 4],
    in_channels: usize,
}

impl CmpCache {
    /// Winning input channel for each output element, row-major over
    /// `(batch, out_channel, m, n)`.
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }

    pub fn out_shape(&self) -> [usize; 4] {
        self.out_shape
    }
}

pub fn cmp_forward(x: &Tensor, cfg: &CmpConfig) -> Result<(Tensor, CmpCache)> {
    let (b, c, m, n) = x.dims4()?;
    if c != cfg.in_channels {
        return Err(Error::shape(format!(
            "CMP expects {} input channels, got {c}",
            cfg.in_channels
        )));
    }
    let plane = m * n;
    let out_c = cfg.out_channels;
    let src = x.data();
    let mut y = vec![0.0; b * out_c * plane];
    let mut argmax = vec![0usize; b * out_c * plane];

    for bi in 0..b {
        for oc in 0..out_c {
            let win = cfg.window(oc);
            let dst = (bi * out_c + oc) * plane;
            let yp = &mut y[dst..dst + plane];
            let ap = &mut argmax[dst..dst + plane];
            let first = (bi * c + win.start) * plane;
            yp.copy_from_slice(&src[first..first + plane]);
            ap.fill(win.start);
            for ch in win.start + 1..win.end {
                let off = (bi * c + ch) * plane;
                for ((yv, av), &xv) in yp.iter_mut().zip(ap.iter_mut()).zip(&src[off..off + plane]) {
                    // strict: earlier channel keeps ties
                    if xv > *yv {
                        *yv = xv;
                        *av = ch;
                    }
                }
            }
        }
    }

    let out_shape = [b, out_c, m, n];
    Ok((
        Tensor::from_vec(&out_shape, y)?,
        CmpCache {
            argmax,
            out_shape,
            in_channels: c,
        },
    ))
}

pub fn cmp_backward(grad_y: &Tensor, cache: &CmpCache, cfg: &CmpConfig) -> Result<Tensor> {
    let (b, oc, m, n) = grad_y.dims4()?;
    if [b, oc, m, n] != cache.out_shape {
        return Err(Error::shape(format!(
            "CMP backward: grad shape {:?} does not match cached output {:?}",
            grad_y.shape(),
            cache.out_shape
        )));
    }
    if cache.in_channels != cfg.in_channels || oc != cfg.out_channels {
        return Err(Error::shape(format!(
            "CMP backward: cache is for C={} -> {}, config is C={} -> {}",
            cache.in_channels, oc, cfg.in_channels, cfg.out_channels
        )));
    }
    let c = cfg.in_channels;
    let plane = m * n;
    let mut gx = vec![0.0; b * c * plane];
    let gy = grad_y.data();
    for bi in 0..b {
        for o in 0..oc {
            let base = (bi * oc + o) * plane;
            for p in 0..plane {
                let ch = cache.argmax[base + p];
                gx[(bi * c + ch) * plane + p] += gy[base + p];
            }
        }
    }
    Tensor::from_vec(&[b, c, m, n], gx)
}
