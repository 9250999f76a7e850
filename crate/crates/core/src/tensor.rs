//! Dense row-major `f64` tensors, the seeded RNG, and the CMPT blob format.
//!
//! Activations are always 4-D in `(batch, channel, height, width)` order.
//! Parameters and intermediate matrices use ranks 1 to 4.

use std::io::{Read, Write};

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CMPT";
const VERSION: u32 = 1;

/// Seeded, platform-independent random stream (ChaCha8).
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform draw in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform draw in `[lo, hi)`. Returns `lo` when `lo == hi`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            return lo;
        }
        loop {
            let v = lo + (hi - lo) * self.next_f64();
            // rounding can land exactly on `hi`
            if v < hi {
                return v;
            }
        }
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Independent child stream; advances `self` by one draw.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.inner.gen::<u64>())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::shape(format!(
            "rank must be 1..=4, got {}",
            shape.len()
        )));
    }
    if shape.contains(&0) {
        return Err(Error::shape(format!("zero extent in shape {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    /// Values drawn independently from `[lo, hi)`.
    pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::arg(format!("uniform bounds lo={lo} > hi={hi}")));
        }
        let len = check_shape(shape)?;
        let data = (0..len).map(|_| rng.uniform(lo, hi)).collect();
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Extents of a rank-4 tensor as `(b, c, h, w)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::shape(format!(
                "expected rank-4 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Self, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, &self.data, &other.data, &mut out);
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Serialized CMPT blob.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.rank() + 8 * self.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rank() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    /// Parses one CMPT blob from the front of `bytes`, returning the tensor
    /// and the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<(Self, usize), String> {
        let mut cur = bytes;
        let mut take = |n: usize| -> std::result::Result<&[u8], String> {
            if cur.len() < n {
                return Err("truncated CMPT blob".to_string());
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(4)? != MAGIC {
            return Err("bad magic, expected CMPT".to_string());
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let version = u32_at(take(4)?);
        if version != VERSION {
            return Err(format!("unsupported CMPT version {version}"));
        }
        let rank = u32_at(take(4)?) as usize;
        if rank == 0 || rank > 4 {
            return Err(format!("invalid rank {rank}"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(take(4)?) as usize);
        }
        let len = check_shape(&shape).map_err(|e| e.to_string())?;
        let payload = take(len.checked_mul(8).ok_or("extent overflow")?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let consumed = 12 + 4 * rank + 8 * len;
        Ok((Self { shape, data }, consumed))
    }

    pub fn read_from(r: &mut impl Read) -> std::result::Result<Self, String> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(|e| e.to_string())?;
        let (t, used) = Self::from_bytes(&buf)?;
        if used != buf.len() {
            return Err(format!("{} trailing bytes after CMPT blob", buf.len() - used));
        }
        Ok(t)
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[m,n] += a[k,m]^T * b[k,n]`.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use super::Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn constructors() {
        assert_eq!(Tensor::zeros(&[2, 2]).unwrap().data(), &[0.0; 4]);
        assert_eq!(Tensor::full(&[1, 3], 5.0).unwrap().data(), &[5.0; 3]);
        let a = Tensor::uniform(&mut Rng::new(7), &[4], 0.0, 1.0).unwrap();
        let b = Tensor::uniform(&mut Rng::new(7), &[4], 0.0, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_shapes_rejected() {
        assert!(matches!(Tensor::zeros(&[2, 0]), Err(Error::Shape(_))));
        assert!(matches!(Tensor::zeros(&[]), Err(Error::Shape(_))));
        assert!(matches!(Tensor::zeros(&[1, 1, 1, 1, 1]), Err(Error::Shape(_))));
        assert!(Tensor::uniform(&mut Rng::new(0), &[2], 1.0, 0.0).is_err());
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn matmul_examples() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![5.0, 6.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);

        let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::uniform(&mut Rng::new(3), &[2, 5], -1.0, 1.0).unwrap();
        assert_eq!(eye.matmul(&x).unwrap(), x);

        let mut rng = Rng::new(11);
        let a = Tensor::uniform(&mut rng, &[3, 4], -1.0, 1.0).unwrap();
        let b = Tensor::uniform(&mut rng, &[4, 2], -1.0, 1.0).unwrap();
        let got = a.matmul(&b).unwrap();
        for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((g - e).abs() < 1e-14);
        }
        assert!(matches!(b.matmul(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn elementwise() {
        let x = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        assert_eq!(x.map(f64::abs).data(), &[1.0, 2.0]);
        assert_eq!(x.scale(1.0), x);
        assert_eq!(x.add(&Tensor::zeros(&[2]).unwrap()).unwrap(), x);
        assert!(x.add(&Tensor::zeros(&[3]).unwrap()).is_err());
    }

    #[test]
    fn gemm_variants_agree() {
        let mut rng = Rng::new(5);
        let a = Tensor::uniform(&mut rng, &[3, 4], -1.0, 1.0).unwrap();
        let b = Tensor::uniform(&mut rng, &[4, 5], -1.0, 1.0).unwrap();
        let reference = naive_matmul(&a, &b);
        // a^T stored as (4,3), b^T stored as (5,4)
        let mut at = vec![0.0; 12];
        let mut bt = vec![0.0; 20];
        for i in 0..3 {
            for p in 0..4 {
                at[p * 3 + i] = a.data()[i * 4 + p];
            }
        }
        for p in 0..4 {
            for j in 0..5 {
                bt[j * 4 + p] = b.data()[p * 5 + j];
            }
        }
        let mut nt = vec![0.0; 15];
        gemm_nt(3, 4, 5, a.data(), &bt, &mut nt);
        let mut tn = vec![0.0; 15];
        gemm_tn(3, 4, 5, &at, b.data(), &mut tn);
        for ((r, x), y) in reference.iter().zip(&nt).zip(&tn) {
            assert!((r - x).abs() < 1e-14 && (r - y).abs() < 1e-14);
        }
    }

    #[test]
    fn blob_round_trip_and_truncation() {
        let t = Tensor::uniform(&mut Rng::new(1), &[2, 3, 1, 2], -5.0, 5.0).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..4], b"CMPT");
        assert_eq!(bytes.len(), 12 + 16 + 8 * 12);
        let (back, used) = Tensor::from_bytes(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, t);
        assert!(Tensor::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Tensor::from_bytes(&bad).is_err());
    }

    proptest! {
        #[test]
        fn uniform_stays_in_half_open_range(seed in any::<u64>(), lo in -10.0f64..10.0, width in 1e-9f64..5.0) {
            let hi = lo + width;
            let t = Tensor::uniform(&mut Rng::new(seed), &[64], lo, hi).unwrap();
            prop_assert!(t.data().iter().all(|&v| v >= lo && v < hi));
        }

        #[test]
        fn addition_is_associative(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let a = Tensor::uniform(&mut rng, &[3, 3], -1.0, 1.0).unwrap();
            let b = Tensor::uniform(&mut rng, &[3, 3], -1.0, 1.0).unwrap();
            let c = Tensor::uniform(&mut rng, &[3, 3], -1.0, 1.0).unwrap();
            let l = a.add(&b).unwrap().add(&c).unwrap();
            let r = a.add(&b.add(&c).unwrap()).unwrap();
            for (x, y) in l.data().iter().zip(r.data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn matmul_is_associative(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 1usize..5, p in 1usize..5) {
            let mut rng = Rng::new(seed);
            let a = Tensor::uniform(&mut rng, &[m, k], -1.0, 1.0).unwrap();
            let b = Tensor::uniform(&mut rng, &[k, n], -1.0, 1.0).unwrap();
            let c = Tensor::uniform(&mut rng, &[n, p], -1.0, 1.0).unwrap();
            let l = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let r = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (x, y) in l.data().iter().zip(r.data()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }

        #[test]
        fn blob_round_trip(seed in any::<u64>(), dims in proptest::collection::vec(1usize..5, 1..=4)) {
            let t = Tensor::uniform(&mut Rng::new(seed), &dims, -1e3, 1e3).unwrap();
            let (back, _) = Tensor::from_bytes(&t.to_bytes()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
