//! Dense row-major `f64` tensors and the handful of kernels the network needs.
//!
//! Reductions always run in ascending index order so results are
//! bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Probability floor applied before taking logs in [`cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("dims must be positive, got {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self { dims: dims.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Self { dims: dims.to_vec(), data: vec![value; n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { dims: vec![data.len()], data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {dims:?}", self.dims)));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { dims: self.dims.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.dims, other.dims)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { dims: self.dims.clone(), data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!("{what}: non-finite value at index {i}"))),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn squared_distance(&self, other: &Tensor) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum())
    }
}

/// Matrix product of `a[m×k]` and `b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = match a.dims() {
        [m, k] => (*m, *k),
        d => return Err(Error::Shape(format!("matmul lhs must be 2-D, got {d:?}"))),
    };
    let (k2, n) = match b.dims() {
        [k2, n] => (*k2, *n),
        d => return Err(Error::Shape(format!("matmul rhs must be 2-D, got {d:?}"))),
    };
    if k != k2 {
        return Err(Error::Shape(format!("matmul inner dims {k} vs {k2}")));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.data[i * k + p] * b.data[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Geometry of a valid (unpadded) strided 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height - self.kh) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.kw) / self.stride + 1
    }

    fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Shape("conv stride must be positive".into()));
        }
        if self.kh > self.height || self.kw > self.width {
            return Err(Error::Shape(format!(
                "kernel {}x{} larger than input {}x{}",
                self.kh, self.kw, self.height, self.width
            )));
        }
        Ok(())
    }

    fn of(input: &Tensor, kernels: &Tensor, stride: usize) -> Result<Self> {
        let [c, h, w] = input.dims() else {
            return Err(Error::Shape(format!("conv input must be C×H×W, got {:?}", input.dims())));
        };
        let [f, kc, kh, kw] = kernels.dims() else {
            return Err(Error::Shape(format!("conv kernels must be F×C×kh×kw, got {:?}", kernels.dims())));
        };
        if c != kc {
            return Err(Error::Shape(format!("input has {c} channels, kernels expect {kc}")));
        }
        let g = Self { channels: *c, height: *h, width: *w, filters: *f, kh: *kh, kw: *kw, stride };
        g.validate()?;
        Ok(g)
    }
}

/// Valid cross-correlation of `input[C×H×W]` with `kernels[F×C×kh×kw]`.
///
/// Accumulation order per output element is fixed: channels, then kernel
/// rows, then kernel columns, each ascending.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize) -> Result<Tensor> {
    let g = ConvGeometry::of(input, kernels, stride)?;
    let (oh, ow) = (g.out_height(), g.out_width());
    let (h, w) = (g.height, g.width);
    let mut out = vec![0.0; g.filters * oh * ow];
    for f in 0..g.filters {
        let out_f = &mut out[f * oh * ow..(f + 1) * oh * ow];
        for c in 0..g.channels {
            let in_c = &input.data[c * h * w..(c + 1) * h * w];
            for u in 0..g.kh {
                for v in 0..g.kw {
                    let kv = kernels.data[((f * g.channels + c) * g.kh + u) * g.kw + v];
                    if w == 1 && stride == 1 {
                        // Time-only signals: one contiguous axpy per tap.
                        for (o, x) in out_f.iter_mut().zip(&in_c[u..u + oh]) {
                            *o += kv * x;
                        }
                        continue;
                    }
                    for i in 0..oh {
                        let row = (i * stride + u) * w + v;
                        for j in 0..ow {
                            out_f[i * ow + j] += kv * in_c[row + j * stride];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.filters, oh, ow], out)
}

/// Gradients of [`conv2d`] with respect to its input and kernels, given the
/// gradient of the output.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let g = ConvGeometry::of(input, kernels, stride)?;
    let (oh, ow) = (g.out_height(), g.out_width());
    if grad_out.dims() != [g.filters, oh, ow] {
        return Err(Error::Shape(format!(
            "conv grad {:?} does not match output {:?}",
            grad_out.dims(),
            [g.filters, oh, ow]
        )));
    }
    let (h, w) = (g.height, g.width);
    let mut gin = vec![0.0; input.len()];
    let mut gk = vec![0.0; kernels.len()];
    for f in 0..g.filters {
        let go_f = &grad_out.data[f * oh * ow..(f + 1) * oh * ow];
        for c in 0..g.channels {
            let in_c = &input.data[c * h * w..(c + 1) * h * w];
            let gin_c = &mut gin[c * h * w..(c + 1) * h * w];
            for u in 0..g.kh {
                for v in 0..g.kw {
                    let k = ((f * g.channels + c) * g.kh + u) * g.kw + v;
                    let kv = kernels.data[k];
                    let mut acc = 0.0;
                    if w == 1 && stride == 1 {
                        for ((go, x), gi) in go_f.iter().zip(&in_c[u..u + oh]).zip(&mut gin_c[u..u + oh]) {
                            acc += go * x;
                            *gi += go * kv;
                        }
                    } else {
                        for i in 0..oh {
                            let row = (i * stride + u) * w + v;
                            for j in 0..ow {
                                let go = go_f[i * ow + j];
                                acc += go * in_c[row + j * stride];
                                gin_c[row + j * stride] += go * kv;
                            }
                        }
                    }
                    gk[k] += acc;
                }
            }
        }
    }
    Ok((Tensor::new(input.dims.clone(), gin)?, Tensor::new(kernels.dims.clone(), gk)?))
}

/// Non-overlapping 2×1 max pooling along the height axis; a trailing odd row
/// is dropped. Also returns, per output element, the flat input index that
/// produced it (first occurrence wins ties), for backpropagation.
pub fn maxpool_2x1_indexed(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [c, h, w] = input.dims() else {
        return Err(Error::Shape(format!("maxpool input must be C×H×W, got {:?}", input.dims())));
    };
    let (c, h, w) = (*c, *h, *w);
    if h < 2 {
        return Err(Error::Shape(format!("maxpool needs height >= 2, got {h}")));
    }
    let oh = h / 2;
    let mut out = Vec::with_capacity(c * oh * w);
    let mut idx = Vec::with_capacity(c * oh * w);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..w {
                let a = ch * h * w + 2 * i * w + j;
                let b = a + w;
                let k = if input.data[b] > input.data[a] { b } else { a };
                out.push(input.data[k]);
                idx.push(k);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, w], out)?, idx))
}

pub fn maxpool_2x1(input: &Tensor) -> Result<Tensor> {
    maxpool_2x1_indexed(input).map(|(t, _)| t)
}

/// Numerically stable softmax over a flat tensor.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.is_empty() {
        return Err(Error::Shape("softmax of empty tensor".into()));
    }
    let max = logits.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(Tensor { dims: logits.dims.clone(), data: exps.into_iter().map(|e| e / total).collect() })
}

/// `-ln(probs[label])` with the probability floored at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &Tensor, label: usize) -> Result<f64> {
    let p = probs
        .data
        .get(label)
        .ok_or_else(|| Error::Index(format!("label {label} out of range for {} classes", probs.len())))?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Tensor of i.i.d. standard normal draws, reproducible per stream.
pub fn gaussian_sample(rng: &RngStream, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor { dims: dims.to_vec(), data: rng.normals(n) }
}

pub fn relu(t: &Tensor) -> Tensor {
    t.map(|x| x.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let i2 = Tensor::identity(2);
        assert_eq!(matmul(&i2, &i2).unwrap(), i2);
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let z = matmul(&a, &Tensor::zeros(&[2, 1])).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0]);
        assert_eq!(matmul(&a, &Tensor::identity(2)).unwrap(), a);
    }

    #[test]
    fn matmul_hand_expansion() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[5.0, 6.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.dims(), &[2, 1]);
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn tensor_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn conv_zero_kernel() {
        let x = gaussian_sample(&RngStream::new(1, 1), &[2, 4, 4]);
        let k = Tensor::zeros(&[3, 2, 2, 2]);
        let y = conv2d(&x, &k, 1).unwrap();
        assert_eq!(y.dims(), &[3, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_unit_kernel_sums_channels() {
        let x = gaussian_sample(&RngStream::new(1, 2), &[3, 2, 5]);
        let y = conv2d(&x, &Tensor::filled(&[1, 3, 1, 1], 1.0), 1).unwrap();
        for p in 0..10 {
            let s = x.data()[p] + x.data()[10 + p] + x.data()[20 + p];
            assert_eq!(y.data()[p], s);
        }
        let single = gaussian_sample(&RngStream::new(1, 3), &[1, 3, 4]);
        assert_eq!(conv2d(&single, &Tensor::filled(&[1, 1, 1, 1], 1.0), 1).unwrap(), single);
    }

    #[test]
    fn conv_window_sums() {
        let y = conv2d(&Tensor::filled(&[1, 3, 3], 1.0), &Tensor::filled(&[1, 1, 2, 2], 1.0), 1).unwrap();
        assert_eq!(y.dims(), &[1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv_stride_shape() {
        let y = conv2d(&Tensor::zeros(&[1, 7, 5]), &Tensor::zeros(&[2, 1, 3, 1]), 2).unwrap();
        assert_eq!(y.dims(), &[2, 3, 3]);
    }

    #[test]
    fn conv_kernel_too_large() {
        let r = conv2d(&Tensor::zeros(&[1, 2, 2]), &Tensor::zeros(&[1, 1, 3, 1]), 1);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    fn check_conv_backward(xd: &[usize], kd: &[usize], stride: usize) {
        let x = gaussian_sample(&RngStream::new(5, 0), xd);
        let k = gaussian_sample(&RngStream::new(5, 1), kd);
        let out_dims = conv2d(&x, &k, stride).unwrap().dims().to_vec();
        let r = gaussian_sample(&RngStream::new(5, 2), &out_dims);
        let loss = |x: &Tensor, k: &Tensor| {
            let y = conv2d(x, k, stride).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (gx, gk) = conv2d_backward(&x, &k, stride, &r).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fd = (loss(&p, &k) - loss(&m, &k)) / (2.0 * h);
            assert!((fd - gx.data()[i]).abs() < 1e-7);
        }
        for i in 0..k.len() {
            let (mut p, mut m) = (k.clone(), k.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fd = (loss(&x, &p) - loss(&x, &m)) / (2.0 * h);
            assert!((fd - gk.data()[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        check_conv_backward(&[2, 6, 3], &[2, 2, 3, 2], 2);
        check_conv_backward(&[3, 9, 1], &[2, 3, 4, 1], 1);
        check_conv_backward(&[2, 5, 4], &[3, 2, 2, 2], 1);
    }

    #[test]
    fn conv_fast_path_matches_strided_path() {
        // Same arithmetic through the generic loop: embed the time axis as width.
        let x = gaussian_sample(&RngStream::new(6, 0), &[3, 12, 1]);
        let k = gaussian_sample(&RngStream::new(6, 1), &[2, 3, 5, 1]);
        let fast = conv2d(&x, &k, 1).unwrap();
        let xt = Tensor::new(vec![3, 1, 12], x.data().to_vec()).unwrap();
        let kt = Tensor::new(vec![2, 3, 1, 5], k.data().to_vec()).unwrap();
        let slow = conv2d(&xt, &kt, 1).unwrap();
        assert_eq!(fast.data(), slow.data());
    }

    #[test]
    fn maxpool_cases() {
        let y = maxpool_2x1(&t(&[1, 2, 1], &[1.0, 3.0])).unwrap();
        assert_eq!(y.data(), &[3.0]);
        let c = maxpool_2x1(&Tensor::filled(&[2, 4, 3], 2.5)).unwrap();
        assert_eq!(c.dims(), &[2, 2, 3]);
        assert!(c.data().iter().all(|&v| v == 2.5));
        let odd = maxpool_2x1(&t(&[1, 5, 1], &[1.0, 2.0, 5.0, 4.0, 99.0])).unwrap();
        assert_eq!(odd.data(), &[2.0, 5.0]);
        assert!(matches!(maxpool_2x1(&Tensor::zeros(&[1, 1, 4])), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&Tensor::zeros(&[3])).unwrap();
        for &p in u.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let shifted = softmax(&Tensor::filled(&[4], -731.5)).unwrap();
        assert!(shifted.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let logs = Tensor::from_vec(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]);
        let p = softmax(&logs).unwrap();
        for (got, want) in p.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        let extreme = softmax(&Tensor::from_vec(vec![1e4, -1e4, 0.0])).unwrap();
        assert!((extreme.sum() - 1.0).abs() < 1e-12);
        assert!(extreme.is_finite());
    }

    #[test]
    fn cross_entropy_cases() {
        assert_eq!(cross_entropy(&Tensor::from_vec(vec![0.0, 1.0, 0.0]), 1).unwrap(), 0.0);
        let u = Tensor::filled(&[3], 1.0 / 3.0);
        assert!((cross_entropy(&u, 2).unwrap() - 3f64.ln()).abs() < 1e-15);
        let z = cross_entropy(&Tensor::from_vec(vec![1.0, 0.0]), 1).unwrap();
        assert!((z - 1e12f64.ln()).abs() < 1e-12);
        assert!(matches!(cross_entropy(&u, 3), Err(Error::Index(_))));
    }

    #[test]
    fn gaussian_sample_statistics() {
        let a = gaussian_sample(&RngStream::new(11, 4), &[100_000]);
        assert_eq!(a, gaussian_sample(&RngStream::new(11, 4), &[100_000]));
        assert_ne!(a, gaussian_sample(&RngStream::new(11, 5), &[100_000]));
        let n = a.len() as f64;
        let mean = a.sum() / n;
        let var = a.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
