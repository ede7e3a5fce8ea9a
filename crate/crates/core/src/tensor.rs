//! Dense row-major `f64` tensor and the primitives the rest of the crate is
//! built from.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kernels::{self, MatRef};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} holds {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Zero-mean normal entries with standard deviation `std`.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Self::from_fn(shape, |_| normal.sample(rng))
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape("dims2", format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    /// Collapse all leading axes into rows, keeping the last axis as columns.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        let rows = if cols == 0 { 0 } else { self.data.len() / cols };
        (rows, cols)
    }

    pub fn as_mat(&self) -> MatRef<'_, f64> {
        let (r, c) = self.rows_cols();
        MatRef::new(&self.data, r, c)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = self.rows_cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        let (_, cols) = self.rows_cols();
        self.data[r * cols + c]
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        Ok(Tensor {
            shape: vec![c, r],
            data: kernels::transpose(&self.data, r, c),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols();
        if bias.numel() != cols {
            return Err(Error::shape(
                "add_row",
                format!("bias of {} values for {} columns", bias.numel(), cols),
            ));
        }
        let mut out = self.clone();
        for r in 0..rows {
            for (o, b) in out.data[r * cols..(r + 1) * cols].iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Tensor> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Copy of columns `start..start + width` of a rank-2 tensor.
    pub fn cols_range(&self, start: usize, width: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if start + width > c {
            return Err(Error::shape("cols_range", format!("{}+{} > {}", start, width, c)));
        }
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + width]);
        }
        Tensor::new([r, width], data)
    }

    /// Row `r` reversed order: `out[t] = self[rows - 1 - t]`.
    pub fn reverse_rows(&self) -> Tensor {
        let (r, c) = self.rows_cols();
        let mut data = Vec::with_capacity(self.data.len());
        for i in (0..r).rev() {
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Mean over rows of a `rows × cols` view, returned as `[cols]`.
    pub fn mean_rows(&self) -> Tensor {
        let (r, c) = self.rows_cols();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(&self.data[i * c..(i + 1) * c]) {
                *o += x;
            }
        }
        let inv = 1.0 / r.max(1) as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Tensor { shape: vec![c], data: out }
    }
}

/// `c[i,j] = Σ_p a[i,p]·b[p,j]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("[{m}×{k}] · [{k2}×{n}]")));
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm_acc(a.as_mat(), b.as_mat(), &mut out);
    Tensor::new([m, n], out)?.ensure_finite("matmul")
}

/// Elementwise logistic function, strictly inside `(0, 1]`.
pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(kernels::sigmoid_scalar)
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * kernels::sigmoid_scalar(v))
}

/// Row-wise softmax over the last axis. `-inf` entries are masked and get
/// exactly zero weight; a row with no finite entry is rejected.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (rows, cols) = x.rows_cols();
    let mut out = x.clone();
    for r in 0..rows {
        let row = &mut out.data[r * cols..(r + 1) * cols];
        if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::InvalidArgument(format!("softmax_rows: row {r} is fully masked")));
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Depthwise 3×3 convolution over an `H×W×C` grid, stride 1, zero padding 1.
pub fn dwconv3x3(x: &Tensor, filters: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [h, w, c] = x.shape()[..] else {
        return Err(Error::shape("dwconv3x3", format!("input {:?} is not H×W×C", x.shape())));
    };
    if filters.shape() != [3, 3, c] || bias.numel() != c {
        return Err(Error::shape(
            "dwconv3x3",
            format!("filters {:?} / bias {:?} for {c} channels", filters.shape(), bias.shape()),
        ));
    }
    let (xd, fd) = (x.data(), filters.data());
    let mut out = vec![0.0; h * w * c];
    for oy in 0..h {
        for ox in 0..w {
            let o = &mut out[(oy * w + ox) * c..(oy * w + ox + 1) * c];
            o.copy_from_slice(bias.data());
            for i in 0..3 {
                let iy = oy as isize + i as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for j in 0..3 {
                    let ix = ox as isize + j as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = &xd[(iy as usize * w + ix as usize) * c..][..c];
                    let f = &fd[(i * 3 + j) * c..][..c];
                    for ((o, s), f) in o.iter_mut().zip(src).zip(f) {
                        *o += s * f;
                    }
                }
            }
        }
    }
    Tensor::new([h, w, c], out)?.ensure_finite("dwconv3x3")
}

/// Root-mean-square normalization over the last axis.
pub fn rmsnorm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("rmsnorm: eps must be > 0, got {eps}")));
    }
    let (rows, d) = x.rows_cols();
    if gain.numel() != d {
        return Err(Error::shape("rmsnorm", format!("gain of {} for width {d}", gain.numel())));
    }
    let mut out = x.clone();
    for r in 0..rows {
        let row = &mut out.data[r * d..(r + 1) * d];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        for (v, g) in row.iter_mut().zip(gain.data()) {
            *v *= inv * g;
        }
    }
    out.ensure_finite("rmsnorm")
}

/// Geometry of a strided 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn output_len(&self, input: usize) -> usize {
        (input + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1
    }
}

/// Unfold an `H×W×C` input into `(OH·OW) × (k·k·C)` patches (zero padded).
pub(crate) fn im2col(x: &[f64], h: usize, w: usize, c: usize, g: ConvGeometry) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (g.output_len(h), g.output_len(w));
    let k = g.kernel;
    let cols = k * k * c;
    let mut out = vec![0.0; oh * ow * cols];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut out[(oy * ow + ox) * cols..][..cols];
            for i in 0..k {
                let iy = (oy * g.stride + i) as isize - g.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for j in 0..k {
                    let ix = (ox * g.stride + j) as isize - g.pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    dst[(i * k + j) * c..][..c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    (out, oh, ow)
}

/// Fold patch gradients back onto the input grid (adjoint of [`im2col`]).
pub(crate) fn col2im(cols: &[f64], h: usize, w: usize, c: usize, g: ConvGeometry) -> Vec<f64> {
    let (oh, ow) = (g.output_len(h), g.output_len(w));
    let k = g.kernel;
    let width = k * k * c;
    let mut out = vec![0.0; h * w * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let src = &cols[(oy * ow + ox) * width..][..width];
            for i in 0..k {
                let iy = (oy * g.stride + i) as isize - g.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for j in 0..k {
                    let ix = (ox * g.stride + j) as isize - g.pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * c;
                    for (d, s) in out[dst..dst + c].iter_mut().zip(&src[(i * k + j) * c..][..c]) {
                        *d += s;
                    }
                }
            }
        }
    }
    out
}

/// Dense 2-D convolution of an `H×W×Cin` input with `k×k×Cin×Cout` weights.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, geometry: ConvGeometry) -> Result<Tensor> {
    let [h, w, cin] = x.shape()[..] else {
        return Err(Error::shape("conv2d", format!("input {:?} is not H×W×C", x.shape())));
    };
    let k = geometry.kernel;
    let cout = match weight.shape()[..] {
        [a, b, ci, co] if a == k && b == k && ci == cin => co,
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("weight {:?} for kernel {k} and {cin} input channels", weight.shape()),
            ))
        }
    };
    if bias.numel() != cout {
        return Err(Error::shape("conv2d", format!("bias {:?} for {cout} outputs", bias.shape())));
    }
    if geometry.stride == 0 || h + 2 * geometry.pad < k || w + 2 * geometry.pad < k {
        return Err(Error::InvalidArgument(format!("conv2d: bad geometry {geometry:?} for {h}×{w}")));
    }
    let (cols, oh, ow) = im2col(x.data(), h, w, cin, geometry);
    let mut out = vec![0.0; oh * ow * cout];
    for row in out.chunks_mut(cout) {
        row.copy_from_slice(bias.data());
    }
    kernels::gemm_acc(
        MatRef::new(&cols, oh * ow, k * k * cin),
        MatRef::new(weight.data(), k * k * cin, cout),
        &mut out,
    );
    Tensor::new([oh, ow, cout], out)?.ensure_finite("conv2d")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn t2(rows: &[&[f64]]) -> Tensor {
        let r = rows.len();
        let c = rows[0].len();
        Tensor::new([r, c], rows.concat()).unwrap()
    }

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new([2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_identity_and_dot() {
        let id = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = t2(&[&[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(matmul(&id, &b).unwrap(), b);
        let row = t2(&[&[1.0, 2.0]]);
        let col = t2(&[&[3.0], &[4.0]]);
        assert_eq!(matmul(&row, &col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros([2, 3]);
        let b = Tensor::zeros([2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = rng();
        let a = Tensor::randn([4, 5], 1.0, &mut rng);
        let b = Tensor::randn([5, 3], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..5 {
                    s += a.at2(i, p) * b.at2(p, j);
                }
                assert!((c.at2(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_values() {
        let x = Tensor::new([3], vec![0.0, -1000.0, 1.0]).unwrap();
        let s = sigmoid(&x);
        assert_eq!(s.data()[0], 0.5);
        assert!(s.data()[1] > 0.0 && s.data()[1] <= 1e-300);
        // 1 / (1 + e^-1)
        assert!((s.data()[2] - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert_eq!(sigmoid(&Tensor::full([1], 1000.0)).data()[0], 1.0);
    }

    #[test]
    fn softmax_analytic_and_mask() {
        let x = t2(&[&[0.0, 3f64.ln()], &[2.0, 2.0], &[1.0, f64::NEG_INFINITY]]);
        let s = softmax_rows(&x).unwrap();
        assert!((s.at2(0, 0) - 0.25).abs() < 1e-15);
        assert!((s.at2(0, 1) - 0.75).abs() < 1e-15);
        assert_eq!(s.at2(1, 0), 0.5);
        assert_eq!(s.at2(2, 0), 1.0);
        assert_eq!(s.at2(2, 1), 0.0);
    }

    #[test]
    fn softmax_rejects_fully_masked_row() {
        let x = t2(&[&[f64::NEG_INFINITY, f64::NEG_INFINITY]]);
        assert!(softmax_rows(&x).is_err());
    }

    #[test]
    fn dwconv_identity_and_constant() {
        let mut rng = rng();
        let x = Tensor::randn([4, 5, 3], 1.0, &mut rng);
        let mut center = Tensor::zeros([3, 3, 3]);
        for ch in 0..3 {
            center.data_mut()[(3 + 1) * 3 + ch] = 1.0;
        }
        let y = dwconv3x3(&x, &center, &Tensor::zeros([3])).unwrap();
        assert_eq!(y, x);

        let ones = Tensor::full([4, 4, 2], 1.0);
        let y = dwconv3x3(&ones, &Tensor::full([3, 3, 2], 1.0), &Tensor::full([2], 0.5)).unwrap();
        assert_eq!(y.data()[(4 + 1) * 2], 9.5);
        // corner sees a 2×2 window
        assert_eq!(y.data()[0], 4.5);
    }

    #[test]
    fn dwconv_matches_loop_oracle() {
        let mut rng = rng();
        let x = Tensor::randn([5, 5, 2], 1.0, &mut rng);
        let f = Tensor::randn([3, 3, 2], 1.0, &mut rng);
        let b = Tensor::randn([2], 1.0, &mut rng);
        let y = dwconv3x3(&x, &f, &b).unwrap();
        let get = |h: i32, w: i32, c: usize| -> f64 {
            if (0..5).contains(&h) && (0..5).contains(&w) {
                x.data()[(h as usize * 5 + w as usize) * 2 + c]
            } else {
                0.0
            }
        };
        for h in 0..5 {
            for w in 0..5 {
                for c in 0..2 {
                    let mut s = b.data()[c];
                    for i in 0..3 {
                        for j in 0..3 {
                            s += get(h + i - 1, w + j - 1, c) * f.data()[(i as usize * 3 + j as usize) * 2 + c];
                        }
                    }
                    let got = y.data()[(h as usize * 5 + w as usize) * 2 + c];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rmsnorm_cases() {
        let x = Tensor::full([1, 4], 3.0);
        let y = rmsnorm(&x, &Tensor::full([4], 1.0), 1e-300).unwrap();
        assert!(y.data().iter().all(|v| (v - 1.0).abs() < 1e-12));

        let z = rmsnorm(&Tensor::zeros([2, 4]), &Tensor::full([4], 1.0), 1e-6).unwrap();
        assert!(z.data().iter().all(|v| *v == 0.0));

        let mut rng = rng();
        let x = Tensor::randn([1, 7], 1.0, &mut rng);
        let g = Tensor::randn([7], 1.0, &mut rng);
        let y = rmsnorm(&x, &g, 1e-5).unwrap();
        let mut sq = 0.0;
        for v in x.data() {
            sq += v * v;
        }
        let denom = (sq / 7.0 + 1e-5).sqrt();
        for i in 0..7 {
            assert!((y.data()[i] - x.data()[i] / denom * g.data()[i]).abs() < 1e-12);
        }
        assert!(rmsnorm(&x, &g, 0.0).is_err());
    }

    #[test]
    fn conv2d_output_geometry() {
        let g1 = ConvGeometry { kernel: 9, stride: 8, pad: 4 };
        let g2 = ConvGeometry { kernel: 3, stride: 2, pad: 1 };
        for size in [16usize, 32, 224] {
            assert_eq!(g2.output_len(g1.output_len(size)), size / 16);
        }
    }

    #[test]
    fn conv2d_matches_direct_loop() {
        let mut rng = rng();
        let g = ConvGeometry { kernel: 3, stride: 2, pad: 1 };
        let x = Tensor::randn([5, 6, 2], 1.0, &mut rng);
        let w = Tensor::randn([3, 3, 2, 4], 1.0, &mut rng);
        let b = Tensor::randn([4], 1.0, &mut rng);
        let y = conv2d(&x, &w, &b, g).unwrap();
        assert_eq!(y.shape(), &[3, 3, 4]);
        for oy in 0..3 {
            for ox in 0..3 {
                for co in 0..4 {
                    let mut s = b.data()[co];
                    for i in 0..3 {
                        for j in 0..3 {
                            let iy = (oy * 2 + i) as isize - 1;
                            let ix = (ox * 2 + j) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= 5 || ix >= 6 {
                                continue;
                            }
                            for ci in 0..2 {
                                s += x.data()[(iy as usize * 6 + ix as usize) * 2 + ci]
                                    * w.data()[((i * 3 + j) * 2 + ci) * 4 + co];
                            }
                        }
                    }
                    assert!((y.data()[(oy * 3 + ox) * 4 + co] - s).abs() < 1e-12);
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
            prop::collection::vec(-3.0f64..3.0, rows * cols)
                .prop_map(move |d| Tensor::new([rows, cols], d).unwrap())
        }

        proptest! {
            #[test]
            fn matmul_is_associative(a in tensor(3, 4), b in tensor(4, 5), c in tensor(5, 2)) {
                let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
                let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
                let scale = left.max_abs().max(1.0);
                for (l, r) in left.data().iter().zip(right.data()) {
                    prop_assert!((l - r).abs() <= 1e-9 * scale);
                }
            }

            #[test]
            fn softmax_is_row_stochastic_and_shift_invariant(x in tensor(3, 6), shift in -50.0f64..50.0) {
                let s = softmax_rows(&x).unwrap();
                for r in 0..3 {
                    prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
                let shifted = softmax_rows(&x.map(|v| v + shift)).unwrap();
                for (a, b) in s.data().iter().zip(shifted.data()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
