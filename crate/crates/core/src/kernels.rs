//! Slice-level building blocks shared by the 64-bit tensor API and the
//! 32-bit benchmark path.
//!
//! Storage is generic over [`Element`]; every accumulation happens in `f64`.

/// Storage scalar. Values are widened to `f64` before any arithmetic.
pub trait Element: Copy + Default + Send + Sync + std::fmt::Debug + 'static {
    const BYTES: usize;
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Element for f64 {
    const BYTES: usize = 8;
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
}

impl Element for f32 {
    const BYTES: usize = 4;
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

/// Read-only row-major matrix view with an arbitrary row stride, used to
/// address one head's column slice of a wider projection without copying.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, E> {
    data: &'a [E],
    rows: usize,
    cols: usize,
    stride: usize,
    offset: usize,
}

impl<'a, E: Element> MatRef<'a, E> {
    pub fn new(data: &'a [E], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "MatRef: data length");
        Self {
            data,
            rows,
            cols,
            stride: cols,
            offset: 0,
        }
    }

    /// View of columns `start..start + width`.
    pub fn cols_slice(self, start: usize, width: usize) -> Self {
        assert!(start + width <= self.cols, "MatRef: column slice out of range");
        Self {
            cols: width,
            offset: self.offset + start,
            ..self
        }
    }

    #[inline(always)]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline(always)]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline(always)]
    pub fn row(&self, r: usize) -> &'a [E] {
        let start = self.offset + r * self.stride;
        &self.data[start..start + self.cols]
    }

    #[inline(always)]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[self.offset + r * self.stride + c].to_f64()
    }
}

/// Mutable `f64` matrix view with row stride.
#[derive(Debug)]
pub struct MatMut<'a> {
    data: &'a mut [f64],
    rows: usize,
    cols: usize,
    stride: usize,
    offset: usize,
}

impl<'a> MatMut<'a> {
    pub fn new(data: &'a mut [f64], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "MatMut: data length");
        Self {
            data,
            rows,
            cols,
            stride: cols,
            offset: 0,
        }
    }

    pub fn cols_slice(self, start: usize, width: usize) -> Self {
        assert!(start + width <= self.cols, "MatMut: column slice out of range");
        Self {
            cols: width,
            offset: self.offset + start,
            ..self
        }
    }

    /// Reborrow as a shorter-lived view.
    pub fn reborrow(&mut self) -> MatMut<'_> {
        MatMut {
            data: self.data,
            rows: self.rows,
            cols: self.cols,
            stride: self.stride,
            offset: self.offset,
        }
    }

    #[inline(always)]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline(always)]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline(always)]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let start = self.offset + r * self.stride;
        &mut self.data[start..start + self.cols]
    }
}

/// `c += a · b` with `c` a contiguous `a.rows() × b.cols()` buffer.
pub fn gemm_acc<E: Element>(a: MatRef<'_, E>, b: MatRef<'_, E>, c: &mut [f64]) {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    assert_eq!(k, b.rows(), "gemm: inner dimension");
    assert_eq!(c.len(), m * n, "gemm: output length");
    for i in 0..m {
        let a_row = a.row(i);
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let a_ip = a_ip.to_f64();
            if a_ip == 0.0 {
                continue;
            }
            for (c_j, &b_pj) in c_row.iter_mut().zip(b.row(p)) {
                *c_j += a_ip * b_pj.to_f64();
            }
        }
    }
}

/// `a · b` materialized in the storage type of the inputs.
pub fn gemm<E: Element>(a: MatRef<'_, E>, b: MatRef<'_, E>) -> Vec<E> {
    let mut acc = vec![0.0; a.rows() * b.cols()];
    gemm_acc(a, b, &mut acc);
    acc.into_iter().map(E::from_f64).collect()
}

/// Row-major transpose of a contiguous `rows × cols` buffer.
pub fn transpose<E: Element>(data: &[E], rows: usize, cols: usize) -> Vec<E> {
    assert_eq!(data.len(), rows * cols);
    let mut out = vec![E::default(); data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// `ln(sigmoid(z))`, finite for every finite `z`.
#[inline]
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Logistic function clamped below at the smallest normal `f64`, so the
/// result stays strictly positive even where `exp` underflows.
#[inline]
pub fn sigmoid_scalar(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.max(f64::MIN_POSITIVE)
}

/// Forget-gate value `sigmoid(z)^(1/tau)`, evaluated in log space.
#[inline]
pub fn gate_scalar(z: f64, tau: f64) -> f64 {
    (log_sigmoid(z) / tau).exp().max(f64::MIN_POSITIVE)
}
