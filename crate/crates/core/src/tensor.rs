//! Dense tensors and the value-level kernels shared by the autodiff tape and
//! by the gradient-free paths (head evaluation, inference).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element type. Implemented for `f32` (training) and `f64`
/// (gradient checks, bit-exact reproducibility).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    /// `c = alpha * a · b + beta * c` for row/column-strided matrices.
    ///
    /// `a` is m×k, `b` is k×n, `c` is m×n.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, strides: (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * strides.0 + (cols - 1) as isize * strides.1;
    assert!(
        strides.0 >= 0 && strides.1 >= 0 && (last as usize) < len,
        "gemm operand out of bounds"
    );
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Real for $t {
            const DTYPE: &'static str = $name;
            const BYTES: usize = std::mem::size_of::<$t>();

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, c_strides);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every operand extent was bounds-checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(bytes);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

/// Row-major dense array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::c(v)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self::full(&[1], v)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::c(v.f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Dimensions of a 4-D tensor as `(batch, channels, height, width)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::Shape(format!("expected 4-D tensor, got {:?}", self.shape))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!("expected 2-D tensor, got {:?}", self.shape))),
        }
    }
}

/// Broadcast layout of a binary elementwise op. The lower-rank operand is
/// padded with trailing unit dimensions, so `B×C` lines up against
/// `B×C×H×W` and a `[1]` scalar against anything.
#[derive(Debug, Clone)]
pub(crate) struct Broadcast {
    pub out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

fn padded_strides(shape: &[usize], rank: usize) -> (Vec<usize>, Vec<usize>) {
    let mut dims = shape.to_vec();
    dims.resize(rank, 1);
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        strides[i] = if dims[i] == 1 { 0 } else { acc };
        acc *= dims[i];
    }
    (dims, strides)
}

impl Broadcast {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let (da, sa) = padded_strides(a, rank);
        let (db, sb) = padded_strides(b, rank);
        let mut out = Vec::with_capacity(rank);
        for i in 0..rank {
            let d = if da[i] == db[i] || db[i] == 1 {
                da[i]
            } else if da[i] == 1 {
                db[i]
            } else {
                return Err(Error::Shape(format!(
                    "shapes {a:?} and {b:?} do not broadcast"
                )));
            };
            out.push(d);
        }
        Ok(Self {
            out_shape: out,
            a_strides: sa,
            b_strides: sb,
        })
    }

    pub fn same(a: &[usize], b: &[usize]) -> bool {
        a == b
    }

    /// Visits every output element with the flat source offsets of `a`, `b`.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.out_shape.len();
        let total: usize = self.out_shape.iter().product();
        let mut idx = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        for o in 0..total {
            f(o, ia, ib);
            for d in (0..rank).rev() {
                idx[d] += 1;
                ia += self.a_strides[d];
                ib += self.b_strides[d];
                if idx[d] < self.out_shape[d] {
                    break;
                }
                ia -= self.a_strides[d] * idx[d];
                ib -= self.b_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    #[inline]
    fn apply<T: Real>(self, x: T, y: T) -> T {
        match self {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        }
    }
}

pub fn binary<T: Real>(kind: BinaryKind, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if Broadcast::same(&a.shape, &b.shape) {
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| kind.apply(x, y))
            .collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let bc = Broadcast::new(&a.shape, &b.shape)?;
    let mut out = Tensor::zeros(&bc.out_shape);
    bc.for_each(|o, ia, ib| out.data[o] = kind.apply(a.data[ia], b.data[ib]));
    Ok(out)
}

/// `x · w + bias` with `x: B×Cin`, `w: Cin×Cout`, `bias: Cout`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (batch, cin) = x.dims2()?;
    let (win, cout) = w.dims2()?;
    if cin != win {
        return Err(Error::Shape(format!(
            "linear: input width {cin} vs weight rows {win}"
        )));
    }
    let mut out = Tensor::zeros(&[batch, cout]);
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::Shape(format!("linear: bias {} vs {cout}", b.len())));
        }
        for row in out.data.chunks_mut(cout) {
            row.copy_from_slice(&b.data);
        }
    }
    T::gemm(
        batch,
        cin,
        cout,
        &x.data,
        (cin as isize, 1),
        &w.data,
        (cout as isize, 1),
        T::one(),
        &mut out.data,
        (cout as isize, 1),
    );
    Ok(out)
}

/// Geometry of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], kernels: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (batch, cin, h, w) = match *x {
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(Error::Shape(format!("conv2d input must be 4-D, got {x:?}"))),
        };
        let (cout, kin, kh, kw) = match *kernels {
            [a, b, c, d] => (a, b, c, d),
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d kernels must be 4-D, got {kernels:?}"
                )))
            }
        };
        if kin != cin {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input {cin}, kernels {kin}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Shape(format!("conv2d kernel must be odd and square, got {kh}×{kw}")));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d stride must be positive".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape("conv2d kernel larger than padded input".into()));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Output rows per tile, sized so one unfolded tile stays cache resident.
    fn tile_rows(&self) -> usize {
        let target_cols = (32 * 1024 / self.col_rows()).clamp(64, 4096);
        (target_cols / self.ow).clamp(1, self.oh)
    }

    /// Output columns `[lo, hi)` whose input column `ox·stride + kx − pad`
    /// falls inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let mut lo = 0;
        while lo < self.ow && (lo * self.stride + kx) < self.pad {
            lo += 1;
        }
        let mut hi = self.ow;
        while hi > lo && ((hi - 1) * self.stride + kx) >= self.pad + self.w {
            hi -= 1;
        }
        (lo, hi)
    }

    /// Unfolds output rows `oy0..oy1` of sample `plane` (`cin×h×w`) into a
    /// `(cin·k·k) × ((oy1−oy0)·ow)` matrix.
    fn im2col_tile<T: Real>(&self, plane: &[T], oy0: usize, oy1: usize, col: &mut Vec<T>) {
        let tc = (oy1 - oy0) * self.ow;
        let need = self.col_rows() * tc;
        if col.len() < need {
            col.resize(need, T::zero());
        }
        for c in 0..self.cin {
            let src = &plane[c * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let (lo, hi) = self.valid_cols(kx);
                    let dst = &mut col[row * tc..(row + 1) * tc];
                    for oy in oy0..oy1 {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let drow = &mut dst[(oy - oy0) * self.ow..][..self.ow];
                        if lo >= hi || iy < 0 || iy >= self.h as isize {
                            drow.fill(T::zero());
                            continue;
                        }
                        drow[..lo].fill(T::zero());
                        drow[hi..].fill(T::zero());
                        let ix0 = lo * self.stride + kx - self.pad;
                        let srow = &src[iy as usize * self.w..][..self.w];
                        let drow = &mut drow[lo..hi];
                        if self.stride == 1 {
                            drow.copy_from_slice(&srow[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (j, d) in drow.iter_mut().enumerate() {
                                *d = srow[ix0 + j * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_tile<T: Real>(&self, col: &[T], oy0: usize, oy1: usize, plane: &mut [T]) {
        let tc = (oy1 - oy0) * self.ow;
        for c in 0..self.cin {
            let dst = &mut plane[c * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let (lo, hi) = self.valid_cols(kx);
                    if lo >= hi {
                        continue;
                    }
                    let ix0 = lo * self.stride + kx - self.pad;
                    let src = &col[row * tc..(row + 1) * tc];
                    for oy in oy0..oy1 {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * self.w..][..self.w];
                        let base = (oy - oy0) * self.ow;
                        let srow = &src[base + lo..base + hi];
                        if self.stride == 1 {
                            for (d, &v) in drow[ix0..ix0 + (hi - lo)].iter_mut().zip(srow) {
                                *d += v;
                            }
                        } else {
                            for (j, &v) in srow.iter().enumerate() {
                                drow[ix0 + j * self.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn tiles(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let step = self.tile_rows();
        (0..self.batch).flat_map(move |b| {
            (0..self.oh)
                .step_by(step)
                .map(move |oy0| (b, oy0, (oy0 + step).min(self.oh)))
        })
    }
}

/// Cross-correlation (no kernel flip) of `x: B×Cin×H×W` with
/// `kernels: Cout×Cin×k×k`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(&x.shape, &kernels.shape, stride, pad)?;
    if let Some(b) = bias {
        if b.len() != g.cout {
            return Err(Error::Shape(format!("conv2d bias {} vs {}", b.len(), g.cout)));
        }
    }
    let rows = g.col_rows();
    let ohw = g.oh * g.ow;
    let in_plane = g.cin * g.h * g.w;
    let mut out = Tensor::zeros(&[g.batch, g.cout, g.oh, g.ow]);
    let mut col = Vec::new();
    for (b, oy0, oy1) in g.tiles() {
        g.im2col_tile(&x.data[b * in_plane..(b + 1) * in_plane], oy0, oy1, &mut col);
        let tc = (oy1 - oy0) * g.ow;
        let dst = &mut out.data[b * g.cout * ohw + oy0 * g.ow..];
        T::gemm(
            g.cout,
            rows,
            tc,
            &kernels.data,
            (rows as isize, 1),
            &col,
            (tc as isize, 1),
            T::zero(),
            dst,
            (ohw as isize, 1),
        );
    }
    if let Some(bias) = bias {
        for (i, plane) in out.data.chunks_mut(ohw).enumerate() {
            let bv = bias.data[i % g.cout];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(out)
}

/// Gradients of `conv2d` with respect to input, kernels and bias.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(&x.shape, &kernels.shape, stride, pad)?;
    let rows = g.col_rows();
    let ohw = g.oh * g.ow;
    let in_plane = g.cin * g.h * g.w;
    let mut dbias = Tensor::zeros(&[g.cout]);
    for (i, plane) in grad_out.data.chunks(ohw).enumerate() {
        dbias.data[i % g.cout] += plane.iter().copied().sum::<T>();
    }
    let mut dk = Tensor::zeros(&kernels.shape);
    let mut dx = Tensor::zeros(&x.shape);
    let mut col = Vec::new();
    let mut dcol = Vec::new();
    for (b, oy0, oy1) in g.tiles() {
        let tc = (oy1 - oy0) * g.ow;
        let go = &grad_out.data[b * g.cout * ohw + oy0 * g.ow..];
        g.im2col_tile(&x.data[b * in_plane..(b + 1) * in_plane], oy0, oy1, &mut col);
        // dK += gO · colᵀ
        T::gemm(
            g.cout,
            tc,
            rows,
            go,
            (ohw as isize, 1),
            &col,
            (1, tc as isize),
            T::one(),
            &mut dk.data,
            (rows as isize, 1),
        );
        // dCol = Kᵀ · gO
        if dcol.len() < rows * tc {
            dcol.resize(rows * tc, T::zero());
        }
        T::gemm(
            rows,
            g.cout,
            tc,
            &kernels.data,
            (1, rows as isize),
            go,
            (ohw as isize, 1),
            T::zero(),
            &mut dcol,
            (tc as isize, 1),
        );
        g.col2im_tile(&dcol, oy0, oy1, &mut dx.data[b * in_plane..(b + 1) * in_plane]);
    }
    Ok((dx, dk, dbias))
}

/// Applies `w: C×N`, `bias: N` to the channel vector of every pixel of
/// `x: B×C×H×W`, giving `B×N×H×W`.
pub fn per_pixel_linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, c, h, wd) = x.dims4()?;
    let (wc, n) = w.dims2()?;
    if wc != c {
        return Err(Error::Shape(format!(
            "per-pixel linear: feature channels {c} vs weight rows {wc}"
        )));
    }
    if bias.len() != n {
        return Err(Error::Shape(format!("per-pixel linear: bias {} vs {n}", bias.len())));
    }
    let hw = h * wd;
    let mut out = Tensor::zeros(&[batch, n, h, wd]);
    for b in 0..batch {
        let dst = &mut out.data[b * n * hw..(b + 1) * n * hw];
        for (j, row) in dst.chunks_mut(hw).enumerate() {
            row.fill(bias.data[j]);
        }
        // out[b] (N×HW) += wᵀ (N×C) · x[b] (C×HW)
        T::gemm(
            n,
            c,
            hw,
            &w.data,
            (1, n as isize),
            &x.data[b * c * hw..(b + 1) * c * hw],
            (hw as isize, 1),
            T::one(),
            dst,
            (hw as isize, 1),
        );
    }
    Ok(out)
}

pub fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Mean over the spatial plane of every `(sample, channel)`: `B×C×H×W → B×C`.
pub fn global_average_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let hw = h * w;
    let inv = T::one() / T::c(hw as f64);
    let data = x.data.chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Tensor::new(&[b, c], data)
}

/// 2×2 max pooling; returns the pooled tensor and the flat argmax per output.
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max-pool needs even spatial size, got {h}×{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let mut arg = vec![0usize; out.len()];
    for p in 0..b * c {
        let base = p * h * w;
        for oy in 0..oh {
            let r0 = base + 2 * oy * w;
            let (top, bot) = (&x.data[r0..r0 + w], &x.data[r0 + w..r0 + 2 * w]);
            let o0 = (p * oh + oy) * ow;
            for (ox, (o, a)) in out.data[o0..o0 + ow].iter_mut().zip(&mut arg[o0..o0 + ow]).enumerate() {
                let (mut best, mut bv) = (2 * ox, top[2 * ox]);
                if top[2 * ox + 1] > bv {
                    (best, bv) = (2 * ox + 1, top[2 * ox + 1]);
                }
                if bot[2 * ox] > bv {
                    (best, bv) = (w + 2 * ox, bot[2 * ox]);
                }
                if bot[2 * ox + 1] > bv {
                    (best, bv) = (w + 2 * ox + 1, bot[2 * ox + 1]);
                }
                *o = bv;
                *a = r0 + best;
            }
        }
    }
    Ok((out, arg))
}

/// 2× nearest-neighbour upsampling.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    for (src, dst) in x.data.chunks(w).zip(out.data.chunks_mut(2 * ow)) {
        let (first, second) = dst.split_at_mut(ow);
        for (pair, &v) in first.chunks_mut(2).zip(src) {
            pair.fill(v);
        }
        second.copy_from_slice(first);
    }
    Ok(out)
}

/// Concatenates along axis 1 (channels for `B×C×…`, features for `B×C`).
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    let batch = first.shape[0];
    let tail: Vec<usize> = first.shape[2..].to_vec();
    let mut total_c = 0;
    for p in parts {
        if p.shape.len() != first.shape.len() || p.shape[0] != batch || p.shape[2..] != tail[..] {
            return Err(Error::Shape(format!(
                "concat mismatch: {:?} vs {:?}",
                first.shape, p.shape
            )));
        }
        total_c += p.shape[1];
    }
    let inner: usize = tail.iter().product();
    let mut shape = vec![batch, total_c];
    shape.extend_from_slice(&tail);
    let mut data = Vec::with_capacity(batch * total_c * inner);
    for b in 0..batch {
        for p in parts {
            let chunk = p.shape[1] * inner;
            data.extend_from_slice(&p.data[b * chunk..(b + 1) * chunk]);
        }
    }
    Tensor::new(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_scalar_mul() {
        let a = Tensor::<f64>::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[3], &[2.0, 2.0, 2.0]).unwrap();
        assert_eq!(binary(BinaryKind::Mul, &a, &b).unwrap().to_f64(), vec![2.0, 4.0, 6.0]);
        let s = Tensor::<f64>::scalar(2.0);
        assert_eq!(binary(BinaryKind::Mul, &a, &s).unwrap().to_f64(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn broadcast_per_channel() {
        let f = Tensor::<f64>::ones(&[2, 3, 2, 2]);
        let g = Tensor::<f64>::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let out = binary(BinaryKind::Mul, &f, &g).unwrap();
        assert_eq!(out.shape(), &[2, 3, 2, 2]);
        assert_eq!(out.data()[4], 2.0);
        assert_eq!(out.data()[23], 6.0);
        let bad = Tensor::<f64>::ones(&[2, 4]);
        assert!(binary(BinaryKind::Add, &f, &bad).is_err());
    }

    #[test]
    fn linear_selects_row() {
        let x = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 0.0]).unwrap();
        let w = Tensor::<f64>::from_f64(&[2, 2], &[2.0, 3.0, 4.0, 5.0]).unwrap();
        let b = Tensor::<f64>::zeros(&[2]);
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().to_f64(), vec![2.0, 3.0]);
    }

    #[test]
    fn conv_identity_and_average() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
        let k = Tensor::<f64>::ones(&[1, 1, 1, 1]);
        assert_eq!(conv2d(&x, &k, None, 1, 0).unwrap(), x);

        let c = Tensor::<f64>::full(&[1, 1, 5, 5], 0.7);
        let avg = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0 / 9.0);
        let y = conv2d(&c, &avg, None, 1, 1).unwrap();
        for yy in 1..4 {
            for xx in 1..4 {
                assert!((y.data()[yy * 5 + xx] - 0.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
        assert!(conv2d(&x, &k, None, 1, 1).is_err());
    }

    #[test]
    fn pool_up_roundtrip() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[0.5, 1.0, 2.0, 0.0]).unwrap();
        let up = upsample2(&x).unwrap();
        assert_eq!(up.shape(), &[1, 1, 4, 4]);
        assert_eq!(max_pool2(&up).unwrap().0, x);
        assert!(max_pool2(&Tensor::<f64>::zeros(&[1, 1, 3, 4])).is_err());
    }
}
