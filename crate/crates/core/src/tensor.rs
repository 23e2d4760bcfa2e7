//! Dense row-major tensors and the raw kernels the autodiff tape is built on.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, Range, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Element type of a tensor. `f32` is used for training and serving, `f64`
/// for gradient checking.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Invalid(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        Self { shape, data }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [a, b] => Ok([a, b]),
            _ => Err(Error::shape(op, &self.shape, &[0, 0])),
        }
    }

    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [a, b, c, d] => Ok([a, b, c, d]),
            _ => Err(Error::shape(op, &self.shape, &[0, 0, 0, 0])),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().map(|v| v.abs()).fold(T::zero(), T::max)
    }

    /// Copies the sub-block `rows` x `cols` out of the first two dimensions;
    /// trailing dimensions are kept whole. `cols = None` keeps dimension 1 whole
    /// (and is the only option for rank-1 tensors).
    pub fn block(&self, rows: Range<usize>, cols: Option<Range<usize>>) -> Result<Self> {
        let (d0, d1, inner) = self.block_geometry(&rows, cols.as_ref())?;
        let cols = cols.unwrap_or(0..d1);
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        if shape.len() > 1 {
            shape[1] = cols.len();
        }
        let mut data = Vec::with_capacity(shape.iter().product());
        for r in rows {
            let base = (r * d1 + cols.start) * inner;
            data.extend_from_slice(&self.data[base..base + cols.len() * inner]);
        }
        debug_assert!(d0 > 0 || data.is_empty());
        Ok(Self { shape, data })
    }

    /// Adds `src` into the sub-block selected like [`Tensor::block`].
    pub fn add_block(&mut self, rows: Range<usize>, cols: Option<Range<usize>>, src: &Self) -> Result<()> {
        let (_, d1, inner) = self.block_geometry(&rows, cols.as_ref())?;
        let cols = cols.unwrap_or(0..d1);
        let width = cols.len() * inner;
        if src.numel() != rows.len() * width {
            return Err(Error::shape("add_block", &self.shape, &src.shape));
        }
        for (i, r) in rows.enumerate() {
            let base = (r * d1 + cols.start) * inner;
            for (a, &b) in self.data[base..base + width]
                .iter_mut()
                .zip(&src.data[i * width..(i + 1) * width])
            {
                *a += b;
            }
        }
        Ok(())
    }

    /// Writes `src` over the sub-block selected like [`Tensor::block`].
    pub fn set_block(&mut self, rows: Range<usize>, cols: Option<Range<usize>>, src: &Self) -> Result<()> {
        let (_, d1, inner) = self.block_geometry(&rows, cols.as_ref())?;
        let cols = cols.unwrap_or(0..d1);
        let width = cols.len() * inner;
        if src.numel() != rows.len() * width {
            return Err(Error::shape("set_block", &self.shape, &src.shape));
        }
        for (i, r) in rows.enumerate() {
            let base = (r * d1 + cols.start) * inner;
            self.data[base..base + width].copy_from_slice(&src.data[i * width..(i + 1) * width]);
        }
        Ok(())
    }

    fn block_geometry(&self, rows: &Range<usize>, cols: Option<&Range<usize>>) -> Result<(usize, usize, usize)> {
        let d0 = self.shape.first().copied().unwrap_or(0);
        let (d1, inner) = if self.shape.len() > 1 {
            (self.shape[1], self.shape[2..].iter().product())
        } else {
            (1, 1)
        };
        let bad_cols = match cols {
            Some(c) => self.shape.len() < 2 || c.end > d1 || c.start > c.end,
            None => false,
        };
        if rows.end > d0 || rows.start > rows.end || bad_cols {
            return Err(Error::Invalid(format!(
                "block {rows:?} x {cols:?} out of bounds for shape {:?}",
                self.shape
            )));
        }
        Ok((d0, d1, inner))
    }
}

/// Geometry of a 2-D convolution over NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize, groups: usize) -> Result<Self> {
        let (&[b, ci, h, w], &[co, kci, kh, kw]) = (input, kernel) else {
            return Err(Error::shape("conv2d", input, kernel));
        };
        if stride == 0 {
            return Err(Error::Invalid("conv2d: stride must be >= 1".into()));
        }
        if groups == 0 || ci % groups != 0 || co % groups != 0 || kci * groups != ci {
            return Err(Error::shape("conv2d", input, kernel));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape("conv2d", input, kernel));
        }
        Ok(Self {
            batch: b,
            in_channels: ci,
            height: h,
            width: w,
            out_channels: co,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            groups,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h(), self.out_w()]
    }

    fn group_in(&self) -> usize {
        self.in_channels / self.groups
    }

    fn group_out(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Rows of one group's im2col matrix.
    fn col_rows(&self) -> usize {
        self.group_in() * self.kernel_h * self.kernel_w
    }

    /// Valid output positions `[lo, hi)` along one axis for kernel offset `k`.
    fn valid(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let hi = if in_len + p > k {
            ((in_len + p - k - 1) / s + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn im2col<T: Scalar>(&self, plane: &[T], group: usize, cols: &mut [T]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let hw = self.height * self.width;
        let npix = oh * ow;
        cols.fill(T::zero());
        for icl in 0..self.group_in() {
            let ic = group * self.group_in() + icl;
            let src = &plane[ic * hw..(ic + 1) * hw];
            for kh in 0..self.kernel_h {
                let (h0, h1) = self.valid(kh, self.height, oh);
                for kw in 0..self.kernel_w {
                    let (w0, w1) = self.valid(kw, self.width, ow);
                    let row = (icl * self.kernel_h + kh) * self.kernel_w + kw;
                    let dst = &mut cols[row * npix..(row + 1) * npix];
                    for y in h0..h1 {
                        let iy = y * self.stride + kh - self.padding;
                        let srow = &src[iy * self.width..(iy + 1) * self.width];
                        let drow = &mut dst[y * ow..(y + 1) * ow];
                        for x in w0..w1 {
                            drow[x] = srow[x * self.stride + kw - self.padding];
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], group: usize, plane: &mut [T]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let hw = self.height * self.width;
        let npix = oh * ow;
        for icl in 0..self.group_in() {
            let ic = group * self.group_in() + icl;
            let dst = &mut plane[ic * hw..(ic + 1) * hw];
            for kh in 0..self.kernel_h {
                let (h0, h1) = self.valid(kh, self.height, oh);
                for kw in 0..self.kernel_w {
                    let (w0, w1) = self.valid(kw, self.width, ow);
                    let row = (icl * self.kernel_h + kh) * self.kernel_w + kw;
                    let src = &cols[row * npix..(row + 1) * npix];
                    for y in h0..h1 {
                        let iy = y * self.stride + kh - self.padding;
                        for x in w0..w1 {
                            dst[iy * self.width + x * self.stride + kw - self.padding] += src[y * ow + x];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m x n] += a[m x k] * b[k x n]`
pub(crate) fn gemm_acc<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m x n] += a[m x k] * b[n x k]^T`
pub(crate) fn gemm_nt_acc<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[m x n] += a[k x m]^T * b[k x n]`
pub(crate) fn gemm_tn_acc<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding, groups)?;
    let npix = g.out_h() * g.out_w();
    let krows = g.col_rows();
    let mut out = Tensor::zeros(g.output_shape());
    let mut cols = vec![T::zero(); krows * npix];
    let in_plane = g.in_channels * g.height * g.width;
    let out_plane = g.out_channels * npix;
    for b in 0..g.batch {
        let x = &input.data()[b * in_plane..(b + 1) * in_plane];
        let y = &mut out.data_mut()[b * out_plane..(b + 1) * out_plane];
        for grp in 0..g.groups {
            g.im2col(x, grp, &mut cols);
            let co = g.group_out();
            let w = &kernel.data()[grp * co * krows..(grp + 1) * co * krows];
            gemm_acc(co, npix, krows, w, &cols, &mut y[grp * co * npix..(grp + 1) * co * npix]);
        }
    }
    Ok(out)
}

/// Gradients of a convolution with respect to its input and kernel.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding, groups)?;
    if grad_out.shape() != g.output_shape() {
        return Err(Error::shape("conv2d backward", grad_out.shape(), &g.output_shape()));
    }
    let npix = g.out_h() * g.out_w();
    let krows = g.col_rows();
    let co = g.group_out();
    let in_plane = g.in_channels * g.height * g.width;
    let out_plane = g.out_channels * npix;
    let mut gx = need_input.then(|| Tensor::zeros(input.shape().to_vec()));
    let mut gw = need_kernel.then(|| Tensor::zeros(kernel.shape().to_vec()));
    let mut cols = vec![T::zero(); krows * npix];
    for b in 0..g.batch {
        let x = &input.data()[b * in_plane..(b + 1) * in_plane];
        let dy = &grad_out.data()[b * out_plane..(b + 1) * out_plane];
        for grp in 0..g.groups {
            let dyg = &dy[grp * co * npix..(grp + 1) * co * npix];
            if let Some(gw) = gw.as_mut() {
                g.im2col(x, grp, &mut cols);
                let dw = &mut gw.data_mut()[grp * co * krows..(grp + 1) * co * krows];
                gemm_nt_acc(co, krows, npix, dyg, &cols, dw);
            }
            if let Some(gx) = gx.as_mut() {
                cols.fill(T::zero());
                let w = &kernel.data()[grp * co * krows..(grp + 1) * co * krows];
                gemm_tn_acc(krows, npix, co, w, dyg, &mut cols);
                g.col2im_add(&cols, grp, &mut gx.data_mut()[b * in_plane..(b + 1) * in_plane]);
            }
        }
    }
    Ok((gx, gw))
}
