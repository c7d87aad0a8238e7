//! Convolutions as im2col/col2im plus matrix products.
//!
//! candle's direct CPU convolution kernels are slow in the backward pass
//! (they route through a naive transposed convolution). Here both directions
//! reduce to two adjoint linear maps written as plain loops, and the heavy
//! lifting is a batched matmul. Non-CPU devices use candle's own kernels.

use candle::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

use crate::{Error, Result};

/// Sliding-window geometry: an image `[n, c, h, w]` scanned by a `k x k`
/// window with the given stride and zero padding gives a `rows x cols` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Window {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    rows: usize,
    cols: usize,
}

impl Window {
    fn new(n: usize, c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        if stride == 0 || k == 0 || hp < k || wp < k {
            return Err(Error::shape(format!(
                "window {k}x{k} stride {stride} pad {pad} does not fit a {h}x{w} image"
            )));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            k,
            stride,
            pad,
            rows: (hp - k) / stride + 1,
            cols: (wp - k) / stride + 1,
        })
    }

    fn image_shape(&self) -> Shape {
        Shape::from((self.n, self.c, self.h, self.w))
    }

    fn column_shape(&self) -> Shape {
        Shape::from((self.n, self.c * self.k * self.k, self.rows * self.cols))
    }

    /// Calls `f(image_offset, column_offset)` for every in-bounds pair.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        let grid = self.rows * self.cols;
        for b in 0..self.n {
            for ch in 0..self.c {
                let img = (b * self.c + ch) * self.h * self.w;
                for i in 0..k {
                    for j in 0..k {
                        let col = ((b * self.c + ch) * k * k + i * k + j) * grid;
                        for r in 0..self.rows {
                            let y = r as isize * s + i as isize - p;
                            if y < 0 || y >= self.h as isize {
                                continue;
                            }
                            let img_row = img + y as usize * self.w;
                            let col_row = col + r * self.cols;
                            for q in 0..self.cols {
                                let x = q as isize * s + j as isize - p;
                                if x >= 0 && x < self.w as isize {
                                    f(img_row + x as usize, col_row + q);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T: WithDType>(data: &'a [T], layout: &Layout) -> candle::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => Err(candle::Error::Msg("im2col expects a contiguous input".into())),
    }
}

fn check(layout: &Layout, expected: &Shape, what: &str) -> candle::Result<()> {
    if layout.shape() != expected {
        return Err(candle::Error::Msg(format!("{what}: got {:?}, expected {:?}", layout.shape(), expected)));
    }
    Ok(())
}

struct Im2Col(Window);
struct Col2Im(Window);

fn im2col<T: WithDType>(win: &Window, img: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); win.column_shape().elem_count()];
    win.for_each(|i, c| out[c] = img[i]);
    out
}

fn col2im<T: WithDType>(win: &Window, cols: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); win.image_shape().elem_count()];
    win.for_each(|i, c| out[i] += cols[c]);
    out
}

macro_rules! dispatch {
    ($storage:expr, $layout:expr, $f:ident, $win:expr) => {
        match $storage {
            CpuStorage::F32(d) => CpuStorage::F32($f($win, contiguous(d, $layout)?)),
            CpuStorage::F64(d) => CpuStorage::F64($f($win, contiguous(d, $layout)?)),
            other => {
                return Err(candle::Error::UnsupportedDTypeForOp(
                    candle::backend::BackendStorage::dtype(other),
                    "im2col",
                ))
            }
        }
    };
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle::Result<(CpuStorage, Shape)> {
        check(layout, &self.0.image_shape(), "im2col input")?;
        Ok((dispatch!(storage, layout, im2col, &self.0), self.0.column_shape()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle::Result<(CpuStorage, Shape)> {
        check(layout, &self.0.column_shape(), "col2im input")?;
        Ok((dispatch!(storage, layout, col2im, &self.0), self.0.image_shape()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Im2Col(self.0))?))
    }
}

/// 2-d convolution without bias; `weight` is `[c_out, c_in, k, k]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (c_out, c_in, k, k2) = weight.dims4()?;
    if c_in != c || k != k2 {
        return Err(Error::shape(format!("conv of {:?} with kernel {:?}", x.dims(), weight.dims())));
    }
    if !x.device().is_cpu() {
        return Ok(x.conv2d(weight, padding, stride, 1, 1)?);
    }
    let win = Window::new(n, c, h, w, k, stride, padding)?;
    let cols = x.contiguous()?.apply_op1(Im2Col(win))?;
    let out = weight.reshape((c_out, c * k * k))?.broadcast_matmul(&cols)?;
    Ok(out.reshape((n, c_out, win.rows, win.cols))?)
}

/// Transposed convolution without bias; `weight` is `[c_in, c_out, k, k]`.
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, c_in, h, w) = x.dims4()?;
    let (wc_in, c_out, k, k2) = weight.dims4()?;
    let full = |len: usize| (len - 1) * stride + k;
    if wc_in != c_in || k != k2 || stride == 0 || h == 0 || w == 0 || 2 * padding >= full(h).min(full(w)) {
        return Err(Error::shape(format!(
            "transposed conv of {:?} with kernel {:?}, stride {stride}, padding {padding}",
            x.dims(),
            weight.dims()
        )));
    }
    if !x.device().is_cpu() {
        return Ok(x.conv_transpose2d(weight, padding, 0, stride, 1)?);
    }
    let (ho, wo) = (full(h) - 2 * padding, full(w) - 2 * padding);
    let win = Window::new(n, c_out, ho, wo, k, stride, padding)?;
    debug_assert_eq!((win.rows, win.cols), (h, w));
    let kernel = weight.reshape((c_in, c_out * k * k))?.t()?;
    let cols = kernel.broadcast_matmul(&x.reshape((n, c_in, h * w))?)?;
    Ok(cols.contiguous()?.apply_op1(Col2Im(win))?)
}
