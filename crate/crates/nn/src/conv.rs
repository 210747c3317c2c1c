//! im2col based 2-D convolution kernels over contiguous NCHW buffers.

use ndarray::{Array2, ArrayD, ArrayView2, Axis, IxDyn};

use crate::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn cols(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }
}

/// Output columns `[lo, hi)` whose input column `ox*stride + k - pad` lies inside `[0, width)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, width: usize, out: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if width + pad > k {
        ((width + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfolds `x` into a `[C*kh*kw, B*Ho*Wo]` patch matrix.
pub fn im2col<T: Float>(x: &[T], g: &ConvGeom) -> Array2<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = g.height * g.width;
    let ncols = g.cols();
    let mut out = vec![T::zero(); g.rows() * ncols];
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst_row = &mut out[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let src = &x[(b * g.in_channels + c) * plane..][..plane];
                    let dst = &mut dst_row[b * ho * wo..(b + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..][..g.width];
                        let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                        let (lo, hi) = valid_range(kj, g.pad, g.stride, g.width, wo);
                        let start = lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            dst_row[lo..hi].copy_from_slice(&src_row[start..start + (hi - lo)]);
                        } else {
                            for (d, &v) in dst_row[lo..hi]
                                .iter_mut()
                                .zip(src_row[start..].iter().step_by(g.stride))
                            {
                                *d = v;
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((g.rows(), ncols), out).expect("im2col shape")
}

/// Folds a patch matrix back into an NCHW buffer, summing overlaps.
pub fn col2im<T: Float>(cols: ArrayView2<'_, T>, g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = g.height * g.width;
    let cols = cols.as_standard_layout();
    let cols = cols.as_slice().expect("standard layout");
    let ncols = g.cols();
    let mut x = vec![T::zero(); g.batch * g.in_channels * plane];
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let dst = &mut x[(b * g.in_channels + c) * plane..][..plane];
                    let src = &src_row[b * ho * wo..(b + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.width..][..g.width];
                        let (lo, hi) = valid_range(kj, g.pad, g.stride, g.width, wo);
                        let start = lo * g.stride + kj - g.pad;
                        let src_row = &src[oy * wo + lo..oy * wo + hi];
                        for (d, &v) in dst_row[start..]
                            .iter_mut()
                            .step_by(g.stride)
                            .zip(src_row)
                        {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
    x
}

fn weight_matrix<T: Float>(w: &ArrayD<T>) -> ArrayView2<'_, T> {
    let co = w.shape()[0];
    let rest = w.len() / co;
    w.view()
        .into_shape_with_order((co, rest))
        .expect("contiguous weight")
}

/// `[Co, B*Ho*Wo]` -> `[B, Co, Ho, Wo]`.
fn channel_major_to_nchw<T: Float>(m: Array2<T>, b: usize, ho: usize, wo: usize) -> ArrayD<T> {
    let co = m.nrows();
    m.into_shape_with_order((co, b, ho, wo))
        .expect("conv output shape")
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
        .into_dyn()
}

/// `[B, Co, Ho, Wo]` -> `[Co, B*Ho*Wo]`.
fn nchw_to_channel_major<T: Float>(y: &ArrayD<T>) -> Array2<T> {
    let s = y.shape();
    let (b, co, ho, wo) = (s[0], s[1], s[2], s[3]);
    y.view()
        .into_shape_with_order((b, co, ho * wo))
        .expect("nchw")
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((co, b * ho * wo))
        .expect("channel major")
}

pub fn geometry(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> ConvGeom {
    ConvGeom {
        batch: x_shape[0],
        in_channels: x_shape[1],
        height: x_shape[2],
        width: x_shape[3],
        kernel_h: w_shape[2],
        kernel_w: w_shape[3],
        stride,
        pad,
    }
}

/// Spatial size above which samples are processed one at a time, keeping the
/// patch matrix cache resident and avoiding the batch permutes.
const PER_SAMPLE_MIN_PIXELS: usize = 256;

fn single(g: &ConvGeom) -> ConvGeom {
    ConvGeom { batch: 1, ..*g }
}

pub fn conv2d_forward<T: Float>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    bias: Option<&ArrayD<T>>,
    stride: usize,
    pad: usize,
) -> ArrayD<T> {
    let g = geometry(x.shape(), w.shape(), stride, pad);
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let (ho, wo) = (g.out_height(), g.out_width());
    if ho * wo >= PER_SAMPLE_MIN_PIXELS {
        let co = w.shape()[0];
        let wm = weight_matrix(w);
        let sample = single(&g);
        let in_len = g.in_channels * g.height * g.width;
        let mut out = ndarray::Array3::<T>::zeros((g.batch, co, ho * wo));
        for (b, mut ob) in out.outer_iter_mut().enumerate() {
            let cols = im2col(&xs[b * in_len..(b + 1) * in_len], &sample);
            ndarray::linalg::general_mat_mul(T::one(), &wm, &cols, T::zero(), &mut ob);
            if let Some(bias) = bias {
                for (mut row, &bv) in ob.axis_iter_mut(Axis(0)).zip(bias.iter()) {
                    row.mapv_inplace(|v| v + bv);
                }
            }
        }
        return out
            .into_shape_with_order(IxDyn(&[g.batch, co, ho, wo]))
            .expect("conv output shape");
    }
    let cols = im2col(xs, &g);
    let mut out = weight_matrix(w).dot(&cols);
    if let Some(b) = bias {
        for (mut row, &bv) in out.axis_iter_mut(Axis(0)).zip(b.iter()) {
            row.mapv_inplace(|v| v + bv);
        }
    }
    channel_major_to_nchw(out, g.batch, g.out_height(), g.out_width())
}

/// Returns (dx, dw, db); the weight gradient is skipped when `need_w` is false.
pub fn conv2d_backward<T: Float>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    dy: &ArrayD<T>,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<ArrayD<T>>, Option<ArrayD<T>>, ArrayD<T>) {
    let g = geometry(x.shape(), w.shape(), stride, pad);
    let (ho, wo) = (g.out_height(), g.out_width());
    if ho * wo >= PER_SAMPLE_MIN_PIXELS {
        return conv2d_backward_per_sample(x, w, dy, &g, need_x, need_w);
    }
    let dy2 = nchw_to_channel_major(dy);
    let db = dy2.sum_axis(Axis(1)).into_dyn();
    let dw = if need_w {
        let xs = x.as_standard_layout();
        let cols = im2col(xs.as_slice().expect("standard layout"), &g);
        let dw = dy2.dot(&cols.t());
        Some(
            dw.into_shape_with_order(IxDyn(w.shape()))
                .expect("weight grad shape"),
        )
    } else {
        None
    };
    let dx = if need_x {
        let dcols = weight_matrix(w).t().dot(&dy2);
        let buf = col2im(dcols.view(), &g);
        Some(ArrayD::from_shape_vec(IxDyn(x.shape()), buf).expect("input grad shape"))
    } else {
        None
    };
    (dx, dw, db)
}

fn conv2d_backward_per_sample<T: Float>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    dy: &ArrayD<T>,
    g: &ConvGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<ArrayD<T>>, Option<ArrayD<T>>, ArrayD<T>) {
    let co = w.shape()[0];
    let (ho, wo) = (g.out_height(), g.out_width());
    let sample = single(g);
    let in_len = g.in_channels * g.height * g.width;
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let dy = dy.as_standard_layout();
    let dy3 = dy
        .view()
        .into_shape_with_order((g.batch, co, ho * wo))
        .expect("dy shape");
    let wm = weight_matrix(w);
    let mut db = ndarray::Array1::<T>::zeros(co);
    let mut dw = ndarray::Array2::<T>::zeros((co, wm.ncols()));
    let mut dx = if need_x { vec![T::zero(); xs.len()] } else { Vec::new() };
    let mut dcols = ndarray::Array2::<T>::zeros((wm.ncols(), ho * wo));
    for (b, dyb) in dy3.outer_iter().enumerate() {
        db += &dyb.sum_axis(Axis(1));
        if need_w {
            let cols = im2col(&xs[b * in_len..(b + 1) * in_len], &sample);
            ndarray::linalg::general_mat_mul(T::one(), &dyb, &cols.t(), T::one(), &mut dw);
        }
        if need_x {
            ndarray::linalg::general_mat_mul(T::one(), &wm.t(), &dyb, T::zero(), &mut dcols);
            let part = col2im(dcols.view(), &sample);
            dx[b * in_len..(b + 1) * in_len].copy_from_slice(&part);
        }
    }
    (
        need_x.then(|| ArrayD::from_shape_vec(IxDyn(x.shape()), dx).expect("input grad shape")),
        need_w.then(|| dw.into_shape_with_order(IxDyn(w.shape())).expect("weight grad shape")),
        db.into_dyn(),
    )
}
