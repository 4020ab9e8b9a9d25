//! im2col based 3D convolution kernels on `[C, D, H, W]` buffers.
//!
//! All backward kernels accumulate (`+=`) into the gradient buffers they are
//! given.

use crate::autodiff::real::gemm;
use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

pub type Triple = [usize; 3];

/// Padding that keeps spatial extents unchanged at stride 1.
pub fn same_padding(kernel: Triple) -> Result<Triple> {
    if kernel.iter().any(|&k| k == 0 || k % 2 == 0) {
        return Err(Error::Config(format!(
            "\"same\" padding needs odd kernel extents, got {kernel:?}"
        )));
    }
    Ok(kernel.map(|k| k / 2))
}

pub(crate) fn check_stride(stride: Triple) -> Result<()> {
    if stride.iter().any(|&s| s != 1 && s != 2) {
        return Err(Error::Config(format!(
            "stride components must be 1 or 2, got {stride:?}"
        )));
    }
    Ok(())
}

/// Sliding geometry between an image side (`channels x input`) and the
/// column side (`channels * kvol x prod(output)`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub input: Triple,
    pub kernel: Triple,
    pub stride: Triple,
    pub pad: Triple,
    pub output: Triple,
}

impl ConvGeom {
    pub fn new(channels: usize, input: Triple, kernel: Triple, stride: Triple, pad: Triple) -> Result<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * pad[a];
            if kernel[a] == 0 || span < kernel[a] {
                return Err(Error::Dimension(format!(
                    "kernel {kernel:?} does not fit input {input:?} with padding {pad:?}"
                )));
            }
            output[a] = (span - kernel[a]) / stride[a] + 1;
        }
        Ok(ConvGeom {
            channels,
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    pub fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kvol()
    }

    pub fn cols(&self) -> usize {
        self.output.iter().product()
    }

    pub fn in_vox(&self) -> usize {
        self.input.iter().product()
    }

    /// A 1x1x1 stride-1 unpadded geometry whose column matrix is the image.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }
}

#[inline]
fn src_index(o: usize, s: usize, k: usize, p: usize, extent: usize) -> Option<usize> {
    let i = (o * s + k) as isize - p as isize;
    (i >= 0 && (i as usize) < extent).then_some(i as usize)
}

/// Valid output range `[lo, hi)` along the contiguous axis at stride 1.
#[inline]
fn unit_stride_range(k: usize, p: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = p.saturating_sub(k).min(out_len);
    let hi = (in_len + p).saturating_sub(k).min(out_len).max(lo);
    (lo, hi)
}

pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output;
    let cols = g.cols();
    debug_assert_eq!(col.len(), g.rows() * cols);
    for c in 0..g.channels {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ((c * kd + kz) * kh + ky) * kw + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oz in 0..od {
                        let iz = src_index(oz, sd, kz, pd, id);
                        for oy in 0..oh {
                            let drow = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            let (Some(iz), Some(iy)) = (iz, src_index(oy, sh, ky, ph, ih)) else {
                                drow.fill(T::zero());
                                continue;
                            };
                            let src = &xc[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                            if sw == 1 {
                                let (lo, hi) = unit_stride_range(kx, pw, iw, ow);
                                drow[..lo].fill(T::zero());
                                drow[lo..hi].copy_from_slice(&src[lo + kx - pw..hi + kx - pw]);
                                drow[hi..].fill(T::zero());
                            } else {
                                for (ox, d) in drow.iter_mut().enumerate() {
                                    *d = match src_index(ox, sw, kx, pw, iw) {
                                        Some(ix) => src[ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im<T: Real>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output;
    let cols = g.cols();
    for c in 0..g.channels {
        let xc = &mut x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ((c * kd + kz) * kh + ky) * kw + kx;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oz in 0..od {
                        let Some(iz) = src_index(oz, sd, kz, pd, id) else {
                            continue;
                        };
                        for oy in 0..oh {
                            let Some(iy) = src_index(oy, sh, ky, ph, ih) else {
                                continue;
                            };
                            let srow = &src[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            let dst = &mut xc[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                            if sw == 1 {
                                let (lo, hi) = unit_stride_range(kx, pw, iw, ow);
                                for (d, &s) in dst[lo + kx - pw..hi + kx - pw].iter_mut().zip(&srow[lo..hi]) {
                                    *d += s;
                                }
                            } else {
                                for (ox, &s) in srow.iter().enumerate() {
                                    if let Some(ix) = src_index(ox, sw, kx, pw, iw) {
                                        dst[ix] += s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn kernel_of(w: &Tensor<impl Real>) -> Triple {
    [w.shape()[2], w.shape()[3], w.shape()[4]]
}

fn check_bias<T: Real>(b: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    if let Some(b) = b {
        if b.shape() != [channels] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} does not match {channels} output channels",
                b.shape()
            )));
        }
    }
    Ok(())
}

/// Validates shapes and returns the forward geometry of `conv3d`.
pub(crate) fn conv3d_geom<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: Triple,
    pad: Triple,
) -> Result<ConvGeom> {
    x.expect_volume("conv3d input")?;
    if w.rank() != 5 {
        return Err(Error::Dimension(format!(
            "conv3d weight must be [Cout, Cin, kd, kh, kw], got {:?}",
            w.shape()
        )));
    }
    if w.shape()[1] != x.channels() {
        return Err(Error::Dimension(format!(
            "conv3d channel mismatch: input {:?} has {} channels, weight {:?} expects {}",
            x.shape(),
            x.channels(),
            w.shape(),
            w.shape()[1]
        )));
    }
    check_stride(stride)?;
    check_bias(b, w.shape()[0])?;
    ConvGeom::new(x.channels(), x.spatial(), kernel_of(w), stride, pad)
}

pub(crate) fn conv3d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: Triple,
    pad: Triple,
) -> Result<Tensor<T>> {
    let g = conv3d_geom(x, w, b, stride, pad)?;
    let cout = w.shape()[0];
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = vec![T::zero(); cout * cols];
    if let Some(b) = b {
        for (o, &bv) in out.chunks_mut(cols).zip(b.data()) {
            o.fill(bv);
        }
    }
    if g.is_pointwise() {
        gemm(cout, rows, cols, w.data(), false, x.data(), false, &mut out, true);
    } else {
        let mut col = vec![T::zero(); rows * cols];
        im2col(x.data(), &g, &mut col);
        gemm(cout, rows, cols, w.data(), false, &col, false, &mut out, true);
    }
    let [d, h, wd] = g.output;
    Ok(Tensor::from_parts(vec![cout, d, h, wd], out))
}

pub(crate) fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &ConvGeom,
    gout: &[T],
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let cout = w.shape()[0];
    let (rows, cols) = (g.rows(), g.cols());
    if let Some(gb) = gb {
        for (b, row) in gb.iter_mut().zip(gout.chunks(cols)) {
            *b += row.iter().copied().sum::<T>();
        }
    }
    if let Some(gw) = gw {
        if g.is_pointwise() {
            gemm(cout, cols, rows, gout, false, x.data(), true, gw, true);
        } else {
            let mut col = vec![T::zero(); rows * cols];
            im2col(x.data(), g, &mut col);
            gemm(cout, cols, rows, gout, false, &col, true, gw, true);
        }
    }
    if let Some(gx) = gx {
        if g.is_pointwise() {
            gemm(rows, cout, cols, w.data(), true, gout, false, gx, true);
        } else {
            let mut gcol = vec![T::zero(); rows * cols];
            gemm(rows, cout, cols, w.data(), true, gout, false, &mut gcol, false);
            col2im(&gcol, g, gx);
        }
    }
}

/// Geometry of `conv_transpose3d`: the adjoint conv maps the (larger) output
/// volume back onto the input, so `g.input` is the transposed conv's output.
pub(crate) fn conv_transpose3d_geom<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: Triple,
) -> Result<ConvGeom> {
    x.expect_volume("conv_transpose3d input")?;
    check_stride(stride)?;
    if w.rank() != 5 {
        return Err(Error::Dimension(format!(
            "conv_transpose3d weight must be [Cin, Cout, kd, kh, kw], got {:?}",
            w.shape()
        )));
    }
    if w.shape()[0] != x.channels() {
        return Err(Error::Dimension(format!(
            "conv_transpose3d channel mismatch: input {:?} has {} channels, weight {:?} expects {}",
            x.shape(),
            x.channels(),
            w.shape(),
            w.shape()[0]
        )));
    }
    let cout = w.shape()[1];
    check_bias(b, cout)?;
    let kernel = kernel_of(w);
    let [d, h, wd] = x.spatial();
    let out = [
        (d - 1) * stride[0] + kernel[0],
        (h - 1) * stride[1] + kernel[1],
        (wd - 1) * stride[2] + kernel[2],
    ];
    let g = ConvGeom::new(cout, out, kernel, stride, [0, 0, 0])?;
    debug_assert_eq!(g.output, x.spatial());
    Ok(g)
}

pub(crate) fn conv_transpose3d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: Triple,
) -> Result<Tensor<T>> {
    let g = conv_transpose3d_geom(x, w, b, stride)?;
    let cin = x.channels();
    let cout = g.channels;
    let (rows, cols) = (g.rows(), g.cols());
    let vox = g.in_vox();
    let mut out = vec![T::zero(); cout * vox];
    if g.is_pointwise() {
        gemm(rows, cin, cols, w.data(), true, x.data(), false, &mut out, false);
    } else {
        let mut col = vec![T::zero(); rows * cols];
        gemm(rows, cin, cols, w.data(), true, x.data(), false, &mut col, false);
        col2im(&col, &g, &mut out);
    }
    if let Some(b) = b {
        for (o, &bv) in out.chunks_mut(vox).zip(b.data()) {
            o.iter_mut().for_each(|v| *v += bv);
        }
    }
    let [d, h, wd] = g.input;
    Ok(Tensor::from_parts(vec![cout, d, h, wd], out))
}

pub(crate) fn conv_transpose3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &ConvGeom,
    gout: &[T],
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let cin = x.channels();
    let (rows, cols) = (g.rows(), g.cols());
    if let Some(gb) = gb {
        for (b, row) in gb.iter_mut().zip(gout.chunks(g.in_vox())) {
            *b += row.iter().copied().sum::<T>();
        }
    }
    if gx.is_none() && gw.is_none() {
        return;
    }
    let owned;
    let colg: &[T] = if g.is_pointwise() {
        gout
    } else {
        let mut c = vec![T::zero(); rows * cols];
        im2col(gout, g, &mut c);
        owned = c;
        &owned
    };
    if let Some(gx) = gx {
        gemm(cin, rows, cols, w.data(), false, colg, false, gx, true);
    }
    if let Some(gw) = gw {
        gemm(cin, cols, rows, x.data(), false, colg, true, gw, true);
    }
}
