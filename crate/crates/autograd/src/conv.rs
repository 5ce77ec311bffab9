//! Convolution, transposed convolution, dense layers and instance norm.
//!
//! Tensors are NCHW. Convolutions lower to one GEMM per call via im2col over
//! the whole batch.

use ndarray::{linalg::general_mat_mul, Array2, ArrayD, ArrayView2, Axis, Ix4, IxDyn};

use crate::{Scalar, Var};

/// Spatial geometry shared by a convolution and its adjoint.
///
/// `big` is the convolution input grid, `small` the output grid; position
/// `(oy, ox)` of `small` reads `big[oy * stride - pad_top + ky][ox * stride - pad_left + kx]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub big: (usize, usize),
    pub small: (usize, usize),
}

impl ConvGeometry {
    /// "Same" zero padding: output is `ceil(input / stride)`, surplus
    /// padding goes to the bottom/right.
    pub fn same(kernel: usize, stride: usize, h: usize, w: usize) -> Self {
        let oh = h.div_ceil(stride);
        let ow = w.div_ceil(stride);
        let pad_h = ((oh - 1) * stride + kernel).saturating_sub(h);
        let pad_w = ((ow - 1) * stride + kernel).saturating_sub(w);
        ConvGeometry {
            kernel,
            stride,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
            big: (h, w),
            small: (oh, ow),
        }
    }

    /// Transposed convolution with symmetric `padding` and `output_padding`;
    /// `small` is the input grid here.
    pub fn transposed(
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        h: usize,
        w: usize,
    ) -> Self {
        let oh = (h - 1) * stride + kernel + output_padding - 2 * padding;
        let ow = (w - 1) * stride + kernel + output_padding - 2 * padding;
        ConvGeometry {
            kernel,
            stride,
            pad_top: padding,
            pad_left: padding,
            big: (oh, ow),
            small: (h, w),
        }
    }

    fn small_len(&self) -> usize {
        self.small.0 * self.small.1
    }
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` lies
/// inside `0..len`.
fn valid_range(kx: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).div_ceil(stride);
    let hi = if len + pad > kx { (len + pad - kx - 1) / stride + 1 } else { 0 };
    (lo.min(out_len), hi.min(out_len).max(lo.min(out_len)))
}

/// Unfold `x` (N, C, big) into columns (C*k*k, N*small).
fn im2col<T: Scalar>(x: &[T], n: usize, c: usize, geo: &ConvGeometry) -> Array2<T> {
    let k = geo.kernel;
    let st = geo.stride;
    let (bh, bw) = geo.big;
    let (sh, sw) = geo.small;
    let cols_per_sample = sh * sw;
    let ncols = n * cols_per_sample;
    let mut out = vec![T::zero(); c * k * k * ncols];
    for ci in 0..c {
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(ky, geo.pad_top, st, bh, sh);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(kx, geo.pad_left, st, bw, sw);
                let ix_lo = ox_lo * st + kx - geo.pad_left;
                let row_base = ((ci * k + ky) * k + kx) * ncols;
                for ni in 0..n {
                    let plane = &x[(ni * c + ci) * bh * bw..(ni * c + ci + 1) * bh * bw];
                    let col_base = row_base + ni * cols_per_sample;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * st + ky - geo.pad_top;
                        let src = &plane[iy * bw + ix_lo..];
                        let dst = &mut out[col_base + oy * sw + ox_lo..col_base + oy * sw + ox_hi];
                        if st == 1 {
                            dst.copy_from_slice(&src[..dst.len()]);
                        } else {
                            for (d, s) in dst.iter_mut().zip(src.iter().step_by(st)) {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, ncols), out).expect("im2col shape")
}

/// Adjoint of [`im2col`]: scatter-add columns back onto (N, C, big).
fn col2im<T: Scalar>(cols: &Array2<T>, n: usize, c: usize, geo: &ConvGeometry) -> Vec<T> {
    let k = geo.kernel;
    let st = geo.stride;
    let (bh, bw) = geo.big;
    let (sh, sw) = geo.small;
    let cols_per_sample = sh * sw;
    let ncols = n * cols_per_sample;
    let cols = cols.as_standard_layout();
    let src_all = cols.as_slice().expect("contiguous");
    let mut out = vec![T::zero(); n * c * bh * bw];
    for ci in 0..c {
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(ky, geo.pad_top, st, bh, sh);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(kx, geo.pad_left, st, bw, sw);
                let ix_lo = ox_lo * st + kx - geo.pad_left;
                let row_base = ((ci * k + ky) * k + kx) * ncols;
                for ni in 0..n {
                    let plane_off = (ni * c + ci) * bh * bw;
                    let col_base = row_base + ni * cols_per_sample;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * st + ky - geo.pad_top;
                        let src = &src_all[col_base + oy * sw + ox_lo..col_base + oy * sw + ox_hi];
                        let dst = &mut out[plane_off + iy * bw + ix_lo..];
                        if st == 1 {
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        } else {
                            for (d, &s) in dst.iter_mut().step_by(st).zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn matmul<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>) -> Array2<T> {
    let mut c = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(T::one(), &a, &b, T::zero(), &mut c);
    c
}

/// (N, F, S) laid out as (F, N*S).
fn batch_to_channel_major<T: Scalar>(x: &ArrayD<T>, n: usize, f: usize, s: usize) -> Array2<T> {
    let v = x
        .view()
        .into_shape_with_order((n, f, s))
        .expect("contiguous batch");
    let p = v.permuted_axes([1, 0, 2]);
    let owned = p.as_standard_layout().into_owned();
    owned.into_shape_with_order((f, n * s)).expect("reshape")
}

/// (F, N*S) back to (N, F, h, w).
fn channel_major_to_batch<T: Scalar>(m: Array2<T>, n: usize, f: usize, h: usize, w: usize) -> ArrayD<T> {
    let v = m.into_shape_with_order((f, n, h * w)).expect("reshape");
    let p = v.permuted_axes([1, 0, 2]);
    p.as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&[n, f, h, w]))
        .expect("reshape")
}

fn dims4<T: Scalar>(x: &ArrayD<T>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected NCHW tensor, got shape {s:?}");
    (s[0], s[1], s[2], s[3])
}

impl<T: Scalar> Var<T> {
    /// 2D convolution with "same" zero padding.
    ///
    /// `weight` is (F, C, k, k), `bias` is (F,).
    pub fn conv2d(&self, weight: &Var<T>, bias: &Var<T>, stride: usize) -> Var<T> {
        let (n, c, h, w) = dims4(self.value());
        let ws = weight.shape();
        let (f, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], c, "conv2d: weight expects {} channels, input has {c}", ws[1]);
        let geo = ConvGeometry::same(k, stride, h, w);
        let x = self.value().as_standard_layout().into_owned();
        let cols = im2col(x.as_slice().expect("contiguous"), n, c, &geo);
        let w2 = weight
            .value()
            .view()
            .into_shape_with_order((f, c * k * k))
            .expect("weight layout");
        let mut out = matmul(w2, cols.view());
        let b = bias.value().view().into_shape_with_order(f).expect("bias");
        for (mut row, &bv) in out.axis_iter_mut(Axis(0)).zip(b.iter()) {
            row.mapv_inplace(|v| v + bv);
        }
        let (oh, ow) = geo.small;
        let value = channel_major_to_batch(out, n, f, oh, ow);

        let wt = weight.clone();
        let (need_x, need_w, need_b) = (
            self.requires_grad(),
            weight.requires_grad(),
            bias.requires_grad(),
        );
        // Keep the unfolded input for the weight gradient.
        let cols = need_w.then_some(cols);
        Var::from_op(
            value,
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |_, g| {
                let g2 = batch_to_channel_major(g, n, f, geo.small_len());
                let w2 = wt
                    .value()
                    .view()
                    .into_shape_with_order((f, c * k * k))
                    .expect("weight layout");
                let gx = need_x.then(|| {
                    let dcols = matmul(w2.t(), g2.view());
                    let data = col2im(&dcols, n, c, &geo);
                    ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), data).expect("grad shape")
                });
                let gw = cols.as_ref().map(|cols| {
                    matmul(g2.view(), cols.t())
                        .into_shape_with_order(IxDyn(&[f, c, k, k]))
                        .expect("weight grad shape")
                });
                let gb = need_b.then(|| g2.sum_axis(Axis(1)).into_dyn());
                vec![gx, gw, gb]
            }),
        )
    }

    /// Transposed convolution; `weight` is (C_in, C_out, k, k), `bias` (C_out,).
    pub fn conv_transpose2d(
        &self,
        weight: &Var<T>,
        bias: &Var<T>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Var<T> {
        let (n, c, h, w) = dims4(self.value());
        let ws = weight.shape();
        let (fo, k) = (ws[1], ws[2]);
        assert_eq!(ws[0], c, "conv_transpose2d: weight expects {} channels, input has {c}", ws[0]);
        let geo = ConvGeometry::transposed(k, stride, padding, output_padding, h, w);
        let (oh, ow) = geo.big;
        let x2 = batch_to_channel_major(self.value(), n, c, h * w);
        let w2 = weight
            .value()
            .view()
            .into_shape_with_order((c, fo * k * k))
            .expect("weight layout");
        let cols = matmul(w2.t(), x2.view());
        let mut data = col2im(&cols, n, fo, &geo);
        let b = bias.value().as_slice().expect("bias contiguous").to_vec();
        for ni in 0..n {
            for (fi, &bv) in b.iter().enumerate() {
                let off = (ni * fo + fi) * oh * ow;
                for v in &mut data[off..off + oh * ow] {
                    *v = *v + bv;
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, fo, oh, ow]), data).expect("shape");

        let wt = weight.clone();
        let (need_x, need_w, need_b) = (
            self.requires_grad(),
            weight.requires_grad(),
            bias.requires_grad(),
        );
        Var::from_op(
            value,
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |_, g| {
                let g = g.as_standard_layout();
                let dcols = im2col(g.as_slice().expect("contiguous"), n, fo, &geo);
                let w2 = wt
                    .value()
                    .view()
                    .into_shape_with_order((c, fo * k * k))
                    .expect("weight layout");
                let gx = need_x.then(|| {
                    let m = matmul(w2, dcols.view());
                    channel_major_to_batch(m, n, c, h, w)
                });
                let gw = need_w.then(|| {
                    matmul(x2.view(), dcols.t())
                        .into_shape_with_order(IxDyn(&[c, fo, k, k]))
                        .expect("weight grad shape")
                });
                let gb = need_b.then(|| {
                    let g4 = g.view().into_dimensionality::<Ix4>().expect("4d");
                    g4.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)).into_dyn()
                });
                vec![gx, gw, gb]
            }),
        )
    }

    /// Dense layer: `x` (N, in), `weight` (out, in), `bias` (out,).
    pub fn linear(&self, weight: &Var<T>, bias: &Var<T>) -> Var<T> {
        let s = self.shape();
        assert_eq!(s.len(), 2, "linear expects (N, in), got {s:?}");
        let (n, fin) = (s[0], s[1]);
        let fout = weight.shape()[0];
        assert_eq!(weight.shape()[1], fin, "linear: weight expects {} inputs, got {fin}", weight.shape()[1]);
        let x2 = self.value().view().into_dimensionality().expect("2d");
        let w2 = weight.value().view().into_dimensionality().expect("2d");
        let mut out = matmul(x2, w2.t());
        let b = bias.value().view().into_shape_with_order(fout).expect("bias");
        for mut row in out.axis_iter_mut(Axis(0)) {
            row += &b;
        }
        let xin = self.clone();
        let wt = weight.clone();
        let (need_x, need_w, need_b) = (
            self.requires_grad(),
            weight.requires_grad(),
            bias.requires_grad(),
        );
        Var::from_op(
            out.into_dyn(),
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |_, g| {
                let g2: ArrayView2<T> = g.view().into_dimensionality().expect("2d");
                let gx = need_x.then(|| {
                    let w2 = wt.value().view().into_dimensionality().expect("2d");
                    matmul(g2, w2).into_dyn()
                });
                let gw = need_w.then(|| {
                    let x2 = xin.value().view().into_dimensionality().expect("2d");
                    matmul(g2.t(), x2).into_dyn()
                });
                let gb = need_b.then(|| g2.sum_axis(Axis(0)).into_dyn());
                debug_assert!(n == g2.nrows());
                vec![gx, gw, gb]
            }),
        )
    }

    /// Per-sample, per-channel normalization over the spatial axes, no affine.
    pub fn instance_norm(&self, eps: T) -> Var<T> {
        let (n, c, h, w) = dims4(self.value());
        let hw = h * w;
        let inv_hw = T::one() / T::from_usize(hw).expect("size");
        let x = self.value().as_standard_layout().into_owned();
        let xs = x.as_slice().expect("contiguous");
        let mut out = vec![T::zero(); xs.len()];
        let mut inv_std = vec![T::zero(); n * c];
        for (plane, (src, dst)) in xs.chunks(hw).zip(out.chunks_mut(hw)).enumerate() {
            let mean = src.iter().copied().sum::<T>() * inv_hw;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_hw;
            let is = T::one() / (var + eps).sqrt();
            inv_std[plane] = is;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), out).expect("shape");
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |out, g| {
                let g = g.as_standard_layout();
                let gs = g.as_slice().expect("contiguous");
                let os = out.as_slice().expect("contiguous");
                let mut gx = vec![T::zero(); gs.len()];
                for plane in 0..n * c {
                    let r = plane * hw..(plane + 1) * hw;
                    let (gp, op) = (&gs[r.clone()], &os[r.clone()]);
                    let mean_g = gp.iter().copied().sum::<T>() * inv_hw;
                    let mean_gx = gp.iter().zip(op).map(|(&a, &b)| a * b).sum::<T>() * inv_hw;
                    let is = inv_std[plane];
                    for ((d, &gv), &ov) in gx[r].iter_mut().zip(gp).zip(op) {
                        *d = is * (gv - mean_g - ov * mean_gx);
                    }
                }
                vec![Some(ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), gx).expect("shape"))]
            }),
        )
    }
}
