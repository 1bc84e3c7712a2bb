//! 2-d convolution kernels (im2col + GEMM) and their differentiable wrappers.
//!
//! All kernels are deterministic: the parallel GEMM partitions the output into
//! disjoint chunks with a fixed per-element accumulation order, so results are
//! bitwise reproducible for a given build.

use crate::{make_node, Tensor};
use ndarray::linalg::general_mat_mul;
use ndarray::prelude::*;
use rayon::prelude::*;

/// Spatial padding applied before a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero(usize),
    /// Mirror padding without repeating the edge row/column. Requires the
    /// padded extent to be at most `size - 1`.
    Reflect(usize),
}

impl Padding {
    fn amount(&self) -> usize {
        match *self {
            Padding::Zero(p) | Padding::Reflect(p) => p,
        }
    }
}

pub(crate) fn conv_out_len(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Deterministic parallel matrix multiply. Large products are split along the
/// longer output axis into per-thread chunks; each output element is written
/// by exactly one `general_mat_mul` call.
pub fn par_matmul(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) -> Array2<f64> {
    let (m, ka) = a.dim();
    let (kb, n) = b.dim();
    assert_eq!(ka, kb, "par_matmul: inner dimension mismatch");
    let mut out = Array2::<f64>::zeros((m, n));
    let flops = m * ka * n;
    const PAR_MIN_FLOPS: usize = 4_000_000;
    let threads = rayon::current_num_threads().max(1);
    if flops < PAR_MIN_FLOPS || threads == 1 {
        general_mat_mul(1.0, a, b, 0.0, &mut out.view_mut());
        return out;
    }
    if n >= m {
        let chunk = n.div_ceil(threads).max(32);
        let pairs: Vec<_> = out
            .axis_chunks_iter_mut(Axis(1), chunk)
            .zip(b.axis_chunks_iter(Axis(1), chunk))
            .collect();
        pairs.into_par_iter().for_each(|(mut oc, bc)| {
            general_mat_mul(1.0, a, &bc, 0.0, &mut oc);
        });
    } else {
        let chunk = m.div_ceil(threads).max(32);
        let pairs: Vec<_> = out
            .axis_chunks_iter_mut(Axis(0), chunk)
            .zip(a.axis_chunks_iter(Axis(0), chunk))
            .collect();
        pairs.into_par_iter().for_each(|(mut oc, ac)| {
            general_mat_mul(1.0, &ac, b, 0.0, &mut oc);
        });
    }
    out
}

fn reflect_index(t: isize, size: usize) -> usize {
    if t < 0 {
        (-t) as usize
    } else if (t as usize) >= size {
        2 * size - 2 - t as usize
    } else {
        t as usize
    }
}

pub(crate) fn pad4(x: &ArrayView4<'_, f64>, pad: Padding) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let p = pad.amount();
    if p == 0 {
        return x.to_owned();
    }
    let mut out = Array4::<f64>::zeros((n, c, h + 2 * p, w + 2 * p));
    match pad {
        Padding::Zero(_) => {
            out.slice_mut(s![.., .., p..p + h, p..p + w]).assign(x);
        }
        Padding::Reflect(_) => {
            assert!(p < h && p < w, "reflect padding {p} too large for {h}x{w}");
            for ni in 0..n {
                for ci in 0..c {
                    let src = x.slice(s![ni, ci, .., ..]);
                    let mut dst = out.slice_mut(s![ni, ci, .., ..]);
                    for ip in 0..h + 2 * p {
                        let si = reflect_index(ip as isize - p as isize, h);
                        for jp in 0..w + 2 * p {
                            let sj = reflect_index(jp as isize - p as isize, w);
                            dst[[ip, jp]] = src[[si, sj]];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Maps a gradient w.r.t. the padded input back to the unpadded input.
fn unpad_grad(dxp: &Array4<f64>, pad: Padding, h: usize, w: usize) -> Array4<f64> {
    let p = pad.amount();
    if p == 0 {
        return dxp.clone();
    }
    match pad {
        Padding::Zero(_) => dxp.slice(s![.., .., p..p + h, p..p + w]).to_owned(),
        Padding::Reflect(_) => {
            let (n, c, hp, wp) = dxp.dim();
            let mut out = Array4::<f64>::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    let src = dxp.slice(s![ni, ci, .., ..]);
                    let mut dst = out.slice_mut(s![ni, ci, .., ..]);
                    for ip in 0..hp {
                        let si = reflect_index(ip as isize - p as isize, h);
                        for jp in 0..wp {
                            let sj = reflect_index(jp as isize - p as isize, w);
                            dst[[si, sj]] += src[[ip, jp]];
                        }
                    }
                }
            }
            out
        }
    }
}

/// Unfolds a padded input `[N, C, Hp, Wp]` into `[C*k*k, N*OH*OW]` columns.
pub(crate) fn im2col(xp: &Array4<f64>, k: usize, s: usize, oh: usize, ow: usize) -> Array2<f64> {
    let (n, c, hp, wp) = xp.dim();
    let xs = xp.as_slice().expect("padded input is standard layout");
    let ncols = n * oh * ow;
    let mut out = Array2::<f64>::zeros((c * k * k, ncols));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let mut row_view = out.row_mut(row);
                let os = row_view.as_slice_mut().unwrap();
                for ni in 0..n {
                    let base_nc = (ni * c + ci) * hp * wp;
                    for i in 0..oh {
                        let start = base_nc + (i * s + ki) * wp + kj;
                        let ocol = (ni * oh + i) * ow;
                        if s == 1 {
                            os[ocol..ocol + ow].copy_from_slice(&xs[start..start + ow]);
                        } else {
                            for j in 0..ow {
                                os[ocol + j] = xs[start + j * s];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Scatter-adds columns `[C*k*k, N*OH*OW]` back into a padded buffer
/// `[N, C, buf_h, buf_w]`. Inverse of [`im2col`] up to accumulation.
pub(crate) fn col2im(
    cols: &Array2<f64>,
    n: usize,
    c: usize,
    k: usize,
    s: usize,
    oh: usize,
    ow: usize,
    buf_h: usize,
    buf_w: usize,
) -> Array4<f64> {
    let ncols = n * oh * ow;
    assert_eq!(cols.dim(), (c * k * k, ncols));
    let mut buf = Array4::<f64>::zeros((n, c, buf_h, buf_w));
    let bs = buf.as_slice_mut().unwrap();
    let cs = cols.as_slice().expect("columns are standard layout");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let crow = &cs[row * ncols..(row + 1) * ncols];
                for ni in 0..n {
                    let base_nc = (ni * c + ci) * buf_h * buf_w;
                    for i in 0..oh {
                        let start = base_nc + (i * s + ki) * buf_w + kj;
                        let ocol = (ni * oh + i) * ow;
                        for j in 0..ow {
                            bs[start + j * s] += crow[ocol + j];
                        }
                    }
                }
            }
        }
    }
    buf
}

fn to_nfhw(out2: Array2<f64>, f: usize, n: usize, oh: usize, ow: usize) -> Array4<f64> {
    let out4 = out2.into_shape_with_order((f, n, oh, ow)).unwrap();
    out4.permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .to_owned()
}

fn to_f_cols(x: &ArrayView4<'_, f64>) -> Array2<f64> {
    let (n, f, oh, ow) = x.dim();
    x.permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((f, n * oh * ow))
        .unwrap()
}

pub(crate) fn conv2d_fwd(
    x: &ArrayView4<'_, f64>,
    w: &ArrayView4<'_, f64>,
    bias: Option<&ArrayView1<'_, f64>>,
    stride: usize,
    pad: Padding,
) -> Array4<f64> {
    let (n, c, h, wd) = x.dim();
    let (f, cw, k, k2) = w.dim();
    assert_eq!(c, cw, "conv2d: channel mismatch");
    assert_eq!(k, k2, "conv2d: non-square kernel");
    let p = pad.amount();
    let (oh, ow) = (
        conv_out_len(h, k, stride, p),
        conv_out_len(wd, k, stride, p),
    );
    let xp = pad4(x, pad);
    let cols = im2col(&xp, k, stride, oh, ow);
    let w2 = w.to_shape((f, c * k * k)).unwrap();
    let out2 = par_matmul(&w2.view(), &cols.view());
    let mut out = to_nfhw(out2, f, n, oh, ow);
    if let Some(b) = bias {
        assert_eq!(b.len(), f, "conv2d: bias length mismatch");
        for fi in 0..f {
            out.slice_mut(s![.., fi, .., ..])
                .mapv_inplace(|v| v + b[fi]);
        }
    }
    out
}

pub(crate) fn conv2d_igrad(
    dout: &ArrayView4<'_, f64>,
    w: &ArrayView4<'_, f64>,
    stride: usize,
    pad: Padding,
    in_hw: (usize, usize),
) -> Array4<f64> {
    let (n, f, oh, ow) = dout.dim();
    let (fw, c, k, _) = w.dim();
    assert_eq!(f, fw, "conv2d_igrad: filter mismatch");
    let (h, wd) = in_hw;
    let p = pad.amount();
    let g2 = to_f_cols(dout);
    let w2 = w.to_shape((f, c * k * k)).unwrap();
    let dcols = par_matmul(&w2.t(), &g2.view());
    let buf = col2im(&dcols, n, c, k, stride, oh, ow, h + 2 * p, wd + 2 * p);
    unpad_grad(&buf, pad, h, wd)
}

pub(crate) fn conv2d_wgrad(
    x: &ArrayView4<'_, f64>,
    dout: &ArrayView4<'_, f64>,
    stride: usize,
    pad: Padding,
    k: usize,
) -> Array4<f64> {
    let (n, c, _h, _w) = x.dim();
    let (n2, f, oh, ow) = dout.dim();
    assert_eq!(n, n2, "conv2d_wgrad: batch mismatch");
    let xp = pad4(x, pad);
    let cols = im2col(&xp, k, stride, oh, ow);
    let g2 = to_f_cols(dout);
    let dw2 = par_matmul(&g2.view(), &cols.t());
    dw2.into_shape_with_order((f, c, k, k)).unwrap()
}

pub(crate) fn convt_fwd(
    x: &ArrayView4<'_, f64>,
    wt: &ArrayView4<'_, f64>,
    bias: Option<&ArrayView1<'_, f64>>,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Array4<f64> {
    let (n, cin, ih, iw) = x.dim();
    let (cin2, cout, k, k2) = wt.dim();
    assert_eq!(cin, cin2, "conv_transpose2d: channel mismatch");
    assert_eq!(k, k2, "conv_transpose2d: non-square kernel");
    assert!(output_pad < stride, "output padding must be below stride");
    let oh = (ih - 1) * stride + k + output_pad - 2 * pad;
    let ow = (iw - 1) * stride + k + output_pad - 2 * pad;
    let g2 = to_f_cols(x);
    let w2 = wt.to_shape((cin, cout * k * k)).unwrap();
    let dcols = par_matmul(&w2.t(), &g2.view());
    let buf = col2im(
        &dcols,
        n,
        cout,
        k,
        stride,
        ih,
        iw,
        oh + 2 * pad,
        ow + 2 * pad,
    );
    let mut out = buf
        .slice(s![.., .., pad..pad + oh, pad..pad + ow])
        .to_owned();
    if let Some(b) = bias {
        assert_eq!(b.len(), cout, "conv_transpose2d: bias length mismatch");
        for ci in 0..cout {
            out.slice_mut(s![.., ci, .., ..])
                .mapv_inplace(|v| v + b[ci]);
        }
    }
    out
}

fn view4(a: &ArrayD<f64>) -> ArrayView4<'_, f64> {
    a.view()
        .into_dimensionality::<Ix4>()
        .expect("expected a 4-d tensor")
}

fn view1(a: &ArrayD<f64>) -> ArrayView1<'_, f64> {
    a.view()
        .into_dimensionality::<Ix1>()
        .expect("expected a 1-d tensor")
}

/// Differentiable 2-d convolution. `x` is `[N, C, H, W]`, `w` is
/// `[F, C, k, k]`, bias is `[F]`.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: Padding,
) -> Tensor {
    let v = x.with(|xa| {
        w.with(|wa| {
            let bias_arr = bias.map(|b| b.to_array());
            let bias_view = bias_arr.as_ref().map(|b| view1(b));
            conv2d_fwd(&view4(xa), &view4(wa), bias_view.as_ref(), stride, pad).into_dyn()
        })
    });
    let in_hw = x.with(|xa| {
        let d = view4(xa).dim();
        (d.2, d.3)
    });
    let k = w.with(|wa| view4(wa).dim().2);
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let (px, pw) = (x.clone(), w.clone());
    make_node(v, parents, move |g, m| {
        let ga = g.view().into_dimensionality::<Ix4>().unwrap();
        let dx = m[0]
            .then(|| pw.with(|wa| conv2d_igrad(&ga, &view4(wa), stride, pad, in_hw).into_dyn()));
        let dw =
            m[1].then(|| px.with(|xa| conv2d_wgrad(&view4(xa), &ga, stride, pad, k).into_dyn()));
        let mut out = vec![dx, dw];
        if m.len() > 2 {
            out.push(m[2].then(|| {
                ga.sum_axis(Axis(3))
                    .sum_axis(Axis(2))
                    .sum_axis(Axis(0))
                    .into_dyn()
            }));
        }
        out
    })
}

/// Differentiable transposed 2-d convolution. `x` is `[N, C_in, H, W]`, `w`
/// is `[C_in, C_out, k, k]` (the adjoint layout), bias is `[C_out]`. Output
/// spatial size is `(H-1)*stride + k + output_pad - 2*pad`.
pub fn conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Tensor {
    let v = x.with(|xa| {
        w.with(|wa| {
            let bias_arr = bias.map(|b| b.to_array());
            let bias_view = bias_arr.as_ref().map(|b| view1(b));
            convt_fwd(
                &view4(xa),
                &view4(wa),
                bias_view.as_ref(),
                stride,
                pad,
                output_pad,
            )
            .into_dyn()
        })
    });
    let in_hw = x.with(|xa| {
        let d = view4(xa).dim();
        (d.2, d.3)
    });
    let k = w.with(|wa| view4(wa).dim().2);
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let (px, pw) = (x.clone(), w.clone());
    make_node(v, parents, move |g, m| {
        let ga = g.view().into_dimensionality::<Ix4>().unwrap();
        // The forward pass is the adjoint of a stride-`s` convolution with
        // weight `w`, so the input gradient is that convolution itself and the
        // weight gradient swaps the roles of input and output.
        let dx = m[0].then(|| {
            pw.with(|wa| {
                let dx = conv2d_fwd(&ga, &view4(wa), None, stride, Padding::Zero(pad));
                assert_eq!((dx.dim().2, dx.dim().3), in_hw);
                dx.into_dyn()
            })
        });
        let dw = m[1].then(|| {
            px.with(|xa| conv2d_wgrad(&ga, &view4(xa), stride, Padding::Zero(pad), k).into_dyn())
        });
        let mut out = vec![dx, dw];
        if m.len() > 2 {
            out.push(m[2].then(|| {
                ga.sum_axis(Axis(3))
                    .sum_axis(Axis(2))
                    .sum_axis(Axis(0))
                    .into_dyn()
            }));
        }
        out
    })
}
