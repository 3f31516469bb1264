//! 2-D convolution over H×W×C maps via im2col + GEMM.
//!
//! Weights are stored as `[kh, kw, c_in, c_out]` so that an im2col row
//! (ordered ky, kx, c_in) multiplies the weight viewed as a
//! `[kh·kw·c_in, c_out]` matrix.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub const SAME3: ConvSpec = ConvSpec {
        stride: 1,
        pad: 1,
        dilation: 1,
    };
    pub const POINTWISE: ConvSpec = ConvSpec {
        stride: 1,
        pad: 0,
        dilation: 1,
    };

    pub fn strided(stride: usize, pad: usize) -> Self {
        ConvSpec {
            stride,
            pad,
            dilation: 1,
        }
    }

    pub fn dilated(dilation: usize) -> Self {
        ConvSpec {
            stride: 1,
            pad: dilation,
            dilation,
        }
    }

    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
        let eff_h = self.dilation * (kh - 1) + 1;
        let eff_w = self.dilation * (kw - 1) + 1;
        assert!(
            h + 2 * self.pad >= eff_h && w + 2 * self.pad >= eff_w,
            "input {h}x{w} too small for kernel {kh}x{kw}"
        );
        (
            (h + 2 * self.pad - eff_h) / self.stride + 1,
            (w + 2 * self.pad - eff_w) / self.stride + 1,
        )
    }
}

/// `c[m×n] = beta·c + a·b` with optional transposes of row-major operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    // a is [m×k] (or stored [k×m] when transposed); likewise for b.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices hold at least m·k, k·n and m·n elements and the
    // strides above stay inside those bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &Tensor, kh: usize, kw: usize, spec: ConvSpec) -> (Vec<f64>, usize, usize) {
    let (h, w, c) = x.dims3();
    let (oh, ow) = spec.output_size(h, w, kh, kw);
    let row_len = kh * kw * c;
    let mut cols = vec![0.0; oh * ow * row_len];
    let src = x.data();
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * row_len..(oy * ow + ox + 1) * row_len];
            for ky in 0..kh {
                let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let s = (iy as usize * w + ix as usize) * c;
                    let d = (ky * kw + kx) * c;
                    row[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
    }
    (cols, oh, ow)
}

fn col2im(cols: &[f64], h: usize, w: usize, c: usize, kh: usize, kw: usize, spec: ConvSpec) -> Tensor {
    let (oh, ow) = spec.output_size(h, w, kh, kw);
    let row_len = kh * kw * c;
    let mut out = vec![0.0; h * w * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * row_len..(oy * ow + ox + 1) * row_len];
            for ky in 0..kh {
                let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let d = (iy as usize * w + ix as usize) * c;
                    let s = (ky * kw + kx) * c;
                    for (o, v) in out[d..d + c].iter_mut().zip(&row[s..s + c]) {
                        *o += v;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[h, w, c], out)
}

fn is_pointwise(kh: usize, kw: usize, spec: ConvSpec) -> bool {
    kh == 1 && kw == 1 && spec.stride == 1 && spec.pad == 0
}

pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Tensor {
    let (h, w, c) = x.dims3();
    let ws = weight.shape();
    assert_eq!(ws.len(), 4, "conv weight must be [kh, kw, c_in, c_out]");
    let (kh, kw, cin, cout) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(cin, c, "conv expects {cin} input channels, got {c}");
    let (oh, ow) = spec.output_size(h, w, kh, kw);
    let mut out = vec![0.0; oh * ow * cout];
    if let Some(b) = bias {
        assert_eq!(b.len(), cout);
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    if is_pointwise(kh, kw, spec) {
        gemm(h * w, c, cout, x.data(), false, weight.data(), false, beta, &mut out);
    } else {
        let (cols, _, _) = im2col(x, kh, kw, spec);
        gemm(oh * ow, kh * kw * c, cout, &cols, false, weight.data(), false, beta, &mut out);
    }
    Tensor::from_vec(&[oh, ow, cout], out)
}

/// Gradients of `conv2d` with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    spec: ConvSpec,
    need_input_grad: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (h, w, c) = x.dims3();
    let ws = weight.shape();
    let (kh, kw, cout) = (ws[0], ws[1], ws[3]);
    let (oh, ow, gc) = grad_out.dims3();
    assert_eq!(gc, cout);
    let row_len = kh * kw * c;
    let pointwise = is_pointwise(kh, kw, spec);

    let mut grad_b = vec![0.0; cout];
    for row in grad_out.data().chunks(cout) {
        for (b, g) in grad_b.iter_mut().zip(row) {
            *b += g;
        }
    }

    let mut grad_w = vec![0.0; row_len * cout];
    let cols_owned;
    let cols: &[f64] = if pointwise {
        x.data()
    } else {
        cols_owned = im2col(x, kh, kw, spec).0;
        &cols_owned
    };
    gemm(row_len, oh * ow, cout, cols, true, grad_out.data(), false, 0.0, &mut grad_w);

    let grad_x = need_input_grad.then(|| {
        let mut dcols = vec![0.0; oh * ow * row_len];
        gemm(oh * ow, cout, row_len, grad_out.data(), false, weight.data(), true, 0.0, &mut dcols);
        if pointwise {
            Tensor::from_vec(&[h, w, c], dcols)
        } else {
            col2im(&dcols, h, w, c, kh, kw, spec)
        }
    });
    (
        grad_x,
        Tensor::from_vec(weight.shape(), grad_w),
        Tensor::from_vec(&[cout], grad_b),
    )
}
