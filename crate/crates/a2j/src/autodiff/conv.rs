//! 2D convolution: a naive nested-loop reference and an im2col fast path.
//! The fast path must match the reference; tests enforce it across a
//! stride/padding/dilation grid.

use super::Tensor;
use crate::error::{A2jError, Result};

/// Stride, zero-padding, and dilation of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        assert!(stride >= 1 && dilation >= 1, "conv: stride and dilation must be >= 1");
        ConvSpec { stride, padding, dilation }
    }

    /// Stride 1, dilation 1, padding chosen to keep odd-kernel output size.
    pub fn same(kernel: usize) -> Self {
        ConvSpec { stride: 1, padding: kernel / 2, dilation: 1 }
    }
}

/// Output spatial size; errors when the kernel does not fit.
pub fn conv_out_dims(
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
    spec: ConvSpec,
) -> Result<(usize, usize)> {
    let span_h = spec.dilation * (kh - 1) + 1;
    let span_w = spec.dilation * (kw - 1) + 1;
    let ih = h + 2 * spec.padding;
    let iw = w + 2 * spec.padding;
    if ih < span_h || iw < span_w {
        return Err(A2jError::Shape(format!(
            "conv: non-positive output size for input {h}x{w}, kernel {kh}x{kw}, {spec:?}"
        )));
    }
    Ok(((ih - span_h) / spec.stride + 1, (iw - span_w) / spec.stride + 1))
}

fn check_shapes(input: &Tensor, kernel: &Tensor, spec: ConvSpec) -> Result<(usize, usize)> {
    if input.shape().len() != 4 || kernel.shape().len() != 4 {
        return Err(A2jError::Shape("conv: input and kernel must be rank 4".into()));
    }
    let (kh, kw) = (kernel.shape()[2], kernel.shape()[3]);
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(A2jError::Shape("conv: kernel sides must be odd".into()));
    }
    if input.shape()[1] != kernel.shape()[1] {
        return Err(A2jError::Shape(format!(
            "conv: input channels {} != kernel channels {}",
            input.shape()[1],
            kernel.shape()[1]
        )));
    }
    conv_out_dims((input.shape()[2], input.shape()[3]), (kh, kw), spec)
}

/// Naive six-nested-loop convolution. Kept as the permanent oracle for the
/// im2col path; accumulates in f64.
pub fn conv2d_reference(input: &Tensor, kernel: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    let (oh, ow) = check_shapes(input, kernel, spec)?;
    let (n, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (f, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let ind = input.data();
    let kd = kernel.data();
    let mut out = vec![0.0f32; n * f * oh * ow];
    for b in 0..n {
        for fo in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride + ky * spec.dilation) as isize
                                    - spec.padding as isize;
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                    - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let iv = ind[((b * c + ci) * h + iy as usize) * w + ix as usize];
                                let kv = kd[((fo * c + ci) * kh + ky) * kw + kx];
                                acc += iv as f64 * kv as f64;
                            }
                        }
                    }
                    out[((b * f + fo) * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
    }
    Ok(Tensor::new(vec![n, f, oh, ow], out))
}

/// Lowers one [C,H,W] image to a [C·kh·kw, oh·ow] patch matrix.
pub fn im2col(
    img: &[f32],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (oh, ow): (usize, usize),
    spec: ConvSpec,
) -> Vec<f32> {
    let p = oh * ow;
    let mut col = vec![0.0f32; c * kh * kw * p];
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * p;
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize
                        - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize
                            - spec.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[row + oy * ow + ox] = img[src + ix as usize];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a patch matrix back onto a [C,H,W] image (adjoint of im2col).
fn col2im(
    col: &[f32],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (oh, ow): (usize, usize),
    spec: ConvSpec,
    img: &mut [f32],
) {
    let p = oh * ow;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * p;
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize
                        - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize
                            - spec.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        img[dst + ix as usize] += col[row + oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// C[m,n] = A[m,k] × B[k,n] with f64 accumulation.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let b64: Vec<f64> = b.iter().map(|&x| x as f64).collect();
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let brow = &b64[p * n..(p + 1) * n];
            for (j, bv) in brow.iter().enumerate() {
                acc[j] += av * bv;
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(acc.iter()) {
            *o = v as f32;
        }
    }
    out
}

pub(crate) fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0.0f32; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// im2col fast path: out[f, p] = W[f, ckk] × col[ckk, p] per batch image.
pub(crate) fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&[f32]>,
    spec: ConvSpec,
) -> Result<Tensor> {
    let (oh, ow) = check_shapes(input, kernel, spec)?;
    let (n, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (f, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    if let Some(b) = bias {
        if b.len() != f {
            return Err(A2jError::Shape("conv: bias length must equal filter count".into()));
        }
    }
    let ckk = c * kh * kw;
    let p = oh * ow;
    let mut out = vec![0.0f32; n * f * p];
    for b in 0..n {
        let img = &input.data()[b * c * h * w..(b + 1) * c * h * w];
        let col = im2col(img, (c, h, w), (kh, kw), (oh, ow), spec);
        let res = matmul(kernel.data(), &col, f, ckk, p);
        let dst = &mut out[b * f * p..(b + 1) * f * p];
        dst.copy_from_slice(&res);
        if let Some(bias) = bias {
            for (fo, &bv) in bias.iter().enumerate() {
                for v in &mut dst[fo * p..(fo + 1) * p] {
                    *v += bv;
                }
            }
        }
    }
    Ok(Tensor::new(vec![n, f, oh, ow], out))
}

pub(crate) struct ConvGrads {
    pub input: Vec<f32>,
    pub kernel: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    gout: &[f32],
    spec: ConvSpec,
    has_bias: bool,
) -> ConvGrads {
    let (n, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (f, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let (oh, ow) = conv_out_dims((h, w), (kh, kw), spec).expect("shapes checked in forward");
    let ckk = c * kh * kw;
    let p = oh * ow;
    let kt = transpose(kernel.data(), f, ckk); // [ckk, f]
    let mut gi = vec![0.0f32; input.numel()];
    let mut gk64 = vec![0.0f64; kernel.numel()];
    let mut gb = has_bias.then(|| vec![0.0f32; f]);
    for b in 0..n {
        let img = &input.data()[b * c * h * w..(b + 1) * c * h * w];
        let g = &gout[b * f * p..(b + 1) * f * p];
        // grad input: Wᵀ [ckk,f] × gout [f,p], scattered by col2im
        let gcol = matmul(&kt, g, ckk, f, p);
        col2im(&gcol, (c, h, w), (kh, kw), (oh, ow), spec, &mut gi[b * c * h * w..]);
        // grad kernel: gout [f,p] × colᵀ [p,ckk]
        let col = im2col(img, (c, h, w), (kh, kw), (oh, ow), spec);
        let colt = transpose(&col, ckk, p);
        let gk = matmul(g, &colt, f, p, ckk);
        for (acc, v) in gk64.iter_mut().zip(&gk) {
            *acc += *v as f64;
        }
        if let Some(gb) = gb.as_mut() {
            for fo in 0..f {
                let mut acc = 0.0f64;
                for &v in &g[fo * p..(fo + 1) * p] {
                    acc += v as f64;
                }
                gb[fo] += acc as f32;
            }
        }
    }
    ConvGrads {
        input: gi,
        kernel: gk64.into_iter().map(|v| v as f32).collect(),
        bias: gb,
    }
}
