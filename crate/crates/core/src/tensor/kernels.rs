//! Slice-level numeric kernels shared by the forward and backward passes.

use super::{dim_err, Result, Tensor};

/// `out[m, n] += a[m, k] * b[k, n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m, n] += a[k, m]^T * b[k, n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m, n] += a[m, k] * b[n, k]^T`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        (c_in, h, w): (usize, usize, usize),
        (kh, kw): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return dim_err("conv2d", "stride must be at least 1");
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return dim_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
            );
        }
        Ok(Self {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input offset feeding column `(oy, ox)` at patch row `(c, ky, kx)`, if inside the image.
    #[inline]
    fn source(&self, c: usize, ky: usize, kx: usize, oy: usize, ox: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((c * self.h + y as usize) * self.w + x as usize)
        }
    }
}

/// Unfolds `input` into a `[C*kH*kW, outH*outW]` patch matrix.
pub(crate) fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.out_len();
    let mut out = vec![0.0; g.patch_len() * cols];
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some(src) = g.source(c, ky, kx, oy, ox) {
                            dst[oy * g.out_w + ox] = input[src];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Scatter-adds a patch matrix back onto an input-shaped buffer.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let n = g.out_len();
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some(dst) = g.source(c, ky, kx, oy, ox) {
                            out[dst] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Per-axis interpolation taps: `(lower index, upper index, upper weight)`.
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

pub(crate) fn bilinear_forward(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
                let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
                dst[oy * out_w + ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward(
    grad_out: &[f64],
    (c, h, w): (usize, usize, usize),
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut gin = vec![0.0; c * h * w];
    for ch in 0..c {
        let go = &grad_out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        let gi = &mut gin[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let g = go[oy * out_w + ox];
                gi[y0 * w + x0] += g * (1.0 - wy) * (1.0 - wx);
                gi[y0 * w + x1] += g * (1.0 - wy) * wx;
                gi[y1 * w + x0] += g * wy * (1.0 - wx);
                gi[y1 * w + x1] += g * wy * wx;
            }
        }
    }
    gin
}

/// Bilinear resize of a `[C, H, W]` tensor with half-pixel centers.
pub fn upsample_bilinear_values(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let dims = input.chw()?;
    if out_h == 0 || out_w == 0 {
        return dim_err("upsample_bilinear", "output extents must be at least 1");
    }
    Tensor::new(
        vec![dims.0, out_h, out_w],
        bilinear_forward(input.values(), dims, out_h, out_w),
    )
}

pub(crate) fn downsample_geom(
    (c, h, w): (usize, usize, usize),
    factor: usize,
) -> Result<(usize, usize, usize)> {
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return dim_err(
            "downsample_avg",
            format!("{h}x{w} is not divisible by factor {factor}"),
        );
    }
    Ok((c, h / factor, w / factor))
}

pub(crate) fn downsample_forward(input: &[f64], (c, h, w): (usize, usize, usize), f: usize) -> Vec<f64> {
    let (oh, ow) = (h / f, w / f);
    let inv = 1.0 / (f * f) as f64;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..f {
                    let row = (ch * h + oy * f + dy) * w + ox * f;
                    acc += input[row..row + f].iter().sum::<f64>();
                }
                out[(ch * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    out
}

/// Block-mean pooling of a `[C, H, W]` tensor by `factor` in both axes.
pub fn downsample_avg_values(input: &Tensor, factor: usize) -> Result<Tensor> {
    let dims = input.chw()?;
    let (c, oh, ow) = downsample_geom(dims, factor)?;
    Tensor::new(vec![c, oh, ow], downsample_forward(input.values(), dims, factor))
}

/// Mirror a `[C, H, W]` tensor left to right.
pub fn flip_h(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let v = input.values();
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        let x = i % w;
        v[i - x + (w - 1 - x)]
    }))
}

/// Mirror a `[C, H, W]` tensor top to bottom.
pub fn flip_v(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let v = input.values();
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        let x = i % w;
        let y = (i / w) % h;
        let ch = i / (h * w);
        v[(ch * h + (h - 1 - y)) * w + x]
    }))
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_K * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// In-place row softmax over a `[rows, cols]` buffer.
pub(crate) fn softmax_rows(buf: &mut [f64], cols: usize) {
    for row in buf.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}
