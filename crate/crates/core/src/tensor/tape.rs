use super::kernels::{
    bilinear_backward, bilinear_forward, col2im, downsample_forward, downsample_geom, gelu,
    gelu_grad, gemm_nn, gemm_nt, gemm_tn, im2col, sigmoid, softmax_rows, ConvGeom,
};
use super::{dim_err, Result, Tensor, TensorError};

const LN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Reshape(Var),
    SoftmaxRows { a: Var, cols: usize },
    Gelu(Var),
    LayerNormRows { a: Var, cols: usize, rstd: Vec<f64> },
    Conv2d { input: Var, kernel: Var, geom: ConvGeom, cols: Vec<f64> },
    DepthwiseConv2d { input: Var, kernel: Var, geom: ConvGeom },
    Concat(Vec<Var>),
    Upsample { input: Var, dims: (usize, usize, usize), out_h: usize, out_w: usize },
    Downsample { input: Var, dims: (usize, usize, usize), factor: usize },
    BceWithLogits { logits: Var, targets: Vec<f64> },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation for one backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every leaf on a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf, `None` if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a leaf with unreachable leaves reported as zeros.
    pub fn wrt(&self, tape: &Tape, var: Var) -> Vec<f64> {
        self.get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tape.value(var).len()])
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Records an input or parameter. Any stored gradient is dropped.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let mut tensor = tensor;
        tensor.grad = None;
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, values: Vec<f64>, op: Op) -> Result<Var> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let value = Tensor::new(shape, values)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            );
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let values = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, values, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let values = self.value(a).values().iter().map(|v| v * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, values, Op::Scale(a, factor))
    }

    /// `[N, D] + [D]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.matrix_dims("add_row_bias", x)?;
        if self.value(bias).len() != d {
            return dim_err("add_row_bias", format!("bias of {} for width {d}", self.value(bias).len()));
        }
        let b = self.value(bias).values();
        let values = self
            .value(x)
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % d])
            .collect();
        self.push("add_row_bias", vec![n, d], values, Op::AddRowBias(x, bias))
    }

    /// `[C, H, W] + [C]` broadcast over pixels.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if self.value(bias).len() != c {
            return dim_err(
                "add_channel_bias",
                format!("bias of {} for {c} channels", self.value(bias).len()),
            );
        }
        let b = self.value(bias).values();
        let hw = h * w;
        let values = self
            .value(x)
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i / hw])
            .collect();
        self.push("add_channel_bias", vec![c, h, w], values, Op::AddChannelBias(x, bias))
    }

    fn matrix_dims(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        match self.shape(x) {
            &[r, c] => Ok((r, c)),
            s => dim_err(op, format!("expected a matrix, got {s:?}")),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return dim_err("matmul", format!("inner extents {k} and {k2} differ"));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).values(), self.value(b).values(), &mut out, m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b, m, k, n })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("transpose", a)?;
        let v = self.value(a).values();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = v[i * cols + j];
            }
        }
        self.push("transpose", vec![cols, rows], out, Op::Transpose { a, rows, cols })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return dim_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(a)),
            );
        }
        let values = self.value(a).values().to_vec();
        self.push("reshape", shape.to_vec(), values, Op::Reshape(a))
    }

    /// `[C, H, W]` feature map to `[H*W, C]` tokens.
    pub fn to_tokens(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).chw()?;
        let flat = self.reshape(a, &[c, h * w])?;
        self.transpose(flat)
    }

    /// `[H*W, C]` tokens back to a `[C, H, W]` feature map.
    pub fn from_tokens(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let (n, c) = self.matrix_dims("from_tokens", a)?;
        if n != h * w {
            return dim_err("from_tokens", format!("{n} tokens for a {h}x{w} map"));
        }
        let t = self.transpose(a)?;
        self.reshape(t, &[c, h, w])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("softmax_rows", a)?;
        let mut values = self.value(a).values().to_vec();
        softmax_rows(&mut values, cols);
        self.push("softmax_rows", vec![rows, cols], values, Op::SoftmaxRows { a, cols })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let values = self.value(a).values().iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(a).to_vec();
        self.push("gelu", shape, values, Op::Gelu(a))
    }

    /// Normalizes each row of `[N, D]` to zero mean and unit variance (no affine).
    pub fn layer_norm_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("layer_norm_rows", a)?;
        let v = self.value(a).values();
        let mut out = vec![0.0; rows * cols];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            for (o, x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (x - mean) * s;
            }
            rstd.push(s);
        }
        self.push(
            "layer_norm_rows",
            vec![rows, cols],
            out,
            Op::LayerNormRows { a, cols, rstd },
        )
    }

    /// Cross-correlation of a `[C_in, H, W]` input with a `[C_out, C_in, kH, kW]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (c_in, h, w) = self.value(input).chw()?;
        let (c_out, kc, kh, kw) = match self.shape(kernel) {
            &[a, b, c, d] => (a, b, c, d),
            s => return dim_err("conv2d", format!("kernel must be 4-d, got {s:?}")),
        };
        if kc != c_in {
            return dim_err(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c_in}"),
            );
        }
        let geom = ConvGeom::new((c_in, h, w), (kh, kw), stride, padding)?;
        let cols = im2col(self.value(input).values(), &geom);
        let mut out = vec![0.0; c_out * geom.out_len()];
        gemm_nn(
            self.value(kernel).values(),
            &cols,
            &mut out,
            c_out,
            geom.patch_len(),
            geom.out_len(),
        );
        self.push(
            "conv2d",
            vec![c_out, geom.out_h, geom.out_w],
            out,
            Op::Conv2d { input, kernel, geom, cols },
        )
    }

    /// Per-channel convolution with a `[C, 1, kH, kW]` kernel.
    pub fn depthwise_conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (c, h, w) = self.value(input).chw()?;
        let (kc, kh, kw) = match self.shape(kernel) {
            &[a, 1, c, d] => (a, c, d),
            s => return dim_err("depthwise_conv2d", format!("kernel must be [C, 1, kH, kW], got {s:?}")),
        };
        if kc != c {
            return dim_err("depthwise_conv2d", format!("{kc} filters for {c} channels"));
        }
        let geom = ConvGeom::new((1, h, w), (kh, kw), stride, padding)?;
        let x = self.value(input).values();
        let k = self.value(kernel).values();
        let (oh, ow) = (geom.out_h, geom.out_w);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let src = &x[ch * h * w..(ch + 1) * h * w];
            let filt = &k[ch * kh * kw..(ch + 1) * kh * kw];
            let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
            depthwise_plane(&geom, |o, s, f| dst[o] += src[s] * filt[f]);
        }
        self.push(
            "depthwise_conv2d",
            vec![c, oh, ow],
            out,
            Op::DepthwiseConv2d { input, kernel, geom },
        )
    }

    /// Concatenates `[C_i, H, W]` maps along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat_channels", "nothing to concatenate");
        };
        let (_, h, w) = self.value(first).chw()?;
        let mut total = 0;
        let mut values = Vec::new();
        for &p in parts {
            let (c, ph, pw) = self.value(p).chw()?;
            if (ph, pw) != (h, w) {
                return dim_err(
                    "concat_channels",
                    format!("spatial {ph}x{pw} does not match {h}x{w}"),
                );
            }
            total += c;
            values.extend_from_slice(self.value(p).values());
        }
        self.push("concat_channels", vec![total, h, w], values, Op::Concat(parts.to_vec()))
    }

    pub fn upsample_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let dims = self.value(input).chw()?;
        if out_h == 0 || out_w == 0 {
            return dim_err("upsample_bilinear", "output extents must be at least 1");
        }
        let values = bilinear_forward(self.value(input).values(), dims, out_h, out_w);
        self.push(
            "upsample_bilinear",
            vec![dims.0, out_h, out_w],
            values,
            Op::Upsample { input, dims, out_h, out_w },
        )
    }

    pub fn downsample_avg(&mut self, input: Var, factor: usize) -> Result<Var> {
        let dims = self.value(input).chw()?;
        let (c, oh, ow) = downsample_geom(dims, factor)?;
        let values = downsample_forward(self.value(input).values(), dims, factor);
        self.push(
            "downsample_avg",
            vec![c, oh, ow],
            values,
            Op::Downsample { input, dims, factor },
        )
    }

    /// Mean binary cross-entropy between `logits` and fixed soft `targets`.
    ///
    /// Uses `max(z, 0) - z y + ln(1 + exp(-|z|))`, which cannot overflow.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return dim_err(
                "bce_with_logits",
                format!("logits {:?} vs targets {:?}", self.shape(logits), targets.shape()),
            );
        }
        if let Some(&bad) = targets
            .values()
            .iter()
            .find(|y| !(0.0..=1.0).contains(*y))
        {
            return Err(TensorError::TargetRange {
                op: "bce_with_logits",
                value: bad,
            });
        }
        let z = self.value(logits).values();
        let total: f64 = z
            .iter()
            .zip(targets.values())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let loss = total / z.len() as f64;
        self.push(
            "bce_with_logits",
            vec![1],
            vec![loss],
            Op::BceWithLogits {
                logits,
                targets: targets.values().to_vec(),
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).mean();
        self.push("mean", vec![1], vec![s], Op::Mean(a))
    }

    /// Propagates d(loss)/d(node) back to every leaf the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            for (parent, contribution) in self.local_grads(node, &g) {
                accumulate(&mut grads[parent.0], contribution);
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                vec![
                    (*a, g.iter().zip(bv).map(|(g, b)| g * b).collect()),
                    (*b, g.iter().zip(av).map(|(g, a)| g * a).collect()),
                ]
            }
            Op::Scale(a, f) => vec![(*a, g.iter().map(|v| v * f).collect())],
            Op::AddRowBias(x, b) => {
                let d = self.value(*b).len();
                let mut gb = vec![0.0; d];
                for (i, v) in g.iter().enumerate() {
                    gb[i % d] += v;
                }
                vec![(*x, g.to_vec()), (*b, gb)]
            }
            Op::AddChannelBias(x, b) => {
                let c = self.value(*b).len();
                let hw = g.len() / c;
                let gb = g.chunks(hw).map(|ch| ch.iter().sum()).collect();
                vec![(*x, g.to_vec()), (*b, gb)]
            }
            Op::MatMul { a, b, m, k, n } => {
                let mut ga = vec![0.0; m * k];
                gemm_nt(g, self.value(*b).values(), &mut ga, *m, *n, *k);
                let mut gb = vec![0.0; k * n];
                gemm_tn(self.value(*a).values(), g, &mut gb, *k, *m, *n);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose { a, rows, cols } => {
                let mut ga = vec![0.0; rows * cols];
                for i in 0..*rows {
                    for j in 0..*cols {
                        ga[i * cols + j] = g[j * rows + i];
                    }
                }
                vec![(*a, ga)]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::SoftmaxRows { a, cols } => {
                let y = node.value.values();
                let mut ga = vec![0.0; y.len()];
                for ((gr, yr), out) in g.chunks(*cols).zip(y.chunks(*cols)).zip(ga.chunks_mut(*cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![(*a, ga)]
            }
            Op::Gelu(a) => {
                let x = self.value(*a).values();
                vec![(*a, g.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect())]
            }
            Op::LayerNormRows { a, cols, rstd } => {
                let y = node.value.values();
                let mut ga = vec![0.0; y.len()];
                let n = *cols as f64;
                for (r, s) in rstd.iter().enumerate() {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let yr = &y[r * cols..(r + 1) * cols];
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n;
                    for ((o, &gv), &yv) in ga[r * cols..(r + 1) * cols].iter_mut().zip(gr).zip(yr) {
                        *o = s * (gv - mean_g - yv * mean_gy);
                    }
                }
                vec![(*a, ga)]
            }
            Op::Conv2d { input, kernel, geom, cols } => {
                let c_out = self.shape(*kernel)[0];
                let (p, n) = (geom.patch_len(), geom.out_len());
                let mut gk = vec![0.0; c_out * p];
                gemm_nt(g, cols, &mut gk, c_out, n, p);
                let mut gcols = vec![0.0; p * n];
                gemm_tn(self.value(*kernel).values(), g, &mut gcols, p, c_out, n);
                let mut gi = vec![0.0; self.value(*input).len()];
                col2im(&gcols, geom, &mut gi);
                vec![(*input, gi), (*kernel, gk)]
            }
            Op::DepthwiseConv2d { input, kernel, geom } => {
                let (c, h, w) = self.value(*input).chw().expect("recorded as 3-d");
                let (kh, kw) = (geom.kh, geom.kw);
                let x = self.value(*input).values();
                let k = self.value(*kernel).values();
                let plane_out = geom.out_len();
                let mut gi = vec![0.0; x.len()];
                let mut gk = vec![0.0; k.len()];
                for ch in 0..c {
                    let src = &x[ch * h * w..(ch + 1) * h * w];
                    let filt = &k[ch * kh * kw..(ch + 1) * kh * kw];
                    let go = &g[ch * plane_out..(ch + 1) * plane_out];
                    let gi_plane = &mut gi[ch * h * w..(ch + 1) * h * w];
                    let gk_plane = &mut gk[ch * kh * kw..(ch + 1) * kh * kw];
                    depthwise_plane(geom, |o, s, f| {
                        gi_plane[s] += go[o] * filt[f];
                        gk_plane[f] += go[o] * src[s];
                    });
                }
                vec![(*input, gi), (*kernel, gk)]
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let len = self.value(p).len();
                        let slice = g[offset..offset + len].to_vec();
                        offset += len;
                        (p, slice)
                    })
                    .collect()
            }
            Op::Upsample { input, dims, out_h, out_w } => {
                vec![(*input, bilinear_backward(g, *dims, *out_h, *out_w))]
            }
            Op::Downsample { input, dims, factor } => {
                let (c, h, w) = *dims;
                let f = *factor;
                let (oh, ow) = (h / f, w / f);
                let inv = 1.0 / (f * f) as f64;
                let gi = (0..c * h * w)
                    .map(|i| {
                        let x = i % w;
                        let y = (i / w) % h;
                        let ch = i / (h * w);
                        g[(ch * oh + y / f) * ow + x / f] * inv
                    })
                    .collect();
                vec![(*input, gi)]
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits).values();
                let scale = g[0] / z.len() as f64;
                let gz = z
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| (sigmoid(z) - y) * scale)
                    .collect();
                vec![(*logits, gz)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).len()])],
            Op::Mean(a) => {
                let n = self.value(*a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
        }
    }
}

/// Visits every `(output index, input index, filter index)` triple of a
/// single-channel convolution, skipping taps that fall in the padding.
fn depthwise_plane(geom: &ConvGeom, mut visit: impl FnMut(usize, usize, usize)) {
    let (h, w) = (geom.h as isize, geom.w as isize);
    for oy in 0..geom.out_h {
        for ox in 0..geom.out_w {
            let o = oy * geom.out_w + ox;
            for ky in 0..geom.kh {
                let y = (oy * geom.stride + ky) as isize - geom.pad as isize;
                if y < 0 || y >= h {
                    continue;
                }
                for kx in 0..geom.kw {
                    let x = (ox * geom.stride + kx) as isize - geom.pad as isize;
                    if x < 0 || x >= w {
                        continue;
                    }
                    visit(o, (y * w + x) as usize, ky * geom.kw + kx);
                }
            }
        }
    }
}
