#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use switchaux::losses::{composite_loss, LossWiring};
use switchaux::model::SegModel;
use switchaux::tensor::{attention_block, finite_diff_grad, grad_rel_error, AttentionParams, Result, Tape, Tensor, Var};

pub const FD_EPS: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Below this magnitude gradients are compared absolutely. A loss of order one
/// carries a few ulps of rounding noise, which central differences at
/// `FD_EPS` turn into ~1e-11..1e-10.
pub const FD_ABS_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn random_mask(rng: &mut ChaCha8Rng, shape: &[usize], p: f64) -> Tensor {
    Tensor::from_fn(shape, |_| if rng.random_bool(p) { 1.0 } else { 0.0 })
}

/// Evaluates `sum(f(inputs) * probe)` where `probe` is a fixed random weight
/// tensor, so every output element contributes a distinct gradient.
fn projected_loss(
    inputs: &[Tensor],
    probe: &Tensor,
    f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars).expect("forward");
    let loss = if tape.value(out).is_scalar() && probe.is_scalar() {
        let p = tape.leaf(probe.clone());
        tape.mul(out, p).expect("scale")
    } else {
        let p = tape.leaf(probe.reshaped(tape.shape(out)).expect("probe shape"));
        let prod = tape.mul(out, p).expect("mul");
        tape.sum(prod).expect("sum")
    };
    (tape, vars, loss)
}

/// Worst relative error between backward() and central differences over
/// every coordinate of every input.
pub fn op_grad_error(inputs: Vec<Tensor>, seed: u64, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var> = &f;
    let out_len = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars).expect("forward");
        tape.value(out).len()
    };
    let mut r = rng(seed ^ 0x5eed);
    let probe = uniform(&mut r, &[out_len], 0.5, 1.5);
    let (tape, vars, loss) = projected_loss(&inputs, &probe, f);
    let grads = tape.backward(loss).expect("backward");
    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, *var);
        let numeric = finite_diff_grad(
            |x| {
                let mut probe_inputs = inputs.clone();
                probe_inputs[i] = x.clone();
                let (t, _, l) = projected_loss(&probe_inputs, &probe, f);
                t.value(l).item()
            },
            &inputs[i],
            FD_EPS,
        );
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(grad_rel_error(*a, *n, FD_ABS_FLOOR));
        }
    }
    worst
}

/// Direct nested-loop cross-correlation used as an independent reference.
pub fn conv2d_oracle(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (c_in, h, w) = input.chw().unwrap();
    let ks = kernel.shape();
    let (c_out, kh, kw) = (ks[0], ks[2], ks[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let x = input.values();
    let k = kernel.values();
    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let xx = (ox * stride + kx) as isize - pad as isize;
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            acc += x[(ci * h + y as usize) * w + xx as usize]
                                * k[((co * c_in + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![c_out, oh, ow], out).unwrap()
}

/// Bilinear resize written straight from the half-pixel coordinate formula.
pub fn bilinear_oracle(input: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = input.chw().unwrap();
    let v = input.values();
    let coord = |d: usize, n_in: usize, n_out: usize| -> f64 {
        let s = (d as f64 + 0.5) * (n_in as f64 / n_out as f64) - 0.5;
        s.max(0.0).min((n_in - 1) as f64)
    };
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let sy = coord(oy, h, out_h);
                let sx = coord(ox, w, out_w);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let at = |y: usize, x: usize| v[(ch * h + y) * w + x];
                let val = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + at(y0, x1) * (1.0 - fy) * fx
                    + at(y1, x0) * fy * (1.0 - fx)
                    + at(y1, x1) * fy * fx;
                out.push(val);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out).unwrap()
}

fn mat_mul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

/// Dense-matrix reference for single-head attention with residual.
/// Returns (output, attention weights).
pub fn attention_oracle(x: &Tensor, w: &[Tensor; 8]) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let proj = |wm: &Tensor, b: &Tensor| -> Vec<f64> {
        let mut r = mat_mul(x.values(), wm.values(), n, d, d);
        for i in 0..n {
            for j in 0..d {
                r[i * d + j] += b.values()[j];
            }
        }
        r
    };
    let q = proj(&w[0], &w[1]);
    let k = proj(&w[2], &w[3]);
    let v = proj(&w[4], &w[5]);
    let mut attn = vec![0.0; n * n];
    for i in 0..n {
        let scores: Vec<f64> = (0..n)
            .map(|j| (0..d).map(|p| q[i * d + p] * k[j * d + p]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for j in 0..n {
            attn[i * n + j] = exps[j] / z;
        }
    }
    let mixed = mat_mul(&attn, &v, n, n, d);
    let mut out = mat_mul(&mixed, w[6].values(), n, d, d);
    for i in 0..n {
        for j in 0..d {
            out[i * d + j] += w[7].values()[j] + x.values()[i * d + j];
        }
    }
    (out, attn)
}

/// Small run that trains in well under a second per epoch.
pub fn fast_config(epochs: usize) -> switchaux::harness::RunConfig {
    let mut cfg = switchaux::harness::RunConfig::default();
    cfg.data.per_organ = 5;
    cfg.data.image_size = 32;
    cfg.model.stage_channels = [4, 6, 8, 8];
    cfg.model.decoder_width = 4;
    cfg.train.epochs = epochs;
    cfg.train.lr = 1e-3;
    cfg
}

pub fn random_attention(seed: u64, n: usize, d: usize) -> (Tensor, [Tensor; 8]) {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[n, d], -1.0, 1.0);
    let w = std::array::from_fn(|i| {
        if i % 2 == 0 {
            uniform(&mut r, &[d, d], -0.5, 0.5)
        } else {
            uniform(&mut r, &[d], -0.2, 0.2)
        }
    });
    (x, w)
}

/// Worst finite-difference error of every differentiable tape op.
pub fn op_grad_checks() -> Vec<(&'static str, f64)> {
    let mut r = rng(11);
    let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let m = uniform(&mut r, &[4, 5], -1.0, 1.0);
    let bias = uniform(&mut r, &[4], -1.0, 1.0);
    let x = uniform(&mut r, &[2, 6, 6], -1.0, 1.0);
    let k = uniform(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
    let dk = uniform(&mut r, &[2, 1, 3, 3], -1.0, 1.0);
    let cb = uniform(&mut r, &[2], -1.0, 1.0);
    let y = uniform(&mut r, &[1, 6, 6], -1.0, 1.0);
    let z = uniform(&mut r, &[1, 4, 4], -3.0, 3.0);
    let soft = uniform(&mut r, &[1, 4, 4], 0.0, 1.0);
    let (ax, aw) = random_attention(14, 5, 4);
    let mut att = vec![ax];
    att.extend(aw.iter().cloned());

    let ab = vec![a.clone(), b.clone()];
    vec![
        ("add", op_grad_error(ab.clone(), 1, |t, v| t.add(v[0], v[1]))),
        ("sub", op_grad_error(ab.clone(), 2, |t, v| t.sub(v[0], v[1]))),
        ("mul", op_grad_error(ab, 3, |t, v| t.mul(v[0], v[1]))),
        ("scale", op_grad_error(vec![a.clone()], 4, |t, v| t.scale(v[0], -0.3))),
        ("gelu", op_grad_error(vec![a.clone()], 5, |t, v| t.gelu(v[0]))),
        ("sum", op_grad_error(vec![a.clone()], 6, |t, v| t.sum(v[0]))),
        ("mean", op_grad_error(vec![a.clone()], 7, |t, v| t.mean(v[0]))),
        ("matmul", op_grad_error(vec![a.clone(), m], 8, |t, v| t.matmul(v[0], v[1]))),
        ("transpose", op_grad_error(vec![a.clone()], 9, |t, v| t.transpose(v[0]))),
        ("add_row_bias", op_grad_error(vec![a.clone(), bias], 10, |t, v| t.add_row_bias(v[0], v[1]))),
        ("softmax_rows", op_grad_error(vec![a.clone()], 11, |t, v| t.softmax_rows(v[0]))),
        ("layer_norm_rows", op_grad_error(vec![a.clone()], 12, |t, v| t.layer_norm_rows(v[0]))),
        ("reshape", op_grad_error(vec![a], 13, |t, v| t.reshape(v[0], &[2, 6]))),
        ("conv2d", op_grad_error(vec![x.clone(), k.clone()], 14, |t, v| t.conv2d(v[0], v[1], 1, 1))),
        ("conv2d strided", op_grad_error(vec![x.clone(), k], 15, |t, v| t.conv2d(v[0], v[1], 2, 1))),
        ("depthwise_conv2d", op_grad_error(vec![x.clone(), dk], 16, |t, v| t.depthwise_conv2d(v[0], v[1], 1, 1))),
        ("add_channel_bias", op_grad_error(vec![x.clone(), cb], 17, |t, v| t.add_channel_bias(v[0], v[1]))),
        ("concat_channels", op_grad_error(vec![x.clone(), y], 18, |t, v| t.concat_channels(&[v[0], v[1]]))),
        ("upsample_bilinear", op_grad_error(vec![x.clone()], 19, |t, v| t.upsample_bilinear(v[0], 13, 9))),
        ("downsample_avg", op_grad_error(vec![x.clone()], 20, |t, v| t.downsample_avg(v[0], 3))),
        ("tokens", op_grad_error(vec![x], 21, |t, v| {
            let tok = t.to_tokens(v[0])?;
            t.from_tokens(tok, 6, 6)
        })),
        ("attention_block", op_grad_error(att, 22, |t, v| {
            let p = AttentionParams {
                wq: v[1],
                bq: v[2],
                wk: v[3],
                bk: v[4],
                wv: v[5],
                bv: v[6],
                wo: v[7],
                bo: v[8],
            };
            Ok(attention_block(t, v[0], &p)?.out)
        })),
        ("bce_with_logits", op_grad_error(vec![z], 23, move |t, v| t.bce_with_logits(v[0], &soft))),
    ]
}

/// Counts pixels one by one; no shared code with `dice_score`.
pub fn dice_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let (mut x, mut y, mut both) = (0u32, 0u32, 0u32);
    for (&p, &t) in a.values().iter().zip(b.values()) {
        let (p, t) = (p == 1.0, t == 1.0);
        x += p as u32;
        y += t as u32;
        both += (p && t) as u32;
    }
    if x + y == 0 {
        1.0
    } else {
        (2 * both) as f64 / (x + y) as f64
    }
}

/// Composite loss of `model` on one sample; gradients are stored on the model.
pub fn loss_and_grads(model: &mut SegModel, image: &Tensor, mask: &Tensor, wiring: LossWiring) -> f64 {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let x = tape.leaf(image.clone());
    let stages: Vec<usize> = wiring.aux_stage.into_iter().collect();
    let out = model.forward_on(&mut tape, &vars, x, &stages).unwrap();
    let factors = model.stage_factors();
    let (loss, _) = composite_loss(&mut tape, out.main, &out.aux, mask, &factors, wiring).unwrap();
    let grads = tape.backward(loss).unwrap();
    model.store_grads(&vars, &grads);
    tape.value(loss).item()
}

pub fn loss_only(model: &SegModel, image: &Tensor, mask: &Tensor, wiring: LossWiring) -> f64 {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let x = tape.leaf(image.clone());
    let stages: Vec<usize> = wiring.aux_stage.into_iter().collect();
    let out = model.forward_on(&mut tape, &vars, x, &stages).unwrap();
    let factors = model.stage_factors();
    let (loss, _) = composite_loss(&mut tape, out.main, &out.aux, mask, &factors, wiring).unwrap();
    tape.value(loss).item()
}

/// Worst relative error over the listed `(param, element)` coordinates.
pub fn model_fd_error(model: &SegModel, image: &Tensor, mask: &Tensor, wiring: LossWiring, coords: &[(usize, usize)]) -> f64 {
    let mut m = model.clone();
    loss_and_grads(&mut m, image, mask, wiring);
    let mut worst: f64 = 0.0;
    for &(p, j) in coords {
        let analytic = m.params()[p].value.grad.as_ref().map_or(0.0, |g| g[j]);
        let mut probe = model.clone();
        let orig = probe.params()[p].value.values()[j];
        probe.params_mut()[p].value.values_mut()[j] = orig + FD_EPS;
        let plus = loss_only(&probe, image, mask, wiring);
        probe.params_mut()[p].value.values_mut()[j] = orig - FD_EPS;
        let minus = loss_only(&probe, image, mask, wiring);
        let numeric = (plus - minus) / (2.0 * FD_EPS);
        worst = worst.max(grad_rel_error(analytic, numeric, FD_ABS_FLOOR));
    }
    worst
}

/// Model with biases drawn from ±0.2; zero biases would hide bias-gradient
/// bugs behind symmetric values.
pub fn perturbed_model(cfg: switchaux::model::ModelConfig, seed: u64) -> SegModel {
    let mut model = SegModel::new(cfg).unwrap();
    let mut r = rng(seed);
    for p in model.params_mut() {
        if p.name.ends_with(".bias") {
            for v in p.value.values_mut() {
                *v = r.random_range(-0.2..0.2);
            }
        }
    }
    model
}

/// Every coordinate of every parameter.
pub fn all_coords(model: &SegModel) -> Vec<(usize, usize)> {
    model
        .params()
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.value.len()).map(move |j| (p, j)))
        .collect()
}

pub fn tiny_model_config(block_type: switchaux::model::BlockType) -> switchaux::model::ModelConfig {
    switchaux::model::ModelConfig {
        stage_channels: [3, 4, 5, 6],
        decoder_width: 3,
        block_type,
        ..Default::default()
    }
}
