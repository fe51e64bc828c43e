//! Hierarchical encoder-decoder with one auxiliary head per encoder stage.
//!
//! Each of the four encoder stages downsamples with a non-overlapping
//! strided projection ("patch merge"), normalizes tokens, and runs a stack
//! of blocks. Stage 1 sits closest to the input and has the highest
//! resolution. The decoder projects every stage to a common width,
//! upsamples to stage-1 resolution, concatenates, fuses and predicts a
//! single logit map that is finally resized to the input size.
//!
//! Auxiliary heads are 1x1 projections from a stage's features to one
//! logit channel at that stage's native resolution. They are evaluated only
//! for the stages a caller asks for.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::schedule::NUM_STAGES;
use crate::tensor::{attention_block, AttentionParams, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockType {
    Attention,
    Conv,
}

impl fmt::Display for BlockType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockType::Attention => "attention",
            BlockType::Conv => "conv",
        })
    }
}

impl FromStr for BlockType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "attention" | "attn" => Ok(BlockType::Attention),
            "conv" => Ok(BlockType::Conv),
            _ => invalid(format!("unknown block type `{s}`")),
        }
    }
}

/// Shape and initialization of a [`SegModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stage_channels: [usize; NUM_STAGES],
    /// Downsampling factor applied when entering each stage.
    pub stage_strides: [usize; NUM_STAGES],
    pub blocks_per_stage: usize,
    pub block_type: BlockType,
    /// Common channel width of the decoder's fuse path.
    pub decoder_width: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stage_channels: [16, 32, 64, 96],
            stage_strides: [4, 2, 2, 2],
            blocks_per_stage: 1,
            block_type: BlockType::Attention,
            decoder_width: 16,
            init_seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0) {
            return invalid("stage channels must be positive");
        }
        if self.stage_strides.contains(&0) {
            return invalid("stage strides must be positive");
        }
        if self.blocks_per_stage == 0 || self.decoder_width == 0 {
            return invalid("blocks_per_stage and decoder_width must be positive");
        }
        Ok(())
    }

    /// Cumulative downsampling at the output of each stage.
    pub fn stage_factors(&self) -> [usize; NUM_STAGES] {
        let mut acc = 1;
        self.stage_strides.map(|s| {
            acc *= s;
            acc
        })
    }

    /// Input sides must be divisible by this.
    pub fn input_multiple(&self) -> usize {
        self.stage_factors()[NUM_STAGES - 1]
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.input_multiple();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return invalid(format!("input {h}x{w} is not a positive multiple of {m}"));
        }
        Ok(())
    }
}

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Encoder stage, 1-based.
    Stage(usize),
    /// Auxiliary head of a stage, 1-based.
    AuxHead(usize),
    Decoder,
}

#[derive(Debug, Clone)]
enum BlockLayout {
    Attention {
        wq: usize,
        bq: usize,
        wk: usize,
        bk: usize,
        wv: usize,
        bv: usize,
        wo: usize,
        bo: usize,
    },
    Conv {
        dw_w: usize,
        dw_b: usize,
        pw_w: usize,
        pw_b: usize,
    },
}

#[derive(Debug, Clone)]
struct StageLayout {
    embed_w: usize,
    embed_b: usize,
    stride: usize,
    blocks: Vec<BlockLayout>,
}

#[derive(Debug, Clone, Copy)]
struct Conv1x1 {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    stages: Vec<StageLayout>,
    aux: Vec<Conv1x1>,
    proj: Vec<Conv1x1>,
    fuse: Conv1x1,
    pred: Conv1x1,
}

struct Builder {
    params: Vec<Param>,
    groups: Vec<ParamGroup>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn weight(&mut self, group: ParamGroup, name: String, shape: &[usize], fan_in: usize) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        self.push(group, name, t)
    }

    fn bias(&mut self, group: ParamGroup, name: String, n: usize) -> usize {
        self.push(group, name, Tensor::zeros(&[n]))
    }

    fn conv1x1(&mut self, group: ParamGroup, prefix: &str, c_in: usize, c_out: usize) -> Conv1x1 {
        Conv1x1 {
            w: self.weight(group, format!("{prefix}.weight"), &[c_out, c_in, 1, 1], c_in),
            b: self.bias(group, format!("{prefix}.bias"), c_out),
        }
    }

    fn push(&mut self, group: ParamGroup, name: String, t: Tensor) -> usize {
        self.params.push(Param::new(name, t));
        self.groups.push(group);
        self.params.len() - 1
    }
}

/// Outputs of a forward pass recorded on a tape.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `[1, H, W]` logits at input resolution.
    pub main: Var,
    /// Auxiliary logits keyed by 1-based stage, only for requested stages.
    pub aux: BTreeMap<usize, Var>,
    /// Stage features, stage 1 first.
    pub features: Vec<Var>,
}

/// Anything that maps a `[3, H, W]` image to `[1, H, W]` logits.
pub trait Predictor {
    fn predict_logits(&self, image: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
pub struct SegModel {
    config: ModelConfig,
    params: Vec<Param>,
    groups: Vec<ParamGroup>,
    layout: Layout,
}

impl SegModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            groups: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut c_prev = 3;
        for (i, (&c, &s)) in config
            .stage_channels
            .iter()
            .zip(&config.stage_strides)
            .enumerate()
        {
            let k = i + 1;
            let g = ParamGroup::Stage(k);
            let fan = c_prev * s * s;
            let embed_w = b.weight(g, format!("stage{k}.embed.weight"), &[c, c_prev, s, s], fan);
            let embed_b = b.bias(g, format!("stage{k}.embed.bias"), c);
            let blocks = (0..config.blocks_per_stage)
                .map(|j| {
                    let p = format!("stage{k}.block{}", j + 1);
                    match config.block_type {
                        BlockType::Attention => {
                            let mut lin = |n: &str| {
                                (
                                    b.weight(g, format!("{p}.attn.{n}.weight"), &[c, c], c),
                                    b.bias(g, format!("{p}.attn.{n}.bias"), c),
                                )
                            };
                            let (wq, bq) = lin("q");
                            let (wk, bk) = lin("k");
                            let (wv, bv) = lin("v");
                            let (wo, bo) = lin("out");
                            BlockLayout::Attention { wq, bq, wk, bk, wv, bv, wo, bo }
                        }
                        BlockType::Conv => BlockLayout::Conv {
                            dw_w: b.weight(g, format!("{p}.dw.weight"), &[c, 1, 3, 3], 9),
                            dw_b: b.bias(g, format!("{p}.dw.bias"), c),
                            pw_w: b.weight(g, format!("{p}.pw.weight"), &[c, c, 1, 1], c),
                            pw_b: b.bias(g, format!("{p}.pw.bias"), c),
                        },
                    }
                })
                .collect();
            stages.push(StageLayout {
                embed_w,
                embed_b,
                stride: s,
                blocks,
            });
            c_prev = c;
        }
        let aux = (1..=NUM_STAGES)
            .map(|k| {
                let c = config.stage_channels[k - 1];
                b.conv1x1(ParamGroup::AuxHead(k), &format!("aux{k}"), c, 1)
            })
            .collect();
        let e = config.decoder_width;
        let proj = (1..=NUM_STAGES)
            .map(|k| {
                let c = config.stage_channels[k - 1];
                b.conv1x1(ParamGroup::Decoder, &format!("decoder.proj{k}"), c, e)
            })
            .collect();
        let fuse = b.conv1x1(ParamGroup::Decoder, "decoder.fuse", NUM_STAGES * e, e);
        let pred = b.conv1x1(ParamGroup::Decoder, "decoder.pred", e, 1);
        Ok(Self {
            config,
            params: b.params,
            groups: b.groups,
            layout: Layout {
                stages,
                aux,
                proj,
                fuse,
                pred,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_group(&self, index: usize) -> ParamGroup {
        self.groups[index]
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn stage_factors(&self) -> [usize; NUM_STAGES] {
        self.config.stage_factors()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    /// Replaces parameter values, matching by position, name and shape.
    pub fn load_params(&mut self, params: Vec<Param>) -> Result<()> {
        if params.len() != self.params.len() {
            return invalid(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            ));
        }
        for (dst, src) in self.params.iter().zip(&params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return invalid(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                ));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Records every parameter as a tape leaf, in parameter order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    fn conv1x1(&self, tape: &mut Tape, vars: &[Var], x: Var, c: Conv1x1) -> Result<Var> {
        let y = tape.conv2d(x, vars[c.w], 1, 0)?;
        Ok(tape.add_channel_bias(y, vars[c.b])?)
    }

    fn stage_forward(&self, tape: &mut Tape, vars: &[Var], x: Var, stage: &StageLayout) -> Result<Var> {
        let e = tape.conv2d(x, vars[stage.embed_w], stage.stride, 0)?;
        let e = tape.add_channel_bias(e, vars[stage.embed_b])?;
        let (_, h, w) = tape.value(e).chw()?;
        let tokens = tape.to_tokens(e)?;
        let mut tokens = tape.layer_norm_rows(tokens)?;
        let mut map = None;
        for block in &stage.blocks {
            match *block {
                BlockLayout::Attention { wq, bq, wk, bk, wv, bv, wo, bo } => {
                    if let Some(m) = map.take() {
                        tokens = tape.to_tokens(m)?;
                    }
                    let p = AttentionParams {
                        wq: vars[wq],
                        bq: vars[bq],
                        wk: vars[wk],
                        bk: vars[bk],
                        wv: vars[wv],
                        bv: vars[bv],
                        wo: vars[wo],
                        bo: vars[bo],
                    };
                    tokens = attention_block(tape, tokens, &p)?.out;
                }
                BlockLayout::Conv { dw_w, dw_b, pw_w, pw_b } => {
                    let m = match map.take() {
                        Some(m) => m,
                        None => tape.from_tokens(tokens, h, w)?,
                    };
                    let y = tape.depthwise_conv2d(m, vars[dw_w], 1, 1)?;
                    let y = tape.add_channel_bias(y, vars[dw_b])?;
                    let y = tape.gelu(y)?;
                    let y = tape.conv2d(y, vars[pw_w], 1, 0)?;
                    let y = tape.add_channel_bias(y, vars[pw_b])?;
                    map = Some(tape.add(m, y)?);
                }
            }
        }
        match map {
            Some(m) => Ok(m),
            None => Ok(tape.from_tokens(tokens, h, w)?),
        }
    }

    /// Stage features `[C_k, H / f_k, W / f_k]`, stage 1 first.
    pub fn encoder_forward_on(&self, tape: &mut Tape, vars: &[Var], image: Var) -> Result<Vec<Var>> {
        let (c, h, w) = tape.value(image).chw()?;
        if c != 3 {
            return invalid(format!("expected a 3-channel image, got {c}"));
        }
        self.config.check_input(h, w)?;
        let mut x = image;
        let mut feats = Vec::with_capacity(NUM_STAGES);
        for stage in &self.layout.stages {
            x = self.stage_forward(tape, vars, x, stage)?;
            feats.push(x);
        }
        Ok(feats)
    }

    /// `[1, h, w]` logits from stage `stage` (1-based) features.
    pub fn aux_head_on(&self, tape: &mut Tape, vars: &[Var], feature: Var, stage: usize) -> Result<Var> {
        if !(1..=NUM_STAGES).contains(&stage) {
            return invalid(format!("stage {stage} outside 1..={NUM_STAGES}"));
        }
        let (c, _, _) = tape.value(feature).chw()?;
        let expected = self.config.stage_channels[stage - 1];
        if c != expected {
            return invalid(format!("stage {stage} head expects {expected} channels, got {c}"));
        }
        self.conv1x1(tape, vars, feature, self.layout.aux[stage - 1])
    }

    fn decoder_on(&self, tape: &mut Tape, vars: &[Var], feats: &[Var], out_h: usize, out_w: usize) -> Result<Var> {
        let (_, h1, w1) = tape.value(feats[0]).chw()?;
        let mut parts = Vec::with_capacity(NUM_STAGES);
        for (k, &f) in feats.iter().enumerate() {
            let p = self.conv1x1(tape, vars, f, self.layout.proj[k])?;
            let p = if k == 0 {
                p
            } else {
                tape.upsample_bilinear(p, h1, w1)?
            };
            parts.push(p);
        }
        let cat = tape.concat_channels(&parts)?;
        let fused = self.conv1x1(tape, vars, cat, self.layout.fuse)?;
        let fused = tape.gelu(fused)?;
        let logits = self.conv1x1(tape, vars, fused, self.layout.pred)?;
        Ok(tape.upsample_bilinear(logits, out_h, out_w)?)
    }

    /// Full forward pass; auxiliary heads run only for `aux_stages`.
    pub fn forward_on(&self, tape: &mut Tape, vars: &[Var], image: Var, aux_stages: &[usize]) -> Result<ModelOutput> {
        let (_, h, w) = tape.value(image).chw()?;
        let features = self.encoder_forward_on(tape, vars, image)?;
        let mut aux = BTreeMap::new();
        for &s in aux_stages {
            if !(1..=NUM_STAGES).contains(&s) {
                return invalid(format!("stage {s} outside 1..={NUM_STAGES}"));
            }
            let logits = self.aux_head_on(tape, vars, features[s - 1], s)?;
            aux.insert(s, logits);
        }
        let main = self.decoder_on(tape, vars, &features, h, w)?;
        Ok(ModelOutput { main, aux, features })
    }

    pub fn encoder_forward(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = tape.leaf(image.clone());
        let feats = self.encoder_forward_on(&mut tape, &vars, x)?;
        Ok(feats.iter().map(|&f| tape.value(f).clone()).collect())
    }

    pub fn aux_head_forward(&self, feature: &Tensor, stage: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let f = tape.leaf(feature.clone());
        let out = self.aux_head_on(&mut tape, &vars, f, stage)?;
        Ok(tape.value(out).clone())
    }

    /// Main logits and the requested auxiliary logits as plain tensors.
    pub fn model_forward(&self, image: &Tensor, aux_stages: &[usize]) -> Result<(Tensor, BTreeMap<usize, Tensor>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = tape.leaf(image.clone());
        let out = self.forward_on(&mut tape, &vars, x, aux_stages)?;
        let aux = out
            .aux
            .iter()
            .map(|(&k, &v)| (k, tape.value(v).clone()))
            .collect();
        Ok((tape.value(out.main).clone(), aux))
    }

    /// Copies gradients for every bound parameter from a finished backward pass.
    pub fn store_grads(&mut self, vars: &[Var], grads: &crate::tensor::Gradients) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            p.value.grad = grads.get(v).map(<[f64]>::to_vec);
        }
    }

    /// L2 norm of the stored gradients of each encoder stage.
    pub fn stage_grad_norms(&self) -> [f64; NUM_STAGES] {
        let mut sq = [0.0; NUM_STAGES];
        for (p, g) in self.params.iter().zip(&self.groups) {
            if let (ParamGroup::Stage(k), Some(grad)) = (g, &p.value.grad) {
                sq[k - 1] += grad.iter().map(|v| v * v).sum::<f64>();
            }
        }
        sq.map(f64::sqrt)
    }
}

impl Predictor for SegModel {
    fn predict_logits(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.model_forward(image, &[])?.0)
    }
}
