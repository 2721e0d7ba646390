//! Endpoint detection network: a shared two-stream encoder, prompt-filtered
//! state-space enhancement per level, a U-shaped point decoder, counting and
//! line heads, and density-reordered refinement.
//!
//! Feature maps are channel-first `[C, H, W]`; output maps are `[2, H, W]`
//! with channel 0 = anode and channel 1 = cathode.

pub mod checkpoint;
pub mod loss;
pub mod reorder;

use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Unary, Var};
use crate::error::{Error, Result};
use crate::labels::LabelSet;
use crate::nn::{uniform, Conv2d, Ctx, LayerNorm, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::ss2d::{invert_permutation, scan_graph, SelectiveScan, Ss2d};
use crate::tensor::Tensor;

use loss::{boundary_weight, LossComponents, LossWeights};

pub const LEVELS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub widths: [usize; LEVELS],
    /// Cumulative downsampling factor of each level.
    pub strides: [usize; LEVELS],
    /// `[conv, norm, SiLU]` units per stage; units after the first are residual.
    pub blocks_per_stage: usize,
    /// The prompt and current streams always share weights.
    pub share_weights: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 1,
            widths: [16, 32, 64, 96, 128],
            strides: [2, 4, 8, 16, 32],
            blocks_per_stage: 1,
            share_weights: true,
        }
    }
}

impl EncoderConfig {
    /// Small pyramid for 64 x 64 inputs.
    pub fn desk() -> Self {
        EncoderConfig {
            in_channels: 1,
            widths: [12, 16, 24, 32, 32],
            strides: [1, 2, 4, 8, 16],
            blocks_per_stage: 1,
            share_weights: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.share_weights {
            return Err(Error::Config("prompt and current encoders must share weights".into()));
        }
        if self.in_channels == 0 || self.widths.contains(&0) || self.blocks_per_stage == 0 {
            return Err(Error::Config("encoder widths, input channels and depth must be positive".into()));
        }
        let mut prev = 1;
        for &s in &self.strides {
            if s < prev || s % prev != 0 {
                return Err(Error::Config(format!("encoder strides {:?} must be non-decreasing multiples", self.strides)));
            }
            prev = s;
        }
        Ok(())
    }

    fn stage_stride(&self, level: usize) -> usize {
        self.strides[level] / if level == 0 { 1 } else { self.strides[level - 1] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Side of the square network input.
    pub input_size: usize,
    /// Base kernels mixed by the prompt filter.
    pub kernel_bank: usize,
    pub state_dim: usize,
    pub share_scan_params: bool,
    /// Layer norm right after the prompt-filtered convolution.
    pub filter_norm: bool,
    /// Run the four-direction scan inside each PFSSM (identity when off).
    pub pfssm_scan: bool,
    pub refine_width: usize,
    /// Density reordering before the refinement scan (raster order when off).
    pub reorder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            input_size: 512,
            kernel_bank: 8,
            state_dim: 16,
            share_scan_params: false,
            filter_norm: true,
            pfssm_scan: true,
            refine_width: 32,
            reorder: true,
        }
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            encoder: EncoderConfig::desk(),
            input_size: 64,
            kernel_bank: 8,
            state_dim: 4,
            refine_width: 16,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.kernel_bank < 1 {
            return Err(Error::Config("prompt filter needs at least one base kernel".into()));
        }
        if self.state_dim == 0 || self.refine_width == 0 {
            return Err(Error::Config("state and refinement widths must be positive".into()));
        }
        if self.input_size == 0 || self.input_size % self.encoder.strides[LEVELS - 1] != 0 {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of {}",
                self.input_size,
                self.encoder.strides[LEVELS - 1]
            )));
        }
        Ok(())
    }
}

/// Stride-`s` stage of `[conv3x3, LN, SiLU]` units.
#[derive(Clone, Debug)]
pub struct EncoderStage {
    units: Vec<(Conv2d, LayerNorm)>,
}

impl EncoderStage {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, stride: usize, depth: usize, rng: &mut ChaCha8Rng) -> Self {
        let units = (0..depth)
            .map(|k| {
                let (ci, s) = if k == 0 { (cin, stride) } else { (cout, 1) };
                (
                    Conv2d::new(store, &format!("{name}.conv{k}"), ci, cout, 3, s, 1, true, rng),
                    LayerNorm::new(store, &format!("{name}.norm{k}"), cout),
                )
            })
            .collect();
        EncoderStage { units }
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, mut x: Var) -> Var {
        for (k, (conv, norm)) in self.units.iter().enumerate() {
            let y = conv.forward(ctx, x);
            let y = norm.forward(ctx, y);
            let y = ctx.g.silu(y);
            x = if k == 0 { y } else { ctx.g.add(x, y) };
        }
        x
    }
}

/// Dynamic 3x3 convolution whose kernel is a prompt-weighted mix of `K`
/// trainable base kernels.
#[derive(Clone, Debug)]
pub struct PromptFilter {
    pub attention: Linear,
    /// `[K, C * C * 9]`.
    pub bank: ParamId,
    pub channels: usize,
}

impl PromptFilter {
    pub fn new<T: Scalar, R: rand::Rng>(store: &mut ParamStore<T>, name: &str, channels: usize, k: usize, rng: &mut R) -> Result<Self> {
        if k < 1 {
            return Err(Error::Config("prompt filter needs at least one base kernel".into()));
        }
        let attention = Linear::new(store, &format!("{name}.attention"), channels, k, true, rng);
        let bound = 1.0 / ((channels * 9) as f64).sqrt();
        let bank = store.add(format!("{name}.bank"), uniform(rng, &[k, channels * channels * 9], bound));
        Ok(PromptFilter { attention, bank, channels })
    }

    /// Softmax attention over the base kernels, `[K]`.
    pub fn attention<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, prompt: Var) -> Var {
        let gap = ctx.g.global_avg_pool(prompt);
        let logits = self.attention.forward(ctx, gap);
        ctx.g.softmax(logits)
    }

    /// Aggregated kernel `[C, C, 3, 3]`.
    pub fn kernel<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, prompt: Var) -> Var {
        let a = self.attention(ctx, prompt);
        let k = ctx.g.shape(a)[0];
        let a = ctx.g.reshape(a, &[1, k]);
        let bank = ctx.p(self.bank);
        let w = ctx.g.matmul(a, bank);
        let c = self.channels;
        ctx.g.reshape(w, &[c, c, 3, 3])
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, prompt: Var, current: Var) -> Result<Var> {
        let (ps, cs) = (ctx.g.shape(prompt).to_vec(), ctx.g.shape(current).to_vec());
        if ps.first() != Some(&self.channels) || cs.first() != Some(&self.channels) {
            return Err(Error::shape(&cs, &ps));
        }
        let w = self.kernel(ctx, prompt);
        Ok(ctx.g.conv2d(current, w, None, 1, 1, 1))
    }
}

/// Prompt filter, gated activation, four-direction scan, norm and projection,
/// added back onto the current features.
#[derive(Clone, Debug)]
pub struct Pfssm {
    pub filter: PromptFilter,
    pub filter_norm: Option<LayerNorm>,
    pub scan: Option<Ss2d>,
    pub norm: LayerNorm,
    pub proj: Linear,
}

impl Pfssm {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Pfssm {
            filter: PromptFilter::new(store, &format!("{name}.filter"), channels, cfg.kernel_bank, rng)?,
            filter_norm: cfg.filter_norm.then(|| LayerNorm::new(store, &format!("{name}.filter_norm"), channels)),
            scan: cfg
                .pfssm_scan
                .then(|| Ss2d::new(store, &format!("{name}.ss2d"), channels, cfg.state_dim, cfg.share_scan_params, rng)),
            norm: LayerNorm::new(store, &format!("{name}.norm"), channels),
            proj: Linear::new(store, &format!("{name}.proj"), channels, channels, true, rng),
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, prompt: Var, current: Var) -> Result<Var> {
        let mut f = self.filter.forward(ctx, prompt, current)?;
        if let Some(n) = &self.filter_norm {
            f = n.forward(ctx, f);
        }
        f = ctx.g.silu(f);
        if let Some(s) = &self.scan {
            f = s.forward(ctx, f)?;
        }
        let f = self.norm.forward(ctx, f);
        let f = self.proj.forward(ctx, f);
        Ok(ctx.g.add(current, f))
    }
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    lateral: Option<Linear>,
    conv: Conv2d,
    norm: LayerNorm,
}

/// Top-down decoder over the enhanced pyramid with a two-channel head.
#[derive(Clone, Debug)]
pub struct PointPredictor {
    blocks: Vec<DecoderBlock>,
    head: Conv2d,
    strides: [usize; LEVELS],
}

impl PointPredictor {
    fn new<T: Scalar>(store: &mut ParamStore<T>, enc: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let w = enc.widths;
        let blocks = (0..LEVELS)
            .map(|i| DecoderBlock {
                lateral: (i + 1 < LEVELS).then(|| Linear::new(store, &format!("decoder{}.lateral", i + 1), w[i + 1], w[i], true, rng)),
                conv: Conv2d::new(store, &format!("decoder{}.conv", i + 1), w[i], w[i], 3, 1, 1, true, rng),
                norm: LayerNorm::new(store, &format!("decoder{}.norm", i + 1), w[i]),
            })
            .collect();
        let head = Conv2d::new(store, "decoder.head", w[0], 2, 3, 1, 1, true, rng);
        set_bias(store, &head, -2.0);
        PointPredictor {
            blocks,
            head,
            strides: enc.strides,
        }
    }

    /// Returns the finest decoder feature and full-resolution logits.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, pyramid: &[Var]) -> Result<(Var, Var)> {
        if pyramid.len() != LEVELS {
            return Err(Error::Config(format!("point predictor needs {LEVELS} levels, got {}", pyramid.len())));
        }
        let mut d: Option<Var> = None;
        for i in (0..LEVELS).rev() {
            let b = &self.blocks[i];
            let mut x = pyramid[i];
            if let (Some(prev), Some(lat)) = (d, &b.lateral) {
                let l = lat.forward(ctx, prev);
                let u = ctx.g.upsample(l, self.strides[i + 1] / self.strides[i]);
                x = ctx.g.add(x, u);
            }
            let y = b.conv.forward(ctx, x);
            let y = b.norm.forward(ctx, y);
            d = Some(ctx.g.silu(y));
        }
        let d1 = d.unwrap();
        let logits = self.head.forward(ctx, d1);
        Ok((d1, ctx.g.upsample(logits, self.strides[0])))
    }
}

/// `ReLU(Linear(GAP(F5 * DS(M))))` per polarity.
#[derive(Clone, Debug)]
pub struct CountingPredictor {
    regress: [Linear; 2],
}

impl CountingPredictor {
    /// `maps`: full-resolution `[2, H, W]` probabilities; `factor`: level-5 stride.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f5: Var, maps: Var, factor: usize) -> Var {
        let outs: Vec<Var> = (0..2)
            .map(|k| {
                let m = ctx.g.slice_channels(maps, k, 1);
                let m = ctx.g.avg_pool(m, factor);
                let gated = ctx.g.mul_positions(f5, m);
                let gap = ctx.g.global_avg_pool(gated);
                self.regress[k].forward(ctx, gap)
            })
            .collect();
        let n = ctx.g.concat(&outs);
        ctx.g.relu(n)
    }
}

/// `sigmoid(Head(Conv(M * F12) + F12))` per polarity with
/// `F12 = Conv(F1 + Up(F2))`.
#[derive(Clone, Debug)]
pub struct LinePredictor {
    lateral: Linear,
    fuse: Conv2d,
    gate: [Conv2d; 2],
    head: [Conv2d; 2],
    strides: [usize; 2],
}

impl LinePredictor {
    fn new<T: Scalar>(store: &mut ParamStore<T>, enc: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let (c1, c2) = (enc.widths[0], enc.widths[1]);
        let lateral = Linear::new(store, "line.lateral", c2, c1, true, rng);
        let fuse = Conv2d::new(store, "line.fuse", c1, c1, 3, 1, 1, true, rng);
        let gate = [0, 1].map(|k| Conv2d::new(store, &format!("line.gate{k}"), c1, c1, 3, 1, 1, true, rng));
        let head = [0, 1].map(|k| {
            let h = Conv2d::new(store, &format!("line.head{k}"), c1, 1, 1, 1, 1, true, rng);
            set_bias(store, &h, -1.0);
            h
        });
        LinePredictor {
            lateral,
            fuse,
            gate,
            head,
            strides: [enc.strides[0], enc.strides[1]],
        }
    }

    /// Full-resolution line logits `[2, H, W]`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f1: Var, f2: Var, maps: Var) -> Var {
        let l = self.lateral.forward(ctx, f2);
        let u = ctx.g.upsample(l, self.strides[1] / self.strides[0]);
        let s = ctx.g.add(f1, u);
        let f12 = self.fuse.forward(ctx, s);
        let m = ctx.g.avg_pool(maps, self.strides[0]);
        let outs: Vec<Var> = (0..2)
            .map(|k| {
                let mk = ctx.g.slice_channels(m, k, 1);
                let gated = ctx.g.mul_positions(f12, mk);
                let g = self.gate[k].forward(ctx, gated);
                let r = ctx.g.add(g, f12);
                self.head[k].forward(ctx, r)
            })
            .collect();
        let out = ctx.g.concat(&outs);
        ctx.g.upsample(out, self.strides[0])
    }
}

/// Refinement: projection, depthwise conv, SiLU, density reorder, forward and
/// backward selective scans, inverse reorder, norm and a two-channel head
/// added to the coarse logits.
#[derive(Clone, Debug)]
pub struct Drssm {
    proj: Linear,
    depthwise: Conv2d,
    scans: [SelectiveScan; 2],
    norm: LayerNorm,
    head: Linear,
    reorder: bool,
}

impl Drssm {
    fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (c1, d) = (cfg.encoder.widths[0], cfg.refine_width);
        Drssm {
            proj: Linear::new(store, "drssm.proj", c1 + 2, d, true, rng),
            depthwise: Conv2d::new(store, "drssm.depthwise", d, d, 3, 1, d, true, rng),
            scans: [
                SelectiveScan::new(store, "drssm.scan_fwd", d, cfg.state_dim, rng),
                SelectiveScan::new(store, "drssm.scan_bwd", d, cfg.state_dim, rng),
            ],
            norm: LayerNorm::new(store, "drssm.norm", d),
            head: Linear::new(store, "drssm.head", d, 2, true, rng),
            reorder: cfg.reorder,
        }
    }

    /// `f_low`: `[C1, H, W]` at full resolution; returns refined logits.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f_low: Var, coarse_logits: Var) -> Result<Var> {
        let probs = ctx.g.sigmoid(coarse_logits);
        let shape = ctx.g.shape(probs).to_vec();
        let (h, w) = (shape[1], shape[2]);
        let n = h * w;
        let u = ctx.g.concat(&[f_low, probs]);
        let u = self.proj.forward(ctx, u);
        let u = self.depthwise.forward(ctx, u);
        let u = ctx.g.silu(u);
        let order: Vec<usize> = if self.reorder {
            reorder::reorder_index(ctx.g.value(probs))?
        } else {
            (0..n).collect()
        };
        let inverse: Arc<[usize]> = invert_permutation(&order).into();
        let seq = ctx.g.gather(u, order.into());
        let fwd = self.scans[0].bind(ctx);
        let yf = scan_graph(&mut ctx.g, seq, &fwd)?;
        let rev: Arc<[usize]> = (0..n).rev().collect::<Vec<_>>().into();
        let sr = ctx.g.gather(seq, rev.clone());
        let bwd = self.scans[1].bind(ctx);
        let yb = scan_graph(&mut ctx.g, sr, &bwd)?;
        let yb = ctx.g.gather(yb, rev);
        let y = ctx.g.add(yf, yb);
        let y = ctx.g.gather(y, inverse);
        let d = ctx.g.shape(y)[0];
        let y = ctx.g.reshape(y, &[d, h, w]);
        let y = self.norm.forward(ctx, y);
        let y = self.head.forward(ctx, y);
        Ok(ctx.g.add(y, coarse_logits))
    }
}

fn set_bias<T: Scalar>(store: &mut ParamStore<T>, conv: &Conv2d, v: f64) {
    if let Some(b) = conv.bias {
        store.get_mut(b).data_mut().fill(T::lit(v));
    }
}

#[derive(Clone, Debug)]
struct Network {
    stages: Vec<EncoderStage>,
    pfssm: Vec<Pfssm>,
    points: PointPredictor,
    counts: CountingPredictor,
    lines: LinePredictor,
    drssm: Drssm,
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub coarse_logits: Var,
    pub refined_logits: Var,
    pub line_logits: Var,
    /// `[2]` plate counts.
    pub counts: Var,
    pub enhanced: [Var; LEVELS],
}

/// Network outputs as values.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput<T> {
    pub coarse_points: Tensor<T>,
    pub refined_points: Tensor<T>,
    pub lines: Tensor<T>,
    pub counts: [T; 2],
}

/// Per-image training targets at network resolution.
#[derive(Clone, Debug)]
pub struct Targets<T> {
    pub points: [Arc<Tensor<T>>; 2],
    pub point_weights: [Arc<Tensor<T>>; 2],
    pub lines: [Arc<Tensor<T>>; 2],
    pub line_weights: [Arc<Tensor<T>>; 2],
    pub counts: [T; 2],
}

impl<T: Scalar> Targets<T> {
    pub fn from_labels(labels: &LabelSet) -> Self {
        let pm = [&labels.point_mask_anode, &labels.point_mask_cathode].map(|m| Arc::new(m.to_tensor::<T>()));
        let lm = [&labels.line_mask_anode, &labels.line_mask_cathode].map(|m| Arc::new(m.to_tensor::<T>()));
        Targets {
            point_weights: [0, 1].map(|k| Arc::new(boundary_weight(&pm[k]))),
            line_weights: [0, 1].map(|k| Arc::new(boundary_weight(&lm[k]))),
            points: pm,
            lines: lm,
            counts: [T::lit(labels.count_anode as f64), T::lit(labels.count_cathode as f64)],
        }
    }
}

/// Structure loss summed over both channels of a `[2, H, W]` logit map.
pub fn two_channel_loss<T: Scalar>(ctx: &mut Ctx<'_, T>, logits: Var, targets: &[Arc<Tensor<T>>; 2], weights: &[Arc<Tensor<T>>; 2]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for k in 0..2 {
        let z = ctx.g.slice_channels(logits, k, 1);
        let l = ctx.g.structure_loss(z, targets[k].clone(), weights[k].clone())?;
        total = Some(match total {
            None => l,
            Some(t) => ctx.g.add(t, l),
        });
    }
    Ok(total.unwrap())
}

/// The full network plus its parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    store: ParamStore<T>,
    net: Network,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = &config.encoder;
        let mut stages = Vec::with_capacity(LEVELS);
        let mut pfssm = Vec::with_capacity(LEVELS);
        for i in 0..LEVELS {
            let cin = if i == 0 { enc.in_channels } else { enc.widths[i - 1] };
            stages.push(EncoderStage::new(
                &mut store,
                &format!("encoder{}", i + 1),
                cin,
                enc.widths[i],
                enc.stage_stride(i),
                enc.blocks_per_stage,
                &mut rng,
            ));
        }
        for i in 0..LEVELS {
            pfssm.push(Pfssm::new(&mut store, &format!("pfssm{}", i + 1), enc.widths[i], &config, &mut rng)?);
        }
        let points = PointPredictor::new(&mut store, enc, &mut rng);
        let counts = CountingPredictor {
            regress: [0, 1].map(|k| Linear::new(&mut store, &format!("count.regress{k}"), enc.widths[LEVELS - 1], 1, true, &mut rng)),
        };
        let lines = LinePredictor::new(&mut store, enc, &mut rng);
        let drssm = Drssm::new(&mut store, &config, &mut rng);
        Ok(Model {
            config,
            store,
            net: Network {
                stages,
                pfssm,
                points,
                counts,
                lines,
                drssm,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Replaces all parameters; names and shapes must match this architecture.
    pub fn load_store(&mut self, store: ParamStore<T>) -> Result<()> {
        if store.len() != self.store.len() {
            return Err(Error::Checkpoint(format!("expected {} parameters, found {}", self.store.len(), store.len())));
        }
        for id in self.store.ids() {
            if store.name(id) != self.store.name(id) || store.get(id).shape() != self.store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    store.name(id),
                    store.get(id).shape(),
                    self.store.name(id),
                    self.store.get(id).shape()
                )));
            }
        }
        self.store = store;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            net: self.net.clone(),
        }
    }

    pub fn pfssm(&self, level: usize) -> &Pfssm {
        &self.net.pfssm[level]
    }

    pub fn drssm(&self) -> &Drssm {
        &self.net.drssm
    }

    pub fn line_predictor(&self) -> &LinePredictor {
        &self.net.lines
    }

    pub fn counting_predictor(&self) -> &CountingPredictor {
        &self.net.counts
    }

    pub fn point_predictor(&self) -> &PointPredictor {
        &self.net.points
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let s = image.shape();
        let last = self.config.encoder.strides[LEVELS - 1];
        match *s {
            [c, h, w] if c == self.config.encoder.in_channels && h > 0 && w > 0 && h % last == 0 && w % last == 0 => {
                if image.all_finite() {
                    Ok(())
                } else {
                    Err(Error::NonFinite("input image"))
                }
            }
            _ => Err(Error::shape(&[self.config.encoder.in_channels, self.config.input_size, self.config.input_size], s)),
        }
    }

    /// Encoder pyramid of one stream.
    pub fn encode(&self, ctx: &mut Ctx<'_, T>, image: Var) -> [Var; LEVELS] {
        let mut x = image;
        let mut out = [image; LEVELS];
        for (i, stage) in self.net.stages.iter().enumerate() {
            x = stage.forward(ctx, x);
            out[i] = x;
        }
        out
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, prompt: &Tensor<T>, image: &Tensor<T>) -> Result<ForwardVars> {
        self.check_image(prompt)?;
        self.check_image(image)?;
        let p = ctx.g.constant(prompt.clone());
        let x = ctx.g.constant(image.clone());
        let fp = self.encode(ctx, p);
        let fc = self.encode(ctx, x);
        let mut enhanced = fc;
        for i in 0..LEVELS {
            enhanced[i] = self.net.pfssm[i].forward(ctx, fp[i], fc[i])?;
        }
        let (_, coarse_logits) = self.net.points.forward(ctx, &enhanced)?;
        let coarse = ctx.g.sigmoid(coarse_logits);
        let strides = self.config.encoder.strides;
        let counts = self.net.counts.forward(ctx, enhanced[LEVELS - 1], coarse, strides[LEVELS - 1]);
        let line_logits = self.net.lines.forward(ctx, enhanced[0], enhanced[1], coarse);
        let f_low = ctx.g.upsample(enhanced[0], strides[0]);
        let refined_logits = self.net.drssm.forward(ctx, f_low, coarse_logits)?;
        Ok(ForwardVars {
            coarse_logits,
            refined_logits,
            line_logits,
            counts,
            enhanced,
        })
    }

    /// Weighted total loss and its unweighted components.
    pub fn loss(&self, ctx: &mut Ctx<'_, T>, out: &ForwardVars, targets: &Targets<T>, weights: &LossWeights) -> Result<(Var, LossComponents)> {
        let refine = two_channel_loss(ctx, out.refined_logits, &targets.points, &targets.point_weights)?;
        let coarse = two_channel_loss(ctx, out.coarse_logits, &targets.points, &targets.point_weights)?;
        let line = two_channel_loss(ctx, out.line_logits, &targets.lines, &targets.line_weights)?;
        let gold = ctx.g.constant(Tensor::from_vec(&[2], targets.counts.to_vec())?);
        let diff = ctx.g.sub(out.counts, gold);
        let abs = ctx.g.unary(diff, Unary::Abs);
        let count = ctx.g.mean(abs);
        let v = |ctx: &Ctx<'_, T>, x: Var| ctx.g.value(x).data()[0].to_f64_lossy();
        let components = LossComponents {
            refine: v(ctx, refine),
            coarse: v(ctx, coarse),
            count: v(ctx, count),
            line: v(ctx, line),
        };
        let total = weighted_sum(ctx, &[(refine, weights.refine), (coarse, weights.coarse), (count, weights.count), (line, weights.line)]);
        Ok((total, components))
    }

    pub fn predict(&self, prompt: &Tensor<T>, image: &Tensor<T>) -> Result<ModelOutput<T>> {
        let mut ctx = Ctx::inference(&self.store);
        let out = self.forward(&mut ctx, prompt, image)?;
        let sig = |ctx: &Ctx<'_, T>, v: Var| ctx.g.value(v).map(|x| x.sigmoid());
        let counts = ctx.g.value(out.counts).data();
        Ok(ModelOutput {
            coarse_points: sig(&ctx, out.coarse_logits),
            refined_points: sig(&ctx, out.refined_logits),
            lines: sig(&ctx, out.line_logits),
            counts: [counts[0], counts[1]],
        })
    }

    /// Global average of the deepest encoder level.
    pub fn embed(&self, image: &Tensor<T>) -> Result<Vec<f64>> {
        self.check_image(image)?;
        let mut ctx = Ctx::inference(&self.store);
        let x = ctx.g.constant(image.clone());
        let f = self.encode(&mut ctx, x);
        let gap = ctx.g.global_avg_pool(f[LEVELS - 1]);
        Ok(ctx.g.value(gap).data().iter().map(|v| v.to_f64_lossy()).collect())
    }

    /// Parameter count and shapes, one line per tensor.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for (name, t) in self.store.iter() {
            let _ = writeln!(s, "{name:<32} {:<18} {}", format!("{:?}", t.shape()), t.len());
        }
        let _ = writeln!(s, "total parameters: {}", self.store.num_scalars());
        s
    }
}

/// `sum_i w_i * x_i` on the tape.
pub fn weighted_sum<T: Scalar>(ctx: &mut Ctx<'_, T>, terms: &[(Var, f64)]) -> Var {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        let s = ctx.g.scale(v, T::lit(w));
        acc = Some(match acc {
            None => s,
            Some(a) => ctx.g.add(a, s),
        });
    }
    acc.expect("at least one term")
}
