//! Transformer segmentation backbone with low-rank experts.
//!
//! Images are cut into `P x P` patches, embedded by a frozen random
//! projection plus a fixed 2-D sinusoidal position code, passed through
//! pre-norm encoder blocks, and classified per token by one head row per
//! class. Token logits are bilinearly upsampled to the pixel grid.

mod config;
mod layers;

use serde::{Deserialize, Serialize};

pub use config::{GateComposition, GateConfig, GateProjection, Mode, ModelConfig, Profile};
pub use layers::{LoraAttention, MoEFFNLayer};
pub(crate) use layers::{Group, Plan};

use crate::autograd::{Param, Tape, Var};
use crate::error::{Error, Result};
use crate::gating::ClassGate;
use crate::lora::LoraLinear;
use crate::tensor::{Element, Rng, Tensor};

pub(crate) const LN_EPS: f64 = 1e-5;

/// How experts are selected during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Routing {
    /// Task-level: experts `1..=k` stacked on every adapted layer.
    Stack(usize),
    /// Class-level training: every expert weighted by its gate value.
    Soft,
    /// Class-level inference: each token uses its highest-gated expert.
    Top1,
    /// Top-1 routing restricted to experts `1..=k`, the model as it stood
    /// after step `k`.
    Top1Upto(usize),
    /// Class-level: only expert `e`, still scaled by its gate value.
    Forced(usize),
}

/// Whether a training step is in progress.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    #[default]
    Idle,
    Training,
}

/// One class's logit row, owned by the step that introduced it.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadRow {
    pub class_id: u16,
    pub step: usize,
    pub w: Param,
    pub b: Param,
}

impl HeadRow {
    pub fn new(step: usize, class_id: u16, d_model: usize) -> Self {
        let prefix = format!("head.step{step}.class{class_id}");
        Self {
            class_id,
            step,
            w: Param::new(format!("{prefix}.w"), Tensor::zeros([1, d_model]), true),
            b: Param::new(format!("{prefix}.b"), Tensor::zeros([1, 1]), true),
        }
    }

    pub fn freeze(&mut self) {
        self.w.trainable = false;
        self.b.trainable = false;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub attn: LoraAttention,
    pub ffn: MoEFFNLayer,
}

/// Result of a forward pass recorded on a tape.
pub struct Forward {
    /// Pixel logits, `(H*W) x C`, columns in head-row order.
    pub logits: Var,
    /// Class id of each logit column.
    pub classes: Vec<u16>,
    /// Per block, the expert each token was routed to (class-level only).
    pub routes: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegBackbone {
    config: ModelConfig,
    mode: Mode,
    patch: Param,
    pos: Tensor,
    upsample: Tensor,
    blocks: Vec<EncoderBlock>,
    head: Vec<HeadRow>,
    gate: Option<ClassGate>,
    experts: usize,
    phase: Phase,
}

/// Fixed 2-D sinusoidal position code, `tokens x d_model`.
fn position_code(grid: usize, d: usize) -> Tensor {
    let quarter = d / 4;
    let mut out = vec![0.0f32; grid * grid * d];
    for t in 0..grid * grid {
        let (i, j) = ((t / grid) as f64, (t % grid) as f64);
        for c in 0..quarter {
            let f = 1.0 / libm::pow(100.0, c as f64 / quarter as f64);
            let row = &mut out[t * d + 4 * c..t * d + 4 * c + 4];
            row[0] = libm::sin(i * f) as f32;
            row[1] = libm::cos(i * f) as f32;
            row[2] = libm::sin(j * f) as f32;
            row[3] = libm::cos(j * f) as f32;
        }
    }
    Tensor::new([grid * grid, d], out).expect("position code shape")
}

/// 1-D linear interpolation weights from `grid` cells to `size` pixels
/// (half-pixel centres, edge clamped).
fn interp_1d(grid: usize, size: usize) -> Vec<[(usize, f64); 2]> {
    let scale = grid as f64 / size as f64;
    (0..size)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(grid - 1);
            let i1 = (i0 + 1).min(grid - 1);
            let l = src - i0 as f64;
            [(i0, 1.0 - l), (i1, l)]
        })
        .collect()
}

/// Bilinear upsampling as a dense `(H*W) x (g*g)` matrix.
fn upsample_matrix(grid: usize, size: usize) -> Tensor {
    let w = interp_1d(grid, size);
    let s = grid * grid;
    let mut out = vec![0.0f32; size * size * s];
    for y in 0..size {
        for x in 0..size {
            let row = &mut out[(y * size + x) * s..(y * size + x + 1) * s];
            for &(gy, wy) in &w[y] {
                for &(gx, wx) in &w[x] {
                    row[gy * grid + gx] += (wy * wx) as f32;
                }
            }
        }
    }
    Tensor::new([size * size, s], out).expect("upsample shape")
}

impl SegBackbone {
    /// Random frozen backbone with no experts and no head rows.
    pub fn new(config: ModelConfig, mode: Mode, gate: Option<GateConfig>, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(seed).derive("backbone");
        let d = config.d_model;
        let p = config.patch;
        let patch = Tensor::randn([p * p, d], &mut root.derive("embed.patch"), 4.0 / p as f64)?;
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let r = root.derive(&format!("block{l}"));
            blocks.push(EncoderBlock {
                attn: LoraAttention::random(&format!("block{l}.attn"), d, config.heads, &mut r.derive("attn"))?,
                ffn: MoEFFNLayer::random(&format!("block{l}.ffn"), d, config.d_ff, &mut r.derive("ffn"))?,
            });
        }
        let gate = match (mode, gate) {
            (Mode::Class, g) => Some(ClassGate::new(g.unwrap_or_default(), config.layers)),
            (Mode::Task, _) => None,
        };
        Ok(Self {
            pos: position_code(config.grid(), d),
            upsample: upsample_matrix(config.grid(), config.image_size),
            patch: Param::frozen("embed.patch", patch),
            config,
            mode,
            blocks,
            head: Vec::new(),
            gate,
            experts: 0,
            phase: Phase::Idle,
        })
    }

    /// Reassembles a backbone from stored parts (checkpoint loading).
    pub(crate) fn from_parts(
        config: ModelConfig,
        mode: Mode,
        patch: Param,
        blocks: Vec<EncoderBlock>,
        head: Vec<HeadRow>,
        gate: Option<ClassGate>,
        experts: usize,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            pos: position_code(config.grid(), config.d_model),
            upsample: upsample_matrix(config.grid(), config.image_size),
            config,
            mode,
            patch,
            blocks,
            head,
            gate,
            experts,
            phase: Phase::Idle,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub(crate) fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
    }

    pub fn blocks(&self) -> &[EncoderBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [EncoderBlock] {
        &mut self.blocks
    }

    pub fn patch(&self) -> &Param {
        &self.patch
    }

    pub fn head(&self) -> &[HeadRow] {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Vec<HeadRow> {
        &mut self.head
    }

    pub fn gate(&self) -> Option<&ClassGate> {
        self.gate.as_ref()
    }

    pub fn gate_mut(&mut self) -> Option<&mut ClassGate> {
        self.gate.as_mut()
    }

    pub(crate) fn set_experts(&mut self, n: usize) {
        self.experts = n;
    }

    /// Every linear layer that carries adapters.
    pub fn adapted_linears(&self) -> Vec<&LoraLinear> {
        let mut out = Vec::new();
        for b in &self.blocks {
            if self.config.attention_adapters {
                out.extend(b.attn.linears());
            }
            out.push(&b.ffn.wi);
            out.push(&b.ffn.wo);
        }
        out
    }

    pub fn adapted_linears_mut(&mut self) -> Vec<&mut LoraLinear> {
        let attn = self.config.attention_adapters;
        let mut out = Vec::new();
        for b in &mut self.blocks {
            if attn {
                out.extend(b.attn.linears_mut());
            }
            out.push(&mut b.ffn.wi);
            out.push(&mut b.ffn.wo);
        }
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.patch];
        for b in &self.blocks {
            for lin in b.attn.linears() {
                out.extend(lin.params());
            }
            out.extend(b.ffn.wi.params());
            out.extend(b.ffn.wo.params());
        }
        if let Some(g) = &self.gate {
            out.extend(g.params());
        }
        for h in &self.head {
            out.push(&h.w);
            out.push(&h.b);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.patch];
        for b in &mut self.blocks {
            for lin in b.attn.linears_mut() {
                out.extend(lin.params_mut());
            }
            out.extend(b.ffn.wi.params_mut());
            out.extend(b.ffn.wo.params_mut());
        }
        if let Some(g) = &mut self.gate {
            out.extend(g.params_mut());
        }
        for h in &mut self.head {
            out.push(&mut h.w);
            out.push(&mut h.b);
        }
        out
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params().into_iter().find(|p| p.name == name)
    }

    pub fn trainable_param_count(&self) -> usize {
        self.params().iter().filter(|p| p.trainable).map(|p| p.numel()).sum()
    }

    pub fn total_param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Head rows used by task-level step `step`, in insertion order.
    pub fn rows_of_step(&self, step: usize) -> Vec<usize> {
        (0..self.head.len()).filter(|&i| self.head[i].step == step).collect()
    }

    /// Head rows of steps `1..=step` (the accumulated label set).
    pub fn rows_upto(&self, step: usize) -> Vec<usize> {
        (0..self.head.len()).filter(|&i| self.head[i].step <= step).collect()
    }

    /// Appends zero-initialised head rows for `classes` owned by `step`.
    pub fn add_head_rows(&mut self, step: usize, classes: &[u16]) -> Result<()> {
        for &c in classes {
            if self.head.iter().any(|h| h.step == step && h.class_id == c) {
                return Err(Error::Validation(format!("step {step} already has a head row for class {c}")));
            }
            self.head.push(HeadRow::new(step, c, self.config.d_model));
        }
        Ok(())
    }

    /// Patch embedding plus position code, `tokens x d_model`.
    pub fn embed(&self, image: &Tensor) -> Result<Tensor> {
        let size = self.config.image_size;
        let (h, w) = image.dims2()?;
        if h != size || w != size {
            return Err(Error::config(format!(
                "image is {h}x{w} but the model expects {size}x{size}"
            )));
        }
        let p = self.config.patch;
        let g = self.config.grid();
        let mut patches = Vec::with_capacity(g * g * p * p);
        let px = image.data();
        for gy in 0..g {
            for gx in 0..g {
                for dy in 0..p {
                    for dx in 0..p {
                        patches.push(px[(gy * p + dy) * size + gx * p + dx] - 0.5);
                    }
                }
            }
        }
        let patches = Tensor::new([g * g, p * p], patches)?;
        patches.matmul(&self.patch.value)?.add(&self.pos)
    }

    fn plan<T: Element>(
        &self,
        tape: &mut Tape<T>,
        y: Var,
        block: usize,
        routing: Routing,
        train: bool,
    ) -> Result<(Plan, Vec<usize>)> {
        let tokens = tape.value(y).dims2()?.0;
        let needs_gate = !matches!(routing, Routing::Stack(_));
        let gate = match (&self.gate, needs_gate) {
            (_, false) => None,
            (Some(g), true) => Some(g),
            (None, true) => {
                return Err(Error::Routing(format!("{routing:?} routing needs a class gate")));
            }
        };
        let experts = self.experts;
        match routing {
            Routing::Stack(k) => {
                if k > experts {
                    return Err(Error::Routing(format!("stack of {k} experts requested, {experts} exist")));
                }
                Ok((Plan::Stack(k), Vec::new()))
            }
            Routing::Forced(e) => {
                if e == 0 || e > experts {
                    return Err(Error::Routing(format!("unknown expert {e}; model has {experts}")));
                }
                let gw = gate.expect("gate").weights(tape, y, block, &[e], train)?;
                Ok((Plan::Weighted(vec![(e, gw[0])]), vec![e; tokens]))
            }
            Routing::Soft | Routing::Top1 | Routing::Top1Upto(_) => {
                let upto = match routing {
                    Routing::Top1Upto(k) => k,
                    _ => experts,
                };
                if upto == 0 || upto > experts {
                    return Err(Error::Routing(format!("cannot route over {upto} experts; model has {experts}")));
                }
                let ids: Vec<usize> = (1..=upto).collect();
                let gw = gate.expect("gate").weights(tape, y, block, &ids, train)?;
                let mut chosen = Vec::with_capacity(tokens);
                for s in 0..tokens {
                    let scores: Vec<f64> = gw.iter().map(|&v| tape.value(v).data()[s].to_f64()).collect();
                    chosen.push(crate::gating::top1_route(&scores)?);
                }
                if routing == Routing::Soft {
                    return Ok((Plan::Weighted(ids.into_iter().zip(gw).collect()), chosen));
                }
                let mut groups = Vec::new();
                for e in 1..=upto {
                    let rows: Vec<usize> = (0..tokens).filter(|&s| chosen[s] == e).collect();
                    if rows.is_empty() {
                        continue;
                    }
                    let weight = tape.gather_rows(gw[e - 1], &rows)?;
                    groups.push(Group { expert: e, rows, weight });
                }
                Ok((Plan::Top1(groups), chosen))
            }
        }
    }

    /// Records a forward pass for `image` (`H x W`) on `tape`, producing
    /// logits over the head rows `rows`.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        image: &Tensor,
        routing: Routing,
        rows: &[usize],
        train: bool,
    ) -> Result<Forward> {
        if rows.is_empty() {
            return Err(Error::Validation("no head rows selected".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.head.len()) {
            return Err(Error::Validation(format!("head row {bad} does not exist")));
        }
        let tokens = self.embed(image)?;
        let mut x = tape.constant(T::lift(&tokens))?;
        let mut routes = Vec::new();
        for (l, block) in self.blocks.iter().enumerate() {
            let y = tape.layer_norm_rows(x, LN_EPS)?;
            let (plan, chosen) = self.plan(tape, y, l, routing, train)?;
            let a = block.attn.forward(tape, y, &plan, train)?;
            x = tape.add(x, a)?;
            let y2 = tape.layer_norm_rows(x, LN_EPS)?;
            let f = block.ffn.forward(tape, y2, &plan, train)?;
            x = tape.add(x, f)?;
            if !chosen.is_empty() {
                routes.push(chosen);
            }
        }
        let xn = tape.layer_norm_rows(x, LN_EPS)?;
        let mut ws = Vec::with_capacity(rows.len());
        let mut bs = Vec::with_capacity(rows.len());
        for &r in rows {
            ws.push(tape.bind(&self.head[r].w, train)?);
            bs.push(tape.bind(&self.head[r].b, train)?);
        }
        let w = tape.concat_rows(&ws)?;
        let b = tape.concat_rows(&bs)?;
        let b = tape.reshape(b, [1, rows.len()])?;
        let tl = tape.matmul_nt(xn, w)?;
        let tl = tape.add_row(tl, b)?;
        let up = tape.constant(T::lift(&self.upsample))?;
        let logits = tape.matmul(up, tl)?;
        let classes = rows.iter().map(|&r| self.head[r].class_id).collect();
        Ok(Forward { logits, classes, routes })
    }

    /// Pixel logits `(H*W) x C` without gradient tracking.
    pub fn logits(&self, image: &Tensor, routing: Routing, rows: &[usize]) -> Result<(Tensor, Vec<u16>)> {
        let mut tape = Tape::<f32>::new();
        let f = self.forward(&mut tape, image, routing, rows, false)?;
        Ok((tape.value(f.logits).clone(), f.classes))
    }

    /// Per-pixel class probabilities `(H*W) x C`.
    pub fn probabilities(&self, image: &Tensor, routing: Routing, rows: &[usize]) -> Result<(Tensor, Vec<u16>)> {
        let (l, c) = self.logits(image, routing, rows)?;
        Ok((l.softmax(1)?, c))
    }

    /// Predicted class id per pixel (argmax, ties to the first column).
    pub fn predict(&self, image: &Tensor, routing: Routing, rows: &[usize]) -> Result<Vec<u16>> {
        let (l, classes) = self.logits(image, routing, rows)?;
        Ok(argmax_classes(&l, &classes))
    }

    /// The per-block token routes of a class-level forward.
    pub fn routes(&self, image: &Tensor, routing: Routing, rows: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut tape = Tape::<f32>::new();
        Ok(self.forward(&mut tape, image, routing, rows, false)?.routes)
    }
}

/// Row-wise argmax of `logits`, mapped through `classes`.
pub fn argmax_classes(logits: &Tensor, classes: &[u16]) -> Vec<u16> {
    let c = classes.len();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            classes[best]
        })
        .collect()
}
