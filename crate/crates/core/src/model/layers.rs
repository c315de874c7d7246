use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::lora::LoraLinear;
use crate::tensor::{Element, Rng, Tensor};

/// Expert selection for one encoder block, resolved from a routing mode.
pub(crate) enum Plan {
    /// Cumulative stack of experts `1..=k`.
    Stack(usize),
    /// Every listed expert runs on all tokens, scaled by its weight column.
    Weighted(Vec<(usize, Var)>),
    /// Each token runs only its selected expert.
    Top1(Vec<Group>),
}

pub(crate) struct Group {
    pub expert: usize,
    pub rows: Vec<usize>,
    /// Gate values of the selected rows, `|rows| x 1`.
    pub weight: Var,
}

/// Applies a routed adapter linear to `y` (`S x d_in`).
pub(crate) fn routed_linear<T: Element>(
    lin: &LoraLinear,
    tape: &mut Tape<T>,
    y: Var,
    plan: &Plan,
    train: bool,
) -> Result<Var> {
    if lin.adapters().is_empty() {
        return lin.base_forward(tape, y, train);
    }
    match plan {
        Plan::Stack(k) => lin.forward(tape, y, *k, train),
        Plan::Weighted(ws) => {
            let mut h = lin.base_forward(tape, y, train)?;
            for &(e, w) in ws {
                let d = lin.delta_forward(tape, y, e, train)?;
                let d = tape.mul_col(d, w)?;
                h = tape.add(h, d)?;
            }
            Ok(h)
        }
        Plan::Top1(groups) => {
            let (rows, _) = tape.value(y).dims2()?;
            let mut h = lin.base_forward(tape, y, train)?;
            for g in groups {
                let yg = tape.gather_rows(y, &g.rows)?;
                let d = lin.delta_forward(tape, yg, g.expert, train)?;
                let d = tape.mul_col(d, g.weight)?;
                let d = tape.scatter_rows(d, &g.rows, rows)?;
                h = tape.add(h, d)?;
            }
            Ok(h)
        }
    }
}

/// Multi-head self-attention whose four projections carry adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAttention {
    pub heads: usize,
    pub wq: LoraLinear,
    pub wk: LoraLinear,
    pub wv: LoraLinear,
    pub wo: LoraLinear,
}

impl LoraAttention {
    pub fn random(prefix: &str, d_model: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::config(format!("{heads} heads do not divide d_model {d_model}")));
        }
        let lin = |name: &str| {
            let mut r = rng.derive(name);
            LoraLinear::random(format!("{prefix}.{name}"), d_model, d_model, &mut r)
        };
        Ok(Self { heads, wq: lin("wq")?, wk: lin("wk")?, wv: lin("wv")?, wo: lin("wo_proj")? })
    }

    pub fn d_model(&self) -> usize {
        self.wq.d_in()
    }

    pub fn linears(&self) -> [&LoraLinear; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }

    pub fn linears_mut(&mut self) -> [&mut LoraLinear; 4] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }

    pub(crate) fn forward<T: Element>(&self, tape: &mut Tape<T>, y: Var, plan: &Plan, train: bool) -> Result<Var> {
        let (_, d) = tape.value(y).dims2()?;
        if d != self.d_model() {
            return Err(Error::shape(format!("attention input width {d}, expected {}", self.d_model())));
        }
        let q = routed_linear(&self.wq, tape, y, plan, train)?;
        let k = routed_linear(&self.wk, tape, y, plan, train)?;
        let v = routed_linear(&self.wv, tape, y, plan, train)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let s = tape.head_scores(q, k, self.heads, scale)?;
        let p = tape.softmax_rows(s)?;
        let mixed = tape.head_mix(p, v, self.heads)?;
        routed_linear(&self.wo, tape, mixed, plan, train)
    }

    /// Eager attention over `x` (`S x d_model`) with experts `1..=active_upto`.
    pub fn apply(&self, x: &Tensor, active_upto: usize) -> Result<Tensor> {
        if x.dims2()?.0 == 0 {
            return Err(Error::shape("attention needs at least one token"));
        }
        let mut tape = Tape::<f32>::new();
        let y = tape.constant(x.clone())?;
        let out = self.forward(&mut tape, y, &Plan::Stack(active_upto), false)?;
        Ok(tape.value(out).clone())
    }
}

/// Feed-forward layer whose experts are adapter pairs on `Wi` and `Wo`.
#[derive(Clone, Debug, PartialEq)]
pub struct MoEFFNLayer {
    pub wi: LoraLinear,
    pub wo: LoraLinear,
}

impl MoEFFNLayer {
    pub fn random(prefix: &str, d_model: usize, d_ff: usize, rng: &mut Rng) -> Result<Self> {
        let wi = LoraLinear::random(format!("{prefix}.wi"), d_ff, d_model, &mut rng.derive("wi"))?;
        let wo = LoraLinear::random(format!("{prefix}.wo"), d_model, d_ff, &mut rng.derive("wo"))?;
        Ok(Self { wi, wo })
    }

    pub fn experts(&self) -> usize {
        self.wi.adapters().len()
    }

    fn check_expert(&self, e: usize) -> Result<()> {
        if e == 0 || e > self.experts() {
            return Err(Error::Routing(format!("unknown expert {e}; layer has {}", self.experts())));
        }
        Ok(())
    }

    /// `FFN_e(y) = (Wo + ΔWo_e) · GeLU((Wi + ΔWi_e) · y)`, optionally reusing
    /// a precomputed `y · Wiᵀ`.
    fn expert<T: Element>(
        &self,
        tape: &mut Tape<T>,
        y: Var,
        base_i: Option<Var>,
        e: usize,
        train: bool,
    ) -> Result<Var> {
        let bi = match base_i {
            Some(v) => v,
            None => self.wi.base_forward(tape, y, train)?,
        };
        let di = self.wi.delta_forward(tape, y, e, train)?;
        let hi = tape.add(bi, di)?;
        let a = tape.gelu(hi)?;
        let bo = self.wo.base_forward(tape, a, train)?;
        let dout = self.wo.delta_forward(tape, a, e, train)?;
        tape.add(bo, dout)
    }

    pub(crate) fn forward<T: Element>(&self, tape: &mut Tape<T>, y: Var, plan: &Plan, train: bool) -> Result<Var> {
        match plan {
            Plan::Stack(k) => {
                let h = self.wi.forward(tape, y, *k, train)?;
                let a = tape.gelu(h)?;
                self.wo.forward(tape, a, *k, train)
            }
            Plan::Weighted(ws) => {
                if ws.is_empty() {
                    let z = tape.value(y).clone().map(|_| T::ZERO);
                    return tape.constant(z);
                }
                let base_i = self.wi.base_forward(tape, y, train)?;
                let mut out: Option<Var> = None;
                for &(e, w) in ws {
                    self.check_expert(e)?;
                    let o = self.expert(tape, y, Some(base_i), e, train)?;
                    let o = tape.mul_col(o, w)?;
                    out = Some(match out {
                        Some(acc) => tape.add(acc, o)?,
                        None => o,
                    });
                }
                Ok(out.expect("non-empty"))
            }
            Plan::Top1(groups) => {
                let (rows, _) = tape.value(y).dims2()?;
                let mut out: Option<Var> = None;
                for g in groups {
                    self.check_expert(g.expert)?;
                    let yg = tape.gather_rows(y, &g.rows)?;
                    let o = self.expert(tape, yg, None, g.expert, train)?;
                    let o = tape.mul_col(o, g.weight)?;
                    let o = tape.scatter_rows(o, &g.rows, rows)?;
                    out = Some(match out {
                        Some(acc) => tape.add(acc, o)?,
                        None => o,
                    });
                }
                out.ok_or_else(|| Error::Routing("top-1 plan selected no tokens".into()))
            }
        }
    }

    /// Eager single-expert forward `FFN_e(x)` for `x: S x d_model`.
    pub fn expert_forward(&self, x: &Tensor, e: usize) -> Result<Tensor> {
        self.check_expert(e)?;
        let mut tape = Tape::<f32>::new();
        let y = tape.constant(x.clone())?;
        let out = self.expert(&mut tape, y, None, e, false)?;
        Ok(tape.value(out).clone())
    }

    /// Eager base FFN `Wo · GeLU(Wi · x)`.
    pub fn base_forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let y = tape.constant(x.clone())?;
        let out = self.forward(&mut tape, y, &Plan::Stack(0), false)?;
        Ok(tape.value(out).clone())
    }

    /// Eager mixture `y_s = Σ_e G[s, e] · FFN_e(x_s)` for `G: S x E`.
    /// Experts with weight zero on a token are not evaluated for it.
    pub fn moe_combine(&self, x: &Tensor, g: &Tensor) -> Result<Tensor> {
        let (s, d) = x.dims2()?;
        let (gs, ge) = g.dims2()?;
        if gs != s || ge != self.experts() {
            return Err(Error::shape(format!(
                "gate weights {gs}x{ge} for {s} tokens and {} experts",
                self.experts()
            )));
        }
        let mut out = vec![0.0f32; s * d];
        for e in 1..=ge {
            let rows: Vec<usize> = (0..s).filter(|&i| g.data()[i * ge + e - 1] != 0.0).collect();
            if rows.is_empty() {
                continue;
            }
            let mut sub = Vec::with_capacity(rows.len() * d);
            for &i in &rows {
                sub.extend_from_slice(x.row(i));
            }
            let y = self.expert_forward(&Tensor::new([rows.len(), d], sub)?, e)?;
            for (k, &i) in rows.iter().enumerate() {
                let w = g.data()[i * ge + e - 1];
                for c in 0..d {
                    out[i * d + c] += w * y.data()[k * d + c];
                }
            }
        }
        Tensor::new([s, d], out)
    }
}
