//! Low-rank adapters and the stacked adapter linear layer.
//!
//! Weights are stored `[d_out x d_in]` and applied as `x · Wᵀ`, so an
//! adapter with factors `B: d_out x r` and `A: r x d_in` contributes
//! `(x · Aᵀ) · Bᵀ`. No scaling constant is applied to the delta.

use crate::autograd::{Param, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{matmul_nn, Element, Rng, Tensor};

/// One expert's factor pair for a single linear map.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub expert_id: usize,
    pub rank: usize,
    pub b: Param,
    pub a: Param,
}

fn check_rank(d: usize, k: usize, r: usize) -> Result<()> {
    if r == 0 || 2 * r > d.min(k) {
        return Err(Error::config(format!(
            "adapter rank {r} must satisfy 1 <= r <= min({d}, {k})/2"
        )));
    }
    Ok(())
}

impl LoraAdapter {
    /// Fresh adapter: `B = 0`, `A ~ N(0, 1/r)`, trainable.
    pub fn init(d: usize, k: usize, r: usize, rng: &mut Rng) -> Result<Self> {
        Self::init_named("", 1, d, k, r, rng)
    }

    pub(crate) fn init_named(
        prefix: &str,
        expert_id: usize,
        d: usize,
        k: usize,
        r: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        check_rank(d, k, r)?;
        let a = Tensor::randn([r, k], rng, 1.0 / (r as f64).sqrt())?;
        let (bn, an) = names(prefix, expert_id);
        Ok(Self {
            expert_id,
            rank: r,
            b: Param::new(bn, Tensor::zeros([d, r]), true),
            a: Param::new(an, a, true),
        })
    }

    pub fn frozen(&self) -> bool {
        !self.b.trainable && !self.a.trainable
    }

    pub fn freeze(&mut self) {
        self.b.trainable = false;
        self.a.trainable = false;
    }

    /// `ΔW = B · A`, shape `d x k`.
    pub fn delta(&self) -> Tensor {
        let (d, r) = (self.b.value.shape()[0], self.rank);
        let k = self.a.value.shape()[1];
        let w = matmul_nn(self.b.value.data(), self.a.value.data(), d, r, k);
        Tensor::new([d, k], w).expect("delta shape")
    }

    pub fn param_count(&self) -> usize {
        self.b.numel() + self.a.numel()
    }
}

fn names(prefix: &str, e: usize) -> (String, String) {
    if prefix.is_empty() {
        (format!("expert{e}.B"), format!("expert{e}.A"))
    } else {
        (format!("{prefix}.expert{e}.B"), format!("{prefix}.expert{e}.A"))
    }
}

/// A frozen base weight plus an ordered stack of adapters, at most one of
/// which is trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLinear {
    prefix: String,
    base: Param,
    adapters: Vec<LoraAdapter>,
}

impl LoraLinear {
    /// Wraps `base` (`d_out x d_in`) as a frozen weight named `{prefix}.base`.
    pub fn new(prefix: impl Into<String>, base: Tensor) -> Result<Self> {
        base.dims2()?;
        let prefix = prefix.into();
        let base = Param::frozen(format!("{prefix}.base"), base);
        Ok(Self { prefix, base, adapters: Vec::new() })
    }

    /// Base weight drawn from `N(0, 1/d_in)`.
    pub fn random(prefix: impl Into<String>, d_out: usize, d_in: usize, rng: &mut Rng) -> Result<Self> {
        let w = Tensor::randn([d_out, d_in], rng, 1.0 / (d_in as f64).sqrt())?;
        Self::new(prefix, w)
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn d_out(&self) -> usize {
        self.base.value.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.base.value.shape()[1]
    }

    pub fn base(&self) -> &Param {
        &self.base
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [LoraAdapter] {
        &mut self.adapters
    }

    pub fn freeze_all(&mut self) {
        self.adapters.iter_mut().for_each(LoraAdapter::freeze);
    }

    /// Appends a fresh adapter of rank `r` for the next expert id.
    pub fn add_adapter(&mut self, r: usize, rng: &mut Rng) -> Result<usize> {
        let e = self.adapters.len() + 1;
        let adapter = LoraAdapter::init_named(&self.prefix, e, self.d_out(), self.d_in(), r, rng)?;
        self.push_adapter(adapter)?;
        Ok(e)
    }

    /// Appends an adapter, renaming it to this layer's scheme. Fails if
    /// another adapter is still trainable or the factor shapes disagree.
    pub fn push_adapter(&mut self, mut adapter: LoraAdapter) -> Result<()> {
        if self.adapters.iter().any(|a| !a.frozen()) {
            return Err(Error::State(format!(
                "{}: an unfrozen adapter already exists",
                self.prefix
            )));
        }
        check_rank(self.d_out(), self.d_in(), adapter.rank)?;
        let (d, k, r) = (self.d_out(), self.d_in(), adapter.rank);
        if adapter.b.value.shape() != [d, r] || adapter.a.value.shape() != [r, k] {
            return Err(Error::shape(format!(
                "{}: adapter factors {:?} / {:?} do not fit {d}x{k}",
                self.prefix,
                adapter.b.value.shape(),
                adapter.a.value.shape()
            )));
        }
        let e = self.adapters.len() + 1;
        let (bn, an) = names(&self.prefix, e);
        adapter.expert_id = e;
        adapter.b.name = bn;
        adapter.a.name = an;
        self.adapters.push(adapter);
        Ok(())
    }

    fn check_upto(&self, upto: usize) -> Result<()> {
        if upto > self.adapters.len() {
            return Err(Error::Routing(format!(
                "{}: expert {upto} requested but only {} exist",
                self.prefix,
                self.adapters.len()
            )));
        }
        Ok(())
    }

    /// `x · W0ᵀ` on the tape.
    pub fn base_forward<T: Element>(&self, tape: &mut Tape<T>, x: Var, train: bool) -> Result<Var> {
        let w = tape.bind(&self.base, train)?;
        tape.matmul_nt(x, w)
    }

    /// `(x · Aᵀ) · Bᵀ` for expert `e` (1-based).
    pub fn delta_forward<T: Element>(&self, tape: &mut Tape<T>, x: Var, e: usize, train: bool) -> Result<Var> {
        if e == 0 {
            return Err(Error::Routing(format!("{}: expert ids start at 1", self.prefix)));
        }
        self.check_upto(e)?;
        let ad = &self.adapters[e - 1];
        let a = tape.bind(&ad.a, train)?;
        let b = tape.bind(&ad.b, train)?;
        let xa = tape.matmul_nt(x, a)?;
        tape.matmul_nt(xa, b)
    }

    /// `x · W0ᵀ + Σ_{e ≤ active_upto} (x · A_eᵀ) · B_eᵀ`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, x: Var, active_upto: usize, train: bool) -> Result<Var> {
        self.check_upto(active_upto)?;
        let (_, cols) = tape.value(x).dims2()?;
        if cols != self.d_in() {
            return Err(Error::shape(format!(
                "{}: input width {cols}, expected {}",
                self.prefix,
                self.d_in()
            )));
        }
        let mut h = self.base_forward(tape, x, train)?;
        for e in 1..=active_upto {
            let d = self.delta_forward(tape, x, e, train)?;
            h = tape.add(h, d)?;
        }
        Ok(h)
    }

    /// Eager forward without gradient tracking.
    pub fn apply(&self, x: &Tensor, active_upto: usize) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let v = tape.constant(x.clone())?;
        let h = self.forward(&mut tape, v, active_upto, false)?;
        Ok(tape.value(h).clone())
    }

    /// `W0 + Σ_{e ≤ upto} B_e · A_e`, accumulated in f64.
    pub fn merge_to_dense(&self, upto: usize) -> Result<Tensor> {
        self.check_upto(upto)?;
        let mut acc: Vec<f64> = self.base.value.data().iter().map(|&v| v as f64).collect();
        for ad in &self.adapters[..upto] {
            let (d, r, k) = (self.d_out(), ad.rank, self.d_in());
            let bd: Vec<f64> = ad.b.value.data().iter().map(|&v| v as f64).collect();
            let ak: Vec<f64> = ad.a.value.data().iter().map(|&v| v as f64).collect();
            for (o, v) in acc.iter_mut().zip(matmul_nn(&bd, &ak, d, r, k)) {
                *o += v;
            }
        }
        Tensor::new(self.base.value.shape().to_vec(), acc.into_iter().map(|v| v as f32).collect())
    }

    /// The merged layer: dense base, no adapters.
    pub fn merged(&self, upto: usize) -> Result<Self> {
        Self::new(self.prefix.clone(), self.merge_to_dense(upto)?)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.base];
        for ad in &self.adapters {
            out.push(&ad.b);
            out.push(&ad.a);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.base];
        for ad in &mut self.adapters {
            out.push(&mut ad.b);
            out.push(&mut ad.a);
        }
        out
    }

    pub fn trainable_param_count(&self) -> usize {
        self.params().iter().filter(|p| p.trainable).map(|p| p.numel()).sum()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}
