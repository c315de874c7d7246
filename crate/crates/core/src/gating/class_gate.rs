use crate::autograd::{Param, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{GateComposition, GateConfig, GateProjection};
use crate::tensor::{ops, Element, Rng, Tensor};

/// Language-guided gate: one frozen text embedding `τ_e` per expert and a
/// gate projection `W_g` (`d_model x d_txt`) per block.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassGate {
    config: GateConfig,
    taus: Vec<Tensor>,
    prompts: Vec<String>,
    /// `[block][slot]`; one slot per expert, or a single shared slot.
    projections: Vec<Vec<Param>>,
}

impl ClassGate {
    pub fn new(config: GateConfig, layers: usize) -> Self {
        Self { config, taus: Vec::new(), prompts: Vec::new(), projections: vec![Vec::new(); layers] }
    }

    pub(crate) fn from_parts(
        config: GateConfig,
        taus: Vec<Tensor>,
        prompts: Vec<String>,
        projections: Vec<Vec<Param>>,
    ) -> Self {
        Self { config, taus, prompts, projections }
    }

    pub fn config(&self) -> &GateConfig {
        &self.config
    }

    pub fn experts(&self) -> usize {
        self.taus.len()
    }

    pub fn taus(&self) -> &[Tensor] {
        &self.taus
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn projections(&self) -> &[Vec<Param>] {
        &self.projections
    }

    pub fn projection_name(&self, block: usize, expert: usize) -> String {
        match self.config.projection {
            GateProjection::PerExpert => format!("block{block}.gate.expert{expert}.wg"),
            GateProjection::Shared => format!("block{block}.gate.wg"),
        }
    }

    fn slot(&self, expert: usize) -> usize {
        match self.config.projection {
            GateProjection::PerExpert => expert - 1,
            GateProjection::Shared => 0,
        }
    }

    /// Registers expert `E + 1` with its prompt and embedding. Earlier
    /// projections are frozen; a new one is created when each expert owns
    /// its projection (or for the first expert when shared).
    pub fn add_expert(&mut self, prompt: &str, tau: Tensor, d_model: usize, rng: &mut Rng) -> Result<usize> {
        if tau.numel() != self.config.d_txt {
            return Err(Error::config(format!(
                "text embedding has {} dims, gate expects {}",
                tau.numel(),
                self.config.d_txt
            )));
        }
        let norm = tau.data().iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(Error::config(format!("text embedding must be unit-norm, got norm {norm}")));
        }
        let e = self.taus.len() + 1;
        for p in self.params_mut() {
            p.trainable = false;
        }
        let needs_new = self.config.projection == GateProjection::PerExpert || e == 1;
        if needs_new {
            for block in 0..self.projections.len() {
                let name = self.projection_name(block, e);
                let w = Tensor::randn(
                    [d_model, self.config.d_txt],
                    &mut rng.derive(&name),
                    1.0 / (d_model as f64).sqrt(),
                )?;
                self.projections[block].push(Param::new(name, w, true));
            }
        }
        self.taus.push(tau.reshape([self.config.d_txt, 1])?);
        self.prompts.push(prompt.to_string());
        Ok(e)
    }

    /// Gate weights `GW_e` (each `S x 1`) of the listed experts for the
    /// normalised tokens `y`.
    pub(crate) fn weights<T: Element>(
        &self,
        tape: &mut Tape<T>,
        y: Var,
        block: usize,
        experts: &[usize],
        train: bool,
    ) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(experts.len());
        let mut shared_proj: Option<Var> = None;
        for &e in experts {
            if e == 0 || e > self.experts() {
                return Err(Error::Routing(format!("gate has no expert {e}")));
            }
            let wg = tape.bind(&self.projections[block][self.slot(e)], train)?;
            let tau = tape.constant(T::lift(&self.taus[e - 1]))?;
            let score = match self.config.composition {
                GateComposition::InputProjection => {
                    let s = match (self.config.projection, shared_proj) {
                        (GateProjection::Shared, Some(s)) => s,
                        _ => {
                            let p = tape.matmul(y, wg)?;
                            let s = tape.sigmoid(p)?;
                            if self.config.projection == GateProjection::Shared {
                                shared_proj = Some(s);
                            }
                            s
                        }
                    };
                    tape.matmul(s, tau)?
                }
                GateComposition::EmbeddingProjection => {
                    let v = tape.matmul(wg, tau)?;
                    let v = tape.sigmoid(v)?;
                    tape.matmul(y, v)?
                }
            };
            out.push(tape.sigmoid(score)?);
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.projections.iter().flatten().collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.projections.iter_mut().flatten().collect()
    }
}

/// Eager gate weights `GW (S x E)` for tokens `x` (`S x d_model`), one
/// projection `w_g` (`d_model x d_txt`) and embeddings `taus`.
pub fn class_gate_weights(
    x: &Tensor,
    w_g: &Tensor,
    taus: &[Tensor],
    composition: GateComposition,
) -> Result<Tensor> {
    let (s, d) = x.dims2()?;
    let (wd, dt) = w_g.dims2()?;
    if wd != d {
        return Err(Error::shape(format!("gate projection is {wd}x{dt}, tokens have width {d}")));
    }
    if let Some(t) = taus.iter().find(|t| t.numel() != dt) {
        return Err(Error::shape(format!("text embedding of {} dims, projection has {dt}", t.numel())));
    }
    let e = taus.len();
    let mut out = vec![0.0f32; s * e];
    match composition {
        GateComposition::InputProjection => {
            let proj = x.matmul(w_g)?.sigmoid();
            for i in 0..s {
                for (k, t) in taus.iter().enumerate() {
                    let dot: f64 = proj.row(i).iter().zip(t.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
                    out[i * e + k] = ops::sigmoid(dot) as f32;
                }
            }
        }
        GateComposition::EmbeddingProjection => {
            for (k, t) in taus.iter().enumerate() {
                let v = w_g.matmul(&t.reshape([dt, 1])?)?.sigmoid();
                for i in 0..s {
                    let dot: f64 = x.row(i).iter().zip(v.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
                    out[i * e + k] = ops::sigmoid(dot) as f32;
                }
            }
        }
    }
    Tensor::new([s, e], out)
}

/// Index (1-based) of the largest gate value; ties go to the lowest index.
pub fn top1_route(gw: &[f64]) -> Result<usize> {
    if gw.is_empty() {
        return Err(Error::Contract("top-1 routing over zero experts".into()));
    }
    let mut best = 0;
    for (i, &v) in gw.iter().enumerate() {
        if v > gw[best] {
            best = i;
        }
    }
    Ok(best + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: Vec<f32>) -> Tensor {
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        Tensor::new([v.len()], v.into_iter().map(|x| x / n).collect()).unwrap()
    }

    #[test]
    fn zero_projection_gives_equal_weights_for_equal_sums() {
        let x = Tensor::randn([5, 6], &mut Rng::new(1), 1.0).unwrap();
        let w = Tensor::zeros([6, 4]);
        let t1 = unit(vec![1.0, 1.0, 0.0, 0.0]);
        let t2 = unit(vec![0.0, 0.0, 1.0, 1.0]);
        let gw = class_gate_weights(&x, &w, &[t1, t2], GateComposition::InputProjection).unwrap();
        for i in 0..5 {
            assert_eq!(gw.data()[2 * i], gw.data()[2 * i + 1]);
        }
    }

    #[test]
    fn orthogonal_embeddings_prefer_the_aligned_expert() {
        let t1 = unit(vec![1.0, 0.0]);
        let t2 = unit(vec![0.0, 1.0]);
        let w = Tensor::eye(2);
        let x = Tensor::matrix(1, 2, vec![4.0, -4.0]).unwrap();
        let gw = class_gate_weights(&x, &w, &[t1, t2], GateComposition::InputProjection).unwrap();
        assert!(gw.data()[0] > gw.data()[1]);
        assert!(gw.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn top1_examples() {
        assert_eq!(top1_route(&[0.8, 0.2]).unwrap(), 1);
        assert_eq!(top1_route(&[0.5, 0.5]).unwrap(), 1);
        assert_eq!(top1_route(&[0.1, 0.3, 0.3]).unwrap(), 2);
        assert!(matches!(top1_route(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn top1_tracks_permutations() {
        let gw = [0.2, 0.9, 0.4];
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        for p in perms {
            let permuted: Vec<f64> = p.iter().map(|&i| gw[i]).collect();
            let chosen = top1_route(&permuted).unwrap() - 1;
            assert_eq!(p[chosen], 1);
        }
    }

    #[test]
    fn add_expert_rejects_wrong_dims() {
        let mut g = ClassGate::new(GateConfig { d_txt: 4, ..GateConfig::default() }, 1);
        let err = g.add_expert("x", unit(vec![1.0, 2.0]), 8, &mut Rng::new(0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn per_expert_projection_freezes_the_previous_one() {
        let mut g = ClassGate::new(GateConfig { d_txt: 2, ..GateConfig::default() }, 2);
        let mut rng = Rng::new(0);
        g.add_expert("a", unit(vec![1.0, 0.0]), 8, &mut rng).unwrap();
        g.add_expert("b", unit(vec![0.0, 1.0]), 8, &mut rng).unwrap();
        let names: Vec<(&str, bool)> = g.params().iter().map(|p| (p.name.as_str(), p.trainable)).collect();
        assert_eq!(
            names,
            vec![
                ("block0.gate.expert1.wg", false),
                ("block0.gate.expert2.wg", true),
                ("block1.gate.expert1.wg", false),
                ("block1.gate.expert2.wg", true),
            ]
        );
    }

    #[test]
    fn shared_projection_is_created_once() {
        let cfg = GateConfig { d_txt: 2, projection: GateProjection::Shared, ..GateConfig::default() };
        let mut g = ClassGate::new(cfg, 1);
        let mut rng = Rng::new(0);
        g.add_expert("a", unit(vec![1.0, 0.0]), 8, &mut rng).unwrap();
        g.add_expert("b", unit(vec![0.0, 1.0]), 8, &mut rng).unwrap();
        assert_eq!(g.params().len(), 1);
        assert!(!g.params()[0].trainable);
    }
}
