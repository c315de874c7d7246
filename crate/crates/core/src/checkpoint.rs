//! Self-describing checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LMOE"  u32 version  u64 metadata_len  metadata (JSON, UTF-8)
//! u64 tensor_count
//! per tensor: u32 name_len, name (UTF-8), u32 ndim, u64 dims[ndim],
//!             u8 frozen, f32 data[prod(dims)] (row-major)
//! ```
//!
//! The metadata carries the architecture, routing mode, gate settings and
//! prompts, head-row ownership, the task registry, per-step records and the
//! run seed. Text embeddings are stored as `gate.tau{e}` and support
//! centroids as `registry.task{t}.centroid`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Param;
use crate::error::{Error, Result};
use crate::gating::{ClassGate, TaskEntry, TaskRegistry};
use crate::lora::{LoraAdapter, LoraLinear};
use crate::model::{
    EncoderBlock, GateConfig, GateProjection, HeadRow, LoraAttention, MoEFFNLayer, Mode, ModelConfig, SegBackbone,
};
use crate::tensor::Tensor;
use crate::train::{Session, TaskRecord};

pub const MAGIC: &[u8; 4] = b"LMOE";
pub const VERSION: u32 = 1;
const META_OFFSET: u64 = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadMeta {
    class_id: u16,
    step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    model: ModelConfig,
    mode: Mode,
    gate: Option<GateConfig>,
    prompts: Vec<String>,
    experts: usize,
    merged_upto: Option<usize>,
    head: Vec<HeadMeta>,
    tasks: Vec<TaskEntry>,
    labels: Vec<u16>,
    history: Vec<TaskRecord>,
    seed: u64,
    step: usize,
}

fn tau_name(e: usize) -> String {
    format!("gate.tau{e}")
}

fn centroid_name(t: usize) -> String {
    format!("registry.task{t}.centroid")
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor, frozen: bool) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    out.push(frozen as u8);
    out.extend(t.to_le_bytes());
}

/// Serialises a session to bytes.
pub fn to_bytes(session: &Session) -> Result<Vec<u8>> {
    let m = &session.model;
    let meta = Metadata {
        model: m.config().clone(),
        mode: m.mode(),
        gate: m.gate().map(|g| g.config().clone()),
        prompts: m.gate().map_or_else(Vec::new, |g| g.prompts().to_vec()),
        experts: m.experts(),
        merged_upto: session.merged_upto,
        head: m.head().iter().map(|h| HeadMeta { class_id: h.class_id, step: h.step }).collect(),
        tasks: session.registry.tasks().to_vec(),
        labels: session.registry.labels().to_vec(),
        history: session.history.clone(),
        seed: session.seed,
        step: session.registry.current_step(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Validation(format!("metadata: {e}")))?;
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(json);

    let mut tensors: Vec<(String, &Tensor, bool)> =
        m.params().into_iter().map(|p| (p.name.clone(), &p.value, !p.trainable)).collect();
    if let Some(g) = m.gate() {
        for (e, tau) in g.taus().iter().enumerate() {
            tensors.push((tau_name(e + 1), tau, true));
        }
    }
    for (t, c) in session.registry.centroids().iter().enumerate() {
        if let Some(c) = c {
            tensors.push((centroid_name(t + 1), c, true));
        }
    }
    out.extend((tensors.len() as u64).to_le_bytes());
    for (name, t, frozen) in tensors {
        put_tensor(&mut out, &name, t, frozen);
    }
    Ok(out)
}

pub fn save(session: &Session, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, to_bytes(session)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Session> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, &path.display().to_string())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Parse { file: self.file.to_string(), offset: offset as u64, msg: msg.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(self.bytes.len(), format!("truncated {what}: need {n} bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| self.err(at, format!("{what} {v} exceeds the file size")))
    }
}

/// Tensors by name with their frozen flag and file offset.
type TensorMap = HashMap<String, (Tensor, bool, usize)>;

struct Store<'a> {
    tensors: TensorMap,
    file: &'a str,
    end: usize,
}

impl Store<'_> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Parse { file: self.file.to_string(), offset: offset as u64, msg: msg.into() }
    }

    fn has(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    fn take(&mut self, name: &str, shape: Option<&[usize]>) -> Result<(Tensor, bool)> {
        let (t, frozen, at) = self
            .tensors
            .remove(name)
            .ok_or_else(|| self.err(self.end, format!("missing tensor `{name}`")))?;
        if let Some(s) = shape {
            if t.shape() != s {
                return Err(self.err(at, format!("tensor `{name}` has shape {:?}, expected {s:?}", t.shape())));
            }
        }
        Ok((t, frozen))
    }

    fn param(&mut self, name: &str, shape: &[usize]) -> Result<Param> {
        let (t, frozen) = self.take(name, Some(shape))?;
        Ok(Param::new(name, t, !frozen))
    }

    fn linear(&mut self, prefix: &str, d_out: usize, d_in: usize, experts: usize) -> Result<LoraLinear> {
        let base_name = format!("{prefix}.base");
        let (base, _) = self.take(&base_name, Some(&[d_out, d_in]))?;
        let mut lin = LoraLinear::new(prefix, base)?;
        for e in 1..=experts {
            let bn = format!("{prefix}.expert{e}.B");
            let r = match self.tensors.get(&bn) {
                Some((t, _, _)) if t.shape().len() == 2 => t.shape()[1],
                _ => return Err(self.err(self.end, format!("missing or malformed tensor `{bn}`"))),
            };
            let b = self.param(&bn, &[d_out, r])?;
            let a = self.param(&format!("{prefix}.expert{e}.A"), &[r, d_in])?;
            lin.push_adapter(LoraAdapter { expert_id: e, rank: r, b, a })?;
        }
        Ok(lin)
    }
}

pub fn from_bytes(bytes: &[u8], file: &str) -> Result<Session> {
    let mut r = Reader { bytes, pos: 0, file };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.err(0, "not an LMOE checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.err(4, format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.len("metadata length")?;
    let meta_start = r.pos;
    let meta_bytes = r.take(meta_len, "metadata")?;
    let text = std::str::from_utf8(meta_bytes)
        .map_err(|e| r.err(meta_start + e.valid_up_to(), "metadata is not UTF-8"))?;
    let meta: Metadata = serde_json::from_str(text).map_err(|e| {
        r.err(meta_start + crate::error::text_offset(text, e.line(), e.column()) as usize, e.to_string())
    })?;

    let count = r.len("tensor count")?;
    let mut tensors = TensorMap::new();
    for _ in 0..count {
        let at = r.pos;
        let n = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "tensor name")?)
            .map_err(|_| r.err(at + 4, "tensor name is not UTF-8"))?
            .to_string();
        let ndim = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            dims.push(r.len("dimension")?);
        }
        let flag_at = r.pos;
        let frozen = match r.take(1, "frozen flag")?[0] {
            0 => false,
            1 => true,
            v => return Err(r.err(flag_at, format!("frozen flag must be 0 or 1, got {v}"))),
        };
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let nbytes = numel.and_then(|n| n.checked_mul(4)).ok_or_else(|| r.err(at, "tensor too large"))?;
        let data_at = r.pos;
        let data: Vec<f32> = r
            .take(nbytes, "tensor data")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(r.err(data_at + 4 * i, format!("tensor `{name}` holds a non-finite value")));
        }
        if tensors.insert(name.clone(), (Tensor::new(dims, data)?, frozen, at)).is_some() {
            return Err(r.err(at, format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(r.err(r.pos, "trailing bytes after the tensor section"));
    }
    let mut store = Store { tensors, file, end: bytes.len() };
    let session = assemble(meta, &mut store)?;
    if let Some((name, (_, _, at))) = store.tensors.iter().min_by_key(|(_, v)| v.2) {
        return Err(store.err(*at, format!("unexpected tensor `{name}`")));
    }
    Ok(session)
}

fn assemble(meta: Metadata, store: &mut Store) -> Result<Session> {
    let cfg = meta.model.clone();
    cfg.validate()?;
    let file = store.file.to_string();
    let invalid = |msg: String| Error::Parse { file: file.clone(), offset: META_OFFSET, msg };
    let (d, ff, p) = (cfg.d_model, cfg.d_ff, cfg.patch);
    let adapter_experts = if meta.merged_upto.is_some() { 0 } else { meta.experts };
    if meta.merged_upto.is_some() && meta.experts != 0 {
        return Err(invalid("merged checkpoint lists experts".into()));
    }
    let patch = store.param("embed.patch", &[p * p, d])?;
    let mut blocks = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let attn_e = if cfg.attention_adapters { adapter_experts } else { 0 };
        let a = |s: &mut Store, n: &str| s.linear(&format!("block{l}.attn.{n}"), d, d, attn_e);
        let attn = LoraAttention { heads: cfg.heads, wq: a(store, "wq")?, wk: a(store, "wk")?, wv: a(store, "wv")?, wo: a(store, "wo_proj")? };
        let ffn = MoEFFNLayer {
            wi: store.linear(&format!("block{l}.ffn.wi"), ff, d, adapter_experts)?,
            wo: store.linear(&format!("block{l}.ffn.wo"), d, ff, adapter_experts)?,
        };
        blocks.push(EncoderBlock { attn, ffn });
    }
    for l in 0..cfg.layers {
        for n in ["attn.wq", "attn.wk", "attn.wv", "attn.wo_proj", "ffn.wi", "ffn.wo"] {
            let extra = format!("block{l}.{n}.expert{}.B", adapter_experts + 1);
            if store.has(&extra) {
                return Err(invalid(format!("tensor `{extra}` exceeds the {} listed experts", meta.experts)));
            }
        }
    }

    let gate = match (meta.mode, &meta.gate) {
        (Mode::Task, None) => None,
        (Mode::Class, Some(gc)) => {
            let e = meta.prompts.len();
            let mut taus = Vec::with_capacity(e);
            for i in 1..=e {
                taus.push(store.take(&tau_name(i), Some(&[gc.d_txt, 1]))?.0);
            }
            let slots = match gc.projection {
                GateProjection::PerExpert => e,
                GateProjection::Shared => e.min(1),
            };
            let probe = ClassGate::new(gc.clone(), cfg.layers);
            let mut projections = Vec::with_capacity(cfg.layers);
            for l in 0..cfg.layers {
                let mut v = Vec::with_capacity(slots);
                for s in 1..=slots {
                    v.push(store.param(&probe.projection_name(l, s), &[d, gc.d_txt])?);
                }
                projections.push(v);
            }
            Some(ClassGate::from_parts(gc.clone(), taus, meta.prompts.clone(), projections))
        }
        (mode, g) => {
            return Err(invalid(format!("{mode:?} mode with gate settings {g:?}")));
        }
    };
    if gate.as_ref().is_some_and(|g| g.experts() != meta.experts) && meta.merged_upto.is_none() {
        return Err(invalid(format!("{} prompts for {} experts", meta.prompts.len(), meta.experts)));
    }

    let mut head = Vec::with_capacity(meta.head.len());
    for h in &meta.head {
        let mut row = HeadRow::new(h.step, h.class_id, d);
        row.w = store.param(&row.w.name.clone(), &[1, d])?;
        row.b = store.param(&row.b.name.clone(), &[1, 1])?;
        head.push(row);
    }

    let mut centroids = Vec::with_capacity(meta.tasks.len());
    for t in 1..=meta.tasks.len() {
        let name = centroid_name(t);
        centroids.push(if store.has(&name) { Some(store.take(&name, None)?.0) } else { None });
    }
    if meta.step != meta.tasks.len() {
        return Err(invalid(format!("step {} with {} registered tasks", meta.step, meta.tasks.len())));
    }
    let model = SegBackbone::from_parts(cfg, meta.mode, patch, blocks, head, gate, meta.experts)?;
    Ok(Session {
        model,
        registry: TaskRegistry::from_parts(meta.tasks, meta.labels, centroids),
        history: meta.history,
        seed: meta.seed,
        merged_upto: meta.merged_upto,
    })
}

/// Session whose adapted linears hold `W0 + Σ_{e ≤ upto} B_e A_e` as dense
/// weights and no adapters. Task-level only.
pub fn merge(session: &Session, upto: usize) -> Result<Session> {
    let m = &session.model;
    if m.mode() != Mode::Task {
        return Err(Error::config("only task-level models can be merged"));
    }
    if session.merged_upto.is_some() {
        return Err(Error::State("checkpoint is already merged".into()));
    }
    if upto > m.experts() {
        return Err(Error::Routing(format!("cannot merge {upto} experts; model has {}", m.experts())));
    }
    let mut blocks = m.blocks().to_vec();
    for b in &mut blocks {
        for lin in b.attn.linears_mut() {
            let upto_here = upto.min(lin.adapters().len());
            *lin = lin.merged(upto_here)?;
        }
        b.ffn.wi = b.ffn.wi.merged(upto)?;
        b.ffn.wo = b.ffn.wo.merged(upto)?;
    }
    let mut head = m.head().to_vec();
    head.iter_mut().for_each(HeadRow::freeze);
    let model = SegBackbone::from_parts(m.config().clone(), m.mode(), m.patch().clone(), blocks, head, None, 0)?;
    Ok(Session {
        model,
        registry: session.registry.clone(),
        history: session.history.clone(),
        seed: session.seed,
        merged_upto: Some(upto),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::{add_expert, ExpertInit};
    use crate::model::Routing;
    use crate::tensor::Rng;

    fn session() -> Session {
        let mut m = SegBackbone::new(ModelConfig::tiny(), Mode::Task, None, 5).unwrap();
        add_expert(&mut m, ExpertInit::Fresh, &Rng::new(5)).unwrap();
        m.add_head_rows(1, &[0, 1]).unwrap();
        let mut s = Session::new(m, 5);
        s.registry.register("a", &[0, 1], None).unwrap();
        s
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let s = session();
        let a = to_bytes(&s).unwrap();
        let back = from_bytes(&a, "mem").unwrap();
        assert_eq!(back.model, s.model);
        assert_eq!(to_bytes(&back).unwrap(), a);
    }

    #[test]
    fn corruption_reports_offsets() {
        let mut a = to_bytes(&session()).unwrap();
        assert!(matches!(from_bytes(&a[..3], "x"), Err(Error::Parse { offset: 3, .. })));
        a[0] = b'X';
        assert!(matches!(from_bytes(&a, "x"), Err(Error::Parse { offset: 0, .. })));
        let good = to_bytes(&session()).unwrap();
        let mut bad = good.clone();
        bad[16] = b'#';
        assert!(matches!(from_bytes(&bad, "x"), Err(Error::Parse { offset: 16, .. })));
        let truncated = &good[..good.len() - 2];
        assert!(matches!(from_bytes(truncated, "x"), Err(Error::Parse { .. })));
    }

    #[test]
    fn merge_upto_zero_is_the_base() {
        let s = session();
        let merged = merge(&s, 0).unwrap();
        assert_eq!(merged.model.experts(), 0);
        for (a, b) in merged.model.adapted_linears().iter().zip(s.model.adapted_linears()) {
            assert!(a.adapters().is_empty());
            assert!(a.base().value.bit_eq(&b.base().value));
        }
        let back = from_bytes(&to_bytes(&merged).unwrap(), "mem").unwrap();
        assert_eq!(back.merged_upto, Some(0));
        let img = Tensor::full([8, 8], 0.3f32);
        let rows = s.model.rows_of_step(1);
        let (x, _) = s.model.logits(&img, Routing::Stack(0), &rows).unwrap();
        let (y, _) = back.model.logits(&img, Routing::Stack(0), &rows).unwrap();
        assert!(x.bit_eq(&y));
    }
}
