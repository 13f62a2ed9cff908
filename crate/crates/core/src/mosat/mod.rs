//! Morphology self-attention network.
//!
//! Every limb is a token: its observation is projected to width `D`, the
//! embedding row of its topology path is added, and `N` Pre-LN transformer
//! blocks mix the tokens. Stage heads read every final token; each stage's
//! value stack reads the root token only.

mod batch;
pub mod checkpoint;
mod registry;

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envsim::{LimbObservation, StageFlag, OBS_DIM};
use crate::error::{Error, Result};
use crate::morphology::{TopoPath, ATTR_DIM};
use crate::numcore::{linear_weight, ParamId, ParamStore, Tape, Tensor, Var};

pub use batch::PaddedBatch;
pub use checkpoint::Checkpoint;
pub use registry::TopoRegistry;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoSatConfig {
    pub d_model: usize,
    pub heads: usize,
    pub policy_blocks: usize,
    pub value_blocks: usize,
    pub ffn_ratio: usize,
    pub registry_capacity: usize,
    /// One policy trunk for all three stages, or one per stage.
    pub shared_trunk: bool,
    pub embedding_std: f64,
}

impl Default for MoSatConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            policy_blocks: 3,
            value_blocks: 3,
            ffn_ratio: 4,
            registry_capacity: 512,
            shared_trunk: true,
            embedding_std: 0.02,
        }
    }
}

impl MoSatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "net.d_model ({}) must be a positive multiple of net.heads ({})",
                self.d_model, self.heads
            )));
        }
        if self.ffn_ratio == 0 || self.registry_capacity == 0 {
            return Err(Error::Config("net.ffn_ratio and net.registry_capacity must be positive".into()));
        }
        Ok(())
    }
}

/// Output width of a stage's policy head.
pub fn out_dim(stage: StageFlag) -> usize {
    match stage {
        StageFlag::Topo => 3,
        StageFlag::Attr => ATTR_DIM,
        StageFlag::Ctrl => 1,
    }
}

/// Optimizer grouping of parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    /// Policy trunks, heads, log-stds and the shared path embeddings.
    Policy,
    Value(StageFlag),
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct StackIds {
    proj: (ParamId, ParamId),
    blocks: Vec<BlockIds>,
    ln_f: (ParamId, ParamId),
}

fn linear<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut R) -> (ParamId, ParamId) {
    let w = store.add(format!("{name}.w"), linear_weight(i, o, rng));
    let b = store.add(format!("{name}.b"), Tensor::zeros(&[o]));
    (w, b)
}

fn norm(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    let g = store.add(format!("{name}.g"), Tensor::full(&[d], 1.0));
    let b = store.add(format!("{name}.b"), Tensor::zeros(&[d]));
    (g, b)
}

fn stack<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &MoSatConfig, n: usize, rng: &mut R) -> StackIds {
    let d = cfg.d_model;
    let f = d * cfg.ffn_ratio;
    let proj = linear(store, &format!("{prefix}.proj"), OBS_DIM, d, rng);
    let blocks = (0..n)
        .map(|i| {
            let p = format!("{prefix}.block{i}");
            BlockIds {
                ln1: norm(store, &format!("{p}.ln1"), d),
                q: linear(store, &format!("{p}.attn.q"), d, d, rng),
                k: linear(store, &format!("{p}.attn.k"), d, d, rng),
                v: linear(store, &format!("{p}.attn.v"), d, d, rng),
                o: linear(store, &format!("{p}.attn.o"), d, d, rng),
                ln2: norm(store, &format!("{p}.ln2"), d),
                ff1: linear(store, &format!("{p}.ffn.1"), d, f, rng),
                ff2: linear(store, &format!("{p}.ffn.2"), f, d, rng),
            }
        })
        .collect();
    let ln_f = norm(store, &format!("{prefix}.ln_f"), d);
    StackIds { proj, blocks, ln_f }
}

/// Policy and value networks with their shared topology registry.
#[derive(Clone, Debug)]
pub struct MoSatNet {
    cfg: MoSatConfig,
    store: ParamStore,
    registry: TopoRegistry,
    embedding: ParamId,
    policy: Vec<StackIds>,
    heads: Vec<(ParamId, ParamId)>,
    log_std: Vec<Option<ParamId>>,
    value: Vec<StackIds>,
    value_heads: Vec<(ParamId, ParamId)>,
}

/// Per-item results of a batched forward pass.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    /// One `[L_i × out_dim]` tensor per item, padding removed.
    pub heads: Vec<Tensor>,
    pub values: Vec<f64>,
}

fn stage_name(s: StageFlag) -> &'static str {
    s.as_str()
}

impl MoSatNet {
    pub fn new<R: Rng + ?Sized>(cfg: MoSatConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut store = ParamStore::new();
        let embedding = store.add("topo_pe.table", Tensor::normal(&[cfg.registry_capacity, d], cfg.embedding_std, rng));
        let policy = if cfg.shared_trunk {
            vec![stack(&mut store, "policy.trunk", &cfg, cfg.policy_blocks, rng)]
        } else {
            StageFlag::ALL
                .iter()
                .map(|&s| stack(&mut store, &format!("policy.trunk_{}", stage_name(s)), &cfg, cfg.policy_blocks, rng))
                .collect()
        };
        let heads = StageFlag::ALL
            .iter()
            .map(|&s| linear(&mut store, &format!("policy.head_{}", stage_name(s)), d, out_dim(s), rng))
            .collect();
        let log_std = StageFlag::ALL
            .iter()
            .map(|&s| {
                (s != StageFlag::Topo)
                    .then(|| store.add(format!("policy.log_std_{}", stage_name(s)), Tensor::zeros(&[out_dim(s)])))
            })
            .collect();
        let value: Vec<StackIds> = StageFlag::ALL
            .iter()
            .map(|&s| stack(&mut store, &format!("value_{}.trunk", stage_name(s)), &cfg, cfg.value_blocks, rng))
            .collect();
        let value_heads = StageFlag::ALL
            .iter()
            .map(|&s| linear(&mut store, &format!("value_{}.head", stage_name(s)), d, 1, rng))
            .collect();
        let registry = TopoRegistry::new(cfg.registry_capacity);
        Ok(Self { cfg, store, registry, embedding, policy, heads, log_std, value, value_heads })
    }

    pub fn config(&self) -> &MoSatConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn registry(&self) -> &TopoRegistry {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut TopoRegistry {
        &mut self.registry
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embedding
    }

    /// Parameter ids optimized together.
    pub fn group_params(&self, group: Group) -> Vec<ParamId> {
        let prefix = match group {
            Group::Policy => None,
            Group::Value(s) => Some(format!("value_{}.", stage_name(s))),
        };
        self.store
            .ids()
            .filter(|&id| {
                let name = self.store.name(id);
                match &prefix {
                    None => !name.starts_with("value_"),
                    Some(p) => name.starts_with(p.as_str()),
                }
            })
            .collect()
    }

    /// Scalar counts per component, in a fixed order.
    pub fn param_report(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (name, t) in self.store.iter() {
            let comp = if name.starts_with("topo_pe") {
                "topo_pe".to_string()
            } else {
                name.split('.').next().unwrap_or(name).to_string()
            };
            match out.iter_mut().find(|(c, _)| *c == comp) {
                Some(e) => e.1 += t.len(),
                None => out.push((comp, t.len())),
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Embedding rows for `paths`; unseen paths map to `None` (a zero row).
    pub fn rows_for(&self, paths: &[TopoPath]) -> Vec<Option<usize>> {
        paths.iter().map(|p| self.registry.lookup(p)).collect()
    }

    pub fn make_batch(&self, items: &[(&[LimbObservation], &[TopoPath])]) -> Result<PaddedBatch> {
        let with_rows: Vec<(&[LimbObservation], Vec<Option<usize>>)> =
            items.iter().map(|(o, p)| (*o, self.rows_for(p))).collect();
        PaddedBatch::new(&with_rows)
    }

    /// Registers parameters on `tape`; the result is indexed by `ParamId.0`.
    pub fn bind<'p>(&'p self, tape: &Tape<'p>) -> Vec<Var> {
        self.store.bind(tape)
    }

    /// Token embedding: `φ_h(obs) + E[path]` for every slot.
    fn project(&self, tape: &Tape<'_>, vars: &[Var], s: &StackIds, batch: &PaddedBatch) -> Result<Var> {
        let x = tape.constant(batch.states.clone());
        let h = tape.add_row(tape.matmul(x, vars[s.proj.0 .0])?, vars[s.proj.1 .0])?;
        let e = tape.gather_rows(vars[self.embedding.0], batch.rows.clone())?;
        tape.add(h, e)
    }

    fn encode(
        &self,
        tape: &Tape<'_>,
        vars: &[Var],
        s: &StackIds,
        batch: &PaddedBatch,
        mut attn: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let p = |id: ParamId| vars[id.0];
        let lin = |x: Var, (w, b): (ParamId, ParamId)| -> Result<Var> { tape.add_row(tape.matmul(x, p(w))?, p(b)) };
        let (bsz, len, heads) = (batch.batch_size(), batch.max_len, self.cfg.heads);
        let dk = self.cfg.d_model / heads;
        let mask: Option<Rc<Tensor>> = batch.is_padded().then(|| batch.attention_mask());

        let mut h = self.project(tape, vars, s, batch)?;
        for b in &s.blocks {
            let y = tape.layer_norm(h, p(b.ln1.0), p(b.ln1.1))?;
            let q = tape.split_heads(lin(y, b.q)?, bsz, len, heads)?;
            let k = tape.split_heads(lin(y, b.k)?, bsz, len, heads)?;
            let v = tape.split_heads(lin(y, b.v)?, bsz, len, heads)?;
            let mut scores = tape.scale(tape.batch_matmul(q, k, true)?, 1.0 / (dk as f64).sqrt());
            if let Some(m) = &mask {
                scores = tape.add_mask(scores, m)?;
            }
            let probs = tape.softmax(scores)?;
            if let Some(a) = attn.as_deref_mut() {
                a.push(probs);
            }
            let ctx = tape.merge_heads(tape.batch_matmul(probs, v, false)?, bsz, len, heads)?;
            h = tape.add(h, lin(ctx, b.o)?)?;
            let y = tape.layer_norm(h, p(b.ln2.0), p(b.ln2.1))?;
            let f = lin(tape.silu(lin(y, b.ff1)?), b.ff2)?;
            h = tape.add(h, f)?;
        }
        tape.layer_norm(h, p(s.ln_f.0), p(s.ln_f.1))
    }

    fn policy_stack(&self, stage: StageFlag) -> &StackIds {
        if self.cfg.shared_trunk {
            &self.policy[0]
        } else {
            &self.policy[stage.index()]
        }
    }

    /// Stage head outputs `[B·L_m × out_dim]`, padded rows included.
    pub fn policy_vars(&self, tape: &Tape<'_>, vars: &[Var], batch: &PaddedBatch, stage: StageFlag) -> Result<Var> {
        let tokens = self.encode(tape, vars, self.policy_stack(stage), batch, None)?;
        let (w, b) = self.heads[stage.index()];
        tape.add_row(tape.matmul(tokens, vars[w.0])?, vars[b.0])
    }

    /// Stage values `[B × 1]` read from each item's root token.
    pub fn value_vars(&self, tape: &Tape<'_>, vars: &[Var], batch: &PaddedBatch, stage: StageFlag) -> Result<Var> {
        let tokens = self.encode(tape, vars, &self.value[stage.index()], batch, None)?;
        self.value_readout(tape, vars, tokens, batch, stage)
    }

    /// Value head applied to the root rows of final tokens `[B·L_m × D]`.
    pub fn value_readout(
        &self,
        tape: &Tape<'_>,
        vars: &[Var],
        tokens: Var,
        batch: &PaddedBatch,
        stage: StageFlag,
    ) -> Result<Var> {
        let roots = (0..batch.batch_size()).map(|b| Some(batch.flat(b, 0))).collect();
        let r = tape.gather_rows(tokens, roots)?;
        let (w, b) = self.value_heads[stage.index()];
        tape.add_row(tape.matmul(r, vars[w.0])?, vars[b.0])
    }

    /// Learnable log-std of a Gaussian stage; `None` for topology.
    pub fn log_std_var(&self, vars: &[Var], stage: StageFlag) -> Option<Var> {
        self.log_std[stage.index()].map(|id| vars[id.0])
    }

    pub fn log_std(&self, stage: StageFlag) -> Option<&Tensor> {
        self.log_std[stage.index()].map(|id| self.store.get(id))
    }

    pub fn forward_batch(&self, batch: &PaddedBatch, stage: StageFlag) -> Result<BatchOutput> {
        let tape = Tape::new();
        let vars = self.bind(&tape);
        let out = self.policy_vars(&tape, &vars, batch, stage)?;
        let val = self.value_vars(&tape, &vars, batch, stage)?;
        let (heads, values) = (tape.get(out), tape.get(val));
        let od = out_dim(stage);
        let per_item = batch
            .counts
            .iter()
            .enumerate()
            .map(|(b, &c)| {
                let start = batch.flat(b, 0) * od;
                Tensor::new(vec![c, od], heads.data()[start..start + c * od].to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchOutput { heads: per_item, values: values.data().to_vec() })
    }

    /// Head outputs `[L × out_dim]` and the stage value for one morphology.
    pub fn forward_single(&self, obs: &[LimbObservation], paths: &[TopoPath], stage: StageFlag) -> Result<(Tensor, f64)> {
        let batch = self.make_batch(&[(obs, paths)])?;
        let mut out = self.forward_batch(&batch, stage)?;
        Ok((out.heads.pop().expect("one item"), out.values[0]))
    }

    /// Head outputs only, as used during rollouts.
    pub fn policy_single(&self, obs: &[LimbObservation], paths: &[TopoPath], stage: StageFlag) -> Result<Tensor> {
        let batch = self.make_batch(&[(obs, paths)])?;
        let tape = Tape::new();
        let vars = self.bind(&tape);
        let out = self.policy_vars(&tape, &vars, &batch, stage)?;
        let t = tape.get(out).clone();
        Ok(t)
    }

    pub fn values(&self, batch: &PaddedBatch, stage: StageFlag) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let vars = self.bind(&tape);
        let val = self.value_vars(&tape, &vars, batch, stage)?;
        let v = tape.get(val).data().to_vec();
        Ok(v)
    }

    /// Head-averaged attention weights `[L × L]` of every policy block.
    pub fn attention_maps(&self, obs: &[LimbObservation], paths: &[TopoPath], stage: StageFlag) -> Result<Vec<Tensor>> {
        let batch = self.make_batch(&[(obs, paths)])?;
        let tape = Tape::new();
        let vars = self.bind(&tape);
        let mut probs = Vec::new();
        self.encode(&tape, &vars, self.policy_stack(stage), &batch, Some(&mut probs))?;
        let l = obs.len();
        let h = self.cfg.heads;
        Ok(probs
            .into_iter()
            .map(|p| {
                let t = tape.get(p);
                let mut avg = vec![0.0; l * l];
                for head in t.data().chunks(l * l) {
                    avg.iter_mut().zip(head).for_each(|(a, x)| *a += x / h as f64);
                }
                Tensor::new(vec![l, l], avg).expect("square")
            })
            .collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint {
            params: self.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            registry: self.registry.entries().map(|(p, r)| (p.clone(), r)).collect(),
            ..Checkpoint::default()
        };
        ck.meta.insert("net.config".into(), serde_json::to_string(&self.cfg).expect("config serializes"));
        ck
    }

    /// Rebuilds the network from a checkpoint written by [`MoSatNet::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: MoSatConfig = serde_json::from_str(ck.meta("net.config")?)
            .map_err(|e| Error::Checkpoint(format!("network config: {e}")))?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut net = Self::new(cfg, &mut rng)?;
        let expected = net.store.len();
        let mut seen = 0;
        for (name, t) in &ck.params {
            if net.store.find(name).is_some() {
                net.store.set(name, t.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
                seen += 1;
            }
        }
        if seen != expected {
            return Err(Error::Checkpoint(format!("checkpoint holds {seen} of {expected} network parameters")));
        }
        net.registry = TopoRegistry::from_records(ck.registry.clone(), net.cfg.registry_capacity)?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests;
