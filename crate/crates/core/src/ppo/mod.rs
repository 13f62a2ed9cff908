//! Clipped-surrogate PPO over mixed-stage minibatches.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::credit::{normalize_advantages, CreditConfig, Transition};
use crate::envsim::StageFlag;
use crate::error::{Error, Result};
use crate::mosat::{out_dim, Checkpoint, Group, MoSatNet};
use crate::numcore::{adam_step, clip_grad_norm, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::policy::{log_prob_var, Actions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip: f64,
    /// Environment steps collected per iteration.
    pub batch: usize,
    pub minibatch: usize,
    pub epochs: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            batch: 50_000,
            minibatch: 2048,
            epochs: 10,
            gamma: 0.995,
            lambda: 0.95,
            policy_lr: 5e-5,
            value_lr: 3e-4,
            max_grad_norm: 40.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clip", self.clip),
            ("policy_lr", self.policy_lr),
            ("value_lr", self.value_lr),
            ("max_grad_norm", self.max_grad_norm),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("ppo.{k} = {v} must be positive")));
            }
        }
        if self.batch == 0 || self.minibatch == 0 || self.epochs == 0 {
            return Err(Error::Config("ppo.batch, ppo.minibatch and ppo.epochs must be positive".into()));
        }
        if self.minibatch > self.batch {
            return Err(Error::Config(format!("ppo.minibatch ({}) exceeds ppo.batch ({})", self.minibatch, self.batch)));
        }
        for (k, v) in [("gamma", self.gamma), ("lambda", self.lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("ppo.{k} = {v} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Clipped surrogate loss `−mean(min(ρ·Â, clip(ρ, 1−ε, 1+ε)·Â))`.
pub fn policy_loss(log_prob_new: &[f64], log_prob_old: &[f64], adv: &[f64], eps: f64) -> f64 {
    let n = adv.len() as f64;
    -log_prob_new
        .iter()
        .zip(log_prob_old)
        .zip(adv)
        .map(|((new, old), a)| {
            let r = (new - old).exp();
            (r * a).min(r.clamp(1.0 - eps, 1.0 + eps) * a)
        })
        .sum::<f64>()
        / n
}

/// Mean squared error against constant targets.
pub fn value_loss(values: &[f64], targets: &[f64]) -> f64 {
    values.iter().zip(targets).map(|(v, r)| (v - r).powi(2)).sum::<f64>() / values.len() as f64
}

/// Scalar diagnostics of one minibatch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_frac: f64,
    pub kl: f64,
}

/// Loss value, gradient per parameter (indexed by `ParamId`) and diagnostics.
pub struct MinibatchLoss {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub stats: LossStats,
}

fn padded_actions(items: &[&Transition], stage: StageFlag, max_len: usize) -> Result<Actions> {
    let k = out_dim(stage);
    match stage {
        StageFlag::Topo => {
            let mut out = vec![0usize; items.len() * max_len];
            for (b, tr) in items.iter().enumerate() {
                let Actions::Discrete(a) = &tr.action else {
                    return Err(Error::Contract("topology transition with continuous actions".into()));
                };
                out[b * max_len..b * max_len + a.len()].copy_from_slice(a);
            }
            Ok(Actions::Discrete(out))
        }
        _ => {
            let mut out = vec![0.0; items.len() * max_len * k];
            for (b, tr) in items.iter().enumerate() {
                let Actions::Continuous(a) = &tr.action else {
                    return Err(Error::Contract(format!("{stage} transition with discrete actions")));
                };
                out[b * max_len * k..b * max_len * k + a.len()].copy_from_slice(a);
            }
            Ok(Actions::Continuous(out))
        }
    }
}

struct LossVars {
    total: Var,
    policy: Var,
    value: Var,
    ratios: Vec<f64>,
}

fn record_loss(tape: &Tape<'_>, vars: &[Var], net: &MoSatNet, items: &[&Transition], adv: &[f64], clip: f64) -> Result<LossVars> {
    if items.is_empty() || items.len() != adv.len() {
        return Err(Error::Dimension(format!("{} transitions with {} advantages", items.len(), adv.len())));
    }
    let n = items.len() as f64;
    let mut policy_terms = Vec::new();
    let mut value_terms = Vec::new();
    let mut ratios = Vec::new();
    // equal-length buckets need no padding
    let mut buckets: Vec<(StageFlag, usize)> = items.iter().map(|t| (t.stage, t.obs.len())).collect();
    buckets.sort();
    buckets.dedup();
    for (stage, len) in buckets {
        let idx: Vec<usize> = (0..items.len()).filter(|&i| items[i].stage == stage && items[i].obs.len() == len).collect();
        let group: Vec<&Transition> = idx.iter().map(|&i| items[i]).collect();
        let pairs: Vec<_> = group.iter().map(|t| (t.obs.as_slice(), t.paths.as_slice())).collect();
        let batch = net.make_batch(&pairs)?;
        let owner: Vec<Option<usize>> = (0..batch.batch_size() * batch.max_len)
            .map(|r| (r % batch.max_len < batch.counts[r / batch.max_len]).then_some(r / batch.max_len))
            .collect();
        let head = net.policy_vars(tape, vars, &batch, stage)?;
        let actions = padded_actions(&group, stage, batch.max_len)?;
        let lp = log_prob_var(tape, stage, head, net.log_std_var(vars, stage), &actions, &owner, group.len())?;
        let old = tape.constant(Tensor::new(vec![group.len()], group.iter().map(|t| t.log_prob).collect())?);
        let ratio = tape.exp(tape.sub(lp, old)?);
        let a = tape.constant(Tensor::new(vec![group.len()], idx.iter().map(|&i| adv[i]).collect())?);
        let surr = tape.min(tape.mul(ratio, a)?, tape.mul(tape.clamp(ratio, 1.0 - clip, 1.0 + clip), a)?)?;
        policy_terms.push(tape.sum(surr));
        ratios.extend_from_slice(tape.get(ratio).data());

        let v = net.value_vars(tape, vars, &batch, stage)?;
        let targets = group
            .iter()
            .map(|t| t.ret.ok_or_else(|| Error::Contract("transition without a value target".into())))
            .collect::<Result<Vec<_>>>()?;
        let r = tape.constant(Tensor::new(vec![group.len(), 1], targets)?);
        let d = tape.sub(v, r)?;
        value_terms.push(tape.sum(tape.mul(d, d)?));
    }
    if ratios.iter().any(|r| !r.is_finite()) {
        return Err(Error::SimulationDiverged("non-finite probability ratio".into()));
    }
    let sum_all = |terms: &[Var]| -> Result<Var> { terms[1..].iter().try_fold(terms[0], |acc, &t| tape.add(acc, t)) };
    let policy = tape.scale(sum_all(&policy_terms)?, -1.0 / n);
    let value = tape.scale(sum_all(&value_terms)?, 1.0 / n);
    let total = tape.add(policy, value)?;
    Ok(LossVars { total, policy, value, ratios })
}

/// `ℒ^policy + ℒ^value` on a minibatch, dispatching each transition to its
/// stage's head and value stack. `adv` holds the (normalized) advantages.
pub fn minibatch_loss(net: &MoSatNet, items: &[&Transition], adv: &[f64], clip: f64) -> Result<MinibatchLoss> {
    let tape = Tape::new();
    let vars = net.bind(&tape);
    let LossVars { total, policy, value, ratios } = record_loss(&tape, &vars, net, items, adv, clip)?;
    let n = items.len() as f64;
    let stats = LossStats {
        policy_loss: tape.item(policy),
        value_loss: tape.item(value),
        clip_frac: ratios.iter().filter(|r| (*r - 1.0).abs() > clip).count() as f64 / n,
        kl: ratios.iter().map(|r| r - 1.0 - r.ln()).sum::<f64>() / n,
    };
    let loss = tape.item(total);
    let g = tape.backward(total)?;
    let grads = net.store().ids().map(|id| g.get_or_zeros(vars[id.0], net.store().get(id).len())).collect();
    Ok(MinibatchLoss { loss, grads, stats })
}

/// The loss value of [`minibatch_loss`] without the backward pass.
pub fn minibatch_objective(net: &MoSatNet, items: &[&Transition], adv: &[f64], clip: f64) -> Result<f64> {
    let tape = Tape::new();
    let vars = net.bind(&tape);
    let l = record_loss(&tape, &vars, net, items, adv, clip)?;
    Ok(tape.item(l.total))
}

const GROUPS: [Group; 4] = [
    Group::Policy,
    Group::Value(StageFlag::Topo),
    Group::Value(StageFlag::Attr),
    Group::Value(StageFlag::Ctrl),
];

fn group_name(g: Group) -> String {
    match g {
        Group::Policy => "policy".into(),
        Group::Value(s) => format!("value_{s}"),
    }
}

/// One Adam state per parameter group: the policy and each stage's value net.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers {
    pub groups: Vec<(Group, AdamState)>,
}

impl Optimizers {
    pub fn new(net: &MoSatNet, cfg: &PpoConfig) -> Self {
        let groups = GROUPS
            .iter()
            .map(|&g| {
                let lr = if g == Group::Policy { cfg.policy_lr } else { cfg.value_lr };
                (g, AdamState::new(AdamConfig::with_lr(lr), net.store(), net.group_params(g)))
            })
            .collect();
        Self { groups }
    }

    /// Stores moments as `adam.<group>.{m,v}.<param>` tensors and step counts in metadata.
    pub fn write_checkpoint(&self, net: &MoSatNet, ck: &mut Checkpoint) {
        for (g, st) in &self.groups {
            let name = group_name(*g);
            ck.meta.insert(format!("adam.{name}.step"), st.step.to_string());
            for (i, &p) in st.params.iter().enumerate() {
                let shape = net.store().get(p).shape().to_vec();
                let pname = net.store().name(p);
                for (tag, buf) in [("m", &st.m[i]), ("v", &st.v[i])] {
                    let t = Tensor::new(shape.clone(), buf.clone()).expect("moment matches parameter");
                    ck.params.push((format!("adam.{name}.{tag}.{pname}"), t));
                }
            }
        }
    }

    pub fn read_checkpoint(&mut self, net: &MoSatNet, ck: &Checkpoint) -> Result<()> {
        for (g, st) in &mut self.groups {
            let name = group_name(*g);
            st.step = ck
                .meta(&format!("adam.{name}.step"))?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad step count for {name}")))?;
            for (i, &p) in st.params.iter().enumerate() {
                let pname = net.store().name(p);
                for (tag, buf) in [("m", &mut st.m[i]), ("v", &mut st.v[i])] {
                    let key = format!("adam.{name}.{tag}.{pname}");
                    let t = ck.param(&key).ok_or_else(|| Error::Checkpoint(format!("missing {key}")))?;
                    if t.len() != buf.len() {
                        return Err(Error::Checkpoint(format!("{key} has {} entries, expected {}", t.len(), buf.len())));
                    }
                    buf.copy_from_slice(t.data());
                }
            }
        }
        Ok(())
    }

    /// Clips the joint gradient norm and steps every group. Returns the
    /// pre-clip norm.
    pub fn step(&mut self, net: &mut MoSatNet, mut grads: Vec<Vec<f64>>, max_norm: f64) -> f64 {
        let norm = clip_grad_norm(&mut grads, max_norm);
        for (_, st) in &mut self.groups {
            let g: Vec<Vec<f64>> = st.params.iter().map(|p| std::mem::take(&mut grads[p.0])).collect();
            adam_step(net.store_mut(), &g, st);
        }
        norm
    }
}

/// Means over the processed minibatches of one update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateMetrics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_frac: f64,
    pub kl: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
    pub skipped: usize,
}

/// Runs `epochs` passes of shuffled minibatch updates over `buf`, whose
/// transitions already carry advantages and targets.
pub fn update<R: Rng + ?Sized>(
    net: &mut MoSatNet,
    opt: &mut Optimizers,
    buf: &[Transition],
    cfg: &PpoConfig,
    credit: &CreditConfig,
    rng: &mut R,
) -> Result<UpdateMetrics> {
    if buf.is_empty() {
        return Err(Error::Contract("update on an empty buffer".into()));
    }
    let raw_adv = buf
        .iter()
        .map(|t| t.advantage.ok_or_else(|| Error::Contract("transition without an advantage".into())))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..buf.len()).collect();
    let mut m = UpdateMetrics::default();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch) {
            let items: Vec<&Transition> = chunk.iter().map(|&i| &buf[i]).collect();
            let mut adv: Vec<f64> = chunk.iter().map(|&i| raw_adv[i]).collect();
            if credit.normalize_advantages {
                let stages: Vec<StageFlag> = items.iter().map(|t| t.stage).collect();
                normalize_advantages(&mut adv, &stages, credit.norm_eps);
            }
            let out = match minibatch_loss(net, &items, &adv, cfg.clip) {
                Ok(out) if out.loss.is_finite() => out,
                Ok(_) | Err(Error::SimulationDiverged(_)) => {
                    log::warn!("skipping minibatch with a non-finite ratio or loss");
                    m.skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            m.grad_norm += opt.step(net, out.grads, cfg.max_grad_norm);
            m.policy_loss += out.stats.policy_loss;
            m.value_loss += out.stats.value_loss;
            m.clip_frac += out.stats.clip_frac;
            m.kl += out.stats.kl;
            m.minibatches += 1;
        }
    }
    if m.minibatches > 0 {
        let k = m.minibatches as f64;
        m.policy_loss /= k;
        m.value_loss /= k;
        m.clip_frac /= k;
        m.kl /= k;
        m.grad_norm /= k;
    }
    Ok(m)
}

#[cfg(test)]
mod tests;
