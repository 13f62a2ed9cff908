//! Per-limb factorized stage policies.
//!
//! Topology actions are categorical over three logits per limb; attribute
//! and control actions are diagonal Gaussians with a learnable,
//! state-independent log-std per stage. The joint log-probability of a step
//! is the sum over limbs of the active entries.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::envsim::StageFlag;
use crate::error::{Error, Result};
use crate::mosat::out_dim;
use crate::numcore::{Tape, Tensor, Var};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Which `(limb, dim)` entries of a stage's action enter the log-probability.
/// The root has no parent joint, so its control torque and its joint
/// attributes are never used.
pub fn active_mask(stage: StageFlag, limbs: usize) -> Vec<bool> {
    let k = out_dim(stage);
    (0..limbs)
        .flat_map(|l| {
            (0..k).map(move |d| match stage {
                StageFlag::Topo => true,
                StageFlag::Attr => l > 0 || d < 2,
                StageFlag::Ctrl => l > 0,
            })
        })
        .collect()
}

/// Sampled per-limb actions.
#[derive(Clone, Debug, PartialEq)]
pub enum Actions {
    /// One action index per limb.
    Discrete(Vec<usize>),
    /// `[L × k]` row-major values.
    Continuous(Vec<f64>),
}

impl Actions {
    pub fn limbs(&self, k: usize) -> usize {
        match self {
            Actions::Discrete(a) => a.len(),
            Actions::Continuous(a) => a.len() / k.max(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionRecord {
    pub stage: StageFlag,
    pub actions: Actions,
    /// Joint log-probability under the sampling parameters.
    pub log_prob: f64,
}

/// A stage's per-limb distribution parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum StageDist {
    Categorical { logits: Tensor },
    Gaussian { mean: Tensor, log_std: Vec<f64>, active: Vec<bool> },
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

impl StageDist {
    /// Builds the distribution for `stage` from head outputs `[L × k]`.
    pub fn new(stage: StageFlag, head: Tensor, log_std: Option<&Tensor>) -> Result<Self> {
        let k = out_dim(stage);
        if head.shape().len() != 2 || head.cols() != k {
            return Err(Error::Dimension(format!("{stage} head of shape {:?}", head.shape())));
        }
        match stage {
            StageFlag::Topo => Ok(StageDist::Categorical { logits: head }),
            _ => {
                let ls = log_std.ok_or_else(|| Error::Contract(format!("{stage} policy needs a log-std")))?;
                if ls.len() != k {
                    return Err(Error::Dimension(format!("log-std of length {} for width {k}", ls.len())));
                }
                let active = active_mask(stage, head.rows());
                let log_std = ls.data().iter().map(|x| x.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
                Ok(StageDist::Gaussian { mean: head, log_std, active })
            }
        }
    }

    pub fn limbs(&self) -> usize {
        match self {
            StageDist::Categorical { logits } => logits.rows(),
            StageDist::Gaussian { mean, .. } => mean.rows(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, stage: StageFlag, rng: &mut R) -> ActionRecord {
        let actions = match self {
            StageDist::Categorical { logits } => Actions::Discrete(
                (0..logits.rows())
                    .map(|i| {
                        let p: Vec<f64> = log_softmax_row(logits.row(i)).into_iter().map(f64::exp).collect();
                        let u: f64 = rng.gen();
                        let mut acc = 0.0;
                        for (j, pj) in p.iter().enumerate() {
                            acc += pj;
                            if u < acc {
                                return j;
                            }
                        }
                        p.len() - 1
                    })
                    .collect(),
            ),
            StageDist::Gaussian { mean, log_std, .. } => {
                let k = log_std.len();
                Actions::Continuous(
                    mean.data()
                        .iter()
                        .enumerate()
                        .map(|(i, &m)| {
                            let e: f64 = StandardNormal.sample(rng);
                            m + log_std[i % k].exp() * e
                        })
                        .collect(),
                )
            }
        };
        let log_prob = self.log_prob(&actions).expect("sampled actions fit their distribution");
        ActionRecord { stage, actions, log_prob }
    }

    /// Argmax topology, mean attributes and torques.
    pub fn mode(&self, stage: StageFlag) -> ActionRecord {
        let actions = match self {
            StageDist::Categorical { logits } => Actions::Discrete(
                (0..logits.rows())
                    .map(|i| {
                        let row = logits.row(i);
                        (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
                    })
                    .collect(),
            ),
            StageDist::Gaussian { mean, .. } => Actions::Continuous(mean.data().to_vec()),
        };
        let log_prob = self.log_prob(&actions).expect("mode fits its distribution");
        ActionRecord { stage, actions, log_prob }
    }

    pub fn log_prob(&self, actions: &Actions) -> Result<f64> {
        match (self, actions) {
            (StageDist::Categorical { logits }, Actions::Discrete(a)) => {
                if a.len() != logits.rows() {
                    return Err(Error::Dimension(format!("{} actions for {} limbs", a.len(), logits.rows())));
                }
                a.iter().enumerate().try_fold(0.0, |acc, (i, &j)| {
                    let lp = log_softmax_row(logits.row(i));
                    lp.get(j)
                        .map(|x| acc + x)
                        .ok_or_else(|| Error::Contract(format!("topology action index {j} out of range")))
                })
            }
            (StageDist::Gaussian { mean, log_std, active }, Actions::Continuous(a)) => {
                if a.len() != mean.len() {
                    return Err(Error::Dimension(format!("{} action values for {} means", a.len(), mean.len())));
                }
                let k = log_std.len();
                Ok(mean
                    .data()
                    .iter()
                    .zip(a)
                    .enumerate()
                    .filter(|(i, _)| active[*i])
                    .map(|(i, (&m, &x))| {
                        let ls = log_std[i % k];
                        let z = (x - m) / ls.exp();
                        -0.5 * z * z - ls - 0.5 * (2.0 * PI).ln()
                    })
                    .sum())
            }
            _ => Err(Error::Contract("action kind does not match the distribution".into())),
        }
    }

    pub fn entropy(&self) -> f64 {
        match self {
            StageDist::Categorical { logits } => (0..logits.rows())
                .map(|i| {
                    let lp = log_softmax_row(logits.row(i));
                    -lp.iter().map(|l| l.exp() * l).sum::<f64>()
                })
                .sum(),
            StageDist::Gaussian { log_std, active, .. } => {
                let k = log_std.len();
                active
                    .iter()
                    .enumerate()
                    .filter(|(_, &a)| a)
                    .map(|(i, _)| 0.5 * (2.0 * PI * std::f64::consts::E).ln() + log_std[i % k])
                    .sum()
            }
        }
    }
}

/// Differentiable joint log-probabilities for a padded minibatch.
///
/// `head` is `[B·L_m × k]`. `owner[r]` names the batch item of flat row `r`,
/// or `None` for padding. `actions` holds one entry per flat row
/// (padding ignored). Returns `[B]`.
pub fn log_prob_var(
    tape: &Tape<'_>,
    stage: StageFlag,
    head: Var,
    log_std: Option<Var>,
    actions: &Actions,
    owner: &[Option<usize>],
    items: usize,
) -> Result<Var> {
    let k = out_dim(stage);
    let rows = owner.len();
    match (stage, actions) {
        (StageFlag::Topo, Actions::Discrete(a)) => {
            if a.len() != rows {
                return Err(Error::Dimension(format!("{} topology actions for {rows} rows", a.len())));
            }
            let lp = tape.log_softmax(head)?;
            let picked = tape.pick(lp, a.clone())?;
            tape.index_sum(picked, owner.to_vec(), items)
        }
        (StageFlag::Attr | StageFlag::Ctrl, Actions::Continuous(a)) => {
            if a.len() != rows * k {
                return Err(Error::Dimension(format!("{} action values for {rows}×{k}", a.len())));
            }
            let ls = log_std.ok_or_else(|| Error::Contract(format!("{stage} policy needs a log-std")))?;
            let ls = tape.clamp(ls, LOG_STD_MIN, LOG_STD_MAX);
            let neg_ls = tape.scale(ls, -1.0);
            let inv_sigma = tape.exp(neg_ls);
            let act = tape.constant(Tensor::new(vec![rows, k], a.clone())?);
            let z = tape.mul_row(tape.sub(act, head)?, inv_sigma)?;
            let quad = tape.scale(tape.mul(z, z)?, -0.5);
            let with_norm = tape.add_row(quad, neg_ls)?;
            let c = tape.constant(Tensor::full(&[k], -0.5 * (2.0 * PI).ln()));
            let per = tape.add_row(with_norm, c)?;
            // limb index within its item decides the active entries
            let mut slot = vec![0usize; rows];
            let mut prev: Option<usize> = None;
            let mut t = 0;
            for (r, o) in owner.iter().enumerate() {
                if o.is_some() && *o == prev {
                    t += 1;
                } else {
                    t = 0;
                }
                slot[r] = t;
                if o.is_some() {
                    prev = *o;
                }
            }
            let index = (0..rows * k)
                .map(|e| {
                    let (r, d) = (e / k, e % k);
                    let active = match stage {
                        StageFlag::Attr => slot[r] > 0 || d < 2,
                        _ => slot[r] > 0,
                    };
                    owner[r].filter(|_| active)
                })
                .collect();
            tape.index_sum(per, index, items)
        }
        _ => Err(Error::Contract(format!("action kind does not match stage {stage}"))),
    }
}
