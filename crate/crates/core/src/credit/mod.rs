//! Stage-split advantage estimation over gathered rollout buffers.
//!
//! Control steps use GAE. Design steps earn no reward themselves, so their
//! advantage is the undiscounted return of the rest of the episode minus
//! their value:
//!
//! ```text
//! U_t = r_t + U_{t+1}·(1 − 𝕋_t ∨ ℂ_t)
//! δ_t = r_t + γ·V(s_{t+1})·(1 − 𝕋_t) − V(s_t)
//! Â_t = δ_t + γλ·Â_{t+1}·(1 − 𝕋_t ∨ ℂ_t)     control
//! Â_t = U_t − V(s_t)                          design
//! R̂_t = V(s_t) + Â_t
//! ```

use serde::{Deserialize, Serialize};

use crate::envsim::{LimbObservation, StageFlag};
use crate::error::{Error, Result};
use crate::morphology::TopoPath;
use crate::policy::Actions;

/// One stored step of an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub stage: StageFlag,
    pub reward: f64,
    /// Stage-matched value of `s_t`.
    pub value: f64,
    /// Value of `s_{t+1}`; 0 when absent.
    pub next_value: f64,
    pub terminated: bool,
    pub truncated: bool,
    /// First step after a reset.
    pub episode_start: bool,
    pub log_prob: f64,
    pub obs: Vec<LimbObservation>,
    pub paths: Vec<TopoPath>,
    pub action: Actions,
    pub advantage: Option<f64>,
    pub ret: Option<f64>,
}

impl Transition {
    /// A transition carrying only the quantities credit assignment reads.
    pub fn bare(stage: StageFlag, reward: f64, value: f64, next_value: f64) -> Self {
        Self {
            stage,
            reward,
            value,
            next_value,
            terminated: false,
            truncated: false,
            episode_start: false,
            log_prob: 0.0,
            obs: Vec::new(),
            paths: Vec::new(),
            action: Actions::Discrete(Vec::new()),
            advantage: None,
            ret: None,
        }
    }

    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CreditMode {
    /// Stage-split estimator.
    Enhanced,
    /// Plain GAE on every step, design steps included.
    Vanilla,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CreditConfig {
    /// Discount inside the design-stage return; 1 keeps it undiscounted.
    pub design_gamma: f64,
    pub mode: CreditMode,
    pub normalize_advantages: bool,
    pub norm_eps: f64,
}

impl Default for CreditConfig {
    fn default() -> Self {
        Self {
            design_gamma: 1.0,
            mode: CreditMode::Enhanced,
            normalize_advantages: true,
            norm_eps: 1e-8,
        }
    }
}

impl CreditConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.design_gamma) {
            return Err(Error::Config(format!("credit.design_gamma = {} must lie in [0, 1]", self.design_gamma)));
        }
        if self.norm_eps <= 0.0 {
            return Err(Error::Config("credit.norm_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Checks that the buffer is a concatenation of complete episodes with
/// reward-free, flag-free design steps and no attached advantages.
pub fn check_buffer(buf: &[Transition]) -> Result<()> {
    let Some(last) = buf.last() else { return Ok(()) };
    for (t, tr) in buf.iter().enumerate() {
        let prev_done = t == 0 || buf[t - 1].done();
        if tr.episode_start != prev_done {
            return Err(Error::BufferIntegrity(if tr.episode_start {
                format!("transition {t} starts an episode but the previous one did not end")
            } else {
                format!("transition {t} follows an episode end without a reset")
            }));
        }
        if tr.stage.is_design() && (tr.reward != 0.0 || tr.done()) {
            return Err(Error::BufferIntegrity(format!("design transition {t} carries a reward or an end flag")));
        }
        if tr.advantage.is_some() || tr.ret.is_some() {
            return Err(Error::BufferIntegrity(format!("transition {t} already has an advantage")));
        }
        if !(tr.reward.is_finite() && tr.value.is_finite() && tr.next_value.is_finite()) {
            return Err(Error::BufferIntegrity(format!("transition {t} holds a non-finite quantity")));
        }
    }
    if !last.done() {
        return Err(Error::BufferIntegrity("buffer ends inside an episode".into()));
    }
    Ok(())
}

fn td_error(tr: &Transition, gamma: f64) -> f64 {
    let boot = if tr.terminated { 0.0 } else { tr.next_value };
    tr.reward + gamma * boot - tr.value
}

/// Attaches `Â_t` and `R̂_t` to every transition in one reverse sweep.
pub fn assign_credit(buf: &mut [Transition], gamma: f64, lambda: f64, cfg: &CreditConfig) -> Result<()> {
    check_buffer(buf)?;
    let (mut u_next, mut a_next) = (0.0, 0.0);
    for tr in buf.iter_mut().rev() {
        let keep = if tr.done() { 0.0 } else { 1.0 };
        let u = tr.reward + cfg.design_gamma * u_next * keep;
        let gae = td_error(tr, gamma) + gamma * lambda * a_next * keep;
        let adv = match (cfg.mode, tr.stage.is_design()) {
            (CreditMode::Enhanced, true) => u - tr.value,
            _ => gae,
        };
        tr.advantage = Some(adv);
        tr.ret = Some(tr.value + adv);
        u_next = u;
        a_next = adv;
    }
    Ok(())
}

/// Enhanced estimator with the default undiscounted design return.
pub fn enhanced_gae(buf: &mut [Transition], gamma: f64, lambda: f64) -> Result<()> {
    assign_credit(buf, gamma, lambda, &CreditConfig::default())
}

/// Standardizes advantages to mean 0, std 1 within each stage separately.
pub fn normalize_advantages(adv: &mut [f64], stages: &[StageFlag], eps: f64) {
    assert_eq!(adv.len(), stages.len(), "one stage per advantage");
    for s in StageFlag::ALL {
        let idx: Vec<usize> = (0..adv.len()).filter(|&i| stages[i] == s).collect();
        if idx.is_empty() {
            continue;
        }
        let n = idx.len() as f64;
        let mean = idx.iter().map(|&i| adv[i]).sum::<f64>() / n;
        let var = idx.iter().map(|&i| (adv[i] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt() + eps;
        for &i in &idx {
            adv[i] = (adv[i] - mean) / sd;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn episode(steps: &[(StageFlag, f64, f64, f64)], terminated: bool) -> Vec<Transition> {
        let mut v: Vec<Transition> = steps.iter().map(|&(s, r, val, nv)| Transition::bare(s, r, val, nv)).collect();
        v[0].episode_start = true;
        let last = v.last_mut().unwrap();
        last.terminated = terminated;
        last.truncated = !terminated;
        v
    }

    fn adv(buf: &[Transition]) -> Vec<f64> {
        buf.iter().map(|t| t.advantage.unwrap()).collect()
    }

    #[test]
    fn worked_example() {
        use StageFlag::*;
        let mut buf = episode(&[(Topo, 0.0, 0.5, 0.5), (Attr, 0.0, 0.5, 0.0), (Ctrl, 1.0, 0.0, 0.0), (Ctrl, 2.0, 0.0, 0.0)], true);
        enhanced_gae(&mut buf, 0.99, 0.95).unwrap();
        assert_eq!(adv(&buf)[..2], [2.5, 2.5]);
    }

    #[test]
    fn unit_discount_gives_monte_carlo_minus_value() {
        let rs = [1.0, -0.5, 2.0, 0.25];
        let vs = [0.3, 0.1, -0.2, 0.7];
        let steps: Vec<_> = (0..4).map(|t| (StageFlag::Ctrl, rs[t], vs[t], if t < 3 { vs[t + 1] } else { 9.0 })).collect();
        let mut buf = episode(&steps, true);
        enhanced_gae(&mut buf, 1.0, 1.0).unwrap();
        for t in 0..4 {
            let mc: f64 = rs[t..].iter().sum();
            assert!((buf[t].advantage.unwrap() - (mc - vs[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn truncation_still_bootstraps() {
        let mut buf = episode(&[(StageFlag::Ctrl, 1.0, 0.4, 2.0)], false);
        enhanced_gae(&mut buf, 0.9, 0.95).unwrap();
        assert!((buf[0].advantage.unwrap() - (1.0 + 0.9 * 2.0 - 0.4)).abs() < 1e-15);
        let mut term = episode(&[(StageFlag::Ctrl, 1.0, 0.4, 2.0)], true);
        enhanced_gae(&mut term, 0.9, 0.95).unwrap();
        assert!((buf[0].advantage.unwrap() - term[0].advantage.unwrap() - 0.9 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn integrity_errors() {
        use StageFlag::*;
        let good = episode(&[(Topo, 0.0, 0.0, 0.0), (Ctrl, 1.0, 0.0, 0.0)], true);
        let mut missing_reset = good.clone();
        missing_reset.extend(good.clone());
        missing_reset[2].episode_start = false;
        assert!(matches!(enhanced_gae(&mut missing_reset, 0.9, 0.9), Err(Error::BufferIntegrity(_))));
        let mut mid_flag = good.clone();
        mid_flag[0].truncated = true;
        assert!(matches!(enhanced_gae(&mut mid_flag, 0.9, 0.9), Err(Error::BufferIntegrity(_))));
        let mut open = good.clone();
        open[1].terminated = false;
        assert!(matches!(enhanced_gae(&mut open, 0.9, 0.9), Err(Error::BufferIntegrity(_))));
        let mut paid_design = good.clone();
        paid_design[0].reward = 1.0;
        assert!(matches!(enhanced_gae(&mut paid_design, 0.9, 0.9), Err(Error::BufferIntegrity(_))));
        let mut twice = good;
        enhanced_gae(&mut twice, 0.9, 0.9).unwrap();
        assert!(matches!(enhanced_gae(&mut twice, 0.9, 0.9), Err(Error::BufferIntegrity(_))));
    }

    #[test]
    fn vanilla_mode_bootstraps_design_steps() {
        use StageFlag::*;
        let mut buf = episode(&[(Topo, 0.0, 0.5, 0.2), (Ctrl, 1.0, 0.2, 0.0)], true);
        let cfg = CreditConfig { mode: CreditMode::Vanilla, ..CreditConfig::default() };
        assign_credit(&mut buf, 0.9, 0.5, &cfg).unwrap();
        let a1 = 1.0 - 0.2;
        let a0 = (0.9 * 0.2 - 0.5) + 0.9 * 0.5 * a1;
        assert!((buf[0].advantage.unwrap() - a0).abs() < 1e-15);
    }

    #[test]
    fn normalization() {
        let stages = vec![StageFlag::Ctrl; 5];
        let mut a = vec![3.0; 5];
        normalize_advantages(&mut a, &stages, 1e-8);
        assert!(a.iter().all(|&x| x == 0.0));
        let mut b = vec![1.0, 2.0, 5.0, -3.0, 0.5];
        normalize_advantages(&mut b, &stages, 1e-8);
        assert!((b.iter().sum::<f64>() / 5.0).abs() < 1e-10);
        let sd = (b.iter().map(|x| x * x).sum::<f64>() / 5.0).sqrt();
        assert!((sd - 1.0).abs() < 1e-6);
    }

    #[test]
    fn design_steps_do_not_shift_control_normalization() {
        let mut ctrl_only = vec![1.0, 2.0, 5.0];
        normalize_advantages(&mut ctrl_only, &[StageFlag::Ctrl; 3], 1e-8);
        let mut mixed = vec![100.0, 1.0, -40.0, 2.0, 5.0];
        let stages = [StageFlag::Topo, StageFlag::Ctrl, StageFlag::Attr, StageFlag::Ctrl, StageFlag::Ctrl];
        normalize_advantages(&mut mixed, &stages, 1e-8);
        assert_eq!([mixed[1], mixed[3], mixed[4]], ctrl_only[..]);
    }

    /// Independent double-loop evaluation of the estimator.
    fn brute_force(buf: &[Transition], gamma: f64, lambda: f64) -> Vec<f64> {
        let n = buf.len();
        let end = |t: usize| (t..n).find(|&k| buf[k].done()).unwrap();
        let design_adv = |t: usize| (t..=end(t)).map(|k| buf[k].reward).sum::<f64>() - buf[t].value;
        (0..n)
            .map(|t| {
                if buf[t].stage.is_design() {
                    return design_adv(t);
                }
                let mut total = 0.0;
                for k in t..=end(t) {
                    let w = (gamma * lambda).powi((k - t) as i32);
                    if k > t && buf[k].stage.is_design() {
                        total += w * design_adv(k);
                        break;
                    }
                    total += w * td_error(&buf[k], gamma);
                }
                total
            })
            .collect()
    }

    fn random_episode<R: Rng>(rng: &mut R) -> Vec<Transition> {
        let len = rng.gen_range(1..=12);
        let steps: Vec<_> = (0..len)
            .map(|t| {
                let stage = if t + 1 == len { StageFlag::Ctrl } else { StageFlag::ALL[rng.gen_range(0..3)] };
                let r = if stage.is_design() { 0.0 } else { rng.gen_range(-2.0..2.0) };
                (stage, r, rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0))
            })
            .collect();
        episode(&steps, rng.gen_bool(0.5))
    }

    #[test]
    fn matches_brute_force_on_random_buffers() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let mut buf: Vec<Transition> = (0..rng.gen_range(1..4)).flat_map(|_| random_episode(&mut rng)).collect();
            let (g, l) = (rng.gen_range(0.5..1.0), rng.gen_range(0.0..1.0));
            let want = brute_force(&buf, g, l);
            enhanced_gae(&mut buf, g, l).unwrap();
            for (t, (a, w)) in adv(&buf).iter().zip(&want).enumerate() {
                assert!((a - w).abs() < 1e-12, "step {t}: {a} vs {w}");
                assert!((buf[t].ret.unwrap() - buf[t].value - a).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn target_minus_value_is_advantage(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut buf = random_episode(&mut rng);
            enhanced_gae(&mut buf, 0.99, 0.95).unwrap();
            for t in &buf {
                prop_assert!((t.ret.unwrap() - t.value - t.advantage.unwrap()).abs() < 1e-12);
            }
        }

        #[test]
        fn design_advantage_is_remaining_return_minus_value(rs in proptest::collection::vec(-5.0f64..5.0, 1..10), v in -3.0f64..3.0) {
            let mut steps = vec![(StageFlag::Topo, 0.0, v, 0.0)];
            steps.extend(rs.iter().map(|&r| (StageFlag::Ctrl, r, 0.1, 0.2)));
            let mut buf = episode(&steps, false);
            enhanced_gae(&mut buf, 0.9, 0.8).unwrap();
            let total: f64 = rs.iter().sum();
            prop_assert!((buf[0].advantage.unwrap() - (total - v)).abs() < 1e-12);
        }

        #[test]
        fn termination_vs_truncation_differs_by_bootstrap(r in -2.0f64..2.0, v in -2.0f64..2.0, nv in -2.0f64..2.0) {
            let g = 0.97;
            let mut a = episode(&[(StageFlag::Ctrl, r, v, nv)], true);
            let mut b = episode(&[(StageFlag::Ctrl, r, v, nv)], false);
            enhanced_gae(&mut a, g, 0.9).unwrap();
            enhanced_gae(&mut b, g, 0.9).unwrap();
            prop_assert!((b[0].advantage.unwrap() - a[0].advantage.unwrap() - g * nv).abs() < 1e-12);
        }
    }
}
