//! Synchronous collect → sync → credit → update loop with run-directory
//! bookkeeping.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::credit::{assign_credit, Transition};
use crate::envsim::{DesignAction, Env, EnvConfig, LimbObservation, StageFlag};
use crate::error::{Error, Result};
use crate::morphology::{MorphologyGraph, TopoAction, TopoPath, ATTR_DIM};
use crate::mosat::{Checkpoint, MoSatNet};
use crate::policy::{Actions, StageDist};
use crate::ppo::{update, Optimizers, UpdateMetrics};

pub const METRICS_HEADER: &str = "iter,mean_episode_return,policy_loss,value_loss,clip_frac,kl,mean_limbs,wallclock_s";

/// Mixes a seed with stream coordinates (splitmix64 finalizer per word).
pub fn stream_seed(global: u64, worker: u64, iteration: u64) -> u64 {
    let mix = |mut z: u64| {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    [worker, iteration].iter().fold(mix(global.wrapping_add(0x9e37_79b9_7f4a_7c15)), |h, &w| {
        mix(h ^ w.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6))
    })
}

const LEARNER_STREAM: u64 = u64::MAX;

/// Outcome of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSummary {
    /// Sum of rewards, design steps included (they pay zero).
    pub total_return: f64,
    pub final_limbs: usize,
    pub final_depth: usize,
    pub terminated_early: bool,
    /// Cut short by the step quota rather than by the environment.
    pub partial: bool,
    pub transitions: usize,
    pub morphology: MorphologyGraph,
}

/// Gathered experience of one iteration, in worker order.
#[derive(Clone, Debug, Default)]
pub struct Rollout {
    pub transitions: Vec<Transition>,
    /// Episodes in buffer order.
    pub episodes: Vec<EpisodeSummary>,
    /// Observation after the last step of each truncated episode, keyed by
    /// the index of that step.
    pub bootstrap: Vec<(usize, Vec<LimbObservation>, Vec<TopoPath>)>,
    pub diverged: usize,
}

impl Rollout {
    /// Mean return of episodes that ended on their own, or of all episodes
    /// when none did.
    pub fn mean_return(&self) -> f64 {
        mean(&self.complete().map(|e| e.total_return).collect::<Vec<_>>())
    }

    pub fn mean_limbs(&self) -> f64 {
        mean(&self.complete().map(|e| e.final_limbs as f64).collect::<Vec<_>>())
    }

    fn complete(&self) -> impl Iterator<Item = &EpisodeSummary> {
        let any_full = self.episodes.iter().any(|e| !e.partial);
        self.episodes.iter().filter(move |e| !any_full || !e.partial)
    }
}

fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

fn design_action(rec: &Actions, stage: StageFlag) -> Result<DesignAction> {
    match (stage, rec) {
        (StageFlag::Topo, Actions::Discrete(a)) => {
            Ok(DesignAction::Topo(a.iter().map(|&i| TopoAction::from_index(i)).collect::<Result<_>>()?))
        }
        (StageFlag::Attr, Actions::Continuous(a)) => Ok(DesignAction::Attr(
            a.chunks_exact(ATTR_DIM).map(|c| c.try_into().expect("chunk of ATTR_DIM")).collect(),
        )),
        _ => Err(Error::Contract(format!("no design action for stage {stage}"))),
    }
}

/// How a worker picks actions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    /// Argmax topology, mean attributes and torques.
    Greedy,
}

struct WorkerOut {
    transitions: Vec<Transition>,
    episodes: Vec<EpisodeSummary>,
    bootstrap: Vec<(usize, Vec<LimbObservation>, Vec<TopoPath>)>,
    diverged: usize,
}

enum EpisodeEnd {
    Done,
    Diverged,
}

/// Runs one episode, appending its transitions. With `quota`, a control
/// step that brings the worker total to the quota truncates the episode.
#[allow(clippy::too_many_arguments)]
fn run_episode(
    net: &MoSatNet,
    env: &mut Env,
    rng: &mut ChaCha8Rng,
    mode: ActionMode,
    out: &mut WorkerOut,
    quota: Option<usize>,
) -> Result<EpisodeEnd> {
    env.reset(env.config().init_design)?;
    let start = out.transitions.len();
    let mut total = 0.0;
    loop {
        let stage = env.stage();
        let obs = env.observe()?;
        let paths = env.graph().paths();
        let head = net.policy_single(&obs, &paths, stage)?;
        let dist = StageDist::new(stage, head, net.log_std(stage))?;
        let rec = match mode {
            ActionMode::Sample => dist.sample(stage, rng),
            ActionMode::Greedy => dist.mode(stage),
        };
        if !rec.log_prob.is_finite() {
            return Err(Error::Invariant(format!("non-finite log-probability in {stage} stage")));
        }
        let mut tr = Transition::bare(stage, 0.0, 0.0, 0.0);
        tr.episode_start = out.transitions.len() == start;
        tr.log_prob = rec.log_prob;
        let next_obs;
        if stage.is_design() {
            let (res, _) = env.design_step(&design_action(&rec.actions, stage)?)?;
            next_obs = res.next_obs;
        } else {
            let Actions::Continuous(a) = &rec.actions else { unreachable!("control actions are continuous") };
            match env.control_step(&a[1..]) {
                Ok(res) => {
                    tr.reward = res.reward;
                    tr.terminated = res.terminated;
                    tr.truncated = res.truncated;
                    next_obs = res.next_obs;
                }
                Err(Error::SimulationDiverged(_)) => {
                    out.transitions.truncate(start);
                    out.bootstrap.retain(|(i, ..)| *i < start);
                    out.diverged += 1;
                    return Ok(EpisodeEnd::Diverged);
                }
                Err(e) => return Err(e),
            }
            if !tr.done() && quota.is_some_and(|q| out.transitions.len() + 1 >= q) {
                tr.truncated = true;
            }
        }
        total += tr.reward;
        tr.obs = obs;
        tr.paths = paths;
        tr.action = rec.actions;
        let done = tr.done();
        let truncated = tr.truncated;
        out.transitions.push(tr);
        if done {
            let idx = out.transitions.len() - 1;
            if truncated {
                out.bootstrap.push((idx, next_obs, env.graph().paths()));
            }
            let g = env.graph();
            out.episodes.push(EpisodeSummary {
                total_return: total,
                final_limbs: g.len(),
                final_depth: g.max_depth(),
                terminated_early: out.transitions[idx].terminated,
                partial: env.control_steps() < env.config().horizon && !out.transitions[idx].terminated,
                transitions: idx + 1 - start,
                morphology: g.clone(),
            });
            return Ok(EpisodeEnd::Done);
        }
    }
}

/// Collects at least `n_steps` transitions with `workers` parallel
/// environments. The quota is split evenly across workers; each runs whole
/// episodes until it holds its share, truncating its last episode at the
/// first control step that reaches the share. A worker therefore overshoots
/// by at most one episode's design steps.
pub fn collect(net: &MoSatNet, env_cfg: &EnvConfig, n_steps: usize, workers: usize, seed: u64, iteration: u64) -> Result<Rollout> {
    if workers == 0 || n_steps == 0 {
        return Err(Error::Config("collect needs at least one worker and one step".into()));
    }
    let share = |w: usize| n_steps / workers + usize::from(w < n_steps % workers);
    let work = |w: usize| -> Result<WorkerOut> {
        let quota = share(w);
        let mut env = Env::new(env_cfg.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, w as u64, iteration));
        let mut out = WorkerOut { transitions: Vec::new(), episodes: Vec::new(), bootstrap: Vec::new(), diverged: 0 };
        let mut attempts = 0usize;
        while out.transitions.len() < quota.max(1) {
            attempts += 1;
            if let EpisodeEnd::Diverged = run_episode(net, &mut env, &mut rng, ActionMode::Sample, &mut out, Some(quota))? {
                if out.diverged * 2 > attempts + 10 {
                    return Err(Error::Aborted(format!("worker {w}: {} of {attempts} episodes diverged", out.diverged)));
                }
            }
        }
        Ok(out)
    };
    let outs: Vec<Result<WorkerOut>> = if workers == 1 {
        vec![work(0)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers).map(|w| s.spawn(move || work(w))).collect();
            handles
                .into_iter()
                .enumerate()
                .map(|(w, h)| {
                    h.join().unwrap_or_else(|p| {
                        let msg = p
                            .downcast_ref::<String>()
                            .cloned()
                            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                            .unwrap_or_default();
                        Err(Error::Aborted(format!("rollout worker {w} panicked: {msg}")))
                    })
                })
                .collect()
        })
    };
    let mut roll = Rollout::default();
    for out in outs {
        let out = out?;
        let offset = roll.transitions.len();
        roll.transitions.extend(out.transitions);
        roll.episodes.extend(out.episodes);
        roll.bootstrap.extend(out.bootstrap.into_iter().map(|(i, o, p)| (i + offset, o, p)));
        roll.diverged += out.diverged;
    }
    Ok(roll)
}

/// Registers every path seen in the buffer, in buffer order. Returns the
/// number of new embedding rows.
pub fn sync_registry(net: &mut MoSatNet, roll: &Rollout) -> Result<usize> {
    let mut added = 0;
    for t in &roll.transitions {
        added += net.registry_mut().allocate_all(&t.paths)?;
    }
    for (_, _, paths) in &roll.bootstrap {
        added += net.registry_mut().allocate_all(paths)?;
    }
    Ok(added)
}

const EVAL_CHUNK: usize = 256;

/// Recomputes values, bootstrap values and sampling log-probabilities under
/// the current parameters.
pub fn refresh_estimates(net: &MoSatNet, roll: &mut Rollout) -> Result<()> {
    for stage in StageFlag::ALL {
        let mut idx: Vec<usize> = (0..roll.transitions.len()).filter(|&i| roll.transitions[i].stage == stage).collect();
        idx.sort_by_key(|&i| roll.transitions[i].obs.len());
        for chunk in idx.chunks(EVAL_CHUNK) {
            let pairs: Vec<_> = chunk
                .iter()
                .map(|&i| (roll.transitions[i].obs.as_slice(), roll.transitions[i].paths.as_slice()))
                .collect();
            let batch = net.make_batch(&pairs)?;
            let out = net.forward_batch(&batch, stage)?;
            for ((&i, head), v) in chunk.iter().zip(out.heads).zip(out.values) {
                let t = &mut roll.transitions[i];
                let lp = StageDist::new(stage, head, net.log_std(stage))?.log_prob(&t.action)?;
                t.log_prob = lp;
                t.value = v;
            }
        }
    }
    let n = roll.transitions.len();
    for i in 0..n {
        let t = &roll.transitions[i];
        let next = if !t.done() && i + 1 < n { roll.transitions[i + 1].value } else { 0.0 };
        roll.transitions[i].next_value = next;
    }
    for chunk in roll.bootstrap.chunks(EVAL_CHUNK) {
        let pairs: Vec<_> = chunk.iter().map(|(_, o, p)| (o.as_slice(), p.as_slice())).collect();
        let values = net.values(&net.make_batch(&pairs)?, StageFlag::Ctrl)?;
        for ((i, ..), v) in chunk.iter().zip(values) {
            roll.transitions[*i].next_value = v;
        }
    }
    Ok(())
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationReport {
    pub iteration: usize,
    pub mean_episode_return: f64,
    pub mean_limbs: f64,
    pub update: UpdateMetrics,
    pub wallclock_s: f64,
    pub episodes: usize,
    pub diverged: usize,
    pub transitions: usize,
    pub new_paths: usize,
}

impl IterationReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.3}",
            self.iteration,
            self.mean_episode_return,
            self.update.policy_loss,
            self.update.value_loss,
            self.update.clip_frac,
            self.update.kl,
            self.mean_limbs,
            self.wallclock_s
        )
    }
}

/// Training state; optionally mirrored into a run directory.
pub struct Trainer {
    cfg: Config,
    net: MoSatNet,
    opt: Optimizers,
    next_iteration: usize,
    best_return: f64,
    run_dir: Option<PathBuf>,
    elapsed_before: f64,
    started: Instant,
}

impl Trainer {
    pub fn new(cfg: Config) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.run.seed, LEARNER_STREAM, LEARNER_STREAM));
        let net = MoSatNet::new(cfg.net.clone(), &mut rng)?;
        let opt = Optimizers::new(&net, &cfg.ppo);
        Ok(Self {
            cfg,
            net,
            opt,
            next_iteration: 0,
            best_return: f64::NEG_INFINITY,
            run_dir: None,
            elapsed_before: 0.0,
            started: Instant::now(),
        })
    }

    /// Creates `dir`, writes the configuration snapshot and a fresh metrics file.
    pub fn with_run_dir(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.snapshot"), self.cfg.snapshot())?;
        std::fs::write(dir.join("metrics.csv"), format!("{METRICS_HEADER}\n"))?;
        self.run_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    /// Continues from a checkpoint. With a run directory, metrics rows after
    /// the checkpoint are dropped and appending resumes there.
    pub fn resume(ckpt: &Path, run_dir: Option<&Path>) -> Result<Self> {
        let ck = Checkpoint::load(ckpt)?;
        let cfg = Config::from_snapshot(ck.meta("config")?)?;
        let net = MoSatNet::from_checkpoint(&ck)?;
        let mut opt = Optimizers::new(&net, &cfg.ppo);
        opt.read_checkpoint(&net, &ck)?;
        let num = |key: &str| -> Result<f64> {
            ck.meta(key)?.parse().map_err(|_| Error::Checkpoint(format!("bad value for {key}")))
        };
        let next_iteration = num("iteration")? as usize + 1;
        let mut t = Self {
            cfg,
            net,
            opt,
            next_iteration,
            best_return: num("best_return")?,
            run_dir: None,
            elapsed_before: num("wallclock_s")?,
            started: Instant::now(),
        };
        if let Some(dir) = run_dir {
            let metrics = dir.join("metrics.csv");
            let kept: Vec<String> = std::fs::read_to_string(&metrics)
                .unwrap_or_else(|_| format!("{METRICS_HEADER}\n"))
                .lines()
                .filter(|l| l.split(',').next().and_then(|i| i.parse::<usize>().ok()).map_or(true, |i| i < next_iteration))
                .map(str::to_string)
                .collect();
            std::fs::create_dir_all(dir)?;
            std::fs::write(&metrics, kept.join("\n") + "\n")?;
            t.run_dir = Some(dir.to_path_buf());
        }
        Ok(t)
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn net(&self) -> &MoSatNet {
        &self.net
    }

    pub fn next_iteration(&self) -> usize {
        self.next_iteration
    }

    pub fn is_done(&self) -> bool {
        self.next_iteration >= self.cfg.run.iterations
    }

    pub fn checkpoint(&self, iteration: usize) -> Checkpoint {
        let mut ck = self.net.to_checkpoint();
        self.opt.write_checkpoint(&self.net, &mut ck);
        ck.meta.insert("config".into(), self.cfg.snapshot());
        ck.meta.insert("iteration".into(), iteration.to_string());
        ck.meta.insert("best_return".into(), format!("{:?}", self.best_return));
        ck.meta.insert("wallclock_s".into(), format!("{:?}", self.wallclock()));
        ck
    }

    fn wallclock(&self) -> f64 {
        self.elapsed_before + self.started.elapsed().as_secs_f64()
    }

    /// Runs one full iteration.
    pub fn step(&mut self) -> Result<IterationReport> {
        let it = self.next_iteration;
        let t0 = self.started.elapsed().as_secs_f64();
        let c = &self.cfg;
        let mut roll = collect(&self.net, &c.env, c.ppo.batch, c.run.workers, c.run.seed, it as u64)?;
        let attempted = roll.episodes.len() + roll.diverged;
        if roll.diverged as f64 > c.run.max_diverged_frac * attempted as f64 {
            return Err(Error::Aborted(format!(
                "iteration {it}: {} of {attempted} episodes diverged (limit {:.0}%)",
                roll.diverged,
                100.0 * c.run.max_diverged_frac
            )));
        }
        let t_collect = self.started.elapsed().as_secs_f64();
        let new_paths = sync_registry(&mut self.net, &roll)?;
        refresh_estimates(&self.net, &mut roll)?;
        assign_credit(&mut roll.transitions, c.ppo.gamma, c.ppo.lambda, &c.credit)?;
        let t_refresh = self.started.elapsed().as_secs_f64();
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(c.run.seed, LEARNER_STREAM, it as u64));
        let metrics = update(&mut self.net, &mut self.opt, &roll.transitions, &self.cfg.ppo, &self.cfg.credit, &mut rng)?;
        log::debug!(
            "iter {it} timings: collect+sync {:.2}s, estimates {:.2}s, update {:.2}s",
            t_collect - t0,
            t_refresh - t_collect,
            self.started.elapsed().as_secs_f64() - t_refresh
        );
        self.next_iteration += 1;
        let report = IterationReport {
            iteration: it,
            mean_episode_return: roll.mean_return(),
            mean_limbs: roll.mean_limbs(),
            update: metrics,
            wallclock_s: self.wallclock(),
            episodes: roll.episodes.len(),
            diverged: roll.diverged,
            transitions: roll.transitions.len(),
            new_paths,
        };
        log::info!(
            "iter {it}: return {:.3}, limbs {:.2}, policy {:.4}, value {:.4}, clip {:.3}, kl {:.5}",
            report.mean_episode_return,
            report.mean_limbs,
            metrics.policy_loss,
            metrics.value_loss,
            metrics.clip_frac,
            metrics.kl
        );
        let improved = report.mean_episode_return > self.best_return;
        if improved {
            self.best_return = report.mean_episode_return;
        }
        if let Some(dir) = self.run_dir.clone() {
            let mut f = OpenOptions::new().append(true).create(true).open(dir.join("metrics.csv"))?;
            writeln!(f, "{}", report.csv_row())?;
            if improved {
                let best = roll
                    .episodes
                    .iter()
                    .filter(|e| !e.partial)
                    .chain(roll.episodes.iter())
                    .max_by(|a, b| a.total_return.total_cmp(&b.total_return))
                    .expect("an iteration holds at least one episode");
                let mut f = File::create(dir.join("best_morph.json"))?;
                f.write_all(best.morphology.to_json().as_bytes())?;
            }
            let every = self.cfg.run.checkpoint_every;
            if improved || (every > 0 && (it + 1) % every == 0) || self.is_done() {
                self.checkpoint(it).save(&dir.join(format!("ckpt_{it}.bin")))?;
            }
        }
        Ok(report)
    }

    /// Iterates until the configured count.
    pub fn train(&mut self) -> Result<Vec<IterationReport>> {
        let mut out = Vec::new();
        while !self.is_done() {
            out.push(self.step()?);
        }
        Ok(out)
    }
}

/// Deterministic-policy evaluation statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_limbs: f64,
    pub mean_depth: f64,
    pub returns: Vec<f64>,
    /// Morphology of the best episode.
    pub best: MorphologyGraph,
}

/// Runs greedy episodes: argmax topology, mean attributes and torques.
pub fn evaluate(net: &MoSatNet, env_cfg: &EnvConfig, episodes: usize) -> Result<EvalSummary> {
    if episodes == 0 {
        return Err(Error::Contract("evaluation needs at least one episode".into()));
    }
    let mut env = Env::new(env_cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = WorkerOut { transitions: Vec::new(), episodes: Vec::new(), bootstrap: Vec::new(), diverged: 0 };
    for _ in 0..episodes {
        run_episode(net, &mut env, &mut rng, ActionMode::Greedy, &mut out, None)?;
    }
    if out.episodes.is_empty() {
        return Err(Error::SimulationDiverged(format!("all {episodes} evaluation episodes diverged")));
    }
    let returns: Vec<f64> = out.episodes.iter().map(|e| e.total_return).collect();
    let m = mean(&returns);
    let var = mean(&returns.iter().map(|r| (r - m).powi(2)).collect::<Vec<_>>());
    let best = out
        .episodes
        .iter()
        .max_by(|a, b| a.total_return.total_cmp(&b.total_return))
        .expect("non-empty")
        .morphology
        .clone();
    Ok(EvalSummary {
        episodes: out.episodes.len(),
        mean_return: m,
        std_return: var.sqrt(),
        mean_limbs: mean(&out.episodes.iter().map(|e| e.final_limbs as f64).collect::<Vec<_>>()),
        mean_depth: mean(&out.episodes.iter().map(|e| e.final_depth as f64).collect::<Vec<_>>()),
        returns,
        best,
    })
}

/// Checks that an episode's stages read `Topo^n_topo Attr^n_attr Ctrl*`.
pub fn matches_stage_grammar(stages: &[StageFlag], n_topo: usize, n_attr: usize) -> bool {
    let design = n_topo + n_attr;
    stages.len() > design
        && stages.iter().enumerate().all(|(i, &s)| {
            s == if i < n_topo {
                StageFlag::Topo
            } else if i < design {
                StageFlag::Attr
            } else {
                StageFlag::Ctrl
            }
        })
}

/// Splits a buffer into its episodes.
pub fn episodes_of(buf: &[Transition]) -> Vec<&[Transition]> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, t) in buf.iter().enumerate() {
        if t.done() {
            out.push(&buf[start..=i]);
            start = i + 1;
        }
    }
    out
}
