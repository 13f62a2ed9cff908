//! Design-then-control episodes on a planar locomotion simulator.
//!
//! An episode runs `n_topo` topology steps, `n_attr` attribute steps and
//! then control steps until termination or the horizon. Design steps pay
//! zero reward and never end the episode.

mod physics;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{AttrRanges, DesignLimits, MorphologyGraph, TopoAction, ATTR_DIM};

pub use physics::{LimbState, PhysicsConfig, PlanarSim};

/// Width of a per-limb observation.
pub const OBS_DIM: usize = 10;

pub type LimbObservation = [f64; OBS_DIM];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageFlag {
    Topo,
    Attr,
    Ctrl,
}

impl StageFlag {
    pub const ALL: [StageFlag; 3] = [StageFlag::Topo, StageFlag::Attr, StageFlag::Ctrl];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_design(self) -> bool {
        self != StageFlag::Ctrl
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StageFlag::Topo => "topo",
            StageFlag::Attr => "attr",
            StageFlag::Ctrl => "ctrl",
        }
    }
}

impl fmt::Display for StageFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Task variant: reward form, termination rule and design caps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Runner,
    Crawler,
    Glider,
    Walker,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "runner" => Ok(Profile::Runner),
            "crawler" => Ok(Profile::Crawler),
            "glider" => Ok(Profile::Glider),
            "walker" => Ok(Profile::Walker),
            _ => Err(Error::Config(format!(
                "unknown environment profile {s:?} (expected runner, crawler, glider or walker)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitialDesign {
    #[serde(rename = "type2_chain")]
    Type2Chain,
    #[serde(rename = "type3_chain")]
    Type3Chain,
    #[serde(rename = "type4_chain")]
    Type4Chain,
}

impl InitialDesign {
    pub fn limb_count(self) -> usize {
        match self {
            InitialDesign::Type2Chain | InitialDesign::Type3Chain => 2,
            InitialDesign::Type4Chain => 3,
        }
    }

    pub fn build(self, ranges: &AttrRanges) -> MorphologyGraph {
        MorphologyGraph::chain(self.limb_count(), ranges)
    }
}

impl FromStr for InitialDesign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "type2_chain" => Ok(InitialDesign::Type2Chain),
            "type3_chain" => Ok(InitialDesign::Type3Chain),
            "type4_chain" => Ok(InitialDesign::Type4Chain),
            _ => Err(Error::Config(format!(
                "unknown initial design {s:?} (expected type2_chain, type3_chain or type4_chain)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub profile: Profile,
    pub init_design: InitialDesign,
    pub n_topo: usize,
    pub n_attr: usize,
    /// Control steps per episode.
    pub horizon: usize,
    /// Control period in seconds.
    pub dt: f64,
    /// Weight of the mean squared action penalty.
    pub ctrl_cost_weight: f64,
    /// Episode terminates when the root centre drops below this; 0 disables.
    pub termination_height: f64,
    /// Clearance of the lowest contact sphere at spawn.
    pub spawn_height: f64,
    pub limits: DesignLimits,
    pub ranges: AttrRanges,
    pub physics: PhysicsConfig,
}

impl EnvConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let base = Self {
            profile,
            init_design: InitialDesign::Type3Chain,
            n_topo: 5,
            n_attr: 1,
            horizon: 400,
            dt: 0.04,
            ctrl_cost_weight: 0.0,
            termination_height: 0.0,
            spawn_height: 0.0,
            limits: DesignLimits::default(),
            ranges: AttrRanges::default(),
            physics: PhysicsConfig::default(),
        };
        match profile {
            Profile::Runner => base,
            Profile::Crawler => Self {
                ctrl_cost_weight: 1e-4,
                limits: DesignLimits { max_children: 2, ..DesignLimits::default() },
                ..base
            },
            Profile::Glider => Self {
                init_design: InitialDesign::Type4Chain,
                spawn_height: 1.0,
                limits: DesignLimits { max_depth: 6, max_children: 1, ..DesignLimits::default() },
                ..base
            },
            Profile::Walker => Self {
                init_design: InitialDesign::Type4Chain,
                termination_height: 0.05,
                limits: DesignLimits { max_depth: 8, max_children: 1, ..DesignLimits::default() },
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.physics.substep > 0.0) {
            return Err(Error::Config("env.dt and env.physics.substep must be positive".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("env.horizon must be at least 1".into()));
        }
        if self.limits.max_limbs < self.init_design.limb_count() {
            return Err(Error::Config("env.limits.max_limbs is smaller than the initial design".into()));
        }
        Ok(())
    }
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Runner)
    }
}

/// Action for a design step: one entry per limb in preorder.
#[derive(Clone, Debug, PartialEq)]
pub enum DesignAction {
    Topo(Vec<TopoAction>),
    Attr(Vec<[f64; ATTR_DIM]>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub reward: f64,
    pub next_obs: Vec<LimbObservation>,
    pub terminated: bool,
    pub truncated: bool,
}

/// One environment instance.
#[derive(Clone, Debug)]
pub struct Env {
    cfg: EnvConfig,
    graph: MorphologyGraph,
    stage: StageFlag,
    topo_done: usize,
    attr_done: usize,
    ctrl_done: usize,
    sim: Option<PlanarSim>,
    finished: bool,
}

impl Env {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let graph = cfg.init_design.build(&cfg.ranges);
        let mut env = Self {
            cfg,
            graph,
            stage: StageFlag::Topo,
            topo_done: 0,
            attr_done: 0,
            ctrl_done: 0,
            sim: None,
            finished: false,
        };
        env.reset(env.cfg.init_design)?;
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    /// Starts a new episode from `design`.
    pub fn reset(&mut self, design: InitialDesign) -> Result<(MorphologyGraph, StageFlag)> {
        self.graph = design.build(&self.cfg.ranges);
        self.topo_done = 0;
        self.attr_done = 0;
        self.ctrl_done = 0;
        self.sim = None;
        self.finished = false;
        self.stage = StageFlag::Topo;
        self.settle_stage()?;
        Ok((self.graph.clone(), self.stage))
    }

    pub fn reset_by_name(&mut self, id: &str) -> Result<(MorphologyGraph, StageFlag)> {
        self.reset(id.parse()?)
    }

    /// Starts a new episode on a fixed morphology, skipping design.
    pub fn reset_with_graph(&mut self, graph: MorphologyGraph) -> Result<()> {
        graph.validate(&self.cfg.limits)?;
        self.graph = graph;
        self.topo_done = self.cfg.n_topo;
        self.attr_done = self.cfg.n_attr;
        self.ctrl_done = 0;
        self.finished = false;
        self.stage = StageFlag::Ctrl;
        self.sim = Some(PlanarSim::new(&self.graph, &self.cfg.physics, self.cfg.spawn_height)?);
        Ok(())
    }

    pub fn stage(&self) -> StageFlag {
        self.stage
    }

    pub fn graph(&self) -> &MorphologyGraph {
        &self.graph
    }

    /// Design steps taken in the current episode.
    pub fn design_steps(&self) -> usize {
        self.topo_done + self.attr_done
    }

    pub fn control_steps(&self) -> usize {
        self.ctrl_done
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn sim(&self) -> Option<&PlanarSim> {
        self.sim.as_ref()
    }

    fn settle_stage(&mut self) -> Result<()> {
        if self.stage == StageFlag::Topo && self.topo_done >= self.cfg.n_topo {
            self.stage = StageFlag::Attr;
        }
        if self.stage == StageFlag::Attr && self.attr_done >= self.cfg.n_attr {
            self.stage = StageFlag::Ctrl;
            self.sim = Some(PlanarSim::new(&self.graph, &self.cfg.physics, self.cfg.spawn_height)?);
        }
        Ok(())
    }

    /// Applies one morphology edit. Returns the number of demoted topology
    /// actions alongside the step result.
    pub fn design_step(&mut self, action: &DesignAction) -> Result<(StepResult, usize)> {
        let demoted = match (self.stage, action) {
            (StageFlag::Topo, DesignAction::Topo(acts)) => {
                let d = self.graph.apply_topo_actions(acts, &self.cfg.limits, &self.cfg.ranges)?;
                self.topo_done += 1;
                d
            }
            (StageFlag::Attr, DesignAction::Attr(raw)) => {
                self.graph.apply_attr_actions(raw, &self.cfg.ranges)?;
                self.attr_done += 1;
                0
            }
            (stage, _) => {
                return Err(Error::Stage(format!("design action does not match stage {stage}")));
            }
        };
        self.settle_stage()?;
        let result = StepResult { reward: 0.0, next_obs: self.observe()?, terminated: false, truncated: false };
        Ok((result, demoted))
    }

    /// Advances the simulator by one control period. `actions` holds one
    /// normalized torque in `[-1, 1]` per joint (non-root limbs, preorder);
    /// values outside are clamped before scaling by each joint's max torque.
    pub fn control_step(&mut self, actions: &[f64]) -> Result<StepResult> {
        if self.stage != StageFlag::Ctrl {
            return Err(Error::Stage(format!("control step during {} stage", self.stage)));
        }
        if self.finished {
            return Err(Error::Stage("episode already ended; reset first".into()));
        }
        let sim = self.sim.as_mut().ok_or_else(|| Error::Invariant("control stage without a simulator".into()))?;
        if actions.len() != sim.joint_count() {
            return Err(Error::Dimension(format!(
                "{} control actions expected, got {}",
                sim.joint_count(),
                actions.len()
            )));
        }
        let clamped: Vec<f64> = actions.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
        let tau: Vec<f64> = clamped.iter().zip(sim.max_torques()).map(|(a, m)| a * m).collect();
        let x0 = sim.root_position()[0];
        let h = self.cfg.physics.substep;
        let full = (self.cfg.dt / h + 1e-9).floor() as usize;
        let rest = self.cfg.dt - full as f64 * h;
        let advance = |sim: &mut PlanarSim| -> Result<()> {
            for _ in 0..full {
                sim.step(&tau, h)?;
            }
            if rest > 1e-12 {
                sim.step(&tau, rest)?;
            }
            Ok(())
        };
        if let Err(e) = advance(sim) {
            self.finished = true;
            log::warn!("episode aborted: {e}");
            return Err(e);
        }
        let [x1, z1] = sim.root_position();
        let mut reward = (x1 - x0).abs() / self.cfg.dt;
        if self.cfg.ctrl_cost_weight > 0.0 {
            let sq: f64 = clamped.iter().map(|a| a * a).sum();
            reward -= self.cfg.ctrl_cost_weight * sq / self.graph.len() as f64;
        }
        self.ctrl_done += 1;
        let terminated = self.cfg.termination_height > 0.0 && z1 < self.cfg.termination_height;
        let truncated = !terminated && self.ctrl_done >= self.cfg.horizon;
        self.finished = terminated || truncated;
        Ok(StepResult { reward, next_obs: self.observe()?, terminated, truncated })
    }

    /// Per-limb observations in preorder.
    ///
    /// Layout: `[joint angle, joint velocity, x − root x, z, vx, vz,
    /// normalized length, normalized radius, depth / max depth, is root]`.
    /// During design stages the body is shown at rest in its spawn pose.
    pub fn observe(&self) -> Result<Vec<LimbObservation>> {
        let rest;
        let sim = match &self.sim {
            Some(s) if self.stage == StageFlag::Ctrl => s,
            _ => {
                rest = PlanarSim::new(&self.graph, &self.cfg.physics, self.cfg.spawn_height)?;
                &rest
            }
        };
        let states = sim.limb_states();
        let root_x = states[0].center[0];
        let max_depth = self.cfg.limits.max_depth.max(1) as f64;
        let r = &self.cfg.ranges;
        self.graph
            .preorder()
            .into_iter()
            .zip(&states)
            .map(|(id, s)| {
                let limb = self.graph.limb(id)?;
                Ok([
                    s.joint_angle,
                    s.joint_velocity,
                    s.center[0] - root_x,
                    s.center[1],
                    s.velocity[0],
                    s.velocity[1],
                    r.length.normalized(limb.attr.length),
                    r.radius.normalized(limb.attr.radius),
                    self.graph.depth(id)? as f64 / max_depth,
                    if limb.parent.is_none() { 1.0 } else { 0.0 },
                ])
            })
            .collect()
    }
}

/// One row of a trajectory dump.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub t: usize,
    pub stage: StageFlag,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    pub limb_count: usize,
}

pub const TRAJECTORY_HEADER: &str = "t,stage,reward,terminated,truncated,limb_count";

pub fn write_trajectory_csv<W: Write>(mut w: W, rows: &[TrajectoryRecord]) -> Result<()> {
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.t, r.stage, r.reward, r.terminated as u8, r.truncated as u8, r.limb_count
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn run_design(env: &mut Env, rng: &mut impl Rng) {
        while env.stage().is_design() {
            let n = env.graph().len();
            let action = match env.stage() {
                StageFlag::Topo => DesignAction::Topo(
                    (0..n).map(|_| TopoAction::from_index(rng.gen_range(0..3)).unwrap()).collect(),
                ),
                _ => DesignAction::Attr((0..n).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect()),
            };
            let (res, _) = env.design_step(&action).unwrap();
            assert_eq!(res.reward, 0.0);
            assert!(!res.terminated && !res.truncated);
        }
    }

    #[test]
    fn initial_designs() {
        let mut env = Env::new(EnvConfig::default()).unwrap();
        let (g, stage) = env.reset_by_name("type3_chain").unwrap();
        assert_eq!((g.len(), g.joint_count(), stage), (2, 1, StageFlag::Topo));
        assert_eq!(env.design_steps(), 0);
        let (g, _) = env.reset_by_name("type4_chain").unwrap();
        assert_eq!((g.len(), g.joint_count()), (3, 2));
        let (g, _) = env.reset_by_name("type2_chain").unwrap();
        assert_eq!(g.len(), 2);
        assert!(matches!(env.reset_by_name("type9_chain"), Err(Error::Config(_))));
    }

    #[test]
    fn stage_transitions_follow_counts() {
        let mut env = Env::new(EnvConfig::default()).unwrap();
        let keep = |env: &Env| DesignAction::Topo(vec![TopoAction::NoChange; env.graph().len()]);
        for i in 0..5 {
            assert_eq!(env.stage(), StageFlag::Topo, "step {i}");
            env.design_step(&keep(&env)).unwrap();
        }
        assert_eq!(env.stage(), StageFlag::Attr);
        let raw = vec![[0.0; 4]; env.graph().len()];
        env.design_step(&DesignAction::Attr(raw)).unwrap();
        assert_eq!(env.stage(), StageFlag::Ctrl);
        assert!(matches!(env.design_step(&keep(&env)), Err(Error::Stage(_))));
    }

    #[test]
    fn control_before_design_is_rejected() {
        let mut env = Env::new(EnvConfig::default()).unwrap();
        assert!(matches!(env.control_step(&[0.0]), Err(Error::Stage(_))));
    }

    #[test]
    fn runner_reward_is_displacement_rate() {
        let mut env = Env::new(EnvConfig::default()).unwrap();
        let g = env.graph().clone();
        env.reset_with_graph(g).unwrap();
        let res = env.control_step(&[0.0]).unwrap();
        assert!(res.reward.abs() < 1e-9, "resting body earned {}", res.reward);
        assert_eq!(0.04_f64 / 0.04, 1.0);
    }

    #[test]
    fn crawler_zero_torque_at_rest_earns_nothing() {
        let mut env = Env::new(EnvConfig::for_profile(Profile::Crawler)).unwrap();
        let g = env.graph().clone();
        env.reset_with_graph(g).unwrap();
        let res = env.control_step(&[0.0]).unwrap();
        assert!(res.reward.abs() < 1e-9);
    }

    #[test]
    fn truncates_at_horizon() {
        let cfg = EnvConfig { horizon: 7, ..EnvConfig::default() };
        let mut env = Env::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        run_design(&mut env, &mut rng);
        let j = env.graph().joint_count();
        for t in 1..=7 {
            let res = env.control_step(&vec![0.5; j]).unwrap();
            assert_eq!(res.truncated, t == 7);
            assert!(!res.terminated);
        }
        assert!(env.control_step(&vec![0.0; j]).is_err());
    }

    #[test]
    fn walker_terminates_below_threshold() {
        let cfg = EnvConfig { termination_height: 10.0, ..EnvConfig::for_profile(Profile::Walker) };
        let mut env = Env::new(cfg).unwrap();
        let g = env.graph().clone();
        env.reset_with_graph(g).unwrap();
        let res = env.control_step(&[0.0, 0.0]).unwrap();
        assert!(res.terminated && !res.truncated);
        assert!(env.sim().unwrap().root_position()[1] < 10.0);
    }

    #[test]
    fn observations_have_fixed_width_and_one_row_per_limb() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut env = Env::new(EnvConfig::default()).unwrap();
        for _ in 0..20 {
            env.reset(InitialDesign::Type3Chain).unwrap();
            run_design(&mut env, &mut rng);
            let obs = env.observe().unwrap();
            assert_eq!(obs.len(), env.graph().len());
            assert_eq!(obs[0][0], 0.0);
            assert_eq!(obs[0][1], 0.0);
            assert_eq!(obs[0][9], 1.0);
            assert!(obs[1..].iter().all(|o| o[9] == 0.0));
        }
    }

    #[test]
    fn identical_actions_give_identical_trajectories() {
        let run = || {
            let mut env = Env::new(EnvConfig::default()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            run_design(&mut env, &mut rng);
            let j = env.graph().joint_count();
            let mut out = Vec::new();
            for _ in 0..30 {
                let a: Vec<f64> = (0..j).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let r = env.control_step(&a).unwrap();
                out.push(r.reward.to_bits());
                out.extend(r.next_obs.iter().flatten().map(|x| x.to_bits()));
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn design_rewards_are_zero_across_profiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in [Profile::Runner, Profile::Crawler, Profile::Glider, Profile::Walker] {
            let mut env = Env::new(EnvConfig::for_profile(p)).unwrap();
            for _ in 0..10 {
                let d = env.config().init_design;
                env.reset(d).unwrap();
                run_design(&mut env, &mut rng);
            }
        }
    }

    #[test]
    fn trajectory_csv_layout() {
        let rows = vec![TrajectoryRecord {
            t: 0,
            stage: StageFlag::Topo,
            reward: 0.0,
            terminated: false,
            truncated: false,
            limb_count: 2,
        }];
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t,stage,reward,terminated,truncated,limb_count\n0,topo,0,0,0,2\n");
    }
}
