//! One episode of the design-then-control environment with random actions,
//! dumped as a trajectory CSV on stdout.
//!
//!     cargo run --example env_rollout -- walker 7

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use morphogen::envsim::{write_trajectory_csv, DesignAction, Env, EnvConfig, Profile, StageFlag, TrajectoryRecord};
use morphogen::morphology::TopoAction;

fn main() -> morphogen::Result<()> {
    let mut args = std::env::args().skip(1);
    let profile: Profile = args.next().as_deref().unwrap_or("runner").parse()?;
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = Env::new(EnvConfig { horizon: 100, ..EnvConfig::for_profile(profile) })?;

    let mut rows = Vec::new();
    let mut t = 0;
    while !env.is_finished() {
        let stage = env.stage();
        let n = env.graph().len();
        let (reward, terminated, truncated) = match stage {
            StageFlag::Topo => {
                let acts = (0..n).map(|_| TopoAction::from_index(rng.gen_range(0..TopoAction::COUNT))).collect::<morphogen::Result<_>>()?;
                let (r, _) = env.design_step(&DesignAction::Topo(acts))?;
                (r.reward, r.terminated, r.truncated)
            }
            StageFlag::Attr => {
                let raw = (0..n).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
                let (r, _) = env.design_step(&DesignAction::Attr(raw))?;
                (r.reward, r.terminated, r.truncated)
            }
            StageFlag::Ctrl => {
                let a: Vec<f64> = (0..n - 1).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let r = env.control_step(&a)?;
                (r.reward, r.terminated, r.truncated)
            }
        };
        rows.push(TrajectoryRecord { t, stage, reward, terminated, truncated, limb_count: env.graph().len() });
        t += 1;
    }
    write_trajectory_csv(std::io::stdout().lock(), &rows)?;
    let total: f64 = rows.iter().map(|r| r.reward).sum();
    eprintln!("{} limbs, {} control steps, return {total:.3}", env.graph().len(), env.control_steps());
    Ok(())
}
