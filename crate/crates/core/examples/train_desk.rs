//! Trains a policy at desk scale and writes a run directory.
//!
//!     cargo run --release --example train_desk -- runs/demo run.iterations=20
//!
//! Extra arguments are `KEY=VALUE` configuration overrides.

use std::path::PathBuf;

use morphogen::config::{Config, ConfigProfile};
use morphogen::trainer::Trainer;

fn main() -> morphogen::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MORPHOGEN_LOG", "warn")).init();
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "runs/desk-demo".into()));
    let overrides: Vec<String> = args.collect();
    let cfg = Config::load(None, Some(ConfigProfile::Desk), &overrides)?;
    println!("config {} -> {}", cfg.hash(), dir.display());

    let mut trainer = Trainer::new(cfg)?.with_run_dir(&dir)?;
    while !trainer.is_done() {
        let r = trainer.step()?;
        println!(
            "iter {:>3}  return {:>8.2}  limbs {:>5.2}  kl {:.4}  {:>6.1}s",
            r.iteration, r.mean_episode_return, r.mean_limbs, r.update.kl, r.wallclock_s
        );
    }
    println!("metrics in {}", dir.join("metrics.csv").display());
    Ok(())
}
