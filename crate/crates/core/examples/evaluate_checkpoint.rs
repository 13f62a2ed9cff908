//! Greedy evaluation of a saved checkpoint, optionally on another terrain
//! profile.
//!
//!     cargo run --release --example evaluate_checkpoint -- runs/demo/ckpt_19.bin 5 env.profile=crawler

use std::path::PathBuf;

use morphogen::config::Config;
use morphogen::mosat::{Checkpoint, MoSatNet};
use morphogen::trainer::evaluate;

fn main() -> morphogen::Result<()> {
    let mut args = std::env::args().skip(1);
    let Some(path) = args.next().map(PathBuf::from) else {
        eprintln!("usage: evaluate_checkpoint CKPT [EPISODES] [KEY=VALUE ...]");
        std::process::exit(2);
    };
    let episodes = args.next().map_or(Ok(5), |s| s.parse()).unwrap_or(5);
    let overrides: Vec<String> = args.collect();

    let ck = Checkpoint::load(&path)?;
    let net = MoSatNet::from_checkpoint(&ck)?;
    let cfg = Config::from_snapshot(ck.meta("config")?)?.with_overrides(&overrides)?;
    println!("iteration {}  best return {}", ck.meta("iteration")?, ck.meta("best_return")?);

    let s = evaluate(&net, &cfg.env, episodes)?;
    println!("{} episodes  mean {:.2}  std {:.2}", s.episodes, s.mean_return, s.std_return);
    println!("limbs {:.1}  depth {:.1}", s.mean_limbs, s.mean_depth);
    println!("{}", s.best.to_json());
    Ok(())
}
