//! Draws a morphology to SVG, shaded by a fresh network's control attention.
//!
//!     cargo run --example render_morphology -- body.svg

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use morphogen::envsim::{Env, EnvConfig, StageFlag};
use morphogen::morphology::{AttrRanges, DesignLimits, MorphologyGraph, TopoAction};
use morphogen::mosat::{MoSatConfig, MoSatNet};
use morphogen::render::{attention_shading, render_svg};

fn main() -> morphogen::Result<()> {
    use TopoAction::*;
    let out = std::env::args().nth(1).unwrap_or_else(|| "morphology.svg".into());
    let (r, limits) = (AttrRanges::default(), DesignLimits::default());
    let mut g = MorphologyGraph::chain(3, &r);
    g.apply_topo_actions(&[Addition, NoChange, Addition], &limits, &r)?;

    let mut net = MoSatNet::new(MoSatConfig { d_model: 16, heads: 2, ..MoSatConfig::default() }, &mut ChaCha8Rng::seed_from_u64(1))?;
    net.registry_mut().allocate_all(&g.paths())?;
    let cfg = EnvConfig::default();
    let mut env = Env::new(cfg.clone())?;
    env.reset_with_graph(g.clone())?;
    let maps = net.attention_maps(&env.observe()?, &g.paths(), StageFlag::Ctrl)?;
    let last = maps.last().expect("at least one block");
    println!("per-limb shading {:?}", attention_shading(last)?.iter().map(|w| (w * 100.0).round() / 100.0).collect::<Vec<_>>());

    let svg = render_svg(&g, &cfg.physics, Some(last))?;
    std::fs::write(&out, svg)?;
    println!("{} limbs drawn to {out}", g.len());
    Ok(())
}
