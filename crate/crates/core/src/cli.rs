//! Command-line front end.
//!
//! Exit codes: 0 success, 2 bad input (flags, configuration, documents,
//! checkpoints), 3 runtime abort.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{Config, ConfigProfile};
use crate::envsim::{Env, StageFlag};
use crate::error::{Error, Result};
use crate::morphology::MorphologyGraph;
use crate::mosat::checkpoint::MAGIC;
use crate::mosat::{Checkpoint, MoSatNet};
use crate::render::render_svg;
use crate::trainer::{evaluate, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "morphogen", version, about = "Morphology and control co-design with a limb-token transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a design-and-control policy
    Train(TrainArgs),
    /// Evaluate a checkpoint with deterministic actions
    Eval(EvalArgs),
    /// Draw a morphology document or a checkpoint's design as SVG
    Render(RenderArgs),
    /// Report parameter counts, the path registry and the configuration
    Inspect(InspectArgs),
}

#[derive(Args, Debug, Default)]
pub struct CommonArgs {
    /// TOML configuration file
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. ppo.clip=0.3 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Global random seed (same as run.seed)
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output location
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Scale preset
    #[arg(long, value_name = "PROFILE", value_parser = ["desk", "paper"])]
    pub profile: Option<String>,
}

impl CommonArgs {
    fn overrides(&self) -> Vec<String> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("run.seed={s}"));
        }
        o
    }

    fn profile(&self) -> Result<Option<ConfigProfile>> {
        self.profile.as_deref().map(str::parse).transpose()
    }

    fn resolve(&self) -> Result<Config> {
        Config::load(self.config.as_deref(), self.profile()?, &self.overrides())
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Continue from a checkpoint written by an earlier run
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint to evaluate
    pub checkpoint: PathBuf,
    /// Number of episodes
    #[arg(long, default_value_t = 10)]
    pub episodes: usize,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Morphology document (JSON) or checkpoint
    pub input: PathBuf,
    /// Shade limbs by the control policy's attention; takes a checkpoint
    /// when the input is a document
    #[arg(long, value_name = "CKPT", num_args = 0..=1)]
    pub attention: Option<Option<PathBuf>>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Checkpoint to inspect; without one, a fresh network is built from the configuration
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

/// Input problems map to exit 2, everything else to exit 3.
enum Failure {
    Input(Error),
    Runtime(Error),
}

fn input<T>(r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(Failure::Input)
}

fn runtime<T>(r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(Failure::Runtime)
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            let code = e.exit_code();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return if code == 0 { EXIT_OK } else { EXIT_INPUT };
        }
    };
    let result = match cli.command {
        Command::Train(a) => run_train(&a, out),
        Command::Eval(a) => run_eval(&a, out),
        Command::Render(a) => run_render(&a, out),
        Command::Inspect(a) => run_inspect(&a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Input(e)) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_INPUT
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(err, "aborted: {e}");
            EXIT_RUNTIME
        }
    }
}

fn io<T>(r: std::io::Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(|e| Failure::Runtime(e.into()))
}

fn run_train(a: &TrainArgs, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let mut trainer = if let Some(ck) = &a.resume {
        let dir = a.common.out.clone().or_else(|| ck.parent().map(Path::to_path_buf));
        input(Trainer::resume(ck, dir.as_deref()))?
    } else {
        let cfg = input(a.common.resolve())?;
        let dir = a.common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(cfg.hash()));
        let t = input(Trainer::new(cfg))?;
        let t = runtime(t.with_run_dir(&dir))?;
        io(writeln!(out, "run directory: {}", dir.display()))?;
        t
    };
    while !trainer.is_done() {
        let r = runtime(trainer.step())?;
        io(writeln!(
            out,
            "iter {:>4}  return {:>10.3}  limbs {:>5.2}  policy {:>8.4}  value {:>10.4}  clip {:.3}  kl {:.5}",
            r.iteration,
            r.mean_episode_return,
            r.mean_limbs,
            r.update.policy_loss,
            r.update.value_loss,
            r.update.clip_frac,
            r.update.kl
        ))?;
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> std::result::Result<(Checkpoint, MoSatNet, Config), Failure> {
    let ck = input(Checkpoint::load(path))?;
    let net = input(MoSatNet::from_checkpoint(&ck))?;
    let cfg = input(ck.meta("config").and_then(Config::from_snapshot))?;
    Ok((ck, net, cfg))
}

fn run_eval(a: &EvalArgs, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let (_, net, cfg) = load_checkpoint(&a.checkpoint)?;
    let cfg = input(cfg.with_overrides(&a.common.overrides()))?;
    let s = runtime(evaluate(&net, &cfg.env, a.episodes))?;
    io(writeln!(out, "episodes     {}", s.episodes))?;
    io(writeln!(out, "mean_return  {:.4}", s.mean_return))?;
    io(writeln!(out, "std_return   {:.4}", s.std_return))?;
    io(writeln!(out, "mean_limbs   {:.3}", s.mean_limbs))?;
    io(writeln!(out, "mean_depth   {:.3}", s.mean_depth))?;
    if let Some(dir) = &a.common.out {
        io(std::fs::create_dir_all(dir))?;
        io(std::fs::write(dir.join("eval_morph.json"), s.best.to_json()))?;
    }
    Ok(())
}

fn is_checkpoint(path: &Path) -> std::result::Result<bool, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::Input(Error::Parse(format!("{}: {e}", path.display()))))?;
    Ok(bytes.starts_with(MAGIC))
}

fn run_render(a: &RenderArgs, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let (graph, cfg, net) = if is_checkpoint(&a.input)? {
        let (_, net, cfg) = load_checkpoint(&a.input)?;
        let s = runtime(evaluate(&net, &cfg.env, 1))?;
        (s.best, cfg, Some(net))
    } else {
        let text = std::fs::read_to_string(&a.input)
            .map_err(|e| Failure::Input(Error::Parse(format!("{}: {e}", a.input.display()))))?;
        let g = input(MorphologyGraph::from_json(&text))?;
        (g, input(a.common.resolve())?, None)
    };
    let net = match &a.attention {
        None => None,
        Some(Some(p)) => Some(load_checkpoint(p)?.1),
        Some(None) => Some(net.ok_or_else(|| {
            Failure::Input(Error::Config("--attention needs a checkpoint when the input is a document".into()))
        })?),
    };
    let map = match &net {
        Some(net) => {
            let mut env = input(Env::new(cfg.env.clone()))?;
            input(env.reset_with_graph(graph.clone()))?;
            let obs = runtime(env.observe())?;
            let maps = runtime(net.attention_maps(&obs, &graph.paths(), StageFlag::Ctrl))?;
            maps.into_iter().last()
        }
        None => None,
    };
    let svg = runtime(render_svg(&graph, &cfg.env.physics, map.as_ref()))?;
    match &a.common.out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                io(std::fs::create_dir_all(parent))?;
            }
            io(std::fs::write(p, &svg))?;
            io(writeln!(out, "wrote {}", p.display()))?;
        }
        None => io(out.write_all(svg.as_bytes()))?,
    }
    Ok(())
}

/// Parameter counts grouped by component: path embeddings, policy trunk,
/// each policy head, log-stds and each value stack.
pub fn component_counts(net: &MoSatNet) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for (name, t) in net.store().iter() {
        let parts: Vec<&str> = name.split('.').collect();
        let key = match parts.as_slice() {
            ["policy", c, ..] if c.starts_with("log_std") => "policy.log_std".to_string(),
            [a, _] => a.to_string(),
            [a, b, ..] => format!("{a}.{b}"),
            _ => name.to_string(),
        };
        *m.entry(key).or_insert(0) += t.len();
    }
    m
}

fn run_inspect(a: &InspectArgs, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let (net, cfg) = match &a.checkpoint {
        Some(p) => {
            let (_, net, cfg) = load_checkpoint(p)?;
            (net, cfg)
        }
        None => {
            let cfg = input(a.common.resolve())?;
            let t = input(Trainer::new(cfg.clone()))?;
            (t.net().clone(), cfg)
        }
    };
    let mut w = String::new();
    use std::fmt::Write as _;
    let _ = writeln!(w, "config_hash {}", cfg.hash());
    let _ = writeln!(w, "profile {}", cfg.profile);
    let _ = writeln!(w, "[parameters]");
    for (k, n) in component_counts(&net) {
        let _ = writeln!(w, "{k} {n}");
    }
    let _ = writeln!(w, "total {}", net.num_params());
    let _ = writeln!(w, "[registry]");
    let _ = writeln!(w, "size {} of {}", net.registry().len(), net.registry().capacity());
    let mut paths: Vec<String> = net.registry().entries().map(|(p, r)| format!("{p} {r}")).collect();
    paths.sort();
    for p in paths {
        let _ = writeln!(w, "{p}");
    }
    let _ = writeln!(w, "[config]");
    w.push_str(&cfg.snapshot());
    io(out.write_all(w.as_bytes()))
}
