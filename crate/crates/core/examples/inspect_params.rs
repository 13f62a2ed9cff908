//! Parameter budget of the network at both scale presets.

use morphogen::cli::component_counts;
use morphogen::config::{Config, ConfigProfile};
use morphogen::envsim::Profile;
use morphogen::trainer::Trainer;

fn main() -> morphogen::Result<()> {
    for profile in [ConfigProfile::Desk, ConfigProfile::Paper] {
        let cfg = Config::preset(profile, Profile::Runner);
        let trainer = Trainer::new(cfg.clone())?;
        let net = trainer.net();
        println!(
            "{profile}: D={} heads={} policy blocks={} value blocks={}  hash {}",
            cfg.net.d_model,
            cfg.net.heads,
            cfg.net.policy_blocks,
            cfg.net.value_blocks,
            cfg.hash()
        );
        for (component, n) in component_counts(net) {
            println!("  {component:<24} {n:>9}");
        }
        println!("  {:<24} {:>9}\n", "total", net.num_params());
    }
    Ok(())
}
