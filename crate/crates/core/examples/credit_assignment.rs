//! Stage-split credit assignment against plain GAE on one short episode.

use morphogen::credit::{assign_credit, CreditConfig, CreditMode, Transition};
use morphogen::envsim::StageFlag;

fn episode() -> Vec<Transition> {
    let steps = [
        (StageFlag::Topo, 0.0, 0.5, 0.5),
        (StageFlag::Topo, 0.0, 0.5, 0.5),
        (StageFlag::Attr, 0.0, 0.5, 0.2),
        (StageFlag::Ctrl, 1.0, 0.2, 0.4),
        (StageFlag::Ctrl, 2.0, 0.4, 0.1),
        (StageFlag::Ctrl, 0.5, 0.1, 0.0),
    ];
    let mut buf: Vec<Transition> = steps.iter().map(|&(s, r, v, nv)| Transition::bare(s, r, v, nv)).collect();
    buf[0].episode_start = true;
    buf.last_mut().unwrap().terminated = true;
    buf
}

fn main() -> morphogen::Result<()> {
    let (gamma, lambda) = (0.99, 0.95);
    let mut enhanced = episode();
    assign_credit(&mut enhanced, gamma, lambda, &CreditConfig::default())?;
    let mut vanilla = episode();
    assign_credit(&mut vanilla, gamma, lambda, &CreditConfig { mode: CreditMode::Vanilla, ..CreditConfig::default() })?;

    println!("{:<5} {:>6} {:>6} {:>10} {:>10}", "stage", "reward", "value", "enhanced", "vanilla");
    for (e, v) in enhanced.iter().zip(&vanilla) {
        println!(
            "{:<5} {:>6.2} {:>6.2} {:>10.4} {:>10.4}",
            e.stage.as_str(),
            e.reward,
            e.value,
            e.advantage.unwrap(),
            v.advantage.unwrap()
        );
    }
    // design steps see the undiscounted episode return minus their value
    let fitness: f64 = enhanced.iter().map(|t| t.reward).sum();
    println!("fitness {fitness}: design advantage = fitness - V = {:.2}", fitness - enhanced[0].value);
    Ok(())
}
