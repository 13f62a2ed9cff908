use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::envsim::{LimbObservation, OBS_DIM};
use crate::morphology::{AttrRanges, MorphologyGraph};
use crate::mosat::MoSatConfig;
use crate::policy::StageDist;

fn tiny_net(seed: u64) -> MoSatNet {
    let cfg = MoSatConfig { d_model: 8, heads: 2, policy_blocks: 1, value_blocks: 1, ffn_ratio: 2, ..MoSatConfig::default() };
    MoSatNet::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Transitions sampled from `net` itself, so every ratio starts at 1.
fn sampled(net: &mut MoSatNet, n: usize, stages: &[StageFlag], seed: u64) -> Vec<Transition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let stage = stages[i % stages.len()];
            let limbs = rng.gen_range(1..=4);
            let g = MorphologyGraph::chain(limbs, &AttrRanges::default());
            let paths = g.paths();
            net.registry_mut().allocate_all(&paths).unwrap();
            let obs: Vec<LimbObservation> =
                (0..limbs).map(|_| std::array::from_fn::<f64, OBS_DIM, _>(|_| rng.gen_range(-1.0..1.0))).collect();
            let (head, value) = net.forward_single(&obs, &paths, stage).unwrap();
            let dist = StageDist::new(stage, head, net.log_std(stage)).unwrap();
            let rec = dist.sample(stage, &mut rng);
            let mut t = Transition::bare(stage, 0.0, value, 0.0);
            t.obs = obs;
            t.paths = paths;
            t.action = rec.actions;
            t.log_prob = rec.log_prob;
            t.advantage = Some(rng.gen_range(-2.0..2.0));
            t.ret = Some(value + rng.gen_range(-1.0..1.0));
            t
        })
        .collect()
}

fn advs(buf: &[Transition]) -> Vec<f64> {
    buf.iter().map(|t| t.advantage.unwrap()).collect()
}

#[test]
fn objective_matches_the_differentiated_loss() {
    let mut net = tiny_net(4);
    let buf = sampled(&mut net, 9, &StageFlag::ALL, 5);
    let items: Vec<&Transition> = buf.iter().collect();
    let adv = advs(&buf);
    let full = minibatch_loss(&net, &items, &adv, 0.2).unwrap();
    assert_eq!(minibatch_objective(&net, &items, &adv, 0.2).unwrap(), full.loss);
}

#[test]
fn surrogate_examples() {
    assert_eq!(policy_loss(&[0.0], &[0.0], &[1.0], 0.2), -1.0);
    assert!((policy_loss(&[1.5f64.ln()], &[0.0], &[1.0], 0.2) + 1.2).abs() < 1e-12);
    assert!((policy_loss(&[0.5f64.ln()], &[0.0], &[-1.0], 0.2) - 0.8).abs() < 1e-12);
}

#[test]
fn value_loss_examples() {
    assert_eq!(value_loss(&[1.5, -2.0], &[1.5, -2.0]), 0.0);
    assert_eq!(value_loss(&[0.0], &[2.0]), 4.0);
    let tape = Tape::new();
    let v = tape.param(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
    let r = tape.constant(Tensor::new(vec![2], vec![2.0, -1.0]).unwrap());
    let d = tape.sub(v, r).unwrap();
    let loss = tape.mean(tape.mul(d, d).unwrap());
    let g = tape.backward(loss).unwrap();
    assert!(g.get(r).is_none());
    assert_eq!(g.get(v).unwrap(), [-2.0, 2.0]);
}

#[test]
fn ratio_one_gives_negative_mean_advantage() {
    let mut net = tiny_net(1);
    let buf = sampled(&mut net, 12, &StageFlag::ALL, 2);
    let items: Vec<&Transition> = buf.iter().collect();
    let adv = advs(&buf);
    let out = minibatch_loss(&net, &items, &adv, 0.2).unwrap();
    let mean = adv.iter().sum::<f64>() / adv.len() as f64;
    assert!((out.stats.policy_loss + mean).abs() < 1e-10);
    assert!(out.stats.clip_frac == 0.0 && out.stats.kl.abs() < 1e-12);
    let values: Vec<f64> = buf.iter().map(|t| t.value).collect();
    let targets: Vec<f64> = buf.iter().map(|t| t.ret.unwrap()).collect();
    assert!((out.stats.value_loss - value_loss(&values, &targets)).abs() < 1e-10);
}

#[test]
fn ratio_one_gradient_is_the_policy_gradient_estimator() {
    let mut net = tiny_net(3);
    let buf = sampled(&mut net, 2, &[StageFlag::Topo, StageFlag::Ctrl], 4);
    let items: Vec<&Transition> = buf.iter().collect();
    let adv = advs(&buf);
    let out = minibatch_loss(&net, &items, &adv, 0.2).unwrap();

    let mut want = vec![Vec::new(); net.store().len()];
    for (t, a) in buf.iter().zip(&adv) {
        let tape = Tape::new();
        let vars = net.bind(&tape);
        let batch = net.make_batch(&[(t.obs.as_slice(), t.paths.as_slice())]).unwrap();
        let head = net.policy_vars(&tape, &vars, &batch, t.stage).unwrap();
        let owner = vec![Some(0); t.obs.len()];
        let lp = log_prob_var(&tape, t.stage, head, net.log_std_var(&vars, t.stage), &t.action, &owner, 1).unwrap();
        let g = tape.backward(tape.sum(lp)).unwrap();
        for id in net.store().ids() {
            let gi = g.get_or_zeros(vars[id.0], net.store().get(id).len());
            let w = &mut want[id.0];
            w.resize(gi.len(), 0.0);
            w.iter_mut().zip(gi).for_each(|(w, g)| *w -= a * g / buf.len() as f64);
        }
    }
    let mut checked = 0;
    for id in net.store().ids() {
        if !net.store().name(id).starts_with("policy.") {
            continue;
        }
        for (x, y) in out.grads[id.0].iter().zip(&want[id.0]) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1e-8), "{}: {x} vs {y}", net.store().name(id));
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn stage_routing_touches_only_matching_heads_and_values() {
    let mut net = tiny_net(5);
    for stage in StageFlag::ALL {
        let buf = sampled(&mut net, 6, &[stage], 6);
        let items: Vec<&Transition> = buf.iter().collect();
        let out = minibatch_loss(&net, &items, &advs(&buf), 0.2).unwrap();
        for id in net.store().ids() {
            let name = net.store().name(id);
            let nonzero = out.grads[id.0].iter().any(|g| *g != 0.0);
            for other in StageFlag::ALL.into_iter().filter(|s| *s != stage) {
                let foreign = name.starts_with(&format!("value_{other}."))
                    || name.starts_with(&format!("policy.head_{other}."))
                    || name == format!("policy.log_std_{other}");
                assert!(!(foreign && nonzero), "{stage} batch moved {name}");
            }
            if name.starts_with(&format!("value_{stage}.head")) || name.starts_with(&format!("policy.head_{stage}.")) {
                assert!(nonzero, "{stage} batch left {name} untouched");
            }
        }
    }
}

#[test]
fn value_loss_does_not_reach_policy_parameters() {
    let mut net = tiny_net(7);
    let buf = sampled(&mut net, 6, &StageFlag::ALL, 8);
    let items: Vec<&Transition> = buf.iter().collect();
    let zero_adv = vec![0.0; buf.len()];
    let out = minibatch_loss(&net, &items, &zero_adv, 0.2).unwrap();
    for id in net.group_params(Group::Policy) {
        if id == net.embedding_id() {
            continue;
        }
        assert!(out.grads[id.0].iter().all(|g| *g == 0.0), "{}", net.store().name(id));
    }
}

#[test]
fn update_is_deterministic_and_reports_bounded_metrics() {
    let run = || {
        let mut net = tiny_net(9);
        let buf = sampled(&mut net, 40, &StageFlag::ALL, 10);
        let cfg = PpoConfig { batch: 40, minibatch: 16, epochs: 3, policy_lr: 1e-2, value_lr: 1e-2, ..PpoConfig::default() };
        let mut opt = Optimizers::new(&net, &cfg);
        let m = update(&mut net, &mut opt, &buf, &cfg, &CreditConfig::default(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let bytes: Vec<u64> = net.store().iter().flat_map(|(_, t)| t.data().iter().map(|x| x.to_bits())).collect();
        (m, bytes)
    };
    let (m, a) = run();
    let (_, b) = run();
    assert_eq!(a, b);
    assert_eq!(m.minibatches, 9);
    assert!((0.0..=1.0).contains(&m.clip_frac));
    assert!(m.clip_frac > 0.0, "large steps should clip some ratios");
    assert!(m.kl >= 0.0);
}

#[test]
fn non_finite_ratio_skips_the_minibatch() {
    let mut net = tiny_net(12);
    let mut buf = sampled(&mut net, 4, &[StageFlag::Ctrl], 13);
    for t in &mut buf {
        t.obs.truncate(1);
        t.paths.truncate(1);
        t.action = Actions::Continuous(vec![0.0]);
    }
    buf.extend(sampled(&mut net, 4, &[StageFlag::Topo], 14));
    buf[5].log_prob = f64::NEG_INFINITY;
    let cfg = PpoConfig { batch: 8, minibatch: 8, epochs: 2, ..PpoConfig::default() };
    let mut opt = Optimizers::new(&net, &cfg);
    let before = net.store().clone();
    let m = update(&mut net, &mut opt, &buf, &cfg, &CreditConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!((m.skipped, m.minibatches), (2, 0));
    assert!(net.store().iter().zip(before.iter()).all(|(a, b)| a.1 == b.1));
}

#[test]
fn optimizer_state_round_trips() {
    let mut net = tiny_net(15);
    let buf = sampled(&mut net, 10, &StageFlag::ALL, 16);
    let cfg = PpoConfig { batch: 10, minibatch: 5, epochs: 1, ..PpoConfig::default() };
    let mut opt = Optimizers::new(&net, &cfg);
    update(&mut net, &mut opt, &buf, &cfg, &CreditConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut ck = net.to_checkpoint();
    opt.write_checkpoint(&net, &mut ck);
    let net2 = MoSatNet::from_checkpoint(&ck).unwrap();
    let mut opt2 = Optimizers::new(&net2, &cfg);
    opt2.read_checkpoint(&net2, &ck).unwrap();
    assert_eq!(opt, opt2);
    assert_eq!(opt2.groups[0].1.step, 2);
}

#[test]
fn config_validation() {
    assert!(PpoConfig::default().validate().is_ok());
    assert!(PpoConfig { minibatch: 60_000, ..PpoConfig::default() }.validate().is_err());
    assert!(PpoConfig { clip: 0.0, ..PpoConfig::default() }.validate().is_err());
}
