use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::morphology::{AttrRanges, DesignLimits, MorphologyGraph, TopoAction};

fn tiny() -> MoSatConfig {
    MoSatConfig { d_model: 8, heads: 2, policy_blocks: 1, value_blocks: 1, ffn_ratio: 2, registry_capacity: 32, ..Default::default() }
}

fn random_obs(rng: &mut ChaCha8Rng, l: usize) -> Vec<LimbObservation> {
    (0..l).map(|_| std::array::from_fn(|_| rng.gen_range(-2.0..2.0))).collect()
}

fn random_graph(rng: &mut ChaCha8Rng, max: usize) -> MorphologyGraph {
    let r = AttrRanges::default();
    let limits = DesignLimits { max_limbs: max, ..DesignLimits::default() };
    let mut g = MorphologyGraph::chain(1, &r);
    for _ in 0..rng.gen_range(0..6) {
        let acts: Vec<_> = (0..g.len()).map(|_| TopoAction::from_index(rng.gen_range(0..3)).unwrap()).collect();
        g.apply_topo_actions(&acts, &limits, &r).unwrap();
    }
    g
}

fn net_with_paths(cfg: MoSatConfig, seed: u64) -> MoSatNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MoSatNet::new(cfg, &mut rng).unwrap()
}

#[test]
fn head_widths_per_stage() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = net_with_paths(tiny(), 1);
    let g = MorphologyGraph::chain(3, &AttrRanges::default());
    let obs = random_obs(&mut rng, 3);
    for (stage, w) in [(StageFlag::Topo, 3), (StageFlag::Attr, 4), (StageFlag::Ctrl, 1)] {
        let (out, v) = net.forward_single(&obs, &g.paths(), stage).unwrap();
        assert_eq!(out.shape(), &[3, w]);
        assert!(v.is_finite());
    }
}

#[test]
fn zero_observation_projects_to_the_path_embedding() {
    let mut net = net_with_paths(tiny(), 2);
    let path = TopoPath(vec![1, 2]);
    let row = net.registry_mut().allocate(&path).unwrap();
    let batch = net.make_batch(&[(&[[0.0; OBS_DIM]], &[path])]).unwrap();
    let tape = Tape::new();
    let vars = net.bind(&tape);
    let tok = net.project(&tape, &vars, net.policy_stack(StageFlag::Ctrl), &batch).unwrap();
    assert_eq!(tape.get(tok).data(), net.store().get(net.embedding_id()).row(row));
}

#[test]
fn root_only_gives_one_token_and_unit_attention() {
    let net = net_with_paths(tiny(), 3);
    let maps = net.attention_maps(&[[0.5; OBS_DIM]], &[TopoPath::root()], StageFlag::Ctrl).unwrap();
    assert_eq!(maps.len(), 1);
    assert_eq!(maps[0].data(), &[1.0]);
}

#[test]
fn identical_tokens_give_identical_rows() {
    let net = net_with_paths(tiny(), 4);
    let obs = vec![[0.3; OBS_DIM]; 2];
    // unregistered paths share the zero embedding
    let paths = vec![TopoPath(vec![7]), TopoPath(vec![8])];
    let (out, _) = net.forward_single(&obs, &paths, StageFlag::Attr).unwrap();
    assert_eq!(out.row(0), out.row(1));
}

#[test]
fn masked_token_cannot_influence_others() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = net_with_paths(tiny(), 5);
    let a = random_obs(&mut rng, 2);
    let b = random_obs(&mut rng, 3);
    let mut batch = PaddedBatch::new(&[(&a, vec![None; 2]), (&b, vec![None; 3])]).unwrap();
    let before = net.forward_batch(&batch, StageFlag::Ctrl).unwrap();
    let junk = batch.flat(0, 2);
    batch.states.data_mut()[junk * OBS_DIM..(junk + 1) * OBS_DIM].iter_mut().for_each(|x| *x = rng.gen_range(-50.0..50.0));
    let after = net.forward_batch(&batch, StageFlag::Ctrl).unwrap();
    assert_eq!(before.heads[0], after.heads[0]);
    assert_eq!(before.values[0], after.values[0]);
}

#[test]
fn batch_matches_single_and_is_order_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut net = net_with_paths(MoSatConfig { d_model: 16, heads: 4, ..tiny() }, 6);
    for _ in 0..20 {
        let graphs: Vec<_> = (0..rng.gen_range(1..6)).map(|_| random_graph(&mut rng, 8)).collect();
        for g in &graphs {
            if rng.gen_bool(0.7) {
                net.registry_mut().allocate_all(&g.paths()).unwrap();
            }
        }
        let obs: Vec<_> = graphs.iter().map(|g| random_obs(&mut rng, g.len())).collect();
        let paths: Vec<_> = graphs.iter().map(|g| g.paths()).collect();
        let items: Vec<(&[LimbObservation], &[TopoPath])> =
            obs.iter().zip(&paths).map(|(o, p)| (o.as_slice(), p.as_slice())).collect();
        for stage in StageFlag::ALL {
            let out = net.forward_batch(&net.make_batch(&items).unwrap(), stage).unwrap();
            for (i, (o, p)) in items.iter().enumerate() {
                let (h, v) = net.forward_single(o, p, stage).unwrap();
                let diff = h.data().iter().zip(out.heads[i].data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(diff < 1e-10 && (v - out.values[i]).abs() < 1e-10);
            }
            let rev: Vec<_> = items.iter().rev().copied().collect();
            let back = net.forward_batch(&net.make_batch(&rev).unwrap(), stage).unwrap();
            for i in 0..items.len() {
                let j = items.len() - 1 - i;
                assert_eq!(back.values[j], out.values[i]);
            }
        }
    }
}

#[test]
fn value_reads_the_root_token_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = net_with_paths(tiny(), 7);
    let obs = random_obs(&mut rng, 4);
    let batch = net.make_batch(&[(&obs, &MorphologyGraph::chain(4, &AttrRanges::default()).paths())]).unwrap();
    let read = |tokens: Tensor| {
        let tape = Tape::new();
        let vars = net.bind(&tape);
        let t = tape.constant(tokens);
        let v = net.value_readout(&tape, &vars, t, &batch, StageFlag::Topo).unwrap();
        tape.item(v)
    };
    let tokens = Tensor::uniform(&[4, 8], 1.0, &mut rng);
    let mut altered = tokens.clone();
    altered.data_mut()[8..].iter_mut().for_each(|x| *x += rng.gen_range(-3.0..3.0));
    assert_eq!(read(tokens.clone()), read(altered));
    let mut root_changed = tokens.clone();
    root_changed.data_mut()[0] += 1.0;
    assert_ne!(read(tokens), read(root_changed));
}

#[test]
fn gradient_reaches_used_embedding_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut net = net_with_paths(tiny(), 8);
    let g = MorphologyGraph::chain(3, &AttrRanges::default());
    net.registry_mut().allocate_all(&g.paths()).unwrap();
    let obs = random_obs(&mut rng, 3);
    let batch = net.make_batch(&[(&obs, &g.paths())]).unwrap();
    let tape = Tape::new();
    let vars = net.bind(&tape);
    let out = net.policy_vars(&tape, &vars, &batch, StageFlag::Ctrl).unwrap();
    let loss = tape.sum(out);
    let grads = tape.backward(loss).unwrap();
    let ge = grads.get(vars[net.embedding_id().0]).unwrap();
    let d = net.config().d_model;
    assert!(ge[..3 * d].iter().any(|&x| x != 0.0));
    assert!(ge[3 * d..].iter().all(|&x| x == 0.0));
}

#[test]
fn full_forward_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut net = net_with_paths(MoSatConfig { d_model: 4, heads: 2, ffn_ratio: 2, registry_capacity: 6, ..tiny() }, 9);
    let graphs = [MorphologyGraph::chain(3, &AttrRanges::default()), MorphologyGraph::chain(1, &AttrRanges::default())];
    for g in &graphs {
        net.registry_mut().allocate_all(&g.paths()).unwrap();
    }
    let obs: Vec<_> = graphs.iter().map(|g| random_obs(&mut rng, g.len())).collect();
    let paths: Vec<_> = graphs.iter().map(|g| g.paths()).collect();
    let batch = net
        .make_batch(&[(obs[0].as_slice(), paths[0].as_slice()), (obs[1].as_slice(), paths[1].as_slice())])
        .unwrap();
    let weights = Tensor::uniform(&[batch.batch_size() * batch.max_len, 4], 1.0, &mut rng);
    let loss_of = |net: &MoSatNet| -> (f64, Vec<Vec<f64>>) {
        let tape = Tape::new();
        let vars = net.bind(&tape);
        let out = net.policy_vars(&tape, &vars, &batch, StageFlag::Attr).unwrap();
        let w = tape.constant(weights.clone());
        let val = net.value_vars(&tape, &vars, &batch, StageFlag::Attr).unwrap();
        let l = tape.add(tape.sum(tape.mul(out, w).unwrap()), tape.sum(val)).unwrap();
        let grads = tape.backward(l).unwrap();
        let g = net.store().ids().map(|id| grads.get_or_zeros(vars[id.0], net.store().get(id).len())).collect();
        (tape.item(l), g)
    };
    let (_, analytic) = loss_of(&net);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = net.store().ids().collect();
    for id in ids {
        for i in 0..net.store().get(id).len() {
            let x0 = net.store().get(id).data()[i];
            net.store_mut().get_mut(id).data_mut()[i] = x0 + h;
            let up = loss_of(&net).0;
            net.store_mut().get_mut(id).data_mut()[i] = x0 - h;
            let down = loss_of(&net).0;
            net.store_mut().get_mut(id).data_mut()[i] = x0;
            let fd = (up - down) / (2.0 * h);
            let a = analytic[id.0][i];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-3));
        }
    }
    assert!(worst < 1e-5, "worst relative error {worst}");
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut net = net_with_paths(tiny(), 10);
    let g = random_graph(&mut rng, 6);
    net.registry_mut().allocate_all(&g.paths()).unwrap();
    let mut buf = Vec::new();
    net.to_checkpoint().write_to(&mut buf).unwrap();
    let back = MoSatNet::from_checkpoint(&Checkpoint::read_from(buf.as_slice()).unwrap()).unwrap();
    let obs = random_obs(&mut rng, g.len());
    for stage in StageFlag::ALL {
        assert_eq!(net.forward_single(&obs, &g.paths(), stage).unwrap(), back.forward_single(&obs, &g.paths(), stage).unwrap());
    }
    assert_eq!(back.registry(), net.registry());
}

fn closed_form_count(cfg: &MoSatConfig) -> usize {
    let d = cfg.d_model;
    let f = d * cfg.ffn_ratio;
    let block = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
    let trunk = |n: usize| (OBS_DIM * d + d) + n * block + 2 * d;
    let trunks = if cfg.shared_trunk { 1 } else { 3 };
    cfg.registry_capacity * d
        + trunks * trunk(cfg.policy_blocks)
        + (d * 3 + 3) + (d * 4 + 4) + (d + 1)
        + 4 + 1
        + 3 * (trunk(cfg.value_blocks) + d + 1)
}

#[test]
fn parameter_count_matches_closed_form() {
    for cfg in [tiny(), MoSatConfig::default(), MoSatConfig { shared_trunk: false, ..tiny() }] {
        let net = net_with_paths(cfg.clone(), 0);
        assert_eq!(net.num_params(), closed_form_count(&cfg));
        assert_eq!(net.param_report().iter().map(|(_, n)| n).sum::<usize>(), net.num_params());
    }
}

#[test]
fn groups_partition_parameters() {
    let net = net_with_paths(tiny(), 0);
    let mut all: Vec<usize> = [Group::Policy, Group::Value(StageFlag::Topo), Group::Value(StageFlag::Attr), Group::Value(StageFlag::Ctrl)]
        .iter()
        .flat_map(|&g| net.group_params(g))
        .map(|id| id.0)
        .collect();
    all.sort_unstable();
    assert_eq!(all, (0..net.store().len()).collect::<Vec<_>>());
    assert!(net.group_params(Group::Policy).contains(&net.embedding_id()));
}
