mod common;

use std::collections::BTreeMap;

use common::*;
use ndarray::Array2;
use treevae::checkpoint::{load_checkpoint, save_checkpoint};
use treevae::data::Split;
use treevae::generative::{path_probability, reconstruct, sample_conditional, sample_unconditional};
use treevae::inference::{infer, ForwardOptions, Hooks};
use treevae::model::{LikelihoodKind, TreeModel};
use treevae::nn::Mode;
use treevae::runner::{export_tree, hard_assignment, write_generated, GenerateMode, Generated};
use treevae::topology::{NodeId, TreeTopology};
use treevae::trainer::node_reach;

fn ten_leaf_model(shape: Vec<usize>, kind: LikelihoodKind) -> TreeModel<f64> {
    let mut r = rng(10);
    let input: usize = shape.iter().product();
    let mut arch = tiny_arch(input, 6, vec![2; 7], kind);
    arch.input_shape = shape;
    let topo = random_topology(&mut r, 6, 8);
    assert_eq!(topo.leaves().len(), 10);
    let mut m = TreeModel::build(topo, arch, 11).unwrap();
    randomize_buffers(&mut m, &mut r);
    m
}

#[test]
fn unconditional_covers_every_leaf() {
    let m = ten_leaf_model(vec![4, 4, 1], LikelihoodKind::Bernoulli);
    let g = sample_unconditional(&m, 3, &Hooks::default(), &mut rng(1));
    assert_eq!(g.leaf_outputs.len(), 10);
    for out in g.leaf_outputs.values() {
        assert_eq!(out.dim(), (3, 16));
        assert!(out.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn unconditional_grid_has_one_column_per_leaf() {
    let m = ten_leaf_model(vec![4, 4, 1], LikelihoodKind::Bernoulli);
    let g = sample_unconditional(&m, 5, &Hooks::default(), &mut rng(1));
    let mut rows = Vec::new();
    for i in 0..5 {
        for (l, out) in &g.leaf_outputs {
            rows.push((i, l.to_string(), out.row(i).to_vec()));
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let generated = Generated { cols: 10, rows };
    let path = write_generated(dir.path(), GenerateMode::Unconditional, &generated, &[4, 4, 1]).unwrap();
    let img = image::open(path).unwrap();
    // 2-pixel gutters around 4x4 tiles
    assert_eq!((img.width(), img.height()), (10 * 6 + 2, 5 * 6 + 2));
}

#[test]
fn without_noise_outputs_ignore_the_seed() {
    let m = ten_leaf_model(vec![6], LikelihoodKind::Gaussian);
    let hooks = Hooks {
        zero_noise: true,
        ..Hooks::default()
    };
    let a = sample_unconditional(&m, 2, &hooks, &mut rng(1));
    let b = sample_unconditional(&m, 2, &hooks, &mut rng(2));
    assert_eq!(a.leaf_outputs, b.leaf_outputs);
    for out in a.leaf_outputs.values() {
        assert_eq!(out.row(0), out.row(1));
    }
}

#[test]
fn conditional_decodes_one_leaf_per_sample() {
    let m = ten_leaf_model(vec![6], LikelihoodKind::Gaussian);
    let u = sample_unconditional(&m, 8, &Hooks::default(), &mut rng(3));
    let c = sample_conditional(&m, 8, &Hooks::default(), &mut rng(3));
    let samples = c.samples.as_ref().unwrap();
    for (i, p) in c.paths.iter().enumerate() {
        assert!(m.topology.is_leaf(p.leaf()));
        assert_eq!(samples.row(i), u.leaf_outputs[&p.leaf()].row(i));
        // the greedy branch is never the less likely one
        assert!(path_probability(&m, &c, i) >= 0.5f64.powi(p.len() as i32 - 1));
    }
}

#[test]
fn ties_go_left_with_path_probability_two_to_minus_depth() {
    let m = ten_leaf_model(vec![6], LikelihoodKind::Gaussian);
    let t = &m.topology;
    let hooks = Hooks {
        router_p: t.internal_nodes().into_iter().map(|n| (n, 0.5)).collect(),
        ..Hooks::default()
    };
    let c = sample_conditional(&m, 3, &hooks, &mut rng(4));
    let mut leftmost = t.root();
    while let Some((l, _)) = t.children(leftmost) {
        leftmost = l;
    }
    for i in 0..3 {
        assert_eq!(c.paths[i].leaf(), leftmost);
        assert_eq!(path_probability(&m, &c, i), 0.5f64.powi(t.depth(leftmost) as i32));
    }
}

#[test]
fn reconstruction_weights_give_the_clustering_assignment() {
    let m = ten_leaf_model(vec![6], LikelihoodKind::Gaussian);
    let x = random_batch(&mut rng(5), 20, 6, false).mapv(|v| v as f32 as f64);
    let (recs, w) = reconstruct(&m, &x, 2, &mut rng(6)).unwrap();
    assert_eq!(recs.len(), 10);
    let leaves = m.topology.leaves();
    let split = Split {
        x: x.mapv(|v| v as f32),
        y: vec![0; 20],
    };
    let reach = node_reach(&m, &split).unwrap();
    let assigned = hard_assignment(&reach, &leaves);
    for (i, row) in w.rows().into_iter().enumerate() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
        let best = (0..leaves.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        assert_eq!(assigned[i], leaves[best]);
    }
}

#[test]
fn ten_leaf_checkpoint_reloads_exactly() {
    let m = ten_leaf_model(vec![6], LikelihoodKind::Bernoulli);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&m, &path).unwrap();
    let back: TreeModel<f64> = load_checkpoint(&path).unwrap();
    assert_eq!(back.decoder_count(), 10);
    let x = random_batch(&mut rng(7), 5, 6, true);
    let opts = ForwardOptions::new(Mode::Eval).samples(2);
    let a = infer(&m, &x, &opts, &mut rng(8)).unwrap();
    let b = infer(&back, &x, &opts, &mut rng(8)).unwrap();
    assert_eq!(a.path_distribution(), b.path_distribution());
    for l in m.topology.leaves() {
        assert_eq!(a.nodes[&l].decoded, b.nodes[&l].decoded);
    }
}

#[test]
fn export_picks_the_highest_reach_representatives() {
    let m = ten_leaf_model(vec![6], LikelihoodKind::Gaussian);
    let x: Array2<f64> = random_batch(&mut rng(9), 30, 6, false);
    let split = Split {
        x: x.mapv(|v| v as f32),
        y: (0..30).map(|i| i % 3).collect(),
    };
    let export = export_tree(&m, &split, 4).unwrap();
    let reach: BTreeMap<NodeId, Vec<f64>> = node_reach(&m, &split).unwrap();
    assert_eq!(export.leaves.iter().map(|l| l.count).sum::<usize>(), 30);
    for leaf in &export.leaves {
        assert_eq!(leaf.representatives.len(), 4);
        let r = &reach[&leaf.id];
        let floor = leaf.representatives.iter().map(|&i| r[i]).fold(f64::INFINITY, f64::min);
        for (i, &v) in r.iter().enumerate() {
            if !leaf.representatives.contains(&i) {
                assert!(v <= floor);
            }
        }
    }
    let json = serde_json::to_string(&export.topology).unwrap();
    let back = TreeTopology::from_json(&serde_json::from_str(&json).unwrap()).unwrap();
    assert_eq!(back, m.topology);
}
