mod common;

use std::collections::BTreeMap;

use common::rng;
use ndarray::Array2;
use treevae::autodiff::Tape;
use treevae::config::RunConfig;
use treevae::data::Dataset;
use treevae::inference::{forward, ForwardOptions};
use treevae::model::TreeModel;
use treevae::nn::Mode;
use treevae::objective::{loss, LossSettings};
use treevae::topology::{NodeId, TreeTopology};
use treevae::trainer::{prune_empty, run_growing_loop, train_phase, Phase, PhaseScope, PhaseSettings, TrainReport};

fn config(seed: u64, extra: &str) -> RunConfig {
    RunConfig::from_toml(&format!(
        r#"
seed = {seed}
[dataset]
name = "synthetic"
[dataset.synthetic]
n = 480
dim = 8
clusters = 4
separation = 6.0
[arch]
latent_dims = [2]
max_depth = 4
bottom_up_width = 16
transform_width = 8
router_width = 8
encoder_hidden = [16]
decoder_hidden = [16]
[growth]
epochs_per_step = 3
final_epochs = 3
intermediate_epochs = 2
max_leaves = 4
batch_size = 64
{extra}
"#
    ))
    .unwrap()
}

fn setup(seed: u64) -> (RunConfig, Dataset, TreeModel<f64>) {
    let cfg = config(seed, "");
    let data = cfg.load_dataset().unwrap();
    let arch = cfg.arch_config(&data.input_shape, data.likelihood);
    let model = TreeModel::build(TreeTopology::new_root_tree(arch.max_depth), arch, seed).unwrap();
    (cfg, data, model)
}

fn phase(epochs: usize, scope: PhaseScope) -> Phase<'static> {
    Phase {
        id: 1,
        kind: "test",
        epochs,
        scope,
        anneal_rate: 0.01,
    }
}

fn state(m: &TreeModel<f64>) -> BTreeMap<String, Array2<f64>> {
    m.named_params()
        .into_iter()
        .chain(m.named_buffers())
        .map(|(n, a)| (n, a.clone()))
        .collect()
}

fn run(model: &mut TreeModel<f64>, cfg: &RunConfig, data: &Dataset, p: Phase<'_>, seed: u64) {
    let all: Vec<usize> = (0..data.train.len()).collect();
    let settings = PhaseSettings::from_config(cfg);
    let mut report = TrainReport::default();
    train_phase(
        model,
        &data.train,
        &data.input_shape,
        &all,
        p,
        &settings,
        &mut rng(seed),
        &mut report,
    )
    .unwrap();
    assert_eq!(report.epochs.len(), p.epochs);
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let (cfg, data, mut model) = setup(0);
    let before = state(&model);
    run(&mut model, &cfg, &data, phase(0, PhaseScope::Full), 1);
    assert_eq!(before, state(&model));
}

#[test]
fn subtree_phase_only_touches_the_new_children_and_parent_routers() {
    let (cfg, data, mut model) = setup(1);
    run(&mut model, &cfg, &data, phase(2, PhaseScope::Full), 2);
    let leaf = NodeId(1);
    let grown = model.topology.grow_at(leaf).unwrap();
    model.attach_subtree_functions(grown, leaf, 9).unwrap();
    let (a, b) = model.topology.children(leaf).unwrap();
    let before = state(&model);
    run(&mut model, &cfg, &data, phase(2, PhaseScope::Subtree(leaf)), 3);
    let after = state(&model);
    let in_scope = |name: &str| {
        name.starts_with(&format!("node{a}."))
            || name.starts_with(&format!("node{b}."))
            || name.starts_with(&format!("node{leaf}.router_"))
    };
    let mut changed = 0;
    for (name, v) in &before {
        if in_scope(name) {
            changed += usize::from(*v != after[name]);
        } else {
            assert_eq!(v, &after[name], "{name} changed outside the subtree");
        }
    }
    assert!(changed > 0);
    assert_eq!(
        model.trainable_param_names().len(),
        model.named_params().len(),
        "flags restored after the phase"
    );
}

#[test]
fn every_parameter_receives_gradient_when_unfrozen() {
    let (_, data, mut model) = setup(2);
    let grown = model.topology.grow_at(NodeId(2)).unwrap();
    model.attach_subtree_functions(grown, NodeId(2), 4).unwrap();
    model.set_all_trainable(true);
    let idx: Vec<usize> = (0..64).collect();
    let x: Array2<f64> = data.train.rows(&idx);
    let mut tape = Tape::new();
    let mut fwd = forward(&model, &mut tape, &x, &ForwardOptions::new(Mode::Train), &mut rng(5)).unwrap();
    let settings = LossSettings {
        likelihood: model.arch.likelihood,
        beta: 1.0,
        contrastive: None,
    };
    let vars = loss(&model, &mut tape, &mut fwd, &settings).unwrap();
    let grads = tape.backward(vars.total);
    let mut norms: BTreeMap<&str, f64> = BTreeMap::new();
    for (name, var) in &fwd.ctx.bindings {
        let g = grads.get(*var).map_or(0.0, |g| g.iter().map(|v| v * v).sum::<f64>());
        *norms.entry(name.as_str()).or_default() += g;
    }
    // projection heads only enter through the contrastive loss
    let expected: Vec<String> = model
        .trainable_param_names()
        .into_iter()
        .filter(|n| !n.starts_with("projection"))
        .collect();
    for name in &expected {
        assert!(
            norms.get(name.as_str()).copied().unwrap_or(0.0) > 0.0,
            "{name} got no gradient"
        );
    }
}

fn eval_loss(model: &TreeModel<f64>, x: &Array2<f64>) -> f64 {
    let mut tape = Tape::new();
    let opts = ForwardOptions::new(Mode::Eval).samples(4);
    let mut fwd = forward(model, &mut tape, x, &opts, &mut rng(77)).unwrap();
    let settings = LossSettings {
        likelihood: model.arch.likelihood,
        beta: 1.0,
        contrastive: None,
    };
    loss(model, &mut tape, &mut fwd, &settings)
        .unwrap()
        .terms(&tape)
        .negative_elbo()
}

#[test]
fn root_training_lowers_held_out_loss() {
    let mut improved = 0;
    for seed in 0..10 {
        let (cfg, data, mut model) = setup(100 + seed);
        let idx: Vec<usize> = (0..data.test.len()).collect();
        let x: Array2<f64> = data.test.rows(&idx);
        let before = eval_loss(&model, &x);
        run(&mut model, &cfg, &data, phase(10, PhaseScope::Full), seed);
        improved += usize::from(eval_loss(&model, &x) < before);
    }
    assert!(improved >= 8, "{improved}/10");
}

fn last_bias<'a>(model: &'a mut TreeModel<f64>, module: &str) -> &'a mut Array2<f64> {
    let prefix = format!("{module}.l");
    model
        .named_params_mut()
        .into_iter()
        .filter(|(n, _)| n.starts_with(&prefix) && n.ends_with(".b"))
        .max_by_key(|(n, _)| n.clone())
        .map(|(_, b)| b)
        .expect("router has a bias")
}

fn three_leaf_model() -> (Dataset, TreeModel<f64>) {
    let (cfg, data, mut model) = setup(3);
    run(&mut model, &cfg, &data, phase(2, PhaseScope::Full), 4);
    let grown = model.topology.grow_at(NodeId(2)).unwrap();
    model.attach_subtree_functions(grown, NodeId(2), 5).unwrap();
    (data, model)
}

#[test]
fn prune_removes_an_unreached_leaf() {
    let (data, mut model) = three_leaf_model();
    let (left, right) = model.topology.children(NodeId(2)).unwrap();
    // router outputs saturate at the right branch
    last_bias(&mut model, "node2.router_q").fill(60.0);
    let pruned = prune_empty(&mut model, &data.train, 0.01, 0).unwrap();
    assert_eq!(pruned, vec![left]);
    assert_eq!(model.topology.leaves().len(), 2);
    assert!(!model.topology.contains(left));
    // the lone right child is lifted into its parent's place
    assert!(!model.topology.contains(right) || model.topology.is_leaf(right));
    model.check_functions().unwrap();
}

#[test]
fn prune_keeps_leaves_above_threshold() {
    let (data, mut model) = three_leaf_model();
    let before = state(&model);
    assert!(prune_empty(&mut model, &data.train, 1e-12, 0).unwrap().is_empty());
    assert_eq!(before, state(&model));
}

#[test]
fn prune_stops_at_two_leaves() {
    let (data, mut model) = three_leaf_model();
    let pruned = prune_empty(&mut model, &data.train, 0.99, 0).unwrap();
    assert_eq!(pruned.len(), 1);
    assert_eq!(model.topology.leaves().len(), 2);
    let (_, data, mut root) = setup(4);
    assert!(prune_empty(&mut root, &data.train, 0.99, 0).unwrap().is_empty());
}

fn phase_kinds(report: &TrainReport) -> Vec<String> {
    let mut out: Vec<(usize, String)> = report.epochs.iter().map(|r| (r.phase, r.kind.clone())).collect();
    out.dedup();
    out.into_iter().map(|(_, k)| k).collect()
}

#[test]
fn growing_loop_reaches_max_leaves() {
    let cfg = config(5, "");
    let data = cfg.load_dataset().unwrap();
    let (model, report) = run_growing_loop::<f64>(&cfg, &data).unwrap();
    assert_eq!(model.topology.leaves().len(), 4);
    assert_eq!(phase_kinds(&report), ["root", "subtree", "subtree", "final"]);
    let occ: f64 = report.occupancy.values().sum();
    assert!((occ - 1.0).abs() < 1e-9);
}

#[test]
fn intermediate_fine_tunes_follow_every_third_growth() {
    let mut cfg = config(6, "");
    cfg.growth.max_leaves = 8;
    cfg.arch.max_depth = 5;
    cfg.arch.latent_dims = vec![2];
    let data = cfg.load_dataset().unwrap();
    let (model, report) = run_growing_loop::<f64>(&cfg, &data).unwrap();
    assert_eq!(model.topology.leaves().len(), 8);
    let kinds = phase_kinds(&report);
    let expected = [
        "root",
        "subtree",
        "subtree",
        "subtree",
        "intermediate",
        "subtree",
        "subtree",
        "subtree",
        "intermediate",
        "final",
    ];
    assert_eq!(kinds, expected);
}

#[test]
fn growing_loop_is_deterministic() {
    let cfg = config(7, "");
    let data = cfg.load_dataset().unwrap();
    let (a, ra) = run_growing_loop::<f64>(&cfg, &data).unwrap();
    let (b, rb) = run_growing_loop::<f64>(&cfg, &data).unwrap();
    assert_eq!(state(&a), state(&b));
    assert_eq!(ra.loss_csv(), rb.loss_csv());
}
