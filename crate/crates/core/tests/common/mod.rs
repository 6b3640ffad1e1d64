#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use treevae::model::{ArchConfig, LikelihoodKind, TreeModel};
use treevae::topology::{NodeId, TreeTopology};

/// Tiny architecture for verification runs.
pub fn tiny_arch(input: usize, max_depth: usize, latent: Vec<usize>, kind: LikelihoodKind) -> ArchConfig {
    ArchConfig {
        input_shape: vec![input],
        likelihood: kind,
        encoder_hidden: vec![6, 5],
        bottom_up_width: 5,
        latent_dims: latent,
        max_depth,
        transform_width: 4,
        router_width: 4,
        decoder_hidden: vec![4],
        projection: None,
        root_merge_prior: true,
    }
}

/// Grow random leaves of a root tree, staying within `max_depth`.
pub fn random_topology(rng: &mut impl Rng, max_depth: usize, grows: usize) -> TreeTopology {
    let mut t = TreeTopology::new_root_tree(max_depth);
    for _ in 0..grows {
        let eligible: Vec<NodeId> = t.leaves().into_iter().filter(|&l| t.depth(l) < max_depth).collect();
        if eligible.is_empty() {
            break;
        }
        let leaf = eligible[rng.gen_range(0..eligible.len())];
        t = t.grow_at(leaf).unwrap();
    }
    t
}

/// Random running statistics so eval-mode batch norms are not the identity.
pub fn randomize_buffers(model: &mut TreeModel<f64>, rng: &mut impl Rng) {
    for (name, buf) in model.named_buffers_mut() {
        let var = name.ends_with("running_var");
        buf.mapv_inplace(|_| {
            if var {
                rng.gen_range(0.5..2.0)
            } else {
                rng.gen_range(-0.5..0.5)
            }
        });
    }
}

pub fn random_batch(rng: &mut impl Rng, rows: usize, cols: usize, binary: bool) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        if binary {
            rng.gen_range(0.0..1.0)
        } else {
            rng.gen_range(-2.0..2.0)
        }
    })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + b.abs())
}

/// One random factorized-vs-enumerated comparison (depth 3, latent dims up to
/// 4, batch up to 8). Returns the largest relative difference over the terms.
pub fn elbo_oracle_case(seed: u64) -> Result<f64, String> {
    use std::collections::BTreeMap;
    use treevae::autodiff::Tape;
    use treevae::inference::{forward, ForwardOptions, Hooks};
    use treevae::model::LikelihoodKind;
    use treevae::nn::Mode;
    use treevae::objective::{loss, LossSettings};
    use treevae::oracle::elbo_by_enumeration;

    let mut r = rng(seed);
    let depth = 3;
    let latent: Vec<usize> = (0..=depth).map(|_| r.gen_range(1..=4)).collect();
    let kind = if r.gen_bool(0.5) {
        LikelihoodKind::Bernoulli
    } else {
        LikelihoodKind::Gaussian
    };
    let mut arch = tiny_arch(5, depth, latent, kind);
    arch.root_merge_prior = r.gen_bool(0.5);
    let grows = r.gen_range(0..5);
    let topo = random_topology(&mut r, depth, grows);
    let mut model: TreeModel<f64> = TreeModel::build(topo, arch, seed).map_err(|e| e.to_string())?;
    randomize_buffers(&mut model, &mut r);
    let batch = r.gen_range(1..=8);
    let samples = r.gen_range(1..=2);
    let mode = if r.gen_bool(0.7) || batch < 2 {
        Mode::Eval
    } else {
        Mode::Train
    };
    let x = random_batch(&mut r, batch, 5, kind == LikelihoodKind::Bernoulli);

    let mut tape = Tape::new();
    let opts = ForwardOptions::new(mode).samples(samples);
    let mut fwd = forward(&model, &mut tape, &x, &opts, &mut r).map_err(|e| e.to_string())?;
    let settings = LossSettings {
        likelihood: kind,
        beta: 1.0,
        contrastive: None,
    };
    let vars = loss(&model, &mut tape, &mut fwd, &settings).map_err(|e| e.to_string())?;
    let terms = vars.terms(&tape);
    let z: BTreeMap<_, _> = fwd.nodes.iter().map(|(id, n)| (*id, tape.value(n.z).clone())).collect();
    let oracle = elbo_by_enumeration(&model, &x, &z, samples, mode, &Hooks::default());

    let mut worst: f64 = 0.0;
    for (name, a, b) in [
        ("total", terms.negative_elbo(), oracle.total),
        ("rec", terms.rec, oracle.rec),
        ("kl_root", terms.kl_root, oracle.kl_root),
        ("kl_nodes", terms.kl_nodes, oracle.kl_nodes),
        ("kl_decisions", terms.kl_decisions, oracle.kl_decisions),
    ] {
        let d = rel(a, b);
        if d.is_nan() || d > 1e-9 {
            return Err(format!("seed {seed} {name}: {a} vs {b}"));
        }
        worst = worst.max(d);
    }
    let s: f64 = oracle.leaf_contributions.iter().map(|(_, c)| c).sum();
    if rel(s, oracle.total) > 1e-9 {
        return Err(format!(
            "seed {seed}: path contributions sum to {s}, total {}",
            oracle.total
        ));
    }
    Ok(worst)
}

/// One random metric instance (at most 64 points, 5 leaves, 5 classes)
/// checked against brute force. `None` when the instance has no same-class
/// pair and dendrogram purity is undefined.
pub fn metric_oracle_case(r: &mut impl Rng) -> Option<Result<(), String>> {
    use treevae::metrics::{clustering_accuracy, nmi, ClusteringResult};
    use treevae::oracle::{metric_bruteforce, nmi_bruteforce};

    let grows = r.gen_range(0..4);
    let topo = random_topology(r, 3, grows);
    let leaves = topo.leaves();
    let n = r.gen_range(2..=64);
    let classes = r.gen_range(1..=5);
    let assignment: Vec<NodeId> = (0..n).map(|_| leaves[r.gen_range(0..leaves.len())]).collect();
    let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..classes)).collect();
    let (dp, lp, acc) = metric_bruteforce(&topo, &assignment, &labels).ok()?;
    let check = || -> Result<(), String> {
        let res = ClusteringResult::new(topo, assignment.clone(), labels.clone()).map_err(|e| e.to_string())?;
        let got_dp = res.dendrogram_purity().map_err(|e| e.to_string())?;
        if got_dp != dp || res.leaf_purity() != lp || res.accuracy() != acc {
            return Err(format!(
                "DP {got_dp}/{dp} LP {}/{lp} ACC {}/{acc}",
                res.leaf_purity(),
                res.accuracy()
            ));
        }
        let a: Vec<usize> = assignment.iter().map(|n| n.0 as usize).collect();
        if clustering_accuracy(&a, &labels).map_err(|e| e.to_string())? != acc {
            return Err("matching accuracy differs".into());
        }
        let (m, b) = (
            nmi(&a, &labels).map_err(|e| e.to_string())?,
            nmi_bruteforce(&a, &labels),
        );
        if (m - b).abs() > 1e-12 {
            return Err(format!("NMI {m} vs {b}"));
        }
        Ok(())
    };
    Some(check())
}
