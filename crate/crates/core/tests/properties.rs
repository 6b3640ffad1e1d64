mod common;

use std::collections::BTreeMap;

use common::*;
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use treevae::augment::{augment_pair, AugmentationPolicy};
use treevae::checkpoint::{load_checkpoint, save_checkpoint};
use treevae::inference::{infer, precision_merge, ForwardOptions, Hooks};
use treevae::metrics::{clustering_accuracy, nmi};
use treevae::model::{LikelihoodKind, TreeModel};
use treevae::nn::Mode;
use treevae::objective::{anneal_beta, nt_xent};
use treevae::trainer::Adam;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reach_probabilities_split_exactly(seed in any::<u64>(), grows in 0usize..8, probs in prop::collection::vec(0.0f64..=1.0, 8)) {
        let mut r = rng(seed);
        let topo = random_topology(&mut r, 4, grows);
        let arch = tiny_arch(3, 4, vec![1; 5], LikelihoodKind::Gaussian);
        let model: TreeModel<f64> = TreeModel::build(topo.clone(), arch, seed).unwrap();
        let hooks = Hooks {
            router_q: topo.internal_nodes().into_iter().zip(probs.iter().cycle()).map(|(n, &p)| (n, p)).collect(),
            ..Hooks::default()
        };
        let x = random_batch(&mut r, 3, 3, false);
        let s = infer(&model, &x, &ForwardOptions::new(Mode::Eval).hooks(hooks), &mut r).unwrap();
        for n in topo.internal_nodes() {
            let (a, b) = topo.children(n).unwrap();
            for i in 0..3 {
                let parent = s.nodes[&n].reach[i];
                prop_assert!((s.nodes[&a].reach[i] + s.nodes[&b].reach[i] - parent).abs() <= 1e-12);
            }
        }
        for row in s.path_distribution().rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn merged_precision_exceeds_both_inputs(
        a in prop::collection::vec((-5.0f64..5.0, 1e-3f64..10.0, -5.0f64..5.0, 1e-3f64..10.0), 1..6)
    ) {
        let col = |f: fn(&(f64, f64, f64, f64)) -> f64| Array2::from_shape_vec((1, a.len()), a.iter().map(f).collect()).unwrap();
        let (hm, hv, pm, pv) = (col(|t| t.0), col(|t| t.1), col(|t| t.2), col(|t| t.3));
        let (qm, qv) = precision_merge(&hm, &hv, &pm, &pv).unwrap();
        let (sm, sv) = precision_merge(&pm, &pv, &hm, &hv).unwrap();
        for j in 0..a.len() {
            prop_assert!(qv[[0, j]] <= hv[[0, j]].min(pv[[0, j]]) * (1.0 + 1e-12));
            let (lo, hi) = (hm[[0, j]].min(pm[[0, j]]), hm[[0, j]].max(pm[[0, j]]));
            prop_assert!(qm[[0, j]] >= lo - 1e-12 && qm[[0, j]] <= hi + 1e-12);
            prop_assert!((qm[[0, j]] - sm[[0, j]]).abs() <= 1e-12 && (qv[[0, j]] - sv[[0, j]]).abs() <= 1e-15);
        }
    }

    #[test]
    fn beta_is_a_clamped_ramp(epoch in 0usize..5000, rate in 0.0f64..0.1) {
        let b = anneal_beta(epoch, rate, 0.0);
        prop_assert!((0.0..=1.0).contains(&b));
        prop_assert!(anneal_beta(epoch + 1, rate, 0.0) >= b);
        prop_assert_eq!(anneal_beta(0, rate, 0.0), 0.0);
    }

    #[test]
    fn nt_xent_ignores_row_scale(seed in any::<u64>(), n in 2usize..6, scale in prop::collection::vec(0.1f64..10.0, 12)) {
        let v = random_batch(&mut rng(seed), 2 * n, 4, false);
        let scaled = Array2::from_shape_fn(v.dim(), |(i, j)| v[[i, j]] * scale[i]);
        let a = nt_xent(&v, 0.5).unwrap();
        let b = nt_xent(&scaled, 0.5).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        let same = Array2::from_elem((2 * n, 4), 0.3);
        prop_assert!((nt_xent(&same, 0.5).unwrap() - ((2 * n - 1) as f64).ln()).abs() <= 1e-9);
    }

    #[test]
    fn accuracy_and_nmi_ignore_cluster_names(
        pairs in prop::collection::vec((0usize..5, 0usize..4), 1..60),
        shift in 1usize..50,
    ) {
        let (assign, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let renamed: Vec<usize> = assign.iter().map(|c| (c * 7 + shift) % 101).collect();
        let acc = clustering_accuracy(&assign, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
        prop_assert_eq!(acc, clustering_accuracy(&renamed, &labels).unwrap());
        let m = nmi(&assign, &labels).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&m));
        prop_assert!((m - nmi(&renamed, &labels).unwrap()).abs() <= 1e-12);
        prop_assert!((m - nmi(&labels, &assign).unwrap()).abs() <= 1e-12);
        prop_assert_eq!(clustering_accuracy(&labels, &labels).unwrap(), 1.0);
    }

    #[test]
    fn augmented_views_stay_images(seed in any::<u64>(), h in 4usize..12, w in 4usize..12, c in prop::sample::select(vec![1usize, 3])) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f32> = (0..h * w * c).map(|i| ((i * 37 + seed as usize) % 101) as f32 / 100.0).collect();
        for policy in [AugmentationPolicy::contrastive(), AugmentationPolicy::handwriting()] {
            let (a, b) = augment_pair(&x, &[h, w, c], &policy, &mut r).unwrap();
            prop_assert_eq!(a.len(), x.len());
            prop_assert_eq!(b.len(), x.len());
            prop_assert!(a.iter().chain(&b).all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn adam_moves_against_the_gradient(g in prop::collection::vec(-10.0f64..10.0, 1..8)) {
        let mut opt = Adam::<f64>::new(1e-3);
        let mut p = Array2::zeros((1, g.len()));
        let grad = Array2::from_shape_vec((1, g.len()), g.clone()).unwrap();
        opt.step("p", &mut p, &grad);
        for (v, gj) in p.iter().zip(&g) {
            prop_assert!(v * gj <= 0.0);
            prop_assert!(v.abs() <= 1e-3 + 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoints_round_trip_any_tree(seed in any::<u64>(), grows in 0usize..6) {
        let mut r = rng(seed);
        let topo = random_topology(&mut r, 3, grows);
        let arch = tiny_arch(4, 3, vec![2; 4], LikelihoodKind::Bernoulli);
        let mut m: TreeModel<f32> = TreeModel::build(topo, arch, seed).unwrap();
        m.set_trainable(&m.topology.leaves().into_iter().collect(), false, false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&m, &path).unwrap();
        let back: TreeModel<f32> = load_checkpoint(&path).unwrap();
        prop_assert_eq!(&back.topology, &m.topology);
        let a: BTreeMap<_, _> = m.named_params().into_iter().map(|(n, v)| (n, v.clone())).collect();
        let b: BTreeMap<_, _> = back.named_params().into_iter().map(|(n, v)| (n, v.clone())).collect();
        prop_assert_eq!(a, b);
        prop_assert_eq!(back.trainable_param_names(), m.trainable_param_names());
    }
}
