//! Bottom-up pass and stochastic top-down pass of the variational posterior.
//!
//! [`forward`] records everything on a [`Tape`] so the same pass serves
//! training (gradients) and evaluation. Monte Carlo samples are stacked along
//! rows: with `M` samples and batch `B`, sample `m` of input `b` lives in row
//! `m * B + b`. Quantities that only depend on `x` (bottom-up embeddings,
//! inference routers, reach probabilities) are kept with `B` rows and tiled.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Real, Tape, Var};
use crate::error::InferenceError;
use crate::model::TreeModel;
use crate::nn::{ForwardCtx, Mode};
use crate::topology::NodeId;

/// Router probabilities are clamped into `[ROUTER_EPS, 1 - ROUTER_EPS]`.
pub const ROUTER_EPS: f64 = 1e-7;

/// Test hooks that replace learned quantities with fixed ones.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Hooks {
    /// Fixed inference-router probabilities (right branch), used unclamped.
    pub router_q: BTreeMap<NodeId, f64>,
    /// Fixed generative-router probabilities (right branch), used unclamped.
    pub router_p: BTreeMap<NodeId, f64>,
    /// Sample `z = mu` instead of drawing noise.
    pub zero_noise: bool,
    /// Use the prior transformation as the posterior of every non-root node
    /// and the generative routers as inference routers.
    pub posterior_is_prior: bool,
}

/// Which part of the tree a pass computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Full,
    /// Only the path to the given internal node and its two children.
    Subtree(NodeId),
}

#[derive(Debug, Clone)]
pub struct ForwardOptions {
    pub samples: usize,
    pub mode: Mode,
    pub scope: Scope,
    pub hooks: Hooks,
}

impl ForwardOptions {
    pub fn new(mode: Mode) -> Self {
        Self {
            samples: 1,
            mode,
            scope: Scope::Full,
            hooks: Hooks::default(),
        }
    }

    pub fn samples(mut self, m: usize) -> Self {
        self.samples = m;
        self
    }

    pub fn scope(mut self, scope: Scope) -> Self {
        self.scope = scope;
        self
    }

    pub fn hooks(mut self, hooks: Hooks) -> Self {
        self.hooks = hooks;
        self
    }
}

/// Tape handles of one node.
#[derive(Debug, Clone)]
pub struct NodeVars {
    /// `B` rows.
    pub hat_mu: Var,
    pub hat_var: Var,
    /// `M*B` rows.
    pub q_mu: Var,
    pub q_var: Var,
    /// Conditional prior; `None` at the root (standard normal).
    pub p_mu: Option<Var>,
    pub p_var: Option<Var>,
    pub z: Var,
    /// `B x 1` and tiled `M*B x 1`.
    pub reach: Var,
    pub reach_tiled: Var,
    /// Inference router (`B x 1`), internal nodes.
    pub router_q: Option<Var>,
    pub router_q_tiled: Option<Var>,
    /// Generative router on `z` (`M*B x 1`), internal nodes.
    pub router_p: Option<Var>,
    /// Decoder output (`M*B x D`), leaves.
    pub decoded: Option<Var>,
}

/// Result of [`forward`].
#[derive(Debug)]
pub struct TreeForward<F: Real> {
    pub batch: usize,
    pub samples: usize,
    pub scope: Scope,
    /// `B x D`
    pub x: Var,
    /// `M*B x D`
    pub x_tiled: Var,
    /// Bottom-up embeddings `d_0..=d_H`, `B` rows each.
    pub d: Vec<Var>,
    pub nodes: BTreeMap<NodeId, NodeVars>,
    /// The standard normal noise used for every node, `M*B` rows.
    pub eps: BTreeMap<NodeId, Array2<F>>,
    pub ctx: ForwardCtx<F>,
}

impl<F: Real> TreeForward<F> {
    pub fn rows(&self) -> usize {
        self.batch * self.samples
    }
}

/// Nodes computed under a scope, ancestors first.
pub fn scope_nodes<F: Real>(model: &TreeModel<F>, scope: Scope) -> Vec<NodeId> {
    let t = &model.topology;
    match scope {
        Scope::Full => t.breadth_first(),
        Scope::Subtree(parent) => {
            let mut nodes = t.path_to(parent).0;
            if let Some((l, r)) = t.children(parent) {
                nodes.push(l);
                nodes.push(r);
            }
            nodes
        }
    }
}

fn check_input<F: Real>(model: &TreeModel<F>, x: &Array2<F>) -> Result<(), InferenceError> {
    let dim = model.arch.input_dim();
    if x.ncols() != dim || x.nrows() == 0 {
        return Err(InferenceError::ShapeMismatch {
            expected: format!("[batch >= 1, {dim}]"),
            got: format!("{:?}", x.dim()),
        });
    }
    Ok(())
}

fn clamp_router<F: Real>(tape: &mut Tape<F>, r: Var) -> Var {
    tape.clamp(r, F::c(ROUTER_EPS), F::c(1.0 - ROUTER_EPS))
}

/// Precision-weighted merge of two diagonal Gaussians on the tape.
pub fn merge_vars<F: Real>(tape: &mut Tape<F>, mu_a: Var, var_a: Var, mu_b: Var, var_b: Var) -> (Var, Var) {
    let pa = tape.recip(var_a);
    let pb = tape.recip(var_b);
    let p = tape.add(pa, pb);
    let var = tape.recip(p);
    let wa = tape.mul(mu_a, pa);
    let wb = tape.mul(mu_b, pb);
    let s = tape.add(wa, wb);
    let mu = tape.mul(s, var);
    (mu, var)
}

/// Full inference pass on the tape.
pub fn forward<F: Real, R: Rng>(
    model: &TreeModel<F>,
    tape: &mut Tape<F>,
    x: &Array2<F>,
    opts: &ForwardOptions,
    rng: &mut R,
) -> Result<TreeForward<F>, InferenceError> {
    check_input(model, x)?;
    assert!(opts.samples >= 1, "at least one Monte Carlo sample");
    let t = &model.topology;
    let h_max = model.arch.max_depth;
    let b = x.nrows();
    let m = opts.samples;
    let rows = b * m;
    let mut ctx = ForwardCtx::new(opts.mode);
    let xv = tape.constant(x.clone());
    let x_tiled = tape.tile_rows(xv, m);

    // bottom-up: d_H = encoder(x), d_h = ladder_h(d_{h+1})
    let mut d = vec![xv; h_max + 1];
    d[h_max] = model.encoder.forward(tape, &mut ctx, "encoder", xv);
    for h in (0..h_max).rev() {
        d[h] = model.ladder[h].forward(tape, &mut ctx, &format!("ladder.{h}"), d[h + 1]);
    }

    let order = scope_nodes(model, opts.scope);
    let in_scope: BTreeSet<NodeId> = order.iter().copied().collect();
    let mut nodes: BTreeMap<NodeId, NodeVars> = BTreeMap::new();
    let mut eps_map = BTreeMap::new();
    let one_b = tape.constant(Array2::ones((b, 1)));

    for &n in &order {
        let f = model.functions(n);
        let name = format!("node{n}");
        let depth = t.depth(n);
        let (hat_mu, hat_var) = f.head.forward(tape, &mut ctx, &format!("{name}.head"), d[depth]);
        let hat_mu_t = tape.tile_rows(hat_mu, m);
        let hat_var_t = tape.tile_rows(hat_var, m);

        let (reach, q_mu, q_var, p_mu, p_var) = match t.parent(n) {
            None => {
                let (q_mu, q_var) = if model.arch.root_merge_prior {
                    let zero = tape.constant(Array2::zeros((1, 1)));
                    let one = tape.constant(Array2::ones((1, 1)));
                    merge_vars(tape, hat_mu_t, hat_var_t, zero, one)
                } else {
                    (hat_mu_t, hat_var_t)
                };
                (one_b, q_mu, q_var, None, None)
            }
            Some(pa) => {
                let parent = &nodes[&pa];
                let z_pa = parent.z;
                let (p_mu, p_var) =
                    f.prior
                        .as_ref()
                        .expect("non-root prior")
                        .forward(tape, &mut ctx, &format!("{name}.prior"), z_pa);
                let (q_mu, q_var) = if opts.hooks.posterior_is_prior {
                    (p_mu, p_var)
                } else {
                    let (t_mu, t_var) = f.posterior.as_ref().expect("non-root posterior").forward(
                        tape,
                        &mut ctx,
                        &format!("{name}.posterior"),
                        z_pa,
                    );
                    merge_vars(tape, hat_mu_t, hat_var_t, t_mu, t_var)
                };
                let r = parent.router_q.expect("parent is internal");
                let (l, _) = t.children(pa).expect("parent is internal");
                let branch = if n == l { tape.rsub_scalar(F::one(), r) } else { r };
                let reach = tape.mul(parent.reach, branch);
                (reach, q_mu, q_var, Some(p_mu), Some(p_var))
            }
        };

        let dim = model.arch.latent_dim(depth).expect("validated at build");
        let eps: Array2<F> = if opts.hooks.zero_noise {
            Array2::zeros((rows, dim))
        } else {
            Array2::from_shape_simple_fn((rows, dim), || F::c(rng.sample::<f64, _>(StandardNormal)))
        };
        let e = tape.constant(eps.clone());
        let sd = tape.sqrt(q_var);
        let noise = tape.mul(sd, e);
        let z = tape.add(q_mu, noise);
        eps_map.insert(n, eps);

        let internal = t
            .children(n)
            .is_some_and(|(l, r)| in_scope.contains(&l) || in_scope.contains(&r));
        let (router_q, router_q_tiled, router_p) = if internal {
            let rp = match opts.hooks.router_p.get(&n) {
                Some(&v) => tape.constant(Array2::from_elem((rows, 1), F::c(v))),
                None => {
                    let raw = f.router_p.as_ref().expect("internal router").forward(
                        tape,
                        &mut ctx,
                        &format!("{name}.router_p"),
                        z,
                    );
                    clamp_router(tape, raw)
                }
            };
            let rq = match opts.hooks.router_q.get(&n) {
                Some(&v) => tape.constant(Array2::from_elem((b, 1), F::c(v))),
                None if opts.hooks.posterior_is_prior => {
                    // generative router of the first sample stands in for q
                    tape.slice_rows(rp, 0, b)
                }
                None => {
                    let raw = f.router_q.as_ref().expect("internal router").forward(
                        tape,
                        &mut ctx,
                        &format!("{name}.router_q"),
                        d[depth],
                    );
                    clamp_router(tape, raw)
                }
            };
            let rq_t = tape.tile_rows(rq, m);
            (Some(rq), Some(rq_t), Some(rp))
        } else {
            (None, None, None)
        };
        let decoded = if t.is_leaf(n) {
            Some(
                f.decoder
                    .as_ref()
                    .expect("leaf decoder")
                    .forward(tape, &mut ctx, &format!("{name}.decoder"), z),
            )
        } else {
            None
        };
        let reach_tiled = tape.tile_rows(reach, m);
        nodes.insert(
            n,
            NodeVars {
                hat_mu,
                hat_var,
                q_mu,
                q_var,
                p_mu,
                p_var,
                z,
                reach,
                reach_tiled,
                router_q,
                router_q_tiled,
                router_p,
                decoded,
            },
        );
    }
    Ok(TreeForward {
        batch: b,
        samples: m,
        scope: opts.scope,
        x: xv,
        x_tiled,
        d,
        nodes,
        eps: eps_map,
        ctx,
    })
}

/// Plain-array view of one node of a pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState<F> {
    pub hat_mu: Array2<F>,
    pub hat_sigma2: Array2<F>,
    pub q_mu: Array2<F>,
    pub q_sigma2: Array2<F>,
    pub p_mu: Option<Array2<F>>,
    pub p_sigma2: Option<Array2<F>>,
    pub z: Array2<F>,
    /// Length `B`.
    pub reach: Vec<F>,
    pub router_q: Option<Vec<F>>,
    /// Length `M*B`.
    pub router_p: Option<Vec<F>>,
    pub decoded: Option<Array2<F>>,
}

/// Per-batch inference results.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorState<F> {
    pub batch: usize,
    pub samples: usize,
    pub d: Vec<Array2<F>>,
    pub nodes: BTreeMap<NodeId, NodeState<F>>,
    /// Leaves in ascending id order (columns of [`PosteriorState::path_distribution`]).
    pub leaves: Vec<NodeId>,
}

fn col<F: Real>(a: &Array2<F>) -> Vec<F> {
    a.iter().copied().collect()
}

impl<F: Real> TreeForward<F> {
    pub fn snapshot(&self, tape: &Tape<F>) -> PosteriorState<F> {
        let v = |x: Var| tape.value(x).clone();
        let nodes = self
            .nodes
            .iter()
            .map(|(id, n)| {
                (
                    *id,
                    NodeState {
                        hat_mu: v(n.hat_mu),
                        hat_sigma2: v(n.hat_var),
                        q_mu: v(n.q_mu),
                        q_sigma2: v(n.q_var),
                        p_mu: n.p_mu.map(v),
                        p_sigma2: n.p_var.map(v),
                        z: v(n.z),
                        reach: col(tape.value(n.reach)),
                        router_q: n.router_q.map(|r| col(tape.value(r))),
                        router_p: n.router_p.map(|r| col(tape.value(r))),
                        decoded: n.decoded.map(v),
                    },
                )
            })
            .collect();
        let leaves = self
            .nodes
            .iter()
            .filter(|(_, n)| n.decoded.is_some())
            .map(|(id, _)| *id)
            .collect();
        PosteriorState {
            batch: self.batch,
            samples: self.samples,
            d: self.d.iter().map(|&x| v(x)).collect(),
            nodes,
            leaves,
        }
    }
}

impl<F: Real> PosteriorState<F> {
    /// `B x |leaves|` leaf reach probabilities, leaves by ascending id.
    pub fn path_distribution(&self) -> Array2<F> {
        let mut out = Array2::zeros((self.batch, self.leaves.len()));
        for (j, l) in self.leaves.iter().enumerate() {
            for (i, &p) in self.nodes[l].reach.iter().enumerate() {
                out[[i, j]] = p;
            }
        }
        out
    }

    /// Hard assignment: most probable leaf per sample, ties to the smaller id.
    pub fn hard_assignment(&self) -> Vec<NodeId> {
        let dist = self.path_distribution();
        dist.rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (j, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = j;
                    }
                }
                self.leaves[best]
            })
            .collect()
    }
}

/// Run [`forward`] and return the plain state.
pub fn infer<F: Real, R: Rng>(
    model: &TreeModel<F>,
    x: &Array2<F>,
    opts: &ForwardOptions,
    rng: &mut R,
) -> Result<PosteriorState<F>, InferenceError> {
    let mut tape = Tape::new();
    let fwd = forward(model, &mut tape, x, opts, rng)?;
    Ok(fwd.snapshot(&tape))
}

/// Precision-weighted merge of two diagonal Gaussians.
pub fn precision_merge<F: Real>(
    hat_mu: &Array2<F>,
    hat_sigma2: &Array2<F>,
    p_mu: &Array2<F>,
    p_sigma2: &Array2<F>,
) -> Result<(Array2<F>, Array2<F>), InferenceError> {
    let shape = hat_mu.dim();
    for a in [hat_sigma2, p_mu, p_sigma2] {
        if a.dim() != shape {
            return Err(InferenceError::ShapeMismatch {
                expected: format!("{shape:?}"),
                got: format!("{:?}", a.dim()),
            });
        }
    }
    for var in [hat_sigma2, p_sigma2] {
        if let Some((index, &value)) = var
            .iter()
            .enumerate()
            .find(|(_, v)| v.partial_cmp(&&F::zero()) != Some(std::cmp::Ordering::Greater))
        {
            return Err(InferenceError::NonPositiveVariance {
                index,
                value: value.f64(),
            });
        }
    }
    let ph = hat_sigma2.mapv(|v| v.recip());
    let pp = p_sigma2.mapv(|v| v.recip());
    let var = (&ph + &pp).mapv(|v| v.recip());
    let mu = (hat_mu * &ph + p_mu * &pp) * &var;
    Ok((mu, var))
}

/// Bottom-up pass on plain arrays: embeddings `d_0..=d_H` and per-node
/// likelihood contributions.
#[allow(clippy::type_complexity)]
pub fn bottom_up<F: Real>(
    model: &TreeModel<F>,
    x: &Array2<F>,
    mode: Mode,
) -> Result<(Vec<Array2<F>>, BTreeMap<NodeId, (Array2<F>, Array2<F>)>), InferenceError> {
    check_input(model, x)?;
    let h_max = model.arch.max_depth;
    let mut d = vec![Array2::zeros((0, 0)); h_max + 1];
    d[h_max] = model.encoder.apply(x, mode);
    for h in (0..h_max).rev() {
        d[h] = model.ladder[h].apply(&d[h + 1], mode);
    }
    let heads = model
        .topology
        .nodes()
        .map(|n| (n, model.functions(n).head.apply(&d[model.topology.depth(n)], mode)))
        .collect();
    Ok((d, heads))
}

/// Reach probability of every node from the inference routers alone, on
/// plain arrays. These do not depend on the latent samples.
pub fn reach_probabilities<F: Real>(
    model: &TreeModel<F>,
    x: &Array2<F>,
    mode: Mode,
) -> Result<BTreeMap<NodeId, Vec<F>>, InferenceError> {
    check_input(model, x)?;
    let t = &model.topology;
    let h_max = model.arch.max_depth;
    let mut d = vec![Array2::zeros((0, 0)); h_max + 1];
    d[h_max] = model.encoder.apply(x, mode);
    for h in (0..h_max).rev() {
        d[h] = model.ladder[h].apply(&d[h + 1], mode);
    }
    let lo = F::c(ROUTER_EPS);
    let hi = F::c(1.0 - ROUTER_EPS);
    let mut out = BTreeMap::from([(t.root(), vec![F::one(); x.nrows()])]);
    for n in t.breadth_first() {
        let Some((l, r)) = t.children(n) else { continue };
        let router = model.functions(n).router_q.as_ref().expect("internal router");
        let rq = router.apply(&d[t.depth(n)], mode);
        let reach = &out[&n];
        let (left, right): (Vec<F>, Vec<F>) = reach
            .iter()
            .zip(rq.iter())
            .map(|(&p, &q)| {
                let q = q.max(lo).min(hi);
                (p * (F::one() - q), p * q)
            })
            .unzip();
        out.insert(l, left);
        out.insert(r, right);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchConfig, LikelihoodKind};
    use crate::topology::TreeTopology;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch() -> ArchConfig {
        let mut a = ArchConfig::small(vec![6], LikelihoodKind::Bernoulli);
        a.encoder_hidden = vec![8, 8];
        a.bottom_up_width = 8;
        a.transform_width = 8;
        a.router_width = 8;
        a.decoder_hidden = vec![8];
        a.latent_dims = vec![3; 7];
        a
    }

    fn full_depth2() -> TreeTopology {
        TreeTopology::new_root_tree(6)
            .grow_at(NodeId(1))
            .unwrap()
            .grow_at(NodeId(2))
            .unwrap()
    }

    fn model(t: TreeTopology) -> TreeModel<f64> {
        TreeModel::build(t, arch(), 5).unwrap()
    }

    fn batch(n: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Array2::from_shape_simple_fn((n, 6), || rng.gen_range(0.0..1.0))
    }

    #[test]
    fn merge_examples() {
        let (mu, var): (Array2<f64>, _) =
            precision_merge(&array![[0.0]], &array![[1.0]], &array![[2.0]], &array![[1.0]]).unwrap();
        assert_eq!((mu[[0, 0]], var[[0, 0]]), (1.0, 0.5));
        let (mu, var): (Array2<f64>, _) =
            precision_merge(&array![[1.0]], &array![[0.5]], &array![[3.0]], &array![[2.0]]).unwrap();
        assert!((var[[0, 0]] - 0.4).abs() < 1e-15 && (mu[[0, 0]] - 1.4).abs() < 1e-15);
        let (mu, var): (Array2<f64>, _) =
            precision_merge(&array![[5.0]], &array![[1e12]], &array![[3.0]], &array![[2.0]]).unwrap();
        assert!(((mu[[0, 0]] - 3.0) / 3.0).abs() < 1e-6 && ((var[[0, 0]] - 2.0) / 2.0).abs() < 1e-6);
        assert!(matches!(
            precision_merge(&array![[0.0]], &array![[0.0]], &array![[0.0]], &array![[1.0]]),
            Err(InferenceError::NonPositiveVariance { index: 0, .. })
        ));
    }

    #[test]
    fn root_merge_with_unit_prior() {
        let (mu, var): (Array2<f64>, _) =
            precision_merge(&array![[2.0]], &array![[1.0]], &array![[0.0]], &array![[1.0]]).unwrap();
        assert_eq!((mu[[0, 0]], var[[0, 0]]), (1.0, 0.5));
    }

    #[test]
    fn reach_with_fixed_routers() {
        let m = model(TreeTopology::new_root_tree(6));
        let mut hooks = Hooks::default();
        hooks.router_q.insert(NodeId(0), 0.3);
        let opts = ForwardOptions::new(Mode::Eval).hooks(hooks);
        let s = infer(&m, &batch(4), &opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for i in 0..4 {
            assert_eq!(s.nodes[&NodeId(0)].reach[i], 1.0);
            assert!((s.nodes[&NodeId(1)].reach[i] - 0.7).abs() < 1e-15);
            assert!((s.nodes[&NodeId(2)].reach[i] - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn product_rule_on_depth_two_tree() {
        let m = model(full_depth2());
        let mut hooks = Hooks::default();
        for (n, p) in [(0, 0.2), (1, 0.6), (2, 0.9)] {
            hooks.router_q.insert(NodeId(n), p);
        }
        let opts = ForwardOptions::new(Mode::Eval).hooks(hooks);
        let s = infer(&m, &batch(2), &opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let dist = s.path_distribution();
        for (got, want) in dist.row(0).iter().zip([0.32, 0.48, 0.02, 0.18]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn same_depth_nodes_share_the_embedding_and_rows_are_independent_in_eval() {
        let m = model(full_depth2());
        let x = batch(32);
        let opts = ForwardOptions::new(Mode::Eval).hooks(Hooks {
            zero_noise: true,
            ..Hooks::default()
        });
        let all = infer(&m, &x, &opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let one = infer(
            &m,
            &x.slice(ndarray::s![7..8, ..]).to_owned(),
            &opts,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        for (id, n) in &one.nodes {
            assert_eq!(n.q_mu.row(0), all.nodes[id].q_mu.row(7));
            assert_eq!(n.reach[0], all.nodes[id].reach[7]);
        }
        let (d, heads) = bottom_up(&m, &x, Mode::Eval).unwrap();
        assert!(d[1].iter().zip(all.d[1].iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(heads[&NodeId(1)]
            .0
            .iter()
            .zip(all.nodes[&NodeId(1)].hat_mu.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(heads.values().all(|(_, v)| v.iter().all(|&s| s > 0.0)));
    }

    #[test]
    fn zero_noise_samples_the_mean() {
        let m = model(full_depth2());
        let opts = ForwardOptions::new(Mode::Train).samples(3).hooks(Hooks {
            zero_noise: true,
            ..Hooks::default()
        });
        let s = infer(&m, &batch(4), &opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for n in s.nodes.values() {
            assert_eq!(n.z, n.q_mu);
            assert_eq!(n.z.nrows(), 12);
        }
    }

    #[test]
    fn subtree_scope_computes_path_and_children() {
        let m = model(full_depth2());
        let opts = ForwardOptions::new(Mode::Eval).scope(Scope::Subtree(NodeId(2)));
        let s = infer(&m, &batch(4), &opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let ids: Vec<u32> = s.nodes.keys().map(|n| n.0).collect();
        assert_eq!(ids, vec![0, 2, 5, 6]);
        assert_eq!(s.leaves, vec![NodeId(5), NodeId(6)]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let m = model(full_depth2());
        let x = Array2::<f64>::zeros((2, 5));
        assert!(matches!(
            infer(
                &m,
                &x,
                &ForwardOptions::new(Mode::Eval),
                &mut ChaCha8Rng::seed_from_u64(0)
            ),
            Err(InferenceError::ShapeMismatch { .. })
        ));
    }
}
