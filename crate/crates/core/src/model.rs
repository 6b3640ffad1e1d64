//! The bank of parameterized functions bound to a tree topology.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::ModelError;
use crate::nn::{Activation, GaussianMap, Mlp};
use crate::topology::{NodeId, TreeTopology};

/// Observation model of the leaf decoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LikelihoodKind {
    /// Binary cross entropy on logits.
    Bernoulli,
    /// Unit-variance Gaussian (squared error).
    Gaussian,
}

impl std::str::FromStr for LikelihoodKind {
    type Err = crate::error::ObjectiveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bernoulli" => Ok(Self::Bernoulli),
            "gaussian" => Ok(Self::Gaussian),
            other => Err(crate::error::ObjectiveError::InvalidLikelihood(other.into())),
        }
    }
}

/// Shapes of every function in the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Shape of one input sample, e.g. `[28, 28, 1]` or `[2000]`.
    pub input_shape: Vec<usize>,
    pub likelihood: LikelihoodKind,
    /// Widths of the dense encoder; the last one is the size of the deepest embedding.
    pub encoder_hidden: Vec<usize>,
    /// Width of the bottom-up embeddings above the deepest level.
    pub bottom_up_width: usize,
    /// Latent dimension per depth, root first.
    pub latent_dims: Vec<usize>,
    /// Maximum tree depth; the bottom-up ladder has one block per level above it.
    pub max_depth: usize,
    pub transform_width: usize,
    pub router_width: usize,
    pub decoder_hidden: Vec<usize>,
    /// Projection heads for the contrastive embedding loss, `(hidden, output)`.
    #[serde(default)]
    pub projection: Option<(usize, usize)>,
    /// Merge the root's bottom-up contribution with the standard normal prior.
    #[serde(default = "default_true")]
    pub root_merge_prior: bool,
}

fn default_true() -> bool {
    true
}

impl ArchConfig {
    /// Small-scale defaults: latent size 8 at every depth, hidden width 128.
    pub fn small(input_shape: Vec<usize>, likelihood: LikelihoodKind) -> Self {
        let input_dim: usize = input_shape.iter().product();
        let encoder_hidden = if input_dim >= 512 {
            vec![512, 256, 128]
        } else {
            vec![128, 128, 128]
        };
        let decoder_hidden = if input_dim >= 512 {
            vec![128, 256]
        } else {
            vec![128, 128]
        };
        Self {
            input_shape,
            likelihood,
            encoder_hidden,
            bottom_up_width: 128,
            latent_dims: vec![8; 7],
            max_depth: 6,
            transform_width: 128,
            router_width: 128,
            decoder_hidden,
            projection: None,
            root_merge_prior: true,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Width of the bottom-up embedding at `depth`.
    pub fn embedding_dim(&self, depth: usize) -> usize {
        if depth == self.max_depth {
            *self.encoder_hidden.last().expect("encoder has layers")
        } else {
            self.bottom_up_width
        }
    }

    pub fn latent_dim(&self, depth: usize) -> Result<usize, ModelError> {
        self.latent_dims.get(depth).copied().ok_or_else(|| {
            ModelError::ConfigMismatch(format!(
                "no latent dimension configured for depth {depth} ({} given)",
                self.latent_dims.len()
            ))
        })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::ConfigMismatch(m.into()));
        if self.input_dim() == 0 {
            return bad("input shape must be non-empty");
        }
        if self.encoder_hidden.is_empty() || self.encoder_hidden.contains(&0) {
            return bad("encoder needs at least one non-zero layer width");
        }
        if self.max_depth == 0 {
            return bad("max_depth must be at least 1");
        }
        if self.latent_dims.contains(&0)
            || self.bottom_up_width == 0
            || self.transform_width == 0
            || self.router_width == 0
            || self.decoder_hidden.contains(&0)
        {
            return bad("layer widths must be positive");
        }
        Ok(())
    }
}

/// Functions owned by one tree node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFunctions<F> {
    /// Bottom-up likelihood contribution `(mu_hat, sigma2_hat)` read from the depth embedding.
    pub head: GaussianMap<F>,
    /// Conditional prior given the parent sample (non-root nodes).
    pub prior: Option<GaussianMap<F>>,
    /// Top-down posterior transformation given the parent sample (non-root nodes).
    pub posterior: Option<GaussianMap<F>>,
    /// Generative router on the node's own sample (internal nodes).
    pub router_p: Option<Mlp<F>>,
    /// Inference router on the depth embedding (internal nodes).
    pub router_q: Option<Mlp<F>>,
    /// Observation decoder (leaves), producing logits or means.
    pub decoder: Option<Mlp<F>>,
}

impl<F: Real> NodeFunctions<F> {
    pub fn modules(&self) -> Vec<(String, &Mlp<F>)> {
        let mut out = Vec::new();
        for (n, m) in self.head.modules() {
            out.push((format!("head.{n}"), m));
        }
        if let Some(p) = &self.prior {
            for (n, m) in p.modules() {
                out.push((format!("prior.{n}"), m));
            }
        }
        if let Some(p) = &self.posterior {
            for (n, m) in p.modules() {
                out.push((format!("posterior.{n}"), m));
            }
        }
        if let Some(r) = &self.router_p {
            out.push(("router_p".into(), r));
        }
        if let Some(r) = &self.router_q {
            out.push(("router_q".into(), r));
        }
        if let Some(d) = &self.decoder {
            out.push(("decoder".into(), d));
        }
        out
    }

    pub fn modules_mut(&mut self) -> Vec<(String, &mut Mlp<F>)> {
        let mut out = Vec::new();
        for (n, m) in self.head.modules_mut() {
            out.push((format!("head.{n}"), m));
        }
        if let Some(p) = &mut self.prior {
            for (n, m) in p.modules_mut() {
                out.push((format!("prior.{n}"), m));
            }
        }
        if let Some(p) = &mut self.posterior {
            for (n, m) in p.modules_mut() {
                out.push((format!("posterior.{n}"), m));
            }
        }
        if let Some(r) = &mut self.router_p {
            out.push(("router_p".into(), r));
        }
        if let Some(r) = &mut self.router_q {
            out.push(("router_q".into(), r));
        }
        if let Some(d) = &mut self.decoder {
            out.push(("decoder".into(), d));
        }
        out
    }

    fn signature(&self) -> Vec<(String, usize, usize)> {
        self.modules()
            .into_iter()
            .map(|(n, m)| (n, m.input_dim(), m.output_dim()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeModel<F> {
    pub topology: TreeTopology,
    pub arch: ArchConfig,
    /// `x -> d_H`
    pub encoder: Mlp<F>,
    /// `ladder[h]: d_{h+1} -> d_h`, shared by all nodes at depth `h`.
    pub ladder: Vec<Mlp<F>>,
    /// Contrastive projection heads, one per bottom-up level `0..=H`.
    pub projections: Vec<Mlp<F>>,
    pub nodes: BTreeMap<NodeId, NodeFunctions<F>>,
}

fn router<F: Real>(input: usize, width: usize, rng: &mut ChaCha8Rng) -> Mlp<F> {
    Mlp::blocks_then_linear(&[input, width, width], 1, Some(Activation::Sigmoid), rng)
}

impl<F: Real> TreeModel<F> {
    pub fn build(topology: TreeTopology, arch: ArchConfig, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        if topology.height() > arch.max_depth || topology.max_depth() > arch.max_depth {
            return Err(ModelError::ConfigMismatch(format!(
                "topology allows depth {} but the architecture stops at {}",
                topology.max_depth(),
                arch.max_depth
            )));
        }
        arch.latent_dim(topology.height())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut enc_dims = vec![arch.input_dim()];
        enc_dims.extend(&arch.encoder_hidden);
        let encoder = Mlp::blocks(&enc_dims, &mut rng);
        let ladder = (0..arch.max_depth)
            .map(|h| Mlp::blocks(&[arch.embedding_dim(h + 1), arch.bottom_up_width], &mut rng))
            .collect();
        let projections = match arch.projection {
            Some((hidden, out)) => (0..=arch.max_depth)
                .map(|h| Mlp::blocks_then_linear(&[arch.embedding_dim(h), hidden], out, None, &mut rng))
                .collect(),
            None => Vec::new(),
        };
        let mut model = Self {
            topology,
            arch,
            encoder,
            ladder,
            projections,
            nodes: BTreeMap::new(),
        };
        for n in model.topology.breadth_first() {
            let f = model.fresh_functions(n, &mut rng)?;
            model.nodes.insert(n, f);
        }
        Ok(model)
    }

    fn fresh_functions(&self, node: NodeId, rng: &mut ChaCha8Rng) -> Result<NodeFunctions<F>, ModelError> {
        let t = &self.topology;
        let a = &self.arch;
        let depth = t.depth(node);
        let latent = a.latent_dim(depth)?;
        let head = GaussianMap::heads(a.embedding_dim(depth), latent, rng);
        let (prior, posterior) = match t.parent(node) {
            Some(_) => {
                let parent_latent = a.latent_dim(depth - 1)?;
                (
                    Some(GaussianMap::with_hidden(parent_latent, a.transform_width, latent, rng)),
                    Some(GaussianMap::with_hidden(parent_latent, a.transform_width, latent, rng)),
                )
            }
            None => (None, None),
        };
        let (router_p, router_q, decoder) = if t.is_leaf(node) {
            let mut dims = vec![latent];
            dims.extend(&a.decoder_hidden);
            (
                None,
                None,
                Some(Mlp::blocks_then_linear(&dims, a.input_dim(), None, rng)),
            )
        } else {
            (
                Some(router(latent, a.router_width, rng)),
                Some(router(a.embedding_dim(depth), a.router_width, rng)),
                None,
            )
        };
        Ok(NodeFunctions {
            head,
            prior,
            posterior,
            router_p,
            router_q,
            decoder,
        })
    }

    pub fn functions(&self, node: NodeId) -> &NodeFunctions<F> {
        &self.nodes[&node]
    }

    /// After `grow_at(parent_leaf)`: add functions for the new children and
    /// turn the parent's decoder into a router pair. Other functions are untouched.
    pub fn attach_subtree_functions(
        &mut self,
        grown: TreeTopology,
        parent_leaf: NodeId,
        seed: u64,
    ) -> Result<(), ModelError> {
        let Some((left, right)) = grown.children(parent_leaf) else {
            return Err(ModelError::NotGrown(parent_leaf));
        };
        let depth = grown.depth(left);
        if depth > self.arch.max_depth {
            return Err(ModelError::ConfigMismatch(format!(
                "depth {depth} exceeds the architecture's maximum {}",
                self.arch.max_depth
            )));
        }
        self.arch.latent_dim(depth)?;
        self.topology = grown;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = &self.arch;
        let parent_latent = a.latent_dim(depth - 1)?;
        let rp = router(parent_latent, a.router_width, &mut rng);
        let rq = router(a.embedding_dim(depth - 1), a.router_width, &mut rng);
        let parent = self.nodes.get_mut(&parent_leaf).expect("parent exists");
        parent.decoder = None;
        parent.router_p = Some(rp);
        parent.router_q = Some(rq);
        for child in [left, right] {
            let f = self.fresh_functions(child, &mut rng)?;
            self.nodes.insert(child, f);
        }
        Ok(())
    }

    /// Prune `node` (with its subtree). The sibling subtree is promoted;
    /// promoted functions whose shapes no longer fit their new position are
    /// re-initialized from `seed`.
    pub fn prune_node(&mut self, node: NodeId, seed: u64) -> Result<(), ModelError> {
        let parent = self
            .topology
            .parent(node)
            .ok_or(crate::error::TopologyError::CannotPruneRoot)?;
        let sibling = self.topology.sibling(node).expect("sibling exists");
        let pruned = self.topology.prune(node)?;
        for n in self.topology.subtree(node) {
            self.nodes.remove(&n);
        }
        self.nodes.remove(&parent);
        self.topology = pruned;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for n in self.topology.subtree(sibling) {
            let fresh = self.fresh_functions(n, &mut rng)?;
            let current = self.nodes.get_mut(&n).expect("promoted node has functions");
            if current.signature() != fresh.signature() {
                *current = fresh;
            }
        }
        Ok(())
    }

    /// All modules with fully qualified names, in a fixed order.
    pub fn modules(&self) -> Vec<(String, &Mlp<F>)> {
        let mut out = vec![("encoder".to_string(), &self.encoder)];
        for (h, m) in self.ladder.iter().enumerate() {
            out.push((format!("ladder.{h}"), m));
        }
        for (h, m) in self.projections.iter().enumerate() {
            out.push((format!("projection.{h}"), m));
        }
        for (id, f) in &self.nodes {
            for (n, m) in f.modules() {
                out.push((format!("node{id}.{n}"), m));
            }
        }
        out
    }

    pub fn modules_mut(&mut self) -> Vec<(String, &mut Mlp<F>)> {
        let mut out = vec![("encoder".to_string(), &mut self.encoder)];
        for (h, m) in self.ladder.iter_mut().enumerate() {
            out.push((format!("ladder.{h}"), m));
        }
        for (h, m) in self.projections.iter_mut().enumerate() {
            out.push((format!("projection.{h}"), m));
        }
        for (id, f) in self.nodes.iter_mut() {
            for (n, m) in f.modules_mut() {
                out.push((format!("node{id}.{n}"), m));
            }
        }
        out
    }

    /// Trainable tensors (`module.lK.{w,b,gamma,beta}`) regardless of their flags.
    pub fn named_params(&self) -> Vec<(String, &Array2<F>)> {
        let mut out = Vec::new();
        for (name, m) in self.modules() {
            for (p, v) in m.params() {
                out.push((format!("{name}.{p}"), v));
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Array2<F>)> {
        let mut out = Vec::new();
        for (name, m) in self.modules_mut() {
            for (p, v) in m.params_mut() {
                out.push((format!("{name}.{p}"), v));
            }
        }
        out
    }

    pub fn named_buffers(&self) -> Vec<(String, &Array2<F>)> {
        let mut out = Vec::new();
        for (name, m) in self.modules() {
            for (p, v) in m.buffers() {
                out.push((format!("{name}.{p}"), v));
            }
        }
        out
    }

    pub fn named_buffers_mut(&mut self) -> Vec<(String, &mut Array2<F>)> {
        let mut out = Vec::new();
        for (name, m) in self.modules_mut() {
            for (p, v) in m.buffers_mut() {
                out.push((format!("{name}.{p}"), v));
            }
        }
        out
    }

    /// Names of parameters whose module is trainable.
    pub fn trainable_param_names(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for (name, m) in self.modules() {
            if m.trainable {
                for (p, _) in m.params() {
                    out.insert(format!("{name}.{p}"));
                }
            }
        }
        out
    }

    pub fn module_mut(&mut self, name: &str) -> Option<&mut Mlp<F>> {
        self.modules_mut()
            .into_iter()
            .find_map(|(n, m)| (n == name).then_some(m))
    }

    /// Set the trainable flag of every function owned by `nodes`; the
    /// encoder, ladder and projection heads follow only with `include_shared`.
    pub fn set_trainable(&mut self, nodes: &BTreeSet<NodeId>, include_shared: bool, flag: bool) {
        if include_shared {
            self.encoder.trainable = flag;
            for m in self.ladder.iter_mut().chain(self.projections.iter_mut()) {
                m.trainable = flag;
            }
        }
        for (id, f) in self.nodes.iter_mut() {
            if nodes.contains(id) {
                for (_, m) in f.modules_mut() {
                    m.trainable = flag;
                }
            }
        }
    }

    pub fn set_all_trainable(&mut self, flag: bool) {
        let all: BTreeSet<_> = self.topology.nodes().collect();
        self.set_trainable(&all, true, flag);
    }

    pub fn decoder_count(&self) -> usize {
        self.nodes.values().filter(|f| f.decoder.is_some()).count()
    }

    /// Every node has exactly the functions its position requires.
    pub fn check_functions(&self) -> Result<(), ModelError> {
        let t = &self.topology;
        let node_set: BTreeSet<_> = t.nodes().collect();
        let fn_set: BTreeSet<_> = self.nodes.keys().copied().collect();
        if node_set != fn_set {
            return Err(ModelError::ConfigMismatch(format!(
                "function bank covers {fn_set:?} but the tree has {node_set:?}"
            )));
        }
        for n in t.nodes() {
            let f = &self.nodes[&n];
            let is_root = t.parent(n).is_none();
            let is_leaf = t.is_leaf(n);
            let ok = f.prior.is_some() != is_root
                && f.posterior.is_some() != is_root
                && f.router_p.is_some() != is_leaf
                && f.router_q.is_some() != is_leaf
                && f.decoder.is_some() == is_leaf;
            if !ok {
                return Err(ModelError::ConfigMismatch(format!(
                    "node {n} has the wrong function set"
                )));
            }
        }
        Ok(())
    }

    /// Copy into another precision.
    pub fn cast<G: Real>(&self) -> TreeModel<G> {
        fn cast_mlp<F: Real, G: Real>(m: &Mlp<F>) -> Mlp<G> {
            use crate::nn::Layer;
            let c = |a: &Array2<F>| a.mapv(|v| G::c(v.f64()));
            Mlp {
                trainable: m.trainable,
                layers: m
                    .layers
                    .iter()
                    .map(|l| match l {
                        Layer::Linear { w, b } => Layer::Linear {
                            w: c(w),
                            b: b.as_ref().map(c),
                        },
                        Layer::BatchNorm {
                            gamma,
                            beta,
                            running_mean,
                            running_var,
                        } => Layer::BatchNorm {
                            gamma: c(gamma),
                            beta: c(beta),
                            running_mean: c(running_mean),
                            running_var: c(running_var),
                        },
                        Layer::Act(a) => Layer::Act(*a),
                    })
                    .collect(),
            }
        }
        fn cast_map<F: Real, G: Real>(g: &GaussianMap<F>) -> GaussianMap<G> {
            GaussianMap {
                trunk: g.trunk.as_ref().map(cast_mlp),
                mean: cast_mlp(&g.mean),
                var: cast_mlp(&g.var),
            }
        }
        TreeModel {
            topology: self.topology.clone(),
            arch: self.arch.clone(),
            encoder: cast_mlp(&self.encoder),
            ladder: self.ladder.iter().map(cast_mlp).collect(),
            projections: self.projections.iter().map(cast_mlp).collect(),
            nodes: self
                .nodes
                .iter()
                .map(|(id, f)| {
                    (
                        *id,
                        NodeFunctions {
                            head: cast_map(&f.head),
                            prior: f.prior.as_ref().map(cast_map),
                            posterior: f.posterior.as_ref().map(cast_map),
                            router_p: f.router_p.as_ref().map(cast_mlp),
                            router_q: f.router_q.as_ref().map(cast_mlp),
                            decoder: f.decoder.as_ref().map(cast_mlp),
                        },
                    )
                })
                .collect(),
        }
    }
}
