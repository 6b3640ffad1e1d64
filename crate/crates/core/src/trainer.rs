//! The growing loop: train the root tree, then repeatedly attach and train a
//! subtree under the most populated leaf, prune, and fine-tune.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::augment::AugmentationPolicy;
use crate::autodiff::{Real, Tape};
use crate::config::RunConfig;
use crate::data::{Dataset, Split};
use crate::error::{DataError, TrainError};
use crate::inference::{forward, reach_probabilities, ForwardOptions, Scope};
use crate::model::TreeModel;
use crate::nn::Mode;
use crate::objective::{anneal_beta, loss, ContrastiveSettings, ElboTerms, LossSettings};
use crate::topology::{NodeId, TopologyJson, TreeTopology};

/// Rows per chunk when scoring the whole training set.
const SCORE_CHUNK: usize = 1024;

/// Adam with per-tensor state keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: HashMap<String, (Array2<F>, Array2<F>, i32)>,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: HashMap::new(),
        }
    }

    pub fn step(&mut self, name: &str, param: &mut Array2<F>, grad: &Array2<F>) {
        let (m, v, t) = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| (Array2::zeros(param.dim()), Array2::zeros(param.dim()), 0));
        *t += 1;
        let (b1, b2) = (F::c(self.beta1), F::c(self.beta2));
        let c1 = F::c(1.0 - self.beta1.powi(*t));
        let c2 = F::c(1.0 - self.beta2.powi(*t));
        let (lr, eps) = (F::c(self.lr), F::c(self.eps));
        ndarray::Zip::from(param)
            .and(m)
            .and(v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
    }
}

/// What a phase trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseScope {
    Full,
    /// The two children of the given node and the node's routers.
    Subtree(NodeId),
}

/// Settings shared by all phases of a run.
#[derive(Debug, Clone)]
pub struct PhaseSettings {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub samples: usize,
    pub contrastive: Option<ContrastiveSettings>,
    /// Augmentation for contrastive views.
    pub views: AugmentationPolicy,
    /// Augmentation of plain training batches.
    pub augmentation: Option<AugmentationPolicy>,
}

impl PhaseSettings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            batch_size: cfg.growth.batch_size,
            learning_rate: cfg.growth.learning_rate,
            samples: cfg.growth.samples,
            contrastive: cfg.contrastive.settings(),
            views: AugmentationPolicy::by_name(&cfg.contrastive.augmentation).unwrap_or_default(),
            augmentation: cfg
                .dataset
                .augmentation
                .as_deref()
                .and_then(AugmentationPolicy::by_name),
        }
    }
}

/// One row of the training log: epoch means of the loss terms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub phase: usize,
    pub kind: String,
    pub epoch: usize,
    pub leaves: usize,
    pub samples: usize,
    pub beta: f64,
    pub rec: f64,
    pub kl_root: f64,
    pub kl_nodes: f64,
    pub kl_decisions: f64,
    pub contrastive_embed: f64,
    pub contrastive_router: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Snapshot {
    pub event: String,
    pub topology: TopologyJson,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub snapshots: Vec<Snapshot>,
    /// Expected fraction of training samples per leaf at the end.
    pub occupancy: BTreeMap<NodeId, f64>,
}

impl TrainReport {
    fn snapshot(&mut self, event: impl Into<String>, t: &TreeTopology) {
        self.snapshots.push(Snapshot {
            event: event.into(),
            topology: t.to_json(),
        });
    }

    pub fn loss_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.epochs {
            w.serialize(r).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8")
    }
}

/// Build a batch in precision `F`. Contrastive batches hold the first views
/// in rows `0..n` and the second views in rows `n..2n`.
fn make_batch<F: Real, R: Rng>(
    data: &Split,
    shape: &[usize],
    idx: &[usize],
    settings: &PhaseSettings,
    rng: &mut R,
) -> Result<Array2<F>, DataError> {
    let width = data.x.ncols();
    let to_f = |v: &[f32]| v.iter().map(|&a| F::c(a as f64)).collect::<Vec<F>>();
    if settings.contrastive.is_some() {
        let mut first = Vec::with_capacity(idx.len() * width);
        let mut second = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            let row = data.x.row(i);
            let (a, b) = crate::augment::augment_pair(
                row.as_slice().expect("rows are contiguous"),
                shape,
                &settings.views,
                rng,
            )?;
            first.extend(to_f(&a));
            second.extend(to_f(&b));
        }
        first.extend(second);
        return Ok(Array2::from_shape_vec((2 * idx.len(), width), first).expect("batch shape"));
    }
    match &settings.augmentation {
        None => Ok(data.rows(idx)),
        Some(policy) => {
            let mut rows = Vec::with_capacity(idx.len() * width);
            for &i in idx {
                let row = data.x.row(i);
                rows.extend(to_f(&policy.apply(
                    row.as_slice().expect("rows are contiguous"),
                    shape,
                    rng,
                )?));
            }
            Ok(Array2::from_shape_vec((idx.len(), width), rows).expect("batch shape"))
        }
    }
}

fn set_phase_trainable<F: Real>(model: &mut TreeModel<F>, scope: PhaseScope) {
    match scope {
        PhaseScope::Full => model.set_all_trainable(true),
        PhaseScope::Subtree(parent) => {
            model.set_all_trainable(false);
            let (l, r) = model.topology.children(parent).expect("subtree parent is internal");
            model.set_trainable(&BTreeSet::from([l, r]), false, true);
            let prefix = format!("node{parent}.router_");
            for (name, m) in model.modules_mut() {
                if name.starts_with(&prefix) {
                    m.trainable = true;
                }
            }
        }
    }
}

fn first_non_finite(t: &ElboTerms) -> Option<(&'static str, f64)> {
    [
        ("rec", t.rec),
        ("kl_root", t.kl_root),
        ("kl_nodes", t.kl_nodes),
        ("kl_decisions", t.kl_decisions),
        ("contrastive_embed", t.contrastive_embed),
        ("contrastive_router", t.contrastive_router),
        ("total", t.total),
    ]
    .into_iter()
    .find(|(_, v)| !v.is_finite())
}

/// One gradient step on a batch; returns the loss terms.
pub fn train_step<F: Real, R: Rng>(
    model: &mut TreeModel<F>,
    optimizer: &mut Adam<F>,
    x: &Array2<F>,
    scope: Scope,
    samples: usize,
    settings: &LossSettings,
    rng: &mut R,
) -> Result<ElboTerms, TrainError> {
    let mut tape = Tape::new();
    let opts = ForwardOptions::new(Mode::Train).samples(samples).scope(scope);
    let mut fwd = forward(model, &mut tape, x, &opts, rng)?;
    let vars = loss(model, &mut tape, &mut fwd, settings)?;
    let terms = vars.terms(&tape);
    if first_non_finite(&terms).is_some() {
        return Ok(terms);
    }
    let grads = tape.backward(vars.total);
    let mut by_name: HashMap<&str, Array2<F>> = HashMap::new();
    for (name, var) in &fwd.ctx.bindings {
        if let Some(g) = grads.get(*var) {
            by_name
                .entry(name.as_str())
                .and_modify(|acc| *acc += g)
                .or_insert_with(|| g.clone());
        }
    }
    for (name, p) in model.named_params_mut() {
        if let Some(g) = by_name.get(name.as_str()) {
            optimizer.step(&name, p, g);
        }
    }
    for (prefix, stats) in &fwd.ctx.bn_stats {
        let (module, layer) = prefix.rsplit_once(".l").expect("batch norm prefix");
        let index: usize = layer.parse().expect("layer index");
        model
            .module_mut(module)
            .expect("batch norm module exists")
            .update_running_stats(index, stats);
    }
    Ok(terms)
}

/// Phase parameters that vary between calls.
#[derive(Debug, Clone, Copy)]
pub struct Phase<'a> {
    pub id: usize,
    pub kind: &'a str,
    pub epochs: usize,
    pub scope: PhaseScope,
    pub anneal_rate: f64,
}

/// Mini-batch training on the samples `idx` of `data`.
#[allow(clippy::too_many_arguments)]
pub fn train_phase<F: Real, R: Rng>(
    model: &mut TreeModel<F>,
    data: &Split,
    shape: &[usize],
    idx: &[usize],
    phase: Phase<'_>,
    settings: &PhaseSettings,
    rng: &mut R,
    report: &mut TrainReport,
) -> Result<(), TrainError> {
    set_phase_trainable(model, phase.scope);
    let scope = match phase.scope {
        PhaseScope::Full => Scope::Full,
        PhaseScope::Subtree(p) => Scope::Subtree(p),
    };
    let mut optimizer = Adam::new(settings.learning_rate);
    let mut order = idx.to_vec();
    for epoch in 0..phase.epochs {
        let beta = anneal_beta(epoch, phase.anneal_rate, 0.0);
        let loss_settings = LossSettings {
            likelihood: model.arch.likelihood,
            beta,
            contrastive: settings.contrastive,
        };
        order.shuffle(rng);
        let mut sums = ElboTerms::default();
        let mut seen = 0usize;
        for chunk in order.chunks(settings.batch_size) {
            // batch norm needs at least two rows
            if chunk.len() < 2 {
                continue;
            }
            let x = make_batch::<F, R>(data, shape, chunk, settings, rng)?;
            let t = train_step(model, &mut optimizer, &x, scope, settings.samples, &loss_settings, rng)?;
            if let Some((term, value)) = first_non_finite(&t) {
                return Err(TrainError::NumericalFailure {
                    epoch,
                    term: term.to_string(),
                    value,
                });
            }
            let w = chunk.len() as f64;
            sums.rec += w * t.rec;
            sums.kl_root += w * t.kl_root;
            sums.kl_nodes += w * t.kl_nodes;
            sums.kl_decisions += w * t.kl_decisions;
            sums.contrastive_embed += w * t.contrastive_embed;
            sums.contrastive_router += w * t.contrastive_router;
            sums.total += w * t.total;
            seen += chunk.len();
        }
        let n = seen.max(1) as f64;
        report.epochs.push(EpochRecord {
            phase: phase.id,
            kind: phase.kind.to_string(),
            epoch,
            leaves: model.topology.leaves().len(),
            samples: seen,
            beta,
            rec: sums.rec / n,
            kl_root: sums.kl_root / n,
            kl_nodes: sums.kl_nodes / n,
            kl_decisions: sums.kl_decisions / n,
            contrastive_embed: sums.contrastive_embed / n,
            contrastive_router: sums.contrastive_router / n,
            total: sums.total / n,
        });
    }
    model.set_all_trainable(true);
    Ok(())
}

/// Reach probability of every node for every sample of `data` (eval mode).
pub fn node_reach<F: Real>(model: &TreeModel<F>, data: &Split) -> Result<BTreeMap<NodeId, Vec<f64>>, TrainError> {
    let mut out: BTreeMap<NodeId, Vec<f64>> = model
        .topology
        .nodes()
        .map(|n| (n, Vec::with_capacity(data.len())))
        .collect();
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(SCORE_CHUNK) {
        let x: Array2<F> = data.rows(chunk);
        let reach = reach_probabilities(model, &x, Mode::Eval)?;
        for (n, r) in reach {
            out.get_mut(&n).expect("node").extend(r.iter().map(|v| v.f64()));
        }
    }
    Ok(out)
}

/// Expected number of samples per leaf.
pub fn expected_occupancy(reach: &BTreeMap<NodeId, Vec<f64>>, leaves: &[NodeId]) -> BTreeMap<NodeId, f64> {
    leaves.iter().map(|l| (*l, reach[l].iter().sum())).collect()
}

/// The eligible leaf (depth below the maximum, not excluded) with the largest
/// expected occupancy; ties go to the smaller id.
pub fn select_growth_leaf(
    topology: &TreeTopology,
    occupancy: &BTreeMap<NodeId, f64>,
    excluded: &BTreeSet<NodeId>,
) -> Result<NodeId, TrainError> {
    let mut best: Option<(NodeId, f64)> = None;
    for l in topology.leaves() {
        if topology.depth(l) >= topology.max_depth() || excluded.contains(&l) {
            continue;
        }
        let c = occupancy.get(&l).copied().unwrap_or(0.0);
        // leaves come in ascending id order, so strict improvement keeps ties on the smaller id
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((l, c));
        }
    }
    best.map(|(l, _)| l).ok_or(TrainError::NoEligibleLeaf)
}

/// Indices of samples whose reach probability exceeds `t`, ascending.
pub fn filter_subset(reach: &[f64], t: f64) -> Vec<usize> {
    reach
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > t)
        .map(|(i, _)| i)
        .collect()
}

/// Remove leaves whose expected assigned fraction is below `threshold`,
/// emptiest first, re-scoring after every removal. Never goes below two leaves.
/// Returns the pruned leaves.
pub fn prune_empty<F: Real>(
    model: &mut TreeModel<F>,
    data: &Split,
    threshold: f64,
    seed: u64,
) -> Result<Vec<NodeId>, TrainError> {
    let mut pruned = Vec::new();
    let n = data.len().max(1) as f64;
    while model.topology.leaves().len() > 2 {
        let reach = node_reach(model, data)?;
        let occ = expected_occupancy(&reach, &model.topology.leaves());
        let Some((&leaf, &count)) = occ.iter().min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(b.0))) else {
            break;
        };
        if count / n >= threshold {
            break;
        }
        model.prune_node(leaf, seed.wrapping_add(pruned.len() as u64))?;
        pruned.push(leaf);
    }
    Ok(pruned)
}

/// The full structure-learning schedule.
pub fn run_growing_loop<F: Real>(cfg: &RunConfig, data: &Dataset) -> Result<(TreeModel<F>, TrainReport), TrainError> {
    run_growing_loop_with(cfg, data, |_, _| Ok(()))
}

/// [`run_growing_loop`] calling `after_phase` with the model and the phase
/// id and kind whenever a phase ends.
pub fn run_growing_loop_with<F: Real>(
    cfg: &RunConfig,
    data: &Dataset,
    mut after_phase: impl FnMut(&TreeModel<F>, &Phase<'_>) -> Result<(), TrainError>,
) -> Result<(TreeModel<F>, TrainReport), TrainError> {
    let g = &cfg.growth;
    let arch = cfg.arch_config(&data.input_shape, data.likelihood);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model: TreeModel<F> = TreeModel::build(TreeTopology::new_root_tree(arch.max_depth), arch, cfg.seed)?;
    let settings = PhaseSettings::from_config(cfg);
    let contrastive = settings.contrastive.is_some();
    let train = &data.train;
    let shape = &data.input_shape;
    let all: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport::default();
    let mut phase_id = 0;
    let mut next_phase = |kind: &'static str, epochs, scope, anneal_rate| {
        phase_id += 1;
        Phase {
            id: phase_id,
            kind,
            epochs,
            scope,
            anneal_rate,
        }
    };
    report.snapshot("root", &model.topology);

    let p = next_phase("root", g.epochs_per_step, PhaseScope::Full, g.anneal_growth);
    train_phase(&mut model, train, shape, &all, p, &settings, &mut rng, &mut report)?;
    after_phase(&model, &p)?;

    let mut excluded = BTreeSet::new();
    let mut steps = 0;
    while model.topology.leaves().len() < g.max_leaves {
        let reach = node_reach(&model, train)?;
        let occ = expected_occupancy(&reach, &model.topology.leaves());
        let leaf = match select_growth_leaf(&model.topology, &occ, &excluded) {
            Ok(l) => l,
            Err(TrainError::NoEligibleLeaf) => break,
            Err(e) => return Err(e),
        };
        let subset = filter_subset(&reach[&leaf], g.subset_threshold);
        if subset.len() < 2 {
            excluded.insert(leaf);
            continue;
        }
        let grown = model.topology.grow_at(leaf)?;
        model.attach_subtree_functions(grown, leaf, rng.gen())?;
        steps += 1;
        report.snapshot(format!("grow {leaf}"), &model.topology);
        let p = next_phase("subtree", g.epochs_per_step, PhaseScope::Subtree(leaf), g.anneal_growth);
        train_phase(&mut model, train, shape, &subset, p, &settings, &mut rng, &mut report)?;
        after_phase(&model, &p)?;
        if !contrastive && g.intermediate_every > 0 && steps % g.intermediate_every == 0 && g.intermediate_epochs > 0 {
            let p = next_phase("intermediate", g.intermediate_epochs, PhaseScope::Full, g.anneal_growth);
            train_phase(&mut model, train, shape, &all, p, &settings, &mut rng, &mut report)?;
            after_phase(&model, &p)?;
        }
    }

    for leaf in prune_empty(&mut model, train, g.prune_threshold, rng.gen())? {
        report.snapshot(format!("prune {leaf}"), &model.topology);
    }
    if !contrastive {
        let p = next_phase("final", g.final_epochs, PhaseScope::Full, g.anneal_final);
        train_phase(&mut model, train, shape, &all, p, &settings, &mut rng, &mut report)?;
        after_phase(&model, &p)?;
    }
    let reach = node_reach(&model, train)?;
    let n = train.len().max(1) as f64;
    report.occupancy = expected_occupancy(&reach, &model.topology.leaves())
        .into_iter()
        .map(|(l, c)| (l, c / n))
        .collect();
    Ok((model, report))
}
