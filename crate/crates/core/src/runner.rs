//! Evaluation of a trained model and the run-directory artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Real, Tape};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{Dataset, Split};
use crate::error::{ConfigError, InferenceError, MetricsError, RunError, TrainError};
use crate::generative::{
    reconstruct, sample_conditional, sample_unconditional, weighted_reconstruction, write_png_grid,
};
use crate::inference::{forward, ForwardOptions, Hooks};
use crate::metrics::{clustering_accuracy, iw_log_likelihood, mean_stderr, nmi, ClusteringResult};
use crate::model::TreeModel;
use crate::nn::Mode;
use crate::objective::{loss, LossSettings};
use crate::topology::{NodeId, TopologyJson};
use crate::trainer::{node_reach, run_growing_loop_with, TrainReport};

/// Rows per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub dataset: String,
    pub seed: u64,
    #[serde(rename = "DP")]
    pub dp: f64,
    #[serde(rename = "LP")]
    pub lp: f64,
    #[serde(rename = "ACC")]
    pub acc: f64,
    #[serde(rename = "NMI")]
    pub nmi: f64,
    #[serde(rename = "LL")]
    pub ll: f64,
    #[serde(rename = "RL")]
    pub rl: f64,
    #[serde(rename = "ELBO")]
    pub elbo: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8")
}

/// Hard leaf assignment (ties to the smaller id) from node reach probabilities.
pub fn hard_assignment(reach: &BTreeMap<NodeId, Vec<f64>>, leaves: &[NodeId]) -> Vec<NodeId> {
    let n = leaves.first().map_or(0, |l| reach[l].len());
    (0..n)
        .map(|i| {
            let mut best = leaves[0];
            for &l in &leaves[1..] {
                if reach[&l][i] > reach[&best][i] {
                    best = l;
                }
            }
            best
        })
        .collect()
}

/// Clustering scores of a hard assignment. DP is NaN when no two samples
/// share a class.
pub fn clustering_scores(result: &ClusteringResult) -> Result<(f64, f64, f64, f64), MetricsError> {
    let dp = match result.dendrogram_purity() {
        Ok(v) => v,
        Err(MetricsError::NoSameClassPairs) => f64::NAN,
        Err(e) => return Err(e),
    };
    let ids: Vec<usize> = result.assignment.iter().map(|n| n.0 as usize).collect();
    Ok((
        dp,
        result.leaf_purity(),
        clustering_accuracy(&ids, &result.labels)?,
        nmi(&ids, &result.labels)?,
    ))
}

/// Monte Carlo ELBO (beta 1, no contrastive terms) and reconstruction loss,
/// per sample means.
pub fn elbo_and_rl<F: Real, R: Rng>(
    model: &TreeModel<F>,
    data: &Split,
    samples: usize,
    rng: &mut R,
) -> Result<(f64, f64), TrainError> {
    let settings = LossSettings {
        likelihood: model.arch.likelihood,
        beta: 1.0,
        contrastive: None,
    };
    let (mut elbo, mut rl) = (0.0, 0.0);
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let x: Array2<F> = data.rows(chunk);
        let mut tape = Tape::new();
        let opts = ForwardOptions::new(Mode::Eval).samples(samples);
        let mut fwd = forward(model, &mut tape, &x, &opts, rng)?;
        let t = loss(model, &mut tape, &mut fwd, &settings)?.terms(&tape);
        let w = chunk.len() as f64;
        elbo -= w * t.negative_elbo();
        rl += w * t.rec;
    }
    let n = data.len().max(1) as f64;
    Ok((elbo / n, rl / n))
}

/// Importance-weighted log-likelihood over a split, chunked over rows.
pub fn split_log_likelihood<F: Real, R: Rng>(
    model: &TreeModel<F>,
    data: &Split,
    k: usize,
    chunk: usize,
    rng: &mut R,
) -> Result<(f64, f64), InferenceError> {
    let mut per = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    // keep rows x samples per pass bounded
    let rows = (EVAL_CHUNK * 64 / chunk.max(1)).clamp(1, EVAL_CHUNK);
    for c in all.chunks(rows) {
        let x: Array2<F> = data.rows(c);
        per.extend(iw_log_likelihood(model, &x, k, chunk, &Hooks::default(), rng)?.per_sample);
    }
    Ok(mean_stderr(&per))
}

#[derive(Debug, Clone, Copy)]
pub struct EvalSettings {
    pub samples: usize,
    pub iw_samples: usize,
    pub iw_chunk: usize,
}

/// All reported metrics on one split.
pub fn evaluate<F: Real, R: Rng>(
    model: &TreeModel<F>,
    data: &Split,
    dataset: &str,
    seed: u64,
    settings: EvalSettings,
    rng: &mut R,
) -> Result<MetricsRow, TrainError> {
    let reach = node_reach(model, data)?;
    let leaves = model.topology.leaves();
    let assignment = hard_assignment(&reach, &leaves);
    let result = ClusteringResult::new(model.topology.clone(), assignment, data.y.clone())?;
    let (dp, lp, acc, nmi) = clustering_scores(&result)?;
    let (elbo, rl) = elbo_and_rl(model, data, settings.samples, rng)?;
    let ll = if settings.iw_samples > 0 {
        split_log_likelihood(model, data, settings.iw_samples, settings.iw_chunk, rng)?.0
    } else {
        f64::NAN
    };
    Ok(MetricsRow {
        dataset: dataset.to_string(),
        seed,
        dp,
        lp,
        acc,
        nmi,
        ll,
        rl,
        elbo,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeafSummary {
    pub id: NodeId,
    /// Samples hard-assigned to the leaf.
    pub count: usize,
    /// Expected number of samples, `sum_x P(l; x)`.
    pub expected: f64,
    /// Majority true class among the assigned samples.
    pub majority_class: Option<usize>,
    /// Indices of the `k` samples with the highest reach probability.
    pub representatives: Vec<usize>,
    pub representative_reach: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeExport {
    pub topology: TopologyJson,
    pub leaves: Vec<LeafSummary>,
}

pub fn export_tree<F: Real>(model: &TreeModel<F>, data: &Split, top_k: usize) -> Result<TreeExport, TrainError> {
    let reach = node_reach(model, data)?;
    let leaves = model.topology.leaves();
    let assignment = hard_assignment(&reach, &leaves);
    let summaries = leaves
        .iter()
        .map(|&l| {
            let r = &reach[&l];
            let mut order: Vec<usize> = (0..r.len()).collect();
            order.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then(a.cmp(&b)));
            order.truncate(top_k);
            let mut classes: BTreeMap<usize, usize> = BTreeMap::new();
            for (i, &a) in assignment.iter().enumerate() {
                if a == l {
                    *classes.entry(data.y[i]).or_default() += 1;
                }
            }
            LeafSummary {
                id: l,
                count: assignment.iter().filter(|&&a| a == l).count(),
                expected: r.iter().sum(),
                majority_class: classes
                    .iter()
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                    .map(|(c, _)| *c),
                representative_reach: order.iter().map(|&i| r[i]).collect(),
                representatives: order,
            }
        })
        .collect();
    Ok(TreeExport {
        topology: model.topology.to_json(),
        leaves: summaries,
    })
}

/// Graphviz rendering of the tree; leaves carry their sample counts.
pub fn to_dot(export: &TreeExport, parents: &[(NodeId, NodeId)], nodes: &[NodeId]) -> String {
    let by_id: BTreeMap<NodeId, &LeafSummary> = export.leaves.iter().map(|l| (l.id, l)).collect();
    let mut out = String::from("digraph tree {\n  node [shape=box];\n");
    for n in nodes {
        match by_id.get(n) {
            Some(l) => {
                let class = l.majority_class.map_or("-".to_string(), |c| c.to_string());
                out.push_str(&format!(
                    "  n{n} [label=\"leaf {n}\\nn={}\\nclass {class}\"];\n",
                    l.count
                ));
            }
            None => out.push_str(&format!("  n{n} [label=\"{n}\", shape=ellipse];\n")),
        }
    }
    for (p, c) in parents {
        out.push_str(&format!("  n{p} -> n{c};\n"));
    }
    out.push_str("}\n");
    out
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), RunError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| output_err(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| output_err(path, e))
}

fn output_err(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Output {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

#[derive(Debug, Serialize)]
struct DatasetInfo<'a> {
    name: &'a str,
    input_shape: &'a [usize],
    likelihood: crate::model::LikelihoodKind,
    classes: usize,
    train: usize,
    test: usize,
    checksums: &'a [crate::data::FileChecksum],
}

/// Files of a finished training run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub metrics: MetricsRow,
    pub report: TrainReport,
}

/// Train per `cfg` and write the run directory: the effective config, dataset
/// summary, loss log, topology snapshots, per-phase and final checkpoints,
/// the final topology and test metrics.
pub fn train_to_dir(cfg: &RunConfig, data: &Dataset) -> Result<RunOutput, RunError> {
    if cfg.deterministic {
        train_typed::<f64>(cfg, data)
    } else {
        train_typed::<f32>(cfg, data)
    }
}

fn train_typed<F: Real>(cfg: &RunConfig, data: &Dataset) -> Result<RunOutput, RunError> {
    let dir = cfg.out_dir.clone();
    write_file(&dir.join("config.toml"), cfg.to_toml())?;
    write_file(
        &dir.join("dataset.json"),
        json(&DatasetInfo {
            name: &data.name,
            input_shape: &data.input_shape,
            likelihood: data.likelihood,
            classes: data.n_classes,
            train: data.train.len(),
            test: data.test.len(),
            checksums: &data.checksums,
        }),
    )?;
    let ckpt_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| output_err(&ckpt_dir, e))?;
    let (model, report) = run_growing_loop_with::<F>(cfg, data, |m, phase| {
        let path = ckpt_dir.join(format!("phase_{:02}_{}.ckpt", phase.id, phase.kind));
        save_checkpoint(m, &path).map_err(TrainError::Model)
    })?;
    write_file(&dir.join("loss.csv"), report.loss_csv())?;
    for (i, s) in report.snapshots.iter().enumerate() {
        let name = s.event.replace(' ', "_");
        write_file(
            &dir.join("snapshots").join(format!("{i:02}_{name}.json")),
            json(&s.topology),
        )?;
    }
    write_file(&dir.join("topology.json"), json(&model.topology.to_json()))?;
    write_file(&dir.join("occupancy.json"), json(&report.occupancy))?;
    save_checkpoint(&model, &dir.join("final_checkpoint"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let settings = EvalSettings {
        samples: cfg.evaluation.samples,
        iw_samples: cfg.evaluation.iw_samples,
        iw_chunk: cfg.evaluation.iw_chunk,
    };
    let metrics = evaluate(&model, &data.test, &data.name, cfg.seed, settings, &mut rng)?;
    write_file(&dir.join("metrics.csv"), metrics_csv(std::slice::from_ref(&metrics)))?;
    Ok(RunOutput { dir, metrics, report })
}

/// Load a checkpoint and check that it accepts inputs of `data`.
pub fn load_for<F: Real>(path: &Path, data: &Dataset) -> Result<TreeModel<F>, RunError> {
    let model = load_checkpoint::<F>(path)?;
    if model.arch.input_shape != data.input_shape {
        return Err(RunError::ShapeMismatch {
            dataset: data.input_shape.clone(),
            checkpoint: model.arch.input_shape.clone(),
        });
    }
    Ok(model)
}

/// Test-split metrics of a checkpoint. With the seed and precision used in
/// training this reproduces the run's `metrics.csv`.
pub fn eval_checkpoint(
    path: &Path,
    data: &Dataset,
    seed: u64,
    deterministic: bool,
    settings: EvalSettings,
) -> Result<MetricsRow, RunError> {
    fn go<F: Real>(path: &Path, data: &Dataset, seed: u64, settings: EvalSettings) -> Result<MetricsRow, RunError> {
        let model = load_for::<F>(path, data)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        Ok(evaluate(&model, &data.test, &data.name, seed, settings, &mut rng)?)
    }
    if deterministic {
        go::<f64>(path, data, seed, settings)
    } else {
        go::<f32>(path, data, seed, settings)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenerateMode {
    Conditional,
    Unconditional,
    Reconstruct,
}

impl GenerateMode {
    pub fn name(self) -> &'static str {
        match self {
            GenerateMode::Conditional => "conditional",
            GenerateMode::Unconditional => "unconditional",
            GenerateMode::Reconstruct => "reconstruct",
        }
    }
}

/// Labelled output rows of a generation command.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    /// Grid columns when rendered as images.
    pub cols: usize,
    /// `(sample, tag, values)`; the tag is a leaf id, `input` or `reconstruction`.
    pub rows: Vec<(usize, String, Vec<f64>)>,
}

/// Samples or reconstructions from a checkpoint.
///
/// Unconditional: `n` rows with one column per leaf. Conditional: `n` samples
/// following the generative routers. Reconstruct: the first `n` test inputs
/// beside their leaf-weighted reconstructions.
pub fn generate(
    path: &Path,
    mode: GenerateMode,
    n: usize,
    data: Option<&Dataset>,
    seed: u64,
) -> Result<(Generated, Vec<usize>), RunError> {
    let model = match data {
        Some(d) => load_for::<f64>(path, d)?,
        None => load_checkpoint::<f64>(path)?,
    };
    let shape = model.arch.input_shape.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row = |a: &Array2<f64>, i: usize| a.row(i).to_vec();
    let mut rows = Vec::new();
    let cols = match mode {
        GenerateMode::Unconditional => {
            let g = sample_unconditional(&model, n, &Hooks::default(), &mut rng);
            for i in 0..n {
                for (leaf, out) in &g.leaf_outputs {
                    rows.push((i, leaf.to_string(), row(out, i)));
                }
            }
            g.leaf_outputs.len()
        }
        GenerateMode::Conditional => {
            let g = sample_conditional(&model, n, &Hooks::default(), &mut rng);
            let out = g.samples.expect("conditional sampling decodes every row");
            for i in 0..n {
                rows.push((i, g.paths[i].leaf().to_string(), row(&out, i)));
            }
            n.clamp(1, 10)
        }
        GenerateMode::Reconstruct => {
            let d = data.ok_or_else(|| ConfigError::Invalid("reconstruction needs a dataset".into()))?;
            let idx: Vec<usize> = (0..n.min(d.test.len())).collect();
            let x = d.test.rows::<f64>(&idx);
            let (recs, weights) = reconstruct(&model, &x, 1, &mut rng).map_err(TrainError::from)?;
            let mixed = weighted_reconstruction(&recs, &weights);
            for i in 0..idx.len() {
                rows.push((i, "input".to_string(), row(&x, i)));
                rows.push((i, "reconstruction".to_string(), row(&mixed, i)));
            }
            2
        }
    };
    Ok((Generated { cols, rows }, shape))
}

/// Write generated rows as a PNG grid for image shapes, CSV otherwise.
/// Returns the written file.
pub fn write_generated(
    dir: &Path,
    mode: GenerateMode,
    generated: &Generated,
    shape: &[usize],
) -> Result<PathBuf, RunError> {
    std::fs::create_dir_all(dir).map_err(|e| output_err(dir, e))?;
    if shape.len() == 3 {
        let path = dir.join(format!("{}.png", mode.name()));
        let images: Vec<Vec<f64>> = generated.rows.iter().map(|r| r.2.clone()).collect();
        write_png_grid(&path, &images, shape, generated.cols).map_err(|e| output_err(&path, e))?;
        Ok(path)
    } else {
        let path = dir.join(format!("{}.csv", mode.name()));
        let dim = generated.rows.first().map_or(0, |r| r.2.len());
        let mut out = String::from("sample,tag");
        for j in 0..dim {
            out.push_str(&format!(",x{j}"));
        }
        out.push('\n');
        for (i, tag, v) in &generated.rows {
            out.push_str(&format!("{i},{tag}"));
            for x in v {
                out.push_str(&format!(",{x}"));
            }
            out.push('\n');
        }
        write_file(&path, out)?;
        Ok(path)
    }
}

/// JSON or DOT export of a checkpoint's tree with per-leaf statistics on the
/// test split of `data`.
pub fn export_checkpoint(path: &Path, data: &Dataset, top_k: usize, dot: bool) -> Result<String, RunError> {
    let model = load_for::<f64>(path, data)?;
    let export = export_tree(&model, &data.test, top_k)?;
    if dot {
        let t = &model.topology;
        let nodes = t.breadth_first();
        let edges: Vec<(NodeId, NodeId)> = nodes.iter().filter_map(|&n| t.parent(n).map(|p| (p, n))).collect();
        Ok(to_dot(&export, &edges, &nodes))
    } else {
        Ok(json(&export))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hard_assignment_ties_to_smaller_id() {
        let reach = BTreeMap::from([(NodeId(1), vec![0.5, 0.2]), (NodeId(2), vec![0.5, 0.8])]);
        assert_eq!(
            hard_assignment(&reach, &[NodeId(1), NodeId(2)]),
            vec![NodeId(1), NodeId(2)]
        );
    }

    #[test]
    fn csv_header_layout() {
        let row = MetricsRow {
            dataset: "synthetic".into(),
            seed: 1,
            dp: 1.0,
            lp: 1.0,
            acc: 1.0,
            nmi: 1.0,
            ll: -3.5,
            rl: 2.0,
            elbo: -4.0,
        };
        let text = metrics_csv(&[row]);
        assert!(text.starts_with("dataset,seed,DP,LP,ACC,NMI,LL,RL,ELBO\n"));
    }
}
