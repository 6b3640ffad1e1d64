//! Sampling from the generative model and leaf-wise reconstruction.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{sigmoid, Real};
use crate::error::InferenceError;
use crate::inference::{infer, ForwardOptions, Hooks, ROUTER_EPS};
use crate::model::{LikelihoodKind, TreeModel};
use crate::nn::Mode;
use crate::topology::{DecisionPath, NodeId, Side};

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult<F> {
    /// `n x latent` per node.
    pub z: BTreeMap<NodeId, Array2<F>>,
    /// Generative router probability of the right branch, per internal node.
    pub router_p: BTreeMap<NodeId, Vec<F>>,
    /// Decoder outputs (probabilities or means) per leaf, `n` rows each.
    /// Unconditional sampling only.
    pub leaf_outputs: BTreeMap<NodeId, Array2<F>>,
    /// Chosen path per sample. Conditional sampling only.
    pub paths: Vec<DecisionPath>,
    /// Output of the reached leaf per sample. Conditional sampling only.
    pub samples: Option<Array2<F>>,
}

/// Map decoder outputs to the observation space.
pub fn output_link<F: Real>(kind: LikelihoodKind, raw: Array2<F>) -> Array2<F> {
    match kind {
        LikelihoodKind::Bernoulli => raw.mapv(sigmoid),
        LikelihoodKind::Gaussian => raw,
    }
}

/// Prior samples of every node plus the generative routers. Noise is drawn
/// per node in breadth-first order, so both sampling modes share it for a
/// given seed.
#[allow(clippy::type_complexity)]
fn prior_pass<F: Real, R: Rng>(
    model: &TreeModel<F>,
    n: usize,
    hooks: &Hooks,
    rng: &mut R,
) -> (BTreeMap<NodeId, Array2<F>>, BTreeMap<NodeId, Vec<F>>) {
    let t = &model.topology;
    let mut z = BTreeMap::new();
    let mut routers = BTreeMap::new();
    let (lo, hi) = (F::c(ROUTER_EPS), F::c(1.0 - ROUTER_EPS));
    for node in t.breadth_first() {
        let dim = model.arch.latent_dims[t.depth(node)];
        let eps: Array2<F> = Array2::from_shape_fn((n, dim), |_| F::c(rng.sample::<f64, _>(StandardNormal)));
        let eps = if hooks.zero_noise { eps.mapv(|_| F::zero()) } else { eps };
        let zn = match t.parent(node) {
            None => eps,
            Some(pa) => {
                let prior = model.functions(node).prior.as_ref().expect("non-root prior");
                let (mu, var) = prior.apply(&z[&pa], Mode::Eval);
                mu + var.mapv(|v| v.sqrt()) * eps
            }
        };
        if t.children(node).is_some() {
            let r = match hooks.router_p.get(&node) {
                Some(&v) => vec![F::c(v); n],
                None => {
                    let raw = model
                        .functions(node)
                        .router_p
                        .as_ref()
                        .expect("router")
                        .apply(&zn, Mode::Eval);
                    raw.iter().map(|&v| v.max(lo).min(hi)).collect()
                }
            };
            routers.insert(node, r);
        }
        z.insert(node, zn);
    }
    (z, routers)
}

fn decode<F: Real>(model: &TreeModel<F>, leaf: NodeId, z: &Array2<F>) -> Array2<F> {
    let raw = model
        .functions(leaf)
        .decoder
        .as_ref()
        .expect("leaf decoder")
        .apply(z, Mode::Eval);
    output_link(model.arch.likelihood, raw)
}

/// Sample `n` latent trees from the prior and decode every leaf.
pub fn sample_unconditional<F: Real, R: Rng>(
    model: &TreeModel<F>,
    n: usize,
    hooks: &Hooks,
    rng: &mut R,
) -> GenerationResult<F> {
    let (z, router_p) = prior_pass(model, n, hooks, rng);
    let leaf_outputs = model
        .topology
        .leaves()
        .into_iter()
        .map(|l| (l, decode(model, l, &z[&l])))
        .collect();
    GenerationResult {
        z,
        router_p,
        leaf_outputs,
        paths: Vec::new(),
        samples: None,
    }
}

/// Sample `n` outputs following the most probable generative branch at every
/// internal node (ties go left). Only the reached leaf is decoded.
pub fn sample_conditional<F: Real, R: Rng>(
    model: &TreeModel<F>,
    n: usize,
    hooks: &Hooks,
    rng: &mut R,
) -> GenerationResult<F> {
    let t = &model.topology;
    let (z, router_p) = prior_pass(model, n, hooks, rng);
    let half = F::c(0.5);
    let paths: Vec<DecisionPath> = (0..n)
        .map(|i| {
            let mut node = t.root();
            let mut path = vec![node];
            while let Some((l, r)) = t.children(node) {
                node = if router_p[&node][i] > half { r } else { l };
                path.push(node);
            }
            DecisionPath(path)
        })
        .collect();
    let mut samples = Array2::zeros((n, model.arch.input_dim()));
    for leaf in t.leaves() {
        let rows: Vec<usize> = (0..n).filter(|&i| paths[i].leaf() == leaf).collect();
        if rows.is_empty() {
            continue;
        }
        let out = decode(model, leaf, &z[&leaf].select(ndarray::Axis(0), &rows));
        for (k, &i) in rows.iter().enumerate() {
            samples.row_mut(i).assign(&out.row(k));
        }
    }
    GenerationResult {
        z,
        router_p,
        leaf_outputs: BTreeMap::new(),
        paths,
        samples: Some(samples),
    }
}

/// Probability of a path under the generative routers of sample `i`.
pub fn path_probability<F: Real>(model: &TreeModel<F>, result: &GenerationResult<F>, i: usize) -> f64 {
    let t = &model.topology;
    let path = &result.paths[i];
    path.nodes()
        .windows(2)
        .map(|w| {
            let r = result.router_p[&w[0]][i].f64();
            if t.side(w[1]) == Some(Side::Right) {
                r
            } else {
                1.0 - r
            }
        })
        .product()
}

/// Per-leaf reconstructions averaged over `samples` posterior draws, and the
/// leaf weights `P(l; x)` (`B x |leaves|`, leaves by ascending id).
#[allow(clippy::type_complexity)]
pub fn reconstruct<F: Real, R: Rng>(
    model: &TreeModel<F>,
    x: &Array2<F>,
    samples: usize,
    rng: &mut R,
) -> Result<(BTreeMap<NodeId, Array2<F>>, Array2<F>), InferenceError> {
    let opts = ForwardOptions::new(Mode::Eval).samples(samples);
    let state = infer(model, x, &opts, rng)?;
    let b = x.nrows();
    let inv = F::c(1.0 / samples as f64);
    let mut recs = BTreeMap::new();
    for &l in &state.leaves {
        let out = output_link(model.arch.likelihood, state.nodes[&l].decoded.clone().expect("leaf"));
        let mut mean = Array2::zeros((b, out.ncols()));
        for m in 0..samples {
            mean += &out.slice(ndarray::s![m * b..(m + 1) * b, ..]);
        }
        recs.insert(l, mean * inv);
    }
    Ok((recs, state.path_distribution()))
}

/// `sum_l P(l; x) * reconstruction_l`.
pub fn weighted_reconstruction<F: Real>(recs: &BTreeMap<NodeId, Array2<F>>, weights: &Array2<F>) -> Array2<F> {
    let mut out: Option<Array2<F>> = None;
    for (j, r) in recs.values().enumerate() {
        let w = weights.column(j).to_owned().insert_axis(ndarray::Axis(1));
        let term = r * &w;
        out = Some(match out {
            None => term,
            Some(acc) => acc + term,
        });
    }
    out.unwrap_or_else(|| Array2::zeros((weights.nrows(), 0)))
}

/// Write images (`H x W x C` rows in `[0, 1]`) as a PNG grid with `cols` columns.
pub fn write_png_grid(path: &Path, images: &[Vec<f64>], shape: &[usize], cols: usize) -> Result<(), image::ImageError> {
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let cols = cols.max(1);
    let rows = images.len().div_ceil(cols).max(1);
    let pad = 2;
    let (gw, gh) = (cols * (w + pad) + pad, rows * (h + pad) + pad);
    let mut buf = image::RgbImage::from_pixel(gw as u32, gh as u32, image::Rgb([255, 255, 255]));
    for (k, img) in images.iter().enumerate() {
        let (oy, ox) = (pad + (k / cols) * (h + pad), pad + (k % cols) * (w + pad));
        for y in 0..h {
            for x in 0..w {
                let px = |ch: usize| (img[(y * w + x) * c + ch.min(c - 1)].clamp(0.0, 1.0) * 255.0).round() as u8;
                buf.put_pixel((ox + x) as u32, (oy + y) as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)
}
