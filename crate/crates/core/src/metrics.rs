//! Clustering metrics on hard leaf assignments and the importance-weighted
//! log-likelihood estimate.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use pathfinding::prelude::{kuhn_munkres, Matrix};
use rand::Rng;

use crate::autodiff::{Real, Tape};
use crate::error::{InferenceError, MetricsError};
use crate::inference::{forward, ForwardOptions, Hooks};
use crate::model::{LikelihoodKind, TreeModel};
use crate::nn::Mode;
use crate::topology::{NodeId, TreeTopology};

/// Hard assignments of samples to leaves together with the true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringResult {
    pub topology: TreeTopology,
    pub assignment: Vec<NodeId>,
    pub labels: Vec<usize>,
}

fn check_lengths(a: usize, b: usize) -> Result<(), MetricsError> {
    if a != b {
        return Err(MetricsError::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

fn choose2(n: u64) -> BigInt {
    BigInt::from(n) * BigInt::from(n.saturating_sub(1)) / BigInt::from(2)
}

impl ClusteringResult {
    pub fn new(topology: TreeTopology, assignment: Vec<NodeId>, labels: Vec<usize>) -> Result<Self, MetricsError> {
        check_lengths(assignment.len(), labels.len())?;
        Ok(Self {
            topology,
            assignment,
            labels,
        })
    }

    /// Per-node class counts of the samples assigned below it.
    fn node_counts(&self) -> BTreeMap<NodeId, BTreeMap<usize, u64>> {
        let mut counts: BTreeMap<NodeId, BTreeMap<usize, u64>> = BTreeMap::new();
        for (&leaf, &y) in self.assignment.iter().zip(&self.labels) {
            for n in self.topology.path_to(leaf).0 {
                *counts.entry(n).or_default().entry(y).or_default() += 1;
            }
        }
        counts
    }

    /// Mean over same-class pairs of the class purity of the samples under the
    /// pair's lowest common ancestor.
    pub fn dendrogram_purity(&self) -> Result<f64, MetricsError> {
        let counts = self.node_counts();
        let empty = BTreeMap::new();
        let mut sum = BigRational::zero();
        let mut pairs = BigInt::zero();
        for (n, by_class) in &counts {
            let size: u64 = by_class.values().sum();
            let children = self.topology.children(*n);
            for (&k, &c) in by_class {
                // same-class pairs whose lowest common ancestor is exactly `n`
                let mut here = choose2(c);
                if let Some((l, r)) = children {
                    for child in [l, r] {
                        let ck = counts.get(&child).unwrap_or(&empty).get(&k).copied().unwrap_or(0);
                        here -= choose2(ck);
                    }
                }
                if here.is_zero() {
                    continue;
                }
                pairs += &here;
                sum += BigRational::new(here * BigInt::from(c), BigInt::from(size));
            }
        }
        if pairs.is_zero() {
            return Err(MetricsError::NoSameClassPairs);
        }
        Ok((sum / BigRational::from_integer(pairs)).to_f64().expect("finite"))
    }

    /// Sample-weighted majority-class fraction over leaves.
    pub fn leaf_purity(&self) -> f64 {
        let mut per_leaf: BTreeMap<NodeId, BTreeMap<usize, u64>> = BTreeMap::new();
        for (&l, &y) in self.assignment.iter().zip(&self.labels) {
            *per_leaf.entry(l).or_default().entry(y).or_default() += 1;
        }
        let majority: u64 = per_leaf.values().map(|c| c.values().copied().max().unwrap_or(0)).sum();
        majority as f64 / self.labels.len() as f64
    }

    pub fn accuracy(&self) -> f64 {
        let a: Vec<usize> = self.assignment.iter().map(|n| n.0 as usize).collect();
        clustering_accuracy(&a, &self.labels).expect("lengths checked")
    }

    pub fn nmi(&self) -> f64 {
        let a: Vec<usize> = self.assignment.iter().map(|n| n.0 as usize).collect();
        nmi(&a, &self.labels).expect("lengths checked")
    }
}

fn contingency(assign: &[usize], labels: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<Vec<u64>>) {
    let clusters: Vec<usize> = assign.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let classes: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mut table = vec![vec![0u64; classes.len()]; clusters.len()];
    for (a, y) in assign.iter().zip(labels) {
        let i = clusters.binary_search(a).expect("present");
        let j = classes.binary_search(y).expect("present");
        table[i][j] += 1;
    }
    (clusters, classes, table)
}

/// Best one-to-one matching of clusters to classes, as a fraction of samples.
pub fn clustering_accuracy(assign: &[usize], labels: &[usize]) -> Result<f64, MetricsError> {
    check_lengths(assign.len(), labels.len())?;
    let (clusters, classes, table) = contingency(assign, labels);
    let size = clusters.len().max(classes.len());
    let weights = Matrix::from_fn(size, size, |(i, j)| {
        if i < clusters.len() && j < classes.len() {
            table[i][j] as i64
        } else {
            0
        }
    });
    let (matched, _) = kuhn_munkres(&weights);
    Ok(matched as f64 / assign.len() as f64)
}

/// Mutual information normalized by the arithmetic mean of the two entropies.
pub fn nmi(assign: &[usize], labels: &[usize]) -> Result<f64, MetricsError> {
    check_lengths(assign.len(), labels.len())?;
    let (_, _, table) = contingency(assign, labels);
    let n = assign.len() as f64;
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let cols: Vec<f64> = (0..table[0].len())
        .map(|j| table.iter().map(|r| r[j]).sum::<u64>() as f64)
        .collect();
    let entropy = |m: &[f64]| -m.iter().map(|&c| (c / n) * (c / n).ln()).sum::<f64>();
    let (hu, hv) = (entropy(&rows), entropy(&cols));
    let mut mi = 0.0;
    for (i, r) in table.iter().enumerate() {
        for (j, &c) in r.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += (c / n) * (n * c / (rows[i] * cols[j])).ln();
            }
        }
    }
    if hu + hv == 0.0 {
        return Ok(1.0);
    }
    Ok((mi / (0.5 * (hu + hv))).clamp(0.0, 1.0))
}

fn log_normal(z: f64, mu: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (z - mu) * (z - mu) / var)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Importance-weighted log-likelihood estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct IwEstimate {
    /// Per input row.
    pub per_sample: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
}

pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `log (1/K) sum_k w_k` per row of `x`. Each importance sample draws the
/// latents and a path `P` from the posterior, with
/// `w_k = p(z_P, P) p(x | z_leaf) / q(z_P, P | x)`. Samples are processed
/// `chunk` at a time.
pub fn iw_log_likelihood<F: Real, R: Rng>(
    model: &TreeModel<F>,
    x: &Array2<F>,
    k: usize,
    chunk: usize,
    hooks: &Hooks,
    rng: &mut R,
) -> Result<IwEstimate, InferenceError> {
    assert!(k >= 1 && chunk >= 1);
    let t = &model.topology;
    let b = x.nrows();
    let mut log_w: Vec<Vec<f64>> = vec![Vec::with_capacity(k); b];
    let mut done = 0;
    while done < k {
        let m = chunk.min(k - done);
        let opts = ForwardOptions::new(Mode::Eval).samples(m).hooks(hooks.clone());
        let mut tape = Tape::new();
        let fwd = forward(model, &mut tape, x, &opts, rng)?;
        let s = fwd.snapshot(&tape);
        let root = t.root();
        for row in 0..(m * b) {
            let xb = row % b;
            let lp_node = |n: NodeId| -> (f64, f64) {
                let st = &s.nodes[&n];
                let z = st.z.row(row);
                let mut lp = 0.0;
                let mut lq = 0.0;
                for j in 0..z.len() {
                    let zj = z[j].f64();
                    let (pm, pv) = match (&st.p_mu, &st.p_sigma2) {
                        (Some(pm), Some(pv)) => (pm[[row, j]].f64(), pv[[row, j]].f64()),
                        _ => (0.0, 1.0),
                    };
                    lp += log_normal(zj, pm, pv);
                    lq += log_normal(zj, st.q_mu[[row, j]].f64(), st.q_sigma2[[row, j]].f64());
                }
                (lp, lq)
            };
            let (root_p, root_q) = lp_node(root);
            let mut lw = root_p - root_q;
            let mut node = root;
            while let Some((l, r)) = t.children(node) {
                let st = &s.nodes[&node];
                let q = st.router_q.as_ref().expect("internal")[xb].f64();
                let p = st.router_p.as_ref().expect("internal")[row].f64();
                let right = rng.gen::<f64>() < q;
                let (child, pc, qc) = if right { (r, p, q) } else { (l, 1.0 - p, 1.0 - q) };
                let (lp, lq) = lp_node(child);
                lw += lp - lq + pc.ln() - qc.ln();
                node = child;
            }
            let out = s.nodes[&node].decoded.as_ref().expect("leaf");
            let mut ll = 0.0;
            for j in 0..x.ncols() {
                let xi = x[[xb, j]].f64();
                let o = out[[row, j]].f64();
                ll += match model.arch.likelihood {
                    LikelihoodKind::Bernoulli => xi * o - crate::autodiff::softplus(o),
                    LikelihoodKind::Gaussian => log_normal(xi, o, 1.0),
                };
            }
            log_w[xb].push(lw + ll);
        }
        done += m;
    }
    let per_sample: Vec<f64> = log_w.iter().map(|w| log_sum_exp(w) - (k as f64).ln()).collect();
    let (mean, stderr) = mean_stderr(&per_sample);
    Ok(IwEstimate {
        per_sample,
        mean,
        stderr,
    })
}
