//! Brute-force reference computations: the ELBO summed explicitly over every
//! decision path, central finite differences, and clustering metrics by
//! exhaustive enumeration. Everything here runs on plain `f64` arrays through
//! [`Mlp::apply`](crate::nn::Mlp::apply), independent of the tape.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};

use crate::error::MetricsError;
use crate::inference::{Hooks, ROUTER_EPS};
use crate::model::{LikelihoodKind, TreeModel};
use crate::nn::Mode;
use crate::topology::{NodeId, TreeTopology};

#[derive(Debug, Clone, PartialEq)]
pub struct EnumerationResult {
    /// Share of the negative ELBO attributed to each path, by leaf.
    pub leaf_contributions: Vec<(NodeId, f64)>,
    pub rec: f64,
    pub kl_root: f64,
    pub kl_nodes: f64,
    pub kl_decisions: f64,
    /// Negative ELBO.
    pub total: f64,
}

fn log_sigmoid(l: f64) -> f64 {
    // log(1 / (1 + e^-l))
    -((-l).max(0.0) + (-(l.abs())).exp().ln_1p())
}

/// `-log p(x | decoder output)` of one row.
fn neg_log_lik(kind: LikelihoodKind, x: &[f64], out: &[f64]) -> f64 {
    match kind {
        LikelihoodKind::Bernoulli => -x
            .iter()
            .zip(out)
            .map(|(&xi, &l)| xi * log_sigmoid(l) + (1.0 - xi) * log_sigmoid(-l))
            .sum::<f64>(),
        LikelihoodKind::Gaussian => x
            .iter()
            .zip(out)
            .map(|(&xi, &m)| 0.5 * (xi - m) * (xi - m) + 0.5 * (2.0 * std::f64::consts::PI).ln())
            .sum(),
    }
}

/// KL between Gaussians with diagonal covariances, written with traces and
/// log-determinants of the covariance matrices.
fn kl_trace_form(q_mu: &[f64], q_var: &[f64], p_mu: &[f64], p_var: &[f64]) -> f64 {
    let k = q_mu.len() as f64;
    let trace: f64 = q_var.iter().zip(p_var).map(|(q, p)| q / p).sum();
    let maha: f64 = q_mu
        .iter()
        .zip(p_mu)
        .zip(p_var)
        .map(|((a, b), v)| (b - a) * (b - a) / v)
        .sum();
    let log_det_p: f64 = p_var.iter().map(|v| v.ln()).sum();
    let log_det_q: f64 = q_var.iter().map(|v| v.ln()).sum();
    0.5 * (trace + maha - k + log_det_p - log_det_q)
}

fn merge(hat_mu: f64, hat_var: f64, mu: f64, var: f64) -> (f64, f64) {
    let s = hat_var + var;
    ((hat_mu * var + mu * hat_var) / s, hat_var * var / s)
}

fn tile(a: &Array2<f64>, times: usize) -> Array2<f64> {
    let views: Vec<_> = (0..times).map(|_| a.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("same widths")
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(ROUTER_EPS, 1.0 - ROUTER_EPS)
}

/// Negative ELBO of `x` by explicit summation over all root-to-leaf paths.
///
/// `shared_z` holds the per-node latent samples (`M*B` rows, sample `m` of
/// input `b` in row `m*B + b`) that the factorized computation used.
pub fn elbo_by_enumeration(
    model: &TreeModel<f64>,
    x: &Array2<f64>,
    shared_z: &BTreeMap<NodeId, Array2<f64>>,
    samples: usize,
    mode: Mode,
    hooks: &Hooks,
) -> EnumerationResult {
    let t = &model.topology;
    let b = x.nrows();
    let rows = b * samples;
    let h_max = model.arch.max_depth;

    let mut d = vec![Array2::zeros((0, 0)); h_max + 1];
    d[h_max] = model.encoder.apply(x, mode);
    for h in (0..h_max).rev() {
        d[h] = model.ladder[h].apply(&d[h + 1], mode);
    }

    // posterior and prior parameters per node, M*B rows
    let mut q: BTreeMap<NodeId, (Array2<f64>, Array2<f64>)> = BTreeMap::new();
    let mut p: BTreeMap<NodeId, (Array2<f64>, Array2<f64>)> = BTreeMap::new();
    for n in t.nodes() {
        let f = model.functions(n);
        let (hm, hv) = f.head.apply(&d[t.depth(n)], mode);
        let (hm, hv) = (tile(&hm, samples), tile(&hv, samples));
        match t.parent(n) {
            None => {
                if model.arch.root_merge_prior {
                    let mut mu = hm.clone();
                    let mut var = hv.clone();
                    ndarray::Zip::from(&mut mu)
                        .and(&mut var)
                        .and(&hm)
                        .and(&hv)
                        .for_each(|m, v, &a, &s| (*m, *v) = merge(a, s, 0.0, 1.0));
                    q.insert(n, (mu, var));
                } else {
                    q.insert(n, (hm, hv));
                }
            }
            Some(pa) => {
                let z_pa = &shared_z[&pa];
                let prior = f.prior.as_ref().expect("prior").apply(z_pa, mode);
                let post = if hooks.posterior_is_prior {
                    prior.clone()
                } else {
                    let (tm, tv) = f.posterior.as_ref().expect("posterior").apply(z_pa, mode);
                    let mut mu = tm.clone();
                    let mut var = tv.clone();
                    ndarray::Zip::from(&mut mu)
                        .and(&mut var)
                        .and(&hm)
                        .and(&hv)
                        .for_each(|m, v, &a, &s| (*m, *v) = merge(a, s, *m, *v));
                    (mu, var)
                };
                p.insert(n, prior);
                q.insert(n, post);
            }
        }
    }

    // right-branch probabilities, M*B entries each
    let mut rq: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
    let mut rp: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
    for n in t.internal_nodes() {
        let f = model.functions(n);
        let gen: Vec<f64> = match hooks.router_p.get(&n) {
            Some(&v) => vec![v; rows],
            None => f
                .router_p
                .as_ref()
                .expect("router")
                .apply(&shared_z[&n], mode)
                .iter()
                .map(|&v| clamp_p(v))
                .collect(),
        };
        let inf: Vec<f64> = match hooks.router_q.get(&n) {
            Some(&v) => vec![v; rows],
            None if hooks.posterior_is_prior => (0..rows).map(|r| gen[r % b]).collect(),
            None => {
                let r = f.router_q.as_ref().expect("router").apply(&d[t.depth(n)], mode);
                (0..rows).map(|i| clamp_p(r[[i % b, 0]])).collect()
            }
        };
        rq.insert(n, inf);
        rp.insert(n, gen);
    }

    let kind = model.arch.likelihood;
    let root = t.root();
    let mut kl_root = 0.0;
    for r in 0..rows {
        let (m, v) = &q[&root];
        let k = m.ncols();
        kl_root += kl_trace_form(
            m.row(r).as_slice().expect("contiguous"),
            v.row(r).as_slice().expect("contiguous"),
            &vec![0.0; k],
            &vec![1.0; k],
        );
    }
    kl_root /= rows as f64;

    let decoded: BTreeMap<NodeId, Array2<f64>> = t
        .leaves()
        .into_iter()
        .map(|l| {
            (
                l,
                model
                    .functions(l)
                    .decoder
                    .as_ref()
                    .expect("decoder")
                    .apply(&shared_z[&l], mode),
            )
        })
        .collect();

    let (mut rec, mut kl_nodes, mut kl_dec) = (0.0, 0.0, 0.0);
    let mut leaf_contributions = Vec::new();
    for path in t.paths() {
        let leaf = path.leaf();
        let mut contrib = 0.0;
        for r in 0..rows {
            let mut log_q_path = 0.0;
            let mut log_p_path = 0.0;
            let mut q_path = 1.0;
            let mut kl_path = 0.0;
            for w in path.nodes().windows(2) {
                let (pa, child) = (w[0], w[1]);
                let right = t.side(child) == Some(crate::topology::Side::Right);
                let (a, g) = (rq[&pa][r], rp[&pa][r]);
                let (qa, pg) = if right { (a, g) } else { (1.0 - a, 1.0 - g) };
                q_path *= qa;
                log_q_path += qa.ln();
                log_p_path += pg.ln();
                let (qm, qv) = &q[&child];
                let (pm, pv) = &p[&child];
                kl_path += kl_trace_form(
                    qm.row(r).as_slice().expect("contiguous"),
                    qv.row(r).as_slice().expect("contiguous"),
                    pm.row(r).as_slice().expect("contiguous"),
                    pv.row(r).as_slice().expect("contiguous"),
                );
            }
            if q_path == 0.0 {
                continue;
            }
            let nll = neg_log_lik(
                kind,
                x.row(r % b).as_slice().expect("contiguous"),
                decoded[&leaf].row(r).as_slice().expect("contiguous"),
            );
            let dec = log_q_path - log_p_path;
            rec += q_path * nll;
            kl_nodes += q_path * kl_path;
            kl_dec += q_path * dec;
            contrib += q_path * (nll + kl_path + dec);
        }
        leaf_contributions.push((leaf, contrib / rows as f64));
    }
    let (rec, kl_nodes, kl_decisions) = (rec / rows as f64, kl_nodes / rows as f64, kl_dec / rows as f64);
    let mut result = EnumerationResult {
        leaf_contributions,
        rec,
        kl_root,
        kl_nodes,
        kl_decisions,
        total: rec + kl_root + kl_nodes + kl_decisions,
    };
    distribute_root(&mut result, &rq, t, rows);
    result
}

/// Add each path's expected share of the root KL to its contribution.
#[allow(clippy::needless_range_loop)]
fn distribute_root(result: &mut EnumerationResult, rq: &BTreeMap<NodeId, Vec<f64>>, t: &TreeTopology, rows: usize) {
    let paths = t.paths();
    for (path, (_, c)) in paths.iter().zip(result.leaf_contributions.iter_mut()) {
        let mut share = 0.0;
        for r in 0..rows {
            let mut q_path = 1.0;
            for w in path.nodes().windows(2) {
                let a = rq[&w[0]][r];
                q_path *= if t.side(w[1]) == Some(crate::topology::Side::Right) {
                    a
                } else {
                    1.0 - a
                };
            }
            share += q_path;
        }
        *c += result.kl_root * share / rows as f64;
    }
}

/// Central finite differences of `f` at `at`.
pub fn finite_difference_grad(mut f: impl FnMut(&Array1<f64>) -> f64, at: &Array1<f64>, step: f64) -> Array1<f64> {
    let mut w = at.clone();
    let mut g = Array1::zeros(at.len());
    for i in 0..at.len() {
        let orig = w[i];
        w[i] = orig + step;
        let up = f(&w);
        w[i] = orig - step;
        let down = f(&w);
        w[i] = orig;
        g[i] = (up - down) / (2.0 * step);
    }
    g
}

/// Brute-force `(DP, LP, ACC)` for at most 64 points and 7 clusters or classes.
pub fn metric_bruteforce(
    topology: &TreeTopology,
    assignment: &[NodeId],
    labels: &[usize],
) -> Result<(f64, f64, f64), MetricsError> {
    if assignment.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(assignment.len(), labels.len()));
    }
    if assignment.is_empty() {
        return Err(MetricsError::Empty);
    }
    if assignment.len() > 64 {
        return Err(MetricsError::TooLarge(format!("{} points", assignment.len())));
    }
    let n = assignment.len();

    // dendrogram purity: loop over same-class pairs
    let mut sum = BigRational::zero();
    let mut pairs = 0u64;
    for i in 0..n {
        for j in (i + 1)..n {
            if labels[i] != labels[j] {
                continue;
            }
            pairs += 1;
            let pi = topology.path_to(assignment[i]).0;
            let pj = topology.path_to(assignment[j]).0;
            let lca = pi
                .iter()
                .zip(&pj)
                .take_while(|(a, b)| a == b)
                .last()
                .map(|(a, _)| *a)
                .expect("shared root");
            let under = topology.subtree(lca);
            let members: Vec<usize> = (0..n).filter(|&k| under.contains(&assignment[k])).collect();
            let same = members.iter().filter(|&&k| labels[k] == labels[i]).count();
            sum += BigRational::new(BigInt::from(same), BigInt::from(members.len()));
        }
    }
    if pairs == 0 {
        return Err(MetricsError::NoSameClassPairs);
    }
    let dp = (sum / BigRational::from_integer(BigInt::from(pairs)))
        .to_f64()
        .expect("finite");

    // leaf purity
    let leaves: BTreeSet<NodeId> = assignment.iter().copied().collect();
    let mut majority = 0usize;
    for l in &leaves {
        let mut best = 0;
        for c in labels.iter().copied().collect::<BTreeSet<_>>() {
            let k = (0..n).filter(|&i| assignment[i] == *l && labels[i] == c).count();
            best = best.max(k);
        }
        majority += best;
    }
    let lp = majority as f64 / n as f64;

    // accuracy: every injective matching of clusters to classes
    let clusters: Vec<NodeId> = leaves.into_iter().collect();
    let classes: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let size = clusters.len().max(classes.len());
    if size > 7 {
        return Err(MetricsError::TooLarge(format!("{size} clusters or classes")));
    }
    let mut best = 0usize;
    let mut perm: Vec<usize> = (0..size).collect();
    permutations(&mut perm, 0, &mut |perm| {
        let mut hits = 0;
        for i in 0..n {
            let ci = clusters.iter().position(|c| *c == assignment[i]).expect("cluster");
            let class = perm[ci];
            if class < classes.len() && classes[class] == labels[i] {
                hits += 1;
            }
        }
        best = best.max(hits);
    });
    Ok((dp, lp, best as f64 / n as f64))
}

fn permutations(v: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        visit(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permutations(v, k + 1, visit);
        v.swap(k, i);
    }
}

/// NMI with arithmetic-mean normalization, from per-sample log ratios.
pub fn nmi_bruteforce(assignment: &[usize], labels: &[usize]) -> f64 {
    let n = assignment.len() as f64;
    let count = |pred: &dyn Fn(usize) -> bool| (0..assignment.len()).filter(|&k| pred(k)).count() as f64;
    let (mut mi, mut hu, mut hv) = (0.0, 0.0, 0.0);
    for i in 0..assignment.len() {
        let a = count(&|k| assignment[k] == assignment[i]);
        let b = count(&|k| labels[k] == labels[i]);
        let ab = count(&|k| assignment[k] == assignment[i] && labels[k] == labels[i]);
        mi += (n * ab / (a * b)).ln() / n;
        hu -= (a / n).ln() / n;
        hv -= (b / n).ln() / n;
    }
    if hu + hv == 0.0 {
        return 1.0;
    }
    (mi / (0.5 * (hu + hv))).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quadratic_gradient() {
        let g = finite_difference_grad(|w| w.dot(w), &array![1.0, 2.0], 1e-5);
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn trivial_metric_cases() {
        let t = TreeTopology::new_root_tree(3);
        let a = [NodeId(1), NodeId(1), NodeId(2), NodeId(2)];
        let one_leaf = [NodeId(2); 4];
        assert_eq!(
            metric_bruteforce(&t, &one_leaf, &[0, 0, 0, 0]).unwrap(),
            (1.0, 1.0, 1.0)
        );
        // one class split over two leaves: one-to-one matching covers half
        assert_eq!(metric_bruteforce(&t, &a, &[0, 0, 0, 0]).unwrap(), (1.0, 1.0, 0.5));
        assert_eq!(metric_bruteforce(&t, &a, &[0, 0, 1, 1]).unwrap(), (1.0, 1.0, 1.0));
        assert_eq!(
            metric_bruteforce(&t, &a, &[0, 1, 2, 3]),
            Err(MetricsError::NoSameClassPairs)
        );
    }

    #[test]
    fn six_point_golden_values() {
        // leaves 3,4 under node 1; leaf 2 alone. Leaf 4 is impure.
        let t = TreeTopology::new_root_tree(3).grow_at(NodeId(1)).unwrap();
        let a = [NodeId(3), NodeId(3), NodeId(4), NodeId(4), NodeId(2), NodeId(2)];
        let y = [0, 0, 0, 1, 1, 1];
        let (dp, lp, acc) = metric_bruteforce(&t, &a, &y).unwrap();
        // pairs of class 0: (0,1) leaf 3 -> 1; (0,2),(1,2) under node 1 -> 3/4.
        // pairs of class 1: (4,5) leaf 2 -> 1; (3,4),(3,5) at the root -> 3/6.
        let want = (1.0 + 0.75 + 0.75 + 1.0 + 0.5 + 0.5) / 6.0;
        assert!((dp - want).abs() < 1e-15);
        assert!((lp - 5.0 / 6.0).abs() < 1e-15);
        // three leaves, two classes: one leaf stays unmatched
        assert!((acc - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn nmi_hand_cases() {
        assert_eq!(nmi_bruteforce(&[0, 0, 1, 1], &[0, 1, 0, 1]), 0.0);
        assert!((nmi_bruteforce(&[3, 3, 1, 1], &[0, 0, 1, 1]) - 1.0).abs() < 1e-15);
        assert_eq!(nmi_bruteforce(&[0, 0, 0, 0], &[0, 0, 1, 1]), 0.0);
    }
}
