//! Loss assembly: path-weighted reconstruction, the three factorized KL
//! terms, KL annealing and the contrastive terms.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Var};
use crate::error::ObjectiveError;
use crate::inference::{Scope, TreeForward};
use crate::model::{LikelihoodKind, TreeModel};
use crate::topology::NodeId;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveSettings {
    pub weight: f64,
    pub tau_embed: f64,
    pub tau_router: f64,
}

impl Default for ContrastiveSettings {
    fn default() -> Self {
        Self {
            weight: 100.0,
            tau_embed: 0.5,
            tau_router: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub likelihood: LikelihoodKind,
    pub beta: f64,
    /// Rows `0..N` and `N..2N` of the batch are two views of the same samples.
    pub contrastive: Option<ContrastiveSettings>,
}

/// Scalar loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ElboTerms {
    pub rec: f64,
    pub kl_root: f64,
    pub kl_nodes: f64,
    pub kl_decisions: f64,
    pub contrastive_embed: f64,
    pub contrastive_router: f64,
    pub beta: f64,
    pub contrastive_weight: f64,
    pub total: f64,
}

impl ElboTerms {
    /// `rec + KL_root + KL_nodes + KL_decisions`, independent of annealing.
    pub fn negative_elbo(&self) -> f64 {
        self.rec + self.kl_root + self.kl_nodes + self.kl_decisions
    }
}

/// Assemble `total` from the components.
pub fn total_loss(terms: &ElboTerms) -> f64 {
    terms.rec
        + terms.beta * (terms.kl_root + terms.kl_nodes + terms.kl_decisions)
        + terms.contrastive_weight * (terms.contrastive_embed + terms.contrastive_router)
}

/// `min(1, rate * epoch + offset)`.
pub fn anneal_beta(epoch: usize, rate: f64, offset: f64) -> f64 {
    (rate * epoch as f64 + offset).clamp(0.0, 1.0)
}

/// Tape handles of the loss components.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub rec: Var,
    pub kl_root: Var,
    pub kl_nodes: Var,
    pub kl_decisions: Var,
    pub contrastive_embed: Var,
    pub contrastive_router: Var,
    pub total: Var,
    pub beta: f64,
    pub contrastive_weight: f64,
}

impl LossVars {
    pub fn terms<F: Real>(&self, tape: &Tape<F>) -> ElboTerms {
        let s = |v: Var| tape.scalar(v).f64();
        ElboTerms {
            rec: s(self.rec),
            kl_root: s(self.kl_root),
            kl_nodes: s(self.kl_nodes),
            kl_decisions: s(self.kl_decisions),
            contrastive_embed: s(self.contrastive_embed),
            contrastive_router: s(self.contrastive_router),
            beta: self.beta,
            contrastive_weight: self.contrastive_weight,
            total: s(self.total),
        }
    }
}

fn sum_vars<F: Real>(tape: &mut Tape<F>, parts: &[Var]) -> Var {
    match parts.split_first() {
        None => tape.constant_scalar(F::zero()),
        Some((&first, rest)) => rest.iter().fold(first, |acc, &v| tape.add(acc, v)),
    }
}

/// Per-row negative log-likelihood (`rows x 1`), summed over data dimensions.
pub fn nll_rows<F: Real>(tape: &mut Tape<F>, kind: LikelihoodKind, x: Var, out: Var) -> Var {
    match kind {
        LikelihoodKind::Bernoulli => {
            let sp = tape.softplus(out);
            let xl = tape.mul(x, out);
            let e = tape.sub(sp, xl);
            tape.sum_cols(e)
        }
        LikelihoodKind::Gaussian => {
            let d = tape.sub(x, out);
            let sq = tape.square(d);
            let half = tape.scale(sq, F::c(0.5));
            let s = tape.sum_cols(half);
            let dims = tape.shape(x).1 as f64;
            tape.add_scalar(s, F::c(HALF_LN_2PI * dims))
        }
    }
}

/// Per-row `KL(N(q_mu, q_var) || N(p_mu, p_var))` summed over dimensions.
pub fn gaussian_kl_rows<F: Real>(tape: &mut Tape<F>, q_mu: Var, q_var: Var, p_mu: Var, p_var: Var) -> Var {
    let lp = tape.ln(p_var);
    let lq = tape.ln(q_var);
    let log_ratio = tape.sub(lp, lq);
    let diff = tape.sub(q_mu, p_mu);
    let sq = tape.square(diff);
    let num = tape.add(q_var, sq);
    let frac = tape.div(num, p_var);
    let s = tape.add(log_ratio, frac);
    let s = tape.add_scalar(s, -F::one());
    let s = tape.scale(s, F::c(0.5));
    tape.sum_cols(s)
}

/// Per-row `KL(N(mu, var) || N(0, I))` summed over dimensions.
pub fn standard_kl_rows<F: Real>(tape: &mut Tape<F>, mu: Var, var: Var) -> Var {
    let m2 = tape.square(mu);
    let lv = tape.ln(var);
    let a = tape.add(var, m2);
    let b = tape.sub(a, lv);
    let c = tape.add_scalar(b, -F::one());
    let h = tape.scale(c, F::c(0.5));
    tape.sum_cols(h)
}

/// Per-row NT-Xent losses (`2N x 1`); row `i` and row `(i + N) mod 2N` form a positive pair.
pub fn nt_xent_rows<F: Real>(tape: &mut Tape<F>, v: Var, tau: f64) -> Result<Var, ObjectiveError> {
    let rows = tape.shape(v).0;
    if !rows.is_multiple_of(2) || rows / 2 < 2 {
        return Err(ObjectiveError::DegenerateBatch(rows / 2));
    }
    let n = rows / 2;
    let sq = tape.square(v);
    let ss = tape.sum_cols(sq);
    let norm = tape.sqrt(ss);
    let norm = tape.clamp(norm, F::c(1e-12), F::max_value());
    let u = tape.div(v, norm);
    let ut = tape.transpose(u);
    let sim = tape.matmul(u, ut);
    let s = tape.scale(sim, F::c(1.0 / tau));
    let e = tape.exp(s);
    let off_diag = tape.constant(Array2::from_shape_fn((rows, rows), |(i, j)| {
        if i == j {
            F::zero()
        } else {
            F::one()
        }
    }));
    let positive = tape.constant(Array2::from_shape_fn((rows, rows), |(i, j)| {
        if j == (i + n) % rows {
            F::one()
        } else {
            F::zero()
        }
    }));
    let masked = tape.mul(e, off_diag);
    let den = tape.sum_cols(masked);
    let log_den = tape.ln(den);
    let sp = tape.mul(s, positive);
    let pos = tape.sum_cols(sp);
    Ok(tape.sub(log_den, pos))
}

/// Mean NT-Xent over all `2N` rows.
pub fn nt_xent_var<F: Real>(tape: &mut Tape<F>, v: Var, tau: f64) -> Result<Var, ObjectiveError> {
    let rows = nt_xent_rows(tape, v, tau)?;
    Ok(tape.mean_all(rows))
}

/// NT-Xent of a `2N x k` matrix of projections.
pub fn nt_xent(projections: &Array2<f64>, tau: f64) -> Result<f64, ObjectiveError> {
    let mut tape = Tape::new();
    let v = tape.constant(projections.clone());
    let l = nt_xent_var(&mut tape, v, tau)?;
    Ok(tape.scalar(l))
}

/// Weighted NT-Xent on the router outputs of one node. `router` and `reach`
/// are `2N x 1`; pair weights are `min(reach_i, reach_pair(i))` and are not
/// differentiated. Returns `None` when every weight is zero.
pub fn router_contrastive_node<F: Real>(
    tape: &mut Tape<F>,
    router: Var,
    reach: &[F],
    tau: f64,
) -> Result<Option<Var>, ObjectiveError> {
    let rows = reach.len();
    let n = rows / 2;
    let w: Vec<F> = (0..rows).map(|i| reach[i].min(reach[(i + n) % rows])).collect();
    let total: F = w.iter().fold(F::zero(), |a, &b| a + b);
    let other = tape.rsub_scalar(F::one(), router);
    let v = tape.concat_cols(&[router, other]);
    let losses = nt_xent_rows(tape, v, tau)?;
    if total <= F::zero() {
        return Ok(None);
    }
    let wv = tape.constant(Array2::from_shape_vec((rows, 1), w).expect("column"));
    let weighted = tape.mul(losses, wv);
    let s = tape.sum_all(weighted);
    Ok(Some(tape.scale(s, total.recip())))
}

/// Plain router contrastive value summed over nodes. Each entry holds the
/// node's router outputs and reach probabilities over the `2N` rows.
pub fn router_contrastive(nodes: &[(Vec<f64>, Vec<f64>)], tau: f64) -> Result<f64, ObjectiveError> {
    let mut tape = Tape::new();
    let mut parts = Vec::new();
    for (router, reach) in nodes {
        let r = tape.constant(Array2::from_shape_vec((router.len(), 1), router.clone()).expect("column"));
        if let Some(v) = router_contrastive_node(&mut tape, r, reach, tau)? {
            parts.push(v);
        }
    }
    let s = sum_vars(&mut tape, &parts);
    Ok(tape.scalar(s))
}

/// `KL(N(mu, var) || N(0, I))` averaged over rows.
pub fn kl_root_term(mu: &Array2<f64>, var: &Array2<f64>) -> f64 {
    let mut tape = Tape::new();
    let m = tape.constant(mu.clone());
    let v = tape.constant(var.clone());
    let rows = standard_kl_rows(&mut tape, m, v);
    let mean = tape.mean_all(rows);
    tape.scalar(mean)
}

/// Nodes entering each term under a scope: `(kl_nodes, kl_decisions, leaves, root)`.
fn term_nodes<F: Real>(model: &TreeModel<F>, fwd: &TreeForward<F>) -> (Vec<NodeId>, Vec<NodeId>, Vec<NodeId>, bool) {
    let t = &model.topology;
    match fwd.scope {
        Scope::Full => {
            let non_root = t.nodes().filter(|&n| n != t.root()).collect();
            (non_root, t.internal_nodes(), t.leaves(), true)
        }
        Scope::Subtree(parent) => {
            let (l, r) = t.children(parent).expect("subtree scope on an internal node");
            let leaves = [l, r].into_iter().filter(|&c| t.is_leaf(c)).collect();
            (vec![l, r], vec![parent], leaves, false)
        }
    }
}

/// Record the loss of a forward pass. Under [`Scope::Subtree`] only the terms
/// that depend on the subtree's own functions are included; the others are
/// constant with respect to the trainable parameters.
pub fn loss<F: Real>(
    model: &TreeModel<F>,
    tape: &mut Tape<F>,
    fwd: &mut TreeForward<F>,
    settings: &LossSettings,
) -> Result<LossVars, ObjectiveError> {
    let (kl_set, dec_set, leaf_set, with_root) = term_nodes(model, fwd);
    let inv_rows = F::c(1.0 / fwd.rows() as f64);
    let mean = |tape: &mut Tape<F>, parts: &[Var]| {
        let s = sum_vars(tape, parts);
        let s = tape.sum_all(s);
        tape.scale(s, inv_rows)
    };

    let mut rec_parts = Vec::new();
    for l in &leaf_set {
        let n = &fwd.nodes[l];
        let nll = nll_rows(tape, settings.likelihood, fwd.x_tiled, n.decoded.expect("leaf"));
        rec_parts.push(tape.mul(n.reach_tiled, nll));
    }
    let rec = mean(tape, &rec_parts);

    let kl_root = if with_root {
        let r = &fwd.nodes[&model.topology.root()];
        let k = standard_kl_rows(tape, r.q_mu, r.q_var);
        mean(tape, &[k])
    } else {
        tape.constant_scalar(F::zero())
    };

    let mut node_parts = Vec::new();
    for i in &kl_set {
        let n = &fwd.nodes[i];
        let k = gaussian_kl_rows(
            tape,
            n.q_mu,
            n.q_var,
            n.p_mu.expect("non-root"),
            n.p_var.expect("non-root"),
        );
        node_parts.push(tape.mul(n.reach_tiled, k));
    }
    let kl_nodes = mean(tape, &node_parts);

    let mut dec_parts = Vec::new();
    for i in &dec_set {
        let n = &fwd.nodes[i];
        let k = tape.bernoulli_kl(n.router_q_tiled.expect("internal"), n.router_p.expect("internal"));
        dec_parts.push(tape.mul(n.reach_tiled, k));
    }
    let kl_decisions = mean(tape, &dec_parts);

    let (contrastive_embed, contrastive_router, weight) = match settings.contrastive {
        None => {
            let z = tape.constant_scalar(F::zero());
            (z, z, 0.0)
        }
        Some(c) => {
            let (embed, router) = contrastive_terms(model, tape, fwd, &dec_set, &c)?;
            (embed, router, c.weight)
        }
    };

    let kl = sum_vars(tape, &[kl_root, kl_nodes, kl_decisions]);
    let kl = tape.scale(kl, F::c(settings.beta));
    let con = tape.add(contrastive_embed, contrastive_router);
    let con = tape.scale(con, F::c(weight));
    let total = sum_vars(tape, &[rec, kl, con]);
    Ok(LossVars {
        rec,
        kl_root,
        kl_nodes,
        kl_decisions,
        contrastive_embed,
        contrastive_router,
        total,
        beta: settings.beta,
        contrastive_weight: weight,
    })
}

fn contrastive_terms<F: Real>(
    model: &TreeModel<F>,
    tape: &mut Tape<F>,
    fwd: &mut TreeForward<F>,
    routers: &[NodeId],
    c: &ContrastiveSettings,
) -> Result<(Var, Var), ObjectiveError> {
    if !fwd.batch.is_multiple_of(2) || fwd.batch < 4 {
        return Err(ObjectiveError::DegenerateBatch(fwd.batch / 2));
    }
    let embed = if fwd.scope == Scope::Full && !model.projections.is_empty() {
        let mut parts = Vec::new();
        for (h, proj) in model.projections.iter().enumerate() {
            let p = proj.forward(tape, &mut fwd.ctx, &format!("projection.{h}"), fwd.d[h]);
            parts.push(nt_xent_var(tape, p, c.tau_embed)?);
        }
        let s = sum_vars(tape, &parts);
        tape.scale(s, F::c(1.0 / model.arch.max_depth as f64))
    } else {
        tape.constant_scalar(F::zero())
    };
    let mut parts = Vec::new();
    for i in routers {
        let n = &fwd.nodes[i];
        let reach: Vec<F> = tape.value(n.reach).iter().copied().collect();
        if let Some(v) = router_contrastive_node(tape, n.router_q.expect("internal"), &reach, c.tau_router)? {
            parts.push(v);
        }
    }
    let router = sum_vars(tape, &parts);
    Ok((embed, router))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn kl_root_examples() {
        assert_eq!(kl_root_term(&array![[0.0, 0.0]], &array![[1.0, 1.0]]), 0.0);
        assert!((kl_root_term(&array![[1.0]], &array![[1.0]]) - 0.5).abs() < 1e-15);
        let e = std::f64::consts::E;
        assert!((kl_root_term(&array![[0.0]], &array![[e]]) - 0.5 * (e - 2.0)).abs() < 1e-15);
        assert!((0.5f64 * (e - 2.0) - 0.3591).abs() < 1e-4);
    }

    #[test]
    fn gaussian_kl_single_child() {
        let mut tape = Tape::<f64>::new();
        let q_mu = tape.constant(array![[1.0]]);
        let one = tape.constant(array![[1.0]]);
        let zero = tape.constant(array![[0.0]]);
        let k = gaussian_kl_rows(&mut tape, q_mu, one, zero, one);
        assert!((tape.scalar(k) - 0.5).abs() < 1e-15);
        let k = gaussian_kl_rows(&mut tape, q_mu, one, q_mu, one);
        assert_eq!(tape.scalar(k), 0.0);
    }

    #[test]
    fn nt_xent_uniform_similarity() {
        for n in 2..6 {
            let v = Array2::from_elem((2 * n, 3), 0.7);
            let got = nt_xent(&v, 0.5).unwrap();
            assert!((got - ((2 * n - 1) as f64).ln()).abs() < 1e-12);
        }
        assert!((nt_xent(&Array2::ones((4, 2)), 1.0).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nt_xent_orthogonal_negatives() {
        let v = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        let got = nt_xent(&v, 0.5).unwrap();
        let e2 = 2f64.exp();
        assert!((got + (e2 / (e2 + 2.0)).ln()).abs() < 1e-12);
        assert!((got - 0.2395).abs() < 1e-4);
    }

    #[test]
    fn nt_xent_row_scaling_and_degenerate() {
        let v = array![[1.0, 2.0], [0.5, -1.0], [3.0, 1.0], [0.2, 0.1]];
        let mut w = v.clone();
        w.row_mut(2).mapv_inplace(|x| x * 7.5);
        assert!((nt_xent(&v, 0.5).unwrap() - nt_xent(&w, 0.5).unwrap()).abs() < 1e-12);
        assert_eq!(
            nt_xent(&array![[1.0], [2.0]], 0.5),
            Err(ObjectiveError::DegenerateBatch(1))
        );
    }

    #[test]
    fn router_contrastive_reduces_to_nt_xent_with_uniform_reach() {
        let p = vec![0.2, 0.9, 0.2, 0.9];
        let reach = vec![0.5; 4];
        let got = router_contrastive(&[(p.clone(), reach)], 1.0).unwrap();
        let v = Array2::from_shape_fn((4, 2), |(i, j)| if j == 0 { p[i] } else { 1.0 - p[i] });
        assert!((got - nt_xent(&v, 1.0).unwrap()).abs() < 1e-12);
        assert_eq!(router_contrastive(&[(p, vec![0.0; 4])], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn anneal_and_total() {
        assert_eq!(anneal_beta(0, 0.01, 0.0), 0.0);
        assert_eq!(anneal_beta(100, 0.01, 0.0), 1.0);
        assert!((anneal_beta(150, 0.001, 0.0) - 0.15).abs() < 1e-15);
        assert_eq!(anneal_beta(1000, 0.01, 0.0), 1.0);
        let t = ElboTerms {
            rec: 3.0,
            kl_root: 1.0,
            kl_nodes: 2.0,
            kl_decisions: 0.5,
            contrastive_embed: 0.25,
            contrastive_router: 0.5,
            beta: 0.0,
            contrastive_weight: 0.0,
            total: 0.0,
        };
        assert_eq!(total_loss(&t), 3.0);
        let t1 = ElboTerms { beta: 1.0, ..t };
        assert_eq!(total_loss(&t1), t1.negative_elbo());
        let t2 = ElboTerms {
            beta: 1.0,
            contrastive_weight: 100.0,
            ..t
        };
        assert!((total_loss(&t2) - t2.negative_elbo() - 75.0).abs() < 1e-12);
    }
}
