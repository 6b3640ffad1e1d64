//! Dense layers and small multilayer perceptrons with two forward paths: one
//! recording onto an autodiff [`Tape`] and one on plain arrays.

use ndarray::{Array2, Axis};
use rand::Rng;

use crate::autodiff::{sigmoid, softplus, BatchStats, Real, Tape, Var};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Trainable modules normalize with batch statistics.
    Train,
    /// Every module normalizes with its running statistics.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    LeakyRelu,
    Sigmoid,
    Softplus,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<F> {
    /// `x W + b` with `W: in x out`, `b: 1 x out`.
    Linear {
        w: Array2<F>,
        b: Option<Array2<F>>,
    },
    BatchNorm {
        gamma: Array2<F>,
        beta: Array2<F>,
        running_mean: Array2<F>,
        running_var: Array2<F>,
    },
    Act(Activation),
}

/// Bookkeeping shared by every module during one tape forward pass.
#[derive(Debug)]
pub struct ForwardCtx<F: Real> {
    pub mode: Mode,
    /// Trainable parameters bound on the tape, by fully qualified name.
    pub bindings: Vec<(String, Var)>,
    /// Batch statistics observed by training-mode batch norms, by layer prefix.
    pub bn_stats: Vec<(String, BatchStats<F>)>,
}

impl<F: Real> ForwardCtx<F> {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            bindings: Vec::new(),
            bn_stats: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F> {
    pub layers: Vec<Layer<F>>,
    pub trainable: bool,
}

fn uniform<F: Real>(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || F::c(rng.gen_range(-bound..bound)))
}

fn linear_layer<F: Real>(input: usize, output: usize, bias: bool, rng: &mut impl Rng) -> Layer<F> {
    let bound = 1.0 / (input as f64).sqrt();
    let w = uniform(input, output, bound, rng);
    let b = bias.then(|| uniform(1, output, bound, rng));
    Layer::Linear { w, b }
}

fn batch_norm_layer<F: Real>(dim: usize) -> Layer<F> {
    Layer::BatchNorm {
        gamma: Array2::ones((1, dim)),
        beta: Array2::zeros((1, dim)),
        running_mean: Array2::zeros((1, dim)),
        running_var: Array2::ones((1, dim)),
    }
}

impl<F: Real> Mlp<F> {
    /// Hidden blocks `Linear -> BatchNorm -> LeakyReLU` through `dims`.
    pub fn blocks(dims: &[usize], rng: &mut impl Rng) -> Self {
        let mut layers = Vec::new();
        for pair in dims.windows(2) {
            layers.push(linear_layer(pair[0], pair[1], false, rng));
            layers.push(batch_norm_layer(pair[1]));
            layers.push(Layer::Act(Activation::LeakyRelu));
        }
        Self {
            layers,
            trainable: true,
        }
    }

    /// Hidden blocks through `dims`, then a biased linear map to `output`.
    pub fn blocks_then_linear(dims: &[usize], output: usize, act: Option<Activation>, rng: &mut impl Rng) -> Self {
        let mut mlp = Self::blocks(dims, rng);
        let last = *dims.last().expect("at least an input dimension");
        mlp.layers.push(linear_layer(last, output, true, rng));
        if let Some(a) = act {
            mlp.layers.push(Layer::Act(a));
        }
        mlp
    }

    pub fn linear(input: usize, output: usize, act: Option<Activation>, rng: &mut impl Rng) -> Self {
        Self::blocks_then_linear(&[input], output, act, rng)
    }

    pub fn input_dim(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| match l {
                Layer::Linear { w, .. } => Some(w.nrows()),
                _ => None,
            })
            .expect("mlp without linear layer")
    }

    pub fn output_dim(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Linear { w, .. } => Some(w.ncols()),
                _ => None,
            })
            .expect("mlp without linear layer")
    }

    fn uses_batch_stats(&self, mode: Mode) -> bool {
        mode == Mode::Train && self.trainable
    }

    /// Record the forward pass on `tape`. Parameters are tape leaves that
    /// track gradients only when the module is trainable.
    pub fn forward(&self, tape: &mut Tape<F>, ctx: &mut ForwardCtx<F>, name: &str, x: Var) -> Var {
        let batch_stats = self.uses_batch_stats(ctx.mode);
        let bind = |tape: &mut Tape<F>, ctx: &mut ForwardCtx<F>, key: String, v: &Array2<F>| {
            let var = tape.leaf(v.clone(), self.trainable);
            if self.trainable {
                ctx.bindings.push((key, var));
            }
            var
        };
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::Linear { w, b } => {
                    let wv = bind(tape, ctx, format!("{name}.l{i}.w"), w);
                    let out = tape.matmul(h, wv);
                    match b {
                        Some(b) => {
                            let bv = bind(tape, ctx, format!("{name}.l{i}.b"), b);
                            tape.add(out, bv)
                        }
                        None => out,
                    }
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    let g = bind(tape, ctx, format!("{name}.l{i}.gamma"), gamma);
                    let b = bind(tape, ctx, format!("{name}.l{i}.beta"), beta);
                    if batch_stats {
                        let (out, stats) = tape.batch_norm(h, g, b, F::c(BN_EPS));
                        ctx.bn_stats.push((format!("{name}.l{i}"), stats));
                        out
                    } else {
                        let mean = tape.constant(running_mean.clone());
                        let inv_std = tape.constant(running_var.mapv(|v| (v + F::c(BN_EPS)).sqrt().recip()));
                        let centered = tape.sub(h, mean);
                        let normed = tape.mul(centered, inv_std);
                        let scaled = tape.mul(normed, g);
                        tape.add(scaled, b)
                    }
                }
                Layer::Act(Activation::LeakyRelu) => tape.leaky_relu(h, F::c(LEAKY_SLOPE)),
                Layer::Act(Activation::Sigmoid) => tape.sigmoid(h),
                Layer::Act(Activation::Softplus) => tape.softplus(h),
            };
        }
        h
    }

    /// Plain forward pass. Uses batch statistics exactly when the tape
    /// forward would (`Train` mode on a trainable module).
    pub fn apply(&self, x: &Array2<F>, mode: Mode) -> Array2<F> {
        let batch_stats = self.uses_batch_stats(mode);
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Linear { w, b } => {
                    let mut out = h.dot(w);
                    if let Some(b) = b {
                        out += b;
                    }
                    out
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    let eps = F::c(BN_EPS);
                    let (mean, var) = if batch_stats {
                        let n = F::c(h.nrows() as f64);
                        let mean = h.sum_axis(Axis(0)).insert_axis(Axis(0)) / n;
                        let var = (&h - &mean).mapv(|c| c * c).sum_axis(Axis(0)).insert_axis(Axis(0)) / n;
                        (mean, var)
                    } else {
                        (running_mean.clone(), running_var.clone())
                    };
                    let normed = (&h - &mean) / &var.mapv(|v| (v + eps).sqrt());
                    normed * gamma + beta
                }
                Layer::Act(Activation::LeakyRelu) => {
                    let slope = F::c(LEAKY_SLOPE);
                    h.mapv(|v| if v > F::zero() { v } else { v * slope })
                }
                Layer::Act(Activation::Sigmoid) => h.mapv(sigmoid),
                Layer::Act(Activation::Softplus) => h.mapv(softplus),
            };
        }
        h
    }

    /// Trainable tensors with their layer-local names.
    pub fn params(&self) -> Vec<(String, &Array2<F>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Linear { w, b } => {
                    out.push((format!("l{i}.w"), w));
                    if let Some(b) = b {
                        out.push((format!("l{i}.b"), b));
                    }
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    out.push((format!("l{i}.gamma"), gamma));
                    out.push((format!("l{i}.beta"), beta));
                }
                Layer::Act(_) => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Array2<F>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Linear { w, b } => {
                    out.push((format!("l{i}.w"), w));
                    if let Some(b) = b {
                        out.push((format!("l{i}.b"), b));
                    }
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    out.push((format!("l{i}.gamma"), gamma));
                    out.push((format!("l{i}.beta"), beta));
                }
                Layer::Act(_) => {}
            }
        }
        out
    }

    /// Running statistics (not trained by gradient descent).
    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Array2<F>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let Layer::BatchNorm {
                running_mean,
                running_var,
                ..
            } = layer
            {
                out.push((format!("l{i}.running_mean"), running_mean));
                out.push((format!("l{i}.running_var"), running_var));
            }
        }
        out
    }

    pub fn buffers(&self) -> Vec<(String, &Array2<F>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::BatchNorm {
                running_mean,
                running_var,
                ..
            } = layer
            {
                out.push((format!("l{i}.running_mean"), running_mean));
                out.push((format!("l{i}.running_var"), running_var));
            }
        }
        out
    }

    /// Fold observed batch statistics into the running estimates of layer `index`.
    pub fn update_running_stats(&mut self, index: usize, stats: &BatchStats<F>) {
        let rows = stats.rows;
        let Some(Layer::BatchNorm {
            running_mean,
            running_var,
            ..
        }) = self.layers.get_mut(index)
        else {
            panic!("layer {index} is not a batch norm");
        };
        let m = F::c(BN_MOMENTUM);
        let keep = F::one() - m;
        // running variance tracks the unbiased estimate
        let correction = if rows > 1 {
            F::c(rows as f64 / (rows as f64 - 1.0))
        } else {
            F::one()
        };
        for (j, (rm, rv)) in running_mean.iter_mut().zip(running_var.iter_mut()).enumerate() {
            *rm = keep * *rm + m * stats.mean[j];
            *rv = keep * *rv + m * stats.var[j] * correction;
        }
    }
}

/// A map producing Gaussian parameters `(mean, variance)`, optionally after a
/// shared hidden trunk. Variances come from a softplus and are strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMap<F> {
    pub trunk: Option<Mlp<F>>,
    pub mean: Mlp<F>,
    pub var: Mlp<F>,
}

impl<F: Real> GaussianMap<F> {
    /// Heads directly on the input (likelihood contributions of the bottom-up pass).
    pub fn heads(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            trunk: None,
            mean: Mlp::linear(input, output, None, rng),
            var: Mlp::linear(input, output, Some(Activation::Softplus), rng),
        }
    }

    /// One hidden block, then the two heads (top-down transformations).
    pub fn with_hidden(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            trunk: Some(Mlp::blocks(&[input, hidden], rng)),
            mean: Mlp::linear(hidden, output, None, rng),
            var: Mlp::linear(hidden, output, Some(Activation::Softplus), rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.trunk {
            Some(t) => t.input_dim(),
            None => self.mean.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.mean.output_dim()
    }

    pub fn forward(&self, tape: &mut Tape<F>, ctx: &mut ForwardCtx<F>, name: &str, x: Var) -> (Var, Var) {
        let h = match &self.trunk {
            Some(t) => t.forward(tape, ctx, &format!("{name}.trunk"), x),
            None => x,
        };
        let mu = self.mean.forward(tape, ctx, &format!("{name}.mean"), h);
        let var = self.var.forward(tape, ctx, &format!("{name}.var"), h);
        (mu, var)
    }

    pub fn apply(&self, x: &Array2<F>, mode: Mode) -> (Array2<F>, Array2<F>) {
        let h = match &self.trunk {
            Some(t) => t.apply(x, mode),
            None => x.clone(),
        };
        (self.mean.apply(&h, mode), self.var.apply(&h, mode))
    }

    pub fn modules(&self) -> Vec<(&'static str, &Mlp<F>)> {
        let mut out = Vec::with_capacity(3);
        if let Some(t) = &self.trunk {
            out.push(("trunk", t));
        }
        out.push(("mean", &self.mean));
        out.push(("var", &self.var));
        out
    }

    pub fn modules_mut(&mut self) -> Vec<(&'static str, &mut Mlp<F>)> {
        let mut out = Vec::with_capacity(3);
        if let Some(t) = &mut self.trunk {
            out.push(("trunk", t));
        }
        out.push(("mean", &mut self.mean));
        out.push(("var", &mut self.var));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-10.0..10.0))
    }

    #[test]
    fn tape_and_plain_forward_agree_in_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mlp: Mlp<f64> = Mlp::blocks_then_linear(&[5, 7, 6], 3, Some(Activation::Sigmoid), &mut rng);
        // non-trivial running statistics
        for (_, b) in mlp.buffers_mut() {
            b.mapv_inplace(|v| v * 0.5 + 0.3);
        }
        let x = random_input(9, 5, 1);
        for mode in [Mode::Train, Mode::Eval] {
            let mut tape = Tape::new();
            let mut ctx = ForwardCtx::new(mode);
            let xv = tape.constant(x.clone());
            let out = mlp.forward(&mut tape, &mut ctx, "m", xv);
            let plain = mlp.apply(&x, mode);
            let diff = (tape.value(out) - &plain)
                .mapv(f64::abs)
                .fold(0.0_f64, |a, b| a.max(*b));
            assert!(diff < 1e-12, "{mode:?}: {diff}");
            assert_eq!(ctx.bn_stats.len(), if mode == Mode::Train { 2 } else { 0 });
        }
    }

    #[test]
    fn variance_heads_are_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let map: GaussianMap<f64> = GaussianMap::with_hidden(4, 16, 3, &mut rng);
        let x = random_input(64, 4, 2);
        for mode in [Mode::Train, Mode::Eval] {
            let (_, var) = map.apply(&x, mode);
            assert!(var.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn eval_mode_is_row_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mlp: Mlp<f64> = Mlp::blocks_then_linear(&[4, 8], 2, None, &mut rng);
        let x = random_input(32, 4, 4);
        let full = mlp.apply(&x, Mode::Eval);
        let single = mlp.apply(&x.slice(ndarray::s![7..8, ..]).to_owned(), Mode::Eval);
        assert_eq!(full.row(7), single.row(0));
    }

    #[test]
    fn frozen_modules_bind_nothing_and_use_running_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut mlp: Mlp<f64> = Mlp::blocks(&[3, 4], &mut rng);
        mlp.trainable = false;
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(Mode::Train);
        let x = tape.constant(random_input(5, 3, 6));
        mlp.forward(&mut tape, &mut ctx, "m", x);
        assert!(ctx.bindings.is_empty());
        assert!(ctx.bn_stats.is_empty());
    }
}
