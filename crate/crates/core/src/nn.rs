//! Dense feedforward network engine.
//!
//! `DenseNet` is a plain multilayer perceptron: affine layers with ReLU on
//! every hidden layer and a linear output layer. It owns its parameters and
//! exposes exactly four operations: initialization, batched forward with an
//! activation cache, reverse-mode backward producing exact parameter
//! gradients, and an Adam update. Everything downstream (quantile heads,
//! losses, trainers) composes these.
//!
//! Conventions: inputs are row-major batches `(n, d_in)`; weights of layer
//! `l` have shape `(dims[l+1], dims[l])`; gradients returned by `backward`
//! are summed over the batch, so any per-sample averaging must already be
//! folded into the supplied output gradients.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Domain};

/// Multilayer perceptron with ReLU hidden activations and linear output.
#[derive(Debug, Clone)]
pub struct DenseNet {
    dims: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Per-layer activations saved by `forward` for use in `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    /// Pre-activations z_l per layer, shape (n, dims[l+1]).
    pre: Vec<Array2<f64>>,
    /// Post-activations a_l per layer; the last entry is the network output.
    post: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }

    /// Pre-activations of the clamped (hidden) layers only; the final
    /// layer is affine and has no kink to inspect.
    pub fn hidden_pre(&self) -> &[Array2<f64>] {
        &self.pre[..self.pre.len() - 1]
    }
}

/// Parameter gradients with the same shapes as the network's parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub d_weights: Vec<Array2<f64>>,
    pub d_biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Gradients {
            d_weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            d_biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    /// Flat read in the same order as `DenseNet::get_param`. Indexes
    /// logically (row-major) rather than through the backing slice: the
    /// matmul in `backward` is free to hand back transposed-layout arrays.
    pub fn get(&self, mut idx: usize) -> f64 {
        for (dw, db) in self.d_weights.iter().zip(&self.d_biases) {
            if idx < dw.len() {
                let cols = dw.ncols();
                return dw[[idx / cols, idx % cols]];
            }
            idx -= dw.len();
            if idx < db.len() {
                return db[idx];
            }
            idx -= db.len();
        }
        panic!("gradient index out of range");
    }
}

fn check_finite_2d(name: &str, a: ArrayView2<f64>) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{name} contains NaN or infinity")))
    }
}

impl DenseNet {
    /// Initializes a network with uniform Glorot weights and zero biases.
    /// Weight entries are drawn from U(-a, a) with a = sqrt(6/(fan_in+fan_out)),
    /// layer by layer in order, from the init stream of `seed`.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least input and output dims, got {layer_dims:?}"
            )));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "zero-width layer in {layer_dims:?}"
            )));
        }
        let mut rng = rng::substream(seed, Domain::Init, 0);
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-a..a));
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        Ok(DenseNet { dims: layer_dims.to_vec(), weights, biases })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("at least two dims")
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Flat parameter read, ordered (W_0 row-major, b_0, W_1, b_1, ...).
    pub fn get_param(&self, mut idx: usize) -> f64 {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            if idx < w.len() {
                return w.as_slice().expect("contiguous")[idx];
            }
            idx -= w.len();
            if idx < b.len() {
                return b[idx];
            }
            idx -= b.len();
        }
        panic!("parameter index out of range");
    }

    /// Flat parameter write; see `get_param` for the ordering.
    pub fn set_param(&mut self, mut idx: usize, value: f64) {
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            if idx < w.len() {
                w.as_slice_mut().expect("contiguous")[idx] = value;
                return;
            }
            idx -= w.len();
            if idx < b.len() {
                b[idx] = value;
                return;
            }
            idx -= b.len();
        }
        panic!("parameter index out of range");
    }

    /// Batched forward pass returning the output and the activation cache
    /// needed by `backward`.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(x)?;
        let n_layers = self.weights.len();
        let mut pre = Vec::with_capacity(n_layers);
        let mut post = Vec::with_capacity(n_layers);
        let mut h = x.to_owned();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = h.dot(&w.t()) + b;
            let a = if l + 1 == n_layers {
                z.clone()
            } else {
                z.mapv(|v| v.max(0.0))
            };
            pre.push(z);
            post.push(a.clone());
            h = a;
        }
        let cache = ForwardCache { input: x.to_owned(), pre, post };
        Ok((h, cache))
    }

    /// Forward pass without building a cache, for prediction-only paths.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let n_layers = self.weights.len();
        let mut h = x.to_owned();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = h.dot(&w.t()) + b;
            if l + 1 != n_layers {
                z.mapv_inplace(|v| v.max(0.0));
            }
            h = z;
        }
        Ok(h)
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.dims[0] {
            return Err(Error::ShapeMismatch(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.dims[0]
            )));
        }
        check_finite_2d("network input", x)
    }

    /// Reverse-mode gradients of a scalar loss whose per-sample output
    /// gradients are `dl_doutput` (shape (n, d_out)). Returned gradients are
    /// summed over the batch. ReLU uses subgradient 0 at 0.
    pub fn backward(&self, cache: &ForwardCache, dl_doutput: ArrayView2<f64>) -> Result<Gradients> {
        let n_layers = self.weights.len();
        if cache.pre.len() != n_layers {
            return Err(Error::ShapeMismatch(format!(
                "cache has {} layers, network has {n_layers}",
                cache.pre.len()
            )));
        }
        if dl_doutput.nrows() != cache.batch_size() || dl_doutput.ncols() != self.output_dim() {
            return Err(Error::ShapeMismatch(format!(
                "output gradient is {}x{}, expected {}x{}",
                dl_doutput.nrows(),
                dl_doutput.ncols(),
                cache.batch_size(),
                self.output_dim()
            )));
        }
        check_finite_2d("output gradient", dl_doutput)?;

        let mut d_weights = vec![Array2::zeros((0, 0)); n_layers];
        let mut d_biases = vec![Array1::zeros(0); n_layers];
        let mut delta = dl_doutput.to_owned();
        for l in (0..n_layers).rev() {
            let a_prev = if l == 0 { &cache.input } else { &cache.post[l - 1] };
            d_weights[l] = delta.t().dot(a_prev);
            d_biases[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut da = delta.dot(&self.weights[l]);
                Zip::from(&mut da).and(&cache.pre[l - 1]).for_each(|d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = da;
            }
        }
        Ok(Gradients { d_weights, d_biases })
    }
}

/// Adam optimizer state: per-parameter moment accumulators plus step count.
#[derive(Debug, Clone)]
pub struct AdamState {
    m_w: Vec<Array2<f64>>,
    v_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_b: Vec<Array1<f64>>,
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(net: &DenseNet, lr: f64, beta1: f64, beta2: f64) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0,1), got {b}")));
            }
        }
        Ok(AdamState {
            m_w: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            v_w: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            m_b: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            v_b: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            step: 0,
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update of `net` in place from batch gradients.
    pub fn step(&mut self, net: &mut DenseNet, grads: &Gradients) -> Result<()> {
        if grads.d_weights.len() != net.weights.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradients cover {} layers, network has {}",
                grads.d_weights.len(),
                net.weights.len()
            )));
        }
        for dw in &grads.d_weights {
            check_finite_2d("weight gradient", dw.view())?;
        }
        for db in &grads.d_biases {
            if !db.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("bias gradient contains NaN or infinity".into()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for l in 0..net.weights.len() {
            if net.weights[l].raw_dim() != grads.d_weights[l].raw_dim() {
                return Err(Error::ShapeMismatch(format!("weight gradient shape differs at layer {l}")));
            }
            Zip::from(&mut net.weights[l])
                .and(&mut self.m_w[l])
                .and(&mut self.v_w[l])
                .and(&grads.d_weights[l])
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
            Zip::from(&mut net.biases[l])
                .and(&mut self.m_b[l])
                .and(&mut self.v_b[l])
                .and(&grads.d_biases[l])
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn param_count_matches_shape_formula() {
        let net = DenseNet::init(&[8, 256, 256, 256, 20], 1).unwrap();
        let expected = 8 * 256 + 256 + 2 * (256 * 256 + 256) + 256 * 20 + 20;
        assert_eq!(expected, 139_028);
        assert_eq!(net.param_count(), expected);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = DenseNet::init(&[3, 16, 4], 99).unwrap();
        let b = DenseNet::init(&[3, 16, 4], 99).unwrap();
        for i in 0..a.param_count() {
            assert_eq!(a.get_param(i).to_bits(), b.get_param(i).to_bits());
        }
        let c = DenseNet::init(&[3, 16, 4], 100).unwrap();
        let diffs = (0..a.param_count()).filter(|&i| a.get_param(i) != c.get_param(i)).count();
        assert!(diffs > 0, "different seeds should give different weights");

        for (l, (w, b)) in a.weights.iter().zip(&a.biases).enumerate() {
            let bound = (6.0 / (w.ncols() + w.nrows()) as f64).sqrt();
            assert!(w.iter().all(|v| v.abs() < bound), "layer {l} weight exceeds Glorot bound");
            assert!(b.iter().all(|&v| v == 0.0), "biases start at zero");
        }
    }

    #[test]
    fn init_rejects_degenerate_shapes() {
        assert!(DenseNet::init(&[4], 0).is_err());
        assert!(DenseNet::init(&[4, 0, 2], 0).is_err());
    }

    #[test]
    fn forward_affine_only_matches_hand_computation() {
        let mut net = DenseNet::init(&[2, 2], 0).unwrap();
        net.weights[0] = array![[1.0, 2.0], [3.0, -4.0]];
        net.biases[0] = array![0.5, -1.0];
        let x = array![[1.0, 1.0], [0.0, 2.0]];
        let (y, _) = net.forward(x.view()).unwrap();
        // Single linear layer: y = x W^T + b.
        assert_relative_eq!(y[[0, 0]], 3.5);
        assert_relative_eq!(y[[0, 1]], -2.0);
        assert_relative_eq!(y[[1, 0]], 4.5);
        assert_relative_eq!(y[[1, 1]], -9.0);
    }

    #[test]
    fn hidden_layers_clamp_negatives() {
        let mut net = DenseNet::init(&[1, 2, 1], 0).unwrap();
        net.weights[0] = array![[1.0], [-1.0]];
        net.biases[0] = array![0.0, 0.0];
        net.weights[1] = array![[1.0, 1.0]];
        net.biases[1] = array![0.0];
        let x = array![[3.0], [-5.0]];
        let (y, _) = net.forward(x.view()).unwrap();
        // relu(3) + relu(-3) = 3; relu(-5) + relu(5) = 5.
        assert_relative_eq!(y[[0, 0]], 3.0);
        assert_relative_eq!(y[[1, 0]], 5.0);
    }

    #[test]
    fn predict_agrees_with_forward() {
        let net = DenseNet::init(&[3, 8, 8, 2], 5).unwrap();
        let mut rng = crate::rng::substream(5, Domain::Eval, 0);
        let x = Array2::from_shape_fn((16, 3), |_| rng.random_range(-2.0..2.0));
        let (y1, _) = net.forward(x.view()).unwrap();
        let y2 = net.predict(x.view()).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let net = DenseNet::init(&[3, 4, 2], 0).unwrap();
        let wrong = Array2::<f64>::zeros((2, 5));
        assert!(matches!(net.forward(wrong.view()), Err(Error::ShapeMismatch(_))));
        let mut nan = Array2::<f64>::zeros((2, 3));
        nan[[1, 2]] = f64::NAN;
        assert!(matches!(net.forward(nan.view()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn backward_zero_output_gradient_gives_zero_gradients() {
        let net = DenseNet::init(&[3, 8, 4], 2).unwrap();
        let x = Array2::from_elem((5, 3), 0.3);
        let (_, cache) = net.forward(x.view()).unwrap();
        let zeros = Array2::zeros((5, 4));
        let g = net.backward(&cache, zeros.view()).unwrap();
        for dw in &g.d_weights {
            assert!(dw.iter().all(|&v| v == 0.0));
        }
        for db in &g.d_biases {
            assert!(db.iter().all(|&v| v == 0.0));
        }
    }

    /// Finite-difference oracle: for the linear functional L = sum_ij c_ij out_ij,
    /// backward's analytic gradient must match central differences in every
    /// parameter. Random continuous weights keep pre-activations away from
    /// the ReLU kink at the probed step sizes.
    #[test]
    fn backward_matches_finite_differences() {
        let net = DenseNet::init(&[3, 8, 5], 42).unwrap();
        let mut rng = crate::rng::substream(43, Domain::Eval, 0);
        let x = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let c = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));

        let (_, cache) = net.forward(x.view()).unwrap();
        let analytic = net.backward(&cache, c.view()).unwrap();

        let loss = |net: &DenseNet| -> f64 {
            let y = net.predict(x.view()).unwrap();
            (&y * &c).sum()
        };
        let mut worst = 0.0f64;
        for i in 0..net.param_count() {
            let theta = net.get_param(i);
            let h = 1e-6 * theta.abs().max(1.0);
            let mut plus = net.clone();
            plus.set_param(i, theta + h);
            let mut minus = net.clone();
            minus.set_param(i, theta - h);
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = analytic.get(i);
            // Floor keeps near-zero derivatives compared absolutely against
            // the FD noise floor rather than by ratio.
            let denom = an.abs().max(fd.abs()).max(1e-2);
            worst = worst.max((fd - an).abs() / denom);
        }
        assert!(worst < 1e-6, "worst relative FD mismatch {worst}");
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut net = DenseNet::init(&[2, 4, 1], 3).unwrap();
        let snapshot = net.clone();
        let mut adam = AdamState::new(&net, 1e-3, 0.9, 0.99).unwrap();
        let grads = Gradients::zeros_like(&net);
        adam.step(&mut net, &grads).unwrap();
        assert_eq!(adam.step_count(), 1);
        for i in 0..net.param_count() {
            assert_eq!(net.get_param(i), snapshot.get_param(i));
        }
    }

    #[test]
    fn adam_first_step_is_bounded_and_descends() {
        let mut net = DenseNet::init(&[2, 4, 1], 3).unwrap();
        let snapshot = net.clone();
        let lr = 1e-3;
        let mut adam = AdamState::new(&net, lr, 0.9, 0.99).unwrap();
        let mut grads = Gradients::zeros_like(&net);
        let mut rng = crate::rng::substream(9, Domain::Eval, 0);
        for dw in &mut grads.d_weights {
            dw.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        }
        for db in &mut grads.d_biases {
            db.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        }
        adam.step(&mut net, &grads).unwrap();
        // First step from m=v=0: delta = -lr * g / (|g| + eps), so each
        // parameter moves at most lr and opposite to its gradient.
        for i in 0..net.param_count() {
            let delta = net.get_param(i) - snapshot.get_param(i);
            assert!(delta.abs() <= lr * (1.0 + 1e-9), "step exceeded lr at {i}");
            let g = grads.get(i);
            if g != 0.0 {
                assert!(delta * g <= 0.0, "step moved along the gradient at {i}");
            }
        }
    }

    #[test]
    fn adam_rejects_nonfinite_gradients() {
        let mut net = DenseNet::init(&[2, 4, 1], 3).unwrap();
        let mut adam = AdamState::new(&net, 1e-3, 0.9, 0.99).unwrap();
        let mut grads = Gradients::zeros_like(&net);
        grads.d_weights[0][[0, 0]] = f64::NAN;
        assert!(matches!(adam.step(&mut net, &grads), Err(Error::NonFinite(_))));
    }

    #[test]
    fn adam_validates_hyperparameters() {
        let net = DenseNet::init(&[2, 2], 0).unwrap();
        assert!(AdamState::new(&net, 0.0, 0.9, 0.99).is_err());
        assert!(AdamState::new(&net, 1e-3, 1.0, 0.99).is_err());
        assert!(AdamState::new(&net, 1e-3, 0.9, -0.1).is_err());
    }
}
