//! Embedding network: a plain MLP f: R^d -> R^m with a linear output layer.
//!
//! Parameters live in a flat vector (layer order, weights row-major, then
//! bias) so the optimizer and the Polyak average operate on one array. All
//! math is f64; training runs are expected to be bitwise reproducible.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative as a function of the pre-activation.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        Architecture { input_dim, hidden_dims, output_dim, activation: Activation::Relu }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be >= 1".into()));
        }
        Ok(())
    }

    /// (fan_in, fan_out) per layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    /// weights[l] is fan_in x fan_out.
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Intermediate activations needed for the backward pass.
pub struct ForwardCache {
    /// Input to each layer; layer_inputs[0] is the batch itself.
    layer_inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
}

impl ForwardCache {
    /// Per-layer pre-activations. Gradient checks use these to reject
    /// points sitting on an activation kink.
    pub fn pre_activations(&self) -> &[Array2<f64>] {
        &self.pre
    }
}

impl ModelParams {
    /// Glorot-uniform weights (U(-s, s) with s = sqrt(6 / (fan_in + fan_out)))
    /// and zero biases. Draw order is fixed: layers in order, weights
    /// row-major.
    pub fn init(arch: &Architecture, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (fan_in, fan_out) in arch.layer_dims() {
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut w = Array2::zeros((fan_in, fan_out));
            for v in w.iter_mut() {
                *v = rng.random_range(-s..s);
            }
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        ModelParams { arch: arch.clone(), weights, biases }
    }

    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    pub fn to_flat(&self) -> Array1<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            flat.extend(w.iter());
            flat.extend(b.iter());
        }
        Array1::from_vec(flat)
    }

    pub fn from_flat(arch: &Architecture, flat: ArrayView1<f64>) -> Result<ModelParams> {
        if flat.len() != arch.param_count() {
            return Err(Error::LengthMismatch { expected: arch.param_count(), got: flat.len() });
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut off = 0;
        for (fan_in, fan_out) in arch.layer_dims() {
            let wlen = fan_in * fan_out;
            let w = Array2::from_shape_vec(
                (fan_in, fan_out),
                flat.slice(ndarray::s![off..off + wlen]).to_vec(),
            )
            .expect("length checked");
            off += wlen;
            let b = flat.slice(ndarray::s![off..off + fan_out]).to_owned();
            off += fan_out;
            weights.push(w);
            biases.push(b);
        }
        Ok(ModelParams { arch: arch.clone(), weights, biases })
    }

    /// Embeds a batch (rows are instances). The activation is applied to all
    /// layers except the last, which stays linear.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        if x.ncols() != self.arch.input_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("batch with {} columns", self.arch.input_dim),
                got: format!("{} columns", x.ncols()),
            });
        }
        let n_layers = self.weights.len();
        let mut layer_inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        let mut a = x.to_owned();
        for l in 0..n_layers {
            let z = a.dot(&self.weights[l]) + &self.biases[l];
            layer_inputs.push(a);
            a = if l + 1 < n_layers { z.mapv(|v| self.arch.activation.apply(v)) } else { z.clone() };
            pre.push(z);
        }
        Ok((a, ForwardCache { layer_inputs, pre }))
    }

    /// Backpropagates an upstream gradient dL/d(output) through the cached
    /// forward pass, returning dL/d(theta) in flat layout. The cache must
    /// come from a forward call on this same parameter vector.
    pub fn backward(&self, cache: &ForwardCache, d_out: ArrayView2<f64>) -> Result<Array1<f64>> {
        let n_layers = self.weights.len();
        let batch = cache.layer_inputs[0].nrows();
        if d_out.nrows() != batch || d_out.ncols() != self.arch.output_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{batch} x {}", self.arch.output_dim),
                got: format!("{} x {}", d_out.nrows(), d_out.ncols()),
            });
        }
        let mut d_weights: Vec<Array2<f64>> = Vec::with_capacity(n_layers);
        let mut d_biases: Vec<Array1<f64>> = Vec::with_capacity(n_layers);
        let mut delta = d_out.to_owned();
        for l in (0..n_layers).rev() {
            d_weights.push(cache.layer_inputs[l].t().dot(&delta));
            d_biases.push(delta.sum_axis(Axis(0)));
            if l > 0 {
                let through = delta.dot(&self.weights[l].t());
                delta = &through * &cache.pre[l - 1].mapv(|z| self.arch.activation.derivative(z));
            }
        }
        d_weights.reverse();
        d_biases.reverse();

        let mut flat = Vec::with_capacity(self.param_count());
        for (dw, db) in d_weights.iter().zip(&d_biases) {
            flat.extend(dw.iter());
            flat.extend(db.iter());
        }
        Ok(Array1::from_vec(flat))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(input: usize, hidden: &[usize], output: usize) -> Architecture {
        Architecture::new(input, hidden.to_vec(), output)
    }

    #[test]
    fn param_count_small_net() {
        // 4 -> 8 -> 3: 4*8 + 8 + 8*3 + 3 = 67
        assert_eq!(arch(4, &[8], 3).param_count(), 67);
        assert_eq!(arch(5, &[], 2).param_count(), 12);
    }

    #[test]
    fn init_is_seeded_and_biases_are_zero() {
        let a = arch(6, &[16], 4);
        let p1 = ModelParams::init(&a, 7);
        let p2 = ModelParams::init(&a, 7);
        let p3 = ModelParams::init(&a, 8);
        assert_eq!(p1.to_flat(), p2.to_flat());
        assert_ne!(p1.to_flat(), p3.to_flat());
        for b in &p1.biases {
            assert!(b.iter().all(|&v| v == 0.0));
        }
        // Glorot bound for the first layer.
        let s = (6.0 / 22.0f64).sqrt();
        assert!(p1.weights[0].iter().all(|&v| v.abs() < s));
    }

    #[test]
    fn flat_round_trip_is_exact() {
        let a = arch(5, &[7, 3], 2);
        let p = ModelParams::init(&a, 11);
        let flat = p.to_flat();
        assert_eq!(flat.len(), a.param_count());
        let q = ModelParams::from_flat(&a, flat.view()).unwrap();
        assert_eq!(p, q);
        assert!(matches!(
            ModelParams::from_flat(&a, flat.slice(ndarray::s![..10])),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn forward_no_hidden_layer_is_affine() {
        let a = arch(3, &[], 3);
        let mut p = ModelParams::init(&a, 0);
        p.weights[0] = Array2::eye(3);
        p.biases[0] = Array1::zeros(3);
        let x = ndarray::array![[1.0, -2.0, 3.0], [0.5, 0.0, -0.25]];
        let (z, _) = p.forward(x.view()).unwrap();
        assert_eq!(z, x);
    }

    #[test]
    fn relu_zeroes_negative_hidden_units() {
        let a = arch(1, &[2], 1);
        let mut p = ModelParams::init(&a, 0);
        p.weights[0] = ndarray::array![[1.0, -1.0]];
        p.biases[0] = Array1::zeros(2);
        p.weights[1] = ndarray::array![[1.0], [1.0]];
        p.biases[1] = Array1::zeros(1);
        // x=2: hidden pre (2, -2) -> post (2, 0) -> out 2. x=-3: (-3, 3) -> (0, 3) -> 3.
        let x = ndarray::array![[2.0], [-3.0]];
        let (z, _) = p.forward(x.view()).unwrap();
        assert_eq!(z, ndarray::array![[2.0], [3.0]]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = ModelParams::init(&arch(4, &[], 2), 0);
        let x = Array2::zeros((3, 5));
        assert!(matches!(p.forward(x.view()), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn empty_batch_flows_through() {
        let p = ModelParams::init(&arch(4, &[3], 2), 0);
        let x = Array2::zeros((0, 4));
        let (z, cache) = p.forward(x.view()).unwrap();
        assert_eq!(z.dim(), (0, 2));
        let g = p.backward(&cache, Array2::zeros((0, 2)).view()).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer_gradient_is_outer_product() {
        let a = arch(2, &[], 2);
        let p = ModelParams::init(&a, 3);
        let x = ndarray::array![[1.5, -0.5]];
        let (_, cache) = p.forward(x.view()).unwrap();
        let d_out = ndarray::array![[2.0, -1.0]];
        let g = p.backward(&cache, d_out.view()).unwrap();
        // dW = x^T d, row-major: [[3, -1.5], [-1, 0.5]], db = d.
        let expected = ndarray::array![3.0, -1.5, -1.0, 0.5, 2.0, -1.0];
        assert_eq!(g, expected);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradient() {
        let p = ModelParams::init(&arch(3, &[5, 4], 2), 1);
        let x = ndarray::array![[0.1, 0.2, 0.3], [-1.0, 0.5, 2.0]];
        let (_, cache) = p.forward(x.view()).unwrap();
        let g = p.backward(&cache, Array2::zeros((2, 2)).view()).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    /// Central finite differences on L = sum(G * f(x)) for a fixed random G.
    #[test]
    fn backward_matches_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for act in [Activation::Relu, Activation::Tanh] {
            let mut a = arch(4, &[6, 5], 3);
            a.activation = act;
            let p = ModelParams::init(&a, 21);
            let mut x = Array2::zeros((7, 4));
            for v in x.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let mut g_up = Array2::zeros((7, 3));
            for v in g_up.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }

            let (_, cache) = p.forward(x.view()).unwrap();
            let analytic = p.backward(&cache, g_up.view()).unwrap();

            let flat = p.to_flat();
            let h = 1e-6;
            let mut worst = 0.0f64;
            for i in 0..flat.len() {
                let mut plus = flat.clone();
                plus[i] += h;
                let mut minus = flat.clone();
                minus[i] -= h;
                let lp = ModelParams::from_flat(&a, plus.view())
                    .unwrap()
                    .forward(x.view())
                    .unwrap()
                    .0;
                let lm = ModelParams::from_flat(&a, minus.view())
                    .unwrap()
                    .forward(x.view())
                    .unwrap()
                    .0;
                let num = ((&lp * &g_up).sum() - (&lm * &g_up).sum()) / (2.0 * h);
                let denom = (num.abs() + analytic[i].abs()).max(1e-8);
                worst = worst.max((num - analytic[i]).abs() / denom);
            }
            assert!(worst < 1e-5, "worst relative error {worst} for {act:?}");
        }
    }
}
