//! Fully connected ReLU networks with hand-written reverse-mode gradients.
//!
//! A network is a chain of affine layers; every layer but the last is
//! followed by a ReLU. Weights are row-major `(out_dim, in_dim)`.

use rand::Rng;

use super::loss::Loss;
use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Default width of both hidden layers.
pub const DEFAULT_HIDDEN_WIDTH: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    in_dim: usize,
    out_dim: usize,
    /// Row-major `(out_dim, in_dim)`.
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl Layer {
    pub fn new(in_dim: usize, out_dim: usize, weights: Vec<f64>, biases: Vec<f64>) -> Result<Self> {
        if weights.len() != in_dim * out_dim {
            return Err(Error::Dimension {
                context: "layer weights",
                expected: in_dim * out_dim,
                got: weights.len(),
            });
        }
        if biases.len() != out_dim {
            return Err(Error::Dimension {
                context: "layer biases",
                expected: out_dim,
                got: biases.len(),
            });
        }
        Ok(Layer {
            in_dim,
            out_dim,
            weights,
            biases,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Layer {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            biases: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [f64] {
        &mut self.biases
    }
}

/// Parameters of a multilayer perceptron.
///
/// Also used as the container for gradients and Adam moments, which share
/// the exact same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    layers: Vec<Layer>,
}

/// Activations recorded by [`NetParams::forward_batch`] for a later backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `acts[0]` is the input batch, `acts[l]` the output of layer `l - 1`
    /// (post-ReLU for hidden layers).
    acts: Vec<Matrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.acts.last().expect("cache always holds the input")
    }
}

impl NetParams {
    /// Chains `layers`, checking that each output width feeds the next input.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::precondition("a network needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Dimension {
                    context: "layer chain",
                    expected: pair[0].out_dim,
                    got: pair[1].in_dim,
                });
            }
        }
        Ok(NetParams { layers })
    }

    /// Random network with layer sizes `dims` (input first, output last).
    ///
    /// Hidden layers use Kaiming-uniform fan-in initialisation, the output
    /// layer `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`. Biases start at zero.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::precondition(format!("invalid layer sizes {dims:?}")));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = if l == last {
                    1.0 / (fan_in as f64).sqrt()
                } else {
                    (6.0 / fan_in as f64).sqrt()
                };
                let weights = (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                Layer {
                    in_dim: fan_in,
                    out_dim: fan_out,
                    weights,
                    biases: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(NetParams { layers })
    }

    /// Two hidden layers of `hidden` units.
    pub fn mlp<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Result<Self> {
        Self::init(&[input, hidden, hidden, output], rng)
    }

    pub fn zeros_like(&self) -> Self {
        NetParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.in_dim, l.out_dim))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    /// Width of the first hidden layer, or 0 for a single affine layer.
    pub fn hidden_width(&self) -> usize {
        if self.layers.len() > 1 {
            self.layers[0].out_dim
        } else {
            0
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Every weight and bias buffer, in checkpoint order.
    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.biases.as_slice()])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.biases.as_mut_slice()])
    }

    pub fn same_shape(&self, other: &NetParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.in_dim == b.in_dim && a.out_dim == b.out_dim)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Largest absolute parameter value.
    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .flat_map(|t| t.iter())
            .fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    /// Evaluates the network on a single input.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::Dimension {
                context: "network input",
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let batch = Matrix::from_vec(1, input.len(), input.to_vec());
        Ok(self.predict(&batch)?.into_vec())
    }

    /// Evaluates the network on every row of `inputs` without recording activations.
    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        self.check_batch(inputs)?;
        let mut act = inputs.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            act = affine(layer, &act, l != last);
        }
        Ok(act)
    }

    /// Evaluates the network on a batch and keeps what backward needs.
    pub fn forward_batch(&self, inputs: &Matrix) -> Result<ForwardCache> {
        self.check_batch(inputs)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(inputs.clone());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let next = affine(layer, &acts[l], l != last);
            acts.push(next);
        }
        Ok(ForwardCache { acts })
    }

    /// Batch-mean loss and its exact gradient with respect to every parameter.
    pub fn backward(&self, inputs: &Matrix, loss: &Loss<'_>) -> Result<(f64, NetParams)> {
        let cache = self.forward_batch(inputs)?;
        let (value, grad_out) = loss.evaluate(cache.output())?;
        let grads = self.backward_from(&cache, grad_out);
        Ok((value, grads))
    }

    /// Backpropagates `grad_out` (dL/d output, one row per sample) through the
    /// activations in `cache`.
    pub fn backward_from(&self, cache: &ForwardCache, grad_out: Matrix) -> NetParams {
        let mut grads = self.zeros_like();
        let mut delta = grad_out;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &cache.acts[l];
            let batch = input.rows();
            let g = &mut grads.layers[l];

            // dW = delta^T . input
            // SAFETY: slices are sized (batch, out), (batch, in) and (out, in)
            // with the strides given.
            unsafe {
                matrixmultiply::dgemm(
                    layer.out_dim,
                    batch,
                    layer.in_dim,
                    1.0,
                    delta.as_slice().as_ptr(),
                    1,
                    layer.out_dim as isize,
                    input.as_slice().as_ptr(),
                    layer.in_dim as isize,
                    1,
                    0.0,
                    g.weights.as_mut_ptr(),
                    layer.in_dim as isize,
                    1,
                );
            }
            for row in delta.iter_rows() {
                for (b, d) in g.biases.iter_mut().zip(row) {
                    *b += d;
                }
            }

            if l == 0 {
                break;
            }
            // delta_prev = (delta . W) masked by the ReLU of the previous layer.
            let mut prev = Matrix::zeros(batch, layer.in_dim);
            // SAFETY: (batch, out) x (out, in) -> (batch, in), all row-major.
            unsafe {
                matrixmultiply::dgemm(
                    batch,
                    layer.out_dim,
                    layer.in_dim,
                    1.0,
                    delta.as_slice().as_ptr(),
                    layer.out_dim as isize,
                    1,
                    layer.weights.as_ptr(),
                    layer.in_dim as isize,
                    1,
                    0.0,
                    prev.as_mut_slice().as_mut_ptr(),
                    layer.in_dim as isize,
                    1,
                );
            }
            for (d, a) in prev.as_mut_slice().iter_mut().zip(input.as_slice()) {
                if *a <= 0.0 {
                    *d = 0.0;
                }
            }
            delta = prev;
        }
        grads
    }

    fn check_batch(&self, inputs: &Matrix) -> Result<()> {
        if inputs.rows() == 0 {
            return Err(Error::precondition("empty batch"));
        }
        if inputs.cols() != self.input_dim() {
            return Err(Error::Dimension {
                context: "network input",
                expected: self.input_dim(),
                got: inputs.cols(),
            });
        }
        Ok(())
    }
}

fn affine(layer: &Layer, input: &Matrix, relu: bool) -> Matrix {
    let batch = input.rows();
    let mut out = Matrix::zeros(batch, layer.out_dim);
    for r in 0..batch {
        out.row_mut(r).copy_from_slice(&layer.biases);
    }
    // out += input . W^T
    // SAFETY: (batch, in) x (in, out) -> (batch, out); W^T is read through
    // swapped strides of the row-major (out, in) buffer.
    unsafe {
        matrixmultiply::dgemm(
            batch,
            layer.in_dim,
            layer.out_dim,
            1.0,
            input.as_slice().as_ptr(),
            layer.in_dim as isize,
            1,
            layer.weights.as_ptr(),
            1,
            layer.in_dim as isize,
            1.0,
            out.as_mut_slice().as_mut_ptr(),
            layer.out_dim as isize,
            1,
        );
    }
    if relu {
        for x in out.as_mut_slice() {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straight-line re-evaluation of the network, one scalar at a time.
    fn naive_forward(net: &NetParams, x: &[f64]) -> Vec<f64> {
        let mut act = x.to_vec();
        let n = net.layers().len();
        for (l, layer) in net.layers().iter().enumerate() {
            let mut next = Vec::with_capacity(layer.out_dim());
            for o in 0..layer.out_dim() {
                let mut z = layer.biases()[o];
                for i in 0..layer.in_dim() {
                    z += layer.weights()[o * layer.in_dim() + i] * act[i];
                }
                if l + 1 < n && z < 0.0 {
                    z = 0.0;
                }
                next.push(z);
            }
            act = next;
        }
        act
    }

    #[test]
    fn identity_net_passes_positive_input() {
        let layers = (0..3)
            .map(|_| Layer::new(1, 1, vec![1.0], vec![0.0]).unwrap())
            .collect();
        let net = NetParams::from_layers(layers).unwrap();
        assert_eq!(net.forward(&[2.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn zero_weights_return_output_bias() {
        let mut net = NetParams::init(&[3, 4, 4, 1], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for t in net.tensors_mut() {
            t.fill(0.0);
        }
        net.layers_mut()[2].biases_mut()[0] = 0.7;
        assert_eq!(net.forward(&[1.0, -2.0, 5.0]).unwrap(), vec![0.7]);
    }

    #[test]
    fn forward_matches_naive_interpreter() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let net = NetParams::init(&[4, 8, 8, 3], &mut rng).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let fast = net.forward(&x).unwrap();
            let slow = naive_forward(&net, &x);
            for (a, b) in fast.iter().zip(&slow) {
                let scale = a.abs().max(b.abs()).max(1e-300);
                assert!((a - b).abs() / scale <= 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn batch_rows_match_single_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = NetParams::init(&[2, 5, 5, 4], &mut rng).unwrap();
        let rows: Vec<Vec<f64>> = (0..7)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let out = net.predict(&Matrix::from_rows(&rows)).unwrap();
        for (r, x) in rows.iter().enumerate() {
            assert_eq!(out.row(r), net.forward(x).unwrap().as_slice());
        }
    }

    #[test]
    fn shape_errors() {
        let net = NetParams::init(&[2, 3, 1], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Dimension { .. })));
        let bad = vec![Layer::zeros(2, 3), Layer::zeros(4, 1)];
        assert!(matches!(NetParams::from_layers(bad), Err(Error::Dimension { .. })));
        assert!(Layer::new(2, 2, vec![0.0; 3], vec![0.0; 2]).is_err());
    }

    #[test]
    fn init_bounds() {
        let net = NetParams::mlp(2, 64, 6, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(net.layer_count(), 3);
        assert_eq!(net.hidden_width(), 64);
        let hidden_bound = (6.0_f64 / 2.0).sqrt();
        assert!(net.layers()[0].weights().iter().all(|w| w.abs() <= hidden_bound));
        let out_bound = 1.0 / 8.0;
        assert!(net.layers()[2].weights().iter().all(|w| w.abs() <= out_bound));
    }
}
