use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Matrix, ParamTensor, Parameterized};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => sigmoid(v),
            Activation::Linear => v,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Linear => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Affine layer `y = act(x W^T + b)`, weight stored `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: ParamTensor,
    pub bias: ParamTensor,
    pub activation: Activation,
}

impl Dense {
    /// Uniform init: weights within `sqrt(6/fan_in)` for ReLU layers and
    /// `1/sqrt(fan_in)` otherwise; biases within `1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(
        key: &str,
        input: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let weight_bound = match activation {
            Activation::Relu => 6f64.sqrt() * bound,
            _ => bound,
        };
        Self {
            weight: ParamTensor::new(
                format!("{key}/weight"),
                Matrix::uniform(output, input, weight_bound, rng),
            ),
            bias: ParamTensor::new(
                format!("{key}/bias"),
                Matrix::uniform(1, output, bound, rng),
            ),
            activation,
        }
    }

    pub fn from_parts(
        key: &str,
        weight: Matrix,
        bias: &[f64],
        activation: Activation,
    ) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::Config(format!(
                "bias length {} does not match {} outputs",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Self {
            weight: ParamTensor::new(format!("{key}/weight"), weight),
            bias: ParamTensor::new(format!("{key}/bias"), Matrix::row_vector(bias)),
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.rows()
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul_nt(&self.weight.value);
        let bias = self.bias.value.as_slice();
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(bias) {
                *v = self.activation.apply(*v + b);
            }
        }
        y
    }

    /// Accumulates parameter grads and returns the gradient w.r.t. `x`.
    fn backward(&mut self, x: &Matrix, y: &Matrix, upstream: &Matrix) -> Matrix {
        let mut delta = upstream.clone();
        if self.activation != Activation::Linear {
            for (d, &out) in delta.as_mut_slice().iter_mut().zip(y.as_slice()) {
                *d *= self.activation.derivative_from_output(out);
            }
        }
        self.weight.grad.add_assign(&delta.matmul_tn(x));
        let bias_grad = self.bias.grad.as_mut_slice();
        for r in 0..delta.rows() {
            for (g, d) in bias_grad.iter_mut().zip(delta.row(r)) {
                *g += d;
            }
        }
        delta.matmul(&self.weight.value)
    }
}

/// Intermediates of one forward pass: the input of every layer plus the final output.
#[derive(Clone, Debug)]
pub struct MlpTrace {
    activations: Vec<Matrix>,
}

impl MlpTrace {
    pub fn output(&self) -> &Matrix {
        self.activations
            .last()
            .expect("trace holds at least the input")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    cache: Option<Vec<Matrix>>,
}

impl Mlp {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("an mlp needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Config(format!(
                    "layer dims do not chain: {} -> {}",
                    pair[0].output_dim(),
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self {
            layers,
            cache: None,
        })
    }

    /// Builds `dims[0] -> dims[1] -> ... -> dims[n]`, `hidden` activation on
    /// every layer but the last, which gets `output`.
    pub fn build<R: Rng + ?Sized>(
        key: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("mlp needs input and output dims".into()));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                Dense::new(&format!("{key}/layer{i}"), dims[i], dims[i + 1], act, rng)
            })
            .collect();
        Self::new(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    fn check_input(&self, input: &Matrix) -> Result<()> {
        if input.cols() != self.input_dim() {
            return Err(Error::Config(format!(
                "input has {} columns, network expects {}",
                input.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass without touching internal state.
    pub fn infer(&self, input: &Matrix) -> Result<Matrix> {
        self.check_input(input)?;
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.forward(&x);
        }
        Ok(x)
    }

    /// Forward pass returning the intermediates needed by [`Mlp::backward_trace`].
    pub fn forward_trace(&self, input: &Matrix) -> Result<MlpTrace> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.clone());
        for layer in &self.layers {
            let next = layer.forward(activations.last().unwrap());
            activations.push(next);
        }
        Ok(MlpTrace { activations })
    }

    pub fn backward_trace(&mut self, trace: &MlpTrace, upstream: &Matrix) -> Result<Matrix> {
        let out = trace.output();
        if upstream.shape() != out.shape() {
            return Err(Error::Usage(format!(
                "upstream grad {:?} does not match output {:?}",
                upstream.shape(),
                out.shape()
            )));
        }
        let mut grad = upstream.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            grad = layer.backward(&trace.activations[i], &trace.activations[i + 1], &grad);
        }
        Ok(grad)
    }

    /// Forward pass that caches intermediates for a later [`Mlp::backward`].
    pub fn forward(&mut self, input: &Matrix) -> Result<Matrix> {
        let trace = self.forward_trace(input)?;
        let out = trace.output().clone();
        self.cache = Some(trace.activations);
        Ok(out)
    }

    /// Consumes the cached forward pass.
    pub fn backward(&mut self, upstream: &Matrix) -> Result<Matrix> {
        let activations = self
            .cache
            .take()
            .ok_or_else(|| Error::Usage("backward called without a cached forward pass".into()))?;
        self.backward_trace(&MlpTrace { activations }, upstream)
    }
}

impl Parameterized for Mlp {
    fn visit_params(&self, f: &mut dyn FnMut(&ParamTensor)) {
        for layer in &self.layers {
            f(&layer.weight);
            f(&layer.bias);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut ParamTensor)) {
        for layer in &mut self.layers {
            f(&mut layer.weight);
            f(&mut layer.bias);
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::gradcheck::{check_gradients, GradCheckReport};

    fn single(weight: Vec<Vec<f64>>, bias: &[f64], act: Activation) -> Dense {
        Dense::from_parts("t", Matrix::from_rows(&weight).unwrap(), bias, act).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = Mlp::new(vec![single(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            &[0.0, 0.0],
            Activation::Linear,
        )])
        .unwrap();
        let y = net.infer(&Matrix::row_vector(&[3.0, -1.0])).unwrap();
        assert_eq!(y.as_slice(), &[3.0, -1.0]);
    }

    #[test]
    fn zero_weights_give_bias() {
        let net = Mlp::new(vec![single(
            vec![vec![0.0, 0.0]],
            &[0.5],
            Activation::Linear,
        )])
        .unwrap();
        for x in [[1.0, 2.0], [-7.0, 0.3]] {
            assert_eq!(
                net.infer(&Matrix::row_vector(&x)).unwrap().as_slice(),
                &[0.5]
            );
        }
    }

    #[test]
    fn relu_hidden_unit() {
        let net = Mlp::new(vec![
            single(vec![vec![1.0]], &[-1.0], Activation::Relu),
            single(vec![vec![2.0]], &[0.0], Activation::Linear),
        ])
        .unwrap();
        assert_eq!(
            net.infer(&Matrix::row_vector(&[3.0])).unwrap().as_slice(),
            &[4.0]
        );
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let net = Mlp::new(vec![single(
            vec![vec![1.0, 1.0]],
            &[0.0],
            Activation::Linear,
        )])
        .unwrap();
        let err = net.infer(&Matrix::row_vector(&[1.0])).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let bad = Mlp::new(vec![
            single(vec![vec![1.0]], &[0.0], Activation::Linear),
            single(vec![vec![1.0, 1.0]], &[0.0], Activation::Linear),
        ]);
        assert!(matches!(bad, Err(Error::Config(_))));
    }

    #[test]
    fn linear_gradient_is_outer_product() {
        let mut net = Mlp::new(vec![single(
            vec![vec![0.3, -0.2, 0.1], vec![1.0, 0.5, 0.0]],
            &[0.0, 0.0],
            Activation::Linear,
        )])
        .unwrap();
        let x = [2.0, -1.0, 4.0];
        let g = [0.5, -3.0];
        net.forward(&Matrix::row_vector(&x)).unwrap();
        let dx = net.backward(&Matrix::row_vector(&g)).unwrap();
        let grad = net.layers[0].weight.grad.clone();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(grad[(i, j)], g[i] * x[j]);
            }
        }
        // dx = W^T g
        assert!((dx.as_slice()[0] - (0.3 * 0.5 - 3.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Mlp::build(
            "z",
            &[4, 6, 2],
            Activation::Relu,
            Activation::Sigmoid,
            &mut rng,
        )
        .unwrap();
        net.forward(&Matrix::uniform(5, 4, 1.0, &mut rng)).unwrap();
        let dx = net.backward(&Matrix::zeros(5, 2)).unwrap();
        assert!(dx.as_slice().iter().all(|v| *v == 0.0));
        net.visit_params(&mut |p| assert!(p.grad.as_slice().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn backward_without_forward_is_usage_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net =
            Mlp::build("u", &[2, 2], Activation::Relu, Activation::Linear, &mut rng).unwrap();
        assert!(matches!(
            net.backward(&Matrix::zeros(1, 2)),
            Err(Error::Usage(_))
        ));
        net.forward(&Matrix::zeros(1, 2)).unwrap();
        net.backward(&Matrix::zeros(1, 2)).unwrap();
        // The cache is consumed.
        assert!(matches!(
            net.backward(&Matrix::zeros(1, 2)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut net = Mlp::build(
                "g",
                &[5, 16, 8, 1],
                Activation::Relu,
                Activation::Sigmoid,
                &mut rng,
            )
            .unwrap();
            let x = Matrix::uniform(7, 5, 1.0, &mut rng);
            let target = Matrix::uniform(7, 1, 1.0, &mut rng);
            // loss = sum(y * target)
            let report: GradCheckReport = check_gradients(
                &mut net,
                |net| {
                    let y = net.infer(&x).unwrap();
                    y.as_slice()
                        .iter()
                        .zip(target.as_slice())
                        .map(|(a, b)| a * b)
                        .sum()
                },
                |net| {
                    net.forward(&x).unwrap();
                    net.backward(&target).unwrap();
                },
                1e-5,
            );
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }
}
