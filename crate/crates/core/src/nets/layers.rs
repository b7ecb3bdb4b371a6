use rand::Rng;

use crate::ndnum::{NdError, Tensor};

/// Affine map `x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform fan-in init `U(−s/√in, s/√in)` for weights and bias.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, scale: f64, rng: &mut R) -> Self {
        let bound = scale / (input as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..=bound)).collect::<Vec<_>>();
        let w = draw(input * output);
        let b = draw(output);
        Self {
            weight: Tensor::param(&[input, output], w).expect("valid shape"),
            bias: Tensor::param(&[output], b).expect("valid shape"),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NdError> {
        x.matmul(&self.weight)?.add_row_bias(&self.bias)
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn zero(&self) {
        self.weight.with_data_mut(|d| d.fill(0.0));
        self.bias.with_data_mut(|d| d.fill(0.0));
    }

    pub(crate) fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    pub fn new(width: usize) -> Self {
        Self {
            gain: Tensor::param(&[width], vec![1.0; width]).expect("valid shape"),
            bias: Tensor::param(&[width], vec![0.0; width]).expect("valid shape"),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NdError> {
        x.layer_norm(&self.gain, &self.bias)
    }

    pub(crate) fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gain"), self.gain.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Three fully connected layers with SiLU between them.
#[derive(Debug, Clone)]
pub struct FcStack {
    pub layers: [Linear; 3],
}

impl FcStack {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, output_scale: f64, rng: &mut R) -> Self {
        Self {
            layers: [
                Linear::new(input, hidden, 1.0, rng),
                Linear::new(hidden, hidden, 1.0, rng),
                Linear::new(hidden, output, output_scale, rng),
            ],
        }
    }

    /// Pre-activation output of the last layer.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NdError> {
        let h = self.layers[0].forward(x)?.silu();
        let h = self.layers[1].forward(&h)?.silu();
        self.layers[2].forward(&h)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub(crate) fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.collect(&format!("{prefix}.fc{i}"), out);
        }
    }
}
