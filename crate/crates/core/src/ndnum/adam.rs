use super::{NdError, Tensor};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<(), NdError> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(NdError::DataLength {
                shape: vec![self.first_moment.len()],
                len: grads.len(),
            });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            let m = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            params[i] -= lr * (m / c1) / ((v / c2).sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Adam over a fixed, ordered list of named parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    names: Vec<String>,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(lr: f64, params: &[(String, Tensor)]) -> Result<Self, NdError> {
        if !(lr > 0.0) {
            return Err(NdError::InvalidLearningRate(lr));
        }
        Ok(Self {
            lr,
            names: params.iter().map(|(n, _)| n.clone()).collect(),
            states: params.iter().map(|(_, t)| AdamState::new(t.len())).collect(),
        })
    }

    pub fn states(&self) -> &[AdamState] {
        &self.states
    }

    pub fn step_count(&self) -> u64 {
        self.states.first().map(|s| s.step_count).unwrap_or(0)
    }

    /// Applies the accumulated `.grad` of each parameter, then clears it.
    ///
    /// Every gradient is checked before anything is written, so a
    /// non-finite gradient leaves all parameters untouched.
    pub fn step(&mut self, params: &[(String, Tensor)]) -> Result<(), NdError> {
        if params.len() != self.states.len() {
            return Err(NdError::ParamTreeMismatch(format!(
                "optimizer tracks {} tensors, got {}",
                self.states.len(),
                params.len()
            )));
        }
        let step = self.step_count() + 1;
        let mut grads = Vec::with_capacity(params.len());
        for ((name, t), expected) in params.iter().zip(&self.names) {
            if name != expected {
                return Err(NdError::ParamTreeMismatch(format!("expected `{expected}`, got `{name}`")));
            }
            let g = t.grad().unwrap_or_else(|| vec![0.0; t.len()]);
            if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                return Err(NdError::NonFiniteGradient {
                    param: name.clone(),
                    index,
                    step,
                });
            }
            grads.push(g);
        }
        for (((_, t), g), state) in params.iter().zip(&grads).zip(&mut self.states) {
            t.with_data_mut(|d| state.step(d, g, self.lr))?;
            t.zero_grad();
        }
        Ok(())
    }
}
