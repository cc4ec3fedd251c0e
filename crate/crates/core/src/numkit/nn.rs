use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{dim_err, Result};

/// Affine map `x·W + b` with `W: [in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Weights uniform with bound `gain·sqrt(6 / fan_in)`, biases uniform
    /// with bound `1 / sqrt(fan_in)`.
    pub fn init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        let bound = gain * libm::sqrt(6.0 / fan_in as f64);
        let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        let bb = 1.0 / libm::sqrt(fan_in as f64);
        let b = (0..fan_out).map(|_| rng.gen_range(-bb..bb)).collect();
        Self {
            weight: Tensor::from_raw(vec![fan_in, fan_out], w),
            bias: Tensor::from_raw(vec![fan_out], b),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Two affine layers with a rectifier between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

/// Tape handles for one bound [`Mlp`].
#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl MlpVars {
    pub fn all(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

impl Mlp {
    pub fn init<R: Rng>(rng: &mut R, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            hidden: Linear::init(rng, input, hidden, 1.0),
            output: Linear::init(rng, hidden, output, 0.5),
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            hidden: Linear::zeros(input, hidden),
            output: Linear::zeros(hidden, output),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.in_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.out_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.output.out_dim()
    }

    /// Places the parameters on the tape, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        MlpVars {
            w1: leaf(&self.hidden.weight),
            b1: leaf(&self.hidden.bias),
            w2: leaf(&self.output.weight),
            b2: leaf(&self.output.bias),
        }
    }

    /// `relu(x·W1 + b1)·W2 + b2` for `x: [rows × in]`.
    pub fn forward(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.in_dim() {
            return Err(dim_err(
                "mlp",
                format!("input width {cols}, expected {}", self.in_dim()),
            ));
        }
        let h = tape.matmul(x, vars.w1)?;
        let h = tape.add_bias(h, vars.b1)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, vars.w2)?;
        tape.add_bias(o, vars.b2)
    }

    /// Forward pass without recording gradients.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &vars, xv)?;
        Ok(tape.value(out).clone())
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [
            &self.hidden.weight,
            &self.hidden.bias,
            &self.output.weight,
            &self.output.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.hidden.weight,
            &mut self.hidden.bias,
            &mut self.output.weight,
            &mut self.output.bias,
        ]
    }

    /// Named parameter blocks, prefixed.
    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        ["hidden.weight", "hidden.bias", "output.weight", "output.bias"]
            .iter()
            .zip(self.tensors())
            .map(|(n, t)| (format!("{prefix}.{n}"), t.clone()))
            .collect()
    }

    /// Rebuilds from named blocks written by [`Mlp::named`].
    pub fn from_named(prefix: &str, blocks: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| -> Result<Tensor> {
            let key = format!("{prefix}.{name}");
            blocks
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| dim_err("checkpoint", format!("missing block {key}")))
        };
        let mlp = Self {
            hidden: Linear {
                weight: find("hidden.weight")?,
                bias: find("hidden.bias")?,
            },
            output: Linear {
                weight: find("output.weight")?,
                bias: find("output.bias")?,
            },
        };
        let ok = mlp.hidden.weight.rank() == 2
            && mlp.output.weight.rank() == 2
            && mlp.hidden.bias.len() == mlp.hidden.out_dim()
            && mlp.output.weight.shape()[0] == mlp.hidden.out_dim()
            && mlp.output.bias.len() == mlp.output.out_dim();
        if !ok {
            return Err(dim_err("checkpoint", format!("inconsistent shapes under {prefix}")));
        }
        Ok(mlp)
    }
}
