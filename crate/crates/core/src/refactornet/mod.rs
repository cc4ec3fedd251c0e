//! Action/co-occurrence encoders, their decoupling losses, KL regularization
//! and recombination into refactored snippet features.

mod losses;
mod train;

pub use losses::{loss_a, loss_c, loss_kl, pair_batch_loss, PairBatchLoss, VAR_FLOOR};
pub use train::{evaluate_pairs, train_stage1, PairStats, Stage1Config, Stage1Epoch};

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Result};
use crate::numkit::{Mlp, MlpVars, Tape, Tensor, Var};
use crate::sampler::{ActionSample, CouplingSample};

pub const DEFAULT_BETA: f64 = 0.001;

/// Encoder sizes. `hidden`/`output` default to `C` and `C/2`, so the
/// refactored width `2·output` equals the input width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderDims {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl EncoderDims {
    pub fn for_input(input: usize) -> Self {
        Self {
            input,
            hidden: input,
            output: (input / 2).max(1),
        }
    }
}

/// `φ_A` and `φ_C`: same architecture, disjoint parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RefactorModel {
    pub encoder_a: Mlp,
    pub encoder_c: Mlp,
}

#[derive(Debug, Clone, Copy)]
pub struct RefactorVars {
    pub a: MlpVars,
    pub c: MlpVars,
}

impl RefactorVars {
    pub fn all(&self) -> [Var; 8] {
        let [a0, a1, a2, a3] = self.a.all();
        let [c0, c1, c2, c3] = self.c.all();
        [a0, a1, a2, a3, c0, c1, c2, c3]
    }
}

impl RefactorModel {
    pub fn new(dims: EncoderDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder_a = Mlp::init(&mut rng, dims.input, dims.hidden, dims.output);
        let encoder_c = Mlp::init(&mut rng, dims.input, dims.hidden, dims.output);
        Self { encoder_a, encoder_c }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder_a.in_dim()
    }

    /// Width `D` of each encoder's output.
    pub fn code_dim(&self) -> usize {
        self.encoder_a.out_dim()
    }

    /// Width of a refactored feature: `2·D`.
    pub fn output_dim(&self) -> usize {
        2 * self.code_dim()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> RefactorVars {
        RefactorVars {
            a: self.encoder_a.bind(tape, trainable),
            c: self.encoder_c.bind(tape, trainable),
        }
    }

    pub fn encode_a(&self, tape: &mut Tape, vars: &RefactorVars, x: Var) -> Result<Var> {
        self.encoder_a.forward(tape, &vars.a, x)
    }

    pub fn encode_c(&self, tape: &mut Tape, vars: &RefactorVars, x: Var) -> Result<Var> {
        self.encoder_c.forward(tape, &vars.c, x)
    }

    /// `φ_A(x) ⊕ φ_C(x)` row by row, also returning the `φ_C` node.
    pub fn forward(&self, tape: &mut Tape, vars: &RefactorVars, x: Var) -> Result<(Var, Var)> {
        let a = self.encode_a(tape, vars, x)?;
        let c = self.encode_c(tape, vars, x)?;
        Ok((tape.concat_cols(a, c)?, c))
    }

    /// Refactors one snippet feature.
    pub fn refactor(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.input_dim() {
            return Err(dim_err(
                "refactor",
                alloc::format!("feature width {}, encoders expect {}", f.len(), self.input_dim()),
            ));
        }
        let x = Tensor::vector(f.to_vec())?.reshaped(alloc::vec![1, f.len()])?;
        Ok(self.refactor_sequence(&x)?.into_data())
    }

    /// Refactors an `L × C` sequence into `L × 2D`.
    pub fn refactor_sequence(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(features.clone());
        let (out, _) = self.forward(&mut tape, &vars, x)?;
        Ok(tape.value(out).clone())
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.encoder_a.tensors_mut().into_iter().collect();
        v.extend(self.encoder_c.tensors_mut());
        v
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut v = self.encoder_a.named("encoder_a");
        v.extend(self.encoder_c.named("encoder_c"));
        v
    }

    pub fn from_named(blocks: &[(String, Tensor)]) -> Result<Self> {
        let encoder_a = Mlp::from_named("encoder_a", blocks)?;
        let encoder_c = Mlp::from_named("encoder_c", blocks)?;
        if encoder_a.in_dim() != encoder_c.in_dim() || encoder_a.out_dim() != encoder_c.out_dim() {
            return Err(dim_err("checkpoint", "encoder shapes differ".into()));
        }
        Ok(Self { encoder_a, encoder_c })
    }
}

/// The refactor objective for a single pair, with `α` = pair similarity.
pub fn loss_refactor(
    action: &ActionSample,
    coupling: &CouplingSample,
    model: &RefactorModel,
    beta: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let out = pair_batch_loss(
        &mut tape,
        model,
        &vars,
        &[(&action.feature, &coupling.feature, coupling.similarity)],
        beta,
    )?;
    Ok(tape.value(out.loss).item())
}
