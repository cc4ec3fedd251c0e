//! Dense tensors, a reverse-mode gradient tape, MLP layers and Adam.

mod nn;
mod optim;
mod tape;
mod tensor;

pub use nn::{Linear, Mlp, MlpVars};
pub use optim::{Adam, AdamConfig};
pub use tape::{bin_range, Gradients, Span, Tape, Var};
pub use tensor::Tensor;

/// Cosine similarity of two plain slices; `None` when either has zero norm.
pub fn cosine_slices(u: &[f64], v: &[f64]) -> Option<f64> {
    let nu = libm::sqrt(u.iter().map(|x| x * x).sum::<f64>());
    let nv = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if nu == 0.0 || nv == 0.0 {
        return None;
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Some((dot / (nu * nv)).clamp(-1.0, 1.0))
}
