//! Finite-difference oracle and random inputs for unit tests.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numkit::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Gradient magnitudes below this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rand_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Central differences of a scalar function of one tensor.
pub fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.clone().into_data();
        let mut minus = plus.clone();
        plus[i] += FD_STEP;
        minus[i] -= FD_STEP;
        let fp = f(&Tensor::new(x.shape().to_vec(), plus).unwrap());
        let fm = f(&Tensor::new(x.shape().to_vec(), minus).unwrap());
        out.push((fp - fm) / (2.0 * FD_STEP));
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}
