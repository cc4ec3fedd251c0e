use alloc::format;
use alloc::vec::Vec;

use super::{RefactorModel, RefactorVars};
use crate::error::{degenerate, dim_err, Result};
use crate::numkit::{Tape, Tensor, Var};

/// Floor applied to the variance before the logarithm in [`loss_kl`].
pub const VAR_FLOOR: f64 = 1e-8;

/// `max(0, cos⟨a, c⟩)` per row.
pub fn loss_a(tape: &mut Tape, a_enc: Var, c_enc: Var) -> Result<Var> {
    let cos = tape.row_cosine(a_enc, c_enc)?;
    Ok(tape.relu(cos))
}

/// `1 − cos⟨a, c⟩` per row.
pub fn loss_c(tape: &mut Tape, a_enc: Var, c_enc: Var) -> Result<Var> {
    let cos = tape.row_cosine(a_enc, c_enc)?;
    Ok(tape.affine(cos, -1.0, 1.0))
}

/// `½·D·(μ² + σ² − log σ² − 1)` per row, with `(μ, σ)` the row's population
/// mean and standard deviation and `σ²` floored at [`VAR_FLOOR`].
pub fn loss_kl(tape: &mut Tape, x: Var) -> Result<Var> {
    let d = tape.value(x).cols();
    if d < 2 {
        return Err(degenerate("loss_kl", format!("needs width >= 2, got {d}")));
    }
    let mu = tape.row_mean(x);
    let var = tape.row_var(x);
    let var = tape.floor_min(var, VAR_FLOOR);
    let mu2 = tape.mul(mu, mu)?;
    let t = tape.add(mu2, var)?;
    let log_var = tape.ln(var)?;
    let t = tape.sub(t, log_var)?;
    let half_d = 0.5 * d as f64;
    Ok(tape.affine(t, half_d, -half_d))
}

/// Batch refactor loss and its parts.
#[derive(Debug, Clone, Copy)]
pub struct PairBatchLoss {
    /// Mean over pairs of `α(L_A + L_C) + β·(KL(φ_C(a)) + KL(φ_C(c)))/2`.
    pub loss: Var,
    pub mean_loss_a: f64,
    pub mean_loss_c: f64,
    pub mean_kl: f64,
}

/// Refactor loss over `(a, c, α)` triples. `beta = 0` skips the KL term.
pub fn pair_batch_loss(
    tape: &mut Tape,
    model: &RefactorModel,
    vars: &RefactorVars,
    pairs: &[(&[f64], &[f64], f64)],
    beta: f64,
) -> Result<PairBatchLoss> {
    if pairs.is_empty() {
        return Err(dim_err("pair_batch_loss", "empty batch".into()));
    }
    let width = model.input_dim();
    let m = pairs.len();
    let mut a_rows = Vec::with_capacity(m * width);
    let mut c_rows = Vec::with_capacity(m * width);
    let mut alpha = Vec::with_capacity(m);
    for (a, c, w) in pairs {
        if a.len() != width || c.len() != width {
            return Err(dim_err(
                "pair_batch_loss",
                format!("sample width {}/{} vs encoder {width}", a.len(), c.len()),
            ));
        }
        a_rows.extend_from_slice(a);
        c_rows.extend_from_slice(c);
        alpha.push(*w / m as f64);
    }
    let a = tape.constant(Tensor::matrix(m, width, a_rows)?);
    let c = tape.constant(Tensor::matrix(m, width, c_rows)?);

    let aa = model.encode_a(tape, vars, a)?;
    let ca = model.encode_a(tape, vars, c)?;
    let ac = model.encode_c(tape, vars, a)?;
    let cc = model.encode_c(tape, vars, c)?;
    let la = loss_a(tape, aa, ca)?;
    let lc = loss_c(tape, ac, cc)?;
    let mean_loss_a = tape.value(la).sum() / m as f64;
    let mean_loss_c = tape.value(lc).sum() / m as f64;

    let both = tape.add(la, lc)?;
    let weighted = tape.mul_const(both, &alpha)?;
    let mut loss = tape.sum(weighted);
    let mut mean_kl = 0.0;
    if beta != 0.0 {
        let ka = loss_kl(tape, ac)?;
        let kc = loss_kl(tape, cc)?;
        let k = tape.add(ka, kc)?;
        let k = tape.mean(k);
        mean_kl = tape.value(k).item();
        // mean over pairs of (KL_a + KL_c)/2
        let k = tape.affine(k, 0.5 * beta, 0.0);
        loss = tape.add(loss, k)?;
        mean_kl *= 0.5;
    }
    Ok(PairBatchLoss {
        loss,
        mean_loss_a,
        mean_loss_c,
        mean_kl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::numkit::Mlp;
    use crate::refactornet::{loss_refactor, EncoderDims};
    use crate::sampler::{ActionSample, CouplingSample};
    use crate::testutil::{max_rel_error, numeric_grad, rand_tensor};
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eval2(f: fn(&mut Tape, Var, Var) -> Result<Var>, a: &[f64], c: &[f64]) -> Result<f64> {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(a.to_vec()).unwrap());
        let c = t.constant(Tensor::vector(c.to_vec()).unwrap());
        let l = f(&mut t, a, c)?;
        Ok(t.value(l).item())
    }

    fn kl(x: &[f64]) -> Result<f64> {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(x.to_vec()).unwrap());
        let l = loss_kl(&mut t, x)?;
        Ok(t.value(l).item())
    }

    #[test]
    fn loss_a_examples() {
        assert_eq!(eval2(loss_a, &[1., 2.], &[-1., -2.]).unwrap(), 0.0);
        assert!((eval2(loss_a, &[1., 2.], &[1., 2.]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(eval2(loss_a, &[1., 0.], &[0., 3.]).unwrap(), 0.0);
        assert!(matches!(
            eval2(loss_a, &[0., 0.], &[1., 0.]),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn loss_c_examples() {
        assert!(eval2(loss_c, &[1., 2.], &[1., 2.]).unwrap().abs() < 1e-15);
        assert_eq!(eval2(loss_c, &[1., 0.], &[0., 3.]).unwrap(), 1.0);
        assert!((eval2(loss_c, &[1., 2.], &[-1., -2.]).unwrap() - 2.0).abs() < 1e-15);
        assert!(eval2(loss_c, &[1., 0.], &[0., 0.]).is_err());
    }

    #[test]
    fn loss_kl_examples() {
        assert_eq!(kl(&[1.0, -1.0]).unwrap(), 0.0);
        let expect = 0.5 * 4.0 * (4.0 + 1e-8 - libm::log(1e-8) - 1.0);
        assert!((kl(&[2.0; 4]).unwrap() - expect).abs() < 1e-9);
        assert!((expect - 0.5 * 4.0 * (4.0 + 1e-8 + 18.42 - 1.0)).abs() < 0.02);
        assert!((kl(&[0.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(kl(&[1.0]), Err(Error::Degenerate { .. })));
    }

    fn identity_model(d: usize) -> RefactorModel {
        // relu(x·I)·I = x for non-negative x
        let mut enc = Mlp::zeros(d, d, d);
        let eye: Vec<f64> = (0..d * d).map(|k| if k / d == k % d { 1.0 } else { 0.0 }).collect();
        enc.hidden.weight = Tensor::matrix(d, d, eye.clone()).unwrap();
        enc.output.weight = Tensor::matrix(d, d, eye).unwrap();
        RefactorModel {
            encoder_a: enc.clone(),
            encoder_c: enc,
        }
    }

    fn sample_pair(a: Vec<f64>, c: Vec<f64>, alpha: f64) -> (ActionSample, CouplingSample) {
        (
            ActionSample {
                video_id: "v".into(),
                video_index: 0,
                instance_index: 0,
                class_id: 0,
                snippets: vec![0],
                feature: a,
            },
            CouplingSample {
                video_id: "v".into(),
                video_index: 0,
                snippet_index: 1,
                feature: c,
                matched_action: 0,
                rank: 0,
                similarity: alpha,
            },
        )
    }

    #[test]
    fn refactor_loss_with_identity_encoders() {
        let m = identity_model(2);
        let (a, c) = sample_pair(vec![1.0, 0.0], vec![0.0, 1.0], 0.75);
        assert!((loss_refactor(&a, &c, &m, 0.0).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn zero_alpha_leaves_only_kl() {
        let m = RefactorModel::new(
            EncoderDims {
                input: 4,
                hidden: 6,
                output: 3,
            },
            2,
        );
        let (a, c) = sample_pair(vec![0.2, -0.4, 1.0, 0.3], vec![0.5, 0.1, -0.7, 0.9], 0.0);
        let beta = 0.01;
        let got = loss_refactor(&a, &c, &m, beta).unwrap();
        let xa = Tensor::matrix(1, 4, a.feature.clone()).unwrap();
        let xc = Tensor::matrix(1, 4, c.feature.clone()).unwrap();
        let expect = beta
            * (kl(m.encoder_c.apply(&xa).unwrap().data()).unwrap()
                + kl(m.encoder_c.apply(&xc).unwrap().data()).unwrap())
            / 2.0;
        assert!((got - expect).abs() < 1e-14);
    }

    /// Recomputes the refactor objective by hand from encoder outputs.
    #[test]
    fn refactor_loss_matches_hand_chained_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = RefactorModel::new(
            EncoderDims {
                input: 5,
                hidden: 7,
                output: 4,
            },
            8,
        );
        for _ in 0..20 {
            let a = rand_tensor(&mut rng, &[1, 5]);
            let c = rand_tensor(&mut rng, &[1, 5]);
            let alpha = 0.83;
            let (ps, pc) = sample_pair(a.data().to_vec(), c.data().to_vec(), alpha);
            let got = loss_refactor(&ps, &pc, &m, DEFAULT_BETA_TEST).unwrap();

            let cos = |u: &[f64], v: &[f64]| {
                let d: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
                d / (u.iter().map(|x| x * x).sum::<f64>().sqrt() * v.iter().map(|x| x * x).sum::<f64>().sqrt())
            };
            let klh = |x: &[f64]| {
                let n = x.len() as f64;
                let mu = x.iter().sum::<f64>() / n;
                let var = (x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).max(1e-8);
                0.5 * n * (mu * mu + var - var.ln() - 1.0)
            };
            let fa = m.encoder_a.apply(&a).unwrap();
            let fca = m.encoder_a.apply(&c).unwrap();
            let ga = m.encoder_c.apply(&a).unwrap();
            let gc = m.encoder_c.apply(&c).unwrap();
            let l_a = cos(fa.data(), fca.data()).max(0.0);
            let l_c = 1.0 - cos(ga.data(), gc.data());
            let expect = alpha * (l_a + l_c) + DEFAULT_BETA_TEST * (klh(ga.data()) + klh(gc.data())) / 2.0;
            assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        }
    }

    const DEFAULT_BETA_TEST: f64 = 0.001;

    fn grad_check(name: &str, build: impl Fn(&mut Tape, Var) -> Option<Var>, rng: &mut ChaCha8Rng, shape: &[usize]) {
        let mut checked = 0;
        while checked < 100 {
            let x0 = rand_tensor(rng, shape);
            let mut tape = Tape::new();
            let x = tape.param(x0.clone());
            let Some(l) = build(&mut tape, x) else { continue };
            let g = tape.backward(l).unwrap().wrt(x);
            let fd = numeric_grad(&x0, |xp| {
                let mut t = Tape::new();
                let x = t.constant(xp.clone());
                let l = build(&mut t, x).unwrap();
                t.value(l).item()
            });
            let err = max_rel_error(&g, &fd);
            assert!(err <= 1e-5, "{name}: rel err {err}");
            checked += 1;
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let split = |t: &mut Tape, x: Var| {
            let a = t.gather_rows(x, &[0]).unwrap();
            let c = t.gather_rows(x, &[1]).unwrap();
            (a, c)
        };
        grad_check(
            "loss_a",
            |t, x| {
                let (a, c) = split(t, x);
                let cos = t.row_cosine(a, c).unwrap();
                if t.value(cos).item().abs() < 1e-3 {
                    return None;
                }
                let l = loss_a(t, a, c).unwrap();
                Some(t.sum(l))
            },
            &mut rng,
            &[2, 8],
        );
        grad_check(
            "loss_c",
            |t, x| {
                let (a, c) = split(t, x);
                let l = loss_c(t, a, c).unwrap();
                Some(t.sum(l))
            },
            &mut rng,
            &[2, 8],
        );
        grad_check(
            "loss_kl",
            |t, x| {
                let l = loss_kl(t, x).unwrap();
                Some(t.sum(l))
            },
            &mut rng,
            &[1, 8],
        );
    }

    #[test]
    fn loss_bounds_hold_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let x = rand_tensor(&mut rng, &[2, 6]);
            let (a, c) = (x.row(0), x.row(1));
            let la = eval2(loss_a, a, c).unwrap();
            let lc = eval2(loss_c, a, c).unwrap();
            assert!((0.0..=1.0).contains(&la));
            assert!((0.0..=2.0).contains(&lc));
            assert!(kl(a).unwrap() >= 0.0);
        }
    }
}
