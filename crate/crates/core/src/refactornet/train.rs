use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{pair_batch_loss, RefactorModel};
use crate::error::{Error, Result};
use crate::numkit::{Adam, AdamConfig, Tape};
use crate::sampler::SamplePairs;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1Config {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Full-pass statistics after an epoch (epoch 0 is the initial state).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub stats: PairStats,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairStats {
    /// Mean of `α(L_A + L_C)`.
    pub objective: f64,
    pub loss_a: f64,
    pub loss_c: f64,
    pub mean_cos_a: f64,
    pub mean_cos_c: f64,
}

/// Evaluates the decoupling losses and raw encoder cosines over every pair.
pub fn evaluate_pairs(model: &RefactorModel, pairs: &SamplePairs) -> Result<PairStats> {
    if pairs.is_empty() {
        return Err(Error::Training("no pairs to evaluate".into()));
    }
    let batch: Vec<(&[f64], &[f64], f64)> = pairs
        .iter()
        .map(|(a, c)| (a.feature.as_slice(), c.feature.as_slice(), c.similarity))
        .collect();
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let out = pair_batch_loss(&mut tape, model, &vars, &batch, 0.0)?;

    let a = crate::numkit::Tensor::from_rows(&batch.iter().map(|b| b.0).collect::<Vec<_>>())?;
    let c = crate::numkit::Tensor::from_rows(&batch.iter().map(|b| b.1).collect::<Vec<_>>())?;
    let (a, c) = (tape.constant(a), tape.constant(c));
    let aa = model.encode_a(&mut tape, &vars, a)?;
    let ca = model.encode_a(&mut tape, &vars, c)?;
    let ac = model.encode_c(&mut tape, &vars, a)?;
    let cc = model.encode_c(&mut tape, &vars, c)?;
    let cos_a = tape.row_cosine(aa, ca)?;
    let cos_c = tape.row_cosine(ac, cc)?;
    let n = batch.len() as f64;
    Ok(PairStats {
        objective: tape.value(out.loss).item(),
        loss_a: out.mean_loss_a,
        loss_c: out.mean_loss_c,
        mean_cos_a: tape.value(cos_a).sum() / n,
        mean_cos_c: tape.value(cos_c).sum() / n,
    })
}

/// Trains both encoders on `α(L_A + L_C)` with Adam; the KL term is left to
/// the joint stage. Returns per-epoch statistics starting from epoch 0.
pub fn train_stage1(pairs: &SamplePairs, model: &mut RefactorModel, config: &Stage1Config) -> Result<Vec<Stage1Epoch>> {
    if pairs.is_empty() {
        return Err(Error::Training("stage 1 needs at least one sample pair".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("stage 1 batch size must be positive".into()));
    }
    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let mut history = Vec::with_capacity(config.epochs + 1);
    history.push(Stage1Epoch {
        epoch: 0,
        stats: evaluate_pairs(model, pairs)?,
    });
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&[f64], &[f64], f64)> = chunk
                .iter()
                .map(|&i| {
                    let c = &pairs.couplings[i];
                    let a = &pairs.actions[c.matched_action];
                    (a.feature.as_slice(), c.feature.as_slice(), c.similarity)
                })
                .collect();
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let out = pair_batch_loss(&mut tape, model, &vars, &batch, 0.0)?;
            let mut grads = tape.backward(out.loss)?;
            let g: Vec<_> = vars.all().iter().map(|v| grads.take(*v)).collect();
            adam.step(&mut model.tensors_mut(), &g)?;
        }
        history.push(Stage1Epoch {
            epoch,
            stats: evaluate_pairs(model, pairs)?,
        });
    }
    Ok(history)
}
