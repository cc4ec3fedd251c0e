use alloc::format;
use alloc::vec::Vec;

use super::HeadOutputs;
use crate::error::{dim_err, Result};
use crate::evalkit::tiou_unchecked;
use crate::numkit::{Tape, Tensor, Var};
use crate::video::ActionInstance;

/// Added inside the logarithms of the boundary loss.
pub const BOUNDARY_EPS: f64 = 1e-12;

/// Per-snippet 0/1 start and end labels.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryLabels {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

/// A snippet is a start positive iff its center lies within
/// `[t_s − ratio·d, t_s + ratio·d]` of some instance of duration `d`;
/// likewise for ends.
pub fn boundary_labels(
    len: usize,
    snippet_duration_s: f64,
    instances: &[ActionInstance],
    ratio: f64,
) -> BoundaryLabels {
    let mut start = alloc::vec![0.0; len];
    let mut end = alloc::vec![0.0; len];
    for i in 0..len {
        let t = (i as f64 + 0.5) * snippet_duration_s;
        for inst in instances {
            let r = ratio * inst.duration();
            if (t - inst.t_start).abs() <= r {
                start[i] = 1.0;
            }
            if (t - inst.t_end).abs() <= r {
                end[i] = 1.0;
            }
        }
    }
    BoundaryLabels { start, end }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundaryLoss {
    pub loss: Var,
    /// True when either curve had no positive snippet.
    pub missing_positives: bool,
}

fn balanced_bce(tape: &mut Tape, p: Var, y: &[f64]) -> Result<(Var, bool)> {
    if tape.value(p).len() != y.len() {
        return Err(dim_err(
            "boundary_loss",
            format!("{} probabilities vs {} labels", tape.value(p).len(), y.len()),
        ));
    }
    let n_pos = y.iter().filter(|v| **v > 0.5).count();
    let n_neg = y.len() - n_pos;
    let w_pos = if n_pos == 0 || n_neg == 0 {
        1.0
    } else {
        n_neg as f64 / n_pos as f64
    };
    let pos_w: Vec<f64> = y.iter().map(|v| v * w_pos).collect();
    let neg_w: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let shifted = tape.affine(p, 1.0, BOUNDARY_EPS);
    let lp = tape.ln(shifted)?;
    let flipped = tape.affine(p, -1.0, 1.0 + BOUNDARY_EPS);
    let lq = tape.ln(flipped)?;
    let a = tape.mul_const(lp, &pos_w)?;
    let b = tape.mul_const(lq, &neg_w)?;
    let t = tape.add(a, b)?;
    let s = tape.sum(t);
    Ok((tape.affine(s, -1.0, 0.0), n_pos == 0))
}

/// Class-balanced binary logistic loss on both curves, summed over snippets:
/// `L_start + γ·L_end`. Positives are weighted by the negative/positive count
/// ratio; a curve without positives is scored on its negatives alone.
pub fn boundary_loss(
    tape: &mut Tape,
    p_start: Var,
    p_end: Var,
    labels: &BoundaryLabels,
    gamma: f64,
) -> Result<BoundaryLoss> {
    let (ls, ms) = balanced_bce(tape, p_start, &labels.start)?;
    let (le, me) = balanced_bce(tape, p_end, &labels.end)?;
    let le = tape.affine(le, gamma, 0.0);
    let loss = tape.add(ls, le)?;
    if ms || me {
        log::debug!("boundary loss computed without positives on one curve");
    }
    Ok(BoundaryLoss {
        loss,
        missing_positives: ms || me,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetConfig {
    /// Minimum tIoU for a proposal to take its best instance's class.
    pub foreground_tiou: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self { foreground_tiou: 0.5 }
    }
}

/// Training target of one proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    /// Ground-truth class, or background (`n_classes`).
    pub class: usize,
    /// Best tIoU against any instance; the completeness label.
    pub tiou: f64,
    /// `((g_c − c)/l, ln(g_l/l))` for foreground proposals.
    pub regression: Option<[f64; 2]>,
}

/// Assigns each extent the instance of maximal tIoU (earlier instance on
/// ties); foreground iff that tIoU reaches `foreground_tiou`.
pub fn assign_targets(
    extents: &[(f64, f64)],
    instances: &[ActionInstance],
    n_classes: usize,
    config: &TargetConfig,
) -> Vec<Target> {
    extents
        .iter()
        .map(|&(s, e)| {
            let mut best: Option<(&ActionInstance, f64)> = None;
            for inst in instances {
                let o = tiou_unchecked((s, e), (inst.t_start, inst.t_end));
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((inst, o));
                }
            }
            match best {
                Some((g, o)) if o >= config.foreground_tiou => {
                    let (c, l) = (0.5 * (s + e), e - s);
                    let (gc, gl) = (0.5 * (g.t_start + g.t_end), g.t_end - g.t_start);
                    Target {
                        class: g.class_id,
                        tiou: o,
                        regression: Some([(gc - c) / l, libm::log(gl / l)]),
                    }
                }
                other => Target {
                    class: n_classes,
                    tiou: other.map_or(0.0, |(_, o)| o),
                    regression: None,
                },
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub completeness: f64,
    pub regression: f64,
    pub margin: f64,
    /// Proposals at or above this tIoU must outscore ...
    pub complete_tiou: f64,
    /// ... proposals below this one.
    pub incomplete_tiou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            completeness: 0.5,
            regression: 0.5,
            margin: 0.2,
            complete_tiou: 0.7,
            incomplete_tiou: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DetectionLoss {
    pub loss: Var,
    pub classification: f64,
    pub completeness: Option<f64>,
    pub regression: Option<f64>,
}

/// `L_cls + λ₁·L_com + λ₂·L_reg`: mean cross-entropy, mean pairwise hinge
/// `max(0, margin − (s_i − s_j))` over (complete, incomplete) pairs, and mean
/// smooth-L1 of the offsets over foreground proposals. Terms without
/// qualifying proposals are omitted.
pub fn detection_loss(
    tape: &mut Tape,
    heads: &HeadOutputs,
    targets: &[Target],
    weights: &LossWeights,
) -> Result<DetectionLoss> {
    let p = tape.value(heads.logits).rows();
    if targets.len() != p {
        return Err(dim_err(
            "detection_loss",
            format!("{} targets for {p} proposals", targets.len()),
        ));
    }
    let classes: Vec<usize> = targets.iter().map(|t| t.class).collect();
    let xent = tape.softmax_xent(heads.logits, &classes)?;
    let mut loss = tape.mean(xent);
    let classification = tape.value(loss).item();

    let hi: Vec<usize> = (0..p).filter(|&i| targets[i].tiou >= weights.complete_tiou).collect();
    let lo: Vec<usize> = (0..p).filter(|&i| targets[i].tiou < weights.incomplete_tiou).collect();
    let mut completeness = None;
    if !hi.is_empty() && !lo.is_empty() {
        let (mut a, mut b) = (
            Vec::with_capacity(hi.len() * lo.len()),
            Vec::with_capacity(hi.len() * lo.len()),
        );
        for &i in &hi {
            for &j in &lo {
                a.push(i);
                b.push(j);
            }
        }
        let sa = tape.select(heads.completeness, &a)?;
        let sb = tape.select(heads.completeness, &b)?;
        let gap = tape.sub(sa, sb)?;
        let h = tape.affine(gap, -1.0, weights.margin);
        let h = tape.relu(h);
        let h = tape.mean(h);
        completeness = Some(tape.value(h).item());
        let h = tape.affine(h, weights.completeness, 0.0);
        loss = tape.add(loss, h)?;
    }

    let fg: Vec<usize> = (0..p).filter(|&i| targets[i].regression.is_some()).collect();
    let mut regression = None;
    if fg.is_empty() {
        log::debug!("no foreground proposals; regression term omitted");
    } else {
        let off = tape.gather_rows(heads.offsets, &fg)?;
        let goal: Vec<f64> = fg.iter().flat_map(|&i| targets[i].regression.unwrap()).collect();
        let goal = tape.constant(Tensor::matrix(fg.len(), 2, goal)?);
        let d = tape.sub(off, goal)?;
        let r = tape.smooth_l1(d);
        let r = tape.sum(r);
        let r = tape.affine(r, 1.0 / fg.len() as f64, 0.0);
        regression = Some(tape.value(r).item());
        let r = tape.affine(r, weights.regression, 0.0);
        loss = tape.add(loss, r)?;
    }
    Ok(DetectionLoss {
        loss,
        classification,
        completeness,
        regression,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{Detector, DetectorConfig};
    use super::*;
    use crate::numkit::Span;
    use crate::testutil::{max_rel_error, numeric_grad, rand_tensor};
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn inst(s: f64, e: f64, k: usize) -> ActionInstance {
        ActionInstance {
            t_start: s,
            t_end: e,
            class_id: k,
        }
    }

    fn bl_value(ps: &[f64], pe: &[f64], labels: &BoundaryLabels) -> f64 {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::vector(ps.to_vec()).unwrap());
        let e = tape.constant(Tensor::vector(pe.to_vec()).unwrap());
        let l = boundary_loss(&mut tape, s, e, labels, 1.0).unwrap();
        tape.value(l.loss).item()
    }

    #[test]
    fn labels_use_duration_scaled_window() {
        let l = boundary_labels(30, 1.0, &[inst(10.0, 20.0, 0)], 0.1);
        let starts: Vec<usize> = (0..30).filter(|&i| l.start[i] == 1.0).collect();
        let ends: Vec<usize> = (0..30).filter(|&i| l.end[i] == 1.0).collect();
        assert_eq!(starts, vec![9, 10]);
        assert_eq!(ends, vec![19, 20]);
    }

    #[test]
    fn boundary_loss_examples() {
        let labels = boundary_labels(30, 1.0, &[inst(10.0, 20.0, 0)], 0.1);
        let perfect_s: Vec<f64> = labels
            .start
            .iter()
            .map(|y| if *y > 0.5 { 1.0 - 1e-13 } else { 1e-13 })
            .collect();
        let perfect_e: Vec<f64> = labels
            .end
            .iter()
            .map(|y| if *y > 0.5 { 1.0 - 1e-13 } else { 1e-13 })
            .collect();
        assert!(bl_value(&perfect_s, &perfect_e, &labels) < 1e-9);
        // p = 0.5: each curve has 2 positives weighted 28/2 and 28 negatives
        let half = vec![0.5; 30];
        let weighted = 2.0 * (2.0 * 14.0 + 28.0);
        let expect = core::f64::consts::LN_2 * weighted;
        assert!((bl_value(&half, &half, &labels) - expect).abs() < 1e-9);
    }

    #[test]
    fn boundary_loss_without_positives_flags_and_uses_negatives() {
        let labels = boundary_labels(10, 1.0, &[], 0.1);
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::vector(vec![0.5; 10]).unwrap());
        let out = boundary_loss(&mut tape, s, s, &labels, 1.0).unwrap();
        assert!(out.missing_positives);
        assert!((tape.value(out.loss).item() - 20.0 * core::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn boundary_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let l = rng.gen_range(4..20);
            let s0 = rng.gen_range(0.0..l as f64 - 2.0);
            let e0 = rng.gen_range(s0 + 1.0..l as f64);
            let labels = boundary_labels(l, 1.0, &[inst(s0, e0, 0)], 0.3);
            let logits = rand_tensor(&mut rng, &[l, 2]);
            let f = |x: &Tensor| {
                let mut tape = Tape::new();
                let v = tape.param(x.clone());
                let p = tape.sigmoid(v);
                let ps = tape.column(p, 0).unwrap();
                let pe = tape.column(p, 1).unwrap();
                let out = boundary_loss(&mut tape, ps, pe, &labels, 1.0).unwrap();
                let g = tape.backward(out.loss).unwrap().wrt(v);
                (tape.value(out.loss).item(), g)
            };
            let (_, analytic) = f(&logits);
            let numeric = numeric_grad(&logits, |x| f(x).0);
            worst = worst.max(max_rel_error(&analytic, &numeric));
        }
        assert!(worst <= 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn targets_follow_best_instance() {
        let g = [inst(0.0, 10.0, 1), inst(20.0, 30.0, 2)];
        let t = assign_targets(
            &[(0.0, 10.0), (18.0, 30.0), (10.0, 20.0)],
            &g,
            3,
            &TargetConfig::default(),
        );
        assert_eq!(
            t[0],
            Target {
                class: 1,
                tiou: 1.0,
                regression: Some([0.0, 0.0])
            }
        );
        assert_eq!(t[1].class, 2);
        let r = t[1].regression.unwrap();
        assert!((r[0] - (25.0 - 24.0) / 12.0).abs() < 1e-15 && (r[1] - libm::log(10.0 / 12.0)).abs() < 1e-15);
        assert_eq!(t[2].class, 3);
        assert_eq!(t[2].tiou, 0.0);
        // equal overlap with two instances goes to the earlier one
        let tie = assign_targets(
            &[(5.0, 25.0)],
            &[inst(0.0, 10.0, 0), inst(20.0, 30.0, 1)],
            2,
            &TargetConfig { foreground_tiou: 0.1 },
        );
        assert_eq!(tie[0].class, 0);
    }

    fn fixed_heads(tape: &mut Tape, off: Vec<f64>, logits: Vec<f64>, comp: Vec<f64>, k: usize) -> HeadOutputs {
        let p = comp.len();
        HeadOutputs {
            offsets: tape.param(Tensor::matrix(p, 2, off).unwrap()),
            logits: tape.param(Tensor::matrix(p, k, logits).unwrap()),
            completeness: tape.param(Tensor::matrix(p, 1, comp).unwrap()),
        }
    }

    #[test]
    fn detection_loss_vanishes_when_perfect() {
        let mut tape = Tape::new();
        let targets = [
            Target {
                class: 0,
                tiou: 0.9,
                regression: Some([0.1, -0.2]),
            },
            Target {
                class: 1,
                tiou: 0.1,
                regression: None,
            },
        ];
        let h = fixed_heads(
            &mut tape,
            vec![0.1, -0.2, 5.0, 5.0],
            vec![60.0, 0.0, 0.0, 60.0],
            vec![2.0, 1.0],
            2,
        );
        let out = detection_loss(&mut tape, &h, &targets, &LossWeights::default()).unwrap();
        assert!(tape.value(out.loss).item() < 1e-20);
        assert_eq!(out.completeness, Some(0.0));
        assert_eq!(out.regression, Some(0.0));
    }

    #[test]
    fn background_only_batch_is_classification_only() {
        let mut tape = Tape::new();
        let targets = [
            Target {
                class: 2,
                tiou: 0.0,
                regression: None,
            },
            Target {
                class: 2,
                tiou: 0.2,
                regression: None,
            },
        ];
        let h = fixed_heads(
            &mut tape,
            vec![1.0, 2.0, 3.0, 4.0],
            vec![0.1, 0.2, 0.3, 0.0, 0.5, -1.0],
            vec![0.3, -0.3],
            3,
        );
        let out = detection_loss(&mut tape, &h, &targets, &LossWeights::default()).unwrap();
        assert_eq!(out.regression, None);
        assert_eq!(out.completeness, None);
        assert_eq!(tape.value(out.loss).item(), out.classification);
    }

    #[test]
    fn detection_loss_gradient_matches_finite_differences() {
        // through RoI pooling and all three heads, w.r.t. the features
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        while checked < 100 {
            let l = rng.gen_range(8..16);
            let cfg = DetectorConfig {
                context: 1,
                boundary_hidden: 4,
                head_hidden: 5,
                bins: 4,
            };
            let det = Detector::new(3, 2, &cfg, rng.gen()).unwrap();
            let x0 = rand_tensor(&mut rng, &[l, 3]);
            let spans: Vec<Span> = (0..6)
                .map(|_| {
                    let s = rng.gen_range(0..l - 2);
                    Span {
                        start: s,
                        end: rng.gen_range(s + 1..=l),
                    }
                })
                .collect();
            let ext: Vec<(f64, f64)> = spans.iter().map(|s| (s.start as f64, s.end as f64)).collect();
            let gts = [inst(1.0, 5.0, 0), inst(6.0, l as f64, 1)];
            let targets = assign_targets(&ext, &gts, 2, &TargetConfig::default());
            let run = |x: &Tensor| {
                let mut tape = Tape::new();
                let vars = det.bind(&mut tape, true);
                let xv = tape.param(x.clone());
                let h = det.heads(&mut tape, &vars, xv, &spans).unwrap();
                let out = detection_loss(&mut tape, &h, &targets, &LossWeights::default()).unwrap();
                // distance to the hinge and smooth-L1 kinks
                let comp = tape.value(h.completeness).data().to_vec();
                let off = tape.value(h.offsets).data().to_vec();
                let g = tape.backward(out.loss).unwrap().wrt(xv);
                (tape.value(out.loss).item(), g, comp, off)
            };
            let (_, analytic, comp, off) = run(&x0);
            let near_kink = comp.iter().enumerate().any(|(i, a)| {
                comp.iter()
                    .enumerate()
                    .any(|(j, b)| i != j && ((a - b) - 0.2).abs() < 1e-3)
            }) || targets.iter().enumerate().any(|(i, t)| {
                t.regression.is_some_and(|r| {
                    ((off[2 * i] - r[0]).abs() - 1.0).abs() < 1e-3 || ((off[2 * i + 1] - r[1]).abs() - 1.0).abs() < 1e-3
                })
            });
            // argmax ties inside a bin make pooling non-differentiable
            let mut sorted = x0.data().to_vec();
            sorted.sort_by(f64::total_cmp);
            let close = sorted.windows(2).any(|w| w[1] - w[0] < 1e-4);
            if near_kink || close {
                continue;
            }
            let numeric = numeric_grad(&x0, |x| run(x).0);
            worst = worst.max(max_rel_error(&analytic, &numeric));
            checked += 1;
        }
        assert!(worst <= 1e-5, "worst relative error {worst}");
    }
}
