//! Boundary-based proposal generation and proposal refinement.
//!
//! A boundary predictor scores every snippet as a start or end; peaks are
//! paired into proposals, each proposal is RoI max-pooled into a fixed-size
//! vector and three heads predict boundary offsets, class scores (with a
//! background class) and completeness.

mod loss;

pub use loss::{
    assign_targets, boundary_labels, boundary_loss, detection_loss, BoundaryLabels, BoundaryLoss, DetectionLoss,
    LossWeights, Target, TargetConfig, BOUNDARY_EPS,
};

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::numkit::{Mlp, MlpVars, Span, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    /// Neighbouring snippets on each side fed to the boundary predictor.
    pub context: usize,
    pub boundary_hidden: usize,
    pub head_hidden: usize,
    pub bins: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            context: 1,
            boundary_hidden: 64,
            head_hidden: 64,
            bins: 16,
        }
    }
}

/// Boundary predictor plus localization, classification and completeness
/// heads. Class `n_classes` is background.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub boundary: Mlp,
    pub localization: Mlp,
    pub classification: Mlp,
    pub completeness: Mlp,
    pub context: usize,
    pub bins: usize,
    pub n_classes: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct DetectorVars {
    pub boundary: MlpVars,
    pub localization: MlpVars,
    pub classification: MlpVars,
    pub completeness: MlpVars,
}

impl DetectorVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = Vec::with_capacity(16);
        for m in [self.boundary, self.localization, self.classification, self.completeness] {
            v.extend(m.all());
        }
        v
    }
}

/// Head outputs for a batch of `P` pooled proposals.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    /// `[P × 2]`: center shift relative to length, log length ratio.
    pub offsets: Var,
    /// `[P × (K+1)]`
    pub logits: Var,
    /// `[P × 1]`
    pub completeness: Var,
}

const HEAD_NAMES: [&str; 4] = ["boundary", "localization", "classification", "completeness"];

impl Detector {
    pub fn new(feature_dim: usize, n_classes: usize, config: &DetectorConfig, seed: u64) -> Result<Self> {
        if feature_dim == 0 || n_classes == 0 || config.bins == 0 {
            return Err(Error::Config("detector needs positive width, classes and bins".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pooled = config.bins * feature_dim;
        Ok(Self {
            boundary: Mlp::init(
                &mut rng,
                (2 * config.context + 1) * feature_dim,
                config.boundary_hidden,
                2,
            ),
            localization: Mlp::init(&mut rng, pooled, config.head_hidden, 2),
            classification: Mlp::init(&mut rng, pooled, config.head_hidden, n_classes + 1),
            completeness: Mlp::init(&mut rng, pooled, config.head_hidden, 1),
            context: config.context,
            bins: config.bins,
            n_classes,
        })
    }

    /// Snippet feature width the detector expects.
    pub fn feature_dim(&self) -> usize {
        self.boundary.in_dim() / (2 * self.context + 1)
    }

    pub fn background(&self) -> usize {
        self.n_classes
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DetectorVars {
        DetectorVars {
            boundary: self.boundary.bind(tape, trainable),
            localization: self.localization.bind(tape, trainable),
            classification: self.classification.bind(tape, trainable),
            completeness: self.completeness.bind(tape, trainable),
        }
    }

    fn check_width(&self, w: usize) -> Result<()> {
        if w != self.feature_dim() {
            return Err(Error::Config(format!(
                "feature width {w} does not match detector width {}",
                self.feature_dim()
            )));
        }
        Ok(())
    }

    /// `[L × 2]` start/end logits for a sequence `x: [L × W]`.
    pub fn boundary_logits(&self, tape: &mut Tape, vars: &DetectorVars, x: Var) -> Result<Var> {
        self.check_width(tape.value(x).cols())?;
        let input = context_window(tape, x, self.context)?;
        self.boundary.forward(tape, &vars.boundary, input)
    }

    /// Pools `spans` of `x` and runs the three heads.
    pub fn heads(&self, tape: &mut Tape, vars: &DetectorVars, x: Var, spans: &[Span]) -> Result<HeadOutputs> {
        self.check_width(tape.value(x).cols())?;
        let pooled = tape.roi_max_pool(x, spans, self.bins)?;
        Ok(HeadOutputs {
            offsets: self.localization.forward(tape, &vars.localization, pooled)?,
            logits: self.classification.forward(tape, &vars.classification, pooled)?,
            completeness: self.completeness.forward(tape, &vars.completeness, pooled)?,
        })
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = Vec::with_capacity(16);
        v.extend(self.boundary.tensors_mut());
        v.extend(self.localization.tensors_mut());
        v.extend(self.classification.tensors_mut());
        v.extend(self.completeness.tensors_mut());
        v
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut v = Vec::new();
        for (name, m) in HEAD_NAMES.iter().zip([
            &self.boundary,
            &self.localization,
            &self.classification,
            &self.completeness,
        ]) {
            v.extend(m.named(&format!("detector.{name}")));
        }
        let meta = [self.context as f64, self.bins as f64, self.n_classes as f64];
        v.push(("detector.meta".into(), Tensor::from_raw(vec![3], meta.to_vec())));
        v
    }

    pub fn from_named(blocks: &[(String, Tensor)]) -> Result<Self> {
        let meta = blocks
            .iter()
            .find(|(n, _)| n == "detector.meta")
            .map(|(_, t)| t.data().to_vec())
            .ok_or_else(|| dim_err("checkpoint", "missing block detector.meta".into()))?;
        if meta.len() != 3 || meta.iter().any(|v| *v < 0.0 || libm::trunc(*v) != *v) {
            return Err(dim_err("checkpoint", format!("bad detector.meta {meta:?}")));
        }
        let [context, bins, n_classes] = [meta[0] as usize, meta[1] as usize, meta[2] as usize];
        let get = |name: &str| Mlp::from_named(&format!("detector.{name}"), blocks);
        let det = Self {
            boundary: get("boundary")?,
            localization: get("localization")?,
            classification: get("classification")?,
            completeness: get("completeness")?,
            context,
            bins,
            n_classes,
        };
        let w = det.feature_dim();
        let ok = bins > 0
            && det.boundary.in_dim() == (2 * context + 1) * w
            && det.boundary.out_dim() == 2
            && [&det.localization, &det.classification, &det.completeness]
                .iter()
                .all(|m| m.in_dim() == bins * w)
            && det.localization.out_dim() == 2
            && det.classification.out_dim() == n_classes + 1
            && det.completeness.out_dim() == 1;
        if !ok {
            return Err(dim_err(
                "checkpoint",
                "detector blocks disagree with detector.meta".into(),
            ));
        }
        Ok(det)
    }
}

/// Stacks each row with its `context` neighbours on both sides (edges
/// replicated), giving `[L × (2·context+1)·W]`.
pub fn context_window(tape: &mut Tape, x: Var, context: usize) -> Result<Var> {
    if context == 0 {
        return Ok(x);
    }
    let l = tape.value(x).rows();
    let mut out: Option<Var> = None;
    for k in 0..=2 * context {
        let rows: Vec<usize> = (0..l).map(|i| (i + k).saturating_sub(context).min(l - 1)).collect();
        let shifted = tape.gather_rows(x, &rows)?;
        out = Some(match out {
            None => shifted,
            Some(o) => tape.concat_cols(o, shifted)?,
        });
    }
    Ok(out.unwrap())
}

/// Start and end probabilities of every snippet.
pub fn predict_boundaries(features: &Tensor, detector: &Detector) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let vars = detector.bind(&mut tape, false);
    let x = tape.constant(features.clone());
    let logits = detector.boundary_logits(&mut tape, &vars, x)?;
    let p = tape.sigmoid(logits);
    let p = tape.value(p);
    let start = (0..p.rows()).map(|i| p.row(i)[0]).collect();
    let end = (0..p.rows()).map(|i| p.row(i)[1]).collect();
    Ok((start, end))
}

/// Candidate segment covering snippets `[start_idx, end_idx)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub start_idx: usize,
    pub end_idx: usize,
    pub boundary_score: f64,
}

impl Proposal {
    pub fn span(&self) -> Span {
        Span {
            start: self.start_idx,
            end: self.end_idx,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalConfig {
    /// Peak threshold as a fraction of the curve's maximum.
    pub peak_threshold: f64,
    pub min_duration: usize,
    /// `None` means the video length.
    pub max_duration: Option<usize>,
    /// Keep only the best-scoring proposals; `None` keeps all.
    pub max_proposals: Option<usize>,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            peak_threshold: 0.5,
            min_duration: 2,
            max_duration: None,
            max_proposals: Some(200),
        }
    }
}

/// Ratio of the maximum above which every position is a candidate.
pub const NEAR_MAX_RATIO: f64 = 0.9;

/// Local maxima above `peak_threshold·max`, plus every position above
/// `0.9·max`.
pub fn boundary_candidates(p: &[f64], peak_threshold: f64) -> Vec<usize> {
    let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (0..p.len())
        .filter(|&i| {
            let peak = (i == 0 || p[i] > p[i - 1]) && (i + 1 == p.len() || p[i] >= p[i + 1]);
            (peak && p[i] > peak_threshold * max) || p[i] > NEAR_MAX_RATIO * max
        })
        .collect()
}

/// Pairs start and end candidates into proposals ordered by boundary score
/// (then start, then end).
pub fn generate_proposals(p_start: &[f64], p_end: &[f64], config: &ProposalConfig) -> Result<Vec<Proposal>> {
    if p_start.len() != p_end.len() {
        return Err(dim_err(
            "generate_proposals",
            format!("{} start vs {} end probabilities", p_start.len(), p_end.len()),
        ));
    }
    let l = p_start.len();
    let max_dur = config.max_duration.unwrap_or(l);
    let starts = boundary_candidates(p_start, config.peak_threshold);
    let ends = boundary_candidates(p_end, config.peak_threshold);
    let mut out = Vec::new();
    for &s in &starts {
        for &e in &ends {
            let d = e.saturating_sub(s);
            if e > s && d >= config.min_duration && d <= max_dur {
                out.push(Proposal {
                    start_idx: s,
                    end_idx: e,
                    boundary_score: p_start[s] * p_end[e],
                });
            }
        }
    }
    out.sort_by(|a, b| {
        b.boundary_score
            .total_cmp(&a.boundary_score)
            .then(a.start_idx.cmp(&b.start_idx))
            .then(a.end_idx.cmp(&b.end_idx))
    });
    if let Some(k) = config.max_proposals {
        out.truncate(k);
    }
    Ok(out)
}

/// RoI max-pooling of one span of an `L × W` sequence into `bins·W` values.
pub fn roi_pool(features: &Tensor, span: Span, bins: usize) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let out = tape.roi_max_pool(x, &[span], bins)?;
    Ok(tape.value(out).data().to_vec())
}

/// Applies `(Δcenter, Δlength)` to the extent `[start, end)` (snippet units)
/// and clamps to `[0, len]`. Falls back to the input extent if the clamped
/// result is empty.
pub fn apply_offsets(start: f64, end: f64, d_center: f64, d_length: f64, len: f64) -> (f64, f64) {
    let length = end - start;
    let center = 0.5 * (start + end) + d_center * length;
    let new_len = length * libm::exp(d_length);
    let s = (center - 0.5 * new_len).max(0.0);
    let e = (center + 0.5 * new_len).min(len);
    if e - s > 1e-9 * len.max(1.0) && s.is_finite() && e.is_finite() {
        (s, e)
    } else {
        (start.max(0.0), end.min(len))
    }
}

/// A proposal after the heads: refined extent in seconds, class scores over
/// `K+1` classes (background last) and a raw completeness score.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedProposal {
    pub proposal: Proposal,
    pub t_start: f64,
    pub t_end: f64,
    pub class_scores: Vec<f64>,
    pub completeness: f64,
    pub offsets: (f64, f64),
}

impl RefinedProposal {
    /// Best non-background class and its probability.
    pub fn top_class(&self) -> (usize, f64) {
        let k = self.class_scores.len() - 1;
        let mut best = (0, self.class_scores[0]);
        for (i, &p) in self.class_scores[..k].iter().enumerate() {
            if p > best.1 {
                best = (i, p);
            }
        }
        best
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| libm::exp(v - mx)).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Runs the heads on `proposals` of one `L × W` sequence and applies the
/// predicted offsets.
pub fn refine(
    features: &Tensor,
    proposals: &[Proposal],
    detector: &Detector,
    snippet_duration_s: f64,
) -> Result<Vec<RefinedProposal>> {
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let vars = detector.bind(&mut tape, false);
    let x = tape.constant(features.clone());
    let spans: Vec<Span> = proposals.iter().map(Proposal::span).collect();
    let h = detector.heads(&mut tape, &vars, x, &spans)?;
    let len = features.rows() as f64;
    let (off, logits, comp) = (tape.value(h.offsets), tape.value(h.logits), tape.value(h.completeness));
    Ok(proposals
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (dc, dl) = (off.row(i)[0], off.row(i)[1]);
            let (s, e) = apply_offsets(p.start_idx as f64, p.end_idx as f64, dc, dl, len);
            RefinedProposal {
                proposal: *p,
                t_start: s * snippet_duration_s,
                t_end: e * snippet_duration_s,
                class_scores: softmax(logits.row(i)),
                completeness: comp.row(i)[0],
                offsets: (dc, dl),
            }
        })
        .collect())
}
