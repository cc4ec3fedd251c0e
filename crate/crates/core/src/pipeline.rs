//! Joint training, inference and the end-to-end experiment runner.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::{
    assign_targets, boundary_labels, boundary_loss, detection_loss, generate_proposals, predict_boundaries, refine,
    Detector, DetectorConfig, LossWeights, Proposal, ProposalConfig, RefinedProposal, TargetConfig,
};
use crate::error::{Error, Result};
use crate::evalkit::{diagnostics, mean_ap, Diagnostics, EvalConfig, MapResult};
use crate::numkit::{Adam, AdamConfig, Span, Tape, Tensor, Var};
use crate::postproc::{fuse_confidence, soft_nms_grouped, PostprocConfig};
use crate::refactornet::{
    evaluate_pairs, loss_kl, pair_batch_loss, train_stage1, EncoderDims, PairStats, RefactorModel, Stage1Config,
    Stage1Epoch, DEFAULT_BETA,
};
use crate::sampler::{build_pairs, SamplePairs, SamplerConfig};
use crate::video::{Corpus, DetectionRecord, Video, VideoFeatureSequence};

/// Optional refactor encoders in front of a detector. Without encoders the
/// detector reads raw features (the baseline).
#[derive(Debug, Clone, PartialEq)]
pub struct System {
    pub refactor: Option<RefactorModel>,
    pub detector: Detector,
}

impl System {
    /// Features the detector sees for one video.
    pub fn detector_input(&self, features: &Tensor) -> Result<Tensor> {
        match &self.refactor {
            Some(m) => m.refactor_sequence(features),
            None => Ok(features.clone()),
        }
    }

    pub fn check(&self, raw_width: usize) -> Result<()> {
        let (inp, out) = match &self.refactor {
            Some(m) => (m.input_dim(), m.output_dim()),
            None => (raw_width, raw_width),
        };
        if inp != raw_width || out != self.detector.feature_dim() {
            return Err(Error::Config(format!(
                "features of width {raw_width} feed {} but the detector expects {}",
                out,
                self.detector.feature_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Config {
    pub epochs: usize,
    pub lr: f64,
    pub beta: f64,
    /// Include the KL term on the co-occurrence codes of every snippet.
    pub use_kl: bool,
    pub freeze_encoders: bool,
    pub gamma: f64,
    pub label_ratio: f64,
    pub weights: LossWeights,
    pub targets: TargetConfig,
    /// Candidate generation during training.
    pub proposals: ProposalConfig,
    pub proposals_per_video: usize,
    pub max_positive_fraction: f64,
    /// Randomly perturbed copies of each instance added to the candidates.
    pub jitter_per_instance: usize,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            beta: DEFAULT_BETA,
            use_kl: true,
            freeze_encoders: false,
            gamma: 1.0,
            label_ratio: 0.1,
            weights: LossWeights::default(),
            targets: TargetConfig::default(),
            proposals: ProposalConfig {
                max_proposals: Some(100),
                ..ProposalConfig::default()
            },
            proposals_per_video: 32,
            max_positive_fraction: 0.5,
            jitter_per_instance: 4,
            seed: 0,
        }
    }
}

/// Mean per-video losses over one pass (epoch 0 is before any update).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Epoch {
    pub epoch: usize,
    pub joint: f64,
    pub refactor: f64,
    pub boundary: f64,
    pub detection: f64,
}

struct StepLoss {
    joint: Var,
    refactor: f64,
    boundary: f64,
    detection: f64,
}

/// Training spans for one video: predicted proposals, the instances and
/// jittered instances, subsampled with a cap on positives.
fn training_spans(
    video: &Video,
    p_start: &[f64],
    p_end: &[f64],
    n_classes: usize,
    cfg: &Stage2Config,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Span, crate::detector::Target)>> {
    let f = &video.features;
    let l = f.len();
    let dur = f.snippet_duration_s;
    let mut spans: Vec<Span> = generate_proposals(p_start, p_end, &cfg.proposals)?
        .iter()
        .map(Proposal::span)
        .collect();
    for inst in &video.annotations.instances {
        let s = libm::round(inst.t_start / dur) as usize;
        let e = (libm::round(inst.t_end / dur) as usize).clamp(s + 1, l);
        spans.push(Span {
            start: s.min(l - 1),
            end: e,
        });
        let len = (e - s) as f64;
        for _ in 0..cfg.jitter_per_instance {
            let js = s as f64 + rng.gen_range(-0.25..0.25) * len;
            let je = e as f64 + rng.gen_range(-0.25..0.25) * len;
            let js = (libm::round(js).max(0.0) as usize).min(l - 1);
            let je = (libm::round(je) as usize).clamp(js + 1, l);
            spans.push(Span { start: js, end: je });
        }
    }
    spans.sort_by_key(|s| (s.start, s.end));
    spans.dedup();
    let ext: Vec<(f64, f64)> = spans
        .iter()
        .map(|s| (s.start as f64 * dur, s.end as f64 * dur))
        .collect();
    let targets = assign_targets(&ext, &video.annotations.instances, n_classes, &cfg.targets);
    let mut pos: Vec<usize> = (0..spans.len()).filter(|&i| targets[i].class != n_classes).collect();
    let mut neg: Vec<usize> = (0..spans.len()).filter(|&i| targets[i].class == n_classes).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let want = cfg.proposals_per_video.max(1);
    let n_pos = pos
        .len()
        .min(libm::ceil(want as f64 * cfg.max_positive_fraction) as usize);
    let n_neg = neg.len().min(want - n_pos);
    let n_pos = pos.len().min(want - n_neg);
    let mut pick: Vec<usize> = pos[..n_pos].iter().chain(&neg[..n_neg]).copied().collect();
    pick.sort_unstable();
    Ok(pick.into_iter().map(|i| (spans[i], targets[i])).collect())
}

#[allow(clippy::too_many_arguments)]
fn video_step(
    tape: &mut Tape,
    system: &System,
    video: &Video,
    pairs: &SamplePairs,
    pair_idx: &[usize],
    cfg: &Stage2Config,
    rng: &mut ChaCha8Rng,
    trainable_encoders: bool,
) -> Result<(
    StepLoss,
    Option<crate::refactornet::RefactorVars>,
    crate::detector::DetectorVars,
)> {
    let det = &system.detector;
    let rvars = system.refactor.as_ref().map(|m| m.bind(tape, trainable_encoders));
    let dvars = det.bind(tape, true);
    let raw = tape.constant(video.features.features.clone());
    let (x, codes) = match (&system.refactor, &rvars) {
        (Some(m), Some(v)) => {
            let (x, c) = m.forward(tape, v, raw)?;
            (x, Some(c))
        }
        _ => (raw, None),
    };
    let l = video.features.len();

    let logits = det.boundary_logits(tape, &dvars, x)?;
    let p = tape.sigmoid(logits);
    let ps = tape.column(p, 0)?;
    let pe = tape.column(p, 1)?;
    let labels = boundary_labels(
        l,
        video.features.snippet_duration_s,
        &video.annotations.instances,
        cfg.label_ratio,
    );
    let bl = boundary_loss(tape, ps, pe, &labels, cfg.gamma)?;
    let bl = tape.affine(bl.loss, 1.0 / l as f64, 0.0);
    let boundary = tape.value(bl).item();

    let (cur_s, cur_e) = (tape.value(ps).data().to_vec(), tape.value(pe).data().to_vec());
    let batch = training_spans(video, &cur_s, &cur_e, det.n_classes, cfg, rng)?;
    let spans: Vec<Span> = batch.iter().map(|b| b.0).collect();
    let targets: Vec<_> = batch.iter().map(|b| b.1).collect();
    let heads = det.heads(tape, &dvars, x, &spans)?;
    let dl = detection_loss(tape, &heads, &targets, &cfg.weights)?;
    let detection = tape.value(dl.loss).item();
    let mut joint = tape.add(bl, dl.loss)?;

    let mut refactor = 0.0;
    if let (Some(m), Some(v), Some(codes)) = (&system.refactor, &rvars, codes) {
        if !pair_idx.is_empty() {
            let batch: Vec<(&[f64], &[f64], f64)> = pair_idx
                .iter()
                .map(|&i| {
                    let c = &pairs.couplings[i];
                    (
                        pairs.actions[c.matched_action].feature.as_slice(),
                        c.feature.as_slice(),
                        c.similarity,
                    )
                })
                .collect();
            let pl = pair_batch_loss(tape, m, v, &batch, 0.0)?;
            refactor += tape.value(pl.loss).item();
            joint = tape.add(joint, pl.loss)?;
        }
        if cfg.use_kl && cfg.beta != 0.0 {
            let kl = loss_kl(tape, codes)?;
            let kl = tape.mean(kl);
            let kl = tape.affine(kl, cfg.beta, 0.0);
            refactor += tape.value(kl).item();
            joint = tape.add(joint, kl)?;
        }
    }
    Ok((
        StepLoss {
            joint,
            refactor,
            boundary,
            detection,
        },
        rvars,
        dvars,
    ))
}

fn step_rng(seed: u64, epoch: usize, video: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
    rng.set_stream(((epoch as u64) << 32) | video as u64);
    rng
}

/// Trains the detector, and the encoders unless frozen, one video per step
/// on boundary loss (divided by video length) plus detection loss plus, with
/// encoders, the pair decoupling losses of that video and `β·KL` over all of
/// its snippets.
pub fn train_stage2(
    corpus: &Corpus,
    pairs: &SamplePairs,
    system: &mut System,
    cfg: &Stage2Config,
) -> Result<Vec<Stage2Epoch>> {
    let width = corpus
        .feature_dim()
        .ok_or_else(|| Error::Training("stage 2 needs at least one video".into()))?;
    system.check(width)?;
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut det_opt = Adam::new(adam_cfg);
    let mut enc_opt = Adam::new(adam_cfg);
    let train_enc = system.refactor.is_some() && !cfg.freeze_encoders;
    let per_video: Vec<Vec<usize>> = (0..corpus.videos.len()).map(|v| pairs.for_video(v)).collect();

    let mut history = Vec::with_capacity(cfg.epochs + 1);
    let mut order: Vec<usize> = (0..corpus.videos.len()).collect();
    for epoch in 0..=cfg.epochs {
        if epoch > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(epoch as u64);
            order.shuffle(&mut rng);
        }
        let mut sums = [0.0; 4];
        for &vi in &order {
            let video = &corpus.videos[vi];
            let mut rng = step_rng(cfg.seed, epoch, vi);
            let mut tape = Tape::new();
            let (loss, rvars, dvars) = video_step(
                &mut tape,
                system,
                video,
                pairs,
                &per_video[vi],
                cfg,
                &mut rng,
                train_enc,
            )?;
            let joint = tape.value(loss.joint).item();
            if !joint.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("stage 2 loss on {} in epoch {epoch}", video.id()),
                });
            }
            for (s, v) in sums
                .iter_mut()
                .zip([joint, loss.refactor, loss.boundary, loss.detection])
            {
                *s += v;
            }
            if epoch == 0 {
                continue;
            }
            let mut grads = tape.backward(loss.joint)?;
            let g: Vec<Tensor> = dvars.all().iter().map(|v| grads.take(*v)).collect();
            det_opt.step(&mut system.detector.tensors_mut(), &g)?;
            if let (true, Some(rv), Some(m)) = (train_enc, rvars, system.refactor.as_mut()) {
                let g: Vec<Tensor> = rv.all().iter().map(|v| grads.take(*v)).collect();
                enc_opt.step(&mut m.tensors_mut(), &g)?;
            }
        }
        let n = order.len().max(1) as f64;
        history.push(Stage2Epoch {
            epoch,
            joint: sums[0] / n,
            refactor: sums[1] / n,
            boundary: sums[2] / n,
            detection: sums[3] / n,
        });
    }
    Ok(history)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InferConfig {
    pub proposals: ProposalConfig,
    pub postproc: PostprocConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoInference {
    pub video_id: String,
    pub p_start: Vec<f64>,
    pub p_end: Vec<f64>,
    pub refined: Vec<RefinedProposal>,
    pub detections: Vec<DetectionRecord>,
}

impl VideoInference {
    /// One record per refined proposal under its top action class, scored
    /// like a detection; input for the high-quality proposal diagnostics.
    pub fn top_class_records(&self) -> Vec<DetectionRecord> {
        self.refined
            .iter()
            .filter(|r| r.t_start < r.t_end)
            .map(|r| {
                let (class_id, p) = r.top_class();
                let squash = 1.0 / (1.0 + libm::exp(-r.completeness));
                DetectionRecord {
                    video_id: self.video_id.clone(),
                    t_start: r.t_start,
                    t_end: r.t_end,
                    class_id,
                    confidence: (p * squash).clamp(0.0, 1.0),
                }
            })
            .collect()
    }
}

/// Refactor, boundaries, proposals, heads, fusion and soft-NMS for one video.
pub fn infer_video(system: &System, video: &VideoFeatureSequence, cfg: &InferConfig) -> Result<VideoInference> {
    system.check(video.dim())?;
    let x = system.detector_input(&video.features)?;
    let (p_start, p_end) = predict_boundaries(&x, &system.detector)?;
    let proposals = generate_proposals(&p_start, &p_end, &cfg.proposals)?;
    let refined = refine(&x, &proposals, &system.detector, video.snippet_duration_s)?;
    let fused: Vec<DetectionRecord> = refined
        .iter()
        .filter(|r| r.t_start < r.t_end)
        .flat_map(|r| fuse_confidence(r, &video.video_id, cfg.postproc.class_floor))
        .collect();
    let detections = soft_nms_grouped(fused, cfg.postproc.sigma, cfg.postproc.score_floor);
    Ok(VideoInference {
        video_id: video.video_id.clone(),
        p_start,
        p_end,
        refined,
        detections,
    })
}

pub fn infer_corpus(system: &System, corpus: &Corpus, cfg: &InferConfig) -> Result<Vec<VideoInference>> {
    corpus
        .videos
        .iter()
        .map(|v| infer_video(system, &v.features, cfg))
        .collect()
}

/// What sits in front of the detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Raw features straight into the detector.
    Baseline,
    /// Refactored features; `kl` toggles the KL term in stage 2.
    Refactored { kl: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub sampler: SamplerConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub detector: DetectorConfig,
    pub infer: InferConfig,
    pub tiou_grid: Vec<f64>,
    /// Encoder hidden width; `None` means the input width.
    pub encoder_hidden: Option<usize>,
    /// Encoder output width; `None` means half the input width.
    pub encoder_code: Option<usize>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: None,
            encoder_code: None,
            sampler: SamplerConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            detector: DetectorConfig::default(),
            infer: InferConfig::default(),
            tiou_grid: EvalConfig::default_grid(1).tiou_grid,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub variant: Variant,
    pub system: System,
    pub stage1: Vec<Stage1Epoch>,
    /// Decoupling statistics on pairs mined from the test split.
    pub held_out_pairs: Option<PairStats>,
    pub stage2: Vec<Stage2Epoch>,
    pub map: MapResult,
    pub diagnostics: Option<Diagnostics>,
    pub detections: Vec<DetectionRecord>,
}

/// Builds an untrained system for `variant` on features of width `width`.
pub fn init_system(variant: Variant, width: usize, n_classes: usize, cfg: &ExperimentConfig) -> Result<System> {
    let refactor = match variant {
        Variant::Baseline => None,
        Variant::Refactored { .. } => {
            let d = EncoderDims::for_input(width);
            let dims = EncoderDims {
                hidden: cfg.encoder_hidden.unwrap_or(d.hidden),
                output: cfg.encoder_code.unwrap_or(d.output),
                ..d
            };
            if dims.hidden == 0 || dims.output < 2 {
                return Err(Error::Config(format!("encoder dims {dims:?} too small")));
            }
            Some(RefactorModel::new(dims, cfg.seed))
        }
    };
    let det_width = refactor.as_ref().map_or(width, RefactorModel::output_dim);
    let detector = Detector::new(det_width, n_classes, &cfg.detector, cfg.seed.wrapping_add(1))?;
    Ok(System { refactor, detector })
}

/// Everything produced by training one system.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub system: System,
    pub pairs: SamplePairs,
    /// Encoders right after stage 1.
    pub stage1_model: Option<RefactorModel>,
    pub stage1: Vec<Stage1Epoch>,
    pub stage2: Vec<Stage2Epoch>,
}

/// Mines pairs, runs stage 1 (unless `resume` supplies trained encoders)
/// and stage 2.
pub fn train_system(
    train: &Corpus,
    variant: Variant,
    cfg: &ExperimentConfig,
    resume: Option<RefactorModel>,
) -> Result<TrainOutcome> {
    let width = train
        .feature_dim()
        .ok_or_else(|| Error::Training("empty training split".into()))?;
    let mut system = init_system(variant, width, train.n_classes(), cfg)?;
    let pairs = build_pairs(train, cfg.sampler);
    let mut stage1 = Vec::new();
    let mut s2 = cfg.stage2;
    s2.seed = cfg.seed;
    if let Variant::Refactored { kl } = variant {
        s2.use_kl = kl;
        match resume {
            Some(m) => {
                if m.input_dim() != width {
                    return Err(Error::Config(format!(
                        "resumed encoders take width {}, corpus has {width}",
                        m.input_dim()
                    )));
                }
                let det_width = m.output_dim();
                system.detector = Detector::new(det_width, train.n_classes(), &cfg.detector, cfg.seed.wrapping_add(1))?;
                system.refactor = Some(m);
            }
            None => {
                let s1 = Stage1Config {
                    seed: cfg.seed,
                    ..cfg.stage1
                };
                stage1 = train_stage1(&pairs, system.refactor.as_mut().unwrap(), &s1)?;
                let (first, last) = (stage1[0].stats, stage1[stage1.len() - 1].stats);
                if stage1.len() > 1 && last.loss_a + last.loss_c >= first.loss_a + first.loss_c {
                    log::warn!(
                        "stage 1 decoupling loss did not decrease ({:.6} -> {:.6})",
                        first.loss_a + first.loss_c,
                        last.loss_a + last.loss_c
                    );
                }
            }
        }
    }
    let stage1_model = system.refactor.clone();
    let stage2 = train_stage2(train, &pairs, &mut system, &s2)?;
    Ok(TrainOutcome {
        system,
        pairs,
        stage1_model,
        stage1,
        stage2,
    })
}

/// Trains `variant` on `train` and evaluates it on `test`.
pub fn run_experiment(
    train: &Corpus,
    test: &Corpus,
    variant: Variant,
    cfg: &ExperimentConfig,
) -> Result<ExperimentResult> {
    let out = train_system(train, variant, cfg, None)?;
    let held_out_pairs = match &out.stage1_model {
        Some(m) => {
            let test_pairs = build_pairs(test, cfg.sampler);
            if test_pairs.is_empty() {
                None
            } else {
                Some(evaluate_pairs(m, &test_pairs)?)
            }
        }
        None => None,
    };
    let runs = infer_corpus(&out.system, test, &cfg.infer)?;
    let eval = EvalConfig {
        tiou_grid: cfg.tiou_grid.clone(),
        n_classes: test.n_classes(),
    };
    let (map, diagnostics, detections) = evaluate_runs(&runs, test, &eval)?;
    Ok(ExperimentResult {
        variant,
        system: out.system,
        stage1: out.stage1,
        held_out_pairs,
        stage2: out.stage2,
        map,
        diagnostics,
        detections,
    })
}

/// mAP over the final detections and diagnostics over top-class proposals.
pub fn evaluate_runs(
    runs: &[VideoInference],
    corpus: &Corpus,
    eval: &EvalConfig,
) -> Result<(MapResult, Option<Diagnostics>, Vec<DetectionRecord>)> {
    let detections: Vec<DetectionRecord> = runs.iter().flat_map(|r| r.detections.iter().cloned()).collect();
    let top: Vec<DetectionRecord> = runs.iter().flat_map(|r| r.top_class_records()).collect();
    let gts: Vec<_> = corpus.videos.iter().map(|v| v.annotations.clone()).collect();
    Ok((mean_ap(&detections, &gts, eval)?, diagnostics(&top, &gts)?, detections))
}
