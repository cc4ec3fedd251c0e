//! Pipeline configuration: defaults, a TOML file, then `key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use refactornet_core::detector::{DetectorConfig, LossWeights, ProposalConfig, TargetConfig};
use refactornet_core::evalkit::EvalConfig;
use refactornet_core::pipeline::{ExperimentConfig, InferConfig, Stage2Config};
use refactornet_core::postproc::PostprocConfig;
use refactornet_core::refactornet::Stage1Config;
use refactornet_core::sampler::SamplerConfig;
use refactornet_core::synthgen::SynthSpec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seed for model initialisation and training order.
    pub seed: u64,
    pub corpus: CorpusSection,
    pub synth: SynthSection,
    pub sampler: SamplerSection,
    pub model: ModelSection,
    pub stage1: Stage1Section,
    pub stage2: Stage2Section,
    pub detector: DetectorSection,
    pub postproc: PostprocSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub manifest: PathBuf,
    /// Leading fraction of the manifest's videos used for training; the
    /// rest is the test split.
    pub train_fraction: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("corpus/manifest.toml"),
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_videos: usize,
    pub snippets_per_video: usize,
    pub feature_dim: usize,
    pub n_classes: usize,
    pub n_scenes: usize,
    pub action_gain: f64,
    pub noise_sigma: f64,
    pub snippet_duration_s: f64,
    pub min_instances: usize,
    pub max_instances: usize,
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthSpec::default();
        Self {
            n_videos: s.n_videos,
            snippets_per_video: s.snippets_per_video,
            feature_dim: s.feature_dim,
            n_classes: s.n_classes,
            n_scenes: s.n_scenes,
            action_gain: s.action_gain,
            noise_sigma: s.noise_sigma,
            snippet_duration_s: s.snippet_duration_s,
            min_instances: s.min_instances,
            max_instances: s.max_instances,
            seed: s.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub threshold: f64,
    pub k_per_action: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self {
            threshold: s.threshold,
            k_per_action: s.k_per_action,
        }
    }
}

/// Encoder widths; unset means hidden = input width, code = half of it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Option<usize>,
    pub code: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Section {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for Stage1Section {
    fn default() -> Self {
        let s = Stage1Config::default();
        Self {
            epochs: s.epochs,
            lr: s.lr,
            batch_size: s.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Section {
    pub epochs: usize,
    pub lr: f64,
    pub beta: f64,
    pub use_kl: bool,
    pub freeze_encoders: bool,
    pub label_ratio: f64,
    pub proposals_per_video: usize,
    pub max_positive_fraction: f64,
    pub jitter_per_instance: usize,
    /// Cap on predicted proposals considered per training video.
    pub max_proposals: usize,
}

impl Default for Stage2Section {
    fn default() -> Self {
        let s = Stage2Config::default();
        Self {
            epochs: s.epochs,
            lr: s.lr,
            beta: s.beta,
            use_kl: s.use_kl,
            freeze_encoders: s.freeze_encoders,
            label_ratio: s.label_ratio,
            proposals_per_video: s.proposals_per_video,
            max_positive_fraction: s.max_positive_fraction,
            jitter_per_instance: s.jitter_per_instance,
            max_proposals: s.proposals.max_proposals.unwrap_or(100),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub context: usize,
    pub boundary_hidden: usize,
    pub head_hidden: usize,
    pub bins: usize,
    /// Weight on the positive terms of the boundary loss.
    pub gamma: f64,
    pub lambda_completeness: f64,
    pub lambda_regression: f64,
    pub margin: f64,
    pub complete_tiou: f64,
    pub incomplete_tiou: f64,
    pub foreground_tiou: f64,
    pub peak_threshold: f64,
    pub min_duration: usize,
    /// Longest proposal in snippets; unset means the video length.
    pub max_duration: Option<usize>,
    pub max_proposals: Option<usize>,
}

impl Default for DetectorSection {
    fn default() -> Self {
        let d = DetectorConfig::default();
        let w = LossWeights::default();
        let p = ProposalConfig::default();
        Self {
            context: d.context,
            boundary_hidden: d.boundary_hidden,
            head_hidden: d.head_hidden,
            bins: d.bins,
            gamma: Stage2Config::default().gamma,
            lambda_completeness: w.completeness,
            lambda_regression: w.regression,
            margin: w.margin,
            complete_tiou: w.complete_tiou,
            incomplete_tiou: w.incomplete_tiou,
            foreground_tiou: TargetConfig::default().foreground_tiou,
            peak_threshold: p.peak_threshold,
            min_duration: p.min_duration,
            max_duration: p.max_duration,
            max_proposals: p.max_proposals,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocSection {
    pub sigma: f64,
    pub score_floor: f64,
    pub class_floor: f64,
}

impl Default for PostprocSection {
    fn default() -> Self {
        let p = PostprocConfig::default();
        Self {
            sigma: p.sigma,
            score_floor: p.score_floor,
            class_floor: p.class_floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub tiou_grid: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            tiou_grid: EvalConfig::default_grid(1).tiou_grid,
        }
    }
}

/// Parses `text` as a TOML value, falling back to a bare string.
fn parse_value(text: &str) -> toml::Value {
    let wrapped = format!("v = {text}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> anyhow::Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{assignment}` is not of the form key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override `{assignment}` has an empty key segment");
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{assignment}`: `{p}` is not a section"))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

impl PipelineConfig {
    /// Defaults, overlaid by the file at `path` (if any), overlaid by each
    /// `key=value` assignment in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: Self = toml::Value::Table(root).try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serialises")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if !(0.0..=1.0).contains(&self.corpus.train_fraction) {
            bail!("corpus.train_fraction must lie in [0, 1]");
        }
        if self.stage1.batch_size == 0 {
            bail!("stage1.batch_size must be positive");
        }
        if self.postproc.sigma.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            bail!("postproc.sigma must be positive");
        }
        if self.detector.bins == 0 {
            bail!("detector.bins must be positive");
        }
        EvalConfig {
            tiou_grid: self.eval.tiou_grid.clone(),
            n_classes: 1,
        }
        .validate()?;
        Ok(())
    }

    pub fn synth_spec(&self) -> SynthSpec {
        let s = &self.synth;
        SynthSpec {
            n_videos: s.n_videos,
            snippets_per_video: s.snippets_per_video,
            feature_dim: s.feature_dim,
            n_classes: s.n_classes,
            n_scenes: s.n_scenes,
            action_gain: s.action_gain,
            noise_sigma: s.noise_sigma,
            snippet_duration_s: s.snippet_duration_s,
            min_instances: s.min_instances,
            max_instances: s.max_instances,
            seed: s.seed,
        }
    }

    pub fn eval_config(&self, n_classes: usize) -> EvalConfig {
        EvalConfig {
            tiou_grid: self.eval.tiou_grid.clone(),
            n_classes,
        }
    }

    pub fn infer_config(&self) -> InferConfig {
        let d = &self.detector;
        InferConfig {
            proposals: ProposalConfig {
                peak_threshold: d.peak_threshold,
                min_duration: d.min_duration,
                max_duration: d.max_duration,
                max_proposals: d.max_proposals,
            },
            postproc: PostprocConfig {
                class_floor: self.postproc.class_floor,
                sigma: self.postproc.sigma,
                score_floor: self.postproc.score_floor,
            },
        }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        let d = &self.detector;
        let s2 = &self.stage2;
        let infer = self.infer_config();
        ExperimentConfig {
            sampler: SamplerConfig {
                threshold: self.sampler.threshold,
                k_per_action: self.sampler.k_per_action,
            },
            stage1: Stage1Config {
                epochs: self.stage1.epochs,
                lr: self.stage1.lr,
                batch_size: self.stage1.batch_size,
                seed: self.seed,
            },
            stage2: Stage2Config {
                epochs: s2.epochs,
                lr: s2.lr,
                beta: s2.beta,
                use_kl: s2.use_kl,
                freeze_encoders: s2.freeze_encoders,
                gamma: d.gamma,
                label_ratio: s2.label_ratio,
                weights: LossWeights {
                    completeness: d.lambda_completeness,
                    regression: d.lambda_regression,
                    margin: d.margin,
                    complete_tiou: d.complete_tiou,
                    incomplete_tiou: d.incomplete_tiou,
                },
                targets: TargetConfig {
                    foreground_tiou: d.foreground_tiou,
                },
                proposals: ProposalConfig {
                    max_proposals: Some(s2.max_proposals),
                    ..infer.proposals
                },
                proposals_per_video: s2.proposals_per_video,
                max_positive_fraction: s2.max_positive_fraction,
                jitter_per_instance: s2.jitter_per_instance,
                seed: self.seed,
            },
            detector: DetectorConfig {
                context: d.context,
                boundary_hidden: d.boundary_hidden,
                head_hidden: d.head_hidden,
                bins: d.bins,
            },
            infer,
            tiou_grid: self.eval.tiou_grid.clone(),
            encoder_hidden: self.model.hidden,
            encoder_code: self.model.code,
            seed: self.seed,
        }
    }
}
