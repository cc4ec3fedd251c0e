//! The pipeline commands. Each reads its inputs from files, writes its
//! outputs under a run directory and logs progress to stderr.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use refactornet_core::detector::Detector;
use refactornet_core::evalkit::{diagnostics, mean_ap, results_table, Diagnostics, MapResult};
use refactornet_core::numkit::Tensor;
use refactornet_core::pipeline::{infer_corpus, init_system, train_system, System, Variant};
use refactornet_core::refactornet::RefactorModel;
use refactornet_core::synthgen::{generate, Latents};
use refactornet_core::video::{Corpus, DetectionRecord};

use crate::config::PipelineConfig;
use crate::dataio;
use crate::svg;

/// Which videos of the manifest a command works on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Test,
    All,
}

/// Files inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn config(&self, tag: &str) -> PathBuf {
        self.0.join("configs").join(format!("{tag}.toml"))
    }
    pub fn checkpoint(&self, tag: &str) -> PathBuf {
        self.0.join("checkpoints").join(format!("{tag}.rfnp"))
    }
    pub fn stage1_checkpoint(&self, tag: &str) -> PathBuf {
        self.0.join("checkpoints").join(format!("{tag}_stage1.rfnp"))
    }
    pub fn init_checkpoint(&self, tag: &str) -> PathBuf {
        self.0.join("checkpoints").join(format!("{tag}_init.rfnp"))
    }
    pub fn stage1_log(&self, tag: &str) -> PathBuf {
        self.0.join("logs").join(format!("{tag}_stage1.csv"))
    }
    pub fn stage2_log(&self, tag: &str) -> PathBuf {
        self.0.join("logs").join(format!("{tag}_stage2.csv"))
    }
    pub fn pairs(&self, tag: &str) -> PathBuf {
        self.0.join("logs").join(format!("{tag}_pairs.csv"))
    }
    pub fn detections(&self, tag: &str) -> PathBuf {
        self.0.join("detections").join(format!("{tag}.csv"))
    }
    /// Top-class record of every refined proposal, before suppression.
    pub fn proposals(&self, tag: &str) -> PathBuf {
        self.0.join("detections").join(format!("{tag}_proposals.csv"))
    }
    pub fn curves(&self, tag: &str) -> PathBuf {
        self.0.join("curves").join(tag)
    }
    pub fn map_table(&self, tag: &str) -> PathBuf {
        self.0.join("eval").join(format!("{tag}_map.csv"))
    }
    pub fn diagnostics(&self, tag: &str) -> PathBuf {
        self.0.join("eval").join(format!("{tag}_diagnostics.csv"))
    }
    pub fn reports(&self) -> PathBuf {
        self.0.join("reports")
    }
}

pub fn default_tag(baseline: bool) -> &'static str {
    if baseline {
        "baseline"
    } else {
        "refactored"
    }
}

fn select(corpus: Corpus, cfg: &PipelineConfig, split: Split) -> Corpus {
    match split {
        Split::All => corpus,
        Split::Train => corpus.split(cfg.corpus.train_fraction).0,
        Split::Test => corpus.split(cfg.corpus.train_fraction).1,
    }
}

pub fn load_split(cfg: &PipelineConfig, split: Split) -> Result<Corpus> {
    let corpus = dataio::load_corpus(&cfg.corpus.manifest)
        .with_context(|| format!("loading corpus {}", cfg.corpus.manifest.display()))?;
    Ok(select(corpus, cfg, split))
}

pub fn system_blocks(system: &System) -> Vec<(String, Tensor)> {
    let mut blocks = system.refactor.as_ref().map(RefactorModel::named).unwrap_or_default();
    blocks.extend(system.detector.named());
    blocks
}

pub fn system_from_blocks(blocks: &[(String, Tensor)]) -> Result<System> {
    let refactor = if blocks.iter().any(|(n, _)| n.starts_with("encoder_")) {
        Some(RefactorModel::from_named(blocks)?)
    } else {
        None
    };
    Ok(System {
        refactor,
        detector: Detector::from_named(blocks)?,
    })
}

pub fn load_system(path: &Path) -> Result<System> {
    let blocks = dataio::load_params(path)?;
    system_from_blocks(&blocks).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn latent_blocks(l: &Latents) -> Vec<(String, Tensor)> {
    let ints =
        |v: &[usize]| Tensor::vector(v.iter().map(|x| *x as f64).collect()).expect("non-empty latent index list");
    vec![
        ("class_directions".into(), l.class_directions.clone()),
        ("scenes".into(), l.scenes.clone()),
        ("preferred_scene".into(), ints(&l.preferred_scene)),
        ("video_class".into(), ints(&l.video_class)),
        ("video_scene".into(), ints(&l.video_scene)),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub manifest: PathBuf,
    pub videos: usize,
    pub instances_per_class: Vec<usize>,
}

/// Generates the synthetic corpus into `out_dir`, with its latent components
/// in `latents.rfnp`.
pub fn synth(cfg: &PipelineConfig, out_dir: &Path) -> Result<SynthSummary> {
    let spec = cfg.synth_spec();
    let synth = generate(&spec)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let manifest = dataio::save_corpus(out_dir, &synth.corpus)?;
    dataio::save_params(&out_dir.join("latents.rfnp"), &latent_blocks(&synth.latents))?;
    let mut per_class = vec![0; synth.corpus.n_classes()];
    for v in &synth.corpus.videos {
        for i in &v.annotations.instances {
            per_class[i.class_id] += 1;
        }
    }
    log::info!(
        "wrote {} videos ({} instances) to {}",
        synth.corpus.videos.len(),
        synth.corpus.instance_count(),
        manifest.display()
    );
    for (k, n) in per_class.iter().enumerate() {
        log::info!("  {}: {n} instances", synth.corpus.class_names[k]);
    }
    Ok(SynthSummary {
        manifest,
        videos: synth.corpus.videos.len(),
        instances_per_class: per_class,
    })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub pairs: usize,
}

/// Trains one system on the training split and writes its checkpoints and
/// loss logs under `run`. `resume` names a stage-1 checkpoint whose
/// encoders replace stage 1.
pub fn train(
    cfg: &PipelineConfig,
    run: &RunDir,
    baseline: bool,
    tag: &str,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    let corpus = load_split(cfg, Split::Train)?;
    if corpus.videos.is_empty() {
        bail!("training split is empty");
    }
    let variant = if baseline {
        Variant::Baseline
    } else {
        Variant::Refactored { kl: cfg.stage2.use_kl }
    };
    let exp = cfg.experiment();
    let resume = match resume {
        Some(_) if baseline => bail!("the baseline has no encoders to resume"),
        Some(p) => {
            let blocks = dataio::load_params(p)?;
            Some(RefactorModel::from_named(&blocks).with_context(|| format!("reading encoders from {}", p.display()))?)
        }
        None => None,
    };
    dataio::write_text(&run.config(tag), &cfg.to_toml())?;
    let width = corpus.feature_dim().unwrap();
    let init = init_system(variant, width, corpus.n_classes(), &exp)?;
    dataio::save_params(&run.init_checkpoint(tag), &system_blocks(&init))?;

    log::info!("training {tag} on {} videos", corpus.videos.len());
    let out = train_system(&corpus, variant, &exp, resume)?;
    log::info!("{} training pairs", out.pairs.len());
    dataio::save_pairs(&run.pairs(tag), &out.pairs)?;
    if let Some(m) = &out.stage1_model {
        dataio::save_params(&run.stage1_checkpoint(tag), &m.named())?;
    }
    if !out.stage1.is_empty() {
        dataio::save_stage1_log(&run.stage1_log(tag), &out.stage1)?;
        let last = out.stage1.last().unwrap().stats;
        log::info!(
            "stage 1: cos_A {:.4}, cos_C {:.4} on training pairs",
            last.mean_cos_a,
            last.mean_cos_c
        );
    }
    dataio::save_stage2_log(&run.stage2_log(tag), &out.stage2)?;
    if let Some(last) = out.stage2.last() {
        log::info!("stage 2: final joint loss {:.6}", last.joint);
    }
    let checkpoint = run.checkpoint(tag);
    dataio::save_params(&checkpoint, &system_blocks(&out.system))?;
    Ok(TrainSummary {
        checkpoint,
        stage1_epochs: out.stage1.len().saturating_sub(1),
        stage2_epochs: out.stage2.len().saturating_sub(1),
        pairs: out.pairs.len(),
    })
}

#[derive(Debug, Clone)]
pub struct InferSummary {
    pub detections: PathBuf,
    pub videos: usize,
    pub records: usize,
}

/// Runs a trained system over a split; writes final detections, the
/// top-class record of every refined proposal and per-video boundary curves.
pub fn infer(
    cfg: &PipelineConfig,
    run: &RunDir,
    baseline: bool,
    tag: &str,
    checkpoint: Option<&Path>,
    split: Split,
) -> Result<InferSummary> {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| run.checkpoint(tag));
    let system = load_system(&path)?;
    match (baseline, system.refactor.is_some()) {
        (true, true) => bail!(
            "configuration error: --baseline given but {} contains encoders",
            path.display()
        ),
        (false, false) => bail!(
            "configuration error: {} has no encoders; pass --baseline",
            path.display()
        ),
        _ => {}
    }
    let corpus = load_split(cfg, split)?;
    if let Some(width) = corpus.feature_dim() {
        system
            .check(width)
            .context("configuration error: checkpoint does not match corpus width")?;
    }
    if system.detector.n_classes != corpus.n_classes() {
        bail!(
            "configuration error: checkpoint has {} classes, corpus has {}",
            system.detector.n_classes,
            corpus.n_classes()
        );
    }
    let runs = infer_corpus(&system, &corpus, &cfg.infer_config())?;
    let detections: Vec<DetectionRecord> = runs.iter().flat_map(|r| r.detections.iter().cloned()).collect();
    let proposals: Vec<DetectionRecord> = runs.iter().flat_map(|r| r.top_class_records()).collect();
    let out = run.detections(tag);
    dataio::save_detections(&out, &detections)?;
    dataio::save_detections(&run.proposals(tag), &proposals)?;
    let curve_dir = run.curves(tag);
    if curve_dir.exists() {
        fs::remove_dir_all(&curve_dir).with_context(|| format!("clearing {}", curve_dir.display()))?;
    }
    fs::create_dir_all(&curve_dir).with_context(|| format!("creating {}", curve_dir.display()))?;
    for r in &runs {
        dataio::save_boundary_curve(
            &curve_dir.join(format!("{}.csv", r.video_id)),
            r,
            corpus.snippet_duration_s,
        )?;
    }
    log::info!(
        "{} detections over {} videos -> {}",
        detections.len(),
        runs.len(),
        out.display()
    );
    Ok(InferSummary {
        detections: out,
        videos: runs.len(),
        records: detections.len(),
    })
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub map: MapResult,
    pub diagnostics: Option<Diagnostics>,
    pub table: String,
}

/// Scores detections against the split's annotations. Diagnostics use the
/// pre-suppression proposal records when `proposals` is given.
pub fn eval(
    cfg: &PipelineConfig,
    detections: &Path,
    proposals: Option<&Path>,
    split: Split,
    name: &str,
) -> Result<EvalSummary> {
    let corpus = load_split(cfg, split)?;
    let gts: Vec<_> = corpus.videos.iter().map(|v| v.annotations.clone()).collect();
    let in_split = |d: &DetectionRecord| gts.iter().any(|g| g.video_id == d.video_id);
    let mut dets = dataio::load_detections(detections)?;
    let before = dets.len();
    dets.retain(in_split);
    if dets.len() < before {
        log::warn!(
            "ignored {} detections for videos outside the split",
            before - dets.len()
        );
    }
    if let Some(d) = dets.iter().find(|d| d.class_id >= corpus.n_classes()) {
        bail!(
            "class-list mismatch: detection class {} but the corpus declares {} classes",
            d.class_id,
            corpus.n_classes()
        );
    }
    let map = mean_ap(&dets, &gts, &cfg.eval_config(corpus.n_classes()))?;
    let diag_source = match proposals {
        Some(p) => {
            let mut v = dataio::load_detections(p)?;
            v.retain(in_split);
            v
        }
        None => dets,
    };
    let diag = diagnostics(&diag_source, &gts)?;
    Ok(EvalSummary {
        table: results_table(&[(name.to_string(), map.clone())]),
        map,
        diagnostics: diag,
    })
}

pub fn diagnostics_csv(d: Option<&Diagnostics>) -> String {
    match d {
        Some(d) => format!(
            "count,accuracy,mean_tiou\n{},{:.6},{:.6}\n",
            d.count, d.accuracy, d.mean_tiou
        ),
        None => "count,accuracy,mean_tiou\n0,,\n".into(),
    }
}

pub fn write_eval(run: &RunDir, tag: &str, summary: &EvalSummary) -> Result<()> {
    dataio::write_text(&run.map_table(tag), &summary.table)?;
    dataio::write_text(&run.diagnostics(tag), &diagnostics_csv(summary.diagnostics.as_ref()))?;
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct ReportSummary {
    pub written: Vec<PathBuf>,
    pub missing: Vec<String>,
}

fn tags_with(dir: &Path, suffix: &str) -> Vec<String> {
    let mut tags: Vec<String> = fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| e.file_name().to_str()?.strip_suffix(suffix).map(String::from))
        .collect();
    tags.sort();
    tags
}

fn csv_of(header: &[&str], cols: &[Vec<f64>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    let n = cols.first().map_or(0, Vec::len);
    for i in 0..n {
        let row: Vec<String> = cols.iter().map(|c| c[i].to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Writes static figures and their data under `run/reports`: loss
/// histories, boundary curves against ground truth for the first
/// `max_videos` videos of each inference run, and an mAP bar chart over
/// every evaluated tag. Missing inputs are reported and skipped.
pub fn report(run: &RunDir, max_videos: usize) -> Result<ReportSummary> {
    let out_dir = run.reports();
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut summary = ReportSummary::default();
    let emit = |name: String, csv: String, svg: String, summary: &mut ReportSummary| -> Result<()> {
        let c = out_dir.join(format!("{name}.csv"));
        let s = out_dir.join(format!("{name}.svg"));
        dataio::write_text(&c, &csv)?;
        dataio::write_text(&s, &svg)?;
        summary.written.extend([c, s]);
        Ok(())
    };

    let logs = run.0.join("logs");
    let mut trained = tags_with(&logs, "_stage2.csv");
    trained.extend(tags_with(&logs, "_stage1.csv"));
    trained.sort();
    trained.dedup();
    if trained.is_empty() {
        summary.missing.push(format!("no loss logs in {}", logs.display()));
    }
    for tag in &trained {
        for (stage, path, cols) in [
            ("stage1", run.stage1_log(tag), vec!["objective", "loss_a", "loss_c"]),
            (
                "stage2",
                run.stage2_log(tag),
                vec!["joint", "refactor", "boundary", "detection"],
            ),
        ] {
            if !path.exists() {
                if stage == "stage2" {
                    summary.missing.push(format!("{}", path.display()));
                }
                continue;
            }
            let table = dataio::load_table(&path)?;
            let epochs = table.column("epoch").unwrap_or_default();
            let series: Vec<(&str, Vec<f64>)> = cols.iter().filter_map(|c| Some((*c, table.column(c)?))).collect();
            let mut header = vec!["epoch"];
            header.extend(series.iter().map(|s| s.0));
            let mut data = vec![epochs.clone()];
            data.extend(series.iter().map(|s| s.1.clone()));
            emit(
                format!("loss_{tag}_{stage}"),
                csv_of(&header, &data),
                svg::line_chart(&format!("{tag} {stage} loss"), "epoch", &epochs, &series),
                &mut summary,
            )?;
        }
    }

    let curve_root = run.0.join("curves");
    let mut curve_tags: Vec<String> = fs::read_dir(&curve_root)
        .into_iter()
        .flatten()
        .flatten()
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str().map(String::from))
        .collect();
    curve_tags.sort();
    if curve_tags.is_empty() {
        summary
            .missing
            .push(format!("no boundary curves in {}", curve_root.display()));
    }
    for tag in &curve_tags {
        let corpus = fs::read_to_string(run.config(tag))
            .ok()
            .and_then(|t| toml::from_str::<PipelineConfig>(&t).ok())
            .and_then(|c| dataio::load_corpus(&c.corpus.manifest).ok());
        if corpus.is_none() {
            summary
                .missing
                .push(format!("corpus for {tag}; curves plotted without ground truth"));
        }
        for video in tags_with(&run.curves(tag), ".csv").into_iter().take(max_videos) {
            let table = dataio::load_table(&run.curves(tag).join(format!("{video}.csv")))?;
            let (Some(t), Some(ps), Some(pe)) = (table.column("t"), table.column("p_start"), table.column("p_end"))
            else {
                summary.missing.push(format!("columns in curve {tag}/{video}"));
                continue;
            };
            let instances = corpus
                .as_ref()
                .and_then(|c| c.videos.iter().find(|v| v.id() == video))
                .map(|v| (v.annotations.instances.clone(), v.features.snippet_duration_s));
            let mut header = vec!["t", "p_start", "p_end"];
            let mut cols = vec![t.clone(), ps.clone(), pe.clone()];
            let mut series = vec![("p_start", ps), ("p_end", pe)];
            if let Some((inst, dur)) = instances {
                let inside: Vec<f64> = t
                    .iter()
                    .map(|&x| f64::from(u8::from(inst.iter().any(|i| i.contains(x + dur / 2.0)))))
                    .collect();
                header.push("ground_truth");
                cols.push(inside.clone());
                series.push(("ground_truth", inside));
            }
            emit(
                format!("curves_{tag}_{video}"),
                csv_of(&header, &cols),
                svg::line_chart(&format!("{tag} boundaries, {video}"), "time (s)", &t, &series),
                &mut summary,
            )?;
        }
    }

    let mut bars: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for tag in tags_with(&run.0.join("eval"), "_map.csv") {
        let text = fs::read_to_string(run.map_table(&tag))?;
        let row = text.lines().nth(1).unwrap_or_default();
        let vals: Vec<f64> = row.split(',').skip(1).filter_map(|v| v.parse().ok()).collect();
        let header: Vec<&str> = text.lines().next().unwrap_or_default().split(',').collect();
        let at_half = header
            .iter()
            .position(|h| *h == "mAP@0.50")
            .and_then(|i| vals.get(i - 1))
            .copied();
        if let Some(avg) = vals.last() {
            bars.insert(tag, (*avg, at_half.unwrap_or(f64::NAN)));
        }
    }
    if bars.is_empty() {
        summary
            .missing
            .push("no evaluation results; ablation chart skipped".into());
    } else {
        let mut csv = String::from("tag,avg_mAP,mAP@0.50\n");
        for (tag, (avg, half)) in &bars {
            csv.push_str(&format!("{tag},{avg},{half}\n"));
        }
        let data: Vec<(String, f64)> = bars.iter().map(|(k, v)| (k.clone(), v.0)).collect();
        emit(
            "ablation".into(),
            csv,
            svg::bar_chart("average mAP", &data),
            &mut summary,
        )?;
    }

    for m in &summary.missing {
        log::warn!("report: missing {m}");
    }
    Ok(summary)
}
