//! On-disk formats: corpus manifests, feature and parameter binaries,
//! annotation and detection CSVs, and the training/inference logs.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use refactornet_core::numkit::Tensor;
use refactornet_core::pipeline::{Stage2Epoch, VideoInference};
use refactornet_core::refactornet::Stage1Epoch;
use refactornet_core::sampler::SamplePairs;
use refactornet_core::video::{ActionInstance, AnnotationSet, Corpus, DetectionRecord, Video, VideoFeatureSequence};
use serde::{Deserialize, Serialize};

pub const FEATURE_MAGIC: &[u8; 4] = b"RFNF";
pub const PARAM_MAGIC: &[u8; 4] = b"RFNP";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("video {video_id}: missing file {path}")]
    MissingFile { video_id: String, path: PathBuf },
    #[error("video {video_id}: {detail}")]
    Shape { video_id: String, detail: String },
    #[error("video {video_id}: non-finite feature value at snippet {snippet}")]
    NonFinite { video_id: String, snippet: usize },
    #[error("{path}: line {line}: {detail}")]
    Parse { path: PathBuf, line: u64, detail: String },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error(transparent)]
    Invalid(#[from] refactornet_core::Error),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, detail: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(io_err(path))
}

fn csv_err(path: &Path, e: csv::Error) -> DataError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    let detail = match e.kind() {
        csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
        _ => e.to_string(),
    };
    match e.into_kind() {
        csv::ErrorKind::Io(source) => DataError::Io {
            path: path.to_path_buf(),
            source,
        },
        _ => DataError::Parse {
            path: path.to_path_buf(),
            line,
            detail,
        },
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(create(path)?))
}

fn csv_flush<W: Write>(w: csv::Writer<W>, path: &Path) -> Result<()> {
    let mut inner = w.into_inner().map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })?;
    inner.flush().map_err(io_err(path))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::Reader::from_reader(BufReader::new(file));
    rdr.deserialize().map(|r| r.map_err(|e| csv_err(path, e))).collect()
}

// ---------------------------------------------------------------------------
// binary blocks

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(format_err(self.path, "truncated file"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|n| *n <= self.buf.len().max(1 << 20))
            .ok_or_else(|| format_err(self.path, format!("implausible {what} {v}")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| format_err(self.path, "size overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(format_err(
                self.path,
                format!("bad magic, expected {:?}", std::str::from_utf8(magic).unwrap()),
            ));
        }
        Ok(())
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut buf)
        .map_err(io_err(path))?;
    Ok(buf)
}

/// `RFNF`, u64 C, u64 L, then L·C little-endian doubles, row by row.
pub fn save_features(path: &Path, features: &Tensor) -> Result<()> {
    let (l, c) = features.as_matrix_dims();
    let mut out = Vec::with_capacity(20 + 8 * l * c);
    out.extend_from_slice(FEATURE_MAGIC);
    put_u64(&mut out, c as u64);
    put_u64(&mut out, l as u64);
    for v in features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut w = create(path)?;
    w.write_all(&out).map_err(io_err(path))?;
    finish(w, path)
}

pub fn load_features(path: &Path) -> Result<Tensor> {
    let (l, c, data) = read_feature_file(path)?;
    Ok(Tensor::new(vec![l, c], data)?)
}

fn read_feature_file(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let buf = read_all(path)?;
    let mut cur = Cursor { buf: &buf, path };
    cur.magic(FEATURE_MAGIC)?;
    let c = cur.count("width")?;
    let l = cur.count("length")?;
    let data = cur.f64s(l * c)?;
    if !cur.buf.is_empty() {
        return Err(format_err(path, format!("{} trailing bytes", cur.buf.len())));
    }
    Ok((l, c, data))
}

/// `RFNP`, u64 block count, then per block: u64 name length, name, u64
/// rank, rank × u64 dims, the values as little-endian doubles.
pub fn save_params(path: &Path, blocks: &[(String, Tensor)]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(PARAM_MAGIC);
    put_u64(&mut out, blocks.len() as u64);
    for (name, t) in blocks {
        put_u64(&mut out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        put_u64(&mut out, t.rank() as u64);
        for d in t.shape() {
            put_u64(&mut out, *d as u64);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut w = create(path)?;
    w.write_all(&out).map_err(io_err(path))?;
    finish(w, path)
}

pub fn load_params(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = read_all(path)?;
    let mut cur = Cursor { buf: &buf, path };
    cur.magic(PARAM_MAGIC)?;
    let n = cur.count("block count")?;
    let mut blocks = Vec::with_capacity(n);
    for _ in 0..n {
        let len = cur.count("name length")?;
        let name =
            String::from_utf8(cur.take(len)?.to_vec()).map_err(|_| format_err(path, "block name is not UTF-8"))?;
        let rank = cur.count("rank")?;
        let shape = (0..rank).map(|_| cur.count("dimension")).collect::<Result<Vec<_>>>()?;
        let size = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| format_err(path, "size overflow"))?;
        let data = cur.f64s(size)?;
        let t = Tensor::new(shape, data).map_err(|e| format_err(path, format!("block {name}: {e}")))?;
        blocks.push((name, t));
    }
    if !cur.buf.is_empty() {
        return Err(format_err(path, format!("{} trailing bytes", cur.buf.len())));
    }
    Ok(blocks)
}

// ---------------------------------------------------------------------------
// annotations and detections

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRow {
    video_id: String,
    t_start: f64,
    t_end: f64,
    class_id: usize,
}

/// Header `video_id,t_start,t_end,class_id`, times in seconds.
pub fn save_annotations(path: &Path, sets: &[AnnotationSet]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["video_id", "t_start", "t_end", "class_id"])
        .map_err(|e| csv_err(path, e))?;
    for set in sets {
        for i in &set.instances {
            w.serialize(AnnotationRow {
                video_id: set.video_id.clone(),
                t_start: i.t_start,
                t_end: i.t_end,
                class_id: i.class_id,
            })
            .map_err(|e| csv_err(path, e))?;
        }
    }
    csv_flush(w, path)
}

/// Rows grouped into one set per video, in first-appearance order.
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationSet>> {
    let rows: Vec<AnnotationRow> = read_csv(path)?;
    let mut sets: Vec<AnnotationSet> = Vec::new();
    for r in rows {
        let inst = ActionInstance {
            t_start: r.t_start,
            t_end: r.t_end,
            class_id: r.class_id,
        };
        match sets.iter_mut().find(|s| s.video_id == r.video_id) {
            Some(s) => s.instances.push(inst),
            None => sets.push(AnnotationSet {
                video_id: r.video_id,
                instances: vec![inst],
            }),
        }
    }
    Ok(sets)
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectionRow {
    video_id: String,
    t_start: f64,
    t_end: f64,
    class_id: usize,
    confidence: f64,
}

/// Header `video_id,t_start,t_end,class_id,confidence`. Floats are written
/// in shortest round-trip form, so loading returns the exact values.
pub fn save_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["video_id", "t_start", "t_end", "class_id", "confidence"])
        .map_err(|e| csv_err(path, e))?;
    for d in records {
        w.serialize(DetectionRow {
            video_id: d.video_id.clone(),
            t_start: d.t_start,
            t_end: d.t_end,
            class_id: d.class_id,
            confidence: d.confidence,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    csv_flush(w, path)
}

pub fn load_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let rows: Vec<DetectionRow> = read_csv(path)?;
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| {
            if !(r.t_start < r.t_end && r.confidence.is_finite()) {
                return Err(DataError::Parse {
                    path: path.to_path_buf(),
                    line: i as u64 + 2,
                    detail: format!(
                        "invalid detection [{}, {}] confidence {}",
                        r.t_start, r.t_end, r.confidence
                    ),
                });
            }
            Ok(DetectionRecord {
                video_id: r.video_id,
                t_start: r.t_start,
                t_end: r.t_end,
                class_id: r.class_id,
                confidence: r.confidence,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// corpus manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub snippet_duration_s: f64,
    #[serde(default)]
    pub videos: Vec<ManifestVideo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestVideo {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub features: PathBuf,
    pub annotations: PathBuf,
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text).map_err(|e| DataError::Parse {
        path: path.to_path_buf(),
        line: e
            .span()
            .map(|s| text[..s.start].lines().count().max(1) as u64)
            .unwrap_or(0),
        detail: e.message().to_string(),
    })
}

/// Loads and validates every video the manifest lists.
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for entry in &manifest.videos {
        let fpath = base.join(&entry.features);
        let apath = base.join(&entry.annotations);
        for p in [&fpath, &apath] {
            if !p.is_file() {
                return Err(DataError::MissingFile {
                    video_id: entry.id.clone(),
                    path: p.clone(),
                });
            }
        }
        let (l, c, data) = read_feature_file(&fpath)?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite {
                video_id: entry.id.clone(),
                snippet: i / c.max(1),
            });
        }
        let features = Tensor::new(vec![l, c], data)?;
        let sets = load_annotations(&apath)?;
        if let Some(other) = sets.iter().find(|s| s.video_id != entry.id) {
            return Err(DataError::Shape {
                video_id: entry.id.clone(),
                detail: format!("{} lists annotations for {}", apath.display(), other.video_id),
            });
        }
        let annotations = sets.into_iter().next().unwrap_or(AnnotationSet {
            video_id: entry.id.clone(),
            instances: Vec::new(),
        });
        if features.rows() == 0 || features.cols() == 0 {
            return Err(DataError::Shape {
                video_id: entry.id.clone(),
                detail: format!("empty feature matrix {:?}", features.shape()),
            });
        }
        videos.push(Video {
            features: VideoFeatureSequence::new(entry.id.clone(), features, manifest.snippet_duration_s)?,
            annotations,
        });
    }
    if let (Some(first), Some(bad)) = (
        videos.first(),
        videos.iter().find(|v| v.features.dim() != videos[0].features.dim()),
    ) {
        return Err(DataError::Shape {
            video_id: bad.id().to_string(),
            detail: format!(
                "feature width {} differs from {}",
                bad.features.dim(),
                first.features.dim()
            ),
        });
    }
    Ok(Corpus::new(manifest.classes, manifest.snippet_duration_s, videos)?)
}

/// Writes `manifest.toml`, `features/<id>.rfnf` and `annotations/<id>.csv`
/// under `dir`.
pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<PathBuf> {
    let mut manifest = Manifest {
        classes: corpus.class_names.clone(),
        snippet_duration_s: corpus.snippet_duration_s,
        videos: Vec::with_capacity(corpus.videos.len()),
    };
    for v in &corpus.videos {
        let entry = ManifestVideo {
            id: v.id().to_string(),
            features: Path::new("features").join(format!("{}.rfnf", v.id())),
            annotations: Path::new("annotations").join(format!("{}.csv", v.id())),
        };
        save_features(&dir.join(&entry.features), &v.features.features)?;
        save_annotations(&dir.join(&entry.annotations), std::slice::from_ref(&v.annotations))?;
        manifest.videos.push(entry);
    }
    let path = dir.join("manifest.toml");
    let text = toml::to_string(&manifest).map_err(|e| format_err(&path, e.to_string()))?;
    write_text(&path, &text)?;
    Ok(path)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(io_err(path))?;
    finish(w, path)
}

// ---------------------------------------------------------------------------
// logs and curves

/// One row per mined pair: ids, similarity and the cosine between them.
pub fn save_pairs(path: &Path, pairs: &SamplePairs) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "action_video",
        "instance",
        "class_id",
        "coupling_video",
        "snippet",
        "similarity",
    ])
    .map_err(|e| csv_err(path, e))?;
    for (a, c) in pairs.iter() {
        w.serialize((
            &a.video_id,
            a.instance_index,
            a.class_id,
            &c.video_id,
            c.snippet_index,
            c.similarity,
        ))
        .map_err(|e| csv_err(path, e))?;
    }
    csv_flush(w, path)
}

pub fn save_stage1_log(path: &Path, history: &[Stage1Epoch]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["epoch", "objective", "loss_a", "loss_c", "mean_cos_a", "mean_cos_c"])
        .map_err(|e| csv_err(path, e))?;
    for h in history {
        let s = h.stats;
        w.serialize((h.epoch, s.objective, s.loss_a, s.loss_c, s.mean_cos_a, s.mean_cos_c))
            .map_err(|e| csv_err(path, e))?;
    }
    csv_flush(w, path)
}

pub fn save_stage2_log(path: &Path, history: &[Stage2Epoch]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["epoch", "joint", "refactor", "boundary", "detection"])
        .map_err(|e| csv_err(path, e))?;
    for h in history {
        w.serialize((h.epoch, h.joint, h.refactor, h.boundary, h.detection))
            .map_err(|e| csv_err(path, e))?;
    }
    csv_flush(w, path)
}

/// Loss history columns by name; used by the report.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

/// Reads an all-numeric CSV with a header row.
pub fn load_table(path: &Path) -> Result<Table> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::Reader::from_reader(BufReader::new(file));
    let header = rdr
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(String::from)
        .collect();
    let rows = rdr
        .deserialize()
        .map(|r| r.map_err(|e| csv_err(path, e)))
        .collect::<Result<_>>()?;
    Ok(Table { header, rows })
}

/// One row per snippet: `snippet,t,p_start,p_end`.
pub fn save_boundary_curve(path: &Path, run: &VideoInference, snippet_duration_s: f64) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["snippet", "t", "p_start", "p_end"])
        .map_err(|e| csv_err(path, e))?;
    for (i, (s, e)) in run.p_start.iter().zip(&run.p_end).enumerate() {
        w.serialize((i, i as f64 * snippet_duration_s, s, e))
            .map_err(|e| csv_err(path, e))?;
    }
    csv_flush(w, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        fs::write(
            &p,
            "video_id,t_start,t_end,class_id,confidence\nv,0,1,0,0.5\nv,0,oops,0,0.5\n",
        )
        .unwrap();
        match load_detections(&p) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.rfnf");
        save_features(&p, &Tensor::zeros(&[3, 2])).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_features(&p), Err(DataError::Format { .. })));
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_features(&p), Err(DataError::Format { .. })));
    }
}
