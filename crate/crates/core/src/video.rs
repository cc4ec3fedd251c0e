//! Snippet feature sequences, annotations and the validated corpus.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numkit::Tensor;

/// Per-video snippet features, one row per snippet (`L × C`).
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatureSequence {
    pub video_id: String,
    pub features: Tensor,
    pub snippet_duration_s: f64,
}

impl VideoFeatureSequence {
    pub fn new(video_id: impl Into<String>, features: Tensor, snippet_duration_s: f64) -> Result<Self> {
        let video_id = video_id.into();
        if features.rank() != 2 {
            return Err(Error::InvalidVideo {
                video_id,
                detail: format!("features must be L×C, got shape {:?}", features.shape()),
            });
        }
        if !(snippet_duration_s > 0.0 && snippet_duration_s.is_finite()) {
            return Err(Error::InvalidVideo {
                video_id,
                detail: format!("snippet duration {snippet_duration_s} must be positive"),
            });
        }
        Ok(Self {
            video_id,
            features,
            snippet_duration_s,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 * self.snippet_duration_s
    }

    pub fn snippet(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn snippet_center_s(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.snippet_duration_s
    }
}

/// One annotated action instance, times in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionInstance {
    pub t_start: f64,
    pub t_end: f64,
    pub class_id: usize,
}

impl ActionInstance {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t_start && t < self.t_end
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationSet {
    pub video_id: String,
    pub instances: Vec<ActionInstance>,
}

/// A video with its features and annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub features: VideoFeatureSequence,
    pub annotations: AnnotationSet,
}

impl Video {
    pub fn id(&self) -> &str {
        &self.features.video_id
    }

    /// Checks every cross-field invariant; errors name the video.
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        let id = self.id().to_string();
        let bad = |detail: String| Error::InvalidVideo {
            video_id: id.clone(),
            detail,
        };
        if self.annotations.video_id != self.features.video_id {
            return Err(bad(format!("annotations belong to {}", self.annotations.video_id)));
        }
        if let Some(i) = self.features.features.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("video {id}, snippet {}", i / self.features.dim()),
            });
        }
        let extent = self.features.duration_s();
        for (k, inst) in self.annotations.instances.iter().enumerate() {
            if !(inst.t_start.is_finite() && inst.t_end.is_finite()) {
                return Err(bad(format!("instance {k} has non-finite times")));
            }
            if !(0.0 <= inst.t_start && inst.t_start < inst.t_end && inst.t_end <= extent) {
                return Err(bad(format!(
                    "instance {k} [{}, {}] outside video extent [0, {extent}]",
                    inst.t_start, inst.t_end
                )));
            }
            if inst.class_id >= n_classes {
                return Err(bad(format!(
                    "instance {k} class {} >= {n_classes} classes",
                    inst.class_id
                )));
            }
        }
        Ok(())
    }
}

/// A fully validated collection of videos sharing one class list.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub class_names: Vec<String>,
    pub snippet_duration_s: f64,
    pub videos: Vec<Video>,
}

impl Corpus {
    pub fn new(class_names: Vec<String>, snippet_duration_s: f64, videos: Vec<Video>) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::Config("corpus declares no classes".into()));
        }
        let dim = videos.first().map(|v| v.features.dim());
        for v in &videos {
            v.validate(class_names.len())?;
            if Some(v.features.dim()) != dim {
                return Err(Error::InvalidVideo {
                    video_id: v.id().to_string(),
                    detail: format!("feature width {} differs from {}", v.features.dim(), dim.unwrap_or(0)),
                });
            }
            if v.features.snippet_duration_s != snippet_duration_s {
                return Err(Error::InvalidVideo {
                    video_id: v.id().to_string(),
                    detail: "snippet duration differs from corpus".into(),
                });
            }
        }
        Ok(Self {
            class_names,
            snippet_duration_s,
            videos,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.videos.first().map(|v| v.features.dim())
    }

    pub fn instance_count(&self) -> usize {
        self.videos.iter().map(|v| v.annotations.instances.len()).sum()
    }

    /// First `round(fraction·n)` videos for training, the rest held out.
    pub fn split(&self, train_fraction: f64) -> (Corpus, Corpus) {
        let n = self.videos.len();
        let k = libm::round(train_fraction.clamp(0.0, 1.0) * n as f64) as usize;
        let part = |videos: &[Video]| Corpus {
            class_names: self.class_names.clone(),
            snippet_duration_s: self.snippet_duration_s,
            videos: videos.to_vec(),
        };
        (part(&self.videos[..k]), part(&self.videos[k..]))
    }
}

/// One scored temporal detection.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub video_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub class_id: usize,
    pub confidence: f64,
}
