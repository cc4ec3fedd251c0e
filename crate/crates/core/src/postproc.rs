//! Confidence fusion and Gaussian soft-NMS.

use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::detector::RefinedProposal;
use crate::evalkit::tiou_unchecked;
use crate::video::DetectionRecord;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostprocConfig {
    /// Minimum class probability for a class to emit a detection.
    pub class_floor: f64,
    pub sigma: f64,
    pub score_floor: f64,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self {
            class_floor: 0.01,
            sigma: 0.5,
            score_floor: 1e-4,
        }
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// One detection per non-background class whose probability exceeds
/// `class_floor`, with confidence `p_class · logistic(completeness)`.
pub fn fuse_confidence(refined: &RefinedProposal, video_id: &str, class_floor: f64) -> Vec<DetectionRecord> {
    let squash = logistic(refined.completeness);
    let k = refined.class_scores.len().saturating_sub(1);
    refined.class_scores[..k]
        .iter()
        .enumerate()
        .filter(|(_, p)| **p > class_floor)
        .map(|(class_id, p)| DetectionRecord {
            video_id: String::from(video_id),
            t_start: refined.t_start,
            t_end: refined.t_end,
            class_id,
            confidence: (p * squash).clamp(0.0, 1.0),
        })
        .collect()
}

fn rank(a: &DetectionRecord, b: &DetectionRecord) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.t_start.total_cmp(&b.t_start))
        .then(a.t_end.total_cmp(&b.t_end))
}

/// Gaussian soft-NMS over one (video, class) group: repeatedly keep the most
/// confident detection (earlier start on ties) and decay the rest by
/// `exp(−tIoU²/sigma)`, dropping any that fall below `score_floor`. The
/// output is in selection order, which is descending final confidence.
pub fn soft_nms(detections: Vec<DetectionRecord>, sigma: f64, score_floor: f64) -> Vec<DetectionRecord> {
    let mut pool = detections;
    pool.retain(|d| d.confidence >= score_floor);
    let mut out = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let best = (0..pool.len()).min_by(|&i, &j| rank(&pool[i], &pool[j])).unwrap();
        let top = pool.swap_remove(best);
        for d in pool.iter_mut() {
            let o = tiou_unchecked((top.t_start, top.t_end), (d.t_start, d.t_end));
            d.confidence *= libm::exp(-o * o / sigma);
        }
        pool.retain(|d| d.confidence >= score_floor);
        out.push(top);
    }
    out
}

/// [`soft_nms`] applied per (video, class) group; groups come out ordered
/// by video id then class.
pub fn soft_nms_grouped(detections: Vec<DetectionRecord>, sigma: f64, score_floor: f64) -> Vec<DetectionRecord> {
    let mut all = detections;
    all.sort_by(|a, b| a.video_id.cmp(&b.video_id).then(a.class_id.cmp(&b.class_id)));
    let mut out = Vec::with_capacity(all.len());
    let mut group: Vec<DetectionRecord> = Vec::new();
    for d in all {
        if group
            .first()
            .is_some_and(|g| g.video_id != d.video_id || g.class_id != d.class_id)
        {
            out.extend(soft_nms(core::mem::take(&mut group), sigma, score_floor));
        }
        group.push(d);
    }
    out.extend(soft_nms(group, sigma, score_floor));
    out
}
