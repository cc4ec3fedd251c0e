//! Temporal IoU, per-class average precision and mAP over tIoU grids.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{degenerate, Error, Result};
use crate::video::{AnnotationSet, DetectionRecord};

/// Intersection over union of two segments `(t_start, t_end)`.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    for s in [a, b] {
        if s.0.partial_cmp(&s.1) != Some(Ordering::Less) {
            return Err(degenerate("tiou", format!("segment [{}, {}]", s.0, s.1)));
        }
    }
    Ok(tiou_unchecked(a, b))
}

pub(crate) fn tiou_unchecked(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1.max(b.1) - a.0.min(b.0)).max(f64::MIN_POSITIVE);
    inter / union
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub tiou_grid: Vec<f64>,
    pub n_classes: usize,
}

impl EvalConfig {
    /// `[0.3:0.1:0.7]`.
    pub fn default_grid(n_classes: usize) -> Self {
        Self {
            tiou_grid: vec![0.3, 0.4, 0.5, 0.6, 0.7],
            n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tiou_grid.is_empty() {
            return Err(Error::Config("empty tIoU grid".into()));
        }
        if self.tiou_grid.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::Config(format!(
                "tIoU thresholds must lie in (0, 1]: {:?}",
                self.tiou_grid
            )));
        }
        if self.tiou_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("tIoU grid must be strictly increasing".into()));
        }
        if self.n_classes == 0 {
            return Err(Error::Config("no classes to evaluate".into()));
        }
        Ok(())
    }
}

/// Evaluation order: confidence descending, then earlier start, then video
/// id, then earlier end.
pub fn detection_order(a: &DetectionRecord, b: &DetectionRecord) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.t_start.total_cmp(&b.t_start))
        .then_with(|| a.video_id.cmp(&b.video_id))
        .then(a.t_end.total_cmp(&b.t_end))
}

fn check_detection(d: &DetectionRecord) -> Result<()> {
    if d.t_start.partial_cmp(&d.t_end) != Some(Ordering::Less) || !d.confidence.is_finite() {
        return Err(Error::Eval(format!(
            "invalid detection in {}: [{}, {}] conf {}",
            d.video_id, d.t_start, d.t_end, d.confidence
        )));
    }
    Ok(())
}

/// AP of one class at one threshold; `None` when the class has no ground
/// truth. Each detection claims the unmatched same-video ground truth with
/// the highest tIoU (earlier index on ties) if that tIoU reaches `threshold`.
/// (video, instance extents, matched flags) for one class.
type VideoTruth<'a> = (&'a str, Vec<(f64, f64)>, Vec<bool>);

pub fn average_precision(
    detections: &[DetectionRecord],
    ground_truth: &[AnnotationSet],
    class_id: usize,
    threshold: f64,
) -> Result<Option<f64>> {
    let mut gts: Vec<VideoTruth> = Vec::new();
    for set in ground_truth {
        let ext: Vec<(f64, f64)> = set
            .instances
            .iter()
            .filter(|i| i.class_id == class_id)
            .map(|i| (i.t_start, i.t_end))
            .collect();
        if !ext.is_empty() {
            let n = ext.len();
            gts.push((set.video_id.as_str(), ext, vec![false; n]));
        }
    }
    let n_pos: usize = gts.iter().map(|g| g.1.len()).sum();
    if n_pos == 0 {
        return Ok(None);
    }
    let mut dets: Vec<&DetectionRecord> = detections.iter().filter(|d| d.class_id == class_id).collect();
    for d in &dets {
        check_detection(d)?;
    }
    dets.sort_by(|a, b| detection_order(a, b));

    let mut tp = Vec::with_capacity(dets.len());
    for d in dets {
        let mut hit = false;
        if let Some(g) = gts.iter_mut().find(|g| g.0 == d.video_id) {
            let mut best: Option<(usize, f64)> = None;
            for (j, &ext) in g.1.iter().enumerate() {
                if g.2[j] {
                    continue;
                }
                let o = tiou_unchecked((d.t_start, d.t_end), ext);
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            if let Some((j, o)) = best {
                if o >= threshold {
                    g.2[j] = true;
                    hit = true;
                }
            }
        }
        tp.push(hit);
    }
    Ok(Some(interpolated_ap(&tp, n_pos)))
}

/// All-point interpolated AP of a ranked hit list. Recall rises by exactly
/// `1/n_pos` at each hit, so each hit adds its interpolated precision over
/// `n_pos`.
fn interpolated_ap(tp: &[bool], n_pos: usize) -> f64 {
    let mut prec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        prec.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    tp.iter()
        .zip(&prec)
        .filter(|(t, _)| **t)
        .map(|(_, p)| p / n_pos as f64)
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    /// `(threshold, mAP)` per grid point.
    pub per_threshold: Vec<(f64, f64)>,
    pub average: f64,
    /// `per_class[k][t]`: AP of class `k` at grid point `t`, if defined.
    pub per_class: Vec<Vec<Option<f64>>>,
}

pub fn mean_ap(
    detections: &[DetectionRecord],
    ground_truth: &[AnnotationSet],
    config: &EvalConfig,
) -> Result<MapResult> {
    config.validate()?;
    if let Some(d) = detections.iter().find(|d| d.class_id >= config.n_classes) {
        return Err(Error::Eval(format!(
            "detection class {} outside {} classes",
            d.class_id, config.n_classes
        )));
    }
    let mut per_class = vec![Vec::with_capacity(config.tiou_grid.len()); config.n_classes];
    for (k, row) in per_class.iter_mut().enumerate() {
        for &t in &config.tiou_grid {
            row.push(average_precision(detections, ground_truth, k, t)?);
        }
        if row[0].is_none() {
            log::info!("class {k} has no ground truth; excluded from mAP");
        }
    }
    let mut per_threshold = Vec::with_capacity(config.tiou_grid.len());
    for (ti, &t) in config.tiou_grid.iter().enumerate() {
        let aps: Vec<f64> = per_class.iter().filter_map(|r| r[ti]).collect();
        if aps.is_empty() {
            return Err(Error::Eval("no class has ground truth".into()));
        }
        per_threshold.push((t, aps.iter().sum::<f64>() / aps.len() as f64));
    }
    let average = per_threshold.iter().map(|p| p.1).sum::<f64>() / per_threshold.len() as f64;
    Ok(MapResult {
        per_threshold,
        average,
        per_class,
    })
}

/// Quality of detections that localize some instance tightly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostics {
    /// Fraction whose class equals the class of the best-overlapping instance.
    pub accuracy: f64,
    pub mean_tiou: f64,
    pub count: usize,
}

/// Minimum best tIoU for a detection to count as high quality (exclusive).
pub const HIGH_QUALITY_TIOU: f64 = 0.7;

/// Restricts to detections whose best tIoU against any same-video instance
/// exceeds [`HIGH_QUALITY_TIOU`] and reports their classification accuracy
/// and mean tIoU. Records sharing an extent are first collapsed to the most
/// confident class. `None` when no detection qualifies.
pub fn diagnostics(detections: &[DetectionRecord], ground_truth: &[AnnotationSet]) -> Result<Option<Diagnostics>> {
    let mut sorted: Vec<&DetectionRecord> = detections.iter().collect();
    for d in &sorted {
        check_detection(d)?;
    }
    sorted.sort_by(|a, b| {
        a.video_id
            .cmp(&b.video_id)
            .then(a.t_start.total_cmp(&b.t_start))
            .then(a.t_end.total_cmp(&b.t_end))
            .then(b.confidence.total_cmp(&a.confidence))
            .then(a.class_id.cmp(&b.class_id))
    });
    sorted.dedup_by(|b, a| a.video_id == b.video_id && a.t_start == b.t_start && a.t_end == b.t_end);

    let (mut n, mut correct, mut sum) = (0usize, 0usize, 0.0);
    for d in sorted {
        let Some(set) = ground_truth.iter().find(|g| g.video_id == d.video_id) else {
            continue;
        };
        let mut best: Option<(usize, f64)> = None;
        for inst in &set.instances {
            let o = tiou_unchecked((d.t_start, d.t_end), (inst.t_start, inst.t_end));
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((inst.class_id, o));
            }
        }
        if let Some((class, o)) = best {
            if o > HIGH_QUALITY_TIOU {
                n += 1;
                correct += usize::from(class == d.class_id);
                sum += o;
            }
        }
    }
    Ok((n > 0).then(|| Diagnostics {
        accuracy: correct as f64 / n as f64,
        mean_tiou: sum / n as f64,
        count: n,
    }))
}

/// Results table: one row per corpus, columns `mAP@t` then the average.
pub fn results_table(rows: &[(String, MapResult)]) -> String {
    let mut out = String::from("corpus");
    if let Some((_, first)) = rows.first() {
        for (t, _) in &first.per_threshold {
            out.push_str(&format!(",mAP@{t:.2}"));
        }
    }
    out.push_str(",avg_mAP\n");
    for (name, r) in rows {
        out.push_str(name);
        for (_, m) in &r.per_threshold {
            out.push_str(&format!(",{m:.6}"));
        }
        out.push_str(&format!(",{:.6}\n", r.average));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::ActionInstance;
    use alloc::string::ToString;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(v: &str, s: f64, e: f64, k: usize, c: f64) -> DetectionRecord {
        DetectionRecord {
            video_id: v.to_string(),
            t_start: s,
            t_end: e,
            class_id: k,
            confidence: c,
        }
    }

    fn gt(v: &str, inst: &[(f64, f64, usize)]) -> AnnotationSet {
        AnnotationSet {
            video_id: v.to_string(),
            instances: inst
                .iter()
                .map(|&(s, e, k)| ActionInstance {
                    t_start: s,
                    t_end: e,
                    class_id: k,
                })
                .collect(),
        }
    }

    // Reference AP, written independently of the main implementation:
    // literal greedy scan over every ground truth for every detection, then
    // interpolated precision at each recall step read straight off the
    // definition (max precision at any rank with recall >= this one).
    fn reference_ap(dets: &[DetectionRecord], gts: &[AnnotationSet], class: usize, thr: f64) -> Option<f64> {
        let all: Vec<(&str, f64, f64)> = gts
            .iter()
            .flat_map(|g| {
                g.instances
                    .iter()
                    .map(move |i| (g.video_id.as_str(), i.t_start, i.t_end, i.class_id))
            })
            .filter(|x| x.3 == class)
            .map(|x| (x.0, x.1, x.2))
            .collect();
        if all.is_empty() {
            return None;
        }
        let mut ds: Vec<&DetectionRecord> = dets.iter().filter(|d| d.class_id == class).collect();
        ds.sort_by(|a, b| {
            let key = |d: &DetectionRecord| (-d.confidence, d.t_start, d.video_id.clone(), d.t_end);
            key(a).partial_cmp(&key(b)).unwrap()
        });
        let mut used = vec![false; all.len()];
        let mut hits = Vec::new();
        for d in &ds {
            let mut pick: Option<usize> = None;
            let mut best = -1.0;
            for (j, g) in all.iter().enumerate() {
                let inter = (d.t_end.min(g.2) - d.t_start.max(g.1)).max(0.0);
                let o = inter / (d.t_end.max(g.2) - d.t_start.min(g.1));
                if g.0 == d.video_id && !used[j] && o > best {
                    best = o;
                    pick = Some(j);
                }
            }
            let hit = pick.is_some() && best >= thr;
            if hit {
                used[pick.unwrap()] = true;
            }
            hits.push(hit);
        }
        let n = all.len() as f64;
        let pr: Vec<(f64, f64)> = (0..hits.len())
            .map(|i| {
                let h = hits[..=i].iter().filter(|x| **x).count() as f64;
                (h / (i + 1) as f64, h / n)
            })
            .collect();
        let mut ap = 0.0;
        for (i, hit) in hits.iter().enumerate() {
            if *hit {
                ap += pr[i..].iter().map(|x| x.0).fold(0.0, f64::max) / n;
            }
        }
        Some(ap)
    }

    pub(crate) fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<DetectionRecord>, Vec<AnnotationSet>) {
        let nv = rng.gen_range(1..=5);
        let mut gts: Vec<AnnotationSet> = (0..nv).map(|v| gt(&format!("v{v}"), &[])).collect();
        for _ in 0..rng.gen_range(0..=5) {
            let v = rng.gen_range(0..nv);
            let s = rng.gen_range(0..8) as f64;
            let e = s + rng.gen_range(1..5) as f64;
            gts[v].instances.push(ActionInstance {
                t_start: s,
                t_end: e,
                class_id: rng.gen_range(0..2),
            });
        }
        let dets = (0..rng.gen_range(0..=10))
            .map(|_| {
                let s = rng.gen_range(0..8) as f64 + rng.gen_range(0..2) as f64 * 0.5;
                let e = s + rng.gen_range(1..5) as f64;
                // coarse confidences so ties occur
                let c = rng.gen_range(0..6) as f64 / 5.0;
                det(&format!("v{}", rng.gen_range(0..nv)), s, e, rng.gen_range(0..2), c)
            })
            .collect();
        (dets, gts)
    }

    #[test]
    fn tiou_examples() {
        assert_eq!(tiou((1.0, 2.0), (1.0, 2.0)).unwrap(), 1.0);
        assert_eq!(tiou((0.0, 1.0), (2.0, 3.0)).unwrap(), 0.0);
        assert!((tiou((10.0, 20.0), (15.0, 25.0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(tiou((2.0, 2.0), (0.0, 1.0)).is_err());
    }

    #[test]
    fn ap_examples() {
        let g = [gt("a", &[(1.0, 3.0, 0), (5.0, 9.0, 0)])];
        let perfect = [det("a", 1.0, 3.0, 0, 0.9), det("a", 5.0, 9.0, 0, 0.8)];
        assert_eq!(average_precision(&perfect, &g, 0, 0.5).unwrap(), Some(1.0));
        assert_eq!(average_precision(&[], &g, 0, 0.5).unwrap(), Some(0.0));
        assert_eq!(average_precision(&perfect, &g, 1, 0.5).unwrap(), None);
        // FP ranked first: the envelope lifts both recall steps to 2/3
        let d = [
            det("a", 20.0, 21.0, 0, 0.9),
            det("a", 1.0, 3.0, 0, 0.8),
            det("a", 5.0, 9.0, 0, 0.7),
        ];
        let ap = average_precision(&d, &g, 0, 0.5).unwrap().unwrap();
        assert!((ap - 2.0 / 3.0).abs() < 1e-15);
        // TP, FP, TP: 1/2·1 + 1/2·2/3
        let d = [
            det("a", 1.0, 3.0, 0, 0.9),
            det("a", 20.0, 21.0, 0, 0.8),
            det("a", 5.0, 9.0, 0, 0.7),
        ];
        let ap = average_precision(&d, &g, 0, 0.5).unwrap().unwrap();
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn ap_matches_reference_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let (d, g) = random_instance(&mut rng);
            for class in 0..2 {
                for thr in [0.3, 0.5, 0.7] {
                    assert_eq!(
                        average_precision(&d, &g, class, thr).unwrap(),
                        reference_ap(&d, &g, class, thr)
                    );
                }
            }
        }
    }

    #[test]
    fn mean_ap_examples() {
        let g = [gt("a", &[(1.0, 3.0, 0)]), gt("b", &[(2.0, 6.0, 1)])];
        let d = [det("a", 1.0, 3.0, 0, 0.5), det("b", 2.0, 6.0, 1, 0.5)];
        let r = mean_ap(&d, &g, &EvalConfig::default_grid(2)).unwrap();
        assert!(r.per_threshold.iter().all(|p| p.1 == 1.0));
        assert_eq!(r.average, 1.0);
        let one = EvalConfig {
            tiou_grid: vec![0.5],
            n_classes: 2,
        };
        let d2 = [det("a", 1.0, 2.5, 0, 0.5)];
        let r = mean_ap(&d2, &g, &one).unwrap();
        assert_eq!(r.average, r.per_threshold[0].1);
        // class 2 has no ground truth and is excluded
        let three = EvalConfig {
            tiou_grid: vec![0.5],
            n_classes: 3,
        };
        assert_eq!(mean_ap(&d, &g, &three).unwrap().average, 1.0);
        assert!(mean_ap(
            &d,
            &g,
            &EvalConfig {
                tiou_grid: vec![0.5, 0.5],
                n_classes: 2
            }
        )
        .is_err());
        assert!(mean_ap(
            &d,
            &g,
            &EvalConfig {
                tiou_grid: vec![0.5],
                n_classes: 1
            }
        )
        .is_err());
    }

    #[test]
    fn diagnostics_examples() {
        let g = [gt("a", &[(1.0, 3.0, 0), (5.0, 9.0, 1)])];
        let d = [det("a", 1.0, 3.0, 0, 0.9), det("a", 5.0, 9.0, 1, 0.8)];
        assert_eq!(
            diagnostics(&d, &g).unwrap(),
            Some(Diagnostics {
                accuracy: 1.0,
                mean_tiou: 1.0,
                count: 2
            })
        );
        let far = [det("a", 1.0, 9.0, 0, 0.9)];
        assert_eq!(diagnostics(&far, &g).unwrap(), None);
        // same extent under two classes counts once, as the more confident one
        let dup = [det("a", 5.0, 9.0, 0, 0.3), det("a", 5.0, 9.0, 1, 0.6)];
        assert_eq!(diagnostics(&dup, &g).unwrap().unwrap().accuracy, 1.0);
    }

    #[test]
    fn diagnostics_match_filter_and_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (mut d, g) = random_instance(&mut rng);
            // distinct extents so no collapsing happens
            d.sort_by(|a, b| {
                (&a.video_id, a.t_start, a.t_end)
                    .partial_cmp(&(&b.video_id, b.t_start, b.t_end))
                    .unwrap()
            });
            d.dedup_by(|a, b| a.video_id == b.video_id && a.t_start == b.t_start && a.t_end == b.t_end);
            let mut kept = Vec::new();
            for x in &d {
                let set = g.iter().find(|s| s.video_id == x.video_id).unwrap();
                let best = set
                    .instances
                    .iter()
                    .map(|i| (tiou((x.t_start, x.t_end), (i.t_start, i.t_end)).unwrap(), i.class_id))
                    .fold(None, |acc: Option<(f64, usize)>, c| match acc {
                        Some(a) if a.0 >= c.0 => Some(a),
                        _ => Some(c),
                    });
                if let Some((o, k)) = best.filter(|b| b.0 > 0.7) {
                    kept.push((o, k == x.class_id));
                }
            }
            let got = diagnostics(&d, &g).unwrap();
            if kept.is_empty() {
                assert_eq!(got, None);
            } else {
                let got = got.unwrap();
                let n = kept.len() as f64;
                assert!((got.accuracy - kept.iter().filter(|k| k.1).count() as f64 / n).abs() < 1e-12);
                assert!((got.mean_tiou - kept.iter().map(|k| k.0).sum::<f64>() / n).abs() < 1e-12);
            }
        }
    }

    fn overlaps_within_class(g: &[AnnotationSet]) -> bool {
        g.iter().any(|s| {
            s.instances.iter().enumerate().any(|(i, a)| {
                s.instances[i + 1..]
                    .iter()
                    .any(|b| a.class_id == b.class_id && a.t_start < b.t_end && b.t_start < a.t_end)
            })
        })
    }

    // A duplicate can only claim a second instance if it overlaps two of them
    // by more than the threshold, which disjoint instances rule out above 0.5.
    #[test]
    fn duplicate_of_matched_detection_never_raises_ap() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..400 {
            let (mut d, g) = random_instance(&mut rng);
            if d.is_empty() || overlaps_within_class(&g) {
                continue;
            }
            let before = average_precision(&d, &g, d[0].class_id, 0.6).unwrap();
            d.push(d[0].clone());
            let after = average_precision(&d, &g, d[0].class_id, 0.6).unwrap();
            if let (Some(b), Some(a)) = (before, after) {
                assert!(a <= b + 1e-15, "{b} -> {a}");
            }
        }
    }

    proptest! {
        #[test]
        fn ap_is_rank_statistic(seed in 0u64..500, scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (d, g) = random_instance(&mut rng);
            let mapped: Vec<_> = d.iter().map(|x| DetectionRecord {
                confidence: libm::exp(scale * x.confidence) + shift,
                ..x.clone()
            }).collect();
            for class in 0..2 {
                prop_assert_eq!(
                    average_precision(&d, &g, class, 0.5).unwrap(),
                    average_precision(&mapped, &g, class, 0.5).unwrap()
                );
            }
        }

        #[test]
        fn mean_ap_ignores_input_order(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (d, g) = random_instance(&mut rng);
            let cfg = EvalConfig::default_grid(2);
            let Ok(a) = mean_ap(&d, &g, &cfg) else { return Ok(()); };
            let mut d2 = d.clone();
            d2.reverse();
            let mut g2 = g.clone();
            g2.reverse();
            prop_assert_eq!(a, mean_ap(&d2, &g2, &cfg).unwrap());
        }
    }
}
