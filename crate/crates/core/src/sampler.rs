//! Action samples and coupling samples mined from annotated training videos.

use alloc::string::String;
use alloc::vec::Vec;

use crate::numkit::cosine_slices;
use crate::video::{AnnotationSet, Corpus, VideoFeatureSequence};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub threshold: f64,
    pub k_per_action: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            threshold: 0.7,
            k_per_action: 3,
        }
    }
}

/// Mean feature of the snippets inside one annotated instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSample {
    pub video_id: String,
    pub video_index: usize,
    pub instance_index: usize,
    pub class_id: usize,
    pub snippets: Vec<usize>,
    pub feature: Vec<f64>,
}

/// A non-action snippet paired with the action sample it resembles.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingSample {
    pub video_id: String,
    pub video_index: usize,
    pub snippet_index: usize,
    pub feature: Vec<f64>,
    /// Index into the action-sample list.
    pub matched_action: usize,
    pub rank: usize,
    pub similarity: f64,
}

/// Action samples and their mined coupling samples; each coupling sample is
/// one training pair.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SamplePairs {
    pub actions: Vec<ActionSample>,
    pub couplings: Vec<CouplingSample>,
}

impl SamplePairs {
    pub fn len(&self) -> usize {
        self.couplings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.couplings.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ActionSample, &CouplingSample)> {
        self.couplings.iter().map(|c| (&self.actions[c.matched_action], c))
    }

    /// Pairs whose samples come from the given video.
    pub fn for_video(&self, video_index: usize) -> Vec<usize> {
        self.couplings
            .iter()
            .enumerate()
            .filter(|(_, c)| c.video_index == video_index)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Partitions snippets by whether their center time lies inside any instance.
pub fn split_snippets(video: &VideoFeatureSequence, annotations: &AnnotationSet) -> (Vec<usize>, Vec<usize>) {
    (0..video.len()).partition(|&i| {
        let t = video.snippet_center_s(i);
        annotations.instances.iter().any(|a| a.contains(t))
    })
}

/// One action sample per annotated instance, in (video, instance) order.
pub fn collect_action_samples(corpus: &Corpus) -> Vec<ActionSample> {
    let mut out = Vec::new();
    for (vi, video) in corpus.videos.iter().enumerate() {
        let f = &video.features;
        for (k, inst) in video.annotations.instances.iter().enumerate() {
            let snippets: Vec<usize> = (0..f.len()).filter(|&i| inst.contains(f.snippet_center_s(i))).collect();
            if snippets.is_empty() {
                log::warn!(
                    "{}: instance {k} [{}, {}) covers no snippet center; skipped",
                    f.video_id,
                    inst.t_start,
                    inst.t_end
                );
                continue;
            }
            let mut feature = alloc::vec![0.0; f.dim()];
            for &i in &snippets {
                for (a, x) in feature.iter_mut().zip(f.snippet(i)) {
                    *a += x;
                }
            }
            let n = snippets.len() as f64;
            feature.iter_mut().for_each(|a| *a /= n);
            out.push(ActionSample {
                video_id: f.video_id.clone(),
                video_index: vi,
                instance_index: k,
                class_id: inst.class_id,
                snippets,
                feature,
            });
        }
    }
    out
}

/// For each action sample, the top-`k` non-action snippets of its own video
/// whose cosine similarity reaches `threshold`; ties go to the lower index.
pub fn mine_coupling_samples(corpus: &Corpus, actions: Vec<ActionSample>, config: SamplerConfig) -> SamplePairs {
    let mut couplings = Vec::new();
    for (ai, action) in actions.iter().enumerate() {
        let video = &corpus.videos[action.video_index];
        let (_, background) = split_snippets(&video.features, &video.annotations);
        let mut scored: Vec<(usize, f64)> = background
            .into_iter()
            .filter_map(|i| {
                cosine_slices(&action.feature, video.features.snippet(i))
                    .filter(|s| *s >= config.threshold)
                    .map(|s| (i, s))
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for (rank, (i, s)) in scored.into_iter().take(config.k_per_action).enumerate() {
            couplings.push(CouplingSample {
                video_id: action.video_id.clone(),
                video_index: action.video_index,
                snippet_index: i,
                feature: video.features.snippet(i).to_vec(),
                matched_action: ai,
                rank,
                similarity: s,
            });
        }
    }
    SamplePairs { actions, couplings }
}

/// Convenience: collect and mine in one pass.
pub fn build_pairs(corpus: &Corpus, config: SamplerConfig) -> SamplePairs {
    mine_coupling_samples(corpus, collect_action_samples(corpus), config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Tensor;
    use crate::synthgen::{generate, SynthSpec};
    use crate::video::{ActionInstance, Video};
    use alloc::vec;

    fn seq(l: usize) -> VideoFeatureSequence {
        VideoFeatureSequence::new("v", Tensor::full(&[l, 2], 1.0), 1.0).unwrap()
    }

    fn ann(inst: &[(f64, f64)]) -> AnnotationSet {
        AnnotationSet {
            video_id: "v".into(),
            instances: inst
                .iter()
                .map(|&(s, e)| ActionInstance {
                    t_start: s,
                    t_end: e,
                    class_id: 0,
                })
                .collect(),
        }
    }

    #[test]
    fn split_examples() {
        let (a, b) = split_snippets(&seq(10), &ann(&[(0.0, 10.0)]));
        assert_eq!((a.len(), b.len()), (10, 0));
        let (a, b) = split_snippets(&seq(10), &ann(&[]));
        assert_eq!((a.len(), b.len()), (0, 10));
        let (a, _) = split_snippets(&seq(10), &ann(&[(2.0, 5.0)]));
        assert_eq!(a, vec![2, 3, 4]);
    }

    fn synth(noise: f64, seed: u64) -> crate::synthgen::SynthCorpus {
        generate(&SynthSpec {
            n_videos: 8,
            snippets_per_video: 64,
            feature_dim: 12,
            n_classes: 3,
            n_scenes: 3,
            noise_sigma: noise,
            seed,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn action_sample_is_gain_times_direction_plus_scene() {
        let sc = synth(0.0, 1);
        let samples = collect_action_samples(&sc.corpus);
        assert_eq!(samples.len(), sc.corpus.instance_count());
        for s in &samples {
            let vi = s.video_index;
            let dir = sc.latents.class_directions.row(sc.latents.video_class[vi]);
            let scene = sc.latents.scenes.row(sc.latents.video_scene[vi]);
            for j in 0..dir.len() {
                let expect = 0.5 * dir[j] + scene[j];
                assert!((s.feature[j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooled_feature_is_brute_force_mean() {
        let sc = synth(0.1, 2);
        for s in collect_action_samples(&sc.corpus) {
            let v = &sc.corpus.videos[s.video_index];
            let inst = v.annotations.instances[s.instance_index];
            let rows: Vec<&[f64]> = (0..v.features.len())
                .filter(|&i| {
                    let c = (i as f64 + 0.5) * v.features.snippet_duration_s;
                    c >= inst.t_start && c < inst.t_end
                })
                .map(|i| v.features.snippet(i))
                .collect();
            for j in 0..s.feature.len() {
                let m = rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
                assert!((s.feature[j] - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_instance_is_skipped() {
        let v = Video {
            features: seq(10),
            annotations: ann(&[(2.1, 2.4), (4.0, 6.0)]),
        };
        let c = Corpus::new(vec!["a".into()], 1.0, vec![v]).unwrap();
        let s = collect_action_samples(&c);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].instance_index, 1);
    }

    #[test]
    fn unattainable_threshold_yields_nothing() {
        let sc = synth(0.1, 3);
        let p = build_pairs(
            &sc.corpus,
            SamplerConfig {
                threshold: 1.0 + 1e-9,
                k_per_action: 3,
            },
        );
        assert!(p.is_empty());
    }

    #[test]
    fn permissive_threshold_gives_min_k_available() {
        let sc = synth(0.1, 3);
        let p = build_pairs(
            &sc.corpus,
            SamplerConfig {
                threshold: -1.0,
                k_per_action: 3,
            },
        );
        for (ai, a) in p.actions.iter().enumerate() {
            let v = &sc.corpus.videos[a.video_index];
            let (_, bg) = split_snippets(&v.features, &v.annotations);
            let n = p.couplings.iter().filter(|c| c.matched_action == ai).count();
            assert_eq!(n, bg.len().min(3));
        }
    }

    #[test]
    fn noise_free_top_k_matches_exhaustive_sort() {
        let sc = synth(0.0, 4);
        let cfg = SamplerConfig {
            threshold: 0.5,
            k_per_action: 3,
        };
        let p = build_pairs(&sc.corpus, cfg);
        for (ai, a) in p.actions.iter().enumerate() {
            let v = &sc.corpus.videos[a.video_index];
            let scene = sc.latents.scenes.row(sc.latents.video_scene[a.video_index]);
            let closed = cosine_slices(&a.feature, scene).unwrap();
            let mut all: Vec<(usize, f64)> = (0..v.features.len())
                .filter(|&i| {
                    !v.annotations
                        .instances
                        .iter()
                        .any(|x| x.contains(v.features.snippet_center_s(i)))
                })
                .map(|i| (i, cosine_slices(&a.feature, v.features.snippet(i)).unwrap()))
                .filter(|(_, s)| *s >= 0.5)
                .collect();
            all.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
            let got: Vec<(usize, f64)> = p
                .couplings
                .iter()
                .filter(|c| c.matched_action == ai)
                .map(|c| (c.snippet_index, c.similarity))
                .collect();
            all.truncate(3);
            assert_eq!(got, all);
            for (_, s) in got {
                assert!((s - closed).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mined_pairs_respect_invariants() {
        for seed in 0..5 {
            let sc = synth(0.2, seed);
            let p = build_pairs(
                &sc.corpus,
                SamplerConfig {
                    threshold: 0.3,
                    k_per_action: 4,
                },
            );
            for (ai, _) in p.actions.iter().enumerate() {
                let sims: Vec<f64> = p
                    .couplings
                    .iter()
                    .filter(|c| c.matched_action == ai)
                    .map(|c| c.similarity)
                    .collect();
                assert!(sims.windows(2).all(|w| w[0] >= w[1]));
            }
            for c in &p.couplings {
                let v = &sc.corpus.videos[c.video_index];
                let t = v.features.snippet_center_s(c.snippet_index);
                assert!(!v.annotations.instances.iter().any(|a| a.contains(t)));
                assert!(c.similarity >= 0.3);
            }
        }
    }
}
