//! Synthetic corpus with known action and co-occurrence components.
//!
//! Each video has one action class and one scene. Every snippet feature is
//! `action_gain·a_class·m(t) + s + ε` where `a_class` is a unit class
//! direction, `s` the unit scene vector, `m(t)` the instance mask and
//! `ε ~ N(0, noise_sigma²·I)`. Scenes are class-correlated: a video uses its
//! class's preferred scene with probability [`PREFERRED_SCENE_PROB`], and a
//! uniformly drawn scene otherwise.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::numkit::Tensor;
use crate::video::{ActionInstance, AnnotationSet, Corpus, Video, VideoFeatureSequence};

pub const PREFERRED_SCENE_PROB: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
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

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_videos: 100,
            snippets_per_video: 128,
            feature_dim: 64,
            n_classes: 10,
            n_scenes: 10,
            action_gain: 0.5,
            noise_sigma: 0.1,
            snippet_duration_s: 1.0,
            min_instances: 1,
            max_instances: 4,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Shortest and longest instance, in snippets.
    pub fn duration_bounds(&self) -> (usize, usize) {
        let l = self.snippets_per_video;
        let min = (l / 16).max(2);
        (min, (l / 4).max(min))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Generation(m));
        if self.n_videos == 0 || self.feature_dim == 0 || self.snippets_per_video == 0 {
            return fail("n_videos, snippets_per_video and feature_dim must be positive".into());
        }
        if !(self.action_gain > 0.0 && self.action_gain.is_finite()) {
            return fail(format!("action_gain {} must be > 0", self.action_gain));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        if self.n_classes < 2 || self.n_scenes < 2 {
            return fail("n_classes and n_scenes must both be >= 2".into());
        }
        if !(self.snippet_duration_s > 0.0 && self.snippet_duration_s.is_finite()) {
            return fail("snippet_duration_s must be positive".into());
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return fail("need 1 <= min_instances <= max_instances".into());
        }
        let (dmin, _) = self.duration_bounds();
        let need = self.max_instances * dmin + self.max_instances - 1;
        if need > self.snippets_per_video {
            return fail(format!(
                "{} instances of >= {dmin} snippets cannot fit in {} snippets",
                self.max_instances, self.snippets_per_video
            ));
        }
        Ok(())
    }
}

/// Ground-truth components behind a synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Latents {
    /// `n_classes × C`, unit rows.
    pub class_directions: Tensor,
    /// `n_scenes × C`, unit rows.
    pub scenes: Tensor,
    pub preferred_scene: Vec<usize>,
    pub video_class: Vec<usize>,
    pub video_scene: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub latents: Latents,
}

fn unit_vector<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Non-overlapping instance spans `[start, end)` in snippets, separated by at
/// least one background snippet.
fn place_instances<R: Rng>(rng: &mut R, spec: &SynthSpec) -> Vec<(usize, usize)> {
    let l = spec.snippets_per_video;
    let (dmin, dmax) = spec.duration_bounds();
    let n = rng.gen_range(spec.min_instances..=spec.max_instances);
    let mut durs: Vec<usize> = (0..n).map(|_| rng.gen_range(dmin..=dmax)).collect();
    while durs.iter().sum::<usize>() + n - 1 > l {
        // shrink the longest until it fits; validate() guarantees termination
        let (i, _) = durs.iter().enumerate().max_by_key(|(_, d)| **d).unwrap();
        durs[i] -= 1;
    }
    let slack = l - durs.iter().sum::<usize>() - (n - 1);
    // stars and bars: split `slack` into n + 1 gaps
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.gen_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut spans = Vec::with_capacity(n);
    let mut pos = 0;
    let mut prev = 0;
    for (k, (&d, &cut)) in durs.iter().zip(&cuts).enumerate() {
        pos += cut - prev + usize::from(k > 0);
        prev = cut;
        spans.push((pos, pos + d));
        pos += d;
    }
    spans
}

/// Generates a corpus plus its latent components; a pure function of `spec`.
pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let c = spec.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let class_dirs: Vec<Vec<f64>> = (0..spec.n_classes).map(|_| unit_vector(&mut rng, c)).collect();
    let scenes: Vec<Vec<f64>> = (0..spec.n_scenes).map(|_| unit_vector(&mut rng, c)).collect();
    let mut scene_ids: Vec<usize> = (0..spec.n_scenes).collect();
    scene_ids.shuffle(&mut rng);
    let preferred_scene: Vec<usize> = (0..spec.n_classes).map(|k| scene_ids[k % spec.n_scenes]).collect();

    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Generation(format!("{e:?}")))?;
    let class_names = (0..spec.n_classes).map(|k| format!("class_{k:02}")).collect();
    let mut videos = Vec::with_capacity(spec.n_videos);
    let (mut video_class, mut video_scene) = (Vec::new(), Vec::new());
    for v in 0..spec.n_videos {
        let mut vrng = ChaCha8Rng::seed_from_u64(spec.seed);
        vrng.set_stream(v as u64 + 1);
        let class = vrng.gen_range(0..spec.n_classes);
        let scene = if vrng.gen_bool(PREFERRED_SCENE_PROB) {
            preferred_scene[class]
        } else {
            vrng.gen_range(0..spec.n_scenes)
        };
        let spans = place_instances(&mut vrng, spec);
        let l = spec.snippets_per_video;
        let mut mask = vec![false; l];
        for &(s, e) in &spans {
            mask[s..e].fill(true);
        }
        let mut data = Vec::with_capacity(l * c);
        for &inside in &mask {
            for j in 0..c {
                let mut f = scenes[scene][j];
                if inside {
                    f += spec.action_gain * class_dirs[class][j];
                }
                if spec.noise_sigma > 0.0 {
                    f += noise.sample(&mut vrng);
                }
                data.push(f);
            }
        }
        let id = format!("video_{v:04}");
        let dur = spec.snippet_duration_s;
        let instances = spans
            .iter()
            .map(|&(s, e)| ActionInstance {
                t_start: s as f64 * dur,
                t_end: e as f64 * dur,
                class_id: class,
            })
            .collect();
        videos.push(Video {
            features: VideoFeatureSequence::new(id.clone(), Tensor::matrix(l, c, data)?, dur)?,
            annotations: AnnotationSet {
                video_id: id,
                instances,
            },
        });
        video_class.push(class);
        video_scene.push(scene);
    }
    let corpus = Corpus::new(class_names, spec.snippet_duration_s, videos)?;
    Ok(SynthCorpus {
        corpus,
        latents: Latents {
            class_directions: Tensor::from_rows(&class_dirs)?,
            scenes: Tensor::from_rows(&scenes)?,
            preferred_scene,
            video_class,
            video_scene,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::cosine_slices;

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            n_videos: 12,
            snippets_per_video: 64,
            feature_dim: 16,
            n_classes: 4,
            n_scenes: 3,
            seed,
            ..SynthSpec::default()
        }
    }

    fn inside_outside(v: &Video) -> (Vec<usize>, Vec<usize>) {
        let (mut ins, mut outs) = (Vec::new(), Vec::new());
        for i in 0..v.features.len() {
            let t = v.features.snippet_center_s(i);
            if v.annotations.instances.iter().any(|a| a.contains(t)) {
                ins.push(i);
            } else {
                outs.push(i);
            }
        }
        (ins, outs)
    }

    #[test]
    fn noise_free_difference_is_class_direction() {
        let spec = SynthSpec {
            noise_sigma: 0.0,
            action_gain: 1.0,
            ..small(4)
        };
        let sc = generate(&spec).unwrap();
        for (vi, v) in sc.corpus.videos.iter().enumerate() {
            let (ins, outs) = inside_outside(v);
            let Some(&o) = outs.first() else { continue };
            let dir = sc.latents.class_directions.row(sc.latents.video_class[vi]);
            for &i in &ins {
                for (j, want) in dir.iter().enumerate() {
                    let diff = v.features.snippet(i)[j] - v.features.snippet(o)[j];
                    assert!((diff - want).abs() < 1e-15, "{diff} vs {want}");
                }
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        assert_eq!(generate(&small(9)).unwrap(), generate(&small(9)).unwrap());
        assert_ne!(generate(&small(9)).unwrap(), generate(&small(10)).unwrap());
    }

    #[test]
    fn instances_fit_and_never_overlap() {
        for seed in 0..20 {
            let sc = generate(&small(seed)).unwrap();
            for v in &sc.corpus.videos {
                let mut inst = v.annotations.instances.clone();
                assert!((1..=4).contains(&inst.len()));
                inst.sort_by(|a, b| a.t_start.partial_cmp(&b.t_start).unwrap());
                for w in inst.windows(2) {
                    assert!(w[0].t_end < w[1].t_start);
                }
                assert!(inst.last().unwrap().t_end <= v.features.duration_s());
            }
        }
    }

    #[test]
    fn infeasible_spec_is_rejected() {
        let spec = SynthSpec {
            snippets_per_video: 8,
            ..small(0)
        };
        assert!(matches!(generate(&spec), Err(Error::Generation(_))));
        let spec = SynthSpec {
            action_gain: 0.0,
            ..small(0)
        };
        assert!(generate(&spec).is_err());
    }

    fn mean_in_out_cosine(sc: &SynthCorpus) -> f64 {
        let (mut sum, mut n) = (0.0, 0usize);
        for v in &sc.corpus.videos {
            let (ins, outs) = inside_outside(v);
            for &i in &ins {
                for &o in &outs {
                    sum += cosine_slices(v.features.snippet(i), v.features.snippet(o)).unwrap();
                    n += 1;
                }
            }
        }
        sum / n as f64
    }

    /// Co-occurrence dominates: without noise an action snippet stays close to
    /// the background of its own video. With the default per-dimension noise
    /// the expectation follows from the component energies:
    /// `1 / sqrt((1 + g² + Cσ²)(1 + Cσ²))`.
    #[test]
    fn default_spec_in_out_cosine() {
        let clean = generate(&SynthSpec {
            noise_sigma: 0.0,
            ..SynthSpec::default()
        })
        .unwrap();
        let c = mean_in_out_cosine(&clean);
        assert!(c > 0.8, "noise-free mean cosine {c}");

        let spec = SynthSpec::default();
        let noisy = generate(&spec).unwrap();
        let c = mean_in_out_cosine(&noisy);
        let cs2 = spec.feature_dim as f64 * spec.noise_sigma * spec.noise_sigma;
        let g2 = spec.action_gain * spec.action_gain;
        let expect = 1.0 / libm::sqrt((1.0 + g2 + cs2) * (1.0 + cs2));
        assert!((c - expect).abs() < 0.03, "mean cosine {c}, expected ~{expect}");
    }

    #[test]
    fn vanishing_gain_makes_inside_and_outside_indistinguishable() {
        let spec = SynthSpec {
            action_gain: 1e-9,
            ..small(2)
        };
        let sc = generate(&spec).unwrap();
        let v = &sc.corpus.videos[0];
        let (ins, outs) = inside_outside(v);
        let s = sc.latents.scenes.row(sc.latents.video_scene[0]);
        let mean_cos = |idx: &[usize]| {
            idx.iter()
                .map(|&i| cosine_slices(v.features.snippet(i), s).unwrap())
                .sum::<f64>()
                / idx.len() as f64
        };
        // noise floor: std of a single cosine is ~ sigma, so the mean's is smaller
        assert!((mean_cos(&ins) - mean_cos(&outs)).abs() < spec.noise_sigma);
    }
}
