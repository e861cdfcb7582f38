//! Synthetic untrimmed videos with paragraph annotations.
//!
//! Every event overwrites a contiguous run of frames with a fixed unit-norm pattern of
//! its archetype on top of Gaussian background noise. Its caption is a token template
//! `[ordinal, subject, verb, objects...]`: the verb names the archetype, the ordinal the
//! event's rank within the video, so two captions in one video never coincide.
//!
//! Time is normalised to `[0, 1]`; frame `i` sits at `(i + 0.5) / T`.

use crate::error::{invalid_config, Result};
use gvl_autograd::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
const NUM_SUBJECTS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub num_videos: usize,
    pub frames_per_video: usize,
    pub feature_dim: usize,
    pub events_per_video_range: (usize, usize),
    pub vocab_size: usize,
    pub caption_len_range: (usize, usize),
    pub background_noise_std: f64,
    pub boundary_jitter_std: f64,
    pub seed: u64,
    pub num_archetypes: usize,
    /// Event length as a fraction of the video, before packing.
    pub event_width_range: (f64, f64),
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_videos: 500,
            frames_per_video: 128,
            feature_dim: 32,
            events_per_video_range: (2, 5),
            vocab_size: 40,
            caption_len_range: (3, 5),
            background_noise_std: 0.1,
            boundary_jitter_std: 0.02,
            seed: 7,
            num_archetypes: 8,
            event_width_range: (0.06, 0.18),
        }
    }
}

/// Token id layout derived from a [`GenConfig`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pub size: usize,
    pub ordinal_base: usize,
    pub subject_base: usize,
    pub verb_base: usize,
    pub object_base: usize,
    pub num_objects: usize,
    pub num_archetypes: usize,
    pub len_range: (usize, usize),
}

impl Vocabulary {
    pub fn from_config(cfg: &GenConfig) -> Result<Self> {
        let ordinal_base = 2;
        let subject_base = ordinal_base + cfg.events_per_video_range.1;
        let verb_base = subject_base + NUM_SUBJECTS;
        let object_base = verb_base + cfg.num_archetypes;
        let needed_objects = cfg.caption_len_range.1.saturating_sub(3);
        if cfg.vocab_size < object_base + needed_objects {
            return Err(invalid_config(format!(
                "vocab_size {} too small: need {} (2 specials, {} ordinals, {} subjects, {} verbs, {} objects)",
                cfg.vocab_size,
                object_base + needed_objects,
                cfg.events_per_video_range.1,
                NUM_SUBJECTS,
                cfg.num_archetypes,
                needed_objects
            )));
        }
        Ok(Self {
            size: cfg.vocab_size,
            ordinal_base,
            subject_base,
            verb_base,
            object_base,
            num_objects: cfg.vocab_size - object_base,
            num_archetypes: cfg.num_archetypes,
            len_range: cfg.caption_len_range,
        })
    }

    pub fn verb(&self, archetype: usize) -> usize {
        self.verb_base + archetype
    }

    /// Archetype named by a verb token, if `token` is one.
    pub fn verb_archetype(&self, token: usize) -> Option<usize> {
        (token >= self.verb_base && token < self.verb_base + self.num_archetypes).then(|| token - self.verb_base)
    }

    /// Caption template for the `rank`-th event (0-based) of a video.
    pub fn caption(&self, archetype: usize, rank: usize) -> Vec<usize> {
        let (lo, hi) = self.len_range;
        let len = lo + archetype % (hi - lo + 1);
        let mut tokens = vec![self.ordinal_base + rank, self.subject_base + archetype % NUM_SUBJECTS, self.verb(archetype)];
        for j in 0..len.saturating_sub(3) {
            tokens.push(self.object_base + (archetype * 3 + j) % self.num_objects);
        }
        tokens
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
}

impl Segment {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn width(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn is_valid(&self) -> bool {
        0.0 <= self.start && self.start < self.end && self.end <= 1.0
    }

    pub fn as_pair(&self) -> (f64, f64) {
        (self.start, self.end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventAnnotation {
    /// Annotated segment, possibly jittered.
    pub segment: Segment,
    pub tokens: Vec<usize>,
    pub archetype_id: usize,
    pub true_segment: Segment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoSample {
    pub id: usize,
    pub features: Matrix,
    /// Ordered by true start time.
    pub annotations: Vec<EventAnnotation>,
    pub duration: f64,
}

impl VideoSample {
    pub fn num_frames(&self) -> usize {
        self.features.rows()
    }

    pub fn sentences(&self) -> Vec<Vec<usize>> {
        self.annotations.iter().map(|a| a.tokens.clone()).collect()
    }

    pub fn segments(&self) -> Vec<Segment> {
        self.annotations.iter().map(|a| a.segment).collect()
    }

    pub fn true_segments(&self) -> Vec<Segment> {
        self.annotations.iter().map(|a| a.true_segment).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub config: GenConfig,
    pub train: Vec<VideoSample>,
    pub val: Vec<VideoSample>,
    pub test: Vec<VideoSample>,
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    config: GenConfig,
    split: String,
    videos: Vec<VideoSample>,
}

impl Corpus {
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_config(&self.config).expect("corpus config was validated at generation")
    }

    pub fn all_videos(&self) -> impl Iterator<Item = &VideoSample> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    /// Writes `train.json`, `val.json` and `test.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, videos) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            let file = SplitFile { config: self.config.clone(), split: name.to_string(), videos: videos.clone() };
            let w = std::io::BufWriter::new(fs::File::create(dir.join(format!("{name}.json")))?);
            serde_json::to_writer(w, &file)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut parts = Vec::new();
        for name in ["train", "val", "test"] {
            let r = std::io::BufReader::new(fs::File::open(dir.join(format!("{name}.json")))?);
            let file: SplitFile = serde_json::from_reader(r)?;
            if file.split != name {
                return Err(invalid_config(format!("{name}.json declares split `{}`", file.split)));
            }
            parts.push(file);
        }
        let config = parts[0].config.clone();
        if parts.iter().any(|p| p.config != config) {
            return Err(invalid_config("split files were generated from different configs"));
        }
        let mut it = parts.into_iter();
        Ok(Self {
            config,
            train: it.next().unwrap().videos,
            val: it.next().unwrap().videos,
            test: it.next().unwrap().videos,
        })
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let (kmin, kmax) = self.events_per_video_range;
        let (lmin, lmax) = self.caption_len_range;
        let (wmin, wmax) = self.event_width_range;
        if self.frames_per_video == 0 || self.feature_dim == 0 {
            return Err(invalid_config("frames_per_video and feature_dim must be positive"));
        }
        if kmin == 0 || kmin > kmax {
            return Err(invalid_config(format!("events_per_video_range ({kmin}, {kmax}) must satisfy 1 <= min <= max")));
        }
        if lmin < 3 || lmin > lmax {
            return Err(invalid_config(format!(
                "caption_len_range ({lmin}, {lmax}) must satisfy 3 <= min <= max (ordinal, subject, verb)"
            )));
        }
        if !(wmin > 0.0 && wmin <= wmax && wmax <= 1.0) {
            return Err(invalid_config(format!("event_width_range ({wmin}, {wmax}) must satisfy 0 < min <= max <= 1")));
        }
        if self.num_archetypes == 0 {
            return Err(invalid_config("num_archetypes must be positive"));
        }
        if self.background_noise_std < 0.0 || self.boundary_jitter_std < 0.0 {
            return Err(invalid_config("noise standard deviations must be non-negative"));
        }
        let min_frames = self.min_event_frames();
        if kmax * min_frames > self.frames_per_video {
            return Err(invalid_config(format!(
                "{kmax} events of at least {min_frames} frames cannot fit into {} frames without overlap",
                self.frames_per_video
            )));
        }
        if self.num_videos == 0 {
            return Err(invalid_config("num_videos must be positive"));
        }
        Vocabulary::from_config(self)?;
        Ok(())
    }

    fn min_event_frames(&self) -> usize {
        ((self.event_width_range.0 * self.frames_per_video as f64).round() as usize).max(1)
    }

    fn max_event_frames(&self) -> usize {
        ((self.event_width_range.1 * self.frames_per_video as f64).round() as usize).max(self.min_event_frames())
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One unit-norm pattern per archetype, shared by the whole corpus.
pub fn archetype_patterns(cfg: &GenConfig) -> Matrix {
    let mut rng = stream_rng(cfg.seed, u64::MAX);
    let mut m = Matrix::from_fn(cfg.num_archetypes, cfg.feature_dim, |_, _| StandardNormal.sample(&mut rng));
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let n = row.iter().map(|x: &f64| x * x).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|x| *x /= n);
    }
    m
}

pub fn generate_corpus(cfg: &GenConfig) -> Result<Corpus> {
    cfg.validate()?;
    let vocab = Vocabulary::from_config(cfg)?;
    let patterns = archetype_patterns(cfg);
    let videos: Vec<VideoSample> =
        (0..cfg.num_videos).map(|id| generate_video(cfg, &vocab, &patterns, id)).collect();
    let n_train = (cfg.num_videos * 8) / 10;
    let n_val = cfg.num_videos / 10;
    let mut it = videos.into_iter();
    let train: Vec<_> = it.by_ref().take(n_train).collect();
    let val: Vec<_> = it.by_ref().take(n_val).collect();
    let test: Vec<_> = it.collect();
    Ok(Corpus { config: cfg.clone(), train, val, test })
}

/// Videos with the given ids drawn from the same archetypes as `generate_corpus(cfg)`.
/// Ids at or past `cfg.num_videos` give fresh held-out videos.
pub fn generate_videos(cfg: &GenConfig, ids: std::ops::Range<usize>) -> Result<Vec<VideoSample>> {
    cfg.validate()?;
    let vocab = Vocabulary::from_config(cfg)?;
    let patterns = archetype_patterns(cfg);
    Ok(ids.map(|id| generate_video(cfg, &vocab, &patterns, id)).collect())
}

fn generate_video(cfg: &GenConfig, vocab: &Vocabulary, patterns: &Matrix, id: usize) -> VideoSample {
    let t = cfg.frames_per_video;
    let mut rng = stream_rng(cfg.seed, id as u64);
    let (kmin, kmax) = cfg.events_per_video_range;
    let k = rng.gen_range(kmin..=kmax);

    let (fmin, fmax) = (cfg.min_event_frames(), cfg.max_event_frames());
    let mut widths: Vec<usize> = (0..k).map(|_| rng.gen_range(fmin..=fmax)).collect();
    // Shrink the longest events until everything fits.
    while widths.iter().sum::<usize>() > t {
        let i = (0..k).max_by_key(|&i| (widths[i], std::cmp::Reverse(i))).unwrap();
        widths[i] -= 1;
    }
    let background = t - widths.iter().sum::<usize>();
    let mut cuts: Vec<usize> = (0..k).map(|_| rng.gen_range(0..=background)).collect();
    cuts.sort_unstable();

    let mut features = Matrix::zeros(t, cfg.feature_dim);
    if cfg.background_noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.background_noise_std).expect("std checked non-negative");
        for x in features.data_mut() {
            *x = noise.sample(&mut rng);
        }
    }

    let mut annotations = Vec::with_capacity(k);
    let mut cursor = 0;
    let mut prev_cut = 0;
    for (rank, (&w, &cut)) in widths.iter().zip(&cuts).enumerate() {
        cursor += cut - prev_cut;
        prev_cut = cut;
        let archetype = rng.gen_range(0..cfg.num_archetypes);
        for frame in cursor..cursor + w {
            for (x, p) in features.row_mut(frame).iter_mut().zip(patterns.row(archetype)) {
                *x += p;
            }
        }
        let seg = Segment::new(cursor as f64 / t as f64, (cursor + w) as f64 / t as f64);
        annotations.push(EventAnnotation {
            segment: seg,
            tokens: vocab.caption(archetype, rank),
            archetype_id: archetype,
            true_segment: seg,
        });
        cursor += w;
    }

    let jitter_seed: u64 = rng.gen();
    let annotations = jitter_boundaries(&annotations, cfg.boundary_jitter_std, 1.0 / t as f64, jitter_seed);
    VideoSample { id, features, annotations, duration: 1.0 }
}

/// Perturbs each annotated start and end with independent `N(0, sigma²)` noise, clamps to
/// `[0, 1]`, re-orders, and widens to at least `min_width` around the midpoint.
/// `true_segment` is left untouched.
pub fn jitter_boundaries(annotations: &[EventAnnotation], sigma: f64, min_width: f64, seed: u64) -> Vec<EventAnnotation> {
    if sigma <= 0.0 {
        return annotations.to_vec();
    }
    let noise = Normal::new(0.0, sigma).expect("sigma is positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    annotations
        .iter()
        .map(|a| {
            let s = (a.segment.start + noise.sample(&mut rng)).clamp(0.0, 1.0);
            let e = (a.segment.end + noise.sample(&mut rng)).clamp(0.0, 1.0);
            let (mut s, mut e) = if s <= e { (s, e) } else { (e, s) };
            if e - s < min_width {
                let mid = (0.5 * (s + e)).clamp(0.5 * min_width, 1.0 - 0.5 * min_width);
                s = (mid - 0.5 * min_width).max(0.0);
                e = (mid + 0.5 * min_width).min(1.0);
            }
            EventAnnotation { segment: Segment::new(s, e), ..a.clone() }
        })
        .collect()
}

/// Re-jitters every annotation of `videos` from its true segment.
pub fn rejitter(videos: &[VideoSample], sigma: f64, seed: u64) -> Vec<VideoSample> {
    videos
        .iter()
        .map(|v| {
            let clean: Vec<EventAnnotation> =
                v.annotations.iter().map(|a| EventAnnotation { segment: a.true_segment, ..a.clone() }).collect();
            let mut rng = stream_rng(seed, v.id as u64);
            let video_seed: u64 = rng.gen();
            VideoSample {
                annotations: jitter_boundaries(&clean, sigma, 1.0 / v.num_frames() as f64, video_seed),
                ..v.clone()
            }
        })
        .collect()
}
