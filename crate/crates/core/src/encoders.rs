//! The two unimodal towers.
//!
//! [`EventEncoder`]: frame projection + sinusoidal time encoding → transformer encoder →
//! N learnable event queries decoded against the frames → segment, confidence and count
//! heads. [`TextEncoder`]: per-sentence word transformer with attention pooling (`q_sent`),
//! then one cross-sentence self-attention layer over `q_sent` concatenated with learned
//! sentence-index embeddings (`q_ctx`).

use crate::datagen::{Segment, VideoSample};
use crate::error::{invalid_config, invalid_input, Result};
use gvl_autograd::nn::{sinusoidal_encoding, DecoderLayer, Embedding, EncoderLayer, LayerNorm, Linear};
use gvl_autograd::{Graph, Matrix, ParamId, ParamStore, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Positions fed to the sinusoidal encoding are normalised time times this scale.
const TIME_SCALE: f64 = 128.0;
/// Encoder features read at fixed offsets around every query's reference window.
const SAMPLE_POINTS: usize = 12;
/// Half-extent of the sampled window in units of the reference width.
const SAMPLE_SPAN: f64 = 1.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of event queries N.
    pub num_queries: usize,
    /// Width D of the input frame features.
    pub feature_dim: usize,
    /// Event embedding width D_e (also the video transformer width).
    pub event_dim: usize,
    /// Sentence embedding width D_t.
    pub text_dim: usize,
    pub joint_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub text_layers: usize,
    pub sentence_pos_dim: usize,
    pub vocab_size: usize,
    /// Support of the event-count head: classes 1..=count_max. Also bounds K.
    pub count_max: usize,
    pub caption_word_dim: usize,
    pub caption_hidden: usize,
    pub max_caption_len: usize,
    /// Initialisation seed for all parameters.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_queries: 30,
            feature_dim: 32,
            event_dim: 64,
            text_dim: 64,
            joint_dim: 64,
            heads: 4,
            ffn_dim: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            text_layers: 2,
            sentence_pos_dim: 16,
            vocab_size: 40,
            count_max: 10,
            caption_word_dim: 32,
            caption_hidden: 64,
            max_caption_len: 8,
            init_seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 || self.count_max == 0 || self.max_caption_len == 0 {
            return Err(invalid_config("num_queries, count_max and max_caption_len must be positive"));
        }
        for (name, dim) in [("event_dim", self.event_dim), ("text_dim", self.text_dim)] {
            if self.heads == 0 || dim % self.heads != 0 {
                return Err(invalid_config(format!("{name} {dim} is not divisible by {} heads", self.heads)));
            }
        }
        Ok(())
    }
}

/// Plain-value view of the N proposals, detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct EventSet {
    pub embeddings: Matrix,
    /// N×2, (start, end) rows.
    pub segments: Matrix,
    pub confidence_logits: Vec<f64>,
    pub count_logits: Vec<f64>,
}

impl EventSet {
    pub fn len(&self) -> usize {
        self.segments.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segment(&self, i: usize) -> Segment {
        Segment::new(self.segments.get(i, 0), self.segments.get(i, 1))
    }
}

/// Graph nodes of one event-encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct EventVars {
    pub embeddings: Var,
    pub center_width: Var,
    pub segments: Var,
    pub confidence: Var,
    pub count_logits: Var,
}

impl EventVars {
    pub fn to_event_set(&self, g: &Graph) -> EventSet {
        EventSet {
            embeddings: g.value(self.embeddings).clone(),
            segments: g.value(self.segments).clone(),
            confidence_logits: g.value(self.confidence).data().to_vec(),
            count_logits: g.value(self.count_logits).data().to_vec(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EventEncoder {
    frame_proj: Linear,
    layers: Vec<EncoderLayer>,
    query_content: ParamId,
    query_pos: ParamId,
    decoder: Vec<DecoderLayer>,
    sample_proj: Linear,
    sample_norm: LayerNorm,
    seg_hidden: Linear,
    seg_out: Linear,
    /// Per-query offset, in logit space, of the (center, width) output.
    reference: ParamId,
    confidence: Linear,
    count: Linear,
    num_queries: usize,
    dim: usize,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Linear-interpolation weights (row `p·N + i`, one column per frame) of the sample
/// points of every query's reference window, computed from the reference logits.
fn sampling_matrix(reference: &Matrix, frames: usize) -> Matrix {
    let n = reference.rows();
    let mut m = Matrix::zeros(SAMPLE_POINTS * n, frames);
    for i in 0..n {
        let c = gvl_autograd::sigmoid(reference.get(i, 0));
        let w = gvl_autograd::sigmoid(reference.get(i, 1));
        for p in 0..SAMPLE_POINTS {
            let offset = -1.0 + 2.0 * (p as f64 + 0.5) / SAMPLE_POINTS as f64;
            let x = ((c + offset * SAMPLE_SPAN * w).clamp(0.0, 1.0) * frames as f64 - 0.5).clamp(0.0, (frames - 1) as f64);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(frames - 1);
            let frac = x - lo as f64;
            let row = m.row_mut(p * n + i);
            row[lo] += 1.0 - frac;
            row[hi] += frac;
        }
    }
    m
}

impl EventEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.event_dim;
        let n = cfg.num_queries;
        let frame_proj = Linear::new(store, "event.frame_proj", cfg.feature_dim, d, rng);
        let layers =
            (0..cfg.encoder_layers).map(|l| EncoderLayer::new(store, &format!("event.enc{l}"), d, cfg.heads, cfg.ffn_dim, rng)).collect();
        // Queries start out spread evenly over the timeline.
        let centers: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let scaled: Vec<f64> = centers.iter().map(|c| c * TIME_SCALE).collect();
        let query_pos = store.add("event.query_pos", sinusoidal_encoding(&scaled, d));
        let query_content = store.add("event.query_content", gvl_autograd::nn::uniform(n, d, 0.1, rng));
        let decoder =
            (0..cfg.decoder_layers).map(|l| DecoderLayer::new(store, &format!("event.dec{l}"), d, cfg.heads, cfg.ffn_dim, rng)).collect();
        let sample_proj = Linear::new(store, "event.sample_proj", SAMPLE_POINTS * d, d, rng);
        let sample_norm = LayerNorm::new(store, "event.sample_norm", d);
        let seg_hidden = Linear::new(store, "event.seg_hidden", d, d, rng);
        let seg_out = Linear::new(store, "event.seg_out", d, 2, rng);
        store.value_mut(seg_out.weight()).scale_assign(0.1);
        let reference = store.add(
            "event.reference",
            Matrix::from_fn(n, 2, |r, c| if c == 0 { logit(centers[r]) } else { logit(0.12) }),
        );
        let confidence = Linear::new(store, "event.confidence", d, 1, rng);
        let count = Linear::new(store, "event.count", d, cfg.count_max, rng);
        Self { frame_proj, layers, query_content, query_pos, decoder, sample_proj, sample_norm, seg_hidden, seg_out, reference, confidence, count, num_queries: n, dim: d }
    }

    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    pub fn forward(&self, g: &mut Graph, video: &VideoSample) -> Result<EventVars> {
        let t = video.num_frames();
        if t == 0 {
            return Err(invalid_input("video has no frames"));
        }
        if video.features.cols() != self.frame_proj.in_dim {
            return Err(invalid_input(format!(
                "video features are {} wide, model expects {}",
                video.features.cols(),
                self.frame_proj.in_dim
            )));
        }
        let positions: Vec<f64> = (0..t).map(|i| (i as f64 + 0.5) / t as f64 * TIME_SCALE).collect();
        let pos = g.constant(sinusoidal_encoding(&positions, self.dim));
        let x = g.constant(video.features.clone());
        let h = self.frame_proj.forward(g, x);
        let mut h = g.add(h, pos);
        for layer in &self.layers {
            h = layer.forward(g, h);
        }
        let mut q = g.param(self.query_content);
        let qpos = g.param(self.query_pos);
        for layer in &self.decoder {
            q = layer.forward(g, q, qpos, h, pos);
        }
        let reference = g.param(self.reference);
        let sampler = sampling_matrix(g.value(reference), t);
        let sampler = g.constant(sampler);
        let sampled = g.matmul(sampler, h);
        let n = self.num_queries;
        let parts: Vec<Var> = (0..SAMPLE_POINTS).map(|p| g.slice_rows(sampled, p * n, n)).collect();
        let local = g.concat_cols(&parts);
        let local = self.sample_proj.forward(g, local);
        let q = g.add(q, local);
        let q = self.sample_norm.forward(g, q);
        let s = self.seg_hidden.forward(g, q);
        let s = g.relu(s);
        let s = self.seg_out.forward(g, s);
        let s = g.add(s, reference);
        let center_width = g.sigmoid(s);
        let segments = g.segments_from_center_width(center_width, 1.0 / t as f64);
        let confidence = self.confidence.forward(g, q);
        let pooled = g.mean_rows(q);
        let count_logits = self.count.forward(g, pooled);
        Ok(EventVars { embeddings: q, center_width, segments, confidence, count_logits })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ParagraphVars {
    pub q_sent: Var,
    pub q_ctx: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParagraphEncoding {
    pub q_sent: Matrix,
    pub q_ctx: Matrix,
}

impl ParagraphEncoding {
    pub fn num_sentences(&self) -> usize {
        self.q_sent.rows()
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    words: Embedding,
    layers: Vec<EncoderLayer>,
    pool_query: ParamId,
    pool_key: Linear,
    sentence_pos: Embedding,
    ctx_in: Linear,
    ctx_layer: EncoderLayer,
    dim: usize,
    vocab: usize,
    max_sentences: usize,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.text_dim;
        Self {
            words: Embedding::new(store, "text.words", cfg.vocab_size, d, rng),
            layers: (0..cfg.text_layers)
                .map(|l| EncoderLayer::new(store, &format!("text.enc{l}"), d, cfg.heads, cfg.ffn_dim, rng))
                .collect(),
            pool_query: store.add("text.pool_query", gvl_autograd::nn::uniform(1, d, 0.1, rng)),
            pool_key: Linear::new(store, "text.pool_key", d, d, rng),
            sentence_pos: Embedding::new(store, "text.sentence_pos", cfg.count_max, cfg.sentence_pos_dim, rng),
            ctx_in: Linear::new(store, "text.ctx_in", d + cfg.sentence_pos_dim, d, rng),
            ctx_layer: EncoderLayer::new(store, "text.ctx", d, cfg.heads, cfg.ffn_dim, rng),
            dim: d,
            vocab: cfg.vocab_size,
            max_sentences: cfg.count_max,
        }
    }

    fn check(&self, sentences: &[Vec<usize>]) -> Result<()> {
        if sentences.is_empty() {
            return Err(invalid_input("paragraph has no sentences"));
        }
        for (k, s) in sentences.iter().enumerate() {
            if s.is_empty() {
                return Err(invalid_input(format!("sentence {k} is empty")));
            }
            if let Some(&t) = s.iter().find(|&&t| t >= self.vocab) {
                return Err(invalid_input(format!("sentence {k} has token {t} outside the vocabulary of {}", self.vocab)));
            }
        }
        Ok(())
    }

    /// Context-free embedding of one sentence (1×D_t).
    fn encode_sentence(&self, g: &mut Graph, tokens: &[usize]) -> Var {
        let positions: Vec<f64> = (0..tokens.len()).map(|i| i as f64).collect();
        let pe = g.constant(sinusoidal_encoding(&positions, self.dim));
        let w = self.words.forward(g, tokens);
        let mut h = g.add(w, pe);
        for layer in &self.layers {
            h = layer.forward(g, h);
        }
        let keys = self.pool_key.forward(g, h);
        let query = g.param(self.pool_query);
        let scores = g.matmul_t(query, keys);
        let scores = g.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let weights = g.softmax_rows(scores);
        g.matmul(weights, h)
    }

    /// Only the context-free flavour, for single-sentence queries.
    pub fn forward_sent(&self, g: &mut Graph, sentences: &[Vec<usize>]) -> Result<Var> {
        self.check(sentences)?;
        let rows: Vec<Var> = sentences.iter().map(|s| self.encode_sentence(g, s)).collect();
        Ok(if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) })
    }

    pub fn forward(&self, g: &mut Graph, sentences: &[Vec<usize>]) -> Result<ParagraphVars> {
        let max = self.max_sentences;
        if sentences.len() > max {
            return Err(invalid_input(format!("paragraph has {} sentences, position table holds {max}", sentences.len())));
        }
        let q_sent = self.forward_sent(g, sentences)?;
        let idx: Vec<usize> = (0..sentences.len()).collect();
        let pos = self.sentence_pos.forward(g, &idx);
        let x = g.concat_cols(&[q_sent, pos]);
        let x = self.ctx_in.forward(g, x);
        let q_ctx = self.ctx_layer.forward(g, x);
        Ok(ParagraphVars { q_sent, q_ctx })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, GenConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig { num_queries: 7, event_dim: 16, text_dim: 16, ffn_dim: 24, heads: 2, ..ModelConfig::default() }
    }

    fn video() -> VideoSample {
        generate_corpus(&GenConfig { num_videos: 10, frames_per_video: 24, ..GenConfig::default() }).unwrap().train[0].clone()
    }

    fn encoders(c: &ModelConfig) -> (ParamStore, EventEncoder, TextEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(c.init_seed);
        let mut store = ParamStore::new();
        let ev = EventEncoder::new(&mut store, c, &mut rng);
        let tx = TextEncoder::new(&mut store, c, &mut rng);
        (store, ev, tx)
    }

    fn propose(store: &ParamStore, ev: &EventEncoder, v: &VideoSample) -> EventSet {
        let mut g = Graph::with_params(store);
        ev.forward(&mut g, v).unwrap().to_event_set(&g)
    }

    fn paragraph(store: &ParamStore, tx: &TextEncoder, s: &[Vec<usize>]) -> ParagraphEncoding {
        let mut g = Graph::with_params(store);
        let p = tx.forward(&mut g, s).unwrap();
        ParagraphEncoding { q_sent: g.value(p.q_sent).clone(), q_ctx: g.value(p.q_ctx).clone() }
    }

    #[test]
    fn event_outputs_have_the_declared_shapes_and_ranges() {
        let c = cfg();
        let (store, ev, _) = encoders(&c);
        let v = video();
        let out = propose(&store, &ev, &v);
        assert_eq!(out.len(), c.num_queries);
        assert_eq!((out.embeddings.rows(), out.embeddings.cols()), (c.num_queries, c.event_dim));
        assert_eq!(out.confidence_logits.len(), c.num_queries);
        assert_eq!(out.count_logits.len(), c.count_max);
        let min_w = 1.0 / v.num_frames() as f64;
        for i in 0..out.len() {
            let s = out.segment(i);
            assert!(s.is_valid() && s.start >= 0.0 && s.end <= 1.0, "{s:?}");
            assert!(s.width() >= min_w - 1e-12);
        }
        assert!(out.embeddings.data().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn initial_proposals_spread_over_the_timeline() {
        let c = cfg();
        let (store, ev, _) = encoders(&c);
        let out = propose(&store, &ev, &video());
        let centers: Vec<f64> = (0..out.len()).map(|i| out.segment(i).center()).collect();
        assert!(centers.windows(2).filter(|w| w[1] > w[0]).count() >= out.len() - 2, "{centers:?}");
    }

    #[test]
    fn same_seed_same_outputs() {
        let c = cfg();
        let (s1, e1, _) = encoders(&c);
        let (s2, e2, _) = encoders(&c);
        let v = video();
        assert_eq!(propose(&s1, &e1, &v), propose(&s2, &e2, &v));
        let (s3, e3, _) = encoders(&ModelConfig { init_seed: 2, ..c });
        assert_ne!(propose(&s1, &e1, &v), propose(&s3, &e3, &v));
    }

    #[test]
    fn time_reversal_changes_the_proposals() {
        let c = cfg();
        let (store, ev, _) = encoders(&c);
        let v = video();
        let t = v.num_frames();
        let reversed = VideoSample { features: Matrix::from_fn(t, v.features.cols(), |r, k| v.features.get(t - 1 - r, k)), ..v.clone() };
        assert_ne!(propose(&store, &ev, &v).embeddings, propose(&store, &ev, &reversed).embeddings);
    }

    #[test]
    fn sampling_weights_are_convex_and_local() {
        let reference = Matrix::from_fn(3, 2, |r, k| if k == 0 { logit([0.1, 0.5, 0.95][r]) } else { logit(0.1) });
        let frames = 40;
        let m = sampling_matrix(&reference, frames);
        assert_eq!((m.rows(), m.cols()), (SAMPLE_POINTS * 3, frames));
        for r in 0..m.rows() {
            let row = m.row(r);
            assert!(row.iter().all(|&x| x >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let i = r % 3;
            let c = [0.1, 0.5, 0.95][i];
            for (f, &x) in row.iter().enumerate() {
                if x > 0.0 {
                    let t = (f as f64 + 0.5) / frames as f64;
                    assert!((t - c).abs() <= SAMPLE_SPAN * 0.1 + 1.5 / frames as f64, "query {i} frame {f}");
                }
            }
        }
    }

    #[test]
    fn q_sent_is_permutation_equivariant_and_q_ctx_is_not() {
        let c = cfg();
        let (store, _, tx) = encoders(&c);
        let s = vec![vec![2, 5, 9], vec![3, 6, 10, 20], vec![4, 7, 11]];
        let perm = [2, 0, 1];
        let permuted: Vec<Vec<usize>> = perm.iter().map(|&i| s[i].clone()).collect();
        let a = paragraph(&store, &tx, &s);
        let b = paragraph(&store, &tx, &permuted);
        for (row, &i) in perm.iter().enumerate() {
            assert_eq!(b.q_sent.row(row), a.q_sent.row(i));
        }
        let moved = perm.iter().enumerate().any(|(row, &i)| {
            b.q_ctx.row(row).iter().zip(a.q_ctx.row(i)).any(|(x, y)| (x - y).abs() > 1e-9)
        });
        assert!(moved, "context flavour should see sentence order");
    }

    #[test]
    fn q_sent_ignores_the_rest_of_the_paragraph() {
        let c = cfg();
        let (store, _, tx) = encoders(&c);
        let alone = paragraph(&store, &tx, &[vec![2, 5, 9]]);
        let crowded = paragraph(&store, &tx, &[vec![2, 5, 9], vec![3, 6, 10]]);
        assert_eq!(alone.q_sent.row(0), crowded.q_sent.row(0));
        assert_ne!(alone.q_ctx.row(0), crowded.q_ctx.row(0));
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let c = cfg();
        let (store, ev, tx) = encoders(&c);
        let mut g = Graph::with_params(&store);
        assert!(tx.forward(&mut g, &[]).is_err());
        assert!(tx.forward(&mut g, &[vec![]]).is_err());
        assert!(tx.forward(&mut g, &[vec![c.vocab_size]]).is_err());
        assert!(tx.forward(&mut g, &vec![vec![2]; c.count_max + 1]).is_err());
        let v = video();
        let narrow = VideoSample { features: Matrix::zeros(v.num_frames(), 3), ..v.clone() };
        assert!(ev.forward(&mut g, &narrow).is_err());
        let empty = VideoSample { features: Matrix::zeros(0, v.features.cols()), ..v };
        assert!(ev.forward(&mut g, &empty).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { heads: 3, ..cfg() }.validate().is_err());
        assert!(ModelConfig { num_queries: 0, ..cfg() }.validate().is_err());
        cfg().validate().unwrap();
    }

    /// Scalar probe `Σ r ⊙ head` with fixed random weights `r`.
    fn probe(g: &mut Graph, head: Var, seed: u64) -> Var {
        let (rows, cols) = g.value(head).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = g.constant(Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0)));
        let m = g.mul(head, r);
        g.sum(m)
    }

    fn head_value(store: &ParamStore, ev: &EventEncoder, tx: &TextEncoder, v: &VideoSample, head: usize) -> (f64, Vec<(ParamId, Matrix)>) {
        let mut g = Graph::with_params(store);
        let out = ev.forward(&mut g, v).unwrap();
        let text = tx.forward(&mut g, &v.sentences()).unwrap();
        let node = [out.center_width, out.confidence, out.count_logits, out.embeddings, text.q_sent, text.q_ctx][head];
        let p = probe(&mut g, node, 11 + head as u64);
        g.backward(p);
        (g.scalar(p), g.param_grads())
    }

    #[test]
    fn every_head_passes_a_finite_difference_check() {
        let c = cfg();
        let (mut store, ev, tx) = encoders(&c);
        let v = video();
        let checks = [
            (0, "event.seg_out.bias"),
            (0, "event.seg_hidden.weight"),
            (0, "event.frame_proj.weight"),
            (1, "event.confidence.weight"),
            (1, "event.sample_proj.bias"),
            (2, "event.count.bias"),
            (2, "event.dec1.ffn.up.weight"),
            (3, "event.query_content"),
            (4, "text.pool_query"),
            (4, "text.words.table"),
            (5, "text.sentence_pos.table"),
            (5, "text.ctx_in.weight"),
        ];
        let h = 1e-6;
        for (head, name) in checks {
            let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
            let (_, grads) = head_value(&store, &ev, &tx, &v, head);
            let analytic = grads.iter().find(|(i, _)| *i == id).map(|(_, g)| g.clone()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            for _ in 0..4 {
                let n = store.value(id).len();
                let at = rng.gen_range(0..n);
                let orig = store.value(id).data()[at];
                store.value_mut(id).data_mut()[at] = orig + h;
                let up = head_value(&store, &ev, &tx, &v, head).0;
                store.value_mut(id).data_mut()[at] = orig - h;
                let down = head_value(&store, &ev, &tx, &v, head).0;
                store.value_mut(id).data_mut()[at] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.data()[at];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "{name}[{at}] head {head}: analytic {a} numeric {numeric}");
            }
        }
    }
}
