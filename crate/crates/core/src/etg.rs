//! Event-to-text generation: the caption decoder and the generation-side losses
//! (caption cross-entropy, boundary overlap + confidence, event count).

use crate::datagen::{Segment, BOS, EOS};
use crate::encoders::EventSet;
use crate::error::{invalid_input, Result};
use crate::matcher::Assignment;
use gvl_autograd::nn::{Embedding, Linear, LstmCell};
use gvl_autograd::{Graph, Matrix, OverlapKind, ParamStore, Var};
use rand::Rng;

pub const GIOU_LOSS_WEIGHT: f64 = 2.0;
pub const CONFIDENCE_LOSS_WEIGHT: f64 = 1.0;

pub fn temporal_iou(a: &Segment, b: &Segment) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.width() + b.width() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Generalised IoU: IoU minus the fraction of the covering hull left empty.
pub fn giou(a: &Segment, b: &Segment) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.width() + b.width() - inter;
    let hull = a.end.max(b.end) - a.start.min(b.start);
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    if hull > 0.0 {
        iou - (hull - union) / hull
    } else {
        iou
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionOutput {
    /// Emitted words, end token excluded.
    pub tokens: Vec<usize>,
    /// One row of vocabulary logits per decoding step.
    pub logits: Matrix,
    pub terminated: bool,
}

/// Teacher-forced decoder outputs: step-major logits (row `s·B + b`) and their targets.
pub struct TeacherForced {
    pub logits: Var,
    pub targets: Vec<Option<usize>>,
    pub batch: usize,
}

/// Single-layer LSTM conditioned on an event embedding, both through its initial state
/// and as context concatenated to every input word.
#[derive(Clone, Debug)]
pub struct CaptionDecoder {
    words: Embedding,
    init_h: Linear,
    init_c: Linear,
    cell: LstmCell,
    out: Linear,
    vocab: usize,
}

impl CaptionDecoder {
    pub fn new(
        store: &mut ParamStore,
        event_dim: usize,
        word_dim: usize,
        hidden: usize,
        vocab: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            words: Embedding::new(store, "caption.words", vocab, word_dim, rng),
            init_h: Linear::new(store, "caption.init_h", event_dim, hidden, rng),
            init_c: Linear::new(store, "caption.init_c", event_dim, hidden, rng),
            cell: LstmCell::new(store, "caption.lstm", word_dim + event_dim, hidden, rng),
            out: Linear::new(store, "caption.out", hidden, vocab, rng),
            vocab,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn initial_state(&self, g: &mut Graph, events: Var) -> (Var, Var) {
        let h = self.init_h.forward(g, events);
        let h = g.tanh(h);
        let c = self.init_c.forward(g, events);
        let c = g.tanh(c);
        (h, c)
    }

    /// Runs every sentence against the event row of the same index. Each target is
    /// followed by the end token; positions past a sentence's end carry no target.
    pub fn teacher_forcing(&self, g: &mut Graph, events: Var, sentences: &[Vec<usize>]) -> Result<TeacherForced> {
        let b = sentences.len();
        if g.value(events).rows() != b {
            return Err(invalid_input(format!("{} event rows for {b} sentences", g.value(events).rows())));
        }
        if let Some(&t) = sentences.iter().flatten().find(|&&t| t >= self.vocab) {
            return Err(invalid_input(format!("token {t} outside the vocabulary of {}", self.vocab)));
        }
        let steps = sentences.iter().map(Vec::len).max().unwrap_or(0) + 1;
        let (mut h, mut c) = self.initial_state(g, events);
        let mut logits = Vec::with_capacity(steps);
        let mut targets = Vec::with_capacity(steps * b);
        for s in 0..steps {
            let ids: Vec<usize> =
                sentences.iter().map(|sent| if s == 0 { BOS } else { sent.get(s - 1).copied().unwrap_or(EOS) }).collect();
            let w = self.words.forward(g, &ids);
            let x = g.concat_cols(&[w, events]);
            (h, c) = self.cell.step(g, x, h, c);
            logits.push(self.out.forward(g, h));
            for sent in sentences {
                targets.push(match s.cmp(&sent.len()) {
                    std::cmp::Ordering::Less => Some(sent[s]),
                    std::cmp::Ordering::Equal => Some(EOS),
                    std::cmp::Ordering::Greater => None,
                });
            }
        }
        let logits = if logits.len() == 1 { logits[0] } else { g.concat_rows(&logits) };
        Ok(TeacherForced { logits, targets, batch: b })
    }

    /// Mean per-token negative log-likelihood of each sentence under its event row.
    pub fn sentence_nll(&self, store: &ParamStore, events: &Matrix, sentences: &[Vec<usize>]) -> Result<Vec<f64>> {
        self.sentence_scores(store, events, sentences).map(|v| v.into_iter().map(|(sum, n)| sum / n as f64).collect())
    }

    /// Summed negative log-likelihood and token count (end token included) per sentence.
    pub fn sentence_scores(&self, store: &ParamStore, events: &Matrix, sentences: &[Vec<usize>]) -> Result<Vec<(f64, usize)>> {
        let mut g = Graph::with_params(store);
        let e = g.constant(events.clone());
        let tf = self.teacher_forcing(&mut g, e, sentences)?;
        let logits = g.value(tf.logits);
        let mut out = vec![(0.0, 0usize); tf.batch];
        for (row, t) in tf.targets.iter().enumerate() {
            if let Some(t) = *t {
                let r = logits.row(row);
                let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + r.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                let slot = &mut out[row % tf.batch];
                slot.0 += lse - r[t];
                slot.1 += 1;
            }
        }
        Ok(out)
    }

    /// Greedy decoding for each row of `events`. The first word may not be the end token,
    /// so every caption has between 1 and `max_len` words.
    pub fn decode_greedy(&self, store: &ParamStore, events: &Matrix, max_len: usize) -> Result<Vec<CaptionOutput>> {
        if max_len == 0 {
            return Err(invalid_input("max_len must be at least 1"));
        }
        let b = events.rows();
        let mut g = Graph::with_params(store);
        let e = g.constant(events.clone());
        let (mut h, mut c) = self.initial_state(&mut g, e);
        let mut outputs: Vec<CaptionOutput> =
            (0..b).map(|_| CaptionOutput { tokens: Vec::new(), logits: Matrix::zeros(0, self.vocab), terminated: false }).collect();
        let mut step_rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); b];
        let mut prev = vec![BOS; b];
        let mut done = vec![false; b];
        for step in 0..max_len {
            let w = self.words.forward(&mut g, &prev);
            let x = g.concat_cols(&[w, e]);
            (h, c) = self.cell.step(&mut g, x, h, c);
            let logits = self.out.forward(&mut g, h);
            let lv = g.value(logits).clone();
            for r in 0..b {
                if done[r] {
                    continue;
                }
                let row = lv.row(r);
                step_rows[r].push(row.to_vec());
                let mut best = None;
                for (tok, &v) in row.iter().enumerate() {
                    if tok == BOS || (tok == EOS && step == 0) {
                        continue;
                    }
                    if best.is_none_or(|(_, bv)| v > bv) {
                        best = Some((tok, v));
                    }
                }
                let tok = best.map(|(t, _)| t).unwrap_or(EOS);
                if tok == EOS {
                    done[r] = true;
                    outputs[r].terminated = true;
                } else {
                    outputs[r].tokens.push(tok);
                    prev[r] = tok;
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        for (o, rows) in outputs.iter_mut().zip(step_rows) {
            o.logits = Matrix::from_rows(&rows);
        }
        Ok(outputs)
    }
}

/// Mean token cross-entropy of L×V step logits against L targets.
pub fn caption_ce_loss(step_logits: &Matrix, target_tokens: &[usize]) -> Result<f64> {
    if step_logits.rows() != target_tokens.len() {
        return Err(invalid_input(format!("{} logit rows for {} targets", step_logits.rows(), target_tokens.len())));
    }
    if let Some(&t) = target_tokens.iter().find(|&&t| t >= step_logits.cols()) {
        return Err(invalid_input(format!("target {t} outside {} classes", step_logits.cols())));
    }
    let mut g = Graph::new();
    let l = g.constant(step_logits.clone());
    let t: Vec<Option<usize>> = target_tokens.iter().map(|&t| Some(t)).collect();
    let loss = g.cross_entropy(l, &t);
    Ok(g.scalar(loss))
}

/// `2·mean_matched(1 − gIoU) + 1·BCE(confidence, matched?)` as a graph node.
pub fn localization_loss_node(
    g: &mut Graph,
    segments: Var,
    confidence: Var,
    pairs: &[(usize, usize)],
    gt: &[Segment],
    kind: OverlapKind,
) -> Result<Var> {
    let n = g.value(segments).rows();
    if g.value(confidence).len() != n {
        return Err(invalid_input("one confidence logit per proposal expected"));
    }
    let mut labels = vec![0.0; n];
    for &(k, i) in pairs {
        if k >= gt.len() || i >= n {
            return Err(invalid_input(format!("pair ({k}, {i}) out of range for {} targets, {n} proposals", gt.len())));
        }
        if labels[i] != 0.0 {
            return Err(invalid_input(format!("proposal {i} matched twice")));
        }
        labels[i] = 1.0;
    }
    let bce = g.bce_with_logits(confidence, &labels);
    let conf_term = g.scale(bce, CONFIDENCE_LOSS_WEIGHT);
    if pairs.is_empty() {
        return Ok(conf_term);
    }
    let idx: Vec<usize> = pairs.iter().map(|&(_, i)| i).collect();
    let targets: Vec<(f64, f64)> = pairs.iter().map(|&(k, _)| gt[k].as_pair()).collect();
    let matched = g.gather_rows(segments, &idx);
    let overlap = g.segment_overlap_loss(matched, &targets, kind);
    let overlap = g.mean(overlap);
    let overlap = g.scale(overlap, GIOU_LOSS_WEIGHT);
    Ok(g.add(overlap, conf_term))
}

pub fn localization_loss(event_set: &EventSet, assignment: &Assignment, gt: &[Segment]) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(event_set.segments.clone());
    let c = g.constant(Matrix::from_vec(event_set.len(), 1, event_set.confidence_logits.clone()));
    let loss = localization_loss_node(&mut g, s, c, &assignment.pairs, gt, OverlapKind::Giou)?;
    Ok(g.scalar(loss))
}

/// Loss and its gradient with respect to the N×2 (center, width) head output, which is
/// turned into segments with the same clamping as the encoder (`min_width` floor).
pub fn localization_loss_with_grad(
    center_width: &Matrix,
    confidence_logits: &[f64],
    pairs: &[(usize, usize)],
    gt: &[Segment],
    min_width: f64,
) -> Result<(f64, Matrix)> {
    if center_width.cols() != 2 {
        return Err(invalid_input("center/width matrix must have two columns"));
    }
    let mut g = Graph::new();
    let cw = g.input(center_width.clone());
    let segments = g.segments_from_center_width(cw, min_width);
    let c = g.constant(Matrix::from_vec(confidence_logits.len(), 1, confidence_logits.to_vec()));
    let loss = localization_loss_node(&mut g, segments, c, pairs, gt, OverlapKind::Giou)?;
    g.backward(loss);
    let grad = g.grad(cw).cloned().unwrap_or_else(|| Matrix::zeros(center_width.rows(), 2));
    Ok((g.scalar(loss), grad))
}

/// Class index of a ground-truth count, clamped into `1..=count_max`.
pub fn count_class(k_true: usize, count_max: usize) -> usize {
    k_true.clamp(1, count_max) - 1
}

pub fn count_loss_node(g: &mut Graph, count_logits: Var, k_true: usize) -> Var {
    let classes = g.value(count_logits).cols();
    g.cross_entropy(count_logits, &[Some(count_class(k_true, classes))])
}

pub fn count_loss(count_logits: &[f64], k_true: usize) -> f64 {
    let mut g = Graph::new();
    let l = g.constant(Matrix::from_vec(1, count_logits.len(), count_logits.to_vec()));
    let loss = count_loss_node(&mut g, l, k_true);
    g.scalar(loss)
}

/// Most likely event count (classes are 1-based).
pub fn predict_count(count_logits: &[f64]) -> usize {
    Matrix::from_vec(1, count_logits.len(), count_logits.to_vec()).argmax_row(0) + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seg(a: f64, b: f64) -> Segment {
        Segment::new(a, b)
    }

    #[test]
    fn iou_arithmetic() {
        assert!((temporal_iou(&seg(0.0, 2.0 / 3.0), &seg(1.0 / 3.0, 1.0)) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(temporal_iou(&seg(0.2, 0.5), &seg(0.2, 0.5)), 1.0);
        assert_eq!(temporal_iou(&seg(0.0, 0.2), &seg(0.5, 0.9)), 0.0);
    }

    #[test]
    fn giou_arithmetic() {
        assert_eq!(giou(&seg(0.3, 0.6), &seg(0.3, 0.6)), 1.0);
        assert!((giou(&seg(0.0, 0.1), &seg(0.2, 0.3)) + 1.0 / 3.0).abs() < 1e-12);
    }

    fn segment_pair() -> impl Strategy<Value = (Segment, Segment)> {
        let one = (0.0f64..1.0, 0.0f64..1.0)
            .prop_filter("non-degenerate", |(a, b)| (a - b).abs() > 1e-6)
            .prop_map(|(a, b)| seg(a.min(b), a.max(b)));
        (one.clone(), one)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn giou_never_exceeds_iou((a, b) in segment_pair()) {
            let (i, gi) = (temporal_iou(&a, &b), giou(&a, &b));
            prop_assert!(gi <= i + 1e-12);
            prop_assert!(gi > -1.0 && gi <= 1.0);
            let hull = a.end.max(b.end) - a.start.min(b.start);
            let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
            let union = a.width() + b.width() - inter;
            if (hull - union).abs() < 1e-12 {
                prop_assert!((gi - i).abs() < 1e-9);
            } else {
                prop_assert!(gi < i);
            }
        }
    }

    proptest! {
        #[test]
        fn overlaps_are_symmetric_and_scale_free((a, b) in segment_pair(), scale in 0.1f64..5.0, shift in -3.0f64..3.0) {
            prop_assert!((temporal_iou(&a, &b) - temporal_iou(&b, &a)).abs() < 1e-12);
            prop_assert!((giou(&a, &b) - giou(&b, &a)).abs() < 1e-12);
            let t = |s: &Segment| seg(s.start * scale + shift, s.end * scale + shift);
            prop_assert!((temporal_iou(&t(&a), &t(&b)) - temporal_iou(&a, &b)).abs() < 1e-9);
            prop_assert!((giou(&t(&a), &t(&b)) - giou(&a, &b)).abs() < 1e-9);
        }
    }

    #[test]
    fn caption_ce_closed_forms() {
        let one_hot = Matrix::from_fn(3, 6, |r, c| if c == r + 1 { 60.0 } else { 0.0 });
        assert!(caption_ce_loss(&one_hot, &[1, 2, 3]).unwrap() < 1e-12);
        let uniform = Matrix::zeros(4, 50);
        assert!((caption_ce_loss(&uniform, &[0, 7, 9, 49]).unwrap() - 50f64.ln()).abs() < 1e-12);
        assert!(caption_ce_loss(&uniform, &[0, 1]).is_err());
        assert!(caption_ce_loss(&uniform, &[0, 1, 2, 50]).is_err());
    }

    #[test]
    fn count_head_helpers() {
        let mut peaked = vec![0.0; 10];
        peaked[2] = 50.0;
        assert_eq!(predict_count(&peaked), 3);
        assert!(count_loss(&peaked, 3) < 1e-12);
        assert!((count_loss(&vec![0.0; 10], 7) - 10f64.ln()).abs() < 1e-12);
        // Out-of-range counts are clamped into the head's support.
        assert_eq!(count_loss(&vec![0.0; 10], 0), count_loss(&vec![0.0; 10], 1));
        assert_eq!(count_class(25, 10), 9);
    }

    #[test]
    fn localization_loss_closed_forms() {
        let segs = Matrix::from_rows(&[vec![0.1, 0.3], vec![0.5, 0.8], vec![0.0, 1.0]]);
        let gt = [seg(0.1, 0.3), seg(0.5, 0.8)];
        let assignment = Assignment { pairs: vec![(0, 0), (1, 1)], total_cost: 0.0 };
        let half = EventSet {
            embeddings: Matrix::zeros(3, 1),
            segments: segs.clone(),
            confidence_logits: vec![0.0; 3],
            count_logits: vec![0.0],
        };
        assert!((localization_loss(&half, &assignment, &gt).unwrap() - 2f64.ln()).abs() < 1e-12);
        let saturated = EventSet { confidence_logits: vec![40.0, 40.0, -40.0], ..half };
        assert!(localization_loss(&saturated, &assignment, &gt).unwrap() < 1e-12);
    }

    fn decoder(vocab: usize) -> (ParamStore, CaptionDecoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let d = CaptionDecoder::new(&mut store, 6, 4, 5, vocab, &mut rng);
        (store, d)
    }

    #[test]
    fn greedy_decoding_is_bounded_and_deterministic() {
        let (store, dec) = decoder(9);
        let events = Matrix::from_fn(4, 6, |r, c| ((r * 7 + c) as f64 * 0.37).sin());
        for max_len in [1, 3, 8] {
            let a = dec.decode_greedy(&store, &events, max_len).unwrap();
            let b = dec.decode_greedy(&store, &events, max_len).unwrap();
            assert_eq!(a, b);
            for out in &a {
                assert!((1..=max_len).contains(&out.tokens.len()));
                assert!(out.tokens.iter().all(|&t| t != BOS && t != EOS));
                assert_eq!(out.logits.rows(), out.tokens.len() + out.terminated as usize);
                if out.terminated {
                    assert!(out.tokens.len() < max_len || out.logits.rows() == max_len);
                }
            }
        }
        assert!(dec.decode_greedy(&store, &events, 0).is_err());
    }

    #[test]
    fn teacher_forcing_lines_up_targets() {
        let (store, dec) = decoder(9);
        let mut g = Graph::with_params(&store);
        let e = g.constant(Matrix::zeros(2, 6));
        let tf = dec.teacher_forcing(&mut g, e, &[vec![3, 4], vec![5]]).unwrap();
        assert_eq!(g.value(tf.logits).shape(), (6, 9));
        assert_eq!(tf.targets, vec![Some(3), Some(5), Some(4), Some(EOS), Some(EOS), None]);
        let nll = dec.sentence_nll(&store, &Matrix::zeros(2, 6), &[vec![3, 4], vec![5]]).unwrap();
        assert!(nll.iter().all(|x| x.is_finite() && *x > 0.0));
    }
}
