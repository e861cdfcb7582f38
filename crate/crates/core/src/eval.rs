//! Inference for the three tasks and their metrics.

use crate::datagen::{rejitter, Segment, VideoSample, Vocabulary};
use crate::encoders::EventSet;
use crate::error::{invalid_input, Result};
use crate::etg::{predict_count, temporal_iou};
use crate::matcher::{build_cost, hungarian, Assignment, CostMatrix, CostMode, SemanticCost};
use crate::model::Model;
use crate::trainer::{caption_cost_matrix, TrainConfig};
use gvl_autograd::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Proposals whose IoU with the true segment reaches this count as covering it.
pub const COVER_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundingStrategy {
    Argmax,
    Hungarian,
}

impl std::str::FromStr for GroundingStrategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "argmax" => Ok(Self::Argmax),
            "hungarian" => Ok(Self::Hungarian),
            other => Err(format!("unknown grounding strategy `{other}` (argmax|hungarian)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundingResult {
    pub segments: Vec<Segment>,
    /// Chosen proposal per query.
    pub proposals: Vec<usize>,
    /// K×N similarities the choice was made from.
    pub omega: Matrix,
}

/// Per-row argmax of ω; several rows may pick the same proposal.
pub fn select_argmax(omega: &Matrix) -> Vec<usize> {
    (0..omega.rows()).map(|r| omega.argmax_row(r)).collect()
}

/// One-to-one choice maximising Σ ω.
pub fn select_hungarian(omega: &Matrix) -> Result<Vec<usize>> {
    hungarian(&omega.map(|x| -x))?.targets(omega.rows())
}

fn select(omega: &Matrix, strategy: GroundingStrategy) -> Result<Vec<usize>> {
    match strategy {
        GroundingStrategy::Argmax => Ok(select_argmax(omega)),
        GroundingStrategy::Hungarian => select_hungarian(omega),
    }
}

/// Grounds one sentence on its own (context-free flavour).
pub fn ground_single(model: &Model, sentence: &[usize], video: &VideoSample) -> Result<Segment> {
    let (events, omega) = model.omega_sent(video, &[sentence.to_vec()])?;
    Ok(events.segment(omega.argmax_row(0)))
}

/// Grounds each sentence independently of the others, sharing one pass over the video.
pub fn ground_each(model: &Model, sentences: &[Vec<usize>], video: &VideoSample) -> Result<GroundingResult> {
    let (events, omega) = model.omega_sent(video, sentences)?;
    let proposals = select_argmax(&omega);
    Ok(GroundingResult { segments: proposals.iter().map(|&i| events.segment(i)).collect(), proposals, omega })
}

/// Grounds a whole paragraph with the context-aware flavour.
pub fn ground_multi(model: &Model, paragraph: &[Vec<usize>], video: &VideoSample, strategy: GroundingStrategy) -> Result<GroundingResult> {
    let enc = model.encode(video, paragraph)?;
    if strategy == GroundingStrategy::Hungarian && paragraph.len() > enc.events.len() {
        return Err(invalid_input(format!("{} queries exceed {} proposals", paragraph.len(), enc.events.len())));
    }
    let proposals = select(&enc.omega_ctx, strategy)?;
    Ok(GroundingResult { segments: proposals.iter().map(|&i| enc.events.segment(i)).collect(), proposals, omega: enc.omega_ctx })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DvcEvent {
    pub segment: Segment,
    pub tokens: Vec<usize>,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DvcResult {
    /// Sorted by start time.
    pub events: Vec<DvcEvent>,
    pub count: usize,
}

/// Indices of the `m` most confident proposals, most confident first (ties to the lower index).
pub fn top_confident(confidence_logits: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..confidence_logits.len()).collect();
    idx.sort_by(|&a, &b| confidence_logits[b].total_cmp(&confidence_logits[a]).then(a.cmp(&b)));
    idx.truncate(m);
    idx
}

/// Captions the proposals picked by the count head and confidence ranking.
pub fn dense_caption_from(model: &Model, events: &EventSet) -> Result<DvcResult> {
    let m = predict_count(&events.count_logits).clamp(1, events.len());
    let picked = top_confident(&events.confidence_logits, m);
    let emb = events.embeddings.select_rows(&picked);
    let captions = model.captioner.decode_greedy(&model.store, &emb, model.config.max_caption_len)?;
    let mut out: Vec<DvcEvent> = picked
        .iter()
        .zip(captions)
        .map(|(&i, c)| DvcEvent { segment: events.segment(i), tokens: c.tokens, confidence: gvl_autograd::sigmoid(events.confidence_logits[i]) })
        .collect();
    out.sort_by(|a, b| a.segment.start.total_cmp(&b.segment.start));
    Ok(DvcResult { events: out, count: m })
}

pub fn dense_caption(model: &Model, video: &VideoSample) -> Result<DvcResult> {
    dense_caption_from(model, &model.propose(video)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundingMetrics {
    pub iou_05: f64,
    pub iou_07: f64,
    pub miou: f64,
}

/// IoU@0.5, IoU@0.7 (inclusive thresholds) and mean IoU of aligned predictions.
pub fn eval_grounding(preds: &[Segment], gts: &[Segment]) -> Result<GroundingMetrics> {
    if preds.len() != gts.len() {
        return Err(invalid_input(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    if preds.is_empty() {
        return Ok(GroundingMetrics::default());
    }
    let ious: Vec<f64> = preds.iter().zip(gts).map(|(p, g)| temporal_iou(p, g)).collect();
    let n = ious.len() as f64;
    Ok(GroundingMetrics {
        iou_05: ious.iter().filter(|&&x| x >= 0.5).count() as f64 / n,
        iou_07: ious.iter().filter(|&&x| x >= 0.7).count() as f64 / n,
        miou: ious.iter().sum::<f64>() / n,
    })
}

/// One-to-one alignment of ground truths to predictions maximising total IoU.
/// Returns `(gt index, prediction index)` pairs.
pub fn align_by_iou(gts: &[Segment], preds: &[Segment]) -> Result<Vec<(usize, usize)>> {
    if gts.is_empty() || preds.is_empty() {
        return Ok(Vec::new());
    }
    let neg_iou = |r: usize, c: usize, transpose: bool| {
        let (g, p) = if transpose { (c, r) } else { (r, c) };
        -temporal_iou(&gts[g], &preds[p])
    };
    if gts.len() <= preds.len() {
        let a = hungarian(&Matrix::from_fn(gts.len(), preds.len(), |r, c| neg_iou(r, c, false)))?;
        Ok(a.pairs)
    } else {
        let a = hungarian(&Matrix::from_fn(preds.len(), gts.len(), |r, c| neg_iou(r, c, true)))?;
        let mut pairs: Vec<(usize, usize)> = a.pairs.into_iter().map(|(p, g)| (g, p)).collect();
        pairs.sort_unstable();
        Ok(pairs)
    }
}

/// Multiset F1 between two token sequences.
pub fn token_f1(pred: &[usize], gt: &[usize]) -> f64 {
    if pred.is_empty() || gt.is_empty() {
        return 0.0;
    }
    let mut remaining = gt.to_vec();
    let mut common = 0usize;
    for t in pred {
        if let Some(pos) = remaining.iter().position(|x| x == t) {
            remaining.swap_remove(pos);
            common += 1;
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / gt.len() as f64;
    2.0 * p * r / (p + r)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CaptionMetrics {
    /// Over IoU-aligned (ground truth, emitted event) pairs.
    pub token_f1: f64,
    pub verb_accuracy: f64,
    pub exact_match: f64,
    /// Fraction of videos whose predicted count equals the true one.
    pub count_accuracy: f64,
    pub aligned_pairs: usize,
}

/// Caption metrics of dense-captioning outputs against their videos.
pub fn caption_metrics(results: &[DvcResult], videos: &[VideoSample], vocab: &Vocabulary) -> Result<CaptionMetrics> {
    if results.len() != videos.len() {
        return Err(invalid_input("one result per video expected"));
    }
    let (mut f1, mut verb, mut exact, mut pairs, mut counts) = (0.0, 0usize, 0usize, 0usize, 0usize);
    for (res, video) in results.iter().zip(videos) {
        counts += (res.count == video.annotations.len()) as usize;
        let preds: Vec<Segment> = res.events.iter().map(|e| e.segment).collect();
        for (k, j) in align_by_iou(&video.true_segments(), &preds)? {
            let gt = &video.annotations[k];
            let tokens = &res.events[j].tokens;
            f1 += token_f1(tokens, &gt.tokens);
            let predicted_verb = tokens.iter().find_map(|&t| vocab.verb_archetype(t));
            verb += (predicted_verb == Some(gt.archetype_id)) as usize;
            exact += (*tokens == gt.tokens) as usize;
            pairs += 1;
        }
    }
    let denom = pairs.max(1) as f64;
    Ok(CaptionMetrics {
        token_f1: f1 / denom,
        verb_accuracy: verb as f64 / denom,
        exact_match: exact as f64 / denom,
        count_accuracy: counts as f64 / videos.len().max(1) as f64,
        aligned_pairs: pairs,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Every sentence grounded alone.
    pub ssvg: GroundingMetrics,
    pub msvg_argmax: GroundingMetrics,
    pub msvg_hungarian: GroundingMetrics,
    /// Fraction of argmax-grounded sentences that share their proposal with another sentence.
    pub collision_rate: f64,
    pub captioning: CaptionMetrics,
    /// Fraction of training-time assignments covering the true segment.
    pub matching_accuracy: f64,
}

/// Grounding metrics only: SSVG, both MSVG strategies and the collision rate. Scored
/// against the clean segments, not the jittered annotations.
pub fn grounding_report(model: &Model, videos: &[VideoSample]) -> Result<(GroundingMetrics, GroundingMetrics, GroundingMetrics, f64)> {
    let (mut gts, mut single, mut arg, mut hun) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut collisions, mut queries) = (0usize, 0usize);
    for v in videos {
        let sentences = v.sentences();
        gts.extend(v.true_segments());
        single.extend(ground_each(model, &sentences, v)?.segments);
        let enc = model.encode(v, &sentences)?;
        let a = select_argmax(&enc.omega_ctx);
        let h = select_hungarian(&enc.omega_ctx)?;
        for (k, &i) in a.iter().enumerate() {
            collisions += a.iter().enumerate().any(|(j, &o)| j != k && o == i) as usize;
        }
        queries += a.len();
        arg.extend(a.iter().map(|&i| enc.events.segment(i)));
        hun.extend(h.iter().map(|&i| enc.events.segment(i)));
    }
    Ok((
        eval_grounding(&single, &gts)?,
        eval_grounding(&arg, &gts)?,
        eval_grounding(&hun, &gts)?,
        collisions as f64 / queries.max(1) as f64,
    ))
}

pub fn evaluate(model: &Model, videos: &[VideoSample], vocab: &Vocabulary, train_cfg: &TrainConfig) -> Result<MetricReport> {
    let (ssvg, msvg_argmax, msvg_hungarian, collision_rate) = grounding_report(model, videos)?;
    let dvc: Vec<DvcResult> = videos.iter().map(|v| dense_caption(model, v)).collect::<Result<_>>()?;
    let captioning = caption_metrics(&dvc, videos, vocab)?;
    let matching_accuracy = matching_accuracy(model, videos, train_cfg.effective_cost_mode(), train_cfg.lambda, train_cfg.caption_cost_sum)?;
    Ok(MetricReport { ssvg, msvg_argmax, msvg_hungarian, collision_rate, captioning, matching_accuracy })
}

/// Mean IoU of the DVC output aligned to the ground truth; missed events score 0.
pub fn dvc_localization_miou(model: &Model, videos: &[VideoSample]) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for v in videos {
        let res = dense_caption(model, v)?;
        let preds: Vec<Segment> = res.events.iter().map(|e| e.segment).collect();
        let gts = v.true_segments();
        for (k, j) in align_by_iou(&gts, &preds)? {
            total += temporal_iou(&gts[k], &preds[j]);
        }
        n += gts.len();
    }
    Ok(total / n.max(1) as f64)
}

/// Model-selection score: MSVG mIoU (one-to-one) with the grounding branch, DVC
/// localisation mIoU without it.
pub fn validation_score(model: &Model, videos: &[VideoSample], cfg: &TrainConfig) -> Result<f64> {
    if cfg.use_teg {
        Ok(grounding_report(model, videos)?.2.miou)
    } else {
        dvc_localization_miou(model, videos)
    }
}

/// Training-time label assignment of one video under the given matching cost, together
/// with the proposals it was computed on.
pub fn assign_labels(model: &Model, video: &VideoSample, mode: CostMode, lambda: f64, caption_sum: bool) -> Result<(EventSet, CostMatrix, Assignment)> {
    let sentences = video.sentences();
    let enc = model.encode(video, &sentences)?;
    let caption;
    let semantic = match mode {
        CostMode::Contrastive => SemanticCost::Contrastive(&enc.omega_ctx),
        CostMode::Caption => {
            caption = caption_cost_matrix(model, &enc.events.embeddings, &sentences, caption_sum)?;
            SemanticCost::Caption(&caption)
        }
        CostMode::None => SemanticCost::None,
    };
    let cost = build_cost(semantic, &enc.events.segments, &enc.events.confidence_logits, &video.segments(), lambda)?;
    let assignment = hungarian(&cost.cost)?;
    Ok((enc.events, cost, assignment))
}

/// Fraction of sentences whose assigned proposal (under the given matching cost, against
/// the annotated possibly-jittered boundaries) covers the true segment.
pub fn matching_accuracy(model: &Model, videos: &[VideoSample], mode: CostMode, lambda: f64, caption_sum: bool) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for v in videos {
        let (events, _, assignment) = assign_labels(model, v, mode, lambda, caption_sum)?;
        for &(k, i) in &assignment.pairs {
            hits += (temporal_iou(&events.segment(i), &v.annotations[k].true_segment) >= COVER_IOU) as usize;
            total += 1;
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

/// Matching accuracy after re-drawing the annotation jitter at `sigma`.
pub fn jittered_matching_accuracy(model: &Model, videos: &[VideoSample], sigma: f64, seed: u64, mode: CostMode, lambda: f64) -> Result<f64> {
    matching_accuracy(model, &rejitter(videos, sigma, seed), mode, lambda, false)
}

/// Grounding metrics of a data-independent predictor: for each query a segment with
/// uniform centre and width drawn uniformly from `width_range`.
pub fn random_proposal_baseline(videos: &[VideoSample], width_range: (f64, f64), seed: u64) -> Result<GroundingMetrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for v in videos {
        for a in &v.annotations {
            let w = rng.gen_range(width_range.0..=width_range.1);
            let c = rng.gen_range(w / 2.0..=1.0 - w / 2.0);
            preds.push(Segment::new(c - w / 2.0, c + w / 2.0));
            gts.push(a.true_segment);
        }
    }
    eval_grounding(&preds, &gts)
}
