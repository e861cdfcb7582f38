//! Training objective and optimisation loop.

use crate::datagen::{Corpus, VideoSample};
use crate::error::{invalid_config, GvlError, Result};
use crate::etg::{count_loss_node, localization_loss_node};
use crate::eval::validation_score;
use crate::matcher::{build_cost, hungarian, Assignment, CostMode, SemanticCost};
use crate::model::Model;
use crate::teg::teg_loss_node;
use gvl_autograd::{clip_global_norm, AdamW, Graph, Matrix, OverlapKind, ParamId, ParamStore, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Videos per optimiser step; gradients are averaged over the batch.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Weight of the grounding loss.
    pub alpha: f64,
    /// Weight of the semantic matching cost.
    pub lambda: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Shuffling seed.
    pub seed: u64,
    pub clip_norm: f64,
    /// Optimiser steps of linear learning-rate warmup.
    pub warmup_steps: usize,
    /// Cosine-decay the learning rate to `min_lr_ratio · learning_rate` by the last step.
    pub cosine_decay: bool,
    pub min_lr_ratio: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub freeze_text_encoder: bool,
    pub cost_mode: CostMode,
    pub boundary_loss: OverlapKind,
    /// Grounding branch (text tower + contrastive loss).
    pub use_teg: bool,
    /// Caption generator and its cross-entropy.
    pub use_etg: bool,
    /// Caption cost uses the summed rather than per-token NLL.
    pub caption_cost_sum: bool,
    /// Skip validation (and so checkpoint selection / early stopping).
    pub skip_validation: bool,
    /// Optional line-delimited JSON log, one record per epoch.
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 1,
            learning_rate: 5e-4,
            weight_decay: 1e-4,
            alpha: 0.05,
            lambda: 1.0,
            tau: 0.1,
            seed: 0,
            clip_norm: 1.0,
            warmup_steps: 400,
            cosine_decay: true,
            min_lr_ratio: 0.05,
            patience: 10,
            freeze_text_encoder: false,
            cost_mode: CostMode::Contrastive,
            boundary_loss: OverlapKind::Giou,
            use_teg: true,
            use_etg: true,
            caption_cost_sum: false,
            skip_validation: false,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid_config("epochs and batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid_config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.tau > 0.0) {
            return Err(invalid_config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.alpha < 0.0 || self.lambda < 0.0 || self.weight_decay < 0.0 {
            return Err(invalid_config("alpha, lambda and weight_decay must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(invalid_config("min_lr_ratio must lie in [0, 1]"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(invalid_config("clip_norm must be positive"));
        }
        Ok(())
    }

    /// Learning rate of optimiser step `step` (0-based) out of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warm = if step < self.warmup_steps { (step + 1) as f64 / self.warmup_steps as f64 } else { 1.0 };
        let decay = if self.cosine_decay && total > 1 {
            let progress = (step as f64 / (total - 1) as f64).min(1.0);
            self.min_lr_ratio + (1.0 - self.min_lr_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        } else {
            1.0
        };
        self.learning_rate * warm * decay
    }

    /// Matching cost actually used. Without the text tower there is no similarity to use.
    pub fn effective_cost_mode(&self) -> CostMode {
        match self.cost_mode {
            CostMode::Contrastive if !self.use_teg => CostMode::None,
            CostMode::Caption if !self.use_etg => CostMode::None,
            m => m,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub teg_sent: f64,
    pub teg_ctx: f64,
    pub ce: f64,
    pub loc: f64,
    pub count: f64,
}

impl LossBreakdown {
    /// `ce + loc + count + α·(teg_sent + teg_ctx)`.
    pub fn combine(ce: f64, loc: f64, count: f64, teg_sent: f64, teg_ctx: f64, alpha: f64) -> Self {
        Self { total: ce + loc + count + alpha * (teg_sent + teg_ctx), teg_sent, teg_ctx, ce, loc, count }
    }

    fn add_scaled(&mut self, other: &Self, w: f64) {
        self.total += w * other.total;
        self.teg_sent += w * other.teg_sent;
        self.teg_ctx += w * other.teg_ctx;
        self.ce += w * other.ce;
        self.loc += w * other.loc;
        self.count += w * other.count;
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.teg_sent, self.teg_ctx, self.ce, self.loc, self.count].iter().all(|x| x.is_finite())
    }
}

/// One forward pass of the full objective over a single video.
pub struct VideoLoss<'a> {
    pub graph: Graph<'a>,
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub assignment: Assignment,
}

/// K×N negative log-likelihood of each sentence under the decoder fed each proposal.
pub fn caption_cost_matrix(model: &Model, embeddings: &Matrix, sentences: &[Vec<usize>], summed: bool) -> Result<Matrix> {
    let (k, n) = (sentences.len(), embeddings.rows());
    let events = Matrix::from_fn(k * n, embeddings.cols(), |r, c| embeddings.get(r % n, c));
    let repeated: Vec<Vec<usize>> = (0..k * n).map(|r| sentences[r / n].clone()).collect();
    let scores = model.captioner.sentence_scores(&model.store, &events, &repeated)?;
    Ok(Matrix::from_fn(k, n, |r, i| {
        let (sum, len) = scores[r * n + i];
        if summed {
            sum
        } else {
            sum / len as f64
        }
    }))
}

/// Builds the objective for `video`. The assignment is recomputed from the current
/// outputs unless `fixed` is given.
pub fn video_loss<'a>(model: &'a Model, video: &VideoSample, cfg: &TrainConfig, fixed: Option<&Assignment>) -> Result<VideoLoss<'a>> {
    let mut g = Graph::with_params(&model.store);
    let sentences = video.sentences();
    let gt = video.segments();
    let ev = model.events.forward(&mut g, video)?;

    let omegas = if cfg.use_teg {
        let para = model.text.forward(&mut g, &sentences)?;
        let proj = model.joint.project_events(&mut g, ev.embeddings)?;
        let ws = model.joint.similarity_projected(&mut g, proj, para.q_sent)?;
        let wc = model.joint.similarity_projected(&mut g, proj, para.q_ctx)?;
        Some((ws, wc))
    } else {
        None
    };

    let assignment = match fixed {
        Some(a) => a.clone(),
        None => {
            let caption_cost;
            let semantic = match (cfg.effective_cost_mode(), omegas) {
                (CostMode::Contrastive, Some((_, wc))) => SemanticCost::Contrastive(g.value(wc)),
                (CostMode::Caption, _) => {
                    caption_cost = caption_cost_matrix(model, g.value(ev.embeddings), &sentences, cfg.caption_cost_sum)?;
                    SemanticCost::Caption(&caption_cost)
                }
                _ => SemanticCost::None,
            };
            let conf = g.value(ev.confidence).data().to_vec();
            let cost = build_cost(semantic, g.value(ev.segments), &conf, &gt, cfg.lambda)?;
            hungarian(&cost.cost)?
        }
    };
    let targets = assignment.targets(sentences.len())?;

    let loc = localization_loss_node(&mut g, ev.segments, ev.confidence, &assignment.pairs, &gt, cfg.boundary_loss)?;
    let count = count_loss_node(&mut g, ev.count_logits, sentences.len());
    let mut total = g.add(loc, count);
    let mut ce_value = 0.0;
    if cfg.use_etg {
        let matched = g.gather_rows(ev.embeddings, &targets);
        let tf = model.captioner.teacher_forcing(&mut g, matched, &sentences)?;
        let ce = g.cross_entropy(tf.logits, &tf.targets);
        ce_value = g.scalar(ce);
        total = g.add(total, ce);
    }
    let (mut ts, mut tc) = (0.0, 0.0);
    if let Some((ws, wc)) = omegas {
        let ls = teg_loss_node(&mut g, ws, &targets, cfg.tau)?;
        let lc = teg_loss_node(&mut g, wc, &targets, cfg.tau)?;
        ts = g.scalar(ls);
        tc = g.scalar(lc);
        let teg = g.add(ls, lc);
        let teg = g.scale(teg, cfg.alpha);
        total = g.add(total, teg);
    }
    let breakdown = LossBreakdown::combine(ce_value, g.scalar(loc), g.scalar(count), ts, tc, cfg.alpha);
    Ok(VideoLoss { graph: g, loss: total, breakdown, assignment })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-video training losses.
    pub losses: LossBreakdown,
    pub val_score: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were kept; 0 means the last one.
    pub best_epoch: usize,
    pub best_val_score: Option<f64>,
    pub wall_seconds: f64,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn final_losses(&self) -> Option<&LossBreakdown> {
        self.epochs.last().map(|r| &r.losses)
    }
}

fn apply_freezing(model: &mut Model, cfg: &TrainConfig) {
    if cfg.freeze_text_encoder {
        model.store.set_trainable_prefix("text.", false);
    }
}

/// Trains on `corpus.train`, selecting parameters by the validation score on `corpus.val`.
pub fn train(corpus: &Corpus, model: &mut Model, cfg: &TrainConfig) -> Result<TrainReport> {
    train_on(&corpus.train, &corpus.val, model, cfg)
}

pub fn train_on(train_set: &[VideoSample], val_set: &[VideoSample], model: &mut Model, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with_hook(train_set, val_set, model, cfg, |_, _| {})
}

/// As [`train_on`], calling `hook` after every epoch with the current parameters.
pub fn train_with_hook(
    train_set: &[VideoSample],
    val_set: &[VideoSample],
    model: &mut Model,
    cfg: &TrainConfig,
    mut hook: impl FnMut(&Model, &EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(crate::error::invalid_input("training set is empty"));
    }
    for v in train_set.iter().chain(val_set) {
        model.check_video(v)?;
    }
    apply_freezing(model, cfg);
    let mut log = match &cfg.log_path {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => None,
    };
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut step = 0;
    let total_steps = cfg.epochs * train_set.len().div_ceil(cfg.batch_size);

    for epoch in 1..=cfg.epochs {
        let epoch_start = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut pending: Vec<(ParamId, Matrix)> = Vec::new();
        let mut in_batch = 0;
        for (pos, &vi) in order.iter().enumerate() {
            let (breakdown, grads) = {
                let mut vl = video_loss(model, &train_set[vi], cfg, None)?;
                if !vl.breakdown.is_finite() {
                    return Err(GvlError::Divergence {
                        epoch,
                        step,
                        detail: format!("video {}: {:?}", train_set[vi].id, vl.breakdown),
                    });
                }
                vl.graph.backward(vl.loss);
                (vl.breakdown, vl.graph.param_grads())
            };
            sums.add_scaled(&breakdown, 1.0);
            accumulate(&mut pending, grads);
            in_batch += 1;
            if in_batch == cfg.batch_size || pos + 1 == order.len() {
                let scale = 1.0 / in_batch as f64;
                for (_, g) in pending.iter_mut() {
                    g.scale_assign(scale);
                }
                let norm = clip_global_norm(&mut pending, cfg.clip_norm);
                if !norm.is_finite() {
                    return Err(GvlError::Divergence { epoch, step, detail: "non-finite gradient norm".into() });
                }
                opt.lr = cfg.lr_at(step, total_steps);
                opt.step(&mut model.store, &pending);
                pending.clear();
                in_batch = 0;
                step += 1;
            }
        }
        let mut losses = LossBreakdown::default();
        losses.add_scaled(&sums, 1.0 / train_set.len() as f64);
        let val_score = if cfg.skip_validation || val_set.is_empty() { None } else { Some(validation_score(model, val_set, cfg)?) };
        let record = EpochRecord { epoch, losses, val_score, seconds: epoch_start.elapsed().as_secs_f64() };
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            writeln!(w)?;
            w.flush()?;
        }
        hook(model, &record);
        records.push(record);
        if let Some(score) = val_score {
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, epoch, model.store.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    stopped_early = epoch < cfg.epochs;
                    break;
                }
            }
        }
    }

    let (best_epoch, best_val_score) = match best {
        Some((score, epoch, store)) => {
            model.store = store;
            (epoch, Some(score))
        }
        None => (0, None),
    };
    Ok(TrainReport { epochs: records, best_epoch, best_val_score, wall_seconds: start.elapsed().as_secs_f64(), stopped_early })
}

fn accumulate(into: &mut Vec<(ParamId, Matrix)>, grads: Vec<(ParamId, Matrix)>) {
    if into.is_empty() {
        *into = grads;
        return;
    }
    for (id, g) in grads {
        match into.iter_mut().find(|(j, _)| *j == id) {
            Some((_, acc)) => acc.add_assign(&g),
            None => into.push((id, g)),
        }
    }
}
