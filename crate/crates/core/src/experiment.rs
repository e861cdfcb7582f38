//! Ablation and sweep driver: trains the requested variants, evaluates them on the
//! held-out split and writes `results.csv`, `report.json` and SVG plots.

use crate::config::RunConfig;
use crate::datagen::{generate_corpus, generate_videos, Corpus, VideoSample, Vocabulary};
use crate::encoders::ModelConfig;
use crate::error::{GvlError, Result};
use crate::eval::{caption_metrics, dense_caption, evaluate, grounding_report, jittered_matching_accuracy, random_proposal_baseline, GroundingMetrics};
use crate::eval::{CaptionMetrics, DvcResult};
use crate::matcher::CostMode;
use crate::model::Model;
use crate::plot::{line_plot, Series};
use crate::trainer::{train_on, TrainConfig, TrainReport};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    NoTeg,
    NoEtg,
    LambdaSweep,
    CostAblation,
    JitterStudy,
}

impl Mode {
    pub const ALL: [Mode; 6] = [Mode::Full, Mode::NoTeg, Mode::NoEtg, Mode::LambdaSweep, Mode::CostAblation, Mode::JitterStudy];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoTeg => "no_teg",
            Mode::NoEtg => "no_etg",
            Mode::LambdaSweep => "lambda_sweep",
            Mode::CostAblation => "cost_ablation",
            Mode::JitterStudy => "jitter_study",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = GvlError;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| GvlError::UnknownMode(s.to_string()))
    }
}

/// Which pretext branches a training run keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoTeg,
    NoEtg,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTeg => "no_teg",
            Variant::NoEtg => "no_etg",
        }
    }

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        match self {
            Variant::Full => cfg.clone(),
            Variant::NoTeg => TrainConfig { use_teg: false, ..cfg.clone() },
            Variant::NoEtg => TrainConfig { use_etg: false, ..cfg.clone() },
        }
    }
}

/// One line of `results.csv`. Metric blocks a run cannot produce are left empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub mode: String,
    pub variant: String,
    /// `direct` evaluates the trained heads, `probe` fresh heads fitted on the frozen video tower.
    pub readout: String,
    pub seed: u64,
    pub lambda: Option<f64>,
    pub sigma: Option<f64>,
    pub cost_mode: Option<CostMode>,
    pub ssvg_iou05: Option<f64>,
    pub ssvg_iou07: Option<f64>,
    pub ssvg_miou: Option<f64>,
    pub msvg_argmax_miou: Option<f64>,
    pub msvg_iou05: Option<f64>,
    pub msvg_iou07: Option<f64>,
    pub msvg_miou: Option<f64>,
    pub collision_rate: Option<f64>,
    pub caption_token_f1: Option<f64>,
    pub caption_verb_accuracy: Option<f64>,
    pub caption_exact_match: Option<f64>,
    pub count_accuracy: Option<f64>,
    pub matching_accuracy: Option<f64>,
    pub train_seconds: Option<f64>,
}

impl ResultRow {
    fn new(mode: Mode, variant: &str, readout: &str, seed: u64) -> Self {
        Self { mode: mode.name().into(), variant: variant.into(), readout: readout.into(), seed, ..Self::default() }
    }

    fn set_grounding(&mut self, g: &(GroundingMetrics, GroundingMetrics, GroundingMetrics, f64)) {
        let (s, a, h, c) = g;
        self.ssvg_iou05 = Some(s.iou_05);
        self.ssvg_iou07 = Some(s.iou_07);
        self.ssvg_miou = Some(s.miou);
        self.msvg_argmax_miou = Some(a.miou);
        self.msvg_iou05 = Some(h.iou_05);
        self.msvg_iou07 = Some(h.iou_07);
        self.msvg_miou = Some(h.miou);
        self.collision_rate = Some(*c);
    }

    fn set_captioning(&mut self, c: &CaptionMetrics) {
        self.caption_token_f1 = Some(c.token_f1);
        self.caption_verb_accuracy = Some(c.verb_accuracy);
        self.caption_exact_match = Some(c.exact_match);
        self.count_accuracy = Some(c.count_accuracy);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub mode: Mode,
    pub config: RunConfig,
    pub rows: Vec<ResultRow>,
    /// Random-proposal grounding baseline on the same evaluation videos.
    pub random_baseline: GroundingMetrics,
    pub wall_seconds: f64,
    pub files: Vec<PathBuf>,
}

impl ExperimentReport {
    /// Mean of `field` over the rows accepted by `keep`; `None` if none has a value.
    pub fn mean(&self, keep: impl Fn(&ResultRow) -> bool, field: impl Fn(&ResultRow) -> Option<f64>) -> Option<f64> {
        mean_of(self.rows.iter().filter(|r| keep(r)).filter_map(field))
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Corpus splits used by an experiment; `test` includes any extra evaluation videos.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<VideoSample>,
    pub val: Vec<VideoSample>,
    pub test: Vec<VideoSample>,
    pub vocab: Vocabulary,
}

impl Splits {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let corpus = generate_corpus(&cfg.gen)?;
        let n = cfg.gen.num_videos;
        let extra = generate_videos(&cfg.gen, n..n + cfg.experiment.extra_eval_videos)?;
        Ok(Self::from_corpus(corpus, extra))
    }

    pub fn from_corpus(corpus: Corpus, extra_test: Vec<VideoSample>) -> Self {
        let vocab = corpus.vocabulary();
        let mut test = corpus.test;
        test.extend(extra_test);
        Self { train: corpus.train, val: corpus.val, test, vocab }
    }
}

/// Model and training configs of the `s`-th seeded run.
pub fn seeded(cfg: &RunConfig, s: u64) -> (ModelConfig, TrainConfig) {
    let model = ModelConfig { init_seed: cfg.model.init_seed.wrapping_add(s), ..cfg.model.clone() };
    let train = TrainConfig { seed: cfg.train.seed.wrapping_add(s), log_path: None, ..cfg.train.clone() };
    (model, train)
}

pub fn train_model(splits: &Splits, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    let mut model = Model::new(model_cfg)?;
    let report = train_on(&splits.train, &splits.val, &mut model, train_cfg)?;
    Ok((model, report))
}

/// Fits fresh text, joint and caption heads on top of `model`'s frozen video tower with
/// both pretext losses, so every variant is read out the same way. The assignment uses
/// the localisation cost only, which depends on the frozen tower alone.
pub fn probe(model: &Model, train_set: &[VideoSample], base: &TrainConfig, epochs: usize) -> Result<Model> {
    let mut probe = model.reinit_with_frozen_events(model.config.init_seed ^ 0x9e37_79b9)?;
    let steps = epochs * train_set.len().div_ceil(base.batch_size.max(1));
    let cfg = TrainConfig {
        epochs,
        use_teg: true,
        use_etg: true,
        cost_mode: CostMode::None,
        freeze_text_encoder: false,
        skip_validation: true,
        warmup_steps: base.warmup_steps.min(steps / 4),
        log_path: None,
        ..base.clone()
    };
    train_on(train_set, &[], &mut probe, &cfg)?;
    Ok(probe)
}

fn captions(model: &Model, videos: &[VideoSample], vocab: &Vocabulary) -> Result<CaptionMetrics> {
    let dvc: Vec<DvcResult> = videos.iter().map(|v| dense_caption(model, v)).collect::<Result<_>>()?;
    caption_metrics(&dvc, videos, vocab)
}

/// Direct rows of one trained model; blocks the variant never trained stay empty.
pub fn direct_row(mode: Mode, variant: Variant, seed: u64, model: &Model, cfg: &TrainConfig, splits: &Splits) -> Result<ResultRow> {
    let mut row = ResultRow::new(mode, variant.name(), "direct", seed);
    row.lambda = Some(cfg.lambda);
    row.cost_mode = Some(cfg.effective_cost_mode());
    if cfg.use_teg {
        let m = evaluate(model, &splits.test, &splits.vocab, cfg)?;
        row.set_grounding(&(m.ssvg, m.msvg_argmax, m.msvg_hungarian, m.collision_rate));
        row.matching_accuracy = Some(m.matching_accuracy);
        if cfg.use_etg {
            row.set_captioning(&m.captioning);
        }
    } else if cfg.use_etg {
        row.set_captioning(&captions(model, &splits.test, &splits.vocab)?);
    }
    Ok(row)
}

pub fn probe_row(mode: Mode, variant: Variant, seed: u64, model: &Model, cfg: &TrainConfig, splits: &Splits, epochs: usize) -> Result<ResultRow> {
    let probe = probe(model, &splits.train, cfg, epochs)?;
    let mut row = ResultRow::new(mode, variant.name(), "probe", seed);
    row.set_grounding(&grounding_report(&probe, &splits.test)?);
    row.set_captioning(&captions(&probe, &splits.test, &splits.vocab)?);
    Ok(row)
}

/// Trains `variant` once per seed and emits a direct and a probe row for each.
pub fn branch_rows(cfg: &RunConfig, splits: &Splits, mode: Mode, variant: Variant) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for s in 0..cfg.experiment.seeds as u64 {
        let (mc, tc) = seeded(cfg, s);
        let tc = variant.apply(&tc);
        let (model, report) = train_model(splits, &mc, &tc)?;
        let mut direct = direct_row(mode, variant, tc.seed, &model, &tc, splits)?;
        direct.train_seconds = Some(report.wall_seconds);
        rows.push(direct);
        rows.push(probe_row(mode, variant, tc.seed, &model, &tc, splits, cfg.experiment.probe_epochs)?);
    }
    Ok(rows)
}

pub fn lambda_rows(cfg: &RunConfig, splits: &Splits, lambdas: &[f64]) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for &lambda in lambdas {
        for s in 0..cfg.experiment.seeds as u64 {
            let (mc, tc) = seeded(cfg, s);
            let tc = TrainConfig { lambda, ..tc };
            let (model, report) = train_model(splits, &mc, &tc)?;
            let mut row = direct_row(Mode::LambdaSweep, Variant::Full, tc.seed, &model, &tc, splits)?;
            row.train_seconds = Some(report.wall_seconds);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub const COST_MODES: [CostMode; 3] = [CostMode::None, CostMode::Caption, CostMode::Contrastive];

pub fn cost_rows(cfg: &RunConfig, splits: &Splits) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for mode in COST_MODES {
        for s in 0..cfg.experiment.seeds as u64 {
            let (mc, tc) = seeded(cfg, s);
            let tc = TrainConfig { cost_mode: mode, ..tc };
            let (model, report) = train_model(splits, &mc, &tc)?;
            let mut row = direct_row(Mode::CostAblation, Variant::Full, tc.seed, &model, &tc, splits)?;
            row.train_seconds = Some(report.wall_seconds);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Label-assignment accuracy of one trained model on `videos` re-jittered at each sigma,
/// per matching cost. The localisation-only cost is reported with λ = 0.
pub fn jitter_rows(model: &Model, videos: &[VideoSample], sigmas: &[f64], lambda: f64, seed: u64) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for &sigma in sigmas {
        for mode in COST_MODES {
            let l = if mode == CostMode::None { 0.0 } else { lambda };
            let mut row = ResultRow::new(Mode::JitterStudy, "full", "direct", seed);
            row.sigma = Some(sigma);
            row.lambda = Some(l);
            row.cost_mode = Some(mode);
            row.matching_accuracy = Some(jittered_matching_accuracy(model, videos, sigma, seed, mode, l)?);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn run_experiment(cfg: &RunConfig, mode: Mode, out: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    let start = Instant::now();
    let splits = Splits::generate(cfg)?;
    let rows = match mode {
        Mode::Full => branch_rows(cfg, &splits, mode, Variant::Full)?,
        Mode::NoTeg => branch_rows(cfg, &splits, mode, Variant::NoTeg)?,
        Mode::NoEtg => branch_rows(cfg, &splits, mode, Variant::NoEtg)?,
        Mode::LambdaSweep => lambda_rows(cfg, &splits, &cfg.experiment.lambdas)?,
        Mode::CostAblation => cost_rows(cfg, &splits)?,
        Mode::JitterStudy => {
            let mut rows = Vec::new();
            for s in 0..cfg.experiment.seeds as u64 {
                let (mc, tc) = seeded(cfg, s);
                let (model, _) = train_model(&splits, &mc, &tc)?;
                rows.extend(jitter_rows(&model, &splits.test, &cfg.experiment.jitter_sigmas, tc.lambda, tc.seed)?);
            }
            rows
        }
    };
    let random_baseline = random_proposal_baseline(&splits.test, cfg.gen.event_width_range, cfg.gen.seed)?;
    let mut report = ExperimentReport { mode, config: cfg.clone(), rows, random_baseline, wall_seconds: 0.0, files: Vec::new() };
    report.wall_seconds = start.elapsed().as_secs_f64();
    write_outputs(&mut report, out)?;
    Ok(report)
}

/// Writes the CSV table, the JSON report and the mode's plots into `out`.
pub fn write_outputs(report: &mut ExperimentReport, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let csv_path = out.join("results.csv");
    write_csv(&report.rows, &csv_path)?;
    report.files = vec![csv_path];
    match report.mode {
        Mode::LambdaSweep => {
            let path = out.join("lambda_sweep.svg");
            let series = [
                ("MSVG mIoU", (|r: &ResultRow| r.msvg_miou) as fn(&ResultRow) -> Option<f64>),
                ("SSVG mIoU", |r: &ResultRow| r.ssvg_miou),
                ("caption verb accuracy", |r: &ResultRow| r.caption_verb_accuracy),
            ]
            .map(|(label, f)| Series { label: label.into(), points: mean_curve(&report.rows, |r| r.lambda, f) });
            line_plot(&path, "Semantic cost ratio", "lambda", "score", &series)?;
            report.files.push(path);
        }
        Mode::JitterStudy => {
            let path = out.join("jitter_study.svg");
            let series: Vec<Series> = COST_MODES
                .iter()
                .map(|&m| Series {
                    label: format!("{m:?} cost").to_lowercase(),
                    points: mean_curve(
                        &report.rows.iter().filter(|r| r.cost_mode == Some(m)).cloned().collect::<Vec<_>>(),
                        |r| r.sigma,
                        |r| r.matching_accuracy,
                    ),
                })
                .collect();
            line_plot(&path, "Label assignment under boundary jitter", "sigma", "matching accuracy", &series)?;
            report.files.push(path);
        }
        _ => {}
    }
    let json_path = out.join("report.json");
    report.files.push(json_path.clone());
    std::fs::write(&json_path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

pub fn write_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>> {
    csv::Reader::from_path(path).map_err(csv_err)?.deserialize().map(|r| r.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> GvlError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => GvlError::Io(io),
        other => GvlError::InvalidInput(format!("csv: {other:?}")),
    }
}

/// Per distinct `x`, the mean of `y` over rows with both present, in ascending `x`.
fn mean_curve(rows: &[ResultRow], x: impl Fn(&ResultRow) -> Option<f64>, y: impl Fn(&ResultRow) -> Option<f64>) -> Vec<(f64, f64)> {
    let mut xs: Vec<f64> = rows.iter().filter_map(&x).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    xs.into_iter()
        .filter_map(|xv| mean_of(rows.iter().filter(|r| x(r) == Some(xv)).filter_map(&y)).map(|m| (xv, m)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::GenConfig;
    use crate::experiment::Mode;

    fn tiny() -> RunConfig {
        RunConfig {
            gen: GenConfig { num_videos: 20, frames_per_video: 16, ..GenConfig::default() },
            model: ModelConfig {
                num_queries: 6,
                event_dim: 16,
                text_dim: 16,
                joint_dim: 8,
                ffn_dim: 16,
                heads: 2,
                encoder_layers: 1,
                decoder_layers: 1,
                text_layers: 1,
                caption_hidden: 16,
                caption_word_dim: 8,
                ..ModelConfig::default()
            },
            train: TrainConfig { epochs: 1, warmup_steps: 4, ..TrainConfig::default() },
            experiment: crate::config::ExperimentConfig {
                seeds: 1,
                lambdas: vec![0.0, 1.0],
                jitter_sigmas: vec![0.0, 0.1],
                extra_eval_videos: 4,
                probe_epochs: 1,
            },
        }
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!(matches!("no_such".parse::<Mode>(), Err(GvlError::UnknownMode(_))));
    }

    #[test]
    fn full_mode_reports_all_three_task_blocks() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&tiny(), Mode::Full, dir.path()).unwrap();
        let direct = report.rows.iter().find(|r| r.readout == "direct").unwrap();
        assert!(direct.ssvg_miou.is_some() && direct.msvg_miou.is_some() && direct.caption_verb_accuracy.is_some());
        assert_eq!(report.rows.len(), 2);
        let back = read_csv(&dir.path().join("results.csv")).unwrap();
        assert_eq!(back, report.rows);
        assert!(dir.path().join("report.json").exists());
    }

    #[test]
    fn ablations_leave_the_removed_branch_empty() {
        let cfg = tiny();
        let splits = Splits::generate(&cfg).unwrap();
        let rows = branch_rows(&cfg, &splits, Mode::NoTeg, Variant::NoTeg).unwrap();
        assert!(rows[0].msvg_miou.is_none() && rows[0].caption_verb_accuracy.is_some());
        assert!(rows[1].msvg_miou.is_some(), "the probe reads grounding out regardless");
        let rows = branch_rows(&cfg, &splits, Mode::NoEtg, Variant::NoEtg).unwrap();
        assert!(rows[0].msvg_miou.is_some() && rows[0].caption_verb_accuracy.is_none());
        assert!(rows[1].caption_verb_accuracy.is_some());
    }

    #[test]
    fn lambda_sweep_has_one_row_per_lambda_and_a_plot() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&tiny(), Mode::LambdaSweep, dir.path()).unwrap();
        let lambdas: Vec<f64> = report.rows.iter().map(|r| r.lambda.unwrap()).collect();
        assert_eq!(lambdas, vec![0.0, 1.0]);
        assert!(dir.path().join("lambda_sweep.svg").exists());
    }

    #[test]
    fn jitter_study_covers_every_sigma_and_cost() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&tiny(), Mode::JitterStudy, dir.path()).unwrap();
        assert_eq!(report.rows.len(), 2 * COST_MODES.len());
        assert!(report.rows.iter().all(|r| (0.0..=1.0).contains(&r.matching_accuracy.unwrap())));
        assert!(dir.path().join("jitter_study.svg").exists());
    }

    #[test]
    fn extra_eval_videos_extend_the_test_split() {
        let cfg = tiny();
        let splits = Splits::generate(&cfg).unwrap();
        assert_eq!(splits.test.len(), 2 + 4);
        assert_eq!(splits.test.last().unwrap().id, 23);
    }

    #[test]
    fn mean_curve_averages_per_x() {
        let mk = |l: f64, m: f64| ResultRow { lambda: Some(l), msvg_miou: Some(m), ..ResultRow::default() };
        let rows = vec![mk(1.0, 0.4), mk(0.0, 0.2), mk(1.0, 0.6)];
        assert_eq!(mean_curve(&rows, |r| r.lambda, |r| r.msvg_miou), vec![(0.0, 0.2), (1.0, 0.5)]);
    }
}
