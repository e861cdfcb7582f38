use gvl::datagen::{generate_corpus, jitter_boundaries, EventAnnotation, GenConfig, Segment};
use gvl::encoders::ModelConfig;
use gvl::etg::{caption_ce_loss, localization_loss};
use gvl::eval::{eval_grounding, ground_each, ground_single, select_argmax, select_hungarian};
use gvl::matcher::{hungarian, Assignment};
use gvl::model::Model;
use gvl::teg::teg_loss_with_grad;
use gvl::trainer::{train_on, TrainConfig};
use gvl_autograd::Matrix;
use proptest::prelude::*;

fn small_model(seed: u64) -> ModelConfig {
    ModelConfig { num_queries: 6, event_dim: 16, text_dim: 16, joint_dim: 8, ffn_dim: 16, heads: 2, init_seed: seed, ..ModelConfig::default() }
}

fn matrix(k: usize, n: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-5.0f64..5.0, k * n).prop_map(move |v| Matrix::from_vec(k, n, v))
}

fn cost_matrix() -> impl Strategy<Value = Matrix> {
    (1usize..=4).prop_flat_map(|k| (Just(k), k..=6usize)).prop_flat_map(|(k, n)| matrix(k, n))
}

fn segment() -> impl Strategy<Value = Segment> {
    (0.0f64..0.95, 0.01f64..1.0).prop_map(|(a, w)| Segment::new(a, (a + w).min(1.0)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn jitter_keeps_segments_valid(s in segment(), sigma in 0.0f64..3.0, seed in any::<u64>()) {
        let a = EventAnnotation { segment: s, tokens: vec![2], archetype_id: 0, true_segment: s };
        let out = &jitter_boundaries(&[a], sigma, 1.0 / 64.0, seed)[0];
        prop_assert!(0.0 <= out.segment.start && out.segment.start < out.segment.end && out.segment.end <= 1.0);
        prop_assert_eq!(out.true_segment, s);
    }

    #[test]
    fn noiseless_events_tile_exactly_the_true_segments(seed in 0u64..1000) {
        let cfg = GenConfig { num_videos: 4, frames_per_video: 48, background_noise_std: 0.0, seed, ..GenConfig::default() };
        let corpus = generate_corpus(&cfg).unwrap();
        for v in corpus.all_videos() {
            let t = v.num_frames();
            for f in 0..t {
                let lit = v.features.row(f).iter().any(|x| x.abs() > 0.0);
                let mid = (f as f64 + 0.5) / t as f64;
                let inside = v.annotations.iter().any(|a| a.true_segment.start < mid && mid < a.true_segment.end);
                prop_assert_eq!(lit, inside, "video {} frame {}", v.id, f);
            }
        }
    }

    #[test]
    fn corpus_is_a_pure_function_of_its_config(seed in any::<u64>()) {
        let cfg = GenConfig { num_videos: 5, frames_per_video: 24, seed, ..GenConfig::default() };
        prop_assert_eq!(generate_corpus(&cfg).unwrap(), generate_corpus(&cfg).unwrap());
    }

    #[test]
    fn segments_are_valid_for_any_initialisation(seed in any::<u64>(), videos in 0u64..100) {
        let model = Model::new(&small_model(seed)).unwrap();
        let cfg = GenConfig { num_videos: 10, frames_per_video: 20, seed: videos, ..GenConfig::default() };
        let v = &generate_corpus(&cfg).unwrap().train[0];
        let ev = model.propose(v).unwrap();
        for i in 0..ev.len() {
            let s = ev.segment(i);
            prop_assert!(0.0 <= s.start && s.start < s.end && s.end <= 1.0);
        }
    }

    #[test]
    fn shifting_the_cost_moves_the_total_by_k_times_the_shift(c in cost_matrix(), shift in -10.0f64..10.0) {
        let base = hungarian(&c).unwrap();
        let mut shifted = c.clone();
        shifted.data_mut().iter_mut().for_each(|x| *x += shift);
        let moved = hungarian(&shifted).unwrap();
        let k = c.rows() as f64;
        prop_assert!((moved.total_cost - (base.total_cost + k * shift)).abs() < 1e-9);
        let base_in_shifted: f64 = base.pairs.iter().map(|&(r, col)| shifted.get(r, col)).sum();
        prop_assert!((base_in_shifted - moved.total_cost).abs() < 1e-9);
    }

    #[test]
    fn contrastive_softmax_rows_sum_to_one(w in matrix(3, 5), tau in 0.05f64..2.0) {
        // d/dω of −log softmax(ω/τ)[t] is (p − onehot)/τ, so each gradient row sums to (Σp − 1)/τ.
        let (_, g) = teg_loss_with_grad(&w, &[0, 3, 1], tau).unwrap();
        for r in 0..3 {
            let s: f64 = g.row(r).iter().sum();
            prop_assert!(s.abs() * tau < 1e-6);
        }
    }

    #[test]
    fn argmax_is_invariant_to_increasing_row_transforms(w in matrix(4, 6), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let t = Matrix::from_fn(4, 6, |r, c| (a * w.get(r, c) + b).tanh() + (w.get(r, c)).powi(3));
        prop_assert_eq!(select_argmax(&w), select_argmax(&t));
    }

    #[test]
    fn hungarian_grounding_is_injective(w in matrix(4, 6)) {
        let picks = select_hungarian(&w).unwrap();
        let mut sorted = picks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), picks.len());
    }

    #[test]
    fn grounding_metrics_lie_in_the_unit_interval(pairs in prop::collection::vec((segment(), segment()), 1..20)) {
        let (p, g): (Vec<Segment>, Vec<Segment>) = pairs.into_iter().unzip();
        let m = eval_grounding(&p, &g).unwrap();
        for x in [m.iou_05, m.iou_07, m.miou] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
        prop_assert!(m.iou_07 <= m.iou_05);
    }

    #[test]
    fn caption_and_localization_losses_are_finite_and_nonnegative(
        logits in matrix(4, 9),
        toks in prop::collection::vec(0usize..9, 4),
        conf in prop::collection::vec(-50.0f64..50.0, 3),
        segs in prop::collection::vec(segment(), 3),
        gt in segment(),
    ) {
        let ce = caption_ce_loss(&logits, &toks).unwrap();
        prop_assert!(ce.is_finite() && ce >= 0.0);
        let events = gvl::encoders::EventSet {
            embeddings: Matrix::zeros(3, 1),
            segments: Matrix::from_fn(3, 2, |r, c| if c == 0 { segs[r].start } else { segs[r].end }),
            confidence_logits: conf,
            count_logits: vec![0.0],
        };
        let loc = localization_loss(&events, &Assignment { pairs: vec![(0, 1)], total_cost: 0.0 }, &[gt]).unwrap();
        prop_assert!(loc.is_finite() && loc >= 0.0);
    }
}

#[test]
fn single_sentence_grounding_ignores_the_rest_of_the_paragraph() {
    let corpus = generate_corpus(&GenConfig { num_videos: 10, frames_per_video: 32, ..GenConfig::default() }).unwrap();
    let model = Model::new(&small_model(3)).unwrap();
    for v in &corpus.train {
        let sentences = v.sentences();
        let together = ground_each(&model, &sentences, v).unwrap();
        for (k, s) in sentences.iter().enumerate() {
            assert_eq!(ground_single(&model, s, v).unwrap(), together.segments[k]);
        }
    }
}

#[test]
fn training_completes_across_grounding_weights() {
    let corpus = generate_corpus(&GenConfig { num_videos: 10, frames_per_video: 24, ..GenConfig::default() }).unwrap();
    for alpha in [0.01, 0.05, 0.5] {
        let mut model = Model::new(&small_model(1)).unwrap();
        let cfg = TrainConfig { epochs: 2, alpha, warmup_steps: 4, ..TrainConfig::default() };
        let report = train_on(&corpus.train, &corpus.val, &mut model, &cfg).unwrap();
        assert!(report.final_losses().unwrap().is_finite(), "alpha {alpha}");
    }
}
