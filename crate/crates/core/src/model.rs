//! The full network: both towers, the joint space and the caption decoder, plus
//! checkpointing.

use crate::datagen::VideoSample;
use crate::encoders::{EventEncoder, EventSet, ModelConfig, ParagraphEncoding, TextEncoder};
use crate::error::{GvlError, Result};
use crate::etg::CaptionDecoder;
use crate::teg::JointSpace;
use gvl_autograd::{Graph, Matrix, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Parameter-name prefix of the video tower.
pub const EVENT_PREFIX: &str = "event.";

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub events: EventEncoder,
    pub text: TextEncoder,
    pub joint: JointSpace,
    pub captioner: CaptionDecoder,
}

/// Everything one forward pass of a video and its paragraph yields, as plain values.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub events: EventSet,
    pub paragraph: ParagraphEncoding,
    /// K×N similarities for each flavour.
    pub omega_sent: Matrix,
    pub omega_ctx: Matrix,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: ModelConfig,
    params: ParamStore,
}

impl Model {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let events = EventEncoder::new(&mut store, config, &mut rng);
        let text = TextEncoder::new(&mut store, config, &mut rng);
        let joint = JointSpace::new(&mut store, config.event_dim, config.text_dim, config.joint_dim, &mut rng);
        let captioner = CaptionDecoder::new(
            &mut store,
            config.event_dim,
            config.caption_word_dim,
            config.caption_hidden,
            config.vocab_size,
            &mut rng,
        );
        Ok(Self { config: config.clone(), store, events, text, joint, captioner })
    }

    /// Event proposals of one video, detached.
    pub fn propose(&self, video: &VideoSample) -> Result<EventSet> {
        let mut g = Graph::with_params(&self.store);
        Ok(self.events.forward(&mut g, video)?.to_event_set(&g))
    }

    /// Runs both towers on a video and a paragraph of tokenised sentences.
    pub fn encode(&self, video: &VideoSample, sentences: &[Vec<usize>]) -> Result<Encoded> {
        let mut g = Graph::with_params(&self.store);
        let ev = self.events.forward(&mut g, video)?;
        let para = self.text.forward(&mut g, sentences)?;
        let proj = self.joint.project_events(&mut g, ev.embeddings)?;
        let ws = self.joint.similarity_projected(&mut g, proj, para.q_sent)?;
        let wc = self.joint.similarity_projected(&mut g, proj, para.q_ctx)?;
        Ok(Encoded {
            events: ev.to_event_set(&g),
            paragraph: ParagraphEncoding { q_sent: g.value(para.q_sent).clone(), q_ctx: g.value(para.q_ctx).clone() },
            omega_sent: g.value(ws).clone(),
            omega_ctx: g.value(wc).clone(),
        })
    }

    /// Context-free similarity of each sentence, encoded on its own, to the events of `video`.
    pub fn omega_sent(&self, video: &VideoSample, sentences: &[Vec<usize>]) -> Result<(EventSet, Matrix)> {
        let mut g = Graph::with_params(&self.store);
        let ev = self.events.forward(&mut g, video)?;
        let q = self.text.forward_sent(&mut g, sentences)?;
        let w = self.joint.similarity(&mut g, ev.embeddings, q)?;
        Ok((ev.to_event_set(&g), g.value(w).clone()))
    }

    /// A fresh model (seeded by `init_seed`) whose video tower is copied from `self` and frozen.
    pub fn reinit_with_frozen_events(&self, init_seed: u64) -> Result<Self> {
        let mut fresh = Model::new(&ModelConfig { init_seed, ..self.config.clone() })?;
        for id in self.store.ids() {
            let name = self.store.name(id);
            if name.starts_with(EVENT_PREFIX) {
                let target = fresh.store.find(name).ok_or_else(|| GvlError::Checkpoint(format!("missing {name}")))?;
                *fresh.store.value_mut(target) = self.store.value(id).clone();
            }
        }
        fresh.store.set_trainable_prefix(EVENT_PREFIX, false);
        Ok(fresh)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint { config: self.config.clone(), params: self.store.clone() };
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, &ckpt)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let ckpt: Checkpoint = serde_json::from_reader(file)?;
        let mut model = Model::new(&ckpt.config)?;
        model.store.load_values(&ckpt.params).map_err(GvlError::Checkpoint)?;
        for id in ckpt.params.ids() {
            if let Some(target) = model.store.find(ckpt.params.name(id)) {
                model.store.set_trainable(target, ckpt.params.is_trainable(id));
            }
        }
        Ok(model)
    }

    /// Checks that `video` fits this model.
    pub fn check_video(&self, video: &VideoSample) -> Result<()> {
        if video.features.cols() != self.config.feature_dim {
            return Err(crate::error::invalid_input(format!(
                "video {} has {}-wide features, model expects {}",
                video.id,
                video.features.cols(),
                self.config.feature_dim
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, GenConfig};

    fn tiny() -> ModelConfig {
        ModelConfig { num_queries: 6, event_dim: 16, text_dim: 16, joint_dim: 8, ffn_dim: 16, heads: 2, ..ModelConfig::default() }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_outputs() {
        let corpus = generate_corpus(&GenConfig { num_videos: 10, frames_per_video: 16, ..GenConfig::default() }).unwrap();
        let model = Model::new(&tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        let v = &corpus.train[0];
        assert_eq!(model.propose(v).unwrap(), back.propose(v).unwrap());
    }

    #[test]
    fn mismatched_checkpoint_is_rejected() {
        let model = Model::new(&tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replacen("\"num_queries\":6", "\"num_queries\":7", 1)).unwrap();
        assert!(matches!(Model::load(&path), Err(GvlError::Checkpoint(_))));
    }

    #[test]
    fn probing_copy_freezes_only_the_video_tower() {
        let model = Model::new(&tiny()).unwrap();
        let probe = model.reinit_with_frozen_events(99).unwrap();
        for id in probe.store.ids() {
            let name = probe.store.name(id);
            let src = model.store.find(name).unwrap();
            if name.starts_with(EVENT_PREFIX) {
                assert!(!probe.store.is_trainable(id));
                assert_eq!(probe.store.value(id), model.store.value(src));
            } else {
                assert!(probe.store.is_trainable(id));
            }
        }
        assert_ne!(probe.store.value(probe.store.find("text.words.table").unwrap()), model.store.value(model.store.find("text.words.table").unwrap()));
    }
}
