//! Text-to-event grounding: joint-space cosine similarities and the in-video
//! contrastive loss over them.

use crate::error::{invalid_input, Result};
use crate::matcher::Assignment;
use gvl_autograd::nn::Linear;
use gvl_autograd::{Graph, Matrix, ParamStore, Var};
use rand::Rng;

/// Norm floor applied before dividing by a row norm.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flavor {
    Sent,
    Ctx,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    /// K×N, entry (k, i) is the cosine between sentence k and event i.
    pub omega: Matrix,
    pub flavor: Flavor,
}

/// Separate linear maps of each modality into the joint space. The text map is shared
/// by both sentence flavours.
#[derive(Clone, Debug)]
pub struct JointSpace {
    event_proj: Linear,
    text_proj: Linear,
}

impl JointSpace {
    pub fn new(store: &mut ParamStore, event_dim: usize, text_dim: usize, joint_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            event_proj: Linear::new(store, "joint.event_proj", event_dim, joint_dim, rng),
            text_proj: Linear::new(store, "joint.text_proj", text_dim, joint_dim, rng),
        }
    }

    pub fn project_events(&self, g: &mut Graph, events: Var) -> Result<Var> {
        if g.value(events).cols() != self.event_proj.in_dim {
            return Err(invalid_input(format!(
                "event embeddings are {} wide, projection expects {}",
                g.value(events).cols(),
                self.event_proj.in_dim
            )));
        }
        let p = self.event_proj.forward(g, events);
        Ok(g.normalize_rows(p, NORM_EPS))
    }

    pub fn project_text(&self, g: &mut Graph, text: Var) -> Result<Var> {
        if g.value(text).cols() != self.text_proj.in_dim {
            return Err(invalid_input(format!(
                "sentence embeddings are {} wide, projection expects {}",
                g.value(text).cols(),
                self.text_proj.in_dim
            )));
        }
        let p = self.text_proj.forward(g, text);
        Ok(g.normalize_rows(p, NORM_EPS))
    }

    /// K×N similarity node from N×D_e event and K×D_t sentence embeddings.
    pub fn similarity(&self, g: &mut Graph, events: Var, text: Var) -> Result<Var> {
        let e = self.project_events(g, events)?;
        let t = self.project_text(g, text)?;
        Ok(cosine_of_unit_rows(g, t, e))
    }

    /// As [`JointSpace::similarity`] when the event side is already projected.
    pub fn similarity_projected(&self, g: &mut Graph, projected_events: Var, text: Var) -> Result<Var> {
        let t = self.project_text(g, text)?;
        Ok(cosine_of_unit_rows(g, t, projected_events))
    }
}

fn cosine_of_unit_rows(g: &mut Graph, text: Var, events: Var) -> Var {
    g.matmul_t(text, events)
}

/// Cosine similarity matrix of already-embedded vectors (no projection); K×N.
pub fn cosine_similarity(text: &Matrix, events: &Matrix) -> Result<Matrix> {
    if text.cols() != events.cols() {
        return Err(invalid_input(format!("dimension mismatch: {} vs {}", text.cols(), events.cols())));
    }
    let mut g = Graph::new();
    let t = g.constant(text.clone());
    let e = g.constant(events.clone());
    let t = g.normalize_rows(t, NORM_EPS);
    let e = g.normalize_rows(e, NORM_EPS);
    let w = cosine_of_unit_rows(&mut g, t, e);
    Ok(g.value(w).clone())
}

fn check_targets(k: usize, n: usize, targets: &[usize]) -> Result<()> {
    if targets.len() != k {
        return Err(invalid_input(format!("{} targets for {k} sentences", targets.len())));
    }
    let mut seen = vec![false; n];
    for (row, &i) in targets.iter().enumerate() {
        if i >= n {
            return Err(invalid_input(format!("sentence {row} assigned to event {i}, only {n} events")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(invalid_input(format!("event {i} assigned to more than one sentence")));
        }
    }
    Ok(())
}

/// Contrastive loss node: mean over sentences of `−log softmax(ω(k, ·)/τ)[T_k]`.
pub fn teg_loss_node(g: &mut Graph, omega: Var, targets: &[usize], tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(invalid_input(format!("temperature must be positive, got {tau}")));
    }
    let (k, n) = g.value(omega).shape();
    check_targets(k, n, targets)?;
    let logits = g.scale(omega, 1.0 / tau);
    let t: Vec<Option<usize>> = targets.iter().map(|&i| Some(i)).collect();
    Ok(g.cross_entropy(logits, &t))
}

/// Value of the contrastive loss for a fixed similarity matrix.
pub fn teg_loss(omega: &SimilarityMatrix, assignment: &Assignment, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let w = g.constant(omega.omega.clone());
    let loss = teg_loss_node(&mut g, w, &assignment.targets(omega.omega.rows())?, tau)?;
    Ok(g.scalar(loss))
}

/// Loss and its gradient with respect to ω.
pub fn teg_loss_with_grad(omega: &Matrix, targets: &[usize], tau: f64) -> Result<(f64, Matrix)> {
    let mut g = Graph::new();
    let w = g.input(omega.clone());
    let loss = teg_loss_node(&mut g, w, targets, tau)?;
    g.backward(loss);
    Ok((g.scalar(loss), g.grad(w).cloned().unwrap_or_else(|| Matrix::zeros(omega.rows(), omega.cols()))))
}
