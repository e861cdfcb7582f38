//! Semantic-aware label assignment.
//!
//! Cost of giving sentence k to proposal i:
//! `2·(1 − gIoU(pred_i, gt_k)) + (1 − σ(conf_i)) + semantic(k, i)`, where the semantic term
//! is `−λ·ω(k, i)` (contrastive), `+λ·NLL(sentence k | e_i)` (caption) or absent.
//! Costs are plain values: no gradient flows through the matching.

use crate::datagen::Segment;
use crate::error::{invalid_input, Result};
use crate::etg::giou;
use gvl_autograd::{sigmoid, Matrix};
use serde::{Deserialize, Serialize};

pub const GIOU_COST_WEIGHT: f64 = 2.0;
pub const CONFIDENCE_COST_WEIGHT: f64 = 1.0;
const BRUTE_FORCE_MAX_ROWS: usize = 6;
const BRUTE_FORCE_MAX_COLS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    Contrastive,
    Caption,
    None,
}

impl std::str::FromStr for CostMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "contrastive" => Ok(Self::Contrastive),
            "caption" => Ok(Self::Caption),
            "none" => Ok(Self::None),
            other => Err(format!("unknown cost mode `{other}` (contrastive|caption|none)")),
        }
    }
}

/// Semantic evidence handed to [`build_cost`].
#[derive(Clone, Copy, Debug)]
pub enum SemanticCost<'a> {
    /// K×N similarity ω.
    Contrastive(&'a Matrix),
    /// K×N negative log-likelihood of sentence k under the decoder fed e_i.
    Caption(&'a Matrix),
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostMatrix {
    pub cost: Matrix,
    /// Signed semantic contribution, already multiplied by λ.
    pub semantic: Matrix,
    /// `2·(1 − gIoU)`.
    pub giou: Matrix,
    /// `1 − σ(conf)`.
    pub confidence: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Assignment {
    /// `(sentence, proposal)` pairs ordered by sentence.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    /// Proposal index of every sentence, in sentence order.
    pub fn targets(&self, k: usize) -> Result<Vec<usize>> {
        if self.pairs.len() != k || self.pairs.iter().enumerate().any(|(row, &(r, _))| row != r) {
            return Err(invalid_input(format!("assignment does not cover sentences 0..{k} in order")));
        }
        Ok(self.pairs.iter().map(|&(_, i)| i).collect())
    }

    pub fn proposal_of(&self, k: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(r, _)| r == k).map(|&(_, i)| i)
    }

    /// Injective in both coordinates.
    pub fn is_injective(&self) -> bool {
        let mut rows: Vec<usize> = self.pairs.iter().map(|p| p.0).collect();
        let mut cols: Vec<usize> = self.pairs.iter().map(|p| p.1).collect();
        rows.sort_unstable();
        cols.sort_unstable();
        rows.windows(2).all(|w| w[0] != w[1]) && cols.windows(2).all(|w| w[0] != w[1])
    }

    fn from_rows(cost: &Matrix, cols: Vec<usize>) -> Self {
        let total_cost = cols.iter().enumerate().map(|(k, &i)| cost.get(k, i)).sum();
        Self { pairs: cols.into_iter().enumerate().collect(), total_cost }
    }
}

pub fn build_cost(
    semantic: SemanticCost<'_>,
    segments: &Matrix,
    confidence_logits: &[f64],
    gt: &[Segment],
    lambda: f64,
) -> Result<CostMatrix> {
    if lambda < 0.0 {
        return Err(invalid_input(format!("lambda must be non-negative, got {lambda}")));
    }
    let (k, n) = (gt.len(), segments.rows());
    if segments.cols() != 2 || confidence_logits.len() != n {
        return Err(invalid_input("segments must be N×2 with one confidence logit per proposal"));
    }
    let semantic_scores = match semantic {
        SemanticCost::Contrastive(m) | SemanticCost::Caption(m) => {
            if m.shape() != (k, n) {
                return Err(invalid_input(format!("semantic matrix is {:?}, expected ({k}, {n})", m.shape())));
            }
            Some(m)
        }
        SemanticCost::None => None,
    };
    let sign = match semantic {
        SemanticCost::Contrastive(_) => -1.0,
        _ => 1.0,
    };
    let giou_part = Matrix::from_fn(k, n, |r, i| {
        let pred = Segment::new(segments.get(i, 0), segments.get(i, 1));
        GIOU_COST_WEIGHT * (1.0 - giou(&pred, &gt[r]))
    });
    let conf_part = Matrix::from_fn(k, n, |_, i| CONFIDENCE_COST_WEIGHT * (1.0 - sigmoid(confidence_logits[i])));
    let semantic_part = match semantic_scores {
        Some(m) => m.map(|x| sign * lambda * x),
        None => Matrix::zeros(k, n),
    };
    let cost = Matrix::from_fn(k, n, |r, i| giou_part.get(r, i) + conf_part.get(r, i) + semantic_part.get(r, i));
    if !cost.all_finite() {
        return Err(invalid_input("cost matrix has non-finite entries"));
    }
    Ok(CostMatrix { cost, semantic: semantic_part, giou: giou_part, confidence: conf_part })
}

/// Optimal assignment cost of all rows of `cost` restricted to the given columns, with
/// the column chosen for each row. Shortest augmenting paths with dual potentials.
fn solve_rect(cost: &Matrix, rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let n = rows.len();
    let m = cols.len();
    debug_assert!(n <= m);
    if n == 0 {
        return (0.0, Vec::new());
    }
    let c = |i: usize, j: usize| cost.get(rows[i - 1], cols[j - 1]);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut chosen = vec![0usize; n];
    for j in 1..=m {
        if p[j] > 0 {
            chosen[p[j] - 1] = cols[j - 1];
        }
    }
    let total = chosen.iter().enumerate().map(|(i, &col)| cost.get(rows[i], col)).sum();
    (total, chosen)
}

fn tolerance(opt: f64) -> f64 {
    1e-9 * opt.abs().max(1.0)
}

fn check_matchable(cost: &Matrix) -> Result<()> {
    let (k, n) = cost.shape();
    if k > n {
        return Err(invalid_input(format!("{k} sentences cannot be matched one-to-one to {n} proposals")));
    }
    if !cost.all_finite() {
        return Err(invalid_input("cost matrix has non-finite entries"));
    }
    Ok(())
}

/// Minimum-cost assignment of every row to a distinct column. Among optimal assignments
/// (within 1e-9 relative) the lexicographically smallest column sequence is returned.
pub fn hungarian(cost: &Matrix) -> Result<Assignment> {
    check_matchable(cost)?;
    let (k, n) = cost.shape();
    let all_rows: Vec<usize> = (0..k).collect();
    let all_cols: Vec<usize> = (0..n).collect();
    let (opt, first) = solve_rect(cost, &all_rows, &all_cols);
    let tol = tolerance(opt);

    // Fix rows one at a time to the lowest column that still admits an optimal completion.
    let mut chosen = Vec::with_capacity(k);
    let mut used = vec![false; n];
    let mut prefix = 0.0;
    for row in 0..k {
        let rest: Vec<usize> = (row + 1..k).collect();
        let mut picked = None;
        for col in 0..n {
            if used[col] {
                continue;
            }
            used[col] = true;
            let free: Vec<usize> = (0..n).filter(|&j| !used[j]).collect();
            let (tail, _) = solve_rect(cost, &rest, &free);
            used[col] = false;
            if prefix + cost.get(row, col) + tail <= opt + tol {
                picked = Some(col);
                break;
            }
        }
        let col = picked.unwrap_or(first[row]);
        used[col] = true;
        prefix += cost.get(row, col);
        chosen.push(col);
    }
    Ok(Assignment::from_rows(cost, chosen))
}

/// Exhaustive search over all injections, in lexicographic order. Test oracle only.
pub fn brute_force_match(cost: &Matrix) -> Result<Assignment> {
    check_matchable(cost)?;
    let (k, n) = cost.shape();
    if k > BRUTE_FORCE_MAX_ROWS || n > BRUTE_FORCE_MAX_COLS {
        return Err(invalid_input(format!(
            "brute force refuses {k}×{n}; limit is {BRUTE_FORCE_MAX_ROWS}×{BRUTE_FORCE_MAX_COLS}"
        )));
    }
    fn search(cost: &Matrix, row: usize, acc: f64, used: &mut [bool], cur: &mut Vec<usize>, best: &mut Option<(f64, Vec<usize>)>) {
        if row == cost.rows() {
            let better = match best {
                None => true,
                Some((b, _)) => acc < *b - tolerance(*b),
            };
            if better {
                *best = Some((acc, cur.clone()));
            }
            return;
        }
        for col in 0..cost.cols() {
            if used[col] {
                continue;
            }
            used[col] = true;
            cur.push(col);
            search(cost, row + 1, acc + cost.get(row, col), used, cur, best);
            cur.pop();
            used[col] = false;
        }
    }
    let mut best = None;
    search(cost, 0, 0.0, &mut vec![false; n], &mut Vec::with_capacity(k), &mut best);
    let (_, cols) = best.unwrap_or((0.0, Vec::new()));
    Ok(Assignment::from_rows(cost, cols))
}
