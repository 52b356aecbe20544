//! Grounding, correspondence and classification objectives and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SatError};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::{dot, Mat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub w_cor: f64,
    pub w_cls: f64,
    pub alpha: f64,
    pub enable_vg_i: bool,
    pub enable_cor: bool,
    pub enable_cls: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { w_cor: 10.0, w_cls: 0.5, alpha: 0.1, enable_vg_i: true, enable_cor: true, enable_cls: true }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(SatError::Config(format!("loss.alpha must be > 0, got {}", self.alpha)));
        }
        if self.w_cor < 0.0 || self.w_cls < 0.0 {
            return Err(SatError::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_vg_o: f64,
    pub l_vg_i: f64,
    pub l_cor: f64,
    pub l_cls_q: f64,
    pub l_cls_o: f64,
    pub total: f64,
    pub hard_negatives: Vec<(usize, usize, usize)>,
}

/// Unweighted loss terms of one forward pass. Disabled terms are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub l_vg_o: f64,
    pub l_vg_i: f64,
    pub l_cor: f64,
    pub l_cls_q: f64,
    pub l_cls_o: f64,
}

/// Weighted combination `l_vg_o + l_vg_i + w_cor·l_cor + w_cls·(l_cls_o + l_cls_q)`.
pub fn total_loss(parts: &LossParts, cfg: &LossConfig) -> LossBreakdown {
    let vg_i = if cfg.enable_vg_i { parts.l_vg_i } else { 0.0 };
    let cor = if cfg.enable_cor { parts.l_cor } else { 0.0 };
    let (cq, co) = if cfg.enable_cls { (parts.l_cls_q, parts.l_cls_o) } else { (0.0, 0.0) };
    LossBreakdown {
        l_vg_o: parts.l_vg_o,
        l_vg_i: vg_i,
        l_cor: cor,
        l_cls_q: cq,
        l_cls_o: co,
        total: parts.l_vg_o + vg_i + cfg.w_cor * cor + cfg.w_cls * (co + cq),
        hard_negatives: Vec::new(),
    }
}

/// Softmax cross-entropy of an `M×1` score column against `positive`.
pub fn vg_term<T: Real>(tape: &mut Tape<T>, scores: Var, positive: usize) -> Result<Var> {
    let (m, c) = tape.shape(scores);
    let n = m * c;
    if positive >= n {
        return Err(SatError::Argument(format!("positive index {positive} out of range for {n} scores")));
    }
    let row = tape.reshape(scores, 1, n);
    Ok(tape.softmax_xent(row, &[positive]))
}

/// Mean cross-entropy of `n×C` logits against one label per row.
pub fn cls_term<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = tape.shape(logits);
    if labels.len() != n {
        return Err(SatError::Argument(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(SatError::Argument(format!("label {bad} out of range for {c} classes")));
    }
    Ok(tape.softmax_xent(logits, labels))
}

/// Hard negatives on a similarity matrix `sim[a][b] = s(F^O_a, F^I_b)`, restricted
/// to eligible indices. Ties go to the lowest index.
pub fn mine_from_similarity<T: Real>(sim: &Mat<T>, eligible: &[bool]) -> Vec<(usize, usize, usize)> {
    let idx: Vec<usize> = (0..eligible.len()).filter(|&k| eligible[k]).collect();
    if idx.len() < 2 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(idx.len());
    for &m in &idx {
        let mut bi: Option<usize> = None;
        let mut bj: Option<usize> = None;
        for &c in &idx {
            if c == m {
                continue;
            }
            if bi.is_none_or(|b| sim.get(m, c) > sim.get(m, b)) {
                bi = Some(c);
            }
            if bj.is_none_or(|b| sim.get(c, m) > sim.get(b, m)) {
                bj = Some(c);
            }
        }
        out.push((m, bi.expect("two eligible"), bj.expect("two eligible")));
    }
    out
}

fn normalized_rows<T: Real>(a: &Mat<T>) -> Mat<T> {
    let mut out = a.clone();
    for i in 0..a.rows() {
        let n = dot(a.row(i), a.row(i)).sqrt();
        if n > T::zero() {
            for v in out.row_mut(i) {
                *v /= n;
            }
        }
    }
    out
}

/// Cosine similarity matrix of the rows of `f_o` against the rows of `f_i`.
pub fn similarity<T: Real>(f_o: &Mat<T>, f_i: &Mat<T>) -> Mat<T> {
    normalized_rows(f_o).matmul_t(&normalized_rows(f_i))
}

/// One `(m, i, j)` triple per proposal over all proposals.
pub fn mine_hard_negatives<T: Real>(f_o: &Mat<T>, f_i: &Mat<T>) -> Vec<(usize, usize, usize)> {
    mine_from_similarity(&similarity(f_o, f_i), &vec![true; f_o.rows()])
}

/// Two-hinge triplet loss over eligible proposals with mined hard negatives held constant.
pub fn cor_term<T: Real>(tape: &mut Tape<T>, f_o: Var, f_i: Var, eligible: &[bool], alpha: T) -> (Var, Vec<(usize, usize, usize)>) {
    let on = tape.row_l2_normalize(f_o);
    let inn = tape.row_l2_normalize(f_i);
    let sim = tape.matmul_t(on, inn);
    let triples = mine_from_similarity(tape.value(sim), eligible);
    (tape.triplet_hinge(sim, &triples, alpha), triples)
}

/// `-log softmax(scores)[positive]` as a plain value.
pub fn loss_vg(scores: &[f64], positive: usize) -> Result<f64> {
    let store = ParamStore::<f64>::default();
    let mut tape = Tape::new(&store);
    let s = tape.leaf(Mat::from_vec(scores.len(), 1, scores.to_vec()));
    let l = vg_term(&mut tape, s, positive)?;
    Ok(tape.scalar_value(l))
}

/// Cross-entropy of one logit vector as a plain value.
pub fn loss_cls(logits: &[f64], label: usize) -> Result<f64> {
    let store = ParamStore::<f64>::default();
    let mut tape = Tape::new(&store);
    let s = tape.leaf(Mat::from_vec(1, logits.len(), logits.to_vec()));
    let l = cls_term(&mut tape, s, &[label])?;
    Ok(tape.scalar_value(l))
}

/// Correspondence loss as a plain value.
pub fn loss_correspondence(f_o: &Mat<f64>, f_i: &Mat<f64>, eligible: &[bool], cfg: &LossConfig) -> f64 {
    let store = ParamStore::<f64>::default();
    let mut tape = Tape::new(&store);
    let a = tape.leaf(f_o.clone());
    let b = tape.leaf(f_i.clone());
    let (l, _) = cor_term(&mut tape, a, b, eligible, cfg.alpha);
    tape.scalar_value(l)
}
