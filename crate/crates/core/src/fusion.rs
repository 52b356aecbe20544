//! Masked multi-modal fusion transformer, grounding heads and classifiers.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::embeddings::{Linear, LnParams, ModelConfig};
use crate::error::{Result, SatError};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MaskMode {
    Sat,
    MaskA,
    MaskB,
    Inference,
    Full,
}

impl MaskMode {
    pub fn has_semantics(self) -> bool {
        self != MaskMode::Inference
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskLayout {
    pub text: Range<usize>,
    pub proposals: Range<usize>,
    pub semantics: Option<Range<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub mode: MaskMode,
    pub size: usize,
    /// Row-major `size×size`; `allow[q * size + k]` lets position `q` attend to `k`.
    pub allow: Arc<Vec<bool>>,
    pub layout: MaskLayout,
}

impl AttentionMask {
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.size + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allow[q * self.size..(q + 1) * self.size]
    }
}

/// Builds the allow-matrix for `K` words (plus the sentinel) and `M` proposals.
/// `pad` has `K+1` entries, true for padding positions.
pub fn build_mask(mode: MaskMode, k: usize, m: usize, pad: &[bool]) -> AttentionMask {
    assert_eq!(pad.len(), k + 1, "pad mask must cover the sentinel and K words");
    let text = 0..k + 1;
    let proposals = k + 1..k + 1 + m;
    let semantics = mode.has_semantics().then(|| k + 1 + m..k + 1 + 2 * m);
    let s = k + 1 + if mode.has_semantics() { 2 * m } else { m };
    let is_sem = |i: usize| i >= k + 1 + m;
    let mut allow = vec![false; s * s];
    for q in 0..s {
        for c in 0..s {
            let ok = if c < k + 1 && pad[c] {
                false
            } else {
                match mode {
                    MaskMode::Sat => is_sem(q) || !is_sem(c),
                    MaskMode::MaskB => is_sem(q) == is_sem(c),
                    MaskMode::MaskA | MaskMode::Full | MaskMode::Inference => true,
                }
            };
            allow[q * s + c] = ok;
        }
    }
    AttentionMask { mode, size: s, allow: Arc::new(allow), layout: MaskLayout { text, proposals, semantics } }
}

/// Inverted dropout on residual branches; inactive when no generator is supplied.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn apply<T: Real>(&mut self, tape: &mut Tape<T>, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => tape.dropout(x, self.rate, rng),
            _ => x,
        }
    }
}

/// Pre-LN transformer block.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1: LnParams,
    pub qkv: Linear,
    pub out: Linear,
    pub ln2: LnParams,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl BlockParams {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d;
        let f = cfg.ffn_mult * d;
        Self {
            ln1: LnParams::new(store, &format!("{name}.ln1"), d),
            qkv: Linear::new(store, &format!("{name}.qkv"), d, 3 * d, true, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, true, rng),
            ln2: LnParams::new(store, &format!("{name}.ln2"), d),
            ff1: Linear::new(store, &format!("{name}.ff1"), d, f, true, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), f, d, true, rng),
        }
    }
}

pub fn block_forward<T: Real>(
    tape: &mut Tape<T>,
    p: &BlockParams,
    heads: usize,
    x: Var,
    allow: Arc<Vec<bool>>,
    dropout: &mut Dropout<'_>,
) -> Var {
    let h = p.ln1.apply(tape, x);
    let qkv = p.qkv.apply(tape, h);
    let a = tape.attention(qkv, heads, allow);
    let a = p.out.apply(tape, a);
    let a = dropout.apply(tape, a);
    let x = tape.add(x, a);
    let h = p.ln2.apply(tape, x);
    let h = p.ff1.apply(tape, h);
    let h = tape.gelu(h);
    let h = p.ff2.apply(tape, h);
    let h = dropout.apply(tape, h);
    tape.add(x, h)
}

#[derive(Debug, Clone)]
pub struct FusionParams {
    pub blocks: Vec<BlockParams>,
    pub ln_final: LnParams,
    /// Text, proposal and semantics type vectors.
    pub type_vectors: Option<[ParamId; 3]>,
}

impl FusionParams {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let blocks = (0..cfg.fusion_layers).map(|l| BlockParams::new(store, &format!("fusion.{l}"), cfg, rng)).collect();
        let ln_final = LnParams::new(store, "fusion.ln_final", cfg.d);
        let type_vectors = cfg.type_vectors.then(|| {
            [
                store.add_normal("fusion.type.text", 1, cfg.d, 0.02, rng),
                store.add_normal("fusion.type.proposal", 1, cfg.d, 0.02, rng),
                store.add_normal("fusion.type.semantics", 1, cfg.d, 0.02, rng),
            ]
        });
        Self { blocks, ln_final, type_vectors }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusedFeatures {
    pub f_q: Var,
    pub f_o: Var,
    pub f_i: Option<Var>,
}

/// Runs the fusion stack over `[Q; O; I]` under `mask`.
pub fn fuse<T: Real>(
    tape: &mut Tape<T>,
    params: &FusionParams,
    heads: usize,
    q: Var,
    o: Var,
    i: Option<Var>,
    mask: &AttentionMask,
    dropout: &mut Dropout<'_>,
) -> Result<FusedFeatures> {
    let (nq, no) = (tape.shape(q).0, tape.shape(o).0);
    let ni = i.map(|v| tape.shape(v).0);
    let lay = &mask.layout;
    let sem_len = lay.semantics.as_ref().map(|r| r.len());
    if lay.text.len() != nq || lay.proposals.len() != no || sem_len != ni {
        return Err(SatError::Argument(format!(
            "mask layout ({}, {}, {:?}) does not match token counts ({nq}, {no}, {ni:?})",
            lay.text.len(),
            lay.proposals.len(),
            sem_len
        )));
    }
    let (q, o, i) = match params.type_vectors {
        Some([tt, tp, ts]) => {
            let (tt, tp, ts) = (tape.param(tt), tape.param(tp), tape.param(ts));
            let q = tape.add_row(q, tt);
            let o = tape.add_row(o, tp);
            let i = i.map(|i| tape.add_row(i, ts));
            (q, o, i)
        }
        None => (q, o, i),
    };
    let mut parts = vec![q, o];
    parts.extend(i);
    let mut x = tape.concat_rows(&parts);
    for b in &params.blocks {
        x = block_forward(tape, b, heads, x, mask.allow.clone(), dropout);
    }
    let x = params.ln_final.apply(tape, x);
    let f_q = tape.slice_rows(x, 0, nq);
    let f_o = tape.slice_rows(x, nq, no);
    let f_i = ni.map(|n| tape.slice_rows(x, nq + no, n));
    Ok(FusedFeatures { f_q, f_o, f_i })
}

/// Two affine layers with GELU between, `d → d → 1`.
#[derive(Debug, Clone, Copy)]
pub struct GroundingHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl GroundingHead {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut R) -> Self {
        Self { fc1: Linear::new(store, &format!("{name}.fc1"), d, d, true, rng), fc2: Linear::new(store, &format!("{name}.fc2"), d, 1, true, rng) }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub ground: GroundingHead,
    pub ground_2d: GroundingHead,
    pub cls_query: Linear,
    pub cls_proposal: Linear,
}

impl HeadParams {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            ground: GroundingHead::new(store, "head.ground", cfg.d, rng),
            ground_2d: GroundingHead::new(store, "head.ground2d", cfg.d, rng),
            cls_query: Linear::new(store, "head.cls_query", cfg.d, cfg.num_classes, true, rng),
            cls_proposal: Linear::new(store, "head.cls_proposal", cfg.d, cfg.num_classes, true, rng),
        }
    }
}

/// One score per row of `f` (`M×d → M×1`).
pub fn grounding_scores<T: Real>(tape: &mut Tape<T>, head: &GroundingHead, f: Var) -> Var {
    let h = head.fc1.apply(tape, f);
    let h = tape.gelu(h);
    head.fc2.apply(tape, h)
}

/// Class logits for every row of `f` (`n×d → n×C`).
pub fn classify<T: Real>(tape: &mut Tape<T>, classifier: &Linear, f: Var) -> Var {
    classifier.apply(tape, f)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(mask: &AttentionMask) -> Vec<Vec<u8>> {
        (0..mask.size).map(|q| mask.row(q).iter().map(|&b| b as u8).collect()).collect()
    }

    #[test]
    fn sat_mask_minimal() {
        let m = build_mask(MaskMode::Sat, 1, 1, &[false, false]);
        assert_eq!(rows(&m), vec![vec![1, 1, 1, 0], vec![1, 1, 1, 0], vec![1, 1, 1, 0], vec![1, 1, 1, 1]]);
    }

    #[test]
    fn mask_b_semantics_row_sees_only_semantics() {
        let m = build_mask(MaskMode::MaskB, 1, 1, &[false, false]);
        assert_eq!(rows(&m)[3], vec![0, 0, 0, 1]);
        assert_eq!(rows(&m)[0], vec![1, 1, 1, 0]);
    }

    #[test]
    fn inference_mask_is_all_true_without_padding() {
        let m = build_mask(MaskMode::Inference, 2, 3, &[false; 3]);
        assert_eq!(m.size, 6);
        assert!(m.allow.iter().all(|&b| b));
        assert!(m.layout.semantics.is_none());
    }

    #[test]
    fn padding_columns_are_closed_for_every_row() {
        let pad = [false, false, true, true];
        for mode in [MaskMode::Sat, MaskMode::MaskA, MaskMode::MaskB, MaskMode::Inference, MaskMode::Full] {
            let m = build_mask(mode, 3, 2, &pad);
            for q in 0..m.size {
                assert!(!m.allowed(q, 2) && !m.allowed(q, 3));
                assert!(m.row(q).iter().any(|&b| b), "{mode:?} row {q} closed");
            }
        }
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0f64, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0f32; 4]), 0);
    }
}
