//! Modality embeddings: point-set encoder and proposal embedding, 2D semantics
//! embedding, and the text encoder; plus segment normalization and frame sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SatError};
use crate::fusion::{block_forward, BlockParams, Dropout};
use crate::geometry::Vec3;
use crate::params::{ParamId, ParamStore};
use crate::projection2d::{Semantics2D, GEO_DIM, ROI_DIM};
use crate::real::{Precision, Real};
use crate::tensor::Mat;

pub const LN_EPS: f64 = 1e-5;

/// Shifts xyz to zero mean and scales to unit max radius. Colors are untouched.
/// Returns the normalized segment and `(center - scene_centroid, r)`.
pub fn normalize_segment(segment: &[[f64; 6]], scene_centroid: Vec3) -> Result<(Vec<[f64; 6]>, [f64; 4])> {
    if segment.is_empty() {
        return Err(SatError::Argument("cannot normalize an empty segment".into()));
    }
    let n = segment.len() as f64;
    let mut c = [0.0; 3];
    for p in segment {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    for v in &mut c {
        *v /= n;
    }
    let r = segment
        .iter()
        .map(|p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt())
        .fold(0.0, f64::max);
    let r = if r > 0.0 { r } else { 1.0 };
    let out = segment
        .iter()
        .map(|p| [(p[0] - c[0]) / r, (p[1] - c[1]) / r, (p[2] - c[2]) / r, p[3], p[4], p[5]])
        .collect();
    Ok((out, [c[0] - scene_centroid[0], c[1] - scene_centroid[1], c[2] - scene_centroid[2], r]))
}

/// Uniform choice among a proposal's per-frame records.
pub fn sample_frame<'a>(records: &'a [Semantics2D], rng: &mut ChaCha8Rng) -> Option<&'a Semantics2D> {
    if records.is_empty() {
        None
    } else {
        Some(&records[rng.random_range(0..records.len())])
    }
}

/// Which 2D semantics components enter the embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UseFlags {
    pub roi: bool,
    pub cls: bool,
    pub geo: bool,
}

impl Default for UseFlags {
    fn default() -> Self {
        Self { roi: true, cls: true, geo: true }
    }
}

impl UseFlags {
    pub fn any(&self) -> bool {
        self.roi || self.cls || self.geo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub text_layers: usize,
    pub fusion_layers: usize,
    /// Hidden width of the per-point MLP.
    pub point_hidden: usize,
    /// Width of the pooled point feature.
    pub p: usize,
    pub ffn_mult: usize,
    pub kmax: usize,
    pub m_max: usize,
    pub num_classes: usize,
    pub roi_dim: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    /// Learned per-modality vectors added to fusion inputs.
    pub type_vectors: bool,
    pub precision: Precision,
}

impl ModelConfig {
    pub const PAPER_D: usize = 768;
    pub const PAPER_TEXT_LAYERS: usize = 3;
    pub const PAPER_FUSION_LAYERS: usize = 4;
    pub const PAPER_POINTS: usize = 1024;

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SatError::Config(m.to_string()));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad("model.d must be a positive multiple of model.heads");
        }
        if self.p == 0 || self.point_hidden == 0 || self.ffn_mult == 0 {
            return bad("model widths must be positive");
        }
        if self.num_classes < 2 || self.vocab_size < 3 || self.kmax < 2 {
            return bad("model.num_classes >= 2, vocab_size >= 3 and kmax >= 2 required");
        }
        if self.roi_dim != ROI_DIM {
            return bad("model.roi_dim must be 32");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("model.dropout must be in [0, 1)");
        }
        Ok(())
    }

    /// Dropout actually applied: none in double precision.
    pub fn effective_dropout(&self) -> f64 {
        match self.precision {
            Precision::Single => self.dropout,
            Precision::Double => 0.0,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            text_layers: 2,
            fusion_layers: 2,
            point_hidden: 32,
            p: 64,
            ffn_mult: 2,
            kmax: 16,
            m_max: 16,
            num_classes: 8,
            roi_dim: ROI_DIM,
            vocab_size: 64,
            dropout: 0.1,
            type_vectors: true,
            precision: Precision::Single,
        }
    }
}

/// LayerNorm scale and shift.
#[derive(Debug, Clone, Copy)]
pub struct LnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LnParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Mat::filled(1, d, T::one())),
            beta: store.add(format!("{name}.beta"), Mat::zeros(1, d)),
        }
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b, T::c(LN_EPS))
    }
}

/// Affine map `y = x W + b`, weights stored `[in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        let w = store.add_uniform(format!("{name}.w"), fan_in, fan_out, fan_in, rng);
        let b = bias.then(|| store.add(format!("{name}.b"), Mat::zeros(1, fan_out)));
        Self { w, b }
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let w = tape.param(self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingParams {
    pub pn1: Linear,
    pub pn2: Linear,
    pub pn_post: Linear,
    pub w1: Linear,
    pub w2: Linear,
    pub ln_pc: LnParams,
    pub ln_offset: LnParams,
    pub w3: Linear,
    pub w4: Linear,
    pub w5: Linear,
    pub ln_roi_cls: LnParams,
    pub ln_geo: LnParams,
    pub token_embedding: ParamId,
    pub positional_embedding: ParamId,
    pub text_blocks: Vec<BlockParams>,
    pub text_ln: LnParams,
}

impl EmbeddingParams {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, h) = (cfg.d, cfg.point_hidden);
        Self {
            pn1: Linear::new(store, "emb.pointnet.fc1", 6, h, true, rng),
            pn2: Linear::new(store, "emb.pointnet.fc2", h, h, true, rng),
            pn_post: Linear::new(store, "emb.pointnet.post", h, cfg.p, true, rng),
            w1: Linear::new(store, "emb.w1", cfg.p, d, false, rng),
            w2: Linear::new(store, "emb.w2", 4, d, false, rng),
            ln_pc: LnParams::new(store, "emb.ln_pc", d),
            ln_offset: LnParams::new(store, "emb.ln_offset", d),
            w3: Linear::new(store, "emb.w3", cfg.roi_dim, d, false, rng),
            w4: Linear::new(store, "emb.w4", cfg.num_classes, d, false, rng),
            w5: Linear::new(store, "emb.w5", GEO_DIM, d, false, rng),
            ln_roi_cls: LnParams::new(store, "emb.ln_roi_cls", d),
            ln_geo: LnParams::new(store, "emb.ln_geo", d),
            token_embedding: store.add_normal("emb.token", cfg.vocab_size, d, 0.02, rng),
            positional_embedding: store.add_normal("emb.position", cfg.kmax + 1, d, 0.02, rng),
            text_blocks: (0..cfg.text_layers).map(|l| BlockParams::new(store, &format!("text.{l}"), cfg, rng)).collect(),
            text_ln: LnParams::new(store, "text.ln_final", d),
        }
    }
}

/// Encodes concatenated normalized segments (`ΣP×6`, split by `segments`) into `M×p`.
pub fn encode_pointset<T: Real>(tape: &mut Tape<T>, params: &EmbeddingParams, points: Var, segments: &[(usize, usize)]) -> Var {
    let h = params.pn1.apply(tape, points);
    let h = tape.gelu(h);
    let h = params.pn2.apply(tape, h);
    let h = tape.gelu(h);
    let pooled = tape.segment_max(h, segments);
    params.pn_post.apply(tape, pooled)
}

/// `O = LN(W1 x_pc) + LN(W2 x_offset)`, row-wise over proposals.
pub fn embed_proposal<T: Real>(tape: &mut Tape<T>, params: &EmbeddingParams, x_pc: Var, x_offset: Var) -> Result<Var> {
    let (pc_rows, pc_cols) = tape.shape(x_pc);
    let (off_rows, off_cols) = tape.shape(x_offset);
    let p = tape.store().get(params.w1.w).rows();
    if pc_cols != p || off_cols != 4 || pc_rows != off_rows {
        return Err(SatError::Argument(format!(
            "embed_proposal expects M x {p} and M x 4 inputs, got {pc_rows}x{pc_cols} and {off_rows}x{off_cols}"
        )));
    }
    let a = params.w1.apply(tape, x_pc);
    let a = params.ln_pc.apply(tape, a);
    let b = params.w2.apply(tape, x_offset);
    let b = params.ln_offset.apply(tape, b);
    Ok(tape.add(a, b))
}

/// `I = LN(W3 x_roi + W4 x_cls) + LN(W5 x_geo)` with disabled components omitted.
pub fn embed_semantics<T: Real>(
    tape: &mut Tape<T>,
    params: &EmbeddingParams,
    x_roi: Var,
    x_cls: Var,
    x_geo: Var,
    flags: UseFlags,
) -> Result<Var> {
    if !flags.any() {
        return Err(SatError::Config("2D semantics enabled but roi, cls and geo are all disabled".into()));
    }
    let rows = tape.shape(x_roi).0;
    let want = [
        (tape.shape(x_roi), tape.store().get(params.w3.w).rows()),
        (tape.shape(x_cls), tape.store().get(params.w4.w).rows()),
        (tape.shape(x_geo), GEO_DIM),
    ];
    if want.iter().any(|&((r, c), w)| r != rows || c != w) {
        return Err(SatError::Argument("embed_semantics input shapes do not match parameters".into()));
    }
    let first = match (flags.roi, flags.cls) {
        (true, true) => {
            let a = params.w3.apply(tape, x_roi);
            let b = params.w4.apply(tape, x_cls);
            Some(tape.add(a, b))
        }
        (true, false) => Some(params.w3.apply(tape, x_roi)),
        (false, true) => Some(params.w4.apply(tape, x_cls)),
        (false, false) => None,
    }
    .map(|v| params.ln_roi_cls.apply(tape, v));
    let second = flags.geo.then(|| {
        let g = params.w5.apply(tape, x_geo);
        params.ln_geo.apply(tape, g)
    });
    Ok(match (first, second) {
        (Some(a), Some(b)) => tape.add(a, b),
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => unreachable!("flags checked above"),
    })
}

/// Sentinel followed by `tokens`; pad tokens are masked as attention keys.
pub fn text_pad_mask(tokens: &[usize]) -> Vec<bool> {
    std::iter::once(false).chain(tokens.iter().map(|&t| t == crate::scene_synth::Vocabulary::PAD)).collect()
}

/// Text encoder: `(K+1)×d`, row 0 is the sentinel feature `Q_0`.
pub fn embed_text<T: Real>(
    tape: &mut Tape<T>,
    params: &EmbeddingParams,
    cfg: &ModelConfig,
    tokens: &[usize],
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    if tokens.len() > cfg.kmax {
        return Err(SatError::Argument(format!("query has {} tokens, kmax is {}", tokens.len(), cfg.kmax)));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(SatError::Argument(format!("token {t} outside vocabulary of {}", cfg.vocab_size)));
    }
    let mut ids = Vec::with_capacity(tokens.len() + 1);
    ids.push(crate::scene_synth::Vocabulary::CLS);
    ids.extend_from_slice(tokens);
    let table = tape.param(params.token_embedding);
    let x = tape.gather_rows(table, &ids);
    let pos_table = tape.param(params.positional_embedding);
    let pos: Vec<usize> = (0..ids.len()).collect();
    let p = tape.gather_rows(pos_table, &pos);
    let mut x = tape.add(x, p);
    let pad = text_pad_mask(tokens);
    let s = ids.len();
    let allow: Vec<bool> = (0..s * s).map(|i| !pad[i % s]).collect();
    let allow = std::sync::Arc::new(allow);
    for b in &params.text_blocks {
        x = block_forward(tape, b, cfg.heads, x, allow.clone(), dropout);
    }
    Ok(params.text_ln.apply(tape, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn normalized_segment_has_unit_radius_and_scale_is_extracted() {
        let seg: Vec<[f64; 6]> = vec![[1.0, 2.0, 3.0, 0.1, 0.2, 0.3], [3.0, 2.0, 3.0, 0.4, 0.5, 0.6], [2.0, 4.0, 1.0, 0.0, 0.0, 0.0]];
        let (n1, off1) = normalize_segment(&seg, [0.5, 0.5, 0.5]).unwrap();
        let scaled: Vec<[f64; 6]> = seg.iter().map(|p| [3.0 * p[0], 3.0 * p[1], 3.0 * p[2], p[3], p[4], p[5]]).collect();
        let (n3, off3) = normalize_segment(&scaled, [1.5, 1.5, 1.5]).unwrap();
        for (a, b) in n1.iter().zip(&n3) {
            for k in 0..6 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
        assert!((off3[3] - 3.0 * off1[3]).abs() < 1e-12);
        assert_eq!(n1[0][3..], seg[0][3..]);
    }

    #[test]
    fn single_point_segment_gets_unit_radius() {
        let (n, off) = normalize_segment(&[[1.0, 1.0, 1.0, 0.5, 0.5, 0.5]], [0.0; 3]).unwrap();
        assert_eq!(off, [1.0, 1.0, 1.0, 1.0]);
        assert_eq!(n[0][..3], [0.0, 0.0, 0.0]);
        assert!(normalize_segment(&[], [0.0; 3]).is_err());
    }

    #[test]
    fn single_record_is_always_sampled() {
        let rec = Semantics2D {
            scene_id: "s".into(),
            proposal_id: 0,
            frame_id: 2,
            x_roi: vec![0.0; 32],
            x_cls: vec![1.0, 0.0],
            x_geo: vec![0.0; 10],
            visibility: 1.0,
        };
        let mut rng = stream(1, &[]);
        for _ in 0..10 {
            assert_eq!(sample_frame(std::slice::from_ref(&rec), &mut rng).unwrap().frame_id, 2);
        }
        assert!(sample_frame(&[], &mut rng).is_none());
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = ModelConfig { d: 30, heads: 4, ..ModelConfig::default() };
        assert!(matches!(cfg.validate(), Err(SatError::Config(_))));
        assert!(ModelConfig::default().validate().is_ok());
    }
}
