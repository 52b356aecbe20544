//! The full grounding network: embeddings, fusion stack and heads over one parameter store.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::embeddings::{
    embed_proposal, embed_semantics, embed_text, encode_pointset, normalize_segment, text_pad_mask, EmbeddingParams,
    Linear, ModelConfig, UseFlags,
};
use crate::error::{Result, SatError};
use crate::fusion::{build_mask, classify, fuse, grounding_scores, Dropout, FusedFeatures, FusionParams, HeadParams, MaskMode};
use crate::params::ParamStore;
use crate::projection2d::{Semantics2D, GEO_DIM};
use crate::real::Real;
use crate::rng::stream;
use crate::scene_synth::ProposalRecord;
use crate::tensor::Mat;

#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub emb: EmbeddingParams,
    pub fusion: FusionParams,
    pub heads: HeadParams,
    /// Projection of `[O_m, I_m]` back to `d`, used by the input-aligned oracle.
    pub align: Linear,
}

/// 2D inputs for every proposal of a sample, one row per proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticsInput<T> {
    pub roi: Mat<T>,
    pub cls: Mat<T>,
    pub geo: Mat<T>,
}

impl<T: Real> SemanticsInput<T> {
    /// Rows from the chosen records; `None` entries become zero rows.
    pub fn from_records(records: &[Option<&Semantics2D>], roi_dim: usize, num_classes: usize) -> Self {
        let m = records.len();
        let mut roi = Mat::zeros(m, roi_dim);
        let mut cls = Mat::zeros(m, num_classes);
        let mut geo = Mat::zeros(m, GEO_DIM);
        for (k, r) in records.iter().enumerate() {
            if let Some(r) = r {
                for (o, &v) in roi.row_mut(k).iter_mut().zip(&r.x_roi) {
                    *o = T::c(v);
                }
                for (o, &v) in cls.row_mut(k).iter_mut().zip(&r.x_cls) {
                    *o = T::c(v);
                }
                for (o, &v) in geo.row_mut(k).iter_mut().zip(&r.x_geo) {
                    *o = T::c(v);
                }
            }
        }
        Self { roi, cls, geo }
    }
}

/// Network inputs for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleInput<T> {
    pub tokens: Vec<usize>,
    /// Normalized segments stacked row-wise (`ΣP×6`).
    pub points: Mat<T>,
    /// `(start, len)` of each proposal inside `points`.
    pub segments: Vec<(usize, usize)>,
    pub offsets: Mat<T>,
    pub semantics: Option<SemanticsInput<T>>,
}

impl<T: Real> SampleInput<T> {
    pub fn num_proposals(&self) -> usize {
        self.segments.len()
    }

    /// Normalizes and stacks proposal segments around `scene_centroid`.
    pub fn from_proposals(tokens: &[usize], proposals: &[ProposalRecord], scene_centroid: [f64; 3]) -> Result<Self> {
        let mut pts = Vec::new();
        let mut segments = Vec::with_capacity(proposals.len());
        let mut offsets = Mat::zeros(proposals.len(), 4);
        for (k, p) in proposals.iter().enumerate() {
            let (norm, off) = normalize_segment(&p.segment, scene_centroid)?;
            segments.push((pts.len() / 6, norm.len()));
            for q in norm {
                pts.extend(q.iter().map(|&v| T::c(v)));
            }
            for (o, &v) in offsets.row_mut(k).iter_mut().zip(&off) {
                *o = T::c(v);
            }
        }
        let n = pts.len() / 6;
        Ok(Self { tokens: tokens.to_vec(), points: Mat::from_vec(n, 6, pts), segments, offsets, semantics: None })
    }
}

/// How 2D inputs enter the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arrangement {
    /// Tokens `[Q; O]` or `[Q; O; I]` under the given mask mode.
    Tokens(MaskMode),
    /// `O'_m = A [O_m, I_m]`, tokens `[Q; O']` with every position visible.
    Aligned,
}

impl Arrangement {
    pub fn uses_semantics(self) -> bool {
        match self {
            Arrangement::Tokens(m) => m.has_semantics(),
            Arrangement::Aligned => true,
        }
    }
}

/// Handles to everything one forward pass produced.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Text encoder output `(K+1)×d`.
    pub q: Var,
    /// Proposal embeddings before fusion, `M×d`.
    pub o: Var,
    pub i: Option<Var>,
    /// Raw 2D input leaves (roi, cls, geo).
    pub i_inputs: Option<[Var; 3]>,
    pub fused: FusedFeatures,
    /// `M×1`.
    pub s_o: Var,
    pub s_i: Option<Var>,
    /// `1×C` from the sentinel feature.
    pub cls_q: Var,
    /// `M×C` from the proposal embeddings.
    pub cls_o: Var,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, &[0x1417]);
        let mut store = ParamStore::default();
        let emb = EmbeddingParams::new(&mut store, &config, &mut rng);
        let fusion = FusionParams::new(&mut store, &config, &mut rng);
        let heads = HeadParams::new(&mut store, &config, &mut rng);
        let align = Linear::new(&mut store, "align", 2 * config.d, config.d, false, &mut rng);
        Ok(Self { config, store, emb, fusion, heads, align })
    }

    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        input: &SampleInput<T>,
        arrangement: Arrangement,
        flags: UseFlags,
        dropout: &mut Dropout<'_>,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let m = input.num_proposals();
        if m == 0 {
            return Err(SatError::Argument("sample has no proposals".into()));
        }
        let q = embed_text(tape, &self.emb, cfg, &input.tokens, dropout)?;
        let pts = tape.leaf(input.points.clone());
        let x_pc = encode_pointset(tape, &self.emb, pts, &input.segments);
        let off = tape.leaf(input.offsets.clone());
        let o = embed_proposal(tape, &self.emb, x_pc, off)?;

        let (i, i_inputs) = if arrangement.uses_semantics() {
            let sem = input
                .semantics
                .as_ref()
                .ok_or_else(|| SatError::Argument("this arrangement needs 2D semantics inputs".into()))?;
            let roi = tape.leaf(sem.roi.clone());
            let cls = tape.leaf(sem.cls.clone());
            let geo = tape.leaf(sem.geo.clone());
            let i = embed_semantics(tape, &self.emb, roi, cls, geo, flags)?;
            (Some(i), Some([roi, cls, geo]))
        } else {
            (None, None)
        };

        let k = input.tokens.len();
        let pad = text_pad_mask(&input.tokens);
        let fused = match arrangement {
            Arrangement::Tokens(mode) => {
                let mask = build_mask(mode, k, m, &pad);
                fuse(tape, &self.fusion, cfg.heads, q, o, i, &mask, dropout)?
            }
            Arrangement::Aligned => {
                let cat = tape.concat_cols(o, i.expect("semantics embedded"));
                let o2 = self.align.apply(tape, cat);
                let mut mask = build_mask(MaskMode::Inference, k, m, &pad);
                mask.mode = MaskMode::Full;
                fuse(tape, &self.fusion, cfg.heads, q, o2, None, &mask, dropout)?
            }
        };
        let s_o = grounding_scores(tape, &self.heads.ground, fused.f_o);
        let s_i = fused.f_i.map(|f| grounding_scores(tape, &self.heads.ground_2d, f));
        let q0 = tape.slice_rows(q, 0, 1);
        let cls_q = classify(tape, &self.heads.cls_query, q0);
        let cls_o = classify(tape, &self.heads.cls_proposal, o);
        Ok(Forward { q, o, i, i_inputs, fused, s_o, s_i, cls_q, cls_o })
    }

    /// Grounding scores without building gradients beyond this call.
    pub fn scores(&self, input: &SampleInput<T>, arrangement: Arrangement, flags: UseFlags) -> Result<Vec<T>> {
        let mut tape = Tape::new(&self.store);
        let f = self.forward(&mut tape, input, arrangement, flags, &mut Dropout::off())?;
        Ok(tape.value(f.s_o).data().to_vec())
    }

    /// Converts all parameters to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut store = ParamStore::default();
        for (name, m) in self.store.iter() {
            store.add(name, m.cast());
        }
        Model {
            config: self.config.clone(),
            store,
            emb: self.emb.clone(),
            fusion: self.fusion.clone(),
            heads: self.heads,
            align: self.align,
        }
    }
}

/// Random-input helper for tests and numerical checks.
pub fn random_sample<T: Real, R: Rng>(cfg: &ModelConfig, k: usize, m: usize, points_per: usize, rng: &mut R) -> SampleInput<T> {
    let tokens: Vec<usize> = (0..k).map(|_| rng.random_range(2..cfg.vocab_size)).collect();
    let n = m * points_per;
    let pts: Vec<T> = (0..n * 6).map(|_| T::c(rng.random_range(-1.0..1.0))).collect();
    let segments = (0..m).map(|j| (j * points_per, points_per)).collect();
    let offsets = Mat::from_vec(m, 4, (0..m * 4).map(|_| T::c(rng.random_range(-2.0..2.0))).collect());
    let mut roi = Mat::zeros(m, cfg.roi_dim);
    for v in roi.data_mut() {
        *v = T::c(rng.random_range(0.0..1.0));
    }
    let mut cls = Mat::zeros(m, cfg.num_classes);
    for j in 0..m {
        cls.set(j, rng.random_range(0..cfg.num_classes), T::one());
    }
    let geo = Mat::from_vec(m, GEO_DIM, (0..m * GEO_DIM).map(|_| T::c(rng.random_range(-1.0..1.0))).collect());
    SampleInput { tokens, points: Mat::from_vec(n, 6, pts), segments, offsets, semantics: Some(SemanticsInput { roi, cls, geo }) }
}
