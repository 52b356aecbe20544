//! Batching, per-epoch frame resampling, the optimizer loop and mode switching.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::embeddings::{sample_frame, ModelConfig, UseFlags};
use crate::error::{Result, SatError};
use crate::fusion::{argmax, Dropout, MaskMode};
use crate::geometry::Box3D;
use crate::losses::{cls_term, cor_term, total_loss, vg_term, LossBreakdown, LossConfig, LossParts};
use crate::model::{Arrangement, Forward, Model, SampleInput, SemanticsInput};
use crate::params::Adam;
use crate::projection2d::{iou3d, match_proposals, perturb_proposals, DetectorNoiseConfig, ProposalMatch, Semantics2D};
use crate::real::Real;
use crate::rng::{derive_seed, key_of, stream};
use crate::scene_synth::{sha256_json, Dataset, ProposalRecord};
use crate::tensor::Mat;

const SHUFFLE: u64 = 0x5348;
const FRAMES: u64 = 0x4652;
const DROPOUT: u64 = 0x4452;
const INIT: u64 = 0x494e;
const DETECTOR: u64 = 0x4445;
/// Frame-sampling epoch used when 2D inputs are needed at inference.
pub const EVAL_EPOCH: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Sat,
    NonSat,
    MaskA,
    MaskB,
    InputAligned,
    InputUnaligned,
}

impl TrainMode {
    pub const ALL: [TrainMode; 6] =
        [TrainMode::Sat, TrainMode::NonSat, TrainMode::MaskA, TrainMode::MaskB, TrainMode::InputAligned, TrainMode::InputUnaligned];

    pub fn label(self) -> &'static str {
        match self {
            TrainMode::Sat => "sat",
            TrainMode::NonSat => "non_sat",
            TrainMode::MaskA => "mask_a",
            TrainMode::MaskB => "mask_b",
            TrainMode::InputAligned => "input_aligned",
            TrainMode::InputUnaligned => "input_unaligned",
        }
    }

    pub fn train_arrangement(self) -> Arrangement {
        match self {
            TrainMode::Sat => Arrangement::Tokens(MaskMode::Sat),
            TrainMode::NonSat => Arrangement::Tokens(MaskMode::Inference),
            TrainMode::MaskA => Arrangement::Tokens(MaskMode::MaskA),
            TrainMode::MaskB => Arrangement::Tokens(MaskMode::MaskB),
            TrainMode::InputAligned => Arrangement::Aligned,
            TrainMode::InputUnaligned => Arrangement::Tokens(MaskMode::Full),
        }
    }

    /// The oracle modes keep their 2D inputs at inference; all others drop them.
    pub fn infer_arrangement(self) -> Arrangement {
        match self {
            TrainMode::InputAligned => Arrangement::Aligned,
            TrainMode::InputUnaligned => Arrangement::Tokens(MaskMode::Full),
            _ => Arrangement::Tokens(MaskMode::Inference),
        }
    }

    /// Whether the auxiliary 2D losses apply in this mode.
    pub fn auxiliary_losses(self) -> bool {
        !matches!(self, TrainMode::NonSat | TrainMode::InputAligned)
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for TrainMode {
    type Err = SatError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        TrainMode::ALL
            .into_iter()
            .find(|m| m.label() == norm)
            .ok_or_else(|| SatError::Config(format!("unknown mode {s:?}; expected one of sat, non_sat, mask_a, mask_b, input_aligned, input_unaligned")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalSource {
    GroundTruth,
    Detector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub seed: u64,
    pub proposal_source: ProposalSource,
    pub detector: DetectorNoiseConfig,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub use_flags: UseFlags,
    /// Steps between checks that the 3D grounding loss has no gradient into 2D inputs (0 = never).
    pub leakage_check_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Sat,
            epochs: 30,
            batch_size: 16,
            lr0: 1e-3,
            decay_factor: 0.65,
            decay_every: 10,
            seed: 0,
            proposal_source: ProposalSource::GroundTruth,
            detector: DetectorNoiseConfig::default(),
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            use_flags: UseFlags::default(),
            leakage_check_every: 50,
        }
    }
}

impl TrainConfig {
    pub const PAPER_EPOCHS: usize = 100;

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.decay_every == 0 {
            return Err(SatError::Config("batch_size and decay_every must be >= 1".into()));
        }
        if !(self.lr0 > 0.0) || !(self.decay_factor > 0.0) {
            return Err(SatError::Config("lr0 and decay_factor must be > 0".into()));
        }
        if self.mode.train_arrangement().uses_semantics() && !self.use_flags.any() {
            return Err(SatError::Config(format!("mode {} needs at least one of use_flags roi/cls/geo", self.mode)));
        }
        self.loss.validate()?;
        self.model.validate()
    }

    /// Loss switches after applying the mode's restrictions.
    pub fn effective_loss(&self) -> LossConfig {
        let mut l = self.loss.clone();
        if !self.mode.auxiliary_losses() {
            l.enable_vg_i = false;
            l.enable_cor = false;
        }
        l
    }

    /// Model config with dataset-dependent sizes filled in.
    pub fn resolved_model(&self, ds: &Dataset) -> ModelConfig {
        let mut m = self.model.clone();
        m.num_classes = ds.num_classes();
        m.vocab_size = ds.vocab_size();
        m.kmax = m.kmax.max(ds.max_query_len());
        m
    }

    pub fn hash(&self, ds: &Dataset) -> String {
        let mut c = self.clone();
        c.model = self.resolved_model(ds);
        sha256_json(&(c, &ds.manifest.config_hash))
    }
}

/// `lr0 · decay_factor^⌊epoch / decay_every⌋`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

/// Network-facing view of one scene's proposals.
#[derive(Debug, Clone)]
pub struct SceneInputs<T> {
    pub proposals: Vec<ProposalRecord>,
    pub base: SampleInput<T>,
    /// Pairing of each proposal with a ground-truth object.
    pub matches: Vec<ProposalMatch>,
}

/// Per-scene inputs prepared once per run.
#[derive(Debug, Clone)]
pub struct Prepared<T> {
    pub source: ProposalSource,
    pub scenes: Vec<SceneInputs<T>>,
}

/// Pairs detected proposals with ground truth by IoU.
pub fn detector_mode_pairing(gt: &[ProposalRecord], detected: &[ProposalRecord]) -> Result<Vec<ProposalMatch>> {
    if detected.is_empty() {
        return Ok(Vec::new());
    }
    let d: Vec<Box3D> = detected.iter().map(|p| p.box3d).collect();
    let g: Vec<Box3D> = gt.iter().map(|p| p.box3d).collect();
    match_proposals(&d, &g, 0.5)
}

/// Detected proposal with the largest IoU against `gt_box`; `None` if nothing overlaps.
pub fn positive_index(detected: &[ProposalRecord], gt_box: &Box3D) -> Result<Option<(usize, f64)>> {
    let mut best: Option<(usize, f64)> = None;
    for (k, p) in detected.iter().enumerate() {
        let v = iou3d(&p.box3d, gt_box)?;
        if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    Ok(best)
}

impl<T: Real> Prepared<T> {
    pub fn new(ds: &Dataset, source: ProposalSource, noise: &DetectorNoiseConfig) -> Result<Self> {
        let mut scenes = Vec::with_capacity(ds.scenes.len());
        for scene in &ds.scenes {
            let (proposals, matches) = match source {
                ProposalSource::GroundTruth => {
                    let m = scene
                        .proposals
                        .iter()
                        .enumerate()
                        .map(|(k, _)| ProposalMatch { detected_index: k, gt_index: Some(k), iou: 1.0, correspondence_eligible: true })
                        .collect();
                    (scene.proposals.clone(), m)
                }
                ProposalSource::Detector => {
                    let out = perturb_proposals(scene, noise, derive_seed(ds.manifest.seed, &[DETECTOR]));
                    let m = detector_mode_pairing(&scene.proposals, &out.proposals)?;
                    (out.proposals, m)
                }
            };
            let base = SampleInput::from_proposals(&[], &proposals, scene.scene_centroid)?;
            scenes.push(SceneInputs { proposals, base, matches });
        }
        Ok(Self { source, scenes })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exclusion {
    MissingSemantics,
    NoOverlap,
    NoProposals,
}

#[derive(Debug, Clone)]
pub struct BatchItem<T> {
    pub query_index: usize,
    pub input: SampleInput<T>,
    pub positive: usize,
    pub eligible: Vec<bool>,
    /// Whether the 2D grounding loss applies (its positive has a valid 2D pairing).
    pub vg_i_ok: bool,
    pub labels: Vec<usize>,
    pub target_class: usize,
    /// Frame chosen for each proposal, if any.
    pub frames: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub items: Vec<BatchItem<T>>,
    pub excluded: Vec<(usize, Exclusion)>,
    /// Proposals left out of the correspondence loss.
    pub ineligible: usize,
}

fn frame_choice<'a>(ds: &'a Dataset, scene: usize, gt: usize, seed: u64, epoch: u64) -> Option<&'a Semantics2D> {
    let recs = &ds.semantics[scene][gt];
    let mut rng = stream(seed, &[FRAMES, epoch, key_of(&ds.scenes[scene].scene_id), gt as u64]);
    sample_frame(recs, &mut rng)
}

/// Builds one sample; `Err(exclusion)` when it cannot be used.
pub fn assemble_item<T: Real>(
    prep: &Prepared<T>,
    ds: &Dataset,
    query_index: usize,
    needs_2d: bool,
    seed: u64,
    epoch: u64,
) -> Result<std::result::Result<BatchItem<T>, Exclusion>> {
    let q = &ds.queries[query_index];
    let si = ds.scene_position(&q.scene_id)?;
    let sc = &prep.scenes[si];
    if sc.proposals.is_empty() {
        return Ok(Err(Exclusion::NoProposals));
    }
    let positive = match prep.source {
        ProposalSource::GroundTruth => q.target_proposal_index,
        ProposalSource::Detector => {
            let gt_box = ds.scenes[si].proposals[q.target_proposal_index].box3d;
            match positive_index(&sc.proposals, &gt_box)? {
                Some((k, _)) => k,
                None => return Ok(Err(Exclusion::NoOverlap)),
            }
        }
    };
    let chosen: Vec<Option<&Semantics2D>> = sc
        .matches
        .iter()
        .map(|m| m.gt_index.and_then(|g| frame_choice(ds, si, g, seed, epoch)))
        .collect();
    if needs_2d && prep.source == ProposalSource::GroundTruth && chosen.iter().any(Option::is_none) {
        return Ok(Err(Exclusion::MissingSemantics));
    }
    let eligible: Vec<bool> = sc.matches.iter().zip(&chosen).map(|(m, c)| m.correspondence_eligible && c.is_some()).collect();
    let mut input = sc.base.clone();
    input.tokens = q.tokens.clone();
    if needs_2d {
        let cfg = &ds.manifest.config;
        input.semantics = Some(SemanticsInput::from_records(&chosen, crate::projection2d::ROI_DIM, cfg.classes.len()));
    }
    Ok(Ok(BatchItem {
        query_index,
        input,
        positive,
        vg_i_ok: eligible[positive],
        eligible,
        labels: sc.proposals.iter().map(|p| p.class_id).collect(),
        target_class: q.target_class_id,
        frames: chosen.iter().map(|c| c.map(|r| r.frame_id)).collect(),
    }))
}

/// Gathers the samples for `indices` as the training graph of `mode` needs them.
pub fn assemble_batch<T: Real>(
    prep: &Prepared<T>,
    ds: &Dataset,
    indices: &[usize],
    mode: TrainMode,
    seed: u64,
    epoch: u64,
) -> Result<Batch<T>> {
    let needs_2d = mode.train_arrangement().uses_semantics();
    let mut batch = Batch { items: Vec::with_capacity(indices.len()), excluded: Vec::new(), ineligible: 0 };
    for &qi in indices {
        match assemble_item(prep, ds, qi, needs_2d, seed, epoch)? {
            Ok(item) => {
                if needs_2d {
                    batch.ineligible += item.eligible.iter().filter(|&&e| !e).count();
                }
                batch.items.push(item);
            }
            Err(why) => {
                log::warn!("excluding query {} from the batch: {why:?}", ds.queries[qi].query_id);
                batch.excluded.push((qi, why));
            }
        }
    }
    Ok(batch)
}

/// Loss graph of one sample.
pub struct SampleLoss {
    pub root: Var,
    pub l_vg_o: Var,
    pub breakdown: LossBreakdown,
    pub forward: Forward,
}

pub fn sample_loss<'p, T: Real>(
    model: &'p Model<T>,
    tape: &mut Tape<'p, T>,
    item: &BatchItem<T>,
    arrangement: Arrangement,
    loss: &LossConfig,
    flags: UseFlags,
    dropout: &mut Dropout<'_>,
) -> Result<SampleLoss> {
    let fwd = model.forward(tape, &item.input, arrangement, flags, dropout)?;
    let l_vg_o = vg_term(tape, fwd.s_o, item.positive)?;
    let mut terms = vec![(l_vg_o, T::one())];
    let mut parts = LossParts { l_vg_o: tape.scalar_value(l_vg_o).as_f64(), ..LossParts::default() };
    if loss.enable_vg_i && item.vg_i_ok {
        if let Some(s_i) = fwd.s_i {
            let l = vg_term(tape, s_i, item.positive)?;
            parts.l_vg_i = tape.scalar_value(l).as_f64();
            terms.push((l, T::one()));
        }
    }
    let mut hard_negatives = Vec::new();
    if loss.enable_cor {
        if let Some(f_i) = fwd.fused.f_i {
            let (l, triples) = cor_term(tape, fwd.fused.f_o, f_i, &item.eligible, T::c(loss.alpha));
            parts.l_cor = tape.scalar_value(l).as_f64();
            hard_negatives = triples;
            terms.push((l, T::c(loss.w_cor)));
        }
    }
    if loss.enable_cls {
        let lq = cls_term(tape, fwd.cls_q, &[item.target_class])?;
        let lo = cls_term(tape, fwd.cls_o, &item.labels)?;
        parts.l_cls_q = tape.scalar_value(lq).as_f64();
        parts.l_cls_o = tape.scalar_value(lo).as_f64();
        terms.push((lq, T::c(loss.w_cls)));
        terms.push((lo, T::c(loss.w_cls)));
    }
    let root = tape.weighted_sum(&terms);
    let mut breakdown = total_loss(&parts, loss);
    breakdown.hard_negatives = hard_negatives;
    Ok(SampleLoss { root, l_vg_o, breakdown, forward: fwd })
}

/// True when no gradient of `l_vg_o` reaches the 2D inputs or their embeddings.
pub fn semantics_gradient_is_zero<T: Real>(tape: &Tape<T>, sl: &SampleLoss) -> bool {
    let grads = tape.backward(sl.l_vg_o);
    let mut vars: Vec<Var> = sl.forward.i_inputs.map(|v| v.to_vec()).unwrap_or_default();
    vars.extend(sl.forward.i);
    vars.iter().all(|&v| grads.get(v).is_none_or(|g| g.data().iter().all(|x| *x == T::zero())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    /// Batch means of the loss terms; `hard_negatives` are those of the batch's first sample.
    pub loss: LossBreakdown,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub val_accuracy: f64,
    pub excluded_samples: usize,
    pub ineligible_proposals: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub config_hash: String,
    pub mode: TrainMode,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine<'a> {
    Step(&'a StepLog),
    Epoch(&'a EpochLog),
    Summary { seed: u64, config_hash: &'a str, mode: TrainMode, best_epoch: usize, best_val_accuracy: f64, wall_clock_seconds: f64 },
}

impl TrainLog {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let mut line = |l: LogLine<'_>| {
            serde_json::to_writer(&mut out, &l).expect("serializable");
            out.push(b'\n');
        };
        let mut steps = self.steps.iter().peekable();
        for e in &self.epochs {
            while let Some(s) = steps.next_if(|s| s.epoch <= e.epoch) {
                line(LogLine::Step(s));
            }
            line(LogLine::Epoch(e));
        }
        for s in steps {
            line(LogLine::Step(s));
        }
        line(LogLine::Summary {
            seed: self.seed,
            config_hash: &self.config_hash,
            mode: self.mode,
            best_epoch: self.best_epoch,
            best_val_accuracy: self.best_val_accuracy,
            wall_clock_seconds: self.wall_clock_seconds,
        });
        let mut f = fs::File::create(path).map_err(|e| SatError::io(path, e))?;
        f.write_all(&out).map_err(|e| SatError::io(path, e))
    }
}

pub struct TrainOutput<T: Real> {
    pub final_model: Model<T>,
    pub best_model: Model<T>,
    pub log: TrainLog,
    pub config_hash: String,
    pub prepared: Prepared<T>,
}

/// One prediction on one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub query_index: usize,
    pub predicted: usize,
    /// Index the prediction is scored against (`None` when no proposal overlaps the target).
    pub positive: Option<usize>,
    pub pred_box: Box3D,
    pub gt_box: Box3D,
}

impl Prediction {
    pub fn correct(&self) -> bool {
        self.positive == Some(self.predicted)
    }
}

/// Predictions of `model` under `arrangement` for the given queries.
pub fn predict<T: Real>(
    model: &Model<T>,
    ds: &Dataset,
    prep: &Prepared<T>,
    arrangement: Arrangement,
    flags: UseFlags,
    seed: u64,
    indices: &[usize],
) -> Result<Vec<Prediction>> {
    let needs_2d = arrangement.uses_semantics();
    let mut out = Vec::with_capacity(indices.len());
    for &qi in indices {
        let q = &ds.queries[qi];
        let si = ds.scene_position(&q.scene_id)?;
        let sc = &prep.scenes[si];
        let gt_box = ds.scenes[si].proposals[q.target_proposal_index].box3d;
        if sc.proposals.is_empty() {
            out.push(Prediction { query_index: qi, predicted: 0, positive: None, pred_box: gt_box, gt_box });
            continue;
        }
        let positive = match prep.source {
            ProposalSource::GroundTruth => Some(q.target_proposal_index),
            ProposalSource::Detector => positive_index(&sc.proposals, &gt_box)?.map(|(k, _)| k),
        };
        let mut input = sc.base.clone();
        input.tokens = q.tokens.clone();
        if needs_2d {
            let chosen: Vec<Option<&Semantics2D>> =
                sc.matches.iter().map(|m| m.gt_index.and_then(|g| frame_choice(ds, si, g, seed, EVAL_EPOCH))).collect();
            input.semantics = Some(SemanticsInput::from_records(&chosen, crate::projection2d::ROI_DIM, ds.num_classes()));
        }
        let scores = model.scores(&input, arrangement, flags)?;
        let predicted = argmax(&scores);
        out.push(Prediction { query_index: qi, predicted, positive, pred_box: sc.proposals[predicted].box3d, gt_box });
    }
    Ok(out)
}

pub fn accuracy_of(preds: &[Prediction]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().filter(|p| p.correct()).count() as f64 / preds.len() as f64
}

fn grads_into<T: Real>(tape: &Tape<T>, model: &Model<T>, root: Var, acc: &mut [Mat<T>]) {
    let grads = tape.backward(root);
    for id in model.store.ids() {
        if let Some(v) = tape.param_var(id) {
            if let Some(g) = grads.get(v) {
                acc[id.index()].add_assign(g);
            }
        }
    }
}

fn write_dump(out_dir: Option<&Path>, err: &SatError, breakdown: &LossBreakdown) {
    if let Some(dir) = out_dir {
        let path = dir.join("nonfinite_dump.json");
        let body = serde_json::json!({ "error": err.to_string(), "loss": breakdown });
        if let Err(e) = fs::write(&path, body.to_string()) {
            log::error!("could not write {}: {e}", path.display());
        }
    }
}

/// Trains a model. Writes checkpoints and the log when `out_dir` is given.
pub fn train<T: Real>(ds: &Dataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutput<T>> {
    cfg.validate()?;
    if ds.train_queries().is_empty() {
        return Err(SatError::Config("dataset has no training queries".into()));
    }
    let start = Instant::now();
    let model_cfg = cfg.resolved_model(ds);
    let config_hash = cfg.hash(ds);
    let prep = Prepared::<T>::new(ds, cfg.proposal_source, &cfg.detector)?;
    let mut model = Model::<T>::new(model_cfg, derive_seed(cfg.seed, &[INIT]))?;
    let mut best = model.clone();
    let mut adam = Adam::new(&model.store);
    let loss_cfg = cfg.effective_loss();
    let arrangement = cfg.mode.train_arrangement();
    let infer = cfg.mode.infer_arrangement();
    let rate = model.config.effective_dropout();
    let check_leak = matches!(cfg.mode, TrainMode::Sat | TrainMode::MaskB) && cfg.leakage_check_every > 0;

    let mut log = TrainLog {
        seed: cfg.seed,
        config_hash: config_hash.clone(),
        mode: cfg.mode,
        steps: Vec::new(),
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_accuracy: f64::NEG_INFINITY,
        wall_clock_seconds: 0.0,
    };
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lr = lr_schedule(epoch, cfg);
        let mut order = ds.train_queries().to_vec();
        order.shuffle(&mut stream(cfg.seed, &[SHUFFLE, epoch as u64]));
        let (mut loss_sum, mut loss_n, mut excluded, mut ineligible) = (0.0, 0usize, 0usize, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = assemble_batch(&prep, ds, chunk, cfg.mode, cfg.seed, epoch as u64)?;
            excluded += batch.excluded.len();
            ineligible += batch.ineligible;
            if batch.items.is_empty() {
                continue;
            }
            let mut acc = model.store.zeros_like();
            let mut mean = LossBreakdown::default();
            for (n, item) in batch.items.iter().enumerate() {
                let mut drng = stream(cfg.seed, &[DROPOUT, step, n as u64]);
                let mut dropout = Dropout::new(rate, &mut drng);
                let mut tape = Tape::new(&model.store);
                let sl = sample_loss(&model, &mut tape, item, arrangement, &loss_cfg, cfg.use_flags, &mut dropout)?;
                let value = tape.scalar_value(sl.root);
                if !value.is_finite() {
                    let err = SatError::NonFinite {
                        step,
                        epoch,
                        batch: b,
                        queries: batch.items.iter().map(|i| ds.queries[i.query_index].query_id.clone()).collect(),
                    };
                    write_dump(out_dir, &err, &sl.breakdown);
                    return Err(err);
                }
                if check_leak && n == 0 && step % cfg.leakage_check_every as u64 == 0 && !semantics_gradient_is_zero(&tape, &sl) {
                    return Err(SatError::Run(format!("3D grounding loss has a gradient into 2D inputs at step {step}")));
                }
                grads_into(&tape, &model, sl.root, &mut acc);
                let bd = &sl.breakdown;
                mean.l_vg_o += bd.l_vg_o;
                mean.l_vg_i += bd.l_vg_i;
                mean.l_cor += bd.l_cor;
                mean.l_cls_q += bd.l_cls_q;
                mean.l_cls_o += bd.l_cls_o;
                mean.total += bd.total;
                if n == 0 {
                    mean.hard_negatives = bd.hard_negatives.clone();
                }
            }
            let n = batch.items.len();
            let inv = T::one() / T::c(n as f64);
            for g in &mut acc {
                *g = g.scale(inv);
            }
            adam.update(&mut model.store, &acc, lr);
            let nf = n as f64;
            for v in [&mut mean.l_vg_o, &mut mean.l_vg_i, &mut mean.l_cor, &mut mean.l_cls_q, &mut mean.l_cls_o, &mut mean.total] {
                *v /= nf;
            }
            loss_sum += mean.total * nf;
            loss_n += n;
            log.steps.push(StepLog { step, epoch, lr, loss: mean, samples: n });
            step += 1;
        }
        let preds = predict(&model, ds, &prep, infer, cfg.use_flags, cfg.seed, ds.val_queries())?;
        let val = accuracy_of(&preds);
        if val > log.best_val_accuracy {
            log.best_val_accuracy = val;
            log.best_epoch = epoch;
            best = model.clone();
        }
        let mean_loss = if loss_n > 0 { loss_sum / loss_n as f64 } else { 0.0 };
        log::info!(
            "[{} seed {}] epoch {epoch} lr {lr:.3e} loss {mean_loss:.4} val {:.2}% ({:.1}s)",
            cfg.mode,
            cfg.seed,
            100.0 * val,
            t0.elapsed().as_secs_f64()
        );
        if ineligible > 0 {
            log::info!("epoch {epoch}: {ineligible} proposals excluded from the correspondence loss");
        }
        log.epochs.push(EpochLog {
            epoch,
            lr,
            mean_loss,
            val_accuracy: val,
            excluded_samples: excluded,
            ineligible_proposals: ineligible,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    if log.epochs.is_empty() {
        log.best_val_accuracy = accuracy_of(&predict(&model, ds, &prep, infer, cfg.use_flags, cfg.seed, ds.val_queries())?);
    }
    log.wall_clock_seconds = start.elapsed().as_secs_f64();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| SatError::io(dir, e))?;
        checkpoint::save(&best, &config_hash, &dir.join("best.ckpt"))?;
        checkpoint::save(&model, &config_hash, &dir.join("final.ckpt"))?;
        log.write_jsonl(&dir.join("train_log.jsonl"))?;
    }
    Ok(TrainOutput { final_model: model, best_model: best, log, config_hash, prepared: prep })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(5, &cfg), 1e-3);
        assert!((lr_schedule(10, &cfg) - 6.5e-4).abs() < 1e-18);
        assert!((lr_schedule(25, &cfg) - 4.225e-4).abs() < 1e-18);
    }

    #[test]
    fn mode_parsing_round_trips() {
        for m in TrainMode::ALL {
            assert_eq!(m.label().parse::<TrainMode>().unwrap(), m);
        }
        assert!("mask_c".parse::<TrainMode>().is_err());
    }

    #[test]
    fn aligned_and_non_sat_drop_auxiliary_losses() {
        let cfg = TrainConfig { mode: TrainMode::InputAligned, ..TrainConfig::default() };
        let l = cfg.effective_loss();
        assert!(!l.enable_vg_i && !l.enable_cor && l.enable_cls);
        let cfg = TrainConfig { mode: TrainMode::InputUnaligned, ..TrainConfig::default() };
        assert!(cfg.effective_loss().enable_cor);
    }
}
