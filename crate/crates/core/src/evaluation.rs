//! Grounding accuracy, Acc@kIoU, linear probing of proposal features and facet breakdowns.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::embeddings::{Linear, UseFlags};
use crate::error::{Result, SatError};
use crate::fusion::Dropout;
use crate::geometry::Box3D;
use crate::model::{Arrangement, Model};
use crate::params::{Adam, ParamStore};
use crate::projection2d::iou3d;
use crate::real::Real;
use crate::rng::stream;
use crate::scene_synth::Dataset;
use crate::tensor::Mat;
use crate::training::{predict, Prediction, Prepared, TrainMode};

const PROBE: u64 = 0x5052;

/// Fraction of exact index matches.
pub fn accuracy(predictions: &[usize], targets: &[usize]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(SatError::Argument(format!("{} predictions for {} targets", predictions.len(), targets.len())));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    Ok(predictions.iter().zip(targets).filter(|(p, t)| p == t).count() as f64 / predictions.len() as f64)
}

/// Fraction of predicted boxes whose IoU with the ground truth is strictly above `k`.
pub fn acc_at_iou(pred_boxes: &[Box3D], gt_boxes: &[Box3D], k: f64) -> Result<f64> {
    if pred_boxes.len() != gt_boxes.len() {
        return Err(SatError::Argument(format!("{} predicted boxes for {} ground-truth boxes", pred_boxes.len(), gt_boxes.len())));
    }
    if pred_boxes.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (p, g) in pred_boxes.iter().zip(gt_boxes) {
        if iou3d(p, g)? > k {
            hits += 1;
        }
    }
    Ok(hits as f64 / pred_boxes.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd::default();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt(), n: values.len() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FacetFamily {
    DistractorCount,
    LengthBucket,
    SpatialKeyword,
    TargetClass,
}

impl FacetFamily {
    pub const ALL: [FacetFamily; 4] =
        [FacetFamily::DistractorCount, FacetFamily::LengthBucket, FacetFamily::SpatialKeyword, FacetFamily::TargetClass];

    pub fn name(self) -> &'static str {
        match self {
            FacetFamily::DistractorCount => "distractor_count",
            FacetFamily::LengthBucket => "length_bucket",
            FacetFamily::SpatialKeyword => "spatial_keyword",
            FacetFamily::TargetClass => "target_class",
        }
    }

    /// Facet value of one query. Distractor buckets count same-class objects (2..6, with 6 covering more).
    pub fn value_of(self, ds: &Dataset, query_index: usize) -> String {
        let q = &ds.queries[query_index];
        match self {
            FacetFamily::DistractorCount => (q.facets.distractor_count + 1).clamp(2, 6).to_string(),
            FacetFamily::LengthBucket => q.facets.length_bucket.label().to_string(),
            FacetFamily::SpatialKeyword => q.facets.spatial_keyword.label().to_string(),
            FacetFamily::TargetClass => {
                ds.manifest.config.classes.get(q.target_class_id).map_or_else(|| q.target_class_id.to_string(), |c| c.name.clone())
            }
        }
    }
}

impl FromStr for FacetFamily {
    type Err = SatError;

    fn from_str(s: &str) -> Result<Self> {
        FacetFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| SatError::Argument(format!("unknown facet {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetStat {
    pub value: String,
    pub count: usize,
    /// Share of all evaluated queries.
    pub fraction: f64,
    pub accuracy: f64,
}

/// Per-facet-value prevalence and accuracy.
pub fn breakdown(preds: &[Prediction], ds: &Dataset, facets: &[&str]) -> Result<BTreeMap<String, Vec<SubsetStat>>> {
    let mut out = BTreeMap::new();
    let n = preds.len().max(1) as f64;
    for name in facets {
        let fam: FacetFamily = name.parse()?;
        let mut groups: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for p in preds {
            let e = groups.entry(fam.value_of(ds, p.query_index)).or_default();
            e.0 += 1;
            e.1 += usize::from(p.correct());
        }
        let stats = groups
            .into_iter()
            .map(|(value, (count, hits))| SubsetStat { value, count, fraction: count as f64 / n, accuracy: hits as f64 / count as f64 })
            .collect();
        out.insert(fam.name().to_string(), stats);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: TrainMode,
    pub checkpoint_hash: String,
    pub n_samples: usize,
    pub overall_accuracy: MeanStd,
    pub per_seed_accuracy: Vec<f64>,
    /// Keyed by threshold ("0.25", "0.5"); detector mode only.
    pub acc_at_iou: BTreeMap<String, f64>,
    pub breakdowns: BTreeMap<String, Vec<SubsetStat>>,
    pub probe_top1: Option<f64>,
}

impl EvalReport {
    /// One row per facet value plus the headline rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("family,value,count,fraction,accuracy\n");
        let o = &self.overall_accuracy;
        s.push_str(&format!("overall,all,{},1,{:.6}\n", self.n_samples, o.mean));
        s.push_str(&format!("overall,std,{},1,{:.6}\n", self.n_samples, o.std));
        for (k, v) in &self.acc_at_iou {
            s.push_str(&format!("acc_at_iou,{k},{},1,{v:.6}\n", self.n_samples));
        }
        if let Some(p) = self.probe_top1 {
            s.push_str(&format!("probe,top1,,,{p:.6}\n"));
        }
        for (fam, stats) in &self.breakdowns {
            for st in stats {
                s.push_str(&format!("{fam},{},{},{:.6},{:.6}\n", st.value, st.count, st.fraction, st.accuracy));
            }
        }
        s
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| SatError::io(dir, e))?;
        let json = dir.join("report.json");
        fs::write(&json, serde_json::to_string_pretty(self).expect("serializable") + "\n").map_err(|e| SatError::io(&json, e))?;
        let csv = dir.join("report.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| SatError::io(&csv, e))
    }
}

/// Evaluates one model on the val split in its mode's inference arrangement.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    ds: &Dataset,
    prep: &Prepared<T>,
    mode: TrainMode,
    flags: UseFlags,
    seed: u64,
) -> Result<EvalReport> {
    let preds = predict(model, ds, prep, mode.infer_arrangement(), flags, seed, ds.val_queries())?;
    let acc = crate::training::accuracy_of(&preds);
    let mut acc_iou = BTreeMap::new();
    if prep.source == crate::training::ProposalSource::Detector {
        let pb: Vec<Box3D> = preds.iter().map(|p| p.pred_box).collect();
        let gb: Vec<Box3D> = preds.iter().map(|p| p.gt_box).collect();
        for k in [0.25, 0.5] {
            acc_iou.insert(k.to_string(), acc_at_iou(&pb, &gb, k)?);
        }
    }
    let names: Vec<&str> = FacetFamily::ALL.iter().map(|f| f.name()).collect();
    Ok(EvalReport {
        mode,
        checkpoint_hash: model.store.hash(),
        n_samples: preds.len(),
        overall_accuracy: mean_std(&[acc]),
        per_seed_accuracy: vec![acc],
        acc_at_iou: acc_iou,
        breakdowns: breakdown(&preds, ds, &names)?,
        probe_top1: None,
    })
}

/// Combines single-seed reports: overall accuracy becomes mean ± std, other fields are averaged.
pub fn merge_reports(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports.first().ok_or_else(|| SatError::Argument("no reports to merge".into()))?;
    let per_seed: Vec<f64> = reports.iter().flat_map(|r| r.per_seed_accuracy.iter().copied()).collect();
    let mut out = first.clone();
    out.overall_accuracy = mean_std(&per_seed);
    out.per_seed_accuracy = per_seed;
    out.checkpoint_hash = reports.iter().map(|r| r.checkpoint_hash.as_str()).collect::<Vec<_>>().join("+");
    let n = reports.len() as f64;
    for (k, v) in out.acc_at_iou.iter_mut() {
        *v = reports.iter().filter_map(|r| r.acc_at_iou.get(k)).sum::<f64>() / n;
    }
    for (fam, stats) in out.breakdowns.iter_mut() {
        for st in stats.iter_mut() {
            let accs: Vec<f64> = reports
                .iter()
                .filter_map(|r| r.breakdowns.get(fam)?.iter().find(|s| s.value == st.value).map(|s| s.accuracy))
                .collect();
            st.accuracy = mean_std(&accs).mean;
        }
    }
    let probes: Vec<f64> = reports.iter().filter_map(|r| r.probe_top1).collect();
    out.probe_top1 = (!probes.is_empty()).then(|| mean_std(&probes).mean);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 50, lr: 1e-3, batch_size: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub top1: f64,
    /// Accuracy of always predicting the most frequent val class.
    pub chance: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub backbone_hash: String,
}

/// Fused proposal features (no 2D inputs) and class labels for the given queries.
pub fn proposal_features<T: Real>(model: &Model<T>, ds: &Dataset, prep: &Prepared<T>, indices: &[usize]) -> Result<(Mat<T>, Vec<usize>)> {
    let d = model.config.d;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for &qi in indices {
        let q = &ds.queries[qi];
        let sc = &prep.scenes[ds.scene_position(&q.scene_id)?];
        if sc.proposals.is_empty() {
            continue;
        }
        let mut input = sc.base.clone();
        input.tokens = q.tokens.clone();
        let mut tape = Tape::new(&model.store);
        let f = model.forward(&mut tape, &input, Arrangement::Tokens(crate::fusion::MaskMode::Inference), UseFlags::default(), &mut Dropout::off())?;
        data.extend_from_slice(tape.value(f.fused.f_o).data());
        labels.extend(sc.proposals.iter().map(|p| p.class_id));
    }
    Ok((Mat::from_vec(labels.len(), d, data), labels))
}

/// Trains a linear classifier on frozen proposal features (train split) and reports val top-1.
pub fn linear_probe<T: Real>(model: &Model<T>, ds: &Dataset, prep: &Prepared<T>, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let before = model.store.hash();
    let c = ds.num_classes();
    let (xtr, ytr) = proposal_features(model, ds, prep, ds.train_queries())?;
    let (xva, yva) = proposal_features(model, ds, prep, ds.val_queries())?;
    if ytr.is_empty() || yva.is_empty() {
        return Err(SatError::NoValidQuery("probe needs proposals in both splits".into()));
    }
    let mut rng = stream(cfg.seed, &[PROBE]);
    let mut store = ParamStore::<T>::default();
    let head = Linear::new(&mut store, "probe", model.config.d, c, true, &mut rng);
    let mut adam = Adam::new(&store);
    let mut order: Vec<usize> = (0..ytr.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream(cfg.seed, &[PROBE, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let grads = {
                let mut tape = Tape::new(&store);
                let x = tape.leaf(xtr.select_rows(chunk));
                let logits = head.apply(&mut tape, x);
                let labels: Vec<usize> = chunk.iter().map(|&i| ytr[i]).collect();
                let loss = tape.softmax_xent(logits, &labels);
                let g = tape.backward(loss);
                store.ids().map(|id| tape.param_var(id).and_then(|v| g.get(v).cloned()).unwrap_or_else(|| {
                    let (r, cc) = store.get(id).shape();
                    Mat::zeros(r, cc)
                })).collect::<Vec<_>>()
            };
            adam.update(&mut store, &grads, cfg.lr);
        }
    }
    let mut tape = Tape::new(&store);
    let x = tape.leaf(xva);
    let logits = head.apply(&mut tape, x);
    let lv = tape.value(logits);
    let preds: Vec<usize> = (0..lv.rows()).map(|r| crate::fusion::argmax(lv.row(r))).collect();
    let top1 = accuracy(&preds, &yva)?;
    let mut counts = vec![0usize; c];
    for &y in &yva {
        counts[y] += 1;
    }
    let chance = *counts.iter().max().expect("classes") as f64 / yva.len() as f64;
    let after = model.store.hash();
    if before != after {
        return Err(SatError::Run("backbone parameters changed during probing".into()));
    }
    Ok(ProbeResult { top1, chance, n_train: ytr.len(), n_val: yva.len(), backbone_hash: after })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(matches!(accuracy(&[1], &[1, 2]), Err(SatError::Argument(_))));
    }

    #[test]
    fn acc_at_iou_is_strict() {
        let a = Box3D::new([0.0; 3], [1.0; 3]);
        let b = Box3D::new([0.5, 0.0, 0.0], [1.0; 3]);
        assert_eq!(acc_at_iou(&[a], &[a], 0.5).unwrap(), 1.0);
        assert_eq!(acc_at_iou(&[b], &[a], 0.25).unwrap(), 1.0);
        assert_eq!(acc_at_iou(&[b], &[a], 0.5).unwrap(), 0.0);
        // IoU exactly 0.5: two unit-height slabs overlapping by two thirds of their length.
        let c = Box3D::new([0.0; 3], [3.0, 1.0, 1.0]);
        let e = Box3D::new([1.0, 0.0, 0.0], [3.0, 1.0, 1.0]);
        assert_eq!(iou3d(&c, &e).unwrap(), 0.5);
        assert_eq!(acc_at_iou(&[c], &[e], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn mean_std_is_population() {
        let m = mean_std(&[1.0, 3.0]);
        assert_eq!((m.mean, m.std, m.n), (2.0, 1.0, 2));
    }

    #[test]
    fn unknown_facet() {
        assert!(matches!("colour".parse::<FacetFamily>(), Err(SatError::Argument(_))));
    }
}
