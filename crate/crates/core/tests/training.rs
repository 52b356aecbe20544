use std::sync::OnceLock;

use satlab::autodiff::Tape;
use satlab::checkpoint;
use satlab::embeddings::{ModelConfig, UseFlags};
use satlab::fusion::{build_mask, Dropout, MaskMode};
use satlab::model::{Arrangement, Model};
use satlab::projection2d::{iou3d, DetectorNoiseConfig};
use satlab::scene_synth::{generate_dataset, Dataset, SynthConfig};
use satlab::training::{
    assemble_batch, assemble_item, detector_mode_pairing, positive_index, predict, sample_loss, semantics_gradient_is_zero, train, Exclusion,
    Prepared, ProposalSource, TrainConfig, TrainMode,
};
use satlab::Precision;

fn smoke() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| {
        let cfg = SynthConfig { train_scenes: 40, val_scenes: 10, ..SynthConfig::default() };
        generate_dataset(&cfg, 21).unwrap()
    })
}

fn small_model(precision: Precision) -> ModelConfig {
    ModelConfig { d: 16, heads: 2, text_layers: 1, fusion_layers: 1, point_hidden: 16, p: 16, precision, ..ModelConfig::default() }
}

fn small_train(mode: TrainMode, epochs: usize, precision: Precision) -> TrainConfig {
    TrainConfig { mode, epochs, batch_size: 8, lr0: 1e-3, model: small_model(precision), ..TrainConfig::default() }
}

fn gt_prep(ds: &Dataset) -> Prepared<f64> {
    Prepared::new(ds, ProposalSource::GroundTruth, &DetectorNoiseConfig::zero()).unwrap()
}

fn model_for(ds: &Dataset, seed: u64) -> Model<f64> {
    Model::new(small_train(TrainMode::Sat, 1, Precision::Double).resolved_model(ds), seed).unwrap()
}

#[test]
fn loss_decreases_in_every_mode() {
    let ds = smoke();
    for mode in TrainMode::ALL {
        let out = train::<f32>(ds, &small_train(mode, 5, Precision::Single), None).unwrap();
        let first = out.log.epochs.first().unwrap().mean_loss;
        let last = out.log.epochs.last().unwrap().mean_loss;
        assert!(last < first, "{mode}: loss went from {first} to {last}");
        assert_eq!(out.log.epochs.len(), 5);
    }
}

#[test]
fn double_precision_training_is_reproducible_and_round_trips() {
    let ds = smoke();
    let cfg = small_train(TrainMode::Sat, 2, Precision::Double);
    let dir = tempfile::tempdir().unwrap();
    let a = train::<f64>(ds, &cfg, Some(dir.path())).unwrap();
    let b = train::<f64>(ds, &cfg, None).unwrap();
    let bytes_a = checkpoint::to_bytes(&a.final_model, &a.config_hash);
    assert_eq!(bytes_a, checkpoint::to_bytes(&b.final_model, &b.config_hash));
    assert_eq!(a.log.epochs.iter().map(|e| e.mean_loss).collect::<Vec<_>>(), b.log.epochs.iter().map(|e| e.mean_loss).collect::<Vec<_>>());

    for f in ["best.ckpt", "final.ckpt", "train_log.jsonl"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let (loaded, header) = checkpoint::load::<f64>(&dir.path().join("final.ckpt")).unwrap();
    assert_eq!(header.config_hash, a.config_hash);
    assert_eq!(loaded.store.hash(), a.final_model.store.hash());
    let arr = TrainMode::Sat.infer_arrangement();
    let val = ds.val_queries();
    let p0 = predict(&a.final_model, ds, &a.prepared, arr, UseFlags::default(), 0, val).unwrap();
    let p1 = predict(&loaded, ds, &a.prepared, arr, UseFlags::default(), 0, val).unwrap();
    assert_eq!(p0, p1);
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    let kinds: Vec<String> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["kind"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(kinds.iter().filter(|k| *k == "epoch").count(), 2);
    assert_eq!(kinds.last().map(String::as_str), Some("summary"));
}

#[test]
fn sat_inference_equals_the_training_graph_scores() {
    let ds = smoke();
    let prep = gt_prep(ds);
    let model = model_for(ds, 4);
    let val = ds.val_queries();
    let train_graph = predict(&model, ds, &prep, Arrangement::Tokens(MaskMode::Sat), UseFlags::default(), 0, val).unwrap();
    let inference = predict(&model, ds, &prep, Arrangement::Tokens(MaskMode::Inference), UseFlags::default(), 0, val).unwrap();
    assert_eq!(train_graph, inference);
    for &qi in val {
        let item = assemble_item(&prep, ds, qi, true, 0, 0).unwrap().unwrap();
        let a = model.scores(&item.input, Arrangement::Tokens(MaskMode::Sat), UseFlags::default()).unwrap();
        let b = model.scores(&item.input, Arrangement::Tokens(MaskMode::Inference), UseFlags::default()).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn mask_a_training_graph_depends_on_semantics() {
    let ds = smoke();
    let prep = gt_prep(ds);
    let model = model_for(ds, 5);
    let mut changed = 0;
    for &qi in ds.val_queries() {
        let item = assemble_item(&prep, ds, qi, true, 0, 0).unwrap().unwrap();
        let with = model.scores(&item.input, Arrangement::Tokens(MaskMode::MaskA), UseFlags::default()).unwrap();
        let mut zeroed = item.input.clone();
        let sem = zeroed.semantics.as_mut().unwrap();
        for m in [&mut sem.roi, &mut sem.cls, &mut sem.geo] {
            m.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let without = model.scores(&zeroed, Arrangement::Tokens(MaskMode::MaskA), UseFlags::default()).unwrap();
        let argmax = |s: &[f64]| s.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        changed += usize::from(argmax(&with) != argmax(&without));
    }
    assert!(changed >= 1);
}

#[test]
fn grounding_loss_sends_no_gradient_to_semantics_except_under_mask_a() {
    let ds = smoke();
    let prep = gt_prep(ds);
    let model = model_for(ds, 6);
    let item = assemble_item(&prep, ds, ds.train_queries()[0], true, 0, 0).unwrap().unwrap();
    let loss = TrainConfig::default().loss;
    for (mode, isolated) in [(MaskMode::Sat, true), (MaskMode::MaskB, true), (MaskMode::MaskA, false)] {
        let mut tape = Tape::new(&model.store);
        let sl = sample_loss(&model, &mut tape, &item, Arrangement::Tokens(mode), &loss, UseFlags::default(), &mut Dropout::off()).unwrap();
        assert_eq!(semantics_gradient_is_zero(&tape, &sl), isolated, "{mode:?}");
    }
}

#[test]
fn every_embedding_parameter_receives_gradient() {
    let ds = smoke();
    let prep = gt_prep(ds);
    let model = model_for(ds, 8);
    let loss = TrainConfig::default().loss;
    let embedding = |n: &str| n.starts_with("emb.") || n.starts_with("text.");
    for flags in [UseFlags::default(), UseFlags { roi: false, cls: true, geo: false }] {
        let mut touched = std::collections::BTreeSet::new();
        for &qi in &ds.train_queries()[..8] {
            let item = assemble_item(&prep, ds, qi, true, 0, 0).unwrap().unwrap();
            let mut tape = Tape::new(&model.store);
            let sl = sample_loss(&model, &mut tape, &item, Arrangement::Tokens(MaskMode::Sat), &loss, flags, &mut Dropout::off()).unwrap();
            let grads = tape.backward(sl.root);
            for id in model.store.ids() {
                let nonzero = tape.param_var(id).and_then(|v| grads.get(v)).is_some_and(|g| g.data().iter().any(|x| *x != 0.0));
                if nonzero {
                    touched.insert(model.store.name(id).to_string());
                }
            }
        }
        for id in model.store.ids() {
            let name = model.store.name(id);
            if !embedding(name) {
                continue;
            }
            let disabled = (!flags.roi && name.starts_with("emb.w3.")) || (!flags.geo && (name.starts_with("emb.w5.") || name.starts_with("emb.ln_geo.")));
            let idle_ln = !flags.roi && !flags.cls && name.starts_with("emb.ln_roi_cls.");
            if disabled || idle_ln {
                assert!(!touched.contains(name), "{name} should be idle with {flags:?}");
            } else {
                assert!(touched.contains(name), "{name} got no gradient with {flags:?}");
            }
        }
    }
}

#[test]
fn sequence_layouts() {
    let (k, m) = (7, 5);
    let pad = vec![false; k + 1];
    let sat = build_mask(MaskMode::Sat, k, m, &pad);
    assert_eq!(sat.size, 1 + k + 2 * m);
    assert_eq!(sat.layout.semantics, Some(1 + k + m..1 + k + 2 * m));
    let inf = build_mask(MaskMode::Inference, k, m, &pad);
    assert_eq!(inf.size, 1 + k + m);
    assert!(inf.layout.semantics.is_none());

    let ds = smoke();
    let prep = gt_prep(ds);
    let model = model_for(ds, 7);
    let item = assemble_item(&prep, ds, ds.train_queries()[0], false, 0, 0).unwrap().unwrap();
    assert!(item.input.semantics.is_none());
    let mut tape = Tape::new(&model.store);
    let arr = TrainMode::NonSat.train_arrangement();
    let f = model.forward(&mut tape, &item.input, arr, UseFlags::default(), &mut Dropout::off()).unwrap();
    assert!(f.fused.f_i.is_none() && f.s_i.is_none() && f.i.is_none());
}

#[test]
fn frames_are_resampled_between_epochs() {
    let ds = smoke();
    let prep = gt_prep(ds);
    assert_eq!(ds.scenes[0].cameras.len(), 4);
    let mut compared = 0;
    let mut differ = 0;
    for &qi in ds.train_queries() {
        let a = assemble_item(&prep, ds, qi, true, 0, 0).unwrap().unwrap();
        let b = assemble_item(&prep, ds, qi, true, 0, 1).unwrap().unwrap();
        for (x, y) in a.frames.iter().zip(&b.frames) {
            compared += 1;
            differ += usize::from(x != y);
        }
        if compared >= 20 {
            break;
        }
    }
    assert!(differ >= 1, "no frame changed across {compared} proposals");
    let again = assemble_item(&prep, ds, ds.train_queries()[0], true, 0, 0).unwrap().unwrap();
    let first = assemble_item(&prep, ds, ds.train_queries()[0], true, 0, 0).unwrap().unwrap();
    assert_eq!(again.frames, first.frames);
}

#[test]
fn missing_semantics_excludes_the_sample() {
    let mut ds = smoke().clone();
    let qi = ds.train_queries()[0];
    let si = ds.scene_position(&ds.queries[qi].scene_id).unwrap();
    ds.semantics[si][0].clear();
    let prep = gt_prep(&ds);
    let other = *ds.train_queries().iter().find(|&&q| ds.queries[q].scene_id != ds.queries[qi].scene_id).unwrap();
    let batch = assemble_batch(&prep, &ds, &[qi, other], TrainMode::Sat, 0, 0).unwrap();
    assert_eq!(batch.excluded, vec![(qi, Exclusion::MissingSemantics)]);
    assert_eq!(batch.items.len(), 1);
    let non_sat = assemble_batch(&prep, &ds, &[qi], TrainMode::NonSat, 0, 0).unwrap();
    assert!(non_sat.excluded.is_empty());
}

#[test]
fn noiseless_detector_reproduces_ground_truth() {
    let ds = smoke();
    let prep: Prepared<f64> = Prepared::new(ds, ProposalSource::Detector, &DetectorNoiseConfig::zero()).unwrap();
    for &qi in ds.val_queries() {
        let item = assemble_item(&prep, ds, qi, true, 0, 0).unwrap().unwrap();
        assert_eq!(item.positive, ds.queries[qi].target_proposal_index);
    }
}

#[test]
fn detector_pairing_matches_brute_force() {
    let ds = smoke();
    let prep: Prepared<f64> = Prepared::new(ds, ProposalSource::Detector, &DetectorNoiseConfig::default()).unwrap();
    for (si, sc) in prep.scenes.iter().enumerate() {
        let gt = &ds.scenes[si].proposals;
        let pairs = detector_mode_pairing(gt, &sc.proposals).unwrap();
        for (d, p) in sc.proposals.iter().zip(&pairs) {
            let ious: Vec<f64> = gt.iter().map(|g| iou3d(&d.box3d, &g.box3d).unwrap()).collect();
            let best = ious.iter().cloned().fold(0.0, f64::max);
            assert_eq!(p.iou, best);
            if best > 0.0 {
                let first = ious.iter().position(|&v| v == best).unwrap();
                assert_eq!(p.gt_index, Some(first));
            } else {
                assert_eq!(p.gt_index, None);
            }
            assert_eq!(p.correspondence_eligible, best >= 0.5);
        }
        for g in gt {
            let found = positive_index(&sc.proposals, &g.box3d).unwrap();
            let ious: Vec<f64> = sc.proposals.iter().map(|d| iou3d(&d.box3d, &g.box3d).unwrap()).collect();
            let best = ious.iter().cloned().fold(0.0, f64::max);
            match found {
                Some((k, v)) => assert!(v == best && ious.iter().position(|&x| x == best) == Some(k)),
                None => assert_eq!(best, 0.0),
            }
        }
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = TrainConfig { batch_size: 0, ..TrainConfig::default() };
    assert!(matches!(cfg.validate(), Err(satlab::SatError::Config(_))));
    cfg.batch_size = 4;
    cfg.use_flags = UseFlags { roi: false, cls: false, geo: false };
    assert!(cfg.validate().is_err());
    cfg.mode = TrainMode::NonSat;
    assert!(cfg.validate().is_ok());
}
