use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use satlab::ablation::{suite_rows, Suite};
use satlab::autodiff::Tape;
use satlab::embeddings::UseFlags;
use satlab::evaluation::{evaluate, linear_probe, ProbeConfig};
use satlab::fusion::{Dropout, MaskMode};
use satlab::geometry::Box3D;
use satlab::gradcheck::{run_gradcheck, GradcheckConfig};
use satlab::losses::mine_from_similarity;
use satlab::model::{Arrangement, Model, SampleInput};
use satlab::projection2d::{iou3d, DetectorNoiseConfig};
use satlab::real::Precision;
use satlab::rng::stream;
use satlab::scene_synth::{generate_dataset, Dataset, SynthConfig};
use satlab::tensor::Mat;
use satlab::training::{assemble_item, sample_loss, semantics_gradient_is_zero, train, BatchItem, Prepared, ProposalSource, TrainConfig, TrainMode, EVAL_EPOCH};

const SEEDS: [u64; 3] = [0, 1, 2];

fn report(n: usize, pass: bool, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    writeln!(std::io::stderr(), "acceptance criterion {n:>2} [{tag}] {detail}").unwrap();
}

fn strict() -> bool {
    std::env::var("SATLAB_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1")
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pts(v: &[f64]) -> String {
    let s: Vec<String> = v.iter().map(|a| format!("{:.1}", 100.0 * a)).collect();
    s.join("/")
}

struct Run {
    accuracy: f64,
    seconds: f64,
    model: Model<f32>,
}

fn run(ds: &Dataset, cfg: &TrainConfig) -> Run {
    let t = Instant::now();
    let out = train::<f32>(ds, cfg, None).unwrap();
    let r = evaluate(&out.best_model, ds, &out.prepared, cfg.mode, cfg.use_flags, cfg.seed).unwrap();
    Run { accuracy: r.overall_accuracy.mean, seconds: t.elapsed().as_secs_f64(), model: out.best_model }
}

fn values(tape: &Tape<f64>, f: &satlab::model::Forward) -> [Mat<f64>; 3] {
    [tape.value(f.s_o).clone(), tape.value(f.fused.f_q).clone(), tape.value(f.fused.f_o).clone()]
}

fn forward_values(model: &Model<f64>, input: &SampleInput<f64>, arr: Arrangement) -> [Mat<f64>; 3] {
    let mut tape = Tape::new(&model.store);
    let f = model.forward(&mut tape, input, arr, UseFlags::default(), &mut Dropout::off()).unwrap();
    values(&tape, &f)
}

fn bit_eq(a: &[Mat<f64>; 3], b: &[Mat<f64>; 3]) -> bool {
    a.iter().zip(b).all(|(x, y)| x.bit_eq(y))
}

fn val_items(ds: &Dataset, prep: &Prepared<f64>) -> Vec<BatchItem<f64>> {
    ds.val_queries().iter().filter_map(|&qi| assemble_item(prep, ds, qi, true, 0, EVAL_EPOCH).unwrap().ok()).collect()
}

fn mask_exclusion(ds: &Dataset) -> (bool, String) {
    let t = Instant::now();
    let cfg = TrainConfig::default();
    let model = Model::<f64>::new(cfg.resolved_model(ds), 0).unwrap();
    let prep = Prepared::<f64>::new(ds, ProposalSource::GroundTruth, &DetectorNoiseConfig::zero()).unwrap();
    let items = val_items(ds, &prep);
    let mut rng = stream(0, &[1]);
    let (mut checked, mut bad_values, mut bad_grads) = (0, 0, 0);
    for mode in [MaskMode::Sat, MaskMode::MaskB] {
        let arr = Arrangement::Tokens(mode);
        let base: Vec<[Mat<f64>; 3]> = items.iter().map(|it| forward_values(&model, &it.input, arr)).collect();
        for n in 0..1000 {
            let k = n % items.len();
            let mut item = items[k].clone();
            let sem = item.input.semantics.as_mut().unwrap();
            let scale = rng.random_range(0.01..10.0);
            for m in [&mut sem.roi, &mut sem.cls, &mut sem.geo] {
                for v in m.data_mut() {
                    *v += rng.random_range(-scale..scale);
                }
            }
            let mut tape = Tape::new(&model.store);
            let sl = sample_loss(&model, &mut tape, &item, arr, &cfg.loss, UseFlags::default(), &mut Dropout::off()).unwrap();
            bad_values += usize::from(!bit_eq(&values(&tape, &sl.forward), &base[k]));
            bad_grads += usize::from(!semantics_gradient_is_zero(&tape, &sl));
            checked += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = bad_values == 0 && bad_grads == 0 && secs < 30.0;
    (pass, format!("{checked} perturbations (sat, mask_b): {bad_values} changed S_O/F_Q/F_O, {bad_grads} nonzero 2D gradients, {secs:.1}s (limit 30s)"))
}

fn train_infer_equivalence(ds: &Dataset, trained: &Model<f32>) -> (bool, String) {
    let t = Instant::now();
    let model: Model<f64> = trained.cast();
    let prep = Prepared::<f64>::new(ds, ProposalSource::GroundTruth, &DetectorNoiseConfig::zero()).unwrap();
    let items = val_items(ds, &prep);
    let mut mismatched = 0;
    for item in &items {
        let train_graph = forward_values(&model, &item.input, Arrangement::Tokens(MaskMode::Sat));
        let mut bare = item.input.clone();
        bare.semantics = None;
        let infer = forward_values(&model, &bare, Arrangement::Tokens(MaskMode::Inference));
        mismatched += usize::from(!bit_eq(&train_graph, &infer));
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = mismatched == 0 && items.len() == ds.val_queries().len() && secs < 60.0;
    (pass, format!("{} of {} val queries differ between training graph and inference, {secs:.1}s (limit 60s)", mismatched, items.len()))
}

fn gradient_verification() -> (bool, String) {
    let t = Instant::now();
    let r = run_gradcheck(&GradcheckConfig::default()).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let enough = r.components.iter().all(|c| c.checks.len() >= 50);
    let worst = r.components.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let names: Vec<String> = r.components.iter().map(|c| format!("{}:{}", c.component, c.checks.len())).collect();
    let pass = r.passed && enough && worst < 1e-4 && secs < 120.0;
    (pass, format!("components {} max rel error {worst:.2e} (limit 1e-4), {secs:.1}s (limit 120s)", names.join(" ")))
}

/// Exhaustive search for each eligible index: the best other eligible column and row, lowest index on ties.
fn mining_oracle(sim: &Mat<f64>, eligible: &[bool]) -> Vec<(usize, usize, usize)> {
    let idx: Vec<usize> = (0..eligible.len()).filter(|&k| eligible[k]).collect();
    if idx.len() < 2 {
        return vec![];
    }
    let mut out = Vec::new();
    for &m in &idx {
        let mut best = (usize::MAX, usize::MAX);
        for &c in idx.iter().rev() {
            if c == m {
                continue;
            }
            if best.0 == usize::MAX || sim.get(m, c) >= sim.get(m, best.0) {
                best.0 = c;
            }
            if best.1 == usize::MAX || sim.get(c, m) >= sim.get(best.1, m) {
                best.1 = c;
            }
        }
        out.push((m, best.0, best.1));
    }
    out
}

fn monte_carlo_iou(a: &Box3D, b: &Box3D, n: usize, rng: &mut impl Rng) -> (f64, usize) {
    let (amin, amax, bmin, bmax) = (a.min(), a.max(), b.min(), b.max());
    let lo: Vec<f64> = (0..3).map(|i| amin[i].min(bmin[i])).collect();
    let hi: Vec<f64> = (0..3).map(|i| amax[i].max(bmax[i])).collect();
    let inside = |p: &[f64; 3], lo: [f64; 3], hi: [f64; 3]| (0..3).all(|i| p[i] >= lo[i] && p[i] <= hi[i]);
    let (mut both, mut either) = (0usize, 0usize);
    for _ in 0..n {
        let p = [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1]), rng.random_range(lo[2]..hi[2])];
        let (ia, ib) = (inside(&p, amin, amax), inside(&p, bmin, bmax));
        both += usize::from(ia && ib);
        either += usize::from(ia || ib);
    }
    (both as f64 / either as f64, either)
}

fn oracles() -> (bool, String) {
    let mut rng = stream(4, &[]);
    let mut mining_bad = 0;
    for n in 0..1000 {
        let m = rng.random_range(1..=8);
        let coarse = n % 2 == 0;
        let data: Vec<f64> = (0..m * m).map(|_| if coarse { f64::from(rng.random_range(-2i32..=2)) } else { rng.random_range(-1.0..1.0) }).collect();
        let sim = Mat::from_vec(m, m, data);
        let eligible: Vec<bool> = (0..m).map(|_| rng.random_bool(0.8)).collect();
        mining_bad += usize::from(mine_from_similarity(&sim, &eligible) != mining_oracle(&sim, &eligible));
    }

    let mut iou_bad = 0;
    let mut worst_z: f64 = 0.0;
    for _ in 0..100 {
        let mut draw = || {
            let c = [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)];
            let s = [rng.random_range(0.2..1.2), rng.random_range(0.2..1.2), rng.random_range(0.2..1.2)];
            Box3D::new(c, s)
        };
        let (a, b) = (draw(), draw());
        let exact = iou3d(&a, &b).unwrap();
        let (est, n_union) = monte_carlo_iou(&a, &b, 40_000, &mut rng);
        let sigma = (exact * (1.0 - exact) / n_union as f64).sqrt();
        let dev = (est - exact).abs();
        if sigma > 0.0 {
            worst_z = worst_z.max(dev / sigma);
        }
        iou_bad += usize::from(dev > 3.0 * sigma);
    }

    let cube = Box3D::new([0.5; 3], [1.0; 3]);
    let shifted = Box3D::new([1.0, 0.5, 0.5], [1.0; 3]);
    let analytic_err = (iou3d(&cube, &shifted).unwrap() - 1.0 / 3.0).abs();

    let pass = mining_bad == 0 && iou_bad == 0 && analytic_err <= 1e-12;
    (pass, format!("mining {mining_bad}/1000 mismatches, iou3d {iou_bad}/100 outside 3 sigma (worst {worst_z:.2} sigma), unit-cube offset error {analytic_err:.1e}"))
}

fn determinism() -> (bool, String) {
    let root = tempfile::tempdir().unwrap();
    let sat = |args: &[&str]| {
        let o = Command::new(env!("CARGO_BIN_EXE_satlab")).args(args).env("RUST_LOG", "warn").env_remove("SATLAB_PRECISION").output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    let path = |p: &Path| p.to_str().unwrap().to_owned();
    let (d1, d2) = (root.path().join("d1"), root.path().join("d2"));
    for d in [&d1, &d2] {
        sat(&["gen", "--out", &path(d), "--seed", "11", "--set", "train_scenes=24", "--set", "val_scenes=6"]);
    }
    let files = ["manifest.json", "scenes.jsonl", "queries.jsonl", "semantics2d.jsonl", "config.json"];
    let gen_same = files.iter().all(|f| std::fs::read(d1.join(f)).unwrap() == std::fs::read(d2.join(f)).unwrap());

    let (r1, r2) = (root.path().join("r1"), root.path().join("r2"));
    for r in [&r1, &r2] {
        sat(&["train", "--data", &path(&d1), "--out", &path(r), "--seed", "5", "--set", "epochs=2", "--set", "model.precision=\"double\""]);
    }
    let ckpts = ["best.ckpt", "final.ckpt"];
    let train_same = ckpts.iter().all(|f| std::fs::read(r1.join(f)).unwrap() == std::fs::read(r2.join(f)).unwrap());
    (gen_same && train_same, format!("gen byte-identical: {gen_same}, double-precision checkpoints byte-identical: {train_same}"))
}

#[test]
fn acceptance_criteria() {
    let mut exact_failures = Vec::new();
    let mut trend_failures = Vec::new();
    let mut record = |n: usize, exact: bool, (pass, detail): (bool, String)| {
        report(n, pass, detail);
        if !pass {
            if exact { exact_failures.push(n) } else { trend_failures.push(n) }
        }
    };

    let ds = generate_dataset(&SynthConfig::default(), 0).unwrap();
    assert_eq!(ds.train_queries().iter().map(|&q| &ds.queries[q].scene_id).collect::<std::collections::HashSet<_>>().len(), 400);
    let base = TrainConfig::default();
    assert_eq!(base.model.precision, Precision::Single);

    record(1, true, mask_exclusion(&ds));
    record(3, true, gradient_verification());
    record(4, true, oracles());
    record(9, true, determinism());

    let cfg_for = |mode: TrainMode, seed: u64| TrainConfig { mode, seed, ..base.clone() };
    let mut runs = std::collections::BTreeMap::<(&str, u64), Run>::new();
    for mode in [TrainMode::Sat, TrainMode::NonSat, TrainMode::MaskA] {
        for seed in SEEDS {
            let r = run(&ds, &cfg_for(mode, seed));
            writeln!(std::io::stderr(), "  trained {} seed {seed}: {:.1}% in {:.0}s", mode.label(), 100.0 * r.accuracy, r.seconds).unwrap();
            runs.insert((mode.label(), seed), r);
        }
    }
    let accs = |label: &str| -> Vec<f64> { SEEDS.iter().map(|&s| runs[&(label, s)].accuracy).collect() };
    let (sat, non_sat, mask_a) = (accs("sat"), accs("non_sat"), accs("mask_a"));
    let (m_sat, m_non, m_a) = (mean(&sat), mean(&non_sat), mean(&mask_a));

    record(2, true, train_infer_equivalence(&ds, &runs[&("sat", 0)].model));

    let budget: f64 = SEEDS.iter().flat_map(|&s| [runs[&("sat", s)].seconds, runs[&("non_sat", s)].seconds]).sum();
    let gap = 100.0 * (m_sat - m_non);
    record(5, false, (gap >= 3.0 && budget <= 1800.0, format!(
        "sat {} (mean {:.1}) vs non_sat {} (mean {:.1}): gap {gap:+.1} points (need +3.0), {:.1} min (limit 30)",
        pts(&sat), 100.0 * m_sat, pts(&non_sat), 100.0 * m_non, budget / 60.0
    )));

    let below_sat = 100.0 * (m_sat - m_a);
    let vs_non = 100.0 * (m_a - m_non);
    record(6, false, (below_sat >= 5.0 && vs_non <= 2.0, format!(
        "mask_a {} (mean {:.1}): {below_sat:.1} below sat (need 5.0), {vs_non:+.1} vs non_sat (need at most +2.0)",
        pts(&mask_a), 100.0 * m_a
    )));

    let probe_prep = Prepared::<f32>::new(&ds, ProposalSource::GroundTruth, &DetectorNoiseConfig::zero()).unwrap();
    let probe = |model: &Model<f32>, seed: u64| linear_probe(model, &ds, &probe_prep, &ProbeConfig { seed, ..ProbeConfig::default() }).unwrap().top1;
    let p_sat: Vec<f64> = SEEDS.iter().map(|&s| probe(&runs[&("sat", s)].model, s)).collect();
    let p_non: Vec<f64> = SEEDS.iter().map(|&s| probe(&runs[&("non_sat", s)].model, s)).collect();
    let p_rand: Vec<f64> = SEEDS.iter().map(|&s| probe(&Model::<f32>::new(base.resolved_model(&ds), s).unwrap(), s)).collect();
    let (ps, pn, pr) = (mean(&p_sat), mean(&p_non), mean(&p_rand));
    record(7, false, (ps >= pn && ps - pr >= 0.10 && pn - pr >= 0.10, format!(
        "probe top-1 sat {:.1}, non_sat {:.1}, random network {:.1} (need sat >= non_sat, both >= random + 10)",
        100.0 * ps, 100.0 * pn, 100.0 * pr
    )));

    let mut sem = Vec::new();
    for (label, row_cfg) in suite_rows(Suite::Semantics, &base) {
        let reuse = match label.as_str() {
            "a_non_sat" => Some("non_sat"),
            "f_geo_cls_roi" => Some("sat"),
            _ => None,
        };
        let per_seed: Vec<f64> = SEEDS
            .iter()
            .map(|&s| match reuse {
                Some(l) => {
                    assert_eq!(TrainConfig { seed: s, ..row_cfg.clone() }, cfg_for(l.parse().unwrap(), s));
                    runs[&(l, s)].accuracy
                }
                None => {
                    let r = run(&ds, &TrainConfig { seed: s, ..row_cfg.clone() });
                    writeln!(std::io::stderr(), "  trained {label} seed {s}: {:.1}% in {:.0}s", 100.0 * r.accuracy, r.seconds).unwrap();
                    r.accuracy
                }
            })
            .collect();
        sem.push((label, mean(&per_seed)));
    }
    let full = sem.iter().find(|(l, _)| l == "f_geo_cls_roi").unwrap().1;
    let floor = sem.iter().find(|(l, _)| l == "a_non_sat").unwrap().1;
    let subsets_ok = sem.iter().filter(|(l, _)| l != "a_non_sat" && l != "f_geo_cls_roi").all(|(_, a)| full >= a - 0.01);
    let enabled_ok = sem.iter().filter(|(l, _)| l != "a_non_sat").all(|(_, a)| *a >= floor);
    let rows: Vec<String> = sem.iter().map(|(l, a)| format!("{l} {:.1}", 100.0 * a)).collect();
    record(8, false, (subsets_ok && enabled_ok, format!(
        "{} (full >= every subset - 1.0: {subsets_ok}, every 2D-enabled row >= non_sat: {enabled_ok})",
        rows.join(", ")
    )));

    let det_cfg = TrainConfig { proposal_source: ProposalSource::Detector, ..cfg_for(TrainMode::Sat, 0) };
    let out = train::<f32>(&ds, &det_cfg, None).unwrap();
    let rep = evaluate(&out.best_model, &ds, &out.prepared, det_cfg.mode, det_cfg.use_flags, 0).unwrap();
    let (a25, a50) = (rep.acc_at_iou["0.25"], rep.acc_at_iou["0.5"]);
    let per_epoch = out.log.epochs.iter().map(|e| e.ineligible_proposals as f64).sum::<f64>() / out.log.epochs.len() as f64;
    record(10, true, (a25 >= a50 && per_epoch >= 1.0 && a25.is_finite(), format!(
        "Acc@0.25 {:.1} >= Acc@0.5 {:.1}, {per_epoch:.1} ineligible proposals per epoch (need >= 1)",
        100.0 * a25, 100.0 * a50
    )));

    assert!(exact_failures.is_empty(), "exact criteria failed: {exact_failures:?}");
    if strict() {
        assert!(trend_failures.is_empty(), "trend criteria failed: {trend_failures:?}");
    } else if !trend_failures.is_empty() {
        writeln!(std::io::stderr(), "trend criteria not met: {trend_failures:?} (set SATLAB_ACCEPTANCE_STRICT=1 to fail the run)").unwrap();
    }
}
