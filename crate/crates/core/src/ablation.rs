//! Ablation suites: mask variants, 2D semantics types, loss combinations and 2D-input oracles.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embeddings::UseFlags;
use crate::error::{Result, SatError};
use crate::evaluation::{evaluate, mean_std, MeanStd};
use crate::losses::LossConfig;
use crate::real::Real;
use crate::scene_synth::Dataset;
use crate::training::{train, TrainConfig, TrainMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Masks,
    Semantics,
    Losses,
    Oracles,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Masks, Suite::Semantics, Suite::Losses, Suite::Oracles];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Masks => "masks",
            Suite::Semantics => "semantics",
            Suite::Losses => "losses",
            Suite::Oracles => "oracles",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = SatError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| SatError::Config(format!("unknown suite {s:?}; expected masks, semantics, losses or oracles")))
    }
}

fn flags(geo: bool, cls: bool, roi: bool) -> UseFlags {
    UseFlags { roi, cls, geo }
}

/// Labeled member configurations of a suite, derived from `base`.
pub fn suite_rows(suite: Suite, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let with = |mode: TrainMode, f: UseFlags, l: LossConfig| TrainConfig { mode, use_flags: f, loss: l, ..base.clone() };
    let all = UseFlags::default();
    let full = LossConfig { enable_vg_i: true, enable_cor: true, enable_cls: true, ..base.loss.clone() };
    let l = |vg_i, cor, cls| LossConfig { enable_vg_i: vg_i, enable_cor: cor, enable_cls: cls, ..base.loss.clone() };
    match suite {
        Suite::Masks => vec![
            ("non_sat".into(), with(TrainMode::NonSat, all, full.clone())),
            ("mask_a".into(), with(TrainMode::MaskA, all, full.clone())),
            ("mask_b".into(), with(TrainMode::MaskB, all, full.clone())),
            ("sat".into(), with(TrainMode::Sat, all, full)),
        ],
        Suite::Semantics => vec![
            ("a_non_sat".into(), with(TrainMode::NonSat, all, full.clone())),
            ("b_geo".into(), with(TrainMode::Sat, flags(true, false, false), full.clone())),
            ("c_geo_cls".into(), with(TrainMode::Sat, flags(true, true, false), full.clone())),
            ("d_geo_roi".into(), with(TrainMode::Sat, flags(true, false, true), full.clone())),
            ("e_cls_roi".into(), with(TrainMode::Sat, flags(false, true, true), full.clone())),
            ("f_geo_cls_roi".into(), with(TrainMode::Sat, all, full)),
        ],
        Suite::Losses => vec![
            ("a_vg_o".into(), with(TrainMode::Sat, all, l(false, false, false))),
            ("b_vg_o_cls".into(), with(TrainMode::Sat, all, l(false, false, true))),
            ("c_vg_o_cls_vg_i".into(), with(TrainMode::Sat, all, l(true, false, true))),
            ("d_vg_o_cls_cor".into(), with(TrainMode::Sat, all, l(false, true, true))),
            ("e_vg_o_vg_i_cor".into(), with(TrainMode::Sat, all, l(true, true, false))),
            ("f_all".into(), with(TrainMode::Sat, all, full)),
        ],
        Suite::Oracles => vec![
            ("input_aligned".into(), with(TrainMode::InputAligned, all, full.clone())),
            ("input_unaligned".into(), with(TrainMode::InputUnaligned, all, full.clone())),
            ("sat".into(), with(TrainMode::Sat, all, full.clone())),
            ("non_sat".into(), with(TrainMode::NonSat, all, full)),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub label: String,
    pub mode: TrainMode,
    pub accuracy: MeanStd,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub suite: Suite,
    pub seeds: Vec<u64>,
    pub rows: Vec<RowResult>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,mode,mean,std,seeds,per_seed\n");
        for r in &self.rows {
            let per: Vec<String> = r.per_seed.iter().map(|a| format!("{a:.6}")).collect();
            s.push_str(&format!("{},{},{:.6},{:.6},{},{}\n", r.label, r.mode, r.accuracy.mean, r.accuracy.std, r.accuracy.n, per.join(";")));
        }
        s
    }

    pub fn row(&self, label: &str) -> Option<&RowResult> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Trains and evaluates every member for every seed. Each member writes into `<out>/<row>/seed_<s>`.
pub fn run_suite<T: Real>(ds: &Dataset, suite: Suite, base: &TrainConfig, seeds: &[u64], out_dir: Option<&Path>) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(SatError::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for (label, cfg) in suite_rows(suite, base) {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let dir = out_dir.map(|d| d.join(&label).join(format!("seed_{seed}")));
            let out = train::<T>(ds, &cfg, dir.as_deref())
                .map_err(|e| SatError::Run(format!("{suite} member {label} seed {seed}: {e}")))?;
            let report = evaluate(&out.best_model, ds, &out.prepared, cfg.mode, cfg.use_flags, seed)?;
            if let Some(d) = &dir {
                report.write(d)?;
            }
            log::info!("{suite}/{label} seed {seed}: {:.2}%", 100.0 * report.overall_accuracy.mean);
            per_seed.push(report.overall_accuracy.mean);
        }
        rows.push(RowResult { label, mode: cfg.mode, accuracy: mean_std(&per_seed), per_seed });
    }
    let table = AblationTable { suite, seeds: seeds.to_vec(), rows };
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| SatError::io(d, e))?;
        let csv = d.join(format!("{suite}.csv"));
        fs::write(&csv, table.to_csv()).map_err(|e| SatError::io(&csv, e))?;
        let json = d.join(format!("{suite}.json"));
        fs::write(&json, serde_json::to_string_pretty(&table).expect("serializable") + "\n").map_err(|e| SatError::io(&json, e))?;
    }
    Ok(table)
}
