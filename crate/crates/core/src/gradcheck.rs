//! Central finite-difference checks of backprop on a tiny double-precision model.

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::embeddings::{ModelConfig, UseFlags};
use crate::error::Result;
use crate::fusion::{Dropout, MaskMode};
use crate::losses::{cls_term, mine_from_similarity, vg_term, LossConfig};
use crate::model::{random_sample, Arrangement, Model, SampleInput};
use crate::params::ParamId;
use crate::real::Precision;
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    LVgO,
    LVgI,
    LCor,
    LCls,
    EndToEnd,
}

impl Component {
    pub const ALL: [Component; 5] = [Component::LVgO, Component::LVgI, Component::LCor, Component::LCls, Component::EndToEnd];

    pub fn name(self) -> &'static str {
        match self {
            Component::LVgO => "l_vg_o",
            Component::LVgI => "l_vg_i",
            Component::LCor => "l_cor",
            Component::LCls => "l_cls",
            Component::EndToEnd => "end_to_end",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub samples: usize,
    pub h: f64,
    pub tolerance: f64,
    /// Scales one analytic gradient entry per component to exercise the failure path.
    #[serde(skip)]
    pub corrupt: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { seed: 0, samples: 50, h: 1e-5, tolerance: 1e-4, corrupt: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub component: Component,
    pub checks: Vec<ParamCheck>,
    pub max_rel_error: f64,
    /// `name[index]` of the entry with the largest error.
    pub worst: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub components: Vec<ComponentReport>,
    pub passed: bool,
}

/// `|a − b| / max(|a|, |b|, 1e-7)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        text_layers: 1,
        fusion_layers: 1,
        point_hidden: 8,
        p: 8,
        ffn_mult: 2,
        kmax: 4,
        m_max: 4,
        num_classes: 4,
        vocab_size: 12,
        dropout: 0.0,
        precision: Precision::Double,
        ..ModelConfig::default()
    }
}

struct Fixture {
    input: SampleInput<f64>,
    positive: usize,
    labels: Vec<usize>,
    target_class: usize,
    triples: Vec<(usize, usize, usize)>,
    loss: LossConfig,
}

fn loss_graph<'p>(model: &'p Model<f64>, tape: &mut Tape<'p, f64>, fx: &Fixture, component: Component) -> Result<(Var, Vec<(usize, usize, usize)>)> {
    let f = model.forward(tape, &fx.input, Arrangement::Tokens(MaskMode::Sat), UseFlags::default(), &mut Dropout::off())?;
    let vg_o = vg_term(tape, f.s_o, fx.positive)?;
    let vg_i = vg_term(tape, f.s_i.expect("sat mode"), fx.positive)?;
    let on = tape.row_l2_normalize(f.fused.f_o);
    let inn = tape.row_l2_normalize(f.fused.f_i.expect("sat mode"));
    let sim = tape.matmul_t(on, inn);
    let mined = mine_from_similarity(tape.value(sim), &vec![true; fx.labels.len()]);
    let cor = tape.triplet_hinge(sim, &fx.triples, fx.loss.alpha);
    let cq = cls_term(tape, f.cls_q, &[fx.target_class])?;
    let co = cls_term(tape, f.cls_o, &fx.labels)?;
    let root = match component {
        Component::LVgO => vg_o,
        Component::LVgI => vg_i,
        Component::LCor => cor,
        Component::LCls => tape.weighted_sum(&[(cq, 1.0), (co, 1.0)]),
        Component::EndToEnd => {
            let w = fx.loss.w_cls;
            tape.weighted_sum(&[(vg_o, 1.0), (vg_i, 1.0), (cor, fx.loss.w_cor), (cq, w), (co, w)])
        }
    };
    Ok((root, mined))
}

fn loss_value(model: &Model<f64>, fx: &Fixture, component: Component) -> Result<f64> {
    let mut tape = Tape::new(&model.store);
    let (root, _) = loss_graph(model, &mut tape, fx, component)?;
    Ok(tape.scalar_value(root))
}

fn check_component(model: &Model<f64>, fx: &Fixture, component: Component, cfg: &GradcheckConfig) -> Result<ComponentReport> {
    let mut tape = Tape::new(&model.store);
    let (root, _) = loss_graph(model, &mut tape, fx, component)?;
    let grads = tape.backward(root);
    let mut entries: Vec<(ParamId, usize)> = Vec::new();
    for id in model.store.ids() {
        if tape.param_var(id).is_some() {
            entries.extend((0..model.store.get(id).data().len()).map(|k| (id, k)));
        }
    }
    let mut rng = stream(cfg.seed, &[0x4743, component as u64]);
    entries.shuffle(&mut rng);
    entries.truncate(cfg.samples);

    let mut checks = Vec::with_capacity(entries.len());
    let mut probe = model.clone();
    for (n, &(id, k)) in entries.iter().enumerate() {
        let var = tape.param_var(id).expect("touched");
        let mut analytic = grads.get(var).map_or(0.0, |g| g.data()[k]);
        if cfg.corrupt && n == 0 {
            analytic = analytic * 1.01 + 1e-3;
        }
        let orig = model.store.get(id).data()[k];
        probe.store.get_mut(id).data_mut()[k] = orig + cfg.h;
        let up = loss_value(&probe, fx, component)?;
        probe.store.get_mut(id).data_mut()[k] = orig - cfg.h;
        let down = loss_value(&probe, fx, component)?;
        probe.store.get_mut(id).data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * cfg.h);
        checks.push(ParamCheck {
            param: model.store.name(id).to_string(),
            index: k,
            analytic,
            numeric,
            rel_error: rel_error(analytic, numeric),
        });
    }
    let worst = checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error));
    let max_rel_error = worst.map_or(0.0, |c| c.rel_error);
    Ok(ComponentReport {
        component,
        worst: worst.map_or_else(String::new, |c| format!("{}[{}]", c.param, c.index)),
        passed: max_rel_error < cfg.tolerance,
        max_rel_error,
        checks,
    })
}

/// Runs every component check on one random tiny instance.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mcfg = tiny_config();
    let model = Model::<f64>::new(mcfg.clone(), cfg.seed)?;
    let mut rng = stream(cfg.seed, &[0x4658]);
    let input = random_sample::<f64, _>(&mcfg, 2, 2, 4, &mut rng);
    let mut fx = Fixture { input, positive: 1, labels: vec![0, 2], target_class: 2, triples: Vec::new(), loss: LossConfig::default() };
    {
        let mut tape = Tape::new(&model.store);
        let (_, mined) = loss_graph(&model, &mut tape, &fx, Component::LCor)?;
        fx.triples = mined;
    }
    let mut components = Vec::with_capacity(Component::ALL.len());
    for c in Component::ALL {
        components.push(check_component(&model, &fx, c, cfg)?);
    }
    let passed = components.iter().all(|c| c.passed);
    Ok(GradcheckReport { components, passed })
}
