//! Template grammar, closed vocabulary and query generation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{SceneRecord, SynthConfig};
use crate::error::{Result, SatError};
use crate::geometry::{distance, Vec3};
use crate::rng::{key_of, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpatialKeyword {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "closest")]
    Closest,
    #[serde(rename = "farthest")]
    Farthest,
    #[serde(rename = "next-to")]
    NextTo,
    #[serde(rename = "left-of")]
    LeftOf,
    #[serde(rename = "right-of")]
    RightOf,
    #[serde(rename = "corner")]
    Corner,
}

impl SpatialKeyword {
    pub const ALL: [SpatialKeyword; 7] = [
        SpatialKeyword::None,
        SpatialKeyword::Closest,
        SpatialKeyword::Farthest,
        SpatialKeyword::NextTo,
        SpatialKeyword::LeftOf,
        SpatialKeyword::RightOf,
        SpatialKeyword::Corner,
    ];

    pub fn label(self) -> &'static str {
        match self {
            SpatialKeyword::None => "none",
            SpatialKeyword::Closest => "closest",
            SpatialKeyword::Farthest => "farthest",
            SpatialKeyword::NextTo => "next-to",
            SpatialKeyword::LeftOf => "left-of",
            SpatialKeyword::RightOf => "right-of",
            SpatialKeyword::Corner => "corner",
        }
    }

    fn needs_anchor(self) -> bool {
        matches!(
            self,
            SpatialKeyword::Closest
                | SpatialKeyword::Farthest
                | SpatialKeyword::NextTo
                | SpatialKeyword::LeftOf
                | SpatialKeyword::RightOf
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LengthBucket {
    #[serde(rename = "2-6")]
    Upto6,
    #[serde(rename = "7-8")]
    From7To8,
    #[serde(rename = "9-10")]
    From9To10,
    #[serde(rename = "11-13")]
    From11To13,
    #[serde(rename = "14+")]
    From14,
}

impl LengthBucket {
    pub const ALL: [LengthBucket; 5] =
        [LengthBucket::Upto6, LengthBucket::From7To8, LengthBucket::From9To10, LengthBucket::From11To13, LengthBucket::From14];

    pub fn of_len(k: usize) -> Self {
        match k {
            0..=6 => LengthBucket::Upto6,
            7..=8 => LengthBucket::From7To8,
            9..=10 => LengthBucket::From9To10,
            11..=13 => LengthBucket::From11To13,
            _ => LengthBucket::From14,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LengthBucket::Upto6 => "2-6",
            LengthBucket::From7To8 => "7-8",
            LengthBucket::From9To10 => "9-10",
            LengthBucket::From11To13 => "11-13",
            LengthBucket::From14 => "14+",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Facets {
    pub distractor_count: usize,
    pub length_bucket: LengthBucket,
    pub spatial_keyword: SpatialKeyword,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub scene_id: String,
    pub text: String,
    pub tokens: Vec<usize>,
    pub target_proposal_index: usize,
    pub target_class_id: usize,
    pub anchor_proposal_index: Option<usize>,
    pub facets: Facets,
}

/// Grammar settings carried in the synthesis config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrammarConfig {
    pub color_template: bool,
    /// Sampling weight of the color template relative to each admissible relation.
    pub color_weight: f64,
    pub relations: Vec<SpatialKeyword>,
    /// Minimum separation (meters) that makes a distance/axis relation unambiguous.
    pub margin: f64,
    pub next_to_radius: f64,
    pub corner_radius: f64,
    pub prefixes: Vec<String>,
    pub suffixes: Vec<String>,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self {
            color_template: true,
            color_weight: 4.0,
            relations: vec![
                SpatialKeyword::Closest,
                SpatialKeyword::Farthest,
                SpatialKeyword::NextTo,
                SpatialKeyword::LeftOf,
                SpatialKeyword::RightOf,
                SpatialKeyword::Corner,
            ],
            margin: 0.3,
            next_to_radius: 1.5,
            corner_radius: 1.6,
            prefixes: ["", "find", "select", "please find", "look for", "point to"].map(String::from).to_vec(),
            suffixes: ["", "in this room", "in the room", "please"].map(String::from).to_vec(),
        }
    }
}

impl GrammarConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.color_template && self.relations.is_empty() {
            return Err(SatError::Config("grammar has no templates".into()));
        }
        if !(self.color_weight > 0.0 && self.color_weight.is_finite()) {
            return Err(SatError::Config("grammar.color_weight must be positive".into()));
        }
        if self.relations.contains(&SpatialKeyword::None) {
            return Err(SatError::Config("'none' is not a relation".into()));
        }
        if self.margin < 0.0 || self.next_to_radius <= 0.0 || self.corner_radius <= 0.0 {
            return Err(SatError::Config("grammar distances must be positive".into()));
        }
        if self.prefixes.is_empty() || self.suffixes.is_empty() {
            return Err(SatError::Config("prefix/suffix lists need at least one (possibly empty) entry".into()));
        }
        Ok(())
    }
}

/// Closed vocabulary; index 0 is padding and index 1 the sentinel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub words: Vec<String>,
}

impl Vocabulary {
    pub const PAD: usize = 0;
    pub const CLS: usize = 1;
    const FUNCTION_WORDS: [&'static str; 12] =
        ["the", "closest", "to", "farthest", "from", "next", "left", "of", "right", "in", "corner", "room"];

    pub fn from_config(config: &SynthConfig) -> Self {
        let mut words: Vec<String> = vec!["<pad>".into(), "<cls>".into()];
        let mut push = |w: &str| {
            if !w.is_empty() && !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        };
        for w in Self::FUNCTION_WORDS {
            push(w);
        }
        for phrase in config.grammar.prefixes.iter().chain(&config.grammar.suffixes) {
            for w in phrase.split_whitespace() {
                push(w);
            }
        }
        for c in &config.classes {
            push(&c.name);
        }
        for c in &config.palette {
            push(&c.name);
        }
        Self { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn index(&self, w: &str) -> Option<usize> {
        self.words.iter().position(|x| x == w)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| self.index(w).ok_or_else(|| SatError::Argument(format!("word {w:?} not in vocabulary"))))
            .collect()
    }
}

/// Grammar plus the scene vocabulary it renders into.
#[derive(Debug, Clone)]
pub struct TemplateGrammar {
    pub config: GrammarConfig,
    pub class_names: Vec<String>,
    pub color_names: Vec<String>,
    pub vocab: Vocabulary,
}

impl TemplateGrammar {
    pub fn new(config: &SynthConfig) -> Self {
        Self {
            config: config.grammar.clone(),
            class_names: config.classes.iter().map(|c| c.name.clone()).collect(),
            color_names: config.palette.iter().map(|c| c.name.clone()).collect(),
            vocab: Vocabulary::from_config(config),
        }
    }
}

/// One unambiguous query instance before surface realization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QueryCandidate {
    pub keyword: SpatialKeyword,
    pub target: usize,
    pub anchor: Option<usize>,
}

fn center(scene: &SceneRecord, k: usize) -> Vec3 {
    scene.proposals[k].box3d.center
}

/// Resolves a relation over candidate objects. Returns the unique referent, if any.
fn resolve(scene: &SceneRecord, g: &GrammarConfig, kw: SpatialKeyword, cands: &[usize], anchor: Option<usize>) -> Option<usize> {
    let margin = g.margin;
    match kw {
        SpatialKeyword::Closest | SpatialKeyword::Farthest => {
            let a = center(scene, anchor?);
            let mut d: Vec<(f64, usize)> = cands.iter().map(|&c| (distance(center(scene, c), a), c)).collect();
            d.sort_by(|x, y| x.0.total_cmp(&y.0));
            if kw == SpatialKeyword::Farthest {
                d.reverse();
            }
            ((d[0].0 - d[1].0).abs() >= margin).then_some(d[0].1)
        }
        SpatialKeyword::NextTo => {
            let a = center(scene, anchor?);
            let near: Vec<usize> = cands.iter().copied().filter(|&c| distance(center(scene, c), a) <= g.next_to_radius).collect();
            let far_ok = cands
                .iter()
                .filter(|c| !near.contains(c))
                .all(|&c| distance(center(scene, c), a) >= g.next_to_radius + margin);
            (near.len() == 1 && far_ok).then(|| near[0])
        }
        SpatialKeyword::LeftOf | SpatialKeyword::RightOf => {
            let ax = center(scene, anchor?)[0];
            if cands.iter().any(|&c| (center(scene, c)[0] - ax).abs() < margin) {
                return None;
            }
            let side: Vec<usize> = cands
                .iter()
                .copied()
                .filter(|&c| {
                    let x = center(scene, c)[0];
                    if kw == SpatialKeyword::LeftOf {
                        x < ax
                    } else {
                        x > ax
                    }
                })
                .collect();
            (side.len() == 1).then(|| side[0])
        }
        SpatialKeyword::Corner => {
            let (lo, hi) = (scene.room_bounds.min(), scene.room_bounds.max());
            let corners = [[lo[0], lo[1]], [hi[0], lo[1]], [lo[0], hi[1]], [hi[0], hi[1]]];
            let corner_dist = |c: usize| {
                let p = center(scene, c);
                corners.iter().map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()).fold(f64::INFINITY, f64::min)
            };
            let near: Vec<usize> = cands.iter().copied().filter(|&c| corner_dist(c) <= g.corner_radius).collect();
            let far_ok = cands.iter().filter(|c| !near.contains(c)).all(|&c| corner_dist(c) >= g.corner_radius + margin);
            (near.len() == 1 && far_ok).then(|| near[0])
        }
        SpatialKeyword::None => None,
    }
}

/// All unambiguous query instances the grammar admits in `scene`.
pub fn enumerate_candidates(scene: &SceneRecord, grammar: &TemplateGrammar) -> Vec<QueryCandidate> {
    let g = &grammar.config;
    let n_classes = grammar.class_names.len();
    let mut out = Vec::new();
    for class in 0..n_classes {
        let members: Vec<usize> = (0..scene.proposals.len()).filter(|&k| scene.proposals[k].class_id == class).collect();
        if !(2..=7).contains(&members.len()) {
            continue;
        }
        if g.color_template {
            for &t in &members {
                let tag = &scene.proposals[t].color_tag;
                if members.iter().filter(|&&o| &scene.proposals[o].color_tag == tag).count() == 1 {
                    out.push(QueryCandidate { keyword: SpatialKeyword::None, target: t, anchor: None });
                }
            }
        }
        for &kw in &g.relations {
            if kw.needs_anchor() {
                for a in 0..scene.proposals.len() {
                    let ac = scene.proposals[a].class_id;
                    if ac == class || scene.class_count(ac) != 1 {
                        continue;
                    }
                    if let Some(t) = resolve(scene, g, kw, &members, Some(a)) {
                        out.push(QueryCandidate { keyword: kw, target: t, anchor: Some(a) });
                    }
                }
            } else if let Some(t) = resolve(scene, g, kw, &members, None) {
                out.push(QueryCandidate { keyword: kw, target: t, anchor: None });
            }
        }
    }
    out
}

fn render(scene: &SceneRecord, grammar: &TemplateGrammar, c: &QueryCandidate) -> String {
    let cls = &grammar.class_names[scene.proposals[c.target].class_id];
    let anchor = || c.anchor.map(|a| grammar.class_names[scene.proposals[a].class_id].clone()).unwrap_or_default();
    match c.keyword {
        SpatialKeyword::None => format!("the {} {cls}", scene.proposals[c.target].color_tag),
        SpatialKeyword::Closest => format!("the {cls} closest to the {}", anchor()),
        SpatialKeyword::Farthest => format!("the {cls} farthest from the {}", anchor()),
        SpatialKeyword::NextTo => format!("the {cls} next to the {}", anchor()),
        SpatialKeyword::LeftOf => format!("the {cls} left of the {}", anchor()),
        SpatialKeyword::RightOf => format!("the {cls} right of the {}", anchor()),
        SpatialKeyword::Corner => format!("the {cls} in the corner"),
    }
}

/// Builds the query record for a resolved candidate with the given prefix/suffix.
pub fn realize(
    scene: &SceneRecord,
    grammar: &TemplateGrammar,
    cand: &QueryCandidate,
    prefix: &str,
    suffix: &str,
    query_id: String,
) -> Result<QueryRecord> {
    let core = render(scene, grammar, cand);
    let text = [prefix, core.as_str(), suffix].iter().filter(|s| !s.is_empty()).copied().collect::<Vec<_>>().join(" ");
    let tokens = grammar.vocab.tokenize(&text)?;
    let target_class_id = scene.proposals[cand.target].class_id;
    Ok(QueryRecord {
        query_id,
        scene_id: scene.scene_id.clone(),
        facets: Facets {
            distractor_count: scene.class_count(target_class_id) - 1,
            length_bucket: LengthBucket::of_len(tokens.len()),
            spatial_keyword: cand.keyword,
        },
        text,
        tokens,
        target_proposal_index: cand.target,
        target_class_id,
        anchor_proposal_index: cand.anchor,
    })
}

/// Picks one unambiguous query: a template kind among those the scene admits
/// (uniform except for the color template's weight), then an instance of it,
/// then a prefix and suffix.
pub fn generate_query(scene: &SceneRecord, grammar: &TemplateGrammar, seed: u64) -> Result<QueryRecord> {
    let cands = enumerate_candidates(scene, grammar);
    if cands.is_empty() {
        return Err(SatError::NoValidQuery(format!("scene {} admits no unambiguous query", scene.scene_id)));
    }
    let mut kinds: Vec<SpatialKeyword> = cands.iter().map(|c| c.keyword).collect();
    kinds.sort();
    kinds.dedup();
    let mut rng = stream(seed, &[key_of(&scene.scene_id)]);
    let g = &grammar.config;
    let weight = |k: SpatialKeyword| if k == SpatialKeyword::None { g.color_weight } else { 1.0 };
    let mut u = rng.random_range(0.0..kinds.iter().map(|&k| weight(k)).sum::<f64>());
    let mut kind = kinds[kinds.len() - 1];
    for &k in &kinds {
        if u < weight(k) {
            kind = k;
            break;
        }
        u -= weight(k);
    }
    let of_kind: Vec<&QueryCandidate> = cands.iter().filter(|c| c.keyword == kind).collect();
    let cand = of_kind[rng.random_range(0..of_kind.len())];
    let prefix = &g.prefixes[rng.random_range(0..g.prefixes.len())];
    let suffix = &g.suffixes[rng.random_range(0..g.suffixes.len())];
    realize(scene, grammar, cand, prefix, suffix, format!("{}_q{seed:x}", scene.scene_id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Box3D;
    use crate::scene_synth::{ProposalRecord, SynthConfig};

    fn obj(k: usize, class_id: usize, color: &str, c: Vec3) -> ProposalRecord {
        ProposalRecord {
            proposal_id: k,
            segment: vec![[c[0], c[1], c[2], 0.5, 0.5, 0.5]],
            class_id,
            box3d: Box3D::new(c, [0.4, 0.4, 0.4]),
            x_offset: [0.0, 0.0, 0.0, 1.0],
            color_tag: color.into(),
            is_ground_truth: true,
        }
    }

    fn scene(props: Vec<ProposalRecord>) -> SceneRecord {
        SceneRecord {
            scene_id: "t".into(),
            points: vec![],
            proposals: props,
            cameras: vec![],
            scene_centroid: [3.0, 3.0, 0.5],
            room_bounds: Box3D::from_min_max([0.0; 3], [6.0, 6.0, 3.0]),
        }
    }

    fn only(cfg: GrammarConfig) -> TemplateGrammar {
        let mut sc = SynthConfig::default();
        sc.grammar = cfg;
        TemplateGrammar::new(&sc)
    }

    #[test]
    fn unique_red_chair_is_the_color_target() {
        let s = scene(vec![obj(0, 0, "red", [1.0, 1.0, 0.4]), obj(1, 0, "blue", [4.0, 4.0, 0.4]), obj(2, 1, "red", [3.0, 1.0, 0.4])]);
        let g = only(GrammarConfig {
            relations: vec![],
            prefixes: vec![String::new()],
            suffixes: vec![String::new()],
            ..GrammarConfig::default()
        });
        let cands = enumerate_candidates(&s, &g);
        let red = cands.iter().find(|c| s.proposals[c.target].color_tag == "red").unwrap();
        assert_eq!(red.target, 0);
        let q = realize(&s, &g, red, "", "", "q".into()).unwrap();
        assert_eq!(q.text, "the red chair");
        assert_eq!(q.facets.spatial_keyword, SpatialKeyword::None);
        assert_eq!(q.facets.distractor_count, 1);
        assert_eq!(q.tokens.len(), 3);
    }

    #[test]
    fn length_buckets() {
        assert_eq!(LengthBucket::of_len(2), LengthBucket::Upto6);
        assert_eq!(LengthBucket::of_len(6), LengthBucket::Upto6);
        assert_eq!(LengthBucket::of_len(7), LengthBucket::From7To8);
        assert_eq!(LengthBucket::of_len(10), LengthBucket::From9To10);
        assert_eq!(LengthBucket::of_len(13), LengthBucket::From11To13);
        assert_eq!(LengthBucket::of_len(14), LengthBucket::From14);
    }

    #[test]
    fn ambiguous_scene_has_no_query() {
        // two identical-colored chairs, no anchors
        let s = scene(vec![obj(0, 0, "red", [1.0, 1.0, 0.4]), obj(1, 0, "red", [1.2, 1.3, 0.4])]);
        let g = only(GrammarConfig { relations: vec![SpatialKeyword::Corner], corner_radius: 2.0, ..GrammarConfig::default() });
        assert!(matches!(generate_query(&s, &g, 1), Err(SatError::NoValidQuery(_))));
    }

    #[test]
    fn vocabulary_is_closed_and_small() {
        let v = Vocabulary::from_config(&SynthConfig::default());
        assert_eq!(v.index("<pad>"), Some(Vocabulary::PAD));
        assert_eq!(v.index("<cls>"), Some(Vocabulary::CLS));
        assert!(v.len() <= 64, "vocabulary has {} words", v.len());
        assert!(v.tokenize("the purple chair").is_err());
    }
}
