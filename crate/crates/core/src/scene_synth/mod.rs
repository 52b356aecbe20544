//! Procedural scenes and template referring queries with known ground truth.
//!
//! Scenes are single rectangular rooms holding parametric colored point
//! clusters. Point clouds carry surface jitter, shading, color noise and
//! clutter points; the per-frame 2D records derived from them are cleaner.

mod dataset;
mod grammar;

pub use dataset::{build_dataset, generate_dataset, Dataset, DatasetCounts, DatasetManifest, DatasetSplits, sha256_json};
pub use grammar::{
    enumerate_candidates, generate_query, Facets, GrammarConfig, LengthBucket, QueryCandidate, QueryRecord,
    SpatialKeyword, TemplateGrammar, Vocabulary,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embeddings::normalize_segment;
use crate::error::{Result, SatError};
use crate::geometry::{self, Box3D, Vec3};
use crate::projection2d::{project_points, VISIBILITY_THRESHOLD};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Box,
    Cylinder,
    Ellipsoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub primitive: Primitive,
    /// Nominal extent along x, y, z in meters.
    pub dims: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorSpec {
    pub name: String,
    pub rgb: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: Vec<ClassSpec>,
    pub palette: Vec<ColorSpec>,
    /// Inclusive proposal-count range per scene.
    pub proposals: [usize; 2],
    /// Inclusive range of same-class distractors for the scene's focus class.
    pub distractors: [usize; 2],
    pub points_per_object: [usize; 2],
    pub room_size: Vec3,
    pub cameras: usize,
    pub camera_height: f64,
    pub image_size: [u32; 2],
    pub fov_deg: f64,
    /// Relative uniform jitter of object dimensions.
    pub size_jitter: f64,
    /// Surface jitter std, as a fraction of the object's mean dimension.
    pub point_noise: f64,
    /// Per-point RGB noise std.
    pub color_noise: f64,
    /// Per-object brightness factor range.
    pub shading: [f64; 2],
    /// Fraction of each segment replaced by clutter points with random colors.
    pub outlier_fraction: f64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub queries_per_scene: usize,
    pub grammar: GrammarConfig,
    pub max_attempts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let class = |name: &str, primitive, dims: Vec3| ClassSpec { name: name.into(), primitive, dims };
        let color = |name: &str, rgb: Vec3| ColorSpec { name: name.into(), rgb };
        Self {
            classes: vec![
                class("chair", Primitive::Box, [0.55, 0.55, 0.9]),
                class("table", Primitive::Box, [1.2, 0.8, 0.75]),
                class("lamp", Primitive::Cylinder, [0.35, 0.35, 1.5]),
                class("ball", Primitive::Ellipsoid, [0.55, 0.55, 0.55]),
                class("cabinet", Primitive::Box, [0.6, 0.5, 1.4]),
                class("bin", Primitive::Cylinder, [0.45, 0.45, 0.6]),
                class("sofa", Primitive::Box, [1.8, 0.8, 0.8]),
                class("pillow", Primitive::Ellipsoid, [0.6, 0.45, 0.25]),
            ],
            palette: vec![
                color("red", [0.85, 0.15, 0.15]),
                color("green", [0.15, 0.7, 0.2]),
                color("blue", [0.15, 0.25, 0.85]),
                color("yellow", [0.9, 0.85, 0.15]),
                color("white", [0.92, 0.92, 0.92]),
                color("black", [0.1, 0.1, 0.1]),
            ],
            proposals: [6, 6],
            distractors: [1, 3],
            points_per_object: [128, 128],
            room_size: [6.0, 6.0, 3.0],
            cameras: 4,
            camera_height: 2.4,
            image_size: [320, 240],
            fov_deg: 90.0,
            size_jitter: 0.2,
            point_noise: 0.08,
            color_noise: 0.12,
            shading: [0.6, 1.1],
            outlier_fraction: 0.3,
            train_scenes: 400,
            val_scenes: 100,
            queries_per_scene: 2,
            grammar: GrammarConfig::default(),
            max_attempts: 200,
        }
    }
}

impl SynthConfig {
    /// Rejects configurations whose constraints cannot be met.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(SatError::Config(m));
        if self.classes.len() < 2 {
            return err(format!("need at least 2 classes, got {}", self.classes.len()));
        }
        if self.palette.len() < 2 {
            return err(format!("need at least 2 palette colors, got {}", self.palette.len()));
        }
        for c in &self.classes {
            if c.name.is_empty() || c.name.contains(char::is_whitespace) {
                return err(format!("class name {:?} must be a single non-empty word", c.name));
            }
            if c.dims.iter().any(|&d| d <= 0.0) {
                return err(format!("class {} has non-positive dims", c.name));
            }
        }
        for c in &self.palette {
            if c.name.is_empty() || c.name.contains(char::is_whitespace) {
                return err(format!("color name {:?} must be a single non-empty word", c.name));
            }
        }
        let [pmin, pmax] = self.proposals;
        if pmin < 2 || pmin > pmax {
            return err(format!("proposals range {:?} must satisfy 2 <= min <= max", self.proposals));
        }
        let [dmin, dmax] = self.distractors;
        if dmin < 1 || dmin > dmax || dmax > 6 {
            return err(format!("distractors range {:?} must satisfy 1 <= min <= max <= 6", self.distractors));
        }
        if dmin + 1 > pmax {
            return err(format!(
                "distractors: a target with {dmin} distractors needs {} proposals but proposals max is {pmax}",
                dmin + 1
            ));
        }
        let [ptmin, ptmax] = self.points_per_object;
        if ptmin < 1 || ptmin > ptmax {
            return err(format!("points_per_object range {:?} invalid", self.points_per_object));
        }
        if self.room_size.iter().any(|&s| s <= 0.0) {
            return err("room_size must be positive".into());
        }
        if self.cameras == 0 {
            return err("cameras must be >= 1".into());
        }
        if self.image_size[0] == 0 || self.image_size[1] == 0 {
            return err("image_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return err("outlier_fraction must be in [0, 1)".into());
        }
        if self.queries_per_scene == 0 {
            return err("queries_per_scene must be >= 1".into());
        }
        if self.max_attempts == 0 {
            return err("max_attempts must be >= 1".into());
        }
        self.grammar.validate()
    }

    pub fn palette_index(&self, name: &str) -> Option<usize> {
        self.palette.iter().position(|c| c.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub proposal_id: usize,
    /// `P×6` rows of x, y, z (meters), r, g, b (in `[0,1]`).
    pub segment: Vec<[f64; 6]>,
    pub class_id: usize,
    pub box3d: Box3D,
    /// Center offset from the scene centroid plus the pre-normalization radius.
    pub x_offset: [f64; 4],
    pub color_tag: String,
    pub is_ground_truth: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraFrame {
    pub frame_id: usize,
    pub position: Vec3,
    pub direction: Vec3,
    pub focal: f64,
    pub principal: [f64; 2],
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    pub points: Vec<[f64; 6]>,
    pub proposals: Vec<ProposalRecord>,
    pub cameras: Vec<CameraFrame>,
    pub scene_centroid: Vec3,
    pub room_bounds: Box3D,
}

impl SceneRecord {
    pub fn class_count(&self, class_id: usize) -> usize {
        self.proposals.iter().filter(|p| p.class_id == class_id).count()
    }
}

struct Placed {
    class_id: usize,
    color: usize,
    center: Vec3,
    dims: Vec3,
}

/// Generates one scene. Deterministic in `(config, seed)`.
pub fn generate_scene(config: &SynthConfig, seed: u64) -> Result<SceneRecord> {
    config.validate()?;
    for attempt in 0..config.max_attempts {
        let mut rng = stream(seed, &[attempt as u64]);
        if let Some(scene) = try_generate(config, seed, &mut rng) {
            return Ok(scene);
        }
    }
    Err(SatError::Config(format!(
        "could not place {}..{} objects in a {:?} room within {} attempts",
        config.proposals[0], config.proposals[1], config.room_size, config.max_attempts
    )))
}

fn try_generate(config: &SynthConfig, seed: u64, rng: &mut ChaCha8Rng) -> Option<SceneRecord> {
    let n_classes = config.classes.len();
    let [pmin, pmax] = config.proposals;
    let [dmin, dmax] = config.distractors;
    let m = rng.random_range(pmin.max(dmin + 1)..=pmax);
    let focus = rng.random_range(0..n_classes);
    let d = rng.random_range(dmin..=dmax.min(m - 1));

    let mut class_ids = vec![focus; d + 1];
    let mut others: Vec<usize> = (0..n_classes).filter(|&c| c != focus).collect();
    while class_ids.len() < m {
        if others.is_empty() {
            class_ids.push(rng.random_range(0..n_classes));
        } else {
            let k = rng.random_range(0..others.len());
            class_ids.push(others.swap_remove(k));
        }
    }

    let room = config.room_size;
    let wall_gap = 0.15;
    let mut placed: Vec<Placed> = Vec::with_capacity(m);
    for &class_id in &class_ids {
        let spec = &config.classes[class_id];
        let j = config.size_jitter;
        let dims = [
            spec.dims[0] * rng.random_range(1.0 - j..=1.0 + j),
            spec.dims[1] * rng.random_range(1.0 - j..=1.0 + j),
            (spec.dims[2] * rng.random_range(1.0 - j..=1.0 + j)).min(room[2] * 0.9),
        ];
        let mut ok = false;
        for _ in 0..200 {
            let lo_x = wall_gap + dims[0] / 2.0;
            let lo_y = wall_gap + dims[1] / 2.0;
            if room[0] - lo_x <= lo_x || room[1] - lo_y <= lo_y {
                return None;
            }
            let cx = rng.random_range(lo_x..room[0] - lo_x);
            let cy = rng.random_range(lo_y..room[1] - lo_y);
            let clear = placed.iter().all(|p| {
                (cx - p.center[0]).abs() > (dims[0] + p.dims[0]) / 2.0 + 0.1
                    || (cy - p.center[1]).abs() > (dims[1] + p.dims[1]) / 2.0 + 0.1
            });
            if clear {
                let color = rng.random_range(0..config.palette.len());
                placed.push(Placed { class_id, color, center: [cx, cy, dims[2] / 2.0], dims });
                ok = true;
                break;
            }
        }
        if !ok {
            return None;
        }
    }

    let room_bounds = Box3D::from_min_max([0.0, 0.0, 0.0], room);
    let mut segments = Vec::with_capacity(m);
    for p in &placed {
        let n = rng.random_range(config.points_per_object[0]..=config.points_per_object[1]);
        segments.push(sample_object(config, p, n, &room_bounds, rng));
    }

    let points: Vec<[f64; 6]> = segments.iter().flatten().copied().collect();
    let inv_n = 1.0 / points.len() as f64;
    let mut centroid = [0.0; 3];
    for p in &points {
        for a in 0..3 {
            centroid[a] += p[a] * inv_n;
        }
    }

    let mut proposals = Vec::with_capacity(m);
    for (k, (p, seg)) in placed.iter().zip(segments).enumerate() {
        let (_, x_offset) = normalize_segment(&seg, centroid).ok()?;
        let box3d = Box3D::bounding(&seg)?;
        proposals.push(ProposalRecord {
            proposal_id: k,
            segment: seg,
            class_id: p.class_id,
            box3d,
            x_offset,
            color_tag: config.palette[p.color].name.clone(),
            is_ground_truth: true,
        });
    }

    let cameras = ring_cameras(config);
    // every object must be seen well enough in at least one frame
    for prop in &proposals {
        let xyz: Vec<Vec3> = prop.segment.iter().map(|p| [p[0], p[1], p[2]]).collect();
        let seen = cameras.iter().any(|cam| {
            let (_, vis) = project_points(&xyz, cam);
            let frac = vis.iter().filter(|&&v| v).count() as f64 / vis.len() as f64;
            frac > VISIBILITY_THRESHOLD
        });
        if !seen {
            return None;
        }
    }

    Some(SceneRecord { scene_id: format!("s{seed:016x}"), points, proposals, cameras, scene_centroid: centroid, room_bounds })
}

/// Cameras on a ring outside the room at fixed height, looking at the room center.
pub fn ring_cameras(config: &SynthConfig) -> Vec<CameraFrame> {
    let room = config.room_size;
    let center = [room[0] / 2.0, room[1] / 2.0, 0.5];
    let radius = 0.5 * (room[0] * room[0] + room[1] * room[1]).sqrt() + 1.0;
    let [w, h] = config.image_size;
    let focal = (f64::from(w) / 2.0) / (config.fov_deg.to_radians() / 2.0).tan();
    (0..config.cameras)
        .map(|l| {
            let theta = std::f64::consts::TAU * (l as f64 + 0.5) / config.cameras as f64;
            let position = [center[0] + radius * theta.cos(), center[1] + radius * theta.sin(), config.camera_height];
            let direction = geometry::normalize(geometry::sub(center, position));
            CameraFrame {
                frame_id: l,
                position,
                direction,
                focal,
                principal: [f64::from(w) / 2.0, f64::from(h) / 2.0],
                width: w,
                height: h,
            }
        })
        .collect()
}

fn sample_object(config: &SynthConfig, p: &Placed, n: usize, room: &Box3D, rng: &mut ChaCha8Rng) -> Vec<[f64; 6]> {
    let spec = &config.classes[p.class_id];
    let base = config.palette[p.color].rgb;
    let shade = rng.random_range(config.shading[0]..=config.shading[1]);
    let mean_dim = (p.dims[0] + p.dims[1] + p.dims[2]) / 3.0;
    let pos_noise = Normal::new(0.0, (config.point_noise * mean_dim).max(1e-12)).expect("std");
    let col_noise = Normal::new(0.0, config.color_noise.max(1e-12)).expect("std");
    let n_out = ((n as f64) * config.outlier_fraction).round() as usize;
    let (lo, hi) = (room.min(), room.max());
    let clamp = |v: f64, a: usize| v.clamp(lo[a], hi[a]);
    let half = [p.dims[0] / 2.0, p.dims[1] / 2.0, p.dims[2] / 2.0];

    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        if k < n - n_out {
            let local = match spec.primitive {
                Primitive::Box => sample_box_surface(half, rng),
                Primitive::Cylinder => sample_cylinder_surface(half, rng),
                Primitive::Ellipsoid => sample_ellipsoid_surface(half, rng),
            };
            let mut pt = [0.0; 6];
            for a in 0..3 {
                pt[a] = clamp(p.center[a] + local[a] + pos_noise.sample(rng), a);
            }
            for c in 0..3 {
                pt[3 + c] = (base[c] * shade + col_noise.sample(rng)).clamp(0.0, 1.0);
            }
            out.push(pt);
        } else {
            // clutter from the surroundings of the object
            let mut pt = [0.0; 6];
            for a in 0..3 {
                pt[a] = clamp(p.center[a] + rng.random_range(-1.5..1.5) * half[a], a);
            }
            for c in 0..3 {
                pt[3 + c] = rng.random_range(0.0..1.0);
            }
            out.push(pt);
        }
    }
    out
}

fn sample_box_surface(h: Vec3, rng: &mut ChaCha8Rng) -> Vec3 {
    // five faces; the bottom rests on the floor and is never scanned
    let areas = [h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2], h[0] * h[1]];
    let total: f64 = areas.iter().sum();
    let mut u = rng.random_range(0.0..total);
    let mut face = 4;
    for (f, a) in areas.iter().enumerate() {
        if u < *a {
            face = f;
            break;
        }
        u -= a;
    }
    let s = |rng: &mut ChaCha8Rng, e: f64| rng.random_range(-e..=e);
    match face {
        0 => [h[0], s(rng, h[1]), s(rng, h[2])],
        1 => [-h[0], s(rng, h[1]), s(rng, h[2])],
        2 => [s(rng, h[0]), h[1], s(rng, h[2])],
        3 => [s(rng, h[0]), -h[1], s(rng, h[2])],
        _ => [s(rng, h[0]), s(rng, h[1]), h[2]],
    }
}

fn sample_cylinder_surface(h: Vec3, rng: &mut ChaCha8Rng) -> Vec3 {
    let side = std::f64::consts::PI * (h[0] + h[1]) * 2.0 * h[2];
    let top = std::f64::consts::PI * h[0] * h[1];
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    if rng.random_range(0.0..side + top) < side {
        [h[0] * theta.cos(), h[1] * theta.sin(), rng.random_range(-h[2]..=h[2])]
    } else {
        let r = rng.random_range(0.0f64..1.0).sqrt();
        [h[0] * r * theta.cos(), h[1] * r * theta.sin(), h[2]]
    }
}

fn sample_ellipsoid_surface(h: Vec3, rng: &mut ChaCha8Rng) -> Vec3 {
    let normal = Normal::new(0.0, 1.0).expect("std");
    loop {
        let v: Vec3 = [normal.sample(rng), normal.sample(rng), normal.sample(rng)];
        let n = geometry::norm(v);
        if n > 1e-9 {
            return [h[0] * v[0] / n, h[1] * v[1] / n, h[2] * v[2] / n];
        }
    }
}
