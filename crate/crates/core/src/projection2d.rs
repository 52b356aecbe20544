//! Camera projection, per-frame 2D semantics records, 3D IoU and detector emulation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embeddings::normalize_segment;
use crate::error::{Result, SatError};
use crate::geometry::{cross, distance, dot3, normalize, sub, Box3D, Vec3};
use crate::rng::{key_of, stream};
use crate::scene_synth::{CameraFrame, ProposalRecord, SceneRecord};

/// A record is emitted only when more than this fraction of the object's points is in view.
pub const VISIBILITY_THRESHOLD: f64 = 0.2;
pub const ROI_DIM: usize = 32;
pub const GEO_DIM: usize = 10;
const HIST_BINS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Semantics2D {
    pub scene_id: String,
    pub proposal_id: usize,
    pub frame_id: usize,
    pub x_roi: Vec<f64>,
    pub x_cls: Vec<f64>,
    pub x_geo: Vec<f64>,
    pub visibility: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalMatch {
    pub detected_index: usize,
    pub gt_index: Option<usize>,
    pub iou: f64,
    pub correspondence_eligible: bool,
}

fn camera_basis(cam: &CameraFrame) -> (Vec3, Vec3) {
    let right = normalize(cross(cam.direction, [0.0, 0.0, 1.0]));
    let up = cross(right, cam.direction);
    (right, up)
}

/// Pinhole projection. Returns pixel coordinates (u right, v down) and visibility flags.
pub fn project_points(points: &[Vec3], cam: &CameraFrame) -> (Vec<[f64; 2]>, Vec<bool>) {
    let (right, up) = camera_basis(cam);
    let (w, h) = (f64::from(cam.width), f64::from(cam.height));
    let mut pixels = Vec::with_capacity(points.len());
    let mut visible = Vec::with_capacity(points.len());
    for p in points {
        let rel = sub(*p, cam.position);
        let depth = dot3(rel, cam.direction);
        if depth > 0.0 && depth.is_finite() {
            let u = cam.principal[0] + cam.focal * dot3(rel, right) / depth;
            let v = cam.principal[1] - cam.focal * dot3(rel, up) / depth;
            pixels.push([u, v]);
            visible.push((0.0..=w).contains(&u) && (0.0..=h).contains(&v));
        } else {
            pixels.push([f64::NAN, f64::NAN]);
            visible.push(false);
        }
    }
    (pixels, visible)
}

/// Region descriptor from the visible points: per-channel color histograms,
/// mean color, then box area, aspect ratio, visibility and two zeros.
fn roi_descriptor(colors: &[[f64; 3]], box_px: [f64; 4], image: [f64; 2], visibility: f64) -> Vec<f64> {
    let mut roi = vec![0.0; ROI_DIM];
    let n = colors.len() as f64;
    for c in colors {
        for ch in 0..3 {
            let bin = ((c[ch] * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
            roi[ch * HIST_BINS + bin] += 1.0 / n;
            roi[3 * HIST_BINS + ch] += c[ch] / n;
        }
    }
    let bw = box_px[2] - box_px[0];
    let bh = box_px[3] - box_px[1];
    roi[27] = (bw * bh) / (image[0] * image[1]);
    roi[28] = bw / bh.max(1.0);
    roi[29] = visibility;
    roi
}

/// Builds the 2D record of proposal `proposal_id` seen from frame `frame_id`,
/// or `None` when too little of it is visible.
pub fn make_semantics_record(
    scene: &SceneRecord,
    proposal_id: usize,
    frame_id: usize,
    num_classes: usize,
) -> Result<Option<Semantics2D>> {
    let prop = scene
        .proposals
        .get(proposal_id)
        .ok_or_else(|| SatError::Lookup(format!("proposal {proposal_id} not in scene {}", scene.scene_id)))?;
    let cam = scene
        .cameras
        .get(frame_id)
        .ok_or_else(|| SatError::Lookup(format!("frame {frame_id} not in scene {}", scene.scene_id)))?;
    if prop.class_id >= num_classes {
        return Err(SatError::Lookup(format!("class {} outside {num_classes} classes", prop.class_id)));
    }
    Ok(semantics_of(&scene.scene_id, prop, cam, num_classes))
}

fn semantics_of(scene_id: &str, prop: &ProposalRecord, cam: &CameraFrame, num_classes: usize) -> Option<Semantics2D> {
    let xyz: Vec<Vec3> = prop.segment.iter().map(|p| [p[0], p[1], p[2]]).collect();
    let (pix, vis) = project_points(&xyz, cam);
    let n_vis = vis.iter().filter(|&&v| v).count();
    if prop.segment.is_empty() {
        return None;
    }
    let visibility = n_vis as f64 / prop.segment.len() as f64;
    if visibility <= VISIBILITY_THRESHOLD {
        return None;
    }
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    let mut colors = Vec::with_capacity(n_vis);
    for ((px, &v), p) in pix.iter().zip(&vis).zip(&prop.segment) {
        if v {
            b[0] = b[0].min(px[0]);
            b[1] = b[1].min(px[1]);
            b[2] = b[2].max(px[0]);
            b[3] = b[3].max(px[1]);
            colors.push([p[3], p[4], p[5]]);
        }
    }
    let (w, h) = (f64::from(cam.width), f64::from(cam.height));
    let mut x_geo = vec![b[0] / w, b[1] / h, b[2] / w, b[3] / h];
    x_geo.extend_from_slice(&cam.position);
    x_geo.extend_from_slice(&cam.direction);
    let mut x_cls = vec![0.0; num_classes];
    x_cls[prop.class_id] = 1.0;
    Some(Semantics2D {
        scene_id: scene_id.to_string(),
        proposal_id: prop.proposal_id,
        frame_id: cam.frame_id,
        x_roi: roi_descriptor(&colors, b, [w, h], visibility),
        x_cls,
        x_geo,
        visibility,
    })
}

/// All emitted records of a scene, ordered by (proposal, frame).
pub fn scene_semantics(scene: &SceneRecord, num_classes: usize) -> Vec<Semantics2D> {
    let mut out = Vec::new();
    for prop in &scene.proposals {
        for cam in &scene.cameras {
            if let Some(r) = semantics_of(&scene.scene_id, prop, cam, num_classes) {
                out.push(r);
            }
        }
    }
    out
}

/// Axis-aligned 3D intersection over union.
pub fn iou3d(a: &Box3D, b: &Box3D) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let (amin, amax, bmin, bmax) = (a.min(), a.max(), b.min(), b.max());
    let mut inter = 1.0;
    for k in 0..3 {
        let lo = amin[k].max(bmin[k]);
        let hi = amax[k].min(bmax[k]);
        if hi <= lo {
            return Ok(0.0);
        }
        inter *= hi - lo;
    }
    let extent = |lo: Vec3, hi: Vec3| (hi[0] - lo[0]) * (hi[1] - lo[1]) * (hi[2] - lo[2]);
    let union = extent(amin, amax) + extent(bmin, bmax) - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Pairs each detected box with its best-IoU ground-truth box.
pub fn match_proposals(detected: &[Box3D], ground_truth: &[Box3D], threshold: f64) -> Result<Vec<ProposalMatch>> {
    if detected.is_empty() || ground_truth.is_empty() {
        return Err(SatError::Argument("match_proposals needs non-empty box lists".into()));
    }
    detected
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let mut best = (0.0, None);
            for (g, gt) in ground_truth.iter().enumerate() {
                let v = iou3d(d, gt)?;
                if v > best.0 {
                    best = (v, Some(g));
                }
            }
            Ok(ProposalMatch { detected_index: i, gt_index: best.1, iou: best.0, correspondence_eligible: best.0 >= threshold })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorNoiseConfig {
    /// Std of the box center jitter, meters.
    pub center_sigma: f64,
    /// Std of the log-size jitter.
    pub size_sigma: f64,
    pub drop_prob: f64,
    pub spurious: usize,
}

impl Default for DetectorNoiseConfig {
    fn default() -> Self {
        Self { center_sigma: 0.15, size_sigma: 0.2, drop_prob: 0.1, spurious: 1 }
    }
}

impl DetectorNoiseConfig {
    pub fn zero() -> Self {
        Self { center_sigma: 0.0, size_sigma: 0.0, drop_prob: 0.0, spurious: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput {
    pub proposals: Vec<ProposalRecord>,
    /// True when the emulated detector produced no proposals at all.
    pub degenerate: bool,
}

fn crop(scene: &SceneRecord, b: &Box3D) -> Vec<[f64; 6]> {
    scene.points.iter().filter(|p| b.contains(&p[..3])).copied().collect()
}

/// Emulates a detector by jittering, dropping and adding boxes. Deterministic in `seed`.
pub fn perturb_proposals(scene: &SceneRecord, noise: &DetectorNoiseConfig, seed: u64) -> DetectorOutput {
    let mut rng = stream(seed, &[key_of(&scene.scene_id)]);
    let center_n = Normal::new(0.0, noise.center_sigma.max(0.0)).expect("std");
    let size_n = Normal::new(0.0, noise.size_sigma.max(0.0)).expect("std");
    let exact = noise.center_sigma == 0.0 && noise.size_sigma == 0.0;
    let mut out: Vec<ProposalRecord> = Vec::new();

    for prop in &scene.proposals {
        if noise.drop_prob > 0.0 && rng.random_range(0.0..1.0) < noise.drop_prob {
            continue;
        }
        if exact {
            out.push(ProposalRecord { proposal_id: out.len(), ..prop.clone() });
            continue;
        }
        let mut center = prop.box3d.center;
        let mut size = prop.box3d.size;
        for k in 0..3 {
            center[k] += center_n.sample(&mut rng);
            size[k] *= size_n.sample(&mut rng).exp();
        }
        let b = Box3D::new(center, size);
        let mut seg = crop(scene, &b);
        if seg.is_empty() {
            seg = prop.segment.clone();
        }
        let Ok((_, x_offset)) = normalize_segment(&seg, scene.scene_centroid) else { continue };
        out.push(ProposalRecord {
            proposal_id: out.len(),
            segment: seg,
            class_id: prop.class_id,
            box3d: b,
            x_offset,
            color_tag: prop.color_tag.clone(),
            is_ground_truth: false,
        });
    }

    for _ in 0..noise.spurious {
        if scene.points.is_empty() || scene.proposals.is_empty() {
            break;
        }
        let anchor = scene.points[rng.random_range(0..scene.points.len())];
        let c = [anchor[0], anchor[1], anchor[2]];
        let size = [rng.random_range(0.3..1.2), rng.random_range(0.3..1.2), rng.random_range(0.3..1.2)];
        let b = Box3D::new(c, size);
        let seg = crop(scene, &b);
        let Ok((_, x_offset)) = normalize_segment(&seg, scene.scene_centroid) else { continue };
        let nearest = scene
            .proposals
            .iter()
            .min_by(|x, y| distance(x.box3d.center, c).total_cmp(&distance(y.box3d.center, c)))
            .expect("non-empty");
        out.push(ProposalRecord {
            proposal_id: out.len(),
            segment: seg,
            class_id: nearest.class_id,
            box3d: b,
            x_offset,
            color_tag: nearest.color_tag.clone(),
            is_ground_truth: false,
        });
    }

    let degenerate = out.is_empty();
    DetectorOutput { proposals: out, degenerate }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_synth::{generate_scene, SynthConfig};

    fn cam() -> CameraFrame {
        CameraFrame {
            frame_id: 0,
            position: [0.0, 0.0, 1.0],
            direction: [1.0, 0.0, 0.0],
            focal: 100.0,
            principal: [160.0, 120.0],
            width: 320,
            height: 240,
        }
    }

    #[test]
    fn on_axis_point_hits_principal_point() {
        let c = cam();
        let p = [c.position[0] + 2.0 * c.direction[0], c.position[1], c.position[2]];
        let (pix, vis) = project_points(&[p], &c);
        assert!((pix[0][0] - 160.0).abs() < 1e-12 && (pix[0][1] - 120.0).abs() < 1e-12);
        assert!(vis[0]);
    }

    #[test]
    fn point_behind_camera_is_invisible() {
        let (_, vis) = project_points(&[[-1.0, 0.0, 1.0]], &cam());
        assert!(!vis[0]);
    }

    #[test]
    fn offset_unit_cubes_have_iou_one_third() {
        let a = Box3D::new([0.0; 3], [1.0; 3]);
        let b = Box3D::new([0.5, 0.0, 0.0], [1.0; 3]);
        assert!((iou3d(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou3d(&a, &a).unwrap(), 1.0);
        let far = Box3D::new([5.0, 0.0, 0.0], [1.0; 3]);
        assert_eq!(iou3d(&a, &far).unwrap(), 0.0);
        assert!(matches!(iou3d(&a, &Box3D::new([0.0; 3], [1.0, 0.0, 1.0])), Err(SatError::Argument(_))));
    }

    #[test]
    fn low_iou_match_is_paired_but_ineligible() {
        let gt = [Box3D::new([0.0; 3], [1.0; 3])];
        // (1 - s) / (1 + s) = 0.4
        let s = 0.6 / 1.4;
        let det = [Box3D::new([s, 0.0, 0.0], [1.0; 3])];
        let m = match_proposals(&det, &gt, 0.5).unwrap();
        assert!((m[0].iou - 0.4).abs() < 1e-12);
        assert_eq!(m[0].gt_index, Some(0));
        assert!(!m[0].correspondence_eligible);
        assert!(match_proposals(&[], &gt, 0.5).is_err());
    }

    #[test]
    fn zero_noise_detector_returns_ground_truth() {
        let scene = generate_scene(&SynthConfig { points_per_object: [32, 32], ..SynthConfig::default() }, 5).unwrap();
        let out = perturb_proposals(&scene, &DetectorNoiseConfig::zero(), 9);
        assert_eq!(out.proposals, scene.proposals);
        assert!(!out.degenerate);
        let none = perturb_proposals(&scene, &DetectorNoiseConfig { drop_prob: 1.0, spurious: 0, ..DetectorNoiseConfig::zero() }, 9);
        assert!(none.proposals.is_empty() && none.degenerate);
    }

    #[test]
    fn emitted_records_match_visible_pixel_bounds() {
        let scene = generate_scene(&SynthConfig { points_per_object: [48, 48], ..SynthConfig::default() }, 21).unwrap();
        let c = 8;
        for prop in &scene.proposals {
            let mut any = false;
            for cam in &scene.cameras {
                let Some(rec) = make_semantics_record(&scene, prop.proposal_id, cam.frame_id, c).unwrap() else { continue };
                any = true;
                let xyz: Vec<Vec3> = prop.segment.iter().map(|p| [p[0], p[1], p[2]]).collect();
                let (pix, vis) = project_points(&xyz, cam);
                let vis_px: Vec<[f64; 2]> = pix.iter().zip(&vis).filter(|(_, &v)| v).map(|(p, _)| *p).collect();
                let x1 = vis_px.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
                let y2 = vis_px.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(rec.x_geo[0], x1 / 320.0);
                assert_eq!(rec.x_geo[3], y2 / 240.0);
                assert!(rec.x_geo[0] <= rec.x_geo[2] && rec.x_geo[1] <= rec.x_geo[3]);
                assert_eq!(rec.x_cls.iter().position(|&v| v == 1.0), Some(prop.class_id));
                assert_eq!(rec.x_cls.iter().sum::<f64>(), 1.0);
                assert!(rec.visibility > VISIBILITY_THRESHOLD);
                assert_eq!(rec.x_roi.len(), ROI_DIM);
            }
            assert!(any, "proposal {} has no record", prop.proposal_id);
        }
        assert!(make_semantics_record(&scene, 99, 0, c).is_err());
        assert!(make_semantics_record(&scene, 0, 99, c).is_err());
    }
}
