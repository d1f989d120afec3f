//! Spur detection, pruning-point estimation and cutting poses.
//!
//! Detection is an oracle over the ground-truth skeleton with injectable
//! centroid jitter and confidence noise. Inside each detected spur region the
//! skeleton is sampled, described by pooled HOG features, clustered, and the
//! clusters whose structure resembles a prunable cane yield a pair of points
//! straddling the cut location on each cane.

mod hog;
mod kmeans;
mod morphometry;

pub use hog::{compute_hog, mp_hog, HogDescriptor, MpHog};
pub use kmeans::{kmeans, kmeans_restarts, ClusterResult};
pub use morphometry::{
    classify, cluster_features, graph_morphometry, kernel, ClusterMorphology, MorphLabel, CANE_TEMPLATE, FEATURE_DIM,
};

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DVector, Point2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rodrigues, Mat3, Vec3};
use crate::vine_gen::{CameraModel, RasterImage, SegmentId, SegmentKind, VineSkeleton};

pub const PERCEPTION_FORMAT_VERSION: u32 = 1;
pub const DETECTION_THRESHOLD: f64 = 0.7;

/// Nominal branch axis of the cutter: canes are cut across world z.
pub const NOMINAL_BRANCH_AXIS: Vec3 = Vec3::new(0.0, 0.0, 1.0);

const BBOX_MARGIN_PX: f64 = 10.0;
const PROJECTION_SAMPLES: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum PerceptionError {
    #[error("oracle detection needs a ground-truth skeleton")]
    MissingGroundTruth,
    #[error("patch {width}x{height} is smaller than one {cell_size} px cell")]
    PatchTooSmall { width: usize, height: usize, cell_size: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("no descriptors to pool")]
    EmptyInput,
    #[error("cannot form {k} clusters from {points} points")]
    InvalidK { k: usize, points: usize },
    #[error("pruning points coincide")]
    DegenerateCut,
    #[error("pruning point is not in front of the camera")]
    Unprojectable,
    #[error("no detections to process")]
    NoDetections,
    #[error("invalid perception config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorNoise {
    pub centroid_sigma_px: f64,
    pub confidence_sigma: f64,
    /// Confidence overrides by spur id.
    pub forced_confidence: BTreeMap<SegmentId, f64>,
    pub seed: u64,
}

impl Default for DetectorNoise {
    fn default() -> Self {
        Self { centroid_sigma_px: 0.0, confidence_sigma: 0.0, forced_confidence: BTreeMap::new(), seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptionConfig {
    pub detection_threshold: f64,
    pub cell_size: usize,
    pub bins: usize,
    /// Side of the square patch described around each sample (px).
    pub patch_size: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Samples on either side pooled into one descriptor.
    pub pool_radius: usize,
    pub clusters: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub tau_morph: f64,
    /// Spacing of skeleton samples (m).
    pub sample_spacing: f64,
    /// Distance of each point of a pair from the cut location (m).
    pub cut_half_width: f64,
    pub seed: u64,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            detection_threshold: DETECTION_THRESHOLD,
            cell_size: 8,
            bins: 9,
            patch_size: 16,
            alpha: 1.0,
            beta: 1.0,
            pool_radius: 2,
            clusters: 2,
            restarts: 10,
            max_iter: 100,
            tau_morph: 0.8,
            sample_spacing: 0.005,
            cut_half_width: 0.005,
            seed: 0,
        }
    }
}

impl PerceptionConfig {
    pub fn validate(&self) -> Result<(), PerceptionError> {
        let bad = |m: &str| Err(PerceptionError::InvalidConfig(m.into()));
        if !(0.0..=1.0).contains(&self.detection_threshold) {
            return bad("detection threshold must lie in [0, 1]");
        }
        if self.cell_size == 0 || self.bins == 0 || self.patch_size < self.cell_size {
            return bad("patch must hold at least one non-empty cell");
        }
        if !(self.alpha >= 0.0 && self.beta > 0.0) {
            return bad("need alpha >= 0 and beta > 0");
        }
        if self.clusters == 0 {
            return bad("cluster count must be positive");
        }
        if !(self.sample_spacing > 0.0 && self.cut_half_width > 0.0) {
            return bad("sample spacing and cut half-width must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpurDetection {
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub confidence: f64,
    pub centroid: Point2<f64>,
    /// Spur the oracle drew the box around.
    pub spur_id: SegmentId,
}

impl SpurDetection {
    pub fn contains(&self, p: &Point2<f64>) -> bool {
        let [x, y, w, h] = self.bbox;
        p.x >= x && p.x <= x + w && p.y >= y && p.y <= y + h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningPoint {
    pub position: Vec3,
    pub segment_id: SegmentId,
    /// Fraction along the segment.
    pub arc: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutPose {
    /// Rotation taking the cut line onto the nominal branch axis.
    pub rotation: Mat3,
    /// Cut centre (m).
    pub translation: Vec3,
    pub p1: PruningPoint,
    pub p2: PruningPoint,
    pub phi: f64,
    pub axis: Vec3,
    /// Orientation of the cutter at the cut: x along the cane, z the approach.
    pub tool_rotation: Mat3,
    /// Epipolar-style consistency residual of the two points.
    pub residual: f64,
}

impl CutPose {
    pub fn segment_id(&self) -> SegmentId {
        self.p1.segment_id
    }
}

fn points_of_subtree(skeleton: &VineSkeleton, root: SegmentId, n: usize) -> Vec<Vec3> {
    skeleton
        .subtree(root)
        .iter()
        .filter_map(|&id| skeleton.segment(id))
        .flat_map(|s| (0..=n).map(move |i| s.point_at(i as f64 / n as f64)))
        .collect()
}

fn projected_bbox(camera: &CameraModel, points: &[Vec3], width: usize, height: usize) -> Option<[f64; 4]> {
    let px: Vec<Point2<f64>> = points.iter().filter_map(|p| camera.project(p)).collect();
    if px.is_empty() {
        return None;
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in &px {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    let x0 = (x0 - BBOX_MARGIN_PX).max(0.0);
    let y0 = (y0 - BBOX_MARGIN_PX).max(0.0);
    let x1 = (x1 + BBOX_MARGIN_PX).min(width as f64 - 1.0);
    let y1 = (y1 + BBOX_MARGIN_PX).min(height as f64 - 1.0);
    (x1 > x0 && y1 > y0).then_some([x0, y0, x1 - x0, y1 - y0])
}

fn sigma_normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma.max(0.0)).expect("finite non-negative deviation")
}

/// Oracle spur detector: one box per ground-truth spur visible in `image`.
pub fn detect_spurs(
    image: &RasterImage,
    ground_truth: Option<&VineSkeleton>,
    noise: &DetectorNoise,
    threshold: f64,
) -> Result<Vec<SpurDetection>, PerceptionError> {
    let skeleton = ground_truth.ok_or(PerceptionError::MissingGroundTruth)?;
    let camera = image.camera.clone().unwrap_or_default();
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let jitter = sigma_normal(noise.centroid_sigma_px);
    let conf = sigma_normal(noise.confidence_sigma);
    let mut out = Vec::new();
    for spur in skeleton.spurs() {
        let (du, dv) = (jitter.sample(&mut rng), jitter.sample(&mut rng));
        let drawn = (1.0 - conf.sample(&mut rng).abs()).clamp(0.0, 1.0);
        let confidence = noise.forced_confidence.get(&spur.id).copied().unwrap_or(drawn);
        let pts = points_of_subtree(skeleton, spur.id, PROJECTION_SAMPLES);
        let Some(bbox) = projected_bbox(&camera, &pts, image.width, image.height) else {
            continue;
        };
        if confidence < threshold {
            continue;
        }
        let cx = (bbox[0] + 0.5 * bbox[2] + du).clamp(bbox[0], bbox[0] + bbox[2]);
        let cy = (bbox[1] + 0.5 * bbox[3] + dv).clamp(bbox[1], bbox[1] + bbox[3]);
        out.push(SpurDetection { bbox, confidence, centroid: Point2::new(cx, cy), spur_id: spur.id });
    }
    out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.spur_id.cmp(&b.spur_id)));
    Ok(out)
}

/// Skeleton sample inside a detection box.
#[derive(Clone, Debug, PartialEq)]
struct Sample {
    segment: SegmentId,
    geodesic: f64,
    pixel: Point2<f64>,
}

fn patch_around(image: &RasterImage, centre: &Point2<f64>, size: usize) -> RasterImage {
    let x0 = centre.x.round() as i64 - (size / 2) as i64;
    let y0 = centre.y.round() as i64 - (size / 2) as i64;
    RasterImage::from_fn(size, size, |x, y| {
        let (gx, gy) = (x0 + x as i64, y0 + y as i64);
        if gx < 0 || gy < 0 || gx >= image.width as i64 || gy >= image.height as i64 {
            0.0
        } else {
            image.get(gx as usize, gy as usize)
        }
    })
    .expect("patch size is positive")
}

/// Spur whose projected subtree centre is nearest the detection centroid.
fn region_root(skeleton: &VineSkeleton, camera: &CameraModel, det: &SpurDetection) -> Option<SegmentId> {
    skeleton
        .spurs()
        .filter_map(|s| {
            let px: Vec<Point2<f64>> =
                points_of_subtree(skeleton, s.id, PROJECTION_SAMPLES).iter().filter_map(|p| camera.project(p)).collect();
            if px.is_empty() {
                return None;
            }
            let n = px.len() as f64;
            let c = Point2::new(px.iter().map(|p| p.x).sum::<f64>() / n, px.iter().map(|p| p.y).sum::<f64>() / n);
            Some((s.id, (c - det.centroid).norm()))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(id, _)| id)
}

fn region_samples(
    skeleton: &VineSkeleton,
    camera: &CameraModel,
    root: SegmentId,
    det: &SpurDetection,
    spacing: f64,
) -> Vec<Sample> {
    let mut offset: BTreeMap<SegmentId, f64> = BTreeMap::new();
    let mut out = Vec::new();
    for id in skeleton.subtree(root) {
        let Some(seg) = skeleton.segment(id) else { continue };
        let base = seg.parent.and_then(|p| offset.get(&p).copied()).unwrap_or(0.0);
        let len = seg.length();
        offset.insert(id, base + len);
        let n = (len / spacing).floor() as usize;
        for i in 0..n {
            let s = (i as f64 + 0.5) * spacing;
            let p = seg.point_at(s / len);
            if let Some(pixel) = camera.project(&p) {
                if det.contains(&pixel) {
                    out.push(Sample { segment: id, geodesic: base + s, pixel });
                }
            }
        }
    }
    out
}

fn sample_features(
    image: &RasterImage,
    samples: &[Sample],
    cfg: &PerceptionConfig,
) -> Result<Vec<DVector<f64>>, PerceptionError> {
    let descriptors = samples
        .iter()
        .map(|s| compute_hog(&patch_around(image, &s.pixel, cfg.patch_size), cfg.cell_size, cfg.bins))
        .collect::<Result<Vec<_>, _>>()?;
    let mut feats = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let lo = i.saturating_sub(cfg.pool_radius);
        let hi = (i + cfg.pool_radius + 1).min(samples.len());
        let pool: Vec<HogDescriptor> =
            (lo..hi).filter(|&j| samples[j].segment == s.segment).map(|j| descriptors[j].clone()).collect();
        let pooled = mp_hog(&pool, cfg.alpha, cfg.beta)?;
        // fold the pooled blocks back into one orientation histogram
        let mut orient = vec![0.0; cfg.bins];
        for (k, v) in pooled.mean.iter().enumerate() {
            orient[k % cfg.bins] += v.max(0.0);
        }
        let total: f64 = orient.iter().sum();
        let mut f = vec![s.geodesic / 0.1, s.pixel.x / 100.0, s.pixel.y / 100.0];
        f.extend(orient.iter().map(|v| if total > 0.0 { 0.5 * v / total } else { 0.0 }));
        feats.push(DVector::from_vec(f));
    }
    Ok(feats)
}

/// Pruning points from detected spur regions: two points per cane judged
/// prunable, straddling its cut location, lower point first.
pub fn estimate_ppp(
    detections: &[SpurDetection],
    skeleton: &VineSkeleton,
    camera: &CameraModel,
    image: &RasterImage,
    cfg: &PerceptionConfig,
) -> Result<Vec<PruningPoint>, PerceptionError> {
    cfg.validate()?;
    if detections.is_empty() {
        return Err(PerceptionError::NoDetections);
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for det in detections {
        let Some(root) = region_root(skeleton, camera, det) else { continue };
        if !seen.insert(root) {
            continue;
        }
        let samples = region_samples(skeleton, camera, root, det, cfg.sample_spacing);
        if samples.is_empty() {
            continue;
        }
        let feats = sample_features(image, &samples, cfg)?;
        let k = cfg.clusters.min(samples.len());
        let clusters = kmeans_restarts(&feats, k, cfg.seed.wrapping_add(root as u64 * 7919), cfg.max_iter, cfg.restarts)?;
        let members: Vec<Vec<SegmentId>> =
            (0..k).map(|c| clusters.members(c).map(|i| samples[i].segment).collect()).collect();
        let labels = graph_morphometry(skeleton, &members, cfg.tau_morph);

        let mut votes: BTreeMap<SegmentId, (usize, f64)> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            let m = &labels[clusters.assignments[i]];
            if m.label == MorphLabel::Prune {
                let e = votes.entry(s.segment).or_insert((0, 0.0));
                e.0 += 1;
                e.1 = e.1.max(m.similarity);
            }
        }
        for (id, (count, similarity)) in votes {
            let Some(seg) = skeleton.segment(id) else { continue };
            if seg.kind != SegmentKind::Cane || count < 2 {
                continue;
            }
            let Some(arc) = skeleton.cut_arc(id) else { continue };
            let len = seg.length();
            let half = cfg.cut_half_width / len;
            let score = (similarity * det.confidence).clamp(0.0, 1.0);
            let mut pair: Vec<PruningPoint> = [(arc - half).max(0.0), (arc + half).min(1.0)]
                .into_iter()
                .map(|a| PruningPoint { position: seg.point_at(a), segment_id: id, arc: a, score })
                .collect();
            pair.sort_by(|a, b| a.position.z.total_cmp(&b.position.z));
            out.extend(pair);
        }
    }
    Ok(out)
}

/// Consecutive points of the same segment, as produced by [`estimate_ppp`].
pub fn pair_points(points: &[PruningPoint]) -> Vec<(PruningPoint, PruningPoint)> {
    points
        .chunks(2)
        .filter(|c| c.len() == 2 && c[0].segment_id == c[1].segment_id)
        .map(|c| (c[0].clone(), c[1].clone()))
        .collect()
}

/// Rotation aligning the cut line with the branch axis, and the matching
/// cutter orientation. With `c` the cut direction and `a` the branch axis the
/// rotation axis is `c x a` and the angle `acos(c . a)`.
pub fn cutting_pose(p1: &PruningPoint, p2: &PruningPoint, camera: &CameraModel) -> Result<CutPose, PerceptionError> {
    let d = p2.position - p1.position;
    if d.norm() < 1e-9 {
        return Err(PerceptionError::DegenerateCut);
    }
    let c = d / d.norm();
    let a = NOMINAL_BRANCH_AXIS;
    let cross = c.cross(&a);
    let cos = c.dot(&a).clamp(-1.0, 1.0);
    let phi = cross.norm().atan2(cos);
    let axis = if cross.norm() > 1e-12 {
        cross / cross.norm()
    } else {
        // parallel or opposite: any axis normal to the branch axis
        Vec3::x()
    };
    let rotation = rodrigues(&axis, phi);
    let translation = (p1.position + p2.position) * 0.5;
    let nominal = Mat3::from_columns(&[Vec3::z(), -Vec3::y(), Vec3::x()]);
    let tool_rotation = rotation.transpose() * nominal;

    let ray = |p: &Vec3| -> Result<Vec3, PerceptionError> {
        let px = camera.project(p).ok_or(PerceptionError::Unprojectable)?;
        Ok(camera.normalized_ray(&px))
    };
    let (r1, r2) = (ray(&p1.position)?, ray(&p2.position)?);
    let t_cam = camera.to_camera(&translation);
    let residual = r2.dot(&t_cam.cross(&r1));
    Ok(CutPose { rotation, translation, p1: p1.clone(), p2: p2.clone(), phi, axis, tool_rotation, residual })
}

/// Serialized perception result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptionOutput {
    pub format_version: u32,
    pub detections: Vec<SpurDetection>,
    pub points: Vec<PruningPoint>,
    pub poses: Vec<CutPose>,
}

impl PerceptionOutput {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("perception output serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PerceptionError> {
        let out: Self = serde_json::from_str(text).map_err(|e| PerceptionError::InvalidConfig(e.to_string()))?;
        if out.format_version != PERCEPTION_FORMAT_VERSION {
            return Err(PerceptionError::InvalidConfig(format!("unsupported format version {}", out.format_version)));
        }
        Ok(out)
    }
}

/// Detection, pruning points and cut poses in one pass.
pub fn perceive(
    image: &RasterImage,
    skeleton: &VineSkeleton,
    camera: &CameraModel,
    noise: &DetectorNoise,
    cfg: &PerceptionConfig,
) -> Result<PerceptionOutput, PerceptionError> {
    let detections = detect_spurs(image, Some(skeleton), noise, cfg.detection_threshold)?;
    let points = if detections.is_empty() { Vec::new() } else { estimate_ppp(&detections, skeleton, camera, image, cfg)? };
    let poses = pair_points(&points)
        .iter()
        .map(|(a, b)| cutting_pose(a, b, camera))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PerceptionOutput { format_version: PERCEPTION_FORMAT_VERSION, detections, points, poses })
}
