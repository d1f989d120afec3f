//! Procedural vine skeletons and their monochrome rasterization.
//!
//! A vine is a tree of straight segments: one trunk, spurs attached to the
//! trunk head and canes growing out of each spur. Buds sit on the canes on
//! alternating sides. Geometry is drawn from bounded uniform distributions
//! seeded by [`VineSpec::rng_seed`], so the same spec always yields the same
//! skeleton.

mod camera;
mod raster;

pub use camera::CameraModel;
pub use raster::{project_to_raster, RasterImage};

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{point_segment_distance, rot_x, Vec3};

pub type SegmentId = u32;

/// Current version of the skeleton document format.
pub const SKELETON_FORMAT_VERSION: u32 = 1;

/// Buds left on each cane after spur pruning.
pub const RETAINED_BUDS: usize = 2;

const MIN_RADIUS: f64 = 0.002;
const TAPER: f64 = 0.7;
const SPUR_TILT_MIN_DEG: f64 = 10.0;
const SPUR_TILT_MAX_DEG: f64 = 35.0;
const SPUR_LENGTH: (f64, f64) = (0.04, 0.07);
const CANE_LENGTH: (f64, f64) = (0.1, 0.3);
const CANE_SPREAD_DEG: f64 = 30.0;
const CANE_JITTER_DEG: f64 = 5.0;
const SPUR_SPACING: f64 = 0.04;
/// Free space kept around every cut point for the open cutter jaw (m).
const CUT_CLEARANCE: f64 = 0.045;
const MAX_DRAWS: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum VineError {
    #[error("invalid vine spec: {0}")]
    InvalidSpec(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("every segment lies behind the camera")]
    BehindCamera,
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error("unsupported skeleton format version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed document: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VineSpec {
    /// Overall vine height (m).
    pub overall_height: f64,
    /// Trunk extrusion diameter (m).
    pub trunk_diameter: f64,
    pub spur_count: usize,
    pub canes_per_spur: usize,
    pub buds_per_cane: usize,
    /// Segments allowed to move. `None` selects every spur and cane.
    pub jiggle_mask: Option<BTreeSet<SegmentId>>,
    pub rng_seed: u64,
}

impl Default for VineSpec {
    fn default() -> Self {
        Self {
            overall_height: 0.763,
            trunk_diameter: 0.03121,
            spur_count: 2,
            canes_per_spur: 2,
            buds_per_cane: 4,
            jiggle_mask: None,
            rng_seed: 0,
        }
    }
}

impl VineSpec {
    pub fn validate(&self) -> Result<(), VineError> {
        if !(self.overall_height.is_finite() && self.overall_height > 0.0) {
            return Err(VineError::InvalidSpec(format!(
                "overall_height must be positive, got {}",
                self.overall_height
            )));
        }
        if !(self.trunk_diameter.is_finite() && self.trunk_diameter > 0.0) {
            return Err(VineError::InvalidSpec(format!(
                "trunk_diameter must be positive, got {}",
                self.trunk_diameter
            )));
        }
        if self.spur_count < 1 {
            return Err(VineError::InvalidSpec("spur_count must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Trunk,
    Spur,
    Cane,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudSide {
    Left,
    Right,
}

impl BudSide {
    pub fn flipped(self) -> Self {
        match self {
            BudSide::Left => BudSide::Right,
            BudSide::Right => BudSide::Left,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: SegmentId,
    pub parent: Option<SegmentId>,
    pub start: Vec3,
    pub end: Vec3,
    pub radius: f64,
    pub kind: SegmentKind,
}

impl Segment {
    pub fn length(&self) -> f64 {
        (self.end - self.start).norm()
    }

    pub fn point_at(&self, arc: f64) -> Vec3 {
        self.start + (self.end - self.start) * arc
    }

    pub fn direction(&self) -> Vec3 {
        (self.end - self.start).normalize()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bud {
    pub cane_id: SegmentId,
    /// Position along the cane, 0 at its base and 1 at its tip.
    pub arc_position: f64,
    pub side: BudSide,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VineSkeleton {
    pub format_version: u32,
    pub segments: Vec<Segment>,
    pub buds: Vec<Bud>,
    /// Segments that follow the plant motion; the rest stay pinned.
    pub jiggle: BTreeSet<SegmentId>,
}

impl Default for VineSkeleton {
    fn default() -> Self {
        Self {
            format_version: SKELETON_FORMAT_VERSION,
            segments: Vec::new(),
            buds: Vec::new(),
            jiggle: BTreeSet::new(),
        }
    }
}

impl VineSkeleton {
    pub fn segment(&self, id: SegmentId) -> Option<&Segment> {
        self.segments.iter().find(|s| s.id == id)
    }

    pub fn children(&self, id: SegmentId) -> impl Iterator<Item = &Segment> + '_ {
        self.segments.iter().filter(move |s| s.parent == Some(id))
    }

    pub fn spurs(&self) -> impl Iterator<Item = &Segment> + '_ {
        self.segments.iter().filter(|s| s.kind == SegmentKind::Spur)
    }

    /// Buds on one cane, ordered by arc position.
    pub fn buds_on(&self, cane: SegmentId) -> Vec<&Bud> {
        let mut buds: Vec<&Bud> = self.buds.iter().filter(|b| b.cane_id == cane).collect();
        buds.sort_by(|a, b| a.arc_position.total_cmp(&b.arc_position));
        buds
    }

    /// Arc position of the pruning cut on a cane: between the last retained
    /// bud and the next one, or halfway to the tip when there is no next bud.
    pub fn cut_arc(&self, cane: SegmentId) -> Option<f64> {
        let seg = self.segment(cane)?;
        if seg.kind != SegmentKind::Cane {
            return None;
        }
        let buds = self.buds_on(cane);
        let keep = RETAINED_BUDS.min(buds.len());
        let lo = if keep == 0 { 0.0 } else { buds[keep - 1].arc_position };
        let hi = buds.get(keep).map_or(1.0, |b| b.arc_position);
        Some(0.5 * (lo + hi))
    }

    /// World position of the pruning cut on a cane (rest configuration).
    pub fn cut_point(&self, cane: SegmentId) -> Option<Vec3> {
        Some(self.segment(cane)?.point_at(self.cut_arc(cane)?))
    }

    pub fn canes(&self) -> impl Iterator<Item = &Segment> + '_ {
        self.segments.iter().filter(|s| s.kind == SegmentKind::Cane)
    }

    /// Ids of `root` and all of its descendants, in breadth-first order.
    pub fn subtree(&self, root: SegmentId) -> Vec<SegmentId> {
        let mut out = vec![root];
        let mut i = 0;
        while i < out.len() {
            let id = out[i];
            out.extend(self.children(id).map(|c| c.id));
            i += 1;
        }
        out
    }

    /// Checks the tree, spur-parent and bud-alternation invariants.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.segments.is_empty() {
            return Ok(());
        }
        let roots: Vec<_> = self.segments.iter().filter(|s| s.parent.is_none()).collect();
        if roots.len() != 1 || roots[0].kind != SegmentKind::Trunk {
            return Err("skeleton must have exactly one root and it must be the trunk".into());
        }
        let edges = self.segments.iter().filter(|s| s.parent.is_some()).count();
        if self.segments.len() != edges + 1 {
            return Err("segment count must equal edge count plus one".into());
        }
        let reached = self.subtree(roots[0].id);
        let unique: BTreeSet<_> = reached.iter().copied().collect();
        if unique.len() != reached.len() || unique.len() != self.segments.len() {
            return Err("segment graph is not a tree reachable from the trunk".into());
        }
        for spur in self.spurs() {
            if spur.parent != Some(roots[0].id) {
                return Err(format!("spur {} is not attached to the trunk", spur.id));
            }
        }
        for cane in self.segments.iter().filter(|s| s.kind == SegmentKind::Cane) {
            let buds = self.buds_on(cane.id);
            if buds.windows(2).any(|w| w[0].side == w[1].side) {
                return Err(format!("buds on cane {} do not alternate", cane.id));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("skeleton serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, VineError> {
        let skeleton: VineSkeleton =
            serde_json::from_str(text).map_err(|e| VineError::Malformed(e.to_string()))?;
        if skeleton.format_version != SKELETON_FORMAT_VERSION {
            return Err(VineError::UnsupportedVersion(skeleton.format_version));
        }
        Ok(skeleton)
    }
}

/// Height of the trunk head for a given overall vine height.
pub fn trunk_height(overall_height: f64) -> f64 {
    (overall_height - SPUR_LENGTH.1 - CANE_LENGTH.1).max(0.4 * overall_height)
}

/// Unit direction in the vine (y-z) plane, tilted `tilt` radians from vertical towards +y.
fn planar_direction(tilt: f64) -> Vec3 {
    rot_x(-tilt) * Vec3::z()
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    rng.random_range(range.0..=range.1)
}

pub fn generate_vine(spec: &VineSpec) -> Result<VineSkeleton, VineError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);

    let trunk_radius = spec.trunk_diameter / 2.0;
    let spur_radius = (trunk_radius * TAPER).max(MIN_RADIUS);
    let cane_radius = (spur_radius * TAPER).max(MIN_RADIUS);
    let head = trunk_height(spec.overall_height);

    let trunk = Segment {
        id: 0,
        parent: None,
        start: Vec3::zeros(),
        end: Vec3::new(0.0, 0.0, head),
        radius: trunk_radius,
        kind: SegmentKind::Trunk,
    };
    // redraw until the cutter can reach every cut point without touching other wood
    let (mut segments, mut buds) = (Vec::new(), Vec::new());
    for _ in 0..MAX_DRAWS {
        segments = vec![trunk.clone()];
        buds = Vec::new();
        let mut next_id: SegmentId = 1;
        for i in 0..spec.spur_count {
            let (s, b) = draw_spur(&mut rng, spec, i, next_id, head, spur_radius, cane_radius);
            next_id += s.len() as SegmentId;
            segments.extend(s);
            buds.extend(b);
        }
        if cuts_are_clear(&segments, &buds) {
            break;
        }
    }

    let jiggle = match &spec.jiggle_mask {
        Some(mask) => mask.clone(),
        None => segments
            .iter()
            .filter(|s| s.kind != SegmentKind::Trunk)
            .map(|s| s.id)
            .collect(),
    };

    Ok(VineSkeleton { format_version: SKELETON_FORMAT_VERSION, segments, buds, jiggle })
}

/// Draws spur `i` with its canes and buds, numbering segments from `first_id`.
fn draw_spur(
    rng: &mut ChaCha8Rng,
    spec: &VineSpec,
    i: usize,
    first_id: SegmentId,
    head: f64,
    spur_radius: f64,
    cane_radius: f64,
) -> (Vec<Segment>, Vec<Bud>) {
    let sign = if i.is_multiple_of(2) { 1.0 } else { -1.0 };
    let attach_z = (head - SPUR_SPACING * (i / 2) as f64).max(0.3 * head);
    let attach = Vec3::new(0.0, 0.0, attach_z);
    let tilt = sign * uniform(rng, (SPUR_TILT_MIN_DEG, SPUR_TILT_MAX_DEG)).to_radians();
    let spur_len = uniform(rng, SPUR_LENGTH);
    let spur_end = attach + planar_direction(tilt) * spur_len;
    let mut segments = vec![Segment {
        id: first_id,
        parent: Some(0),
        start: attach,
        end: spur_end,
        radius: spur_radius,
        kind: SegmentKind::Spur,
    }];
    let mut buds = Vec::new();
    for j in 0..spec.canes_per_spur {
        let spread = if spec.canes_per_spur == 1 {
            0.0
        } else {
            -CANE_SPREAD_DEG + 2.0 * CANE_SPREAD_DEG * j as f64 / (spec.canes_per_spur - 1) as f64
        };
        let jitter = uniform(rng, (-CANE_JITTER_DEG, CANE_JITTER_DEG));
        let cane_tilt = tilt + (spread + jitter).to_radians();
        let cane_len = uniform(rng, CANE_LENGTH);
        let cane_id = first_id + 1 + j as SegmentId;
        segments.push(Segment {
            id: cane_id,
            parent: Some(first_id),
            start: spur_end,
            end: spur_end + planar_direction(cane_tilt) * cane_len,
            radius: cane_radius,
            kind: SegmentKind::Cane,
        });

        let mut side = if rng.random_bool(0.5) { BudSide::Left } else { BudSide::Right };
        let n = spec.buds_per_cane;
        for k in 0..n {
            let nominal = (k + 1) as f64 / (n + 1) as f64;
            let jitter = uniform(rng, (-0.25, 0.25)) / (n + 1) as f64;
            buds.push(Bud { cane_id, arc_position: nominal + jitter, side });
            side = side.flipped();
        }
    }
    (segments, buds)
}

/// True when every cut point keeps `CUT_CLEARANCE` from all other spur and
/// cane segments.
fn cuts_are_clear(segments: &[Segment], buds: &[Bud]) -> bool {
    let sk = VineSkeleton {
        format_version: SKELETON_FORMAT_VERSION,
        segments: segments.to_vec(),
        buds: buds.to_vec(),
        jiggle: BTreeSet::new(),
    };
    let clear = sk.canes().all(|cane| {
        sk.cut_point(cane.id).is_none_or(|c| {
            sk.segments
                .iter()
                .filter(|o| o.kind != SegmentKind::Trunk && o.id != cane.id)
                .all(|o| point_segment_distance(&c, &o.start, &o.end) >= CUT_CLEARANCE)
        })
    });
    clear
}
