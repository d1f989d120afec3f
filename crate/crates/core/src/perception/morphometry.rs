//! Structural similarity of clustered skeleton samples to a prunable cane.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::vine_gen::{SegmentId, VineSkeleton};

const BUD_DENSITY_SCALE: f64 = 20.0;
const LENGTH_SCALE: f64 = 0.2;

/// Feature layout: fractions of segments ending in a node of degree 1, 2 and
/// 3 or more; bud density; mean and spread of segment length.
pub const FEATURE_DIM: usize = 6;

/// Features of a free cane carrying buds at the usual density.
pub const CANE_TEMPLATE: [f64; FEATURE_DIM] = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MorphLabel {
    Prune,
    Keep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterMorphology {
    pub features: [f64; FEATURE_DIM],
    pub similarity: f64,
    pub label: MorphLabel,
}

/// Degree of the distal node of a segment: its children plus the segment itself.
fn distal_degree(skeleton: &VineSkeleton, id: SegmentId) -> usize {
    skeleton.children(id).count() + 1
}

pub fn cluster_features(skeleton: &VineSkeleton, segments: &BTreeSet<SegmentId>) -> Option<[f64; FEATURE_DIM]> {
    let segs: Vec<_> = segments.iter().filter_map(|&id| skeleton.segment(id)).collect();
    if segs.is_empty() {
        return None;
    }
    let n = segs.len() as f64;
    let mut f = [0.0; FEATURE_DIM];
    for s in &segs {
        let slot = distal_degree(skeleton, s.id).clamp(1, 3) - 1;
        f[slot] += 1.0 / n;
    }
    let lengths: Vec<f64> = segs.iter().map(|s| s.length()).collect();
    let total: f64 = lengths.iter().sum();
    let buds: usize = segs.iter().map(|s| skeleton.buds_on(s.id).len()).sum();
    let mean = total / n;
    let var = lengths.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
    f[3] = if total > 0.0 { buds as f64 / total / BUD_DENSITY_SCALE } else { 0.0 };
    f[4] = mean / LENGTH_SCALE;
    f[5] = var.sqrt() / LENGTH_SCALE;
    Some(f)
}

/// Cosine kernel between feature vectors; zero when either is zero.
pub fn kernel(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

pub fn classify(features: Option<[f64; FEATURE_DIM]>, tau: f64) -> ClusterMorphology {
    match features {
        Some(f) => {
            let similarity = kernel(&f, &CANE_TEMPLATE);
            let label = if similarity >= tau { MorphLabel::Prune } else { MorphLabel::Keep };
            ClusterMorphology { features: f, similarity, label }
        }
        None => ClusterMorphology { features: [0.0; FEATURE_DIM], similarity: 0.0, label: MorphLabel::Keep },
    }
}

/// Labels each cluster from the segments its members lie on.
/// `member_segments[c]` lists the segment of every sample in cluster `c`.
pub fn graph_morphometry(skeleton: &VineSkeleton, member_segments: &[Vec<SegmentId>], tau: f64) -> Vec<ClusterMorphology> {
    member_segments
        .iter()
        .map(|m| {
            let set: BTreeSet<SegmentId> = m.iter().copied().collect();
            classify(cluster_features(skeleton, &set), tau)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vine_gen::{generate_vine, SegmentKind, VineSpec};
    use proptest::prelude::*;

    #[test]
    fn template_is_pruned() {
        let m = classify(Some(CANE_TEMPLATE), 0.8);
        assert!((m.similarity - 1.0).abs() < 1e-15);
        assert_eq!(m.label, MorphLabel::Prune);
    }

    #[test]
    fn bare_trunk_profile_is_kept() {
        // one segment continuing through a degree-2 node, no buds, 0.5 m long
        let f = [0.0, 1.0, 0.0, 0.0, 2.5, 0.0];
        let m = classify(Some(f), 0.8);
        assert!((m.similarity - 2.5 / (2.5f64.hypot(1.0) * 3f64.sqrt())).abs() < 1e-12);
        assert_eq!(m.label, MorphLabel::Keep);
    }

    #[test]
    fn empty_cluster_is_kept() {
        let vine = generate_vine(&VineSpec::default()).unwrap();
        let out = graph_morphometry(&vine, &[vec![]], 0.8);
        assert_eq!(out[0].label, MorphLabel::Keep);
    }

    #[test]
    fn canes_prune_and_spurs_keep() {
        let vine = generate_vine(&VineSpec::default()).unwrap();
        for spur in vine.spurs() {
            let canes: Vec<SegmentId> = vine.children(spur.id).map(|c| c.id).collect();
            let labels = graph_morphometry(&vine, &[canes.clone(), vec![spur.id]], 0.8);
            assert_eq!(labels[0].label, MorphLabel::Prune, "{:?}", labels[0]);
            assert_eq!(labels[1].label, MorphLabel::Keep);
            // a whole spur region still reads as mostly cane
            let mut all = canes;
            all.push(spur.id);
            assert_eq!(graph_morphometry(&vine, &[all], 0.8)[0].label, MorphLabel::Prune);
        }
        let trunk = vine.segments.iter().find(|s| s.kind == SegmentKind::Trunk).unwrap();
        assert_eq!(graph_morphometry(&vine, &[vec![trunk.id]], 0.8)[0].label, MorphLabel::Keep);
    }

    proptest! {
        #[test]
        fn scale_invariant(f in proptest::array::uniform6(0.0f64..3.0), c in 0.01f64..100.0) {
            let scaled = f.map(|v| v * c);
            prop_assert_eq!(classify(Some(f), 0.8).label, classify(Some(scaled), 0.8).label);
            prop_assert!((kernel(&f, &CANE_TEMPLATE) - kernel(&scaled, &CANE_TEMPLATE)).abs() < 1e-12);
        }
    }
}
