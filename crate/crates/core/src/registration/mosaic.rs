use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{register, RegistrationConfig, RegistrationError, Strategy};
use crate::geometry::{apply_transform, PointCloud, RigidTransform};
use crate::matcher::SoftAlignment;
use crate::scenegraph::Fragment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MosaicConfig {
    pub registration: RegistrationConfig,
    pub strategy: Strategy,
    /// A pairwise registration becomes a pose-graph edge only with at least
    /// this many inliers...
    pub min_inliers: usize,
    /// ...and at least this inlier ratio.
    pub min_inlier_ratio: f64,
}

impl Default for MosaicConfig {
    fn default() -> Self {
        Self {
            registration: RegistrationConfig::default(),
            strategy: Strategy::O2o,
            min_inliers: 30,
            min_inlier_ratio: 0.3,
        }
    }
}

/// Accepted pairwise registration: `transform` maps fragment `src` into
/// fragment `reference`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEdge {
    pub src: usize,
    pub reference: usize,
    pub transform: RigidTransform,
    pub weight: f64,
}

/// Transforms of every fragment into the frame of fragment 0. All pairs are
/// registered (the later fragment as source), accepted registrations form a
/// pose graph weighted by mean correspondence score, and poses are composed
/// along a maximum-weight spanning tree rooted at fragment 0.
pub fn mosaic<F>(fragments: &[Fragment], align: F, cfg: &MosaicConfig) -> Result<Vec<RigidTransform>, RegistrationError>
where
    F: Fn(&Fragment, &Fragment) -> Option<SoftAlignment> + Sync,
{
    Ok(mosaic_with_edges(fragments, align, cfg)?.0)
}

/// [`mosaic`] that also returns the accepted pose-graph edges.
pub fn mosaic_with_edges<F>(
    fragments: &[Fragment],
    align: F,
    cfg: &MosaicConfig,
) -> Result<(Vec<RigidTransform>, Vec<PoseEdge>), RegistrationError>
where
    F: Fn(&Fragment, &Fragment) -> Option<SoftAlignment> + Sync,
{
    let n = fragments.len();
    if n < 2 {
        return Err(RegistrationError::InvalidConfig(format!("mosaic needs at least 2 fragments, got {n}")));
    }
    let jobs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (b, a))).collect();
    let results: Vec<Result<Option<PoseEdge>, RegistrationError>> = jobs
        .par_iter()
        .map(|&(s, r)| {
            let alignment = if cfg.strategy == Strategy::A2a {
                None
            } else {
                match align(&fragments[s], &fragments[r]) {
                    Some(a) if !a.selected_pairs.is_empty() => Some(a),
                    _ => return Ok(None),
                }
            };
            match register(&fragments[s], &fragments[r], alignment.as_ref(), cfg.strategy, &cfg.registration) {
                Ok(reg) if reg.inliers >= cfg.min_inliers && reg.inlier_ratio() >= cfg.min_inlier_ratio => Ok(Some(PoseEdge {
                    src: s,
                    reference: r,
                    transform: reg.transform,
                    weight: reg.correspondences.mean_score(),
                })),
                Ok(_) | Err(RegistrationError::NoCorrespondences) | Err(RegistrationError::Geometry(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut edges = Vec::new();
    for r in results {
        if let Some(e) = r? {
            edges.push(e);
        }
    }

    let mut pose: Vec<Option<RigidTransform>> = vec![None; n];
    pose[0] = Some(RigidTransform::identity());
    loop {
        let mut best: Option<(f64, usize, RigidTransform)> = None;
        for e in &edges {
            let (from, to, t) = match (pose[e.src], pose[e.reference]) {
                (None, Some(p)) => (e.src, p, p.compose(&e.transform)),
                (Some(p), None) => (e.reference, p, p.compose(&e.transform.inverse())),
                _ => continue,
            };
            let _ = to;
            if best.as_ref().is_none_or(|(w, f, _)| e.weight > *w || (e.weight == *w && from < *f)) {
                best = Some((e.weight, from, t));
            }
        }
        match best {
            Some((_, f, t)) => pose[f] = Some(t),
            None => break,
        }
    }
    let missing: Vec<usize> = (0..n).filter(|&i| pose[i].is_none()).collect();
    if !missing.is_empty() {
        return Err(RegistrationError::DisconnectedScenes(missing));
    }
    Ok((pose.into_iter().map(|p| p.expect("all poses resolved")).collect(), edges))
}

/// All fragment clouds moved into frame 0 and concatenated.
pub fn assemble(fragments: &[Fragment], transforms: &[RigidTransform]) -> PointCloud {
    fragments
        .iter()
        .zip(transforms)
        .map(|(f, t)| apply_transform(t, &f.cloud))
        .reduce(|a, b| a.concat(&b))
        .unwrap_or_else(|| PointCloud::unlabeled(Vec::new()))
}
