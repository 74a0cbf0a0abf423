use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::matching::{extract_grouped, rescore, superpoint_matching_matrix, ExtractionConfig};
use super::superpoints::build_superpoints;
use super::{CorrespondenceLevel, CorrespondenceSet, RegistrationError};
use crate::encoder::point_descriptors;
use crate::geometry::{inlier_mask, ransac_pose, refine_on_inliers, weighted_svd_alignment, PointCloud, RansacConfig, RigidTransform};
use crate::matcher::SoftAlignment;
use crate::scenegraph::{Fragment, ScenePair};

const ANNEAL_STAGES: u32 = 5;
const REFINED_HYPOTHESES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpoFilter {
    /// Keep object pairs whose score is at least this value.
    Score(f64),
    /// Keep the highest-scoring object pairs.
    TopK(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// All-to-all: the alignment is not consulted.
    A2a,
    /// Overlap-to-overlap: both clouds masked to the selected objects.
    O2o,
    /// Object-per-object: matching inside each selected pair, pooled.
    Opo,
    OpoFiltered(OpoFilter),
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::A2a => write!(f, "a2a"),
            Strategy::O2o => write!(f, "o2o"),
            Strategy::Opo => write!(f, "opo"),
            Strategy::OpoFiltered(OpoFilter::Score(s)) => write!(f, "opo-s={s}"),
            Strategy::OpoFiltered(OpoFilter::TopK(k)) => write!(f, "opo-k={k}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = String;

    /// `a2a`, `o2o`, `opo`, `opo-s[=S]` (default 0.5) or `opo-k[=K]` (default 5).
    fn from_str(s: &str) -> Result<Self, String> {
        let lower = s.to_ascii_lowercase();
        let (head, arg) = match lower.split_once('=') {
            Some((h, a)) => (h.to_string(), Some(a.to_string())),
            None => (lower.clone(), None),
        };
        let bad = || format!("unknown strategy `{s}` (expected a2a, o2o, opo, opo-s[=S] or opo-k[=K])");
        match (head.as_str(), arg) {
            ("a2a", None) => Ok(Strategy::A2a),
            ("o2o", None) => Ok(Strategy::O2o),
            ("opo", None) => Ok(Strategy::Opo),
            ("opo-s", a) => {
                let v = a.map_or(Ok(0.5), |a| a.parse::<f64>().map_err(|_| bad()))?;
                Ok(Strategy::OpoFiltered(OpoFilter::Score(v)))
            }
            ("opo-k", a) => {
                let v = a.map_or(Ok(5), |a| a.parse::<usize>().map_err(|_| bad()))?;
                Ok(Strategy::OpoFiltered(OpoFilter::TopK(v)))
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationConfig {
    pub voxel: f64,
    pub descriptor_radius: f64,
    pub gamma: f64,
    pub top_m: usize,
    pub mutual: bool,
    pub ratio: f64,
    /// Inlier radius for hypothesis selection and refinement (m).
    pub inlier_radius: f64,
    pub refine_rounds: usize,
    pub use_ransac: bool,
    pub ransac_iters: usize,
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            voxel: 0.25,
            descriptor_radius: 0.3,
            gamma: 0.2,
            top_m: 64,
            mutual: false,
            ratio: 0.8,
            inlier_radius: 0.05,
            refine_rounds: 10,
            use_ransac: false,
            ransac_iters: 1000,
            seed: 0,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        let ok = self.voxel > 0.0
            && self.descriptor_radius > 0.0
            && self.gamma >= 0.0
            && self.gamma.is_finite()
            && self.top_m >= 1
            && self.ratio > 0.0
            && self.inlier_radius > 0.0;
        if ok {
            Ok(())
        } else {
            Err(RegistrationError::InvalidConfig(format!("{self:?}")))
        }
    }

    fn extraction(&self) -> ExtractionConfig {
        ExtractionConfig {
            top_m: self.top_m,
            mutual: self.mutual,
            ratio: self.ratio,
        }
    }
}

/// Estimated transform (source into reference frame) and the point
/// correspondences it was estimated from, indexed into the full fragment
/// clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct Registration {
    pub transform: RigidTransform,
    pub correspondences: CorrespondenceSet,
    pub inliers: usize,
}

impl Registration {
    pub fn inlier_ratio(&self) -> f64 {
        if self.correspondences.is_empty() {
            0.0
        } else {
            self.inliers as f64 / self.correspondences.len() as f64
        }
    }
}

/// Points of `cloud` whose object is in `objects`, with fresh descriptors,
/// and their indices in `cloud`.
fn masked(cloud: &PointCloud, objects: &BTreeSet<usize>, radius: f64) -> (PointCloud, Vec<usize>) {
    let (sub, idx) = cloud.filter(|_, o| objects.contains(&o));
    let desc = point_descriptors(&sub, radius, true);
    (sub.with_descriptors(desc).expect("descriptor rows match the cloud"), idx)
}

fn with_descriptors(cloud: &PointCloud, radius: f64) -> PointCloud {
    match cloud.descriptors() {
        Some(_) => cloud.clone(),
        None => {
            let desc = point_descriptors(cloud, radius, true);
            cloud.clone().with_descriptors(desc).expect("descriptor rows match the cloud")
        }
    }
}

/// Correspondences between two clouds, remapped through `src_idx` and
/// `ref_idx`, with the group index of each correspondence offset by `group0`.
fn match_clouds(
    src: &PointCloud,
    reference: &PointCloud,
    soft: Option<&SoftAlignment>,
    cfg: &RegistrationConfig,
    src_idx: &[usize],
    ref_idx: &[usize],
    group0: usize,
) -> Result<(Vec<(usize, usize, f64)>, Vec<usize>), RegistrationError> {
    if src.is_empty() || reference.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let ssp = build_superpoints(src, cfg.voxel, cfg.descriptor_radius)?;
    let rsp = build_superpoints(reference, cfg.voxel, cfg.descriptor_radius)?;
    let c = superpoint_matching_matrix(&ssp, &rsp)?;
    let c = match soft {
        Some(a) => rescore(&c, &a.soft_matrix, &ssp, &rsp, cfg.gamma)?,
        None => c,
    };
    let (set, groups) = extract_grouped(&c, &ssp, &rsp, &cfg.extraction())?;
    let pairs = set.pairs.iter().map(|&(r, s, w)| (ref_idx[r], src_idx[s], w)).collect();
    Ok((pairs, groups.into_iter().map(|g| g + group0).collect()))
}

/// Pose from scored correspondences. Without RANSAC, every group with at
/// least three correspondences proposes a weighted-SVD hypothesis; the one
/// with most inliers over all correspondences is refined on its inliers.
pub fn estimate_pose(
    src_pts: &[Vector3<f64>],
    ref_pts: &[Vector3<f64>],
    weights: &[f64],
    groups: &[usize],
    cfg: &RegistrationConfig,
) -> Result<(RigidTransform, usize), RegistrationError> {
    if src_pts.len() < 3 {
        return Err(RegistrationError::NoCorrespondences);
    }
    if cfg.use_ransac {
        let est = ransac_pose(
            src_pts,
            ref_pts,
            weights,
            &RansacConfig {
                inlier_radius: cfg.inlier_radius,
                max_iters: cfg.ransac_iters,
                seed: cfg.seed,
                refine_rounds: cfg.refine_rounds,
            },
        )?;
        let n = est.inlier_count();
        return Ok((est.transform, n));
    }
    let group_ids: BTreeSet<usize> = groups.iter().copied().collect();
    let count = |t: &RigidTransform, radius: f64| inlier_mask(t, src_pts, ref_pts, radius).iter().filter(|&&b| b).count();
    let mut hypotheses: Vec<(usize, RigidTransform)> = Vec::new();
    for g in group_ids {
        let idx: Vec<usize> = (0..groups.len()).filter(|&k| groups[k] == g).collect();
        if idx.len() < 3 {
            continue;
        }
        let s: Vec<_> = idx.iter().map(|&k| src_pts[k]).collect();
        let r: Vec<_> = idx.iter().map(|&k| ref_pts[k]).collect();
        let w: Vec<_> = idx.iter().map(|&k| weights[k]).collect();
        if let Ok(t) = weighted_svd_alignment(&s, &r, &w) {
            hypotheses.push((count(&t, cfg.inlier_radius), t));
        }
    }
    if let Ok(t) = weighted_svd_alignment(src_pts, ref_pts, weights) {
        hypotheses.push((count(&t, cfg.inlier_radius), t));
    }
    if hypotheses.is_empty() {
        return Err(RegistrationError::Geometry(crate::geometry::GeometryError::DegenerateConfiguration));
    }
    hypotheses.sort_by(|a, b| b.0.cmp(&a.0));
    hypotheses.truncate(REFINED_HYPOTHESES);
    let mut best: Option<(usize, RigidTransform, usize)> = None;
    for (_, t) in hypotheses {
        let est = refine_on_inliers(t, src_pts, ref_pts, weights, cfg.inlier_radius, cfg.refine_rounds);
        let t = anneal(est.transform, src_pts, ref_pts, weights, cfg);
        let key: usize = (0..=ANNEAL_STAGES).map(|k| count(&t, cfg.inlier_radius / f64::from(1u32 << k))).sum();
        if best.as_ref().is_none_or(|b| key > b.0) {
            best = Some((key, t, est.inlier_count()));
        }
    }
    let (_, t, n) = best.expect("at least one hypothesis");
    Ok((t, n))
}

/// Refinement at shrinking inlier radii, kept while each stage retains at
/// least half of the previous stage's inliers.
fn anneal(
    mut t: RigidTransform,
    src_pts: &[Vector3<f64>],
    ref_pts: &[Vector3<f64>],
    weights: &[f64],
    cfg: &RegistrationConfig,
) -> RigidTransform {
    let mut prev = inlier_mask(&t, src_pts, ref_pts, cfg.inlier_radius).iter().filter(|&&b| b).count();
    for k in 1..=ANNEAL_STAGES {
        let radius = cfg.inlier_radius / f64::from(1u32 << k);
        let est = refine_on_inliers(t, src_pts, ref_pts, weights, radius, cfg.refine_rounds);
        let n = est.inlier_count();
        if n < 3 || 2 * n < prev {
            break;
        }
        t = est.transform;
        prev = n;
    }
    t
}

fn selected_pairs(alignment: &SoftAlignment, filter: Option<OpoFilter>) -> Vec<(usize, usize, f64)> {
    let mut pairs = alignment.selected_pairs.clone();
    match filter {
        None => {}
        Some(OpoFilter::Score(s)) => pairs.retain(|p| p.2 >= s),
        Some(OpoFilter::TopK(k)) => {
            pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
            pairs.truncate(k);
        }
    }
    pairs
}

/// Registers `src` onto `reference` with the given strategy. The
/// alignment is required by every strategy except A2A and drives both the
/// region selection and, with `gamma > 0`, the superpoint rescoring.
pub fn register(
    src: &Fragment,
    reference: &Fragment,
    alignment: Option<&SoftAlignment>,
    strategy: Strategy,
    cfg: &RegistrationConfig,
) -> Result<Registration, RegistrationError> {
    cfg.validate()?;
    let need = || alignment.ok_or(RegistrationError::MissingAlignment);
    let (pairs, groups) = match strategy {
        Strategy::A2a => {
            let s = with_descriptors(&src.cloud, cfg.descriptor_radius);
            let r = with_descriptors(&reference.cloud, cfg.descriptor_radius);
            let si: Vec<usize> = (0..s.len()).collect();
            let ri: Vec<usize> = (0..r.len()).collect();
            match_clouds(&s, &r, None, cfg, &si, &ri, 0)?
        }
        Strategy::O2o => {
            let a = need()?;
            if a.selected_pairs.is_empty() {
                return Err(RegistrationError::NoCorrespondences);
            }
            let so: BTreeSet<usize> = a.selected_pairs.iter().map(|p| p.0).collect();
            let ro: BTreeSet<usize> = a.selected_pairs.iter().map(|p| p.1).collect();
            let (s, si) = masked(&src.cloud, &so, cfg.descriptor_radius);
            let (r, ri) = masked(&reference.cloud, &ro, cfg.descriptor_radius);
            match_clouds(&s, &r, Some(a), cfg, &si, &ri, 0)?
        }
        Strategy::Opo | Strategy::OpoFiltered(_) => {
            let a = need()?;
            let filter = match strategy {
                Strategy::OpoFiltered(f) => Some(f),
                _ => None,
            };
            let chosen = selected_pairs(a, filter);
            if chosen.is_empty() {
                return Err(RegistrationError::NoCorrespondences);
            }
            let mut pairs = Vec::new();
            let mut groups = Vec::new();
            for (k, (s_obj, r_obj, _)) in chosen.into_iter().enumerate() {
                let (s, si) = masked(&src.cloud, &BTreeSet::from([s_obj]), cfg.descriptor_radius);
                let (r, ri) = masked(&reference.cloud, &BTreeSet::from([r_obj]), cfg.descriptor_radius);
                let (p, g) = match_clouds(&s, &r, Some(a), cfg, &si, &ri, k * cfg.top_m)?;
                pairs.extend(p);
                groups.extend(g);
            }
            (pairs, groups)
        }
    };
    if pairs.len() < 3 {
        return Err(RegistrationError::NoCorrespondences);
    }
    let src_pts: Vec<_> = pairs.iter().map(|p| src.cloud.points()[p.1]).collect();
    let ref_pts: Vec<_> = pairs.iter().map(|p| reference.cloud.points()[p.0]).collect();
    let weights: Vec<_> = pairs.iter().map(|p| p.2).collect();
    let (transform, inliers) = estimate_pose(&src_pts, &ref_pts, &weights, &groups, cfg)?;
    Ok(Registration {
        transform,
        correspondences: CorrespondenceSet {
            pairs,
            level: CorrespondenceLevel::Point,
        },
        inliers,
    })
}

/// [`register`] on a scene pair.
pub fn register_pair(
    pair: &ScenePair,
    alignment: Option<&SoftAlignment>,
    strategy: Strategy,
    cfg: &RegistrationConfig,
) -> Result<Registration, RegistrationError> {
    register(&pair.src, &pair.reference, alignment, strategy, cfg)
}

/// The ground-truth alignment as a hard soft-matrix with every pair selected
/// at score 1.
pub fn oracle_alignment(pair: &ScenePair) -> SoftAlignment {
    let (m_src, m_ref) = (pair.src.graph.len(), pair.reference.graph.len());
    let mut soft = nalgebra::DMatrix::zeros(m_src + 1, m_ref + 1);
    let mut row_used = vec![false; m_src];
    let mut col_used = vec![false; m_ref];
    for &(i, j) in &pair.gt_alignment {
        soft[(i, j)] = 1.0;
        row_used[i] = true;
        col_used[j] = true;
    }
    for i in (0..m_src).filter(|&i| !row_used[i]) {
        soft[(i, m_ref)] = 1.0;
    }
    for j in (0..m_ref).filter(|&j| !col_used[j]) {
        soft[(m_src, j)] = 1.0;
    }
    SoftAlignment {
        soft_matrix: soft,
        similarity: pair.overlap_fraction,
        selected_pairs: pair.gt_alignment.iter().map(|&(i, j)| (i, j, 1.0)).collect(),
    }
}

/// Hard alignment pairing nodes that carry the same id, every pair selected
/// at score 1. Fragments cut from one scene keep their object ids, so this
/// is the ground-truth alignment between any two of them.
pub fn node_id_alignment(src: &Fragment, reference: &Fragment) -> SoftAlignment {
    let ref_ids = reference.graph.nodes();
    let pairs: Vec<(usize, usize)> = src
        .graph
        .nodes()
        .iter()
        .enumerate()
        .filter_map(|(i, n)| ref_ids.iter().position(|r| r.id == n.id).map(|j| (i, j)))
        .collect();
    let (m_src, m_ref) = (src.graph.len(), reference.graph.len());
    let mut soft = nalgebra::DMatrix::zeros(m_src + 1, m_ref + 1);
    for &(i, j) in &pairs {
        soft[(i, j)] = 1.0;
    }
    let min_m = m_src.min(m_ref);
    SoftAlignment {
        soft_matrix: soft,
        similarity: if min_m == 0 { 0.0 } else { pairs.len() as f64 / min_m as f64 },
        selected_pairs: pairs.into_iter().map(|(i, j)| (i, j, 1.0)).collect(),
    }
}

/// Ground-truth point correspondences `(p, T_gt(p))` over source points
/// whose object is in the overlap.
pub fn gt_correspondences(pair: &ScenePair) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let shared: BTreeSet<usize> = pair.gt_alignment.iter().map(|p| p.0).collect();
    pair.src
        .cloud
        .points()
        .iter()
        .zip(pair.src.cloud.object_ids())
        .filter(|(_, o)| shared.contains(o))
        .map(|(p, _)| (*p, pair.gt_transform.apply(p)))
        .collect()
}
