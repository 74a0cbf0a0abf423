use super::*;
use crate::geometry::{PointCloud, RigidTransform};
use crate::matcher::SoftAlignment;
use crate::metrics::{mosaic_metrics, rre_deg, rte, scc, MetricThresholds};
use crate::scenegraph::{generate_mosaic, generate_scene_pair, Fragment, GeneratorConfig, ScenePair, ScenePreset};
use nalgebra::{DMatrix, Vector3};
use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

fn set_with(descriptors: DMatrix<f64>, object_ids: Vec<usize>) -> SuperpointSet {
    let n = descriptors.nrows();
    SuperpointSet {
        centers: vec![Vector3::zeros(); n],
        members: (0..n).map(|i| vec![i]).collect(),
        point_descriptors: descriptors.clone(),
        descriptors,
        object_ids,
    }
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> PointCloud {
    let pts = (0..n).map(|_| Vector3::new(rng.random(), rng.random(), rng.random()) * scale).collect();
    PointCloud::new(pts, (0..n).map(|i| i % 3).collect()).unwrap()
}

#[test]
fn one_voxel_gives_one_superpoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cloud = random_cloud(&mut rng, 30, 0.1);
    let sp = build_superpoints(&cloud, 10.0, 0.3).unwrap();
    assert_eq!(sp.len(), 1);
    assert_eq!(sp.members[0], (0..30).collect::<Vec<_>>());
    assert_eq!(sp.object_ids, vec![0]);
    assert!(build_superpoints(&cloud, 0.0, 0.3).is_err());
}

#[test]
fn separated_clusters_split() {
    let mut pts = Vec::new();
    for i in 0..10 {
        pts.push(Vector3::new(0.01 * i as f64, 0.0, 0.0));
        pts.push(Vector3::new(5.0 + 0.01 * i as f64, 0.0, 0.0));
    }
    let sp = build_superpoints(&PointCloud::unlabeled(pts), 0.5, 0.3).unwrap();
    assert_eq!(sp.len(), 2);
    let evens: Vec<usize> = (0..20).step_by(2).collect();
    let odds: Vec<usize> = (1..20).step_by(2).collect();
    assert!(sp.members.contains(&evens) && sp.members.contains(&odds));
}

#[test]
fn matching_matrix_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cloud = random_cloud(&mut rng, 200, 1.0);
    let sp = build_superpoints(&cloud, 0.25, 0.3).unwrap();
    let c = superpoint_matching_matrix(&sp, &sp).unwrap();
    for i in 0..c.nrows() {
        let max = c.row(i).max();
        assert!(c[(i, i)] >= max - 1e-12);
    }
    let a = set_with(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]), vec![0, 0]);
    let b = set_with(DMatrix::from_row_slice(1, 2, &[0.0, 3.0]), vec![0]);
    let c = superpoint_matching_matrix(&a, &b).unwrap();
    assert_eq!(c.shape(), (1, 2));
    assert_eq!(c[(0, 0)], 0.5);
    assert_eq!(c[(0, 1)], 0.5);
    let wide = set_with(DMatrix::zeros(1, 3), vec![0]);
    assert!(matches!(superpoint_matching_matrix(&a, &wide), Err(RegistrationError::DimensionMismatch { .. })));
}

fn hard_soft(perm: &[(usize, usize)], m_src: usize, m_ref: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(m_src + 1, m_ref + 1);
    for &(i, j) in perm {
        s[(i, j)] = 1.0;
    }
    s
}

#[test]
fn rescore_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let src = set_with(DMatrix::from_fn(4, 5, |_, _| rng.random()), vec![0, 1, 2, 1]);
    let reference = set_with(DMatrix::from_fn(3, 5, |_, _| rng.random()), vec![2, 0, 1]);
    let c = superpoint_matching_matrix(&src, &reference).unwrap();
    let soft = hard_soft(&[(0, 1), (1, 2), (2, 0)], 3, 3);
    assert_eq!(rescore(&c, &soft, &src, &reference, 0.0).unwrap(), c);
    let c2 = rescore(&c, &soft, &src, &reference, 0.2).unwrap();
    for i in 0..3 {
        for j in 0..4 {
            let aligned = soft[(src.object_ids[j], reference.object_ids[i])] == 1.0;
            assert_eq!(c2[(i, j)], c[(i, j)] + if aligned { 0.2 } else { 0.0 });
        }
    }
    let bad = set_with(DMatrix::zeros(1, 5), vec![7]);
    assert!(matches!(rescore(&c, &soft, &bad, &reference, 0.2), Err(RegistrationError::ObjectOutOfRange { .. }) | Err(RegistrationError::DimensionMismatch { .. })));
    assert!(rescore(&c, &soft, &src, &reference, -1.0).is_err());
}

#[test]
fn rescoring_flips_twin_superpoints_to_the_aligned_copy() {
    let cfg = GeneratorConfig {
        preset: ScenePreset::TwinObjects,
        overlap: (0.3, 0.6),
        ..GeneratorConfig::default()
    };
    let mut flips = 0;
    let mut broken = 0;
    for seed in 0..10 {
        let pair = generate_scene_pair(&cfg, seed).unwrap();
        let ssp = build_superpoints(&pair.src.cloud, 0.25, 0.3).unwrap();
        let rsp = build_superpoints(&pair.reference.cloud, 0.25, 0.3).unwrap();
        let c = superpoint_matching_matrix(&ssp, &rsp).unwrap();
        let soft = oracle_alignment(&pair).soft_matrix;
        let c2 = rescore(&c, &soft, &ssp, &rsp, 0.2).unwrap();
        let partner: std::collections::HashMap<usize, usize> = pair.gt_alignment.iter().map(|&(s, r)| (r, s)).collect();
        let argmax = |m: &DMatrix<f64>, i: usize| (0..m.ncols()).max_by(|&a, &b| m[(i, a)].total_cmp(&m[(i, b)])).unwrap();
        for i in 0..rsp.len() {
            let Some(&want) = partner.get(&rsp.object_ids[i]) else { continue };
            let before = ssp.object_ids[argmax(&c, i)] == want;
            let after = ssp.object_ids[argmax(&c2, i)] == want;
            flips += usize::from(!before && after);
            broken += usize::from(before && !after);
        }
    }
    assert!(flips > 0);
    assert_eq!(broken, 0);
}

#[test]
fn extraction_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cloud = random_cloud(&mut rng, 300, 1.5);
    let sp = build_superpoints(&cloud, 0.25, 0.3).unwrap();
    let c = superpoint_matching_matrix(&sp, &sp).unwrap();
    let prior = DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| c[(i, j)] + if i == j { 1.0 } else { 0.0 });
    let cfg = ExtractionConfig {
        top_m: sp.len(),
        ..ExtractionConfig::default()
    };
    let set = extract_correspondences(&prior, &sp, &sp, &cfg).unwrap();
    assert!(!set.is_empty());
    assert!(set.pairs.iter().all(|&(r, s, _)| r == s));

    let one = ExtractionConfig {
        top_m: 1,
        ..ExtractionConfig::default()
    };
    let set = extract_correspondences(&c, &sp, &sp, &one).unwrap();
    let (a, b) = top_superpoint_pairs(&c, 1, false)[0];
    assert!(set.pairs.iter().all(|&(r, s, _)| sp.members[a].contains(&r) && sp.members[b].contains(&s)));
    assert!(extract_correspondences(&c, &sp, &sp, &ExtractionConfig { top_m: 0, ..one }).is_err());
}

#[test]
fn disjoint_descriptor_clusters_leave_few_mutual_pairs() {
    let src = set_with(DMatrix::from_fn(6, 4, |i, j| if j < 2 { 1.0 + i as f64 } else { 0.0 }), vec![0; 6]);
    let reference = set_with(DMatrix::from_fn(6, 4, |i, j| if j >= 2 { 1.0 + i as f64 } else { 0.0 }), vec![0; 6]);
    let c = superpoint_matching_matrix(&src, &reference).unwrap();
    let cfg = ExtractionConfig {
        top_m: 36,
        mutual: true,
        ratio: 0.8,
    };
    let set = extract_correspondences(&c, &src, &reference, &cfg).unwrap();
    assert!(set.len() <= 1, "{}", set.len());
}

fn clean_pair(seed: u64) -> ScenePair {
    generate_scene_pair(&GeneratorConfig::default(), seed).unwrap()
}

#[test]
fn o2o_recovers_planted_transform_from_ground_truth() {
    let cfg = RegistrationConfig::default();
    for seed in 0..5 {
        let pair = clean_pair(seed);
        let reg = register_pair(&pair, Some(&oracle_alignment(&pair)), Strategy::O2o, &cfg).unwrap();
        assert!(rre_deg(&reg.transform, &pair.gt_transform) < 0.5);
        assert!(rte(&reg.transform, &pair.gt_transform) < 0.01);
    }
}

#[test]
fn o2o_without_selection_has_no_correspondences() {
    let pair = clean_pair(1);
    let mut a = oracle_alignment(&pair);
    a.selected_pairs.clear();
    let cfg = RegistrationConfig::default();
    assert!(matches!(register_pair(&pair, Some(&a), Strategy::O2o, &cfg), Err(RegistrationError::NoCorrespondences)));
    assert!(matches!(register_pair(&pair, None, Strategy::O2o, &cfg), Err(RegistrationError::MissingAlignment)));
}

fn self_pair(seed: u64) -> ScenePair {
    let p = clean_pair(seed);
    let n = p.src.graph.len();
    ScenePair::new(p.src.clone(), p.src.clone(), (0..n).map(|i| (i, i)).collect(), RigidTransform::identity(), 1.0).unwrap()
}

#[test]
fn a2a_on_identical_clouds_is_identity() {
    let pair = self_pair(2);
    let reg = register_pair(&pair, None, Strategy::A2a, &RegistrationConfig::default()).unwrap();
    assert!(rre_deg(&reg.transform, &RigidTransform::identity()) < 1e-6);
    assert!(reg.transform.translation().norm() < 1e-6);
}

#[test]
fn o2o_with_every_node_selected_equals_a2a() {
    let pair = clean_pair(3);
    let m_src = pair.src.graph.len();
    let m_ref = pair.reference.graph.len();
    let a = SoftAlignment {
        soft_matrix: DMatrix::from_element(m_src + 1, m_ref + 1, 0.1),
        similarity: 1.0,
        selected_pairs: (0..m_src.max(m_ref)).map(|k| (k % m_src, k % m_ref, 0.5)).collect(),
    };
    let cfg = RegistrationConfig {
        gamma: 0.0,
        ..RegistrationConfig::default()
    };
    let o2o = register_pair(&pair, Some(&a), Strategy::O2o, &cfg).unwrap();
    let a2a = register_pair(&pair, None, Strategy::A2a, &cfg).unwrap();
    assert_eq!(o2o, a2a);
}

#[test]
fn registration_is_left_equivariant() {
    let pair = clean_pair(4);
    let cfg = RegistrationConfig::default();
    let al = oracle_alignment(&pair);
    let base = register_pair(&pair, Some(&al), Strategy::O2o, &cfg).unwrap();
    let q = RigidTransform::from_axis_angle(Vector3::new(0.3, -0.5, 0.8), 1.1, Vector3::new(0.4, 1.0, -2.0));
    let moved = Fragment::new(pair.reference.graph.clone(), crate::geometry::apply_transform(&q, &pair.reference.cloud)).unwrap();
    let rotated = ScenePair::new(pair.src.clone(), moved, pair.gt_alignment.clone(), q.compose(&pair.gt_transform), pair.overlap_fraction).unwrap();
    let reg = register_pair(&rotated, Some(&al), Strategy::O2o, &cfg).unwrap();
    let expect = q.compose(&base.transform);
    assert!(rre_deg(&reg.transform, &expect) < 1e-6);
    assert!(rte(&reg.transform, &expect) < 1e-6);
}

#[test]
fn o2o_correspondences_are_more_consistent_than_a2a_on_symmetric_scenes() {
    let gen = GeneratorConfig {
        preset: ScenePreset::SymmetricStress,
        ..GeneratorConfig::default()
    };
    let cfg = RegistrationConfig::default();
    let (mut o2o, mut a2a) = (0.0, 0.0);
    for seed in 0..50 {
        let pair = generate_scene_pair(&gen, seed).unwrap();
        let al = oracle_alignment(&pair);
        let score = |s: Strategy, a: Option<&SoftAlignment>| {
            let reg = register_pair(&pair, a, s, &cfg).unwrap();
            scc(&reg.correspondences, pair.src.cloud.object_ids(), pair.reference.cloud.object_ids(), &pair.gt_alignment).unwrap()
        };
        o2o += score(Strategy::O2o, Some(&al));
        a2a += score(Strategy::A2a, None);
    }
    assert!(o2o >= a2a, "{o2o} vs {a2a}");
}

#[test]
fn opo_filters_object_pairs() {
    let pair = clean_pair(5);
    let mut al = oracle_alignment(&pair);
    for (k, p) in al.selected_pairs.iter_mut().enumerate() {
        p.2 = if k == 0 { 0.9 } else { 0.1 };
    }
    let cfg = RegistrationConfig::default();
    let reg = register_pair(&pair, Some(&al), Strategy::OpoFiltered(OpoFilter::Score(0.5)), &cfg).unwrap();
    let objects: BTreeSet<usize> = reg.correspondences.pairs.iter().map(|p| pair.src.cloud.object_ids()[p.1]).collect();
    assert_eq!(objects, BTreeSet::from([al.selected_pairs[0].0]));
    let reg = register_pair(&pair, Some(&al), Strategy::OpoFiltered(OpoFilter::TopK(1)), &cfg).unwrap();
    let objects: BTreeSet<usize> = reg.correspondences.pairs.iter().map(|p| pair.src.cloud.object_ids()[p.1]).collect();
    assert_eq!(objects, BTreeSet::from([al.selected_pairs[0].0]));
}

#[test]
fn strategy_names_round_trip() {
    for s in ["a2a", "o2o", "opo", "opo-s=0.25", "opo-k=3"] {
        assert_eq!(s.parse::<Strategy>().unwrap().to_string(), s);
    }
    assert_eq!("opo-s".parse::<Strategy>().unwrap(), Strategy::OpoFiltered(OpoFilter::Score(0.5)));
    assert_eq!("OPO-K".parse::<Strategy>().unwrap(), Strategy::OpoFiltered(OpoFilter::TopK(5)));
    assert!("bogus".parse::<Strategy>().is_err());
}

fn id_aligner(a: &Fragment, b: &Fragment) -> Option<SoftAlignment> {
    Some(node_id_alignment(a, b))
}

#[test]
fn mosaic_of_identical_clouds_is_identity() {
    let p = clean_pair(6);
    let frags = vec![p.src.clone(), p.src.clone()];
    let poses = mosaic(&frags, id_aligner, &MosaicConfig::default()).unwrap();
    assert_eq!(poses[0], RigidTransform::identity());
    assert!(rre_deg(&poses[1], &RigidTransform::identity()) < 1e-6 && poses[1].translation().norm() < 1e-6);
}

#[test]
fn three_fragments_reconstruct_the_scene() {
    let m = generate_mosaic(&GeneratorConfig::default(), 3, 6, 3, 7).unwrap();
    let poses = mosaic(&m.fragments, id_aligner, &MosaicConfig::default()).unwrap();
    let recon = assemble(&m.fragments, &poses);
    let mm = mosaic_metrics(&recon, &m.scene.full_cloud(), &MetricThresholds::default()).unwrap();
    assert!(mm.acc < 0.01 && mm.comp < 0.01 && mm.f1 >= 0.99, "{mm:?}");
}

#[test]
fn isolated_fragment_is_disconnected() {
    let m = generate_mosaic(&GeneratorConfig::default(), 2, 6, 3, 8).unwrap();
    let mut far = generate_mosaic(&GeneratorConfig::default(), 1, 6, 3, 99).unwrap().fragments;
    let mut frags = m.fragments.clone();
    frags.append(&mut far);
    let disjoint = |a: &Fragment, b: &Fragment| {
        let same = std::ptr::eq(a, &frags[2]) || std::ptr::eq(b, &frags[2]);
        if same {
            None
        } else {
            id_aligner(a, b)
        }
    };
    match mosaic(&frags, disjoint, &MosaicConfig::default()) {
        Err(RegistrationError::DisconnectedScenes(v)) => assert_eq!(v, vec![2]),
        other => panic!("{other:?}"),
    }
    assert!(mosaic(&frags[..1], id_aligner, &MosaicConfig::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn superpoints_partition_the_cloud(seed in 0u64..1000, n in 1usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = random_cloud(&mut rng, n, 2.0);
        let sp = build_superpoints(&cloud, 0.4, 0.3).unwrap();
        let mut all: Vec<usize> = sp.members.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let c = superpoint_matching_matrix(&sp, &sp).unwrap();
        prop_assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rescore_is_monotone(seed in 0u64..1000, bump in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src = set_with(DMatrix::from_fn(3, 4, |_, _| rng.random()), vec![0, 1, 1]);
        let reference = set_with(DMatrix::from_fn(2, 4, |_, _| rng.random()), vec![1, 0]);
        let c = superpoint_matching_matrix(&src, &reference).unwrap();
        let soft = DMatrix::from_fn(3, 3, |_, _| rng.random::<f64>());
        let mut higher = soft.clone();
        higher[(1, 0)] += bump;
        let a = rescore(&c, &soft, &src, &reference, 0.2).unwrap();
        let b = rescore(&c, &higher, &src, &reference, 0.2).unwrap();
        prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| y >= x));
    }
}
