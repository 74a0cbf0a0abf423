use super::*;
use crate::encoder::NodeEmbeddings;
use crate::scenegraph::{generate_scene_pair, GeneratorConfig};
use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(iters: usize, temperature: f64) -> MatcherConfig {
    MatcherConfig {
        sinkhorn_iters: iters,
        temperature,
        ..MatcherConfig::default()
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// All maximum-weight partial injections of rows into columns, each row
/// either taking a free column or staying unmatched at score 0.
fn best_partial_assignments(a: &DMatrix<f64>) -> (f64, Vec<Vec<Option<usize>>>) {
    fn rec(a: &DMatrix<f64>, i: usize, used: &mut Vec<bool>, cur: &mut Vec<Option<usize>>, best: &mut (f64, Vec<Vec<Option<usize>>>), acc: f64) {
        if i == a.nrows() {
            if acc > best.0 + 1e-9 {
                *best = (acc, vec![cur.clone()]);
            } else if (acc - best.0).abs() <= 1e-9 {
                best.1.push(cur.clone());
            }
            return;
        }
        cur.push(None);
        rec(a, i + 1, used, cur, best, acc);
        cur.pop();
        for j in 0..a.ncols() {
            if !used[j] {
                used[j] = true;
                cur.push(Some(j));
                rec(a, i + 1, used, cur, best, acc + a[(i, j)]);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    rec(a, 0, &mut vec![false; a.ncols()], &mut Vec::new(), &mut best, 0.0);
    best
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    permutations(n - 1)
        .into_iter()
        .flat_map(|p| {
            (0..n).map(move |k| {
                let mut q = p.clone();
                q.insert(k, n - 1);
                q
            })
        })
        .collect()
}

fn hard_assignment(s: &DMatrix<f64>) -> Vec<Option<usize>> {
    let c = s.ncols() - 1;
    (0..s.nrows() - 1)
        .map(|i| {
            let j = s.row(i).iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            (j < c).then_some(j)
        })
        .collect()
}

#[test]
fn single_forced_match() {
    let s = sinkhorn_with_dummy(&DMatrix::from_element(1, 1, 10.0), &cfg(100, 1.0));
    assert!(s[(0, 0)] > 0.99);
    assert!(s[(0, 1)] < 0.01 && s[(1, 0)] < 0.01);
    assert_eq!(s[(1, 1)], 0.0);
}

#[test]
fn strong_diagonal_wins() {
    let a = DMatrix::from_row_slice(2, 2, &[10.0, -10.0, -10.0, 10.0]);
    let s = sinkhorn_with_dummy(&a, &MatcherConfig::default());
    assert!(s[(0, 0)] > s[(0, 1)] && s[(1, 1)] > s[(1, 0)]);
}

#[test]
fn marginals_hold_after_default_iterations() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (r, c) = (rng.random_range(1..14), rng.random_range(1..14));
        let tape = Tape::new();
        let a = instance_norm_on(&tape.constant(random_matrix(&mut rng, r, c) * 3.0)).value();
        worst = worst.max(marginal_error(&sinkhorn_with_dummy(&a, &MatcherConfig::default())));
    }
    assert!(worst < 1e-6, "worst marginal error {worst:e}");
}

#[test]
fn low_temperature_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = cfg(500, 0.01);
    for n in [4, 5] {
        let mut tested = 0;
        while tested < 25 {
            let a = DMatrix::from_fn(n, n, |_, _| {
                let k = rng.random_range(1..=10) as f64 / 10.0;
                if rng.random_bool(0.5) { k } else { -k }
            });
            let (_, optima) = best_partial_assignments(&a);
            if optima.len() != 1 {
                continue;
            }
            assert_eq!(hard_assignment(&sinkhorn_with_dummy(&a, &c)), optima[0], "{a}");
            tested += 1;
        }
    }
}

#[test]
fn positive_scores_match_the_optimal_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let c = cfg(500, 0.01);
    for n in [4, 5] {
        let mut tested = 0;
        while tested < 25 {
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(1..=20) as f64 / 10.0);
            let value = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| a[(i, j)]).sum::<f64>();
            let perms = permutations(n);
            let best = perms.iter().map(|p| value(p)).fold(f64::NEG_INFINITY, f64::max);
            let optimal: Vec<&Vec<usize>> = perms.iter().filter(|p| (value(p) - best).abs() < 1e-9).collect();
            if optimal.len() != 1 {
                continue;
            }
            let expect: Vec<Option<usize>> = optimal[0].iter().map(|&j| Some(j)).collect();
            assert_eq!(hard_assignment(&sinkhorn_with_dummy(&a, &c)), expect, "{a}");
            tested += 1;
        }
    }
}

#[test]
fn full_shift_of_augmented_scores_cancels() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_matrix(&mut rng, 5, 7);
    let tape = Tape::new();
    let base = instance_norm_on(&tape.constant(a.clone())).value();
    let shifted = instance_norm_on(&tape.constant(a.add_scalar(4.25))).value();
    let c = MatcherConfig::default();
    let diff = (sinkhorn_with_dummy(&base, &c) - sinkhorn_with_dummy(&shifted, &c)).amax();
    assert!(diff < 1e-6, "{diff}");
}

#[test]
fn constant_embeddings_give_zero_affinity() {
    let enc = EncoderConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = MatcherParams::init(&mut rng, &enc, &MatcherConfig::default());
    let e = NodeEmbeddings::new(DMatrix::from_element(3, enc.d_s(), 0.7), DMatrix::from_element(3, enc.d_p, 0.2));
    let a = affinity(&e, &e, &p).unwrap();
    assert!(a.amax() < 1e-9);
}

#[test]
fn identity_weights_peak_on_true_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let enc = EncoderConfig {
        use_geometry: false,
        ..EncoderConfig::default()
    };
    let mut p = MatcherParams::init(&mut rng, &enc, &MatcherConfig::default());
    p.w_s = DMatrix::identity(enc.d_s(), enc.d_s());
    let rows = DMatrix::<f64>::identity(enc.d_s(), enc.d_s()).rows(0, 5).into_owned();
    let e = NodeEmbeddings::new(rows, DMatrix::zeros(5, 0));
    let a = affinity(&e, &e, &p).unwrap();
    for i in 0..5 {
        let j = a.row(i).iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).unwrap().0;
        assert_eq!(i, j);
    }
}

#[test]
fn affinity_rejects_wrong_width() {
    let enc = EncoderConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = MatcherParams::init(&mut rng, &enc, &MatcherConfig::default());
    let e = NodeEmbeddings::new(DMatrix::zeros(3, 5), DMatrix::zeros(3, enc.d_p));
    assert!(matches!(affinity(&e, &e, &p), Err(MatcherError::DimensionMismatch { .. })));
}

#[test]
fn zero_interior_gives_half() {
    let enc = EncoderConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = MatcherParams::init(&mut rng, &enc, &MatcherConfig::default());
    let mut s = DMatrix::zeros(4, 5);
    for i in 0..3 {
        s[(i, 4)] = 1.0;
    }
    for j in 0..4 {
        s[(3, j)] = 1.0;
    }
    let cfg = MatcherConfig::default();
    let (fs, fr) = (random_matrix(&mut rng, 3, 6), random_matrix(&mut rng, 4, 6));
    assert_eq!(afa_similarity(&s, &fs, &fr, &cfg, &p).unwrap(), 0.5);
    assert!(afa_similarity(&s, &fr, &fr, &cfg, &p).is_err());
    assert!(afa_similarity(&s, &fs, &random_matrix(&mut rng, 4, 5), &cfg, &p).is_err());
}

#[test]
fn topk_examples() {
    let s = DMatrix::from_row_slice(3, 3, &[0.9, 0.8, 0.0, 0.85, 0.1, 0.0, 0.0, 0.0, 0.0]);
    assert!(topk_select(&s, 0.0, 2).is_empty());
    let picked: Vec<(usize, usize)> = topk_select(&s, 1.0, 2).iter().map(|p| (p.0, p.1)).collect();
    assert_eq!(picked, vec![(0, 0), (1, 1)]);

    let mut perm = DMatrix::zeros(5, 5);
    for (i, j) in [(0, 2), (1, 0), (2, 3), (3, 1)] {
        perm[(i, j)] = 1.0;
    }
    let mut picked: Vec<(usize, usize)> = topk_select(&perm, 1.0, 4).iter().map(|p| (p.0, p.1)).collect();
    picked.sort_unstable();
    assert_eq!(picked, vec![(0, 2), (1, 0), (2, 3), (3, 1)]);
}

#[test]
fn selection_size_rounds_half_up_and_clamps() {
    assert_eq!(selection_size(0.5, 5, 5), 3);
    assert_eq!(selection_size(0.49, 5, 5), 2);
    assert_eq!(selection_size(1.0, 2, 5), 2);
    assert_eq!(selection_size(-0.1, 2, 5), 0);
}

fn pair_setup(seed: u64) -> (ScenePair, EncoderConfig, EncoderParams, MatcherConfig, MatcherParams) {
    let pair = generate_scene_pair(&GeneratorConfig::default(), seed).unwrap();
    let enc = EncoderConfig::default();
    let mc = MatcherConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ep = EncoderParams::init(&mut rng, &enc);
    let mp = MatcherParams::init(&mut rng, &enc, &mc);
    (pair, enc, ep, mc, mp)
}

#[test]
fn align_is_deterministic_and_well_formed() {
    let (pair, enc, ep, mc, mp) = pair_setup(11);
    let a = align(&pair, &enc, &ep, &mc, &mp).unwrap();
    let b = align(&pair, &enc, &ep, &mc, &mp).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.soft_matrix.shape(), (pair.src.graph.len() + 1, pair.reference.graph.len() + 1));
    assert!(marginal_error(&a.soft_matrix) < 1e-6);
    assert!((0.0..=1.0).contains(&a.similarity));
    assert_eq!(a.selected_pairs.len(), selection_size(a.similarity, a.m_src(), a.m_ref()));
}

#[test]
fn self_alignment_is_a_sub_permutation() {
    let (pair, enc, ep, mc, mp) = pair_setup(12);
    let p = ScenePair::new(
        pair.src.clone(),
        pair.src.clone(),
        (0..pair.src.graph.len()).map(|i| (i, i)).collect(),
        crate::geometry::RigidTransform::identity(),
        1.0,
    )
    .unwrap();
    let a = align(&p, &enc, &ep, &mc, &mp).unwrap();
    let mut rows: Vec<usize> = a.selected_pairs.iter().map(|x| x.0).collect();
    let mut cols: Vec<usize> = a.selected_pairs.iter().map(|x| x.1).collect();
    rows.sort_unstable();
    rows.dedup();
    cols.sort_unstable();
    cols.dedup();
    assert_eq!(rows.len(), a.selected_pairs.len());
    assert_eq!(cols.len(), a.selected_pairs.len());
}

#[test]
fn source_relabeling_permutes_rows() {
    let (pair, enc, ep, mc, mp) = pair_setup(13);
    let n = pair.src.graph.len();
    let perm: Vec<usize> = (0..n).rev().collect();
    let graph = pair.src.graph.permute(&perm);
    let mut inv = vec![0; n];
    for (k, &old) in perm.iter().enumerate() {
        inv[old] = k;
    }
    let cloud = pair.src.cloud.map_objects(|o| inv[o]);
    let permuted = ScenePair::new(
        crate::scenegraph::Fragment::new(graph, cloud).unwrap(),
        pair.reference.clone(),
        pair.gt_alignment.iter().map(|&(i, j)| (inv[i], j)).collect(),
        pair.gt_transform,
        pair.overlap_fraction,
    )
    .unwrap();
    let a = align(&pair, &enc, &ep, &mc, &mp).unwrap();
    let b = align(&permuted, &enc, &ep, &mc, &mp).unwrap();
    for (k, &old) in perm.iter().enumerate() {
        for j in 0..=a.m_ref() {
            assert_abs_diff_eq!(b.soft_matrix[(k, j)], a.soft_matrix[(old, j)], epsilon = 1e-9);
        }
    }
    assert_abs_diff_eq!(a.similarity, b.similarity, epsilon = 1e-12);
}

#[test]
fn alignment_file_round_trips() {
    let (pair, enc, ep, mc, mp) = pair_setup(14);
    let a = align(&pair, &enc, &ep, &mc, &mp).unwrap();
    let ids = |f: &crate::scenegraph::Fragment| f.graph.nodes().iter().map(|n| n.id).collect::<Vec<_>>();
    let file = a.to_file(&ids(&pair.src), &ids(&pair.reference), true);
    let text = serde_json::to_string(&file).unwrap();
    let back: AlignmentFile = serde_json::from_str(&text).unwrap();
    assert_eq!(back, file);
    assert!(serde_json::from_str::<AlignmentFile>(r#"{"pairs":[],"k_tilde":0.5,"bogus":1}"#).is_err());
}

proptest! {
    #[test]
    fn doubling_embeddings_keeps_affinity(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = EncoderConfig::default();
        let p = MatcherParams::init(&mut rng, &enc, &MatcherConfig::default());
        // ε stays negligible against the affinity variance at this scale.
        let mk = |rng: &mut ChaCha8Rng, m| NodeEmbeddings::new(random_matrix(rng, m, enc.d_s()) * 6.0, random_matrix(rng, m, enc.d_p) * 6.0);
        let (r, s) = (mk(&mut rng, 4), mk(&mut rng, 6));
        let dbl = |e: &NodeEmbeddings| NodeEmbeddings::new(&e.semantic * 2.0, &e.geometric * 2.0);
        let a = affinity(&r, &s, &p).unwrap();
        let b = affinity(&dbl(&r), &dbl(&s), &p).unwrap();
        prop_assert!((a - b).amax() < 1e-6);
    }

    #[test]
    fn topk_ignores_monotone_transforms(seed in 0u64..1000, k in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_matrix(&mut rng, 6, 5).map(|v| v.abs());
        let t = s.map(|v| (3.0 * v).exp() - 7.0);
        prop_assert_eq!(
            topk_select(&s, k, 4).iter().map(|p| (p.0, p.1)).collect::<Vec<_>>(),
            topk_select(&t, k, 4).iter().map(|p| (p.0, p.1)).collect::<Vec<_>>()
        );
    }

    #[test]
    fn selections_are_disjoint(seed in 0u64..1000, k in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_matrix(&mut rng, 7, 6).map(|v| (v * 2.0).round() / 2.0);
        let sel = topk_select(&s, k, 5);
        prop_assert_eq!(sel.len(), selection_size(k, 6, 5));
        for a in 0..sel.len() {
            for b in a + 1..sel.len() {
                prop_assert!(sel[a].0 != sel[b].0 && sel[a].1 != sel[b].1);
            }
        }
    }
}

#[test]
fn unrolled_passes_agree_with_the_solver_when_converged() {
    let a = DMatrix::from_row_slice(2, 3, &[1.0, -0.5, 0.2, 0.1, 0.8, -1.0]);
    let tape = Tape::new();
    let unrolled = sinkhorn_on(&tape.constant(a.clone()), 300, 1.0).value();
    let solved = sinkhorn_with_dummy(&a, &cfg(1, 1.0));
    assert!((unrolled - solved).amax() < 1e-9);
}

#[test]
fn matching_head_gradients_match_finite_differences() {
    use crate::training::grad_check;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let head = AfaHead::init(&mut rng, 4);
    let mut params = vec![random_matrix(&mut rng, 4, 3), random_matrix(&mut rng, 5, 3)];
    let flat = [head.w_value, head.w_edge, head.w_agree, head.bias.add_scalar(0.1), head.w_out, head.b_out];
    params.extend(flat.iter().cloned());
    let err = grad_check(
        |_, v| {
            let w = MatcherWeights {
                w_s: v[0].tape().constant(DMatrix::identity(3, 3)),
                w_p: None,
                afa: AfaHead {
                    w_value: v[2],
                    w_edge: v[3],
                    w_agree: v[4],
                    bias: v[5],
                    w_out: v[6],
                    b_out: v[7],
                },
            };
            let cfg = MatcherConfig {
                temperature: 0.5,
                afa_bandwidth: 0.5,
                ..MatcherConfig::default()
            };
            let (soft, k) = match_on(&v[0], None, &v[1], None, &w, &cfg, 5);
            soft.slice(0, 0, 4, 5).log().mean().add(&k)
        },
        &params,
        1e-6,
        200,
        3,
    );
    assert!(err < 1e-5, "{err}");
}
