use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Fragment, SceneGraph, ScenePair};

/// Controlled-noise regimes applied to a scene graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionRegime {
    RelationsRemoved,
    NodesRemoved,
    BothRemoved,
    WrongNodeSemantics,
    WrongBothSemantics,
}

impl CorruptionRegime {
    pub const ALL: [CorruptionRegime; 5] = [
        Self::RelationsRemoved,
        Self::NodesRemoved,
        Self::BothRemoved,
        Self::WrongNodeSemantics,
        Self::WrongBothSemantics,
    ];
}

fn count(rate: f64, n: usize) -> usize {
    ((rate.clamp(0.0, 1.0) * n as f64).floor() as usize).min(n)
}

fn remove_edges(g: &mut SceneGraph, rate: f64, rng: &mut ChaCha8Rng) {
    let keys: Vec<(usize, usize)> = g.edges().keys().copied().collect();
    let k = count(rate, keys.len());
    let mut picked: Vec<usize> = sample(rng, keys.len(), k).into_vec();
    picked.sort_unstable();
    for i in picked {
        g.remove_edge(keys[i].0, keys[i].1);
    }
}

fn wrong_classes(g: &mut SceneGraph, rate: f64, rng: &mut ChaCha8Rng) {
    let c = g.num_classes();
    let k = if c < 2 { 0 } else { count(rate, g.len()) };
    let mut picked: Vec<usize> = sample(rng, g.len(), k).into_vec();
    picked.sort_unstable();
    for i in picked {
        let old = g.node(i).class;
        let mut new = rng.random_range(0..c - 1);
        if new >= old {
            new += 1;
        }
        g.set_class(i, new).expect("class within vocabulary");
    }
}

fn wrong_relations(g: &mut SceneGraph, rate: f64, rng: &mut ChaCha8Rng) {
    let r = g.num_relations();
    let keys: Vec<((usize, usize), usize)> = g.edges().iter().map(|(&k, &v)| (k, v)).collect();
    let k = if r < 2 { 0 } else { count(rate, keys.len()) };
    let mut picked: Vec<usize> = sample(rng, keys.len(), k).into_vec();
    picked.sort_unstable();
    for i in picked {
        let ((a, b), old) = keys[i];
        let mut new = rng.random_range(0..r - 1);
        if new >= old {
            new += 1;
        }
        g.set_edge_relation(a, b, new).expect("edge exists");
    }
}

/// Returns the corrupted graph and, for every original node, its index in
/// the result (`None` when removed).
pub fn corrupt_with_map(
    g: &SceneGraph,
    regime: CorruptionRegime,
    rate: f64,
    seed: u64,
) -> (SceneGraph, Vec<Option<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identity: Vec<Option<usize>> = (0..g.len()).map(Some).collect();
    let drop_nodes = |g: &SceneGraph, rng: &mut ChaCha8Rng| {
        let k = count(rate, g.len());
        let mut keep = vec![true; g.len()];
        for i in sample(rng, g.len(), k) {
            keep[i] = false;
        }
        g.retain_nodes(&keep)
    };
    match regime {
        CorruptionRegime::RelationsRemoved => {
            let mut out = g.clone();
            remove_edges(&mut out, rate, &mut rng);
            (out, identity)
        }
        CorruptionRegime::NodesRemoved => drop_nodes(g, &mut rng),
        CorruptionRegime::BothRemoved => {
            let mut out = g.clone();
            remove_edges(&mut out, rate, &mut rng);
            drop_nodes(&out, &mut rng)
        }
        CorruptionRegime::WrongNodeSemantics => {
            let mut out = g.clone();
            wrong_classes(&mut out, rate, &mut rng);
            (out, identity)
        }
        CorruptionRegime::WrongBothSemantics => {
            let mut out = g.clone();
            wrong_classes(&mut out, rate, &mut rng);
            wrong_relations(&mut out, rate, &mut rng);
            (out, identity)
        }
    }
}

/// Applies a corruption regime to a scene graph.
pub fn corrupt(g: &SceneGraph, regime: CorruptionRegime, rate: f64, seed: u64) -> SceneGraph {
    corrupt_with_map(g, regime, rate, seed).0
}

/// Corrupts the source graph of a pair, removing the points of dropped nodes
/// and updating the ground-truth alignment.
pub fn corrupt_pair(pair: &ScenePair, regime: CorruptionRegime, rate: f64, seed: u64) -> ScenePair {
    let (graph, map) = corrupt_with_map(&pair.src.graph, regime, rate, seed);
    let (cloud, _) = pair.src.cloud.filter(|_, o| map[o].is_some());
    let cloud = cloud.map_objects(|o| map[o].expect("kept object"));
    let gt_alignment: Vec<(usize, usize)> = pair
        .gt_alignment
        .iter()
        .filter_map(|&(s, r)| map[s].map(|s2| (s2, r)))
        .collect();
    let min_m = graph.len().min(pair.reference.graph.len());
    let overlap_fraction = if min_m == 0 { 0.0 } else { gt_alignment.len() as f64 / min_m as f64 };
    ScenePair {
        src: Fragment { graph, cloud },
        reference: pair.reference.clone(),
        gt_alignment,
        gt_transform: pair.gt_transform,
        overlap_fraction,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegraph::{generate_scene_pair, GeneratorConfig};
    use proptest::prelude::*;

    fn graph() -> SceneGraph {
        let cfg = GeneratorConfig { nodes_per_fragment: (10, 10), ..Default::default() };
        generate_scene_pair(&cfg, 7).unwrap().src.graph
    }

    #[test]
    fn rate_zero_is_identity() {
        let g = graph();
        for regime in CorruptionRegime::ALL {
            assert_eq!(corrupt(&g, regime, 0.0, 1), g);
        }
    }

    #[test]
    fn removing_one_node_shrinks_graph() {
        let g = graph();
        let out = corrupt(&g, CorruptionRegime::NodesRemoved, 0.1, 3);
        assert_eq!(out.len(), g.len() - 1);
        assert_eq!(out.adjacency().nrows(), g.len() - 1);
        out.validate().unwrap();
    }

    #[test]
    fn wrong_semantics_changes_exact_count() {
        let g = graph();
        let out = corrupt(&g, CorruptionRegime::WrongNodeSemantics, 0.5, 9);
        let diff = (0..g.len()).filter(|&i| g.node(i).class != out.node(i).class).count();
        assert_eq!(diff, 5);
        for i in 0..g.len() {
            assert_eq!(out.node(i).attributes[out.node(i).class], 1.0);
        }
    }

    #[test]
    fn relation_removal_count() {
        let g = graph();
        let out = corrupt(&g, CorruptionRegime::RelationsRemoved, 0.25, 2);
        assert_eq!(out.num_edges(), g.num_edges() - (g.num_edges() as f64 * 0.25).floor() as usize);
    }

    #[test]
    fn pair_corruption_keeps_ground_truth_consistent() {
        let pair = generate_scene_pair(&GeneratorConfig::default(), 1).unwrap();
        let out = corrupt_pair(&pair, CorruptionRegime::NodesRemoved, 0.4, 5);
        out.validate().unwrap();
        for &(s, r) in &out.gt_alignment {
            assert_eq!(out.src.graph.node(s).id, pair.reference.graph.node(r).id);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn corruption_preserves_invariants(seed in any::<u64>(), rate in 0.0f64..=1.0, r in 0usize..5) {
            let g = graph();
            let out = corrupt(&g, CorruptionRegime::ALL[r], rate, seed);
            prop_assert!(out.validate().is_ok());
            let a = out.adjacency();
            prop_assert_eq!(a.sum() as usize, out.num_edges());
        }
    }
}
