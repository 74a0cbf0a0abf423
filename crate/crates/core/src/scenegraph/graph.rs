use std::collections::BTreeMap;

use nalgebra::{DMatrix, Vector3};

use super::SceneGraphError;

/// Relation vocabulary of generated scenes.
pub const NUM_RELATIONS: usize = 3;
pub const REL_NEAR: usize = 0;
pub const REL_SUPPORTED_BY: usize = 1;
pub const REL_SUPPORTS: usize = 2;

/// Bounding-box extents are divided by this before entering X.
pub const EXTENT_SCALE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneNode {
    pub id: usize,
    pub class: usize,
    /// Row of X: one-hot class followed by normalized extents.
    pub attributes: Vec<f64>,
    pub centroid: Vector3<f64>,
}

impl SceneNode {
    /// Node with X = one-hot(class) ‖ extents / EXTENT_SCALE, extents sorted
    /// in descending order.
    pub fn with_extents(id: usize, class: usize, num_classes: usize, extents: [f64; 3], centroid: Vector3<f64>) -> Self {
        let mut ext = extents;
        ext.sort_by(|a, b| b.total_cmp(a));
        let mut attributes = vec![0.0; num_classes + 3];
        attributes[class] = 1.0;
        for (k, e) in ext.iter().enumerate() {
            attributes[num_classes + k] = e / EXTENT_SCALE;
        }
        Self { id, class, attributes, centroid }
    }
}

/// Attributed directed graph with relation-labeled edges. Node indices are
/// positions in `nodes`; `id` is an external label.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    num_classes: usize,
    num_relations: usize,
    nodes: Vec<SceneNode>,
    edges: BTreeMap<(usize, usize), usize>,
}

impl SceneGraph {
    pub fn new(num_classes: usize, num_relations: usize) -> Self {
        Self {
            num_classes,
            num_relations,
            nodes: Vec::new(),
            edges: BTreeMap::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn attribute_dim(&self) -> usize {
        self.nodes.first().map_or(self.num_classes + 3, |n| n.attributes.len())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[SceneNode] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &SceneNode {
        &self.nodes[i]
    }

    pub fn edges(&self) -> &BTreeMap<(usize, usize), usize> {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn add_node(&mut self, node: SceneNode) -> Result<usize, SceneGraphError> {
        if node.class >= self.num_classes {
            return Err(SceneGraphError::ClassOutOfRange {
                class: node.class,
                num_classes: self.num_classes,
            });
        }
        if let Some(first) = self.nodes.first() {
            if first.attributes.len() != node.attributes.len() {
                return Err(SceneGraphError::AttributeWidth {
                    expected: first.attributes.len(),
                    found: node.attributes.len(),
                });
            }
        }
        if !node.attributes.iter().chain(node.centroid.iter()).all(|v| v.is_finite()) {
            return Err(SceneGraphError::NonFinite(node.id));
        }
        self.nodes.push(node);
        Ok(self.nodes.len() - 1)
    }

    pub fn add_edge(&mut self, src: usize, dst: usize, relation: usize) -> Result<(), SceneGraphError> {
        let m = self.nodes.len();
        if src >= m || dst >= m {
            return Err(SceneGraphError::NodeOutOfRange { index: src.max(dst), len: m });
        }
        if src == dst {
            return Err(SceneGraphError::SelfLoop(src));
        }
        if relation >= self.num_relations {
            return Err(SceneGraphError::RelationOutOfRange {
                relation,
                num_relations: self.num_relations,
            });
        }
        self.edges.insert((src, dst), relation);
        Ok(())
    }

    pub fn remove_edge(&mut self, src: usize, dst: usize) -> Option<usize> {
        self.edges.remove(&(src, dst))
    }

    pub fn set_edge_relation(&mut self, src: usize, dst: usize, relation: usize) -> Result<(), SceneGraphError> {
        match self.edges.get_mut(&(src, dst)) {
            Some(r) if relation < self.num_relations => {
                *r = relation;
                Ok(())
            }
            Some(_) => Err(SceneGraphError::RelationOutOfRange {
                relation,
                num_relations: self.num_relations,
            }),
            None => Err(SceneGraphError::NodeOutOfRange { index: src, len: self.nodes.len() }),
        }
    }

    /// Changes a node's class and its one-hot block in X.
    pub fn set_class(&mut self, i: usize, class: usize) -> Result<(), SceneGraphError> {
        if class >= self.num_classes {
            return Err(SceneGraphError::ClassOutOfRange {
                class,
                num_classes: self.num_classes,
            });
        }
        let node = &mut self.nodes[i];
        node.attributes[node.class] = 0.0;
        node.attributes[class] = 1.0;
        node.class = class;
        Ok(())
    }

    /// Binary M×M adjacency.
    pub fn adjacency(&self) -> DMatrix<f64> {
        let m = self.nodes.len();
        let mut a = DMatrix::zeros(m, m);
        for &(i, j) in self.edges.keys() {
            a[(i, j)] = 1.0;
        }
        a
    }

    /// Node attribute matrix X (M × attribute_dim).
    pub fn attribute_matrix(&self) -> DMatrix<f64> {
        let d = self.attribute_dim();
        DMatrix::from_fn(self.nodes.len(), d, |i, k| self.nodes[i].attributes[k])
    }

    /// Keeps nodes with `keep[i]`; returns the subgraph and the old→new index
    /// map. Edges touching removed nodes are dropped.
    pub fn retain_nodes(&self, keep: &[bool]) -> (SceneGraph, Vec<Option<usize>>) {
        let mut map = vec![None; self.nodes.len()];
        let mut g = SceneGraph::new(self.num_classes, self.num_relations);
        for (i, node) in self.nodes.iter().enumerate() {
            if keep[i] {
                map[i] = Some(g.nodes.len());
                g.nodes.push(node.clone());
            }
        }
        for (&(i, j), &r) in &self.edges {
            if let (Some(a), Some(b)) = (map[i], map[j]) {
                g.edges.insert((a, b), r);
            }
        }
        (g, map)
    }

    /// Reorders nodes so that new node `k` is old node `perm[k]`.
    pub fn permute(&self, perm: &[usize]) -> SceneGraph {
        let mut inv = vec![0; perm.len()];
        for (k, &old) in perm.iter().enumerate() {
            inv[old] = k;
        }
        SceneGraph {
            num_classes: self.num_classes,
            num_relations: self.num_relations,
            nodes: perm.iter().map(|&i| self.nodes[i].clone()).collect(),
            edges: self.edges.iter().map(|(&(i, j), &r)| ((inv[i], inv[j]), r)).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), SceneGraphError> {
        let m = self.nodes.len();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.class >= self.num_classes {
                return Err(SceneGraphError::ClassOutOfRange {
                    class: node.class,
                    num_classes: self.num_classes,
                });
            }
            if node.attributes.len() != self.nodes[0].attributes.len() {
                return Err(SceneGraphError::AttributeWidth {
                    expected: self.nodes[0].attributes.len(),
                    found: node.attributes.len(),
                });
            }
            if self.nodes[..i].iter().any(|n| n.id == node.id) {
                return Err(SceneGraphError::DuplicateId(node.id));
            }
        }
        for (&(i, j), &r) in &self.edges {
            if i >= m || j >= m {
                return Err(SceneGraphError::NodeOutOfRange { index: i.max(j), len: m });
            }
            if i == j {
                return Err(SceneGraphError::SelfLoop(i));
            }
            if r >= self.num_relations {
                return Err(SceneGraphError::RelationOutOfRange {
                    relation: r,
                    num_relations: self.num_relations,
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneGraph {
        let mut g = SceneGraph::new(4, NUM_RELATIONS);
        for i in 0..3 {
            g.add_node(SceneNode::with_extents(10 + i, i, 4, [0.1, 0.3, 0.2], Vector3::zeros()))
                .unwrap();
        }
        g.add_edge(0, 1, REL_NEAR).unwrap();
        g.add_edge(2, 1, REL_SUPPORTED_BY).unwrap();
        g
    }

    #[test]
    fn adjacency_matches_edges() {
        let a = small().adjacency();
        assert_eq!(a[(0, 1)], 1.0);
        assert_eq!(a[(2, 1)], 1.0);
        assert_eq!(a.sum(), 2.0);
        assert_eq!(a.diagonal().sum(), 0.0);
    }

    #[test]
    fn extents_sorted_descending() {
        let n = SceneNode::with_extents(0, 1, 4, [0.1, 0.3, 0.2], Vector3::zeros());
        assert_eq!(&n.attributes[4..], &[0.15, 0.1, 0.05]);
        assert_eq!(n.attributes[1], 1.0);
    }

    #[test]
    fn self_loops_and_bad_relations_are_rejected() {
        let mut g = small();
        assert_eq!(g.add_edge(1, 1, 0), Err(SceneGraphError::SelfLoop(1)));
        assert!(g.add_edge(0, 2, 7).is_err());
    }

    #[test]
    fn retain_drops_dangling_edges() {
        let (g, map) = small().retain_nodes(&[true, false, true]);
        assert_eq!(g.len(), 2);
        assert_eq!(g.num_edges(), 0);
        assert_eq!(map, vec![Some(0), None, Some(1)]);
    }

    #[test]
    fn permute_moves_edges() {
        let g = small().permute(&[2, 0, 1]);
        assert_eq!(g.node(0).id, 12);
        assert_eq!(g.edges().get(&(1, 2)), Some(&REL_NEAR));
        assert_eq!(g.edges().get(&(0, 2)), Some(&REL_SUPPORTED_BY));
    }
}
