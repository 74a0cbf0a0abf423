use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrespondenceLevel {
    Superpoint,
    Point,
}

/// Scored pairs `(ref index, src index, score)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(usize, usize, f64)>,
    pub level: CorrespondenceLevel,
}

impl CorrespondenceSet {
    pub fn new(level: CorrespondenceLevel) -> Self {
        Self { pairs: Vec::new(), level }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn mean_score(&self) -> f64 {
        if self.pairs.is_empty() {
            0.0
        } else {
            self.pairs.iter().map(|p| p.2).sum::<f64>() / self.pairs.len() as f64
        }
    }

    pub fn is_valid(&self) -> bool {
        self.pairs.iter().all(|p| p.2.is_finite() && p.2 >= 0.0)
    }
}
