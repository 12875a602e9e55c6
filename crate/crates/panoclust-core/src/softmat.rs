//! The percentage-normalized soft confusion matrix that drives the instance
//! clustering losses.
//!
//! For a sweep with G ground-truth objects and an instance head with N output
//! clusters, cell (i, j) holds the average probability that a point of object
//! i is assigned to cluster j. Averaging by object size (rather than summing
//! raw probabilities) keeps large nearby objects from dominating small or
//! distant ones, and makes every row sum to exactly 1.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::types::{Scene, PROB_SUM_TOL};

/// G×N matrix of per-object cluster assignment mass, rows ordered by
/// ascending ground-truth instance id.
#[derive(Debug, Clone)]
pub struct SoftMatrix {
    values: Mat,
    gt_ids: Vec<u32>,
    point_index: Vec<Vec<usize>>,
    num_points: usize,
}

impl SoftMatrix {
    /// Build from a scene and per-point N-way cluster distributions.
    /// Stuff and ignore points (instance id 0) do not contribute.
    pub fn build(scene: &Scene, inst_prob: &Mat) -> Result<Self> {
        if scene.len() != inst_prob.rows() {
            return Err(Error::LengthMismatch {
                context: "scene points vs inst_prob rows",
                left: scene.len(),
                right: inst_prob.rows(),
            });
        }
        let n = inst_prob.cols();

        let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (p, &inst) in scene.inst_gt().iter().enumerate() {
            if inst > 0 {
                members.entry(inst).or_default().push(p);
            }
        }

        let g = members.len();
        let mut values = Mat::zeros(g, n);
        let mut gt_ids = Vec::with_capacity(g);
        let mut point_index = Vec::with_capacity(g);
        for (row, (id, points)) in members.into_iter().enumerate() {
            let inv = 1.0 / points.len() as f64;
            for &p in &points {
                let probs = inst_prob.row(p);
                let out = values.row_mut(row);
                for (o, &v) in out.iter_mut().zip(probs) {
                    *o += v * inv;
                }
            }
            gt_ids.push(id);
            point_index.push(points);
        }

        Ok(SoftMatrix {
            values,
            gt_ids,
            point_index,
            num_points: scene.len(),
        })
    }

    /// Build the one-hot matrix induced by hard cluster labels: cell (i, j)
    /// is the fraction of object i's points labeled j.
    pub fn from_hard_labels(scene: &Scene, clusters: &[usize], n: usize) -> Result<Self> {
        if scene.len() != clusters.len() {
            return Err(Error::LengthMismatch {
                context: "scene points vs cluster labels",
                left: scene.len(),
                right: clusters.len(),
            });
        }
        if let Some(&c) = clusters.iter().find(|&&c| c >= n) {
            return Err(Error::invalid(format!("cluster label {c} out of range (N={n})")));
        }
        let mut one_hot = Mat::zeros(scene.len(), n);
        for (p, &c) in clusters.iter().enumerate() {
            one_hot.set(p, c, 1.0);
        }
        Self::build(scene, &one_hot)
    }

    /// Construct directly from row-normalized values; used for fixtures and
    /// loss analysis on bare matrices. Each row is treated as a one-point
    /// object.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let g = rows.len();
        for (i, row) in rows.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::invalid(format!("row {i} has a negative or non-finite entry")));
            }
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::invalid(format!("row {i} sums to {sum}, expected 1")));
            }
        }
        let values = Mat::from_rows(rows);
        Ok(SoftMatrix {
            values,
            gt_ids: (1..=g as u32).collect(),
            point_index: (0..g).map(|p| vec![p]).collect(),
            num_points: g,
        })
    }

    /// Number of ground-truth objects, G.
    pub fn num_objects(&self) -> usize {
        self.values.rows()
    }

    /// Number of predictable clusters, N.
    pub fn num_clusters(&self) -> usize {
        self.values.cols()
    }

    /// Point count of the originating sweep (gradients are emitted at this size).
    pub fn num_points(&self) -> usize {
        self.num_points
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn gt_ids(&self) -> &[u32] {
        &self.gt_ids
    }

    /// Point indices of the object behind each row.
    pub fn point_index(&self) -> &[Vec<usize>] {
        &self.point_index
    }
}

/// The set M(S): for every column, the cell holding its maximum.
/// Ties break toward the lowest row index. Empty matrix → empty set.
pub fn column_maxima(matrix: &SoftMatrix) -> Vec<(usize, usize)> {
    let values = matrix.values();
    let (g, n) = (values.rows(), values.cols());
    if g == 0 {
        return Vec::new();
    }
    (0..n)
        .map(|j| {
            let mut best = 0;
            for i in 1..g {
                if values.get(i, j) > values.get(best, j) {
                    best = i;
                }
            }
            (best, j)
        })
        .collect()
}
