//! Domain types shared by every module. All types validate their invariants
//! at construction and are immutable afterwards, so they can be shared freely
//! across threads.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Tolerance for "each per-point distribution sums to 1".
pub const PROB_SUM_TOL: f64 = 1e-6;

/// A LiDAR return: coordinates in meters, optional remission in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub remission: Option<f64>,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(Error::invalid(format!(
                "point coordinates must be finite, got ({x}, {y}, {z})"
            )));
        }
        Ok(Point3 {
            x,
            y,
            z,
            remission: None,
        })
    }

    pub fn with_remission(x: f64, y: f64, z: f64, remission: f64) -> Result<Self> {
        let mut p = Point3::new(x, y, z)?;
        if !remission.is_finite() {
            return Err(Error::invalid("remission must be finite"));
        }
        p.remission = Some(remission);
        Ok(p)
    }

    pub fn dist(&self, other: &Point3) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

/// One entry of `ClassTaxonomy::rider_rules`: a rider class that requires a
/// vehicle of `required_nearby` within `search_radius` meters of the instance
/// centroid, and otherwise falls back to `fallback_rider` when that rider's
/// own vehicle is present instead (the fallback vehicle is looked up as the
/// `required_nearby` of the rule whose rider is `fallback_rider`).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RiderRule {
    pub rider: u32,
    pub required_nearby: u32,
    pub fallback_rider: u32,
    pub search_radius: f64,
}

/// Stuff/thing partition of the class ids plus the per-class knobs used by
/// the post-processing heuristics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTaxonomy {
    num_classes: u32,
    stuff_ids: BTreeSet<u32>,
    thing_ids: BTreeSet<u32>,
    ignore_id: u32,
    class_names: Vec<String>,
    max_extent: BTreeMap<u32, f64>,
    merge_eps: BTreeMap<u32, f64>,
    rider_rules: Vec<RiderRule>,
}

impl ClassTaxonomy {
    pub fn new(
        num_classes: u32,
        stuff_ids: impl IntoIterator<Item = u32>,
        thing_ids: impl IntoIterator<Item = u32>,
        ignore_id: u32,
        class_names: Vec<String>,
        max_extent: BTreeMap<u32, f64>,
        merge_eps: BTreeMap<u32, f64>,
        rider_rules: Vec<RiderRule>,
    ) -> Result<Self> {
        let stuff_ids: BTreeSet<u32> = stuff_ids.into_iter().collect();
        let thing_ids: BTreeSet<u32> = thing_ids.into_iter().collect();

        if stuff_ids.contains(&ignore_id) || thing_ids.contains(&ignore_id) {
            return Err(Error::InvalidConfig(
                "ignore id must not appear among stuff or thing ids".into(),
            ));
        }
        if !stuff_ids.is_disjoint(&thing_ids) {
            return Err(Error::InvalidConfig(
                "stuff and thing id sets overlap".into(),
            ));
        }
        let mut all: BTreeSet<u32> = stuff_ids.union(&thing_ids).cloned().collect();
        all.insert(ignore_id);
        let expected: BTreeSet<u32> = (0..num_classes).collect();
        if all != expected {
            return Err(Error::InvalidConfig(format!(
                "stuff ∪ things ∪ {{ignore}} must cover exactly 0..{num_classes}"
            )));
        }
        if class_names.len() != num_classes as usize {
            return Err(Error::LengthMismatch {
                context: "class names vs num_classes",
                left: class_names.len(),
                right: num_classes as usize,
            });
        }
        for &t in &thing_ids {
            match max_extent.get(&t) {
                Some(&v) if v > 0.0 => {}
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "max_extent missing or non-positive for thing class {t}"
                    )))
                }
            }
            match merge_eps.get(&t) {
                Some(&v) if v > 0.0 => {}
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "merge_eps missing or non-positive for thing class {t}"
                    )))
                }
            }
        }
        Ok(ClassTaxonomy {
            num_classes,
            stuff_ids,
            thing_ids,
            ignore_id,
            class_names,
            max_extent,
            merge_eps,
            rider_rules,
        })
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn ignore_id(&self) -> u32 {
        self.ignore_id
    }

    pub fn is_thing(&self, class_id: u32) -> bool {
        self.thing_ids.contains(&class_id)
    }

    pub fn is_stuff(&self, class_id: u32) -> bool {
        self.stuff_ids.contains(&class_id)
    }

    pub fn thing_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.thing_ids.iter().cloned()
    }

    pub fn stuff_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.stuff_ids.iter().cloned()
    }

    pub fn class_name(&self, class_id: u32) -> &str {
        self.class_names
            .get(class_id as usize)
            .map(String::as_str)
            .unwrap_or("?")
    }

    /// Bounding-box diagonal above which `post_splitter` re-clusters, per thing class.
    pub fn max_extent(&self, class_id: u32) -> Option<f64> {
        self.max_extent.get(&class_id).cloned()
    }

    /// DBSCAN radius used both to re-cluster oversized instances and to merge
    /// close instance centroids, per thing class.
    pub fn merge_eps(&self, class_id: u32) -> Option<f64> {
        self.merge_eps.get(&class_id).cloned()
    }

    pub fn rider_rules(&self) -> &[RiderRule] {
        &self.rider_rules
    }
}

/// A point cloud with per-point semantic and instance ground truth.
/// Instance id 0 is "no instance" and is the only id allowed on stuff and
/// ignore points.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    points: Vec<Point3>,
    sem_gt: Vec<u32>,
    inst_gt: Vec<u32>,
}

impl Scene {
    pub fn new(
        points: Vec<Point3>,
        sem_gt: Vec<u32>,
        inst_gt: Vec<u32>,
        taxonomy: &ClassTaxonomy,
    ) -> Result<Self> {
        if points.len() != sem_gt.len() {
            return Err(Error::LengthMismatch {
                context: "points vs sem_gt",
                left: points.len(),
                right: sem_gt.len(),
            });
        }
        if points.len() != inst_gt.len() {
            return Err(Error::LengthMismatch {
                context: "points vs inst_gt",
                left: points.len(),
                right: inst_gt.len(),
            });
        }
        let mut instance_class: BTreeMap<u32, u32> = BTreeMap::new();
        for (p, (&sem, &inst)) in sem_gt.iter().zip(&inst_gt).enumerate() {
            if sem >= taxonomy.num_classes() {
                return Err(Error::invalid(format!(
                    "point {p}: semantic id {sem} out of range"
                )));
            }
            if inst > 0 {
                if !taxonomy.is_thing(sem) {
                    return Err(Error::invalid(format!(
                        "point {p}: instance id {inst} on non-thing class {sem}"
                    )));
                }
                match instance_class.get(&inst) {
                    None => {
                        instance_class.insert(inst, sem);
                    }
                    Some(&c) if c == sem => {}
                    Some(&c) => {
                        return Err(Error::invalid(format!(
                            "instance {inst} spans classes {c} and {sem}"
                        )));
                    }
                }
            }
        }
        Ok(Scene {
            points,
            sem_gt,
            inst_gt,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn sem_gt(&self) -> &[u32] {
        &self.sem_gt
    }

    pub fn inst_gt(&self) -> &[u32] {
        &self.inst_gt
    }

    /// Distinct positive instance ids, ascending.
    pub fn instance_ids(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.inst_gt.iter().cloned().filter(|&i| i > 0).collect();
        set.into_iter().collect()
    }
}

/// Per-point class and cluster distributions produced by a model's two heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    sem_prob: Mat,
    inst_prob: Mat,
}

impl Prediction {
    pub fn new(sem_prob: Mat, inst_prob: Mat) -> Result<Self> {
        if sem_prob.rows() != inst_prob.rows() {
            return Err(Error::LengthMismatch {
                context: "sem_prob rows vs inst_prob rows",
                left: sem_prob.rows(),
                right: inst_prob.rows(),
            });
        }
        for (name, m) in [("sem_prob", &sem_prob), ("inst_prob", &inst_prob)] {
            for r in 0..m.rows() {
                let row = m.row(r);
                let mut sum = 0.0;
                for &v in row {
                    if !(v.is_finite() && v >= 0.0) {
                        return Err(Error::invalid(format!(
                            "{name} row {r} has a negative or non-finite entry"
                        )));
                    }
                    sum += v;
                }
                if (sum - 1.0).abs() > PROB_SUM_TOL {
                    return Err(Error::invalid(format!(
                        "{name} row {r} sums to {sum}, expected 1"
                    )));
                }
            }
        }
        Ok(Prediction { sem_prob, inst_prob })
    }

    pub fn len(&self) -> usize {
        self.sem_prob.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.sem_prob.cols()
    }

    /// N, the number of predictable clusters.
    pub fn num_clusters(&self) -> usize {
        self.inst_prob.cols()
    }

    pub fn sem_prob(&self) -> &Mat {
        &self.sem_prob
    }

    pub fn inst_prob(&self) -> &Mat {
        &self.inst_prob
    }
}

/// Fused panoptic output: a class for every point, an instance id for thing
/// points (0 elsewhere), every instance single-class.
#[derive(Debug, Clone, PartialEq)]
pub struct PanopticLabel {
    sem: Vec<u32>,
    inst: Vec<u32>,
}

impl PanopticLabel {
    pub fn new(sem: Vec<u32>, inst: Vec<u32>, taxonomy: &ClassTaxonomy) -> Result<Self> {
        if sem.len() != inst.len() {
            return Err(Error::LengthMismatch {
                context: "sem vs inst",
                left: sem.len(),
                right: inst.len(),
            });
        }
        let mut instance_class: BTreeMap<u32, u32> = BTreeMap::new();
        for (p, (&s, &i)) in sem.iter().zip(&inst).enumerate() {
            if i > 0 {
                if !taxonomy.is_thing(s) {
                    return Err(Error::invalid(format!(
                        "point {p}: instance id {i} on non-thing class {s}"
                    )));
                }
                match instance_class.get(&i) {
                    None => {
                        instance_class.insert(i, s);
                    }
                    Some(&c) if c == s => {}
                    Some(&c) => {
                        return Err(Error::invalid(format!(
                            "instance {i} spans classes {c} and {s}"
                        )));
                    }
                }
            }
        }
        Ok(PanopticLabel { sem, inst })
    }

    pub fn len(&self) -> usize {
        self.sem.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sem.is_empty()
    }

    pub fn sem(&self) -> &[u32] {
        &self.sem
    }

    pub fn inst(&self) -> &[u32] {
        &self.inst
    }
}

/// Per-point argmax of both heads; ties break toward the lowest index so the
/// result is identical across runs and platforms.
pub fn hard_labels(pred: &Prediction) -> (Vec<u32>, Vec<usize>) {
    let sem = (0..pred.len())
        .map(|p| pred.sem_prob().row_argmax(p) as u32)
        .collect();
    let inst = (0..pred.len())
        .map(|p| pred.inst_prob().row_argmax(p))
        .collect();
    (sem, inst)
}
