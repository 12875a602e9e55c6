//! Optional plausibility-check heuristics over fused output: split instances
//! that are implausibly large for their class, merge same-class instances
//! whose centers sit closer than objects of that class can, and fix riders
//! paired with the wrong vehicle. All three are built on DBSCAN.

use std::collections::{BTreeMap, HashMap, VecDeque};

use crate::error::{Error, Result};
use crate::types::{ClassTaxonomy, PanopticLabel, Point3};

/// DBSCAN parameters: neighborhood radius (meters) and the density threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbscanParams {
    pub eps: f64,
    pub min_pts: usize,
}

impl DbscanParams {
    pub fn new(eps: f64, min_pts: usize) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidConfig(format!("eps must be positive, got {eps}")));
        }
        if min_pts == 0 {
            return Err(Error::InvalidConfig("min_pts must be at least 1".into()));
        }
        Ok(DbscanParams { eps, min_pts })
    }
}

/// Uniform grid over the points with cell size eps; a point's neighbors can
/// only live in its own or the 26 surrounding cells.
struct NeighborGrid {
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
    inv_eps: f64,
}

impl NeighborGrid {
    fn new(points: &[Point3], eps: f64) -> Self {
        let inv_eps = 1.0 / eps;
        let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, inv_eps)).or_default().push(i);
        }
        NeighborGrid { cells, inv_eps }
    }

    fn key(p: &Point3, inv_eps: f64) -> (i64, i64, i64) {
        (
            (p.x * inv_eps).floor() as i64,
            (p.y * inv_eps).floor() as i64,
            (p.z * inv_eps).floor() as i64,
        )
    }

    /// Indices within eps of point `center` (inclusive, self counted),
    /// ascending so downstream scans stay deterministic.
    fn neighbors(&self, points: &[Point3], center: usize, eps: f64) -> Vec<usize> {
        let (cx, cy, cz) = Self::key(&points[center], self.inv_eps);
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &q in bucket {
                            if points[center].dist(&points[q]) <= eps {
                                out.push(q);
                            }
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Density-based clustering. Core points have at least `min_pts` neighbors
/// within eps (Euclidean, inclusive, self counted); clusters are the
/// density-connected components, ids 1.. in discovery order. Border points
/// join the first cluster that reaches them in the deterministic ascending
/// scan; noise stays 0.
pub fn dbscan(points: &[Point3], params: &DbscanParams) -> Vec<u32> {
    let n = points.len();
    let mut labels = vec![0u32; n];
    if n == 0 {
        return labels;
    }
    let grid = NeighborGrid::new(points, params.eps);
    let mut visited = vec![false; n];
    let mut next_cluster = 0u32;

    for p in 0..n {
        if visited[p] {
            continue;
        }
        visited[p] = true;
        let neighbors = grid.neighbors(points, p, params.eps);
        if neighbors.len() < params.min_pts {
            continue; // noise for now; a later expansion may still claim it
        }
        next_cluster += 1;
        labels[p] = next_cluster;
        let mut seeds: VecDeque<usize> = neighbors.into();
        while let Some(q) = seeds.pop_front() {
            if labels[q] == 0 {
                labels[q] = next_cluster;
            }
            if !visited[q] {
                visited[q] = true;
                let q_neighbors = grid.neighbors(points, q, params.eps);
                if q_neighbors.len() >= params.min_pts {
                    seeds.extend(q_neighbors);
                }
            }
        }
    }
    labels
}

fn instance_points(label: &PanopticLabel) -> BTreeMap<u32, Vec<usize>> {
    let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (p, &inst) in label.inst().iter().enumerate() {
        if inst > 0 {
            map.entry(inst).or_default().push(p);
        }
    }
    map
}

fn centroid(points: &[Point3], members: &[usize]) -> Point3 {
    let inv = 1.0 / members.len() as f64;
    let (mut x, mut y, mut z) = (0.0, 0.0, 0.0);
    for &p in members {
        x += points[p].x;
        y += points[p].y;
        z += points[p].z;
    }
    Point3::new(x * inv, y * inv, z * inv).expect("centroid of finite points is finite")
}

fn bbox_diagonal(points: &[Point3], members: &[usize]) -> f64 {
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for &p in members {
        let c = [points[p].x, points[p].y, points[p].z];
        for a in 0..3 {
            min[a] = min[a].min(c[a]);
            max[a] = max[a].max(c[a]);
        }
    }
    ((max[0] - min[0]).powi(2) + (max[1] - min[1]).powi(2) + (max[2] - min[2]).powi(2)).sqrt()
}

/// Split thing instances whose bounding-box diagonal exceeds the class
/// extent, by re-clustering their points with DBSCAN (eps = class merge_eps,
/// min_pts = 2). Sub-clusters get fresh ids; DBSCAN noise points each keep a
/// fresh singleton id, so no point loses its instance.
pub fn post_splitter(
    label: &PanopticLabel,
    points: &[Point3],
    taxonomy: &ClassTaxonomy,
) -> Result<PanopticLabel> {
    let instances = instance_points(label);
    let mut inst = label.inst().to_vec();
    let mut next_id = instances.keys().max().map_or(1, |&m| m + 1);

    for (_, members) in instances {
        let class = label.sem()[members[0]];
        let (Some(extent), Some(eps)) = (taxonomy.max_extent(class), taxonomy.merge_eps(class))
        else {
            continue;
        };
        if bbox_diagonal(points, &members) <= extent {
            continue;
        }
        let local: Vec<Point3> = members.iter().map(|&p| points[p]).collect();
        let sub = dbscan(&local, &DbscanParams::new(eps, 2)?);
        let clusters = sub.iter().max().cloned().unwrap_or(0);
        let base = next_id;
        for (k, &p) in members.iter().enumerate() {
            if sub[k] > 0 {
                inst[p] = base + sub[k] - 1;
            }
        }
        next_id += clusters;
        for (k, &p) in members.iter().enumerate() {
            if sub[k] == 0 {
                inst[p] = next_id;
                next_id += 1;
            }
        }
    }
    PanopticLabel::new(label.sem().to_vec(), inst, taxonomy)
}

/// Merge same-class instances whose centroids cluster under DBSCAN
/// (eps = class merge_eps, min_pts = 1, so singletons always survive).
/// Merged instances take the lowest participating id.
pub fn post_merger(
    label: &PanopticLabel,
    points: &[Point3],
    taxonomy: &ClassTaxonomy,
) -> Result<PanopticLabel> {
    let instances = instance_points(label);
    let mut by_class: BTreeMap<u32, Vec<(u32, Point3)>> = BTreeMap::new();
    for (&id, members) in &instances {
        let class = label.sem()[members[0]];
        by_class
            .entry(class)
            .or_default()
            .push((id, centroid(points, members)));
    }

    let mut remap: BTreeMap<u32, u32> = BTreeMap::new();
    for (class, entries) in by_class {
        let Some(eps) = taxonomy.merge_eps(class) else {
            continue;
        };
        let centers: Vec<Point3> = entries.iter().map(|&(_, c)| c).collect();
        let groups = dbscan(&centers, &DbscanParams::new(eps, 1)?);
        let mut lowest: BTreeMap<u32, u32> = BTreeMap::new();
        for (k, &(id, _)) in entries.iter().enumerate() {
            let target = lowest.entry(groups[k]).or_insert(id);
            remap.insert(id, *target);
        }
    }

    let inst = label
        .inst()
        .iter()
        .map(|&i| if i > 0 { remap.get(&i).cloned().unwrap_or(i) } else { 0 })
        .collect();
    PanopticLabel::new(label.sem().to_vec(), inst, taxonomy)
}

/// Relabel rider instances whose required vehicle is absent near their
/// centroid while the fallback rider's vehicle is present. The fallback
/// vehicle class is the `required_nearby` of the fallback rider's own rule;
/// rules without such a companion never fire.
pub fn post_cyclists(
    label: &PanopticLabel,
    points: &[Point3],
    taxonomy: &ClassTaxonomy,
) -> Result<PanopticLabel> {
    let instances = instance_points(label);
    let input_sem = label.sem().to_vec();
    let mut sem = input_sem.clone();

    for rule in taxonomy.rider_rules() {
        let Some(fallback_vehicle) = taxonomy
            .rider_rules()
            .iter()
            .find(|companion| companion.rider == rule.fallback_rider)
            .map(|companion| companion.required_nearby)
        else {
            continue;
        };
        for (_, members) in instances
            .iter()
            .filter(|(_, members)| input_sem[members[0]] == rule.rider)
        {
            let center = centroid(points, members);
            let within = |class: u32| {
                input_sem
                    .iter()
                    .zip(points)
                    .any(|(&s, p)| s == class && p.dist(&center) <= rule.search_radius)
            };
            if !within(rule.required_nearby) && within(fallback_vehicle) {
                for &p in members {
                    sem[p] = rule.fallback_rider;
                }
            }
        }
    }
    PanopticLabel::new(sem, label.inst().to_vec(), taxonomy)
}

/// The full pipeline in its fixed order: splitter, then merger, then
/// cyclists (the merger also repairs splitter output).
pub fn post_all(
    label: &PanopticLabel,
    points: &[Point3],
    taxonomy: &ClassTaxonomy,
) -> Result<PanopticLabel> {
    let split = post_splitter(label, points, taxonomy)?;
    let merged = post_merger(&split, points, taxonomy)?;
    post_cyclists(&merged, points, taxonomy)
}
