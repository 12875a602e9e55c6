//! Seeded generator of LiDAR-like synthetic scenes with ground truth, plus
//! label corruptors (fragmentation, merging) used to exercise the
//! post-processing heuristics and metrics.

use std::collections::BTreeMap;

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ClassTaxonomy, PanopticLabel, Point3, RiderRule, Scene};

/// Per-class shape of generated objects.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class_id: u32,
    /// Relative pick frequency within the class mix.
    pub weight: f64,
    /// Hard bound on point offsets from the object centroid (meters); the
    /// interior is Gaussian with sigma = radius/3.
    pub radius: f64,
    /// Points per object, inclusive range.
    pub points: (usize, usize),
    /// Object center height band (meters).
    pub z: (f64, f64),
    /// Minimum centroid separation against every other object (meters).
    pub min_separation: f64,
}

/// Stuff background: a ground disk plus loose elevated blobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StuffLayout {
    pub ground_class: u32,
    pub ground_z_sigma: f64,
    pub blob_class: u32,
    pub blob_count: (usize, usize),
    pub blob_radius: f64,
    pub blob_z: (f64, f64),
    pub blob_points: (usize, usize),
}

/// Everything `generate` needs besides the scene index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    /// Total point budget, inclusive range; stuff fills whatever the objects
    /// leave over.
    pub num_points: (usize, usize),
    pub object_count: (usize, usize),
    pub class_mix: Vec<ObjectSpec>,
    pub stuff: StuffLayout,
    /// Scene radius in meters.
    #[serde(default = "default_scene_radius")]
    pub scene_radius: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub occlusion_fraction: f64,
}

fn default_scene_radius() -> f64 {
    50.0
}

const PLACEMENT_ATTEMPTS: usize = 1000;

impl SynthConfig {
    pub fn validate(&self, taxonomy: &ClassTaxonomy) -> Result<()> {
        if !(self.scene_radius > 0.0) {
            return Err(Error::InvalidConfig("scene radius must be positive".into()));
        }
        if self.num_points.0 > self.num_points.1 || self.object_count.0 > self.object_count.1 {
            return Err(Error::InvalidConfig("ranges must be low..=high".into()));
        }
        if self.object_count.1 > 0 && self.class_mix.is_empty() {
            return Err(Error::InvalidConfig(
                "objects requested but the class mix is empty".into(),
            ));
        }
        for spec in &self.class_mix {
            if !taxonomy.is_thing(spec.class_id) {
                return Err(Error::InvalidConfig(format!(
                    "class {} in the object mix is not a thing class",
                    spec.class_id
                )));
            }
            if !(spec.weight > 0.0 && spec.radius > 0.0 && spec.min_separation >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "object spec for class {} has non-positive weight/radius",
                    spec.class_id
                )));
            }
            if spec.points.0 == 0 || spec.points.0 > spec.points.1 {
                return Err(Error::InvalidConfig(format!(
                    "object spec for class {}: bad point range",
                    spec.class_id
                )));
            }
        }
        for class in [self.stuff.ground_class, self.stuff.blob_class] {
            if !taxonomy.is_stuff(class) {
                return Err(Error::InvalidConfig(format!(
                    "stuff layout class {class} is not a stuff class"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.occlusion_fraction) {
            return Err(Error::InvalidConfig(
                "occlusion fraction must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(bytes)
}

fn sample_range(rng: &mut ChaCha8Rng, range: (usize, usize)) -> usize {
    rng.gen_range(range.0..=range.1)
}

fn disk_position(rng: &mut ChaCha8Rng, radius: f64) -> (f64, f64) {
    let r = radius * rng.gen_range(0.0..1.0f64).sqrt();
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    (r * theta.cos(), r * theta.sin())
}

/// Gaussian offset (sigma = radius/3) rejected to the ball of `radius`;
/// z compressed to half the lateral spread.
fn blob_offset(rng: &mut ChaCha8Rng, radius: f64) -> (f64, f64, f64) {
    let sigma = radius / 3.0;
    loop {
        let dx = gauss(rng) * sigma;
        let dy = gauss(rng) * sigma;
        let dz = gauss(rng) * sigma * 0.5;
        if (dx * dx + dy * dy + dz * dz).sqrt() <= radius {
            return (dx, dy, dz);
        }
    }
}

/// Box–Muller normal deviate.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    let v: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u.ln()).sqrt() * v.cos()
}

/// Per-axis measurement noise, clamped at 3 sigma so generated points stay
/// within a provable distance of their centroid.
fn clamped_noise(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    (gauss(rng) * sigma).clamp(-3.0 * sigma, 3.0 * sigma)
}

/// Deterministic scene as a function of (config.seed, index).
pub fn generate(config: &SynthConfig, taxonomy: &ClassTaxonomy, index: u64) -> Result<Scene> {
    config.validate(taxonomy)?;
    let mut rng = scene_rng(config.seed, index);

    let total_points = sample_range(&mut rng, config.num_points);
    let object_count = sample_range(&mut rng, config.object_count);

    let weight_sum: f64 = config.class_mix.iter().map(|s| s.weight).sum();
    let mut centers: Vec<(f64, f64, &ObjectSpec)> = Vec::with_capacity(object_count);
    for _ in 0..object_count {
        let mut pick = rng.gen_range(0.0..weight_sum);
        let spec = config
            .class_mix
            .iter()
            .find(|s| {
                pick -= s.weight;
                pick < 0.0
            })
            .unwrap_or_else(|| config.class_mix.last().expect("mix is non-empty"));

        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let (x, y) = disk_position(&mut rng, config.scene_radius);
            let clear = centers.iter().all(|&(ox, oy, other)| {
                let required = spec.min_separation.max(other.min_separation);
                ((x - ox).powi(2) + (y - oy).powi(2)).sqrt() >= required
            });
            if clear {
                centers.push((x, y, spec));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::PlacementInfeasible {
                attempts: PLACEMENT_ATTEMPTS,
                index,
            });
        }
    }

    let mut points = Vec::with_capacity(total_points);
    let mut sem = Vec::with_capacity(total_points);
    let mut inst = Vec::with_capacity(total_points);

    for (object, &(cx, cy, spec)) in centers.iter().enumerate() {
        let count = sample_range(&mut rng, spec.points);
        let cz = rng.gen_range(spec.z.0..=spec.z.1);
        let mut object_points = Vec::with_capacity(count);
        for _ in 0..count {
            let (dx, dy, dz) = blob_offset(&mut rng, spec.radius);
            object_points.push(Point3::new(
                cx + dx + clamped_noise(&mut rng, config.noise_sigma),
                cy + dy + clamped_noise(&mut rng, config.noise_sigma),
                cz + dz + clamped_noise(&mut rng, config.noise_sigma),
            )?);
        }
        if config.occlusion_fraction > 0.0 {
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let (dir_x, dir_y) = (theta.cos(), theta.sin());
            let drop = ((count as f64 * config.occlusion_fraction) as usize).min(count - 1);
            object_points.sort_by(|a, b| {
                let da = (a.x - cx) * dir_x + (a.y - cy) * dir_y;
                let db = (b.x - cx) * dir_x + (b.y - cy) * dir_y;
                db.total_cmp(&da)
            });
            object_points.truncate(count - drop);
        }
        for p in object_points {
            points.push(p);
            sem.push(spec.class_id);
            inst.push(object as u32 + 1);
        }
    }

    // Stuff fills the remaining budget: elevated blobs first, ground last.
    let mut remaining = total_points.saturating_sub(points.len());
    let blob_count = sample_range(&mut rng, config.stuff.blob_count);
    for _ in 0..blob_count {
        if remaining == 0 {
            break;
        }
        let count = sample_range(&mut rng, config.stuff.blob_points).min(remaining);
        let (cx, cy) = disk_position(&mut rng, config.scene_radius);
        let cz = rng.gen_range(config.stuff.blob_z.0..=config.stuff.blob_z.1);
        for _ in 0..count {
            let (dx, dy, dz) = blob_offset(&mut rng, config.stuff.blob_radius);
            points.push(Point3::new(cx + dx, cy + dy, cz + dz)?);
            sem.push(config.stuff.blob_class);
            inst.push(0);
        }
        remaining -= count;
    }
    for _ in 0..remaining {
        let (x, y) = disk_position(&mut rng, config.scene_radius);
        let z = gauss(&mut rng) * config.stuff.ground_z_sigma;
        points.push(Point3::new(x, y, z)?);
        sem.push(config.stuff.ground_class);
        inst.push(0);
    }

    // Shuffle point order; instance ids stay attached to their points.
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(&mut rng);
    let points = order.iter().map(|&p| points[p]).collect();
    let sem = order.iter().map(|&p| sem[p]).collect();
    let inst = order.iter().map(|&p| inst[p]).collect();

    Scene::new(points, sem, inst, taxonomy)
}

/// Ground truth with every instance cut into `parts` pieces along its widest
/// axes (median splits), emulating severe over-clustering. The first piece
/// keeps the original id, so `parts = 1` returns the ground truth unchanged.
pub fn make_fragmented(
    scene: &Scene,
    parts: usize,
    taxonomy: &ClassTaxonomy,
) -> Result<PanopticLabel> {
    if parts == 0 {
        return Err(Error::InvalidConfig("parts must be at least 1".into()));
    }
    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (p, &id) in scene.inst_gt().iter().enumerate() {
        if id > 0 {
            members.entry(id).or_default().push(p);
        }
    }
    let mut inst = scene.inst_gt().to_vec();
    let mut next_id = members.keys().max().map_or(1, |&m| m + 1);

    for (&id, points) in &members {
        let target = parts.min(points.len());
        let mut chunks: Vec<Vec<usize>> = vec![points.clone()];
        while chunks.len() < target {
            // Split the chunk with the widest extent along its widest axis.
            let (pos, axis) = chunks
                .iter()
                .enumerate()
                .filter(|(_, c)| c.len() > 1)
                .map(|(k, chunk)| {
                    let (axis, extent) = widest_axis(scene.points(), chunk);
                    (k, axis, extent)
                })
                .max_by(|a, b| a.2.total_cmp(&b.2))
                .map(|(k, axis, _)| (k, axis))
                .expect("some chunk must remain splittable");
            let mut chunk = chunks.swap_remove(pos);
            chunk.sort_by(|&a, &b| {
                coord(&scene.points()[a], axis)
                    .total_cmp(&coord(&scene.points()[b], axis))
                    .then(a.cmp(&b))
            });
            let half = chunk.len() / 2;
            let right = chunk.split_off(half);
            chunks.push(chunk);
            chunks.push(right);
        }
        chunks.sort_by_key(|c| c.iter().min().cloned());
        for (k, chunk) in chunks.iter().enumerate() {
            let new_id = if k == 0 {
                id
            } else {
                let fresh = next_id;
                next_id += 1;
                fresh
            };
            for &p in chunk {
                inst[p] = new_id;
            }
        }
    }
    PanopticLabel::new(scene.sem_gt().to_vec(), inst, taxonomy)
}

/// Ground truth with same-class instances merged `group_size` at a time
/// (ascending id order, each group keeps its lowest id), emulating
/// under-clustering.
pub fn make_merged(
    scene: &Scene,
    group_size: usize,
    taxonomy: &ClassTaxonomy,
) -> Result<PanopticLabel> {
    if group_size == 0 {
        return Err(Error::InvalidConfig("group size must be at least 1".into()));
    }
    let mut ids_by_class: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (&inst, &sem) in scene.inst_gt().iter().zip(scene.sem_gt()) {
        if inst > 0 {
            let ids = ids_by_class.entry(sem).or_default();
            if !ids.contains(&inst) {
                ids.push(inst);
            }
        }
    }
    let mut remap: BTreeMap<u32, u32> = BTreeMap::new();
    for ids in ids_by_class.values_mut() {
        ids.sort_unstable();
        for group in ids.chunks(group_size) {
            for &id in group {
                remap.insert(id, group[0]);
            }
        }
    }
    let inst = scene
        .inst_gt()
        .iter()
        .map(|&i| if i > 0 { remap[&i] } else { 0 })
        .collect();
    PanopticLabel::new(scene.sem_gt().to_vec(), inst, taxonomy)
}

fn coord(p: &Point3, axis: usize) -> f64 {
    match axis {
        0 => p.x,
        1 => p.y,
        _ => p.z,
    }
}

fn widest_axis(points: &[Point3], members: &[usize]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for axis in 0..3 {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for &p in members {
            let c = coord(&points[p], axis);
            min = min.min(c);
            max = max.max(c);
        }
        if max - min > best.1 {
            best = (axis, max - min);
        }
    }
    best
}

/// The micro taxonomy the synthetic experiments run on: road and vegetation
/// as stuff, six thing classes including both rider pairings so every
/// post-processing heuristic is exercisable.
pub fn micro_taxonomy() -> ClassTaxonomy {
    let things = [CAR, PERSON, BICYCLE, BICYCLIST, MOTORCYCLE, MOTORCYCLIST];
    ClassTaxonomy::new(
        9,
        [ROAD, VEGETATION],
        things,
        IGNORE,
        vec![
            "ignore".into(),
            "road".into(),
            "vegetation".into(),
            "car".into(),
            "person".into(),
            "bicycle".into(),
            "bicyclist".into(),
            "motorcycle".into(),
            "motorcyclist".into(),
        ],
        [
            (CAR, 6.0),
            (PERSON, 1.5),
            (BICYCLE, 2.5),
            (BICYCLIST, 2.5),
            (MOTORCYCLE, 3.0),
            (MOTORCYCLIST, 3.0),
        ]
        .into(),
        [
            (CAR, 2.0),
            (PERSON, 0.6),
            (BICYCLE, 1.0),
            (BICYCLIST, 1.0),
            (MOTORCYCLE, 1.2),
            (MOTORCYCLIST, 1.2),
        ]
        .into(),
        vec![
            RiderRule {
                rider: BICYCLIST,
                required_nearby: BICYCLE,
                fallback_rider: MOTORCYCLIST,
                search_radius: 2.0,
            },
            RiderRule {
                rider: MOTORCYCLIST,
                required_nearby: MOTORCYCLE,
                fallback_rider: BICYCLIST,
                search_radius: 2.0,
            },
        ],
    )
    .expect("micro taxonomy is well-formed")
}

pub const IGNORE: u32 = 0;
pub const ROAD: u32 = 1;
pub const VEGETATION: u32 = 2;
pub const CAR: u32 = 3;
pub const PERSON: u32 = 4;
pub const BICYCLE: u32 = 5;
pub const BICYCLIST: u32 = 6;
pub const MOTORCYCLE: u32 = 7;
pub const MOTORCYCLIST: u32 = 8;

/// A small two-thing-class setup tuned for the clustering demonstration:
/// compact objects, generous separation, flat ground.
pub fn toy_synth_config(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        num_points: (260, 330),
        object_count: (2, 5),
        class_mix: vec![
            ObjectSpec {
                class_id: CAR,
                weight: 1.0,
                radius: 0.9,
                points: (10, 14),
                z: (0.5, 0.7),
                min_separation: 8.0,
            },
            ObjectSpec {
                class_id: PERSON,
                weight: 1.0,
                radius: 0.45,
                points: (8, 11),
                z: (1.3, 1.6),
                min_separation: 8.0,
            },
        ],
        stuff: StuffLayout {
            ground_class: ROAD,
            ground_z_sigma: 0.02,
            blob_class: VEGETATION,
            blob_count: (1, 3),
            blob_radius: 1.8,
            blob_z: (2.4, 3.0),
            blob_points: (12, 20),
        },
        scene_radius: 14.0,
        noise_sigma: 0.01,
        occlusion_fraction: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{fragmentation_loss, impurity_loss};
    use crate::softmat::SoftMatrix;
    use proptest::prelude::*;

    #[test]
    fn same_seed_and_index_is_identical() {
        let tax = micro_taxonomy();
        let cfg = toy_synth_config(42);
        let a = generate(&cfg, &tax, 7).unwrap();
        let b = generate(&cfg, &tax, 7).unwrap();
        assert_eq!(a, b);
        let c = generate(&cfg, &tax, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_objects_is_all_stuff() {
        let tax = micro_taxonomy();
        let mut cfg = toy_synth_config(1);
        cfg.object_count = (0, 0);
        let scene = generate(&cfg, &tax, 0).unwrap();
        assert!(scene.inst_gt().iter().all(|&i| i == 0));
        assert!(scene.len() >= cfg.num_points.0);
    }

    #[test]
    fn object_count_matches_distinct_ids() {
        let tax = micro_taxonomy();
        let mut cfg = toy_synth_config(2);
        cfg.object_count = (5, 5);
        let scene = generate(&cfg, &tax, 3).unwrap();
        assert_eq!(scene.instance_ids(), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn infeasible_placement_errors() {
        let tax = micro_taxonomy();
        let mut cfg = toy_synth_config(3);
        cfg.object_count = (30, 30);
        cfg.scene_radius = 5.0; // 30 objects with 8 m separation cannot fit
        let err = generate(&cfg, &tax, 0);
        assert!(matches!(err, Err(Error::PlacementInfeasible { .. })));
    }

    #[test]
    fn occlusion_drops_points_but_never_empties_objects() {
        let tax = micro_taxonomy();
        let mut cfg = toy_synth_config(4);
        cfg.occlusion_fraction = 0.5;
        cfg.object_count = (3, 3);
        let scene = generate(&cfg, &tax, 1).unwrap();
        assert_eq!(scene.instance_ids().len(), 3);
    }

    #[test]
    fn fragmented_identity_when_parts_is_one() {
        let tax = micro_taxonomy();
        let cfg = toy_synth_config(5);
        let scene = generate(&cfg, &tax, 2).unwrap();
        let label = make_fragmented(&scene, 1, &tax).unwrap();
        assert_eq!(label.sem(), scene.sem_gt());
        assert_eq!(label.inst(), scene.inst_gt());
    }

    #[test]
    fn fragmented_four_parts_yields_four_ids_per_object() {
        let tax = micro_taxonomy();
        let mut cfg = toy_synth_config(6);
        cfg.object_count = (1, 1);
        let scene = generate(&cfg, &tax, 4).unwrap();
        let label = make_fragmented(&scene, 4, &tax).unwrap();
        let distinct: std::collections::BTreeSet<u32> =
            label.inst().iter().cloned().filter(|&i| i > 0).collect();
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn fragmented_hard_assignment_has_positive_fragmentation() {
        let tax = micro_taxonomy();
        let mut cfg = toy_synth_config(7);
        cfg.object_count = (2, 2);
        let scene = generate(&cfg, &tax, 5).unwrap();
        let label = make_fragmented(&scene, 4, &tax).unwrap();
        // Interpret fragment ids as hard cluster labels (0-based).
        let n = label.inst().iter().max().unwrap() + 1;
        let clusters: Vec<usize> = label.inst().iter().map(|&i| i as usize).collect();
        let matrix = SoftMatrix::from_hard_labels(&scene, &clusters, n as usize).unwrap();
        assert!(fragmentation_loss(&matrix).value > 0.0);
        assert_eq!(impurity_loss(&matrix).value, 0.0);
    }

    #[test]
    fn merged_groups_take_lowest_id() {
        let tax = micro_taxonomy();
        let mut cfg = toy_synth_config(8);
        cfg.object_count = (4, 4);
        cfg.class_mix.truncate(1); // cars only, so all four merge pairwise
        let scene = generate(&cfg, &tax, 6).unwrap();
        let label = make_merged(&scene, 2, &tax).unwrap();
        let distinct: std::collections::BTreeSet<u32> =
            label.inst().iter().cloned().filter(|&i| i > 0).collect();
        assert_eq!(distinct, [1u32, 3].into());
    }

    proptest! {
        /// Generated scenes satisfy the ground-truth invariants and the
        /// points stay within radius + clamped noise of their centroid.
        #[test]
        fn generated_scenes_are_valid(seed in 0u64..250, index in 0u64..4) {
            let tax = micro_taxonomy();
            let mut cfg = toy_synth_config(seed);
            cfg.num_points = (60, 90);
            cfg.object_count = (0, 3);
            let scene = generate(&cfg, &tax, index).unwrap();
            // Scene::new already enforced the invariants; check the blob bound.
            let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
            for (p, &id) in scene.inst_gt().iter().enumerate() {
                if id > 0 {
                    by_id.entry(id).or_default().push(p);
                }
            }
            for (_, members) in by_id {
                let class = scene.sem_gt()[members[0]];
                let radius = cfg
                    .class_mix
                    .iter()
                    .find(|s| s.class_id == class)
                    .unwrap()
                    .radius;
                let inv = members.len() as f64;
                let cx = members.iter().map(|&p| scene.points()[p].x).sum::<f64>() / inv;
                let cy = members.iter().map(|&p| scene.points()[p].y).sum::<f64>() / inv;
                let cz = members.iter().map(|&p| scene.points()[p].z).sum::<f64>() / inv;
                let center = Point3::new(cx, cy, cz).unwrap();
                // Offsets are bounded by the radius, noise by 3 sigma per
                // axis; the centroid itself can only sit inside the same hull.
                let bound = 2.0 * (radius + 3.0 * cfg.noise_sigma * 3f64.sqrt());
                for &p in &members {
                    prop_assert!(scene.points()[p].dist(&center) <= bound);
                }
            }
        }
    }
}
