//! Panoptic and semantic evaluation: PQ, SQ, RQ (overall and per class,
//! split by stuff/thing), PQ†, and mIoU.
//!
//! Segments of the same class match when their IoU is strictly above 0.5,
//! which makes the matching unique. Stuff classes form one segment per scene
//! and side; PQ† swaps the stuff PQ for the plain class IoU. Ignore-class
//! ground-truth points are stripped from both sides before any counting, and
//! classes absent from both sides are excluded from every class mean.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::{ClassTaxonomy, PanopticLabel, Scene};

/// Accumulated per-class confusion statistics. Scene contributions combine
/// associatively, so scenes can be scored in parallel and merged in a fixed
/// order for deterministic results.
#[derive(Debug, Clone, Default)]
pub struct EvalStats {
    per_class: BTreeMap<u32, ClassStats>,
}

#[derive(Debug, Clone, Copy, Default)]
struct ClassStats {
    tp: u64,
    fp: u64,
    fn_: u64,
    iou_sum: f64,
    sem_intersection: u64,
    sem_gt: u64,
    sem_pred: u64,
}

impl EvalStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Score one scene against its ground truth.
    pub fn add_scene(
        &mut self,
        pred: &PanopticLabel,
        gt: &Scene,
        taxonomy: &ClassTaxonomy,
    ) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::LengthMismatch {
                context: "prediction vs ground truth",
                left: pred.len(),
                right: gt.len(),
            });
        }
        let ignore = taxonomy.ignore_id();
        let kept: Vec<usize> = (0..gt.len())
            .filter(|&p| gt.sem_gt()[p] != ignore)
            .collect();

        // Semantic point counts for IoU / mIoU.
        for &p in &kept {
            let g = gt.sem_gt()[p];
            let d = pred.sem()[p];
            self.class_mut(g).sem_gt += 1;
            if d != ignore {
                self.class_mut(d).sem_pred += 1;
            }
            if d == g {
                self.class_mut(g).sem_intersection += 1;
            }
        }

        // Thing segments on both sides, sizes over kept points.
        let mut gt_segments: BTreeMap<u32, (u32, u64)> = BTreeMap::new();
        let mut pred_segments: BTreeMap<u32, (u32, u64)> = BTreeMap::new();
        let mut overlap: HashMap<(u32, u32), u64> = HashMap::new();
        for &p in &kept {
            let (gs, gi) = (gt.sem_gt()[p], gt.inst_gt()[p]);
            let (ds, di) = (pred.sem()[p], pred.inst()[p]);
            if gi > 0 {
                let entry = gt_segments.entry(gi).or_insert((gs, 0));
                entry.1 += 1;
            }
            if di > 0 && ds != ignore {
                let entry = pred_segments.entry(di).or_insert((ds, 0));
                entry.1 += 1;
            }
            if gi > 0 && di > 0 && ds != ignore {
                *overlap.entry((gi, di)).or_insert(0) += 1;
            }
        }

        let mut gt_matched: BTreeMap<u32, bool> =
            gt_segments.keys().map(|&id| (id, false)).collect();
        let mut pred_matched: BTreeMap<u32, bool> =
            pred_segments.keys().map(|&id| (id, false)).collect();

        let mut pairs: Vec<(&(u32, u32), &u64)> = overlap.iter().collect();
        pairs.sort_unstable_by_key(|(&ids, _)| ids);
        for (&(gi, di), &inter) in pairs {
            let (g_class, g_size) = gt_segments[&gi];
            let (d_class, d_size) = pred_segments[&di];
            if g_class != d_class {
                continue;
            }
            let union = g_size + d_size - inter;
            let iou = inter as f64 / union as f64;
            if iou > 0.5 {
                if gt_matched[&gi] || pred_matched[&di] {
                    return Err(Error::invalid(
                        "panoptic matching is not unique; IoU > 0.5 guarantees it",
                    ));
                }
                gt_matched.insert(gi, true);
                pred_matched.insert(di, true);
                let stats = self.class_mut(g_class);
                stats.tp += 1;
                stats.iou_sum += iou;
            }
        }
        for (id, matched) in gt_matched {
            if !matched {
                self.class_mut(gt_segments[&id].0).fn_ += 1;
            }
        }
        for (id, matched) in pred_matched {
            if !matched {
                self.class_mut(pred_segments[&id].0).fp += 1;
            }
        }

        // Stuff classes: one segment per side when non-empty, same formulas.
        let mut stuff_counts: BTreeMap<u32, (u64, u64, u64)> = BTreeMap::new();
        for &p in &kept {
            let g = gt.sem_gt()[p];
            let d = pred.sem()[p];
            if taxonomy.is_stuff(g) {
                stuff_counts.entry(g).or_default().0 += 1;
            }
            if d != ignore && taxonomy.is_stuff(d) {
                stuff_counts.entry(d).or_default().1 += 1;
            }
            if g == d && taxonomy.is_stuff(g) {
                stuff_counts.entry(g).or_default().2 += 1;
            }
        }
        for (class, (gt_size, pred_size, inter)) in stuff_counts {
            let stats = self.class_mut(class);
            match (gt_size > 0, pred_size > 0) {
                (true, true) => {
                    let iou = inter as f64 / (gt_size + pred_size - inter) as f64;
                    if iou > 0.5 {
                        stats.tp += 1;
                        stats.iou_sum += iou;
                    } else {
                        stats.fn_ += 1;
                        stats.fp += 1;
                    }
                }
                (true, false) => stats.fn_ += 1,
                (false, true) => stats.fp += 1,
                (false, false) => {}
            }
        }
        Ok(())
    }

    fn class_mut(&mut self, class: u32) -> &mut ClassStats {
        self.per_class.entry(class).or_default()
    }

    /// Fold another accumulator in; order-independent.
    pub fn merge(&mut self, other: &EvalStats) {
        for (&class, stats) in &other.per_class {
            let mine = self.class_mut(class);
            mine.tp += stats.tp;
            mine.fp += stats.fp;
            mine.fn_ += stats.fn_;
            mine.iou_sum += stats.iou_sum;
            mine.sem_intersection += stats.sem_intersection;
            mine.sem_gt += stats.sem_gt;
            mine.sem_pred += stats.sem_pred;
        }
    }

    /// Finalize into a report.
    pub fn report(&self, taxonomy: &ClassTaxonomy) -> PanopticReport {
        let mut per_class = Vec::new();
        for class in 0..taxonomy.num_classes() {
            if class == taxonomy.ignore_id() {
                continue;
            }
            let stats = self.per_class.get(&class).cloned().unwrap_or_default();
            let present =
                stats.sem_gt + stats.sem_pred + stats.tp + stats.fp + stats.fn_ > 0;
            let sq = if stats.tp > 0 {
                stats.iou_sum / stats.tp as f64
            } else {
                0.0
            };
            let rq_den = stats.tp as f64 + 0.5 * stats.fp as f64 + 0.5 * stats.fn_ as f64;
            let rq = if rq_den > 0.0 {
                stats.tp as f64 / rq_den
            } else {
                0.0
            };
            let union = stats.sem_gt + stats.sem_pred - stats.sem_intersection;
            let iou = if union > 0 {
                stats.sem_intersection as f64 / union as f64
            } else {
                0.0
            };
            per_class.push(ClassReport {
                class_id: class,
                name: taxonomy.class_name(class).to_string(),
                is_thing: taxonomy.is_thing(class),
                present,
                pq: sq * rq,
                sq,
                rq,
                iou,
                tp: stats.tp,
                fp: stats.fp,
                fn_count: stats.fn_,
            });
        }

        let mean = |values: Vec<f64>| -> f64 {
            if values.is_empty() {
                0.0
            } else {
                values.iter().sum::<f64>() / values.len() as f64
            }
        };
        let present: Vec<&ClassReport> = per_class.iter().filter(|c| c.present).collect();
        let things: Vec<&&ClassReport> = present.iter().filter(|c| c.is_thing).collect();
        let stuff: Vec<&&ClassReport> = present.iter().filter(|c| !c.is_thing).collect();

        PanopticReport {
            pq: mean(present.iter().map(|c| c.pq).collect()),
            sq: mean(present.iter().map(|c| c.sq).collect()),
            rq: mean(present.iter().map(|c| c.rq).collect()),
            pq_dagger: mean(
                present
                    .iter()
                    .map(|c| if c.is_thing { c.pq } else { c.iou })
                    .collect(),
            ),
            pq_things: mean(things.iter().map(|c| c.pq).collect()),
            sq_things: mean(things.iter().map(|c| c.sq).collect()),
            rq_things: mean(things.iter().map(|c| c.rq).collect()),
            pq_stuff: mean(stuff.iter().map(|c| c.pq).collect()),
            sq_stuff: mean(stuff.iter().map(|c| c.sq).collect()),
            rq_stuff: mean(stuff.iter().map(|c| c.rq).collect()),
            miou: mean(present.iter().map(|c| c.iou).collect()),
            per_class,
        }
    }
}

/// Per-class slice of the report.
#[derive(Debug, Clone, Serialize)]
pub struct ClassReport {
    pub class_id: u32,
    pub name: String,
    pub is_thing: bool,
    pub present: bool,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub iou: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_count: u64,
}

/// Full evaluation outcome. Aggregates are unweighted means over the classes
/// present in ground truth or predictions.
#[derive(Debug, Clone, Serialize)]
pub struct PanopticReport {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq_dagger: f64,
    pub pq_things: f64,
    pub sq_things: f64,
    pub rq_things: f64,
    pub pq_stuff: f64,
    pub sq_stuff: f64,
    pub rq_stuff: f64,
    pub miou: f64,
    pub per_class: Vec<ClassReport>,
}

impl std::fmt::Display for PanopticReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<14} {:>7} {:>7} {:>7} {:>7} {:>5} {:>5} {:>5}",
            "class", "PQ", "SQ", "RQ", "IoU", "TP", "FP", "FN")?;
        for c in self.per_class.iter().filter(|c| c.present) {
            writeln!(
                f,
                "{:<14} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>5} {:>5} {:>5}",
                c.name, c.pq, c.sq, c.rq, c.iou, c.tp, c.fp, c.fn_count
            )?;
        }
        writeln!(f, "PQ        {:.3}", self.pq)?;
        writeln!(f, "PQ_dagger {:.3}", self.pq_dagger)?;
        writeln!(f, "SQ        {:.3}", self.sq)?;
        writeln!(f, "RQ        {:.3}", self.rq)?;
        writeln!(f, "PQ_th     {:.3}  SQ_th {:.3}  RQ_th {:.3}",
            self.pq_things, self.sq_things, self.rq_things)?;
        writeln!(f, "PQ_st     {:.3}  SQ_st {:.3}  RQ_st {:.3}",
            self.pq_stuff, self.sq_stuff, self.rq_stuff)?;
        write!(f, "mIoU      {:.3}", self.miou)
    }
}

/// Evaluate a single scene.
pub fn evaluate(
    pred: &PanopticLabel,
    gt: &Scene,
    taxonomy: &ClassTaxonomy,
) -> Result<PanopticReport> {
    let mut stats = EvalStats::new();
    stats.add_scene(pred, gt, taxonomy)?;
    Ok(stats.report(taxonomy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::tests_support::micro_tax_two_things;
    use crate::types::Point3;
    use approx::assert_abs_diff_eq;

    fn scene(sem: Vec<u32>, inst: Vec<u32>) -> Scene {
        let tax = micro_tax_two_things();
        let points = (0..sem.len())
            .map(|i| Point3::new(i as f64, 0.0, 0.0).unwrap())
            .collect();
        Scene::new(points, sem, inst, &tax).unwrap()
    }

    fn label(sem: Vec<u32>, inst: Vec<u32>) -> PanopticLabel {
        PanopticLabel::new(sem, inst, &micro_tax_two_things()).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let tax = micro_tax_two_things();
        let gt = scene(vec![2, 2, 3, 1, 1], vec![1, 1, 2, 0, 0]);
        let pred = label(vec![2, 2, 3, 1, 1], vec![5, 5, 9, 0, 0]);
        let report = evaluate(&pred, &gt, &tax).unwrap();
        assert_abs_diff_eq!(report.pq, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.sq, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.rq, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.miou, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.pq_dagger, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn worked_example_pq_04() {
        // One thing class: 1 TP at IoU 0.8, 1 FP, 1 FN.
        // GT instance 1 = points 0..10; gt instance 2 = points 10..14 (missed).
        // Pred instance 1 = points 0..8: inter 8, union 10 → IoU 0.8 (TP).
        // Pred instance 2 = points 8..10: inter 2, union 10 → no match (FP).
        let sem = vec![2u32; 14];
        let mut gt_inst = vec![0u32; 14];
        let mut pred_inst = vec![0u32; 14];
        for p in 0..10 {
            gt_inst[p] = 1;
        }
        for p in 10..14 {
            gt_inst[p] = 2;
        }
        for p in 0..8 {
            pred_inst[p] = 1;
        }
        pred_inst[8] = 2;
        pred_inst[9] = 2;
        let tax = micro_tax_two_things();
        let gt = scene(sem.clone(), gt_inst);
        let pred = label(sem, pred_inst);
        let report = evaluate(&pred, &gt, &tax).unwrap();
        let car = report
            .per_class
            .iter()
            .find(|c| c.class_id == 2)
            .unwrap();
        assert_eq!((car.tp, car.fp, car.fn_count), (1, 1, 1));
        assert_abs_diff_eq!(car.sq, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(car.rq, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(car.pq, 0.4, epsilon = 1e-12);
    }

    #[test]
    fn iou_exactly_half_is_not_a_match() {
        // |gt| = |pred| = 4, inter = ... IoU exactly 0.5: inter 4, union 8.
        // gt instance covers points 0..6 minus... construct: gt 0..4,
        // pred 2..8 → inter 2, union 8... need exact 0.5: |gt|=4 pts 0-3,
        // |pred|=2 pts 2-3 → inter 2, union 4 → 0.5.
        let sem = vec![2u32; 6];
        let gt_inst = vec![1, 1, 1, 1, 0, 0];
        let pred_inst = vec![0, 0, 1, 1, 0, 0];
        let tax = micro_tax_two_things();
        // gt points 4,5 are thing-class with no instance: legal in ground truth.
        let gt = scene(sem.clone(), gt_inst);
        let pred = label(sem, pred_inst);
        let report = evaluate(&pred, &gt, &tax).unwrap();
        let car = report.per_class.iter().find(|c| c.class_id == 2).unwrap();
        assert_eq!((car.tp, car.fp, car.fn_count), (0, 1, 1));
        assert_eq!(car.pq, 0.0);
    }

    #[test]
    fn relabeling_predicted_ids_changes_nothing() {
        let tax = micro_tax_two_things();
        let gt = scene(vec![2, 2, 2, 3, 3, 1], vec![1, 1, 1, 2, 2, 0]);
        let a = label(vec![2, 2, 2, 3, 3, 1], vec![1, 1, 1, 2, 2, 0]);
        let b = label(vec![2, 2, 2, 3, 3, 1], vec![40, 40, 40, 7, 7, 0]);
        let ra = evaluate(&a, &gt, &tax).unwrap();
        let rb = evaluate(&b, &gt, &tax).unwrap();
        assert_eq!(format!("{ra}"), format!("{rb}"));
    }

    #[test]
    fn ignored_points_are_stripped() {
        let tax = micro_tax_two_things();
        // Two gt points are ignore-class; the prediction is wrong there,
        // which must not matter.
        let gt = scene(vec![2, 2, 0, 0], vec![1, 1, 0, 0]);
        let pred = label(vec![2, 2, 3, 3], vec![1, 1, 2, 2]);
        let report = evaluate(&pred, &gt, &tax).unwrap();
        assert_abs_diff_eq!(report.pq, 1.0, epsilon = 1e-12);
        // person (class 3) has no kept points on either side: absent.
        let person = report.per_class.iter().find(|c| c.class_id == 3).unwrap();
        assert!(!person.present);
    }

    #[test]
    fn noise_instance_of_absent_class_cannot_raise_aggregates() {
        let tax = micro_tax_two_things();
        let gt = scene(vec![2, 2, 2, 1], vec![1, 1, 1, 0]);
        let clean = label(vec![2, 2, 2, 1], vec![1, 1, 1, 0]);
        let noisy = label(vec![2, 2, 3, 1], vec![1, 1, 9, 0]);
        let r_clean = evaluate(&clean, &gt, &tax).unwrap();
        let r_noisy = evaluate(&noisy, &gt, &tax).unwrap();
        assert!(r_noisy.pq <= r_clean.pq);
        assert!(r_noisy.rq <= r_clean.rq);
        assert!(r_noisy.miou <= r_clean.miou);
        assert!(r_noisy.pq_dagger <= r_clean.pq_dagger);
    }

    #[test]
    fn stuff_iou_below_half_counts_fp_and_fn() {
        let tax = micro_tax_two_things();
        let gt = scene(vec![1, 1, 1, 1], vec![0, 0, 0, 0]);
        let pred = label(vec![1, 3, 3, 3], vec![0, 1, 1, 1]);
        let report = evaluate(&pred, &gt, &tax).unwrap();
        let road = report.per_class.iter().find(|c| c.class_id == 1).unwrap();
        assert_eq!((road.tp, road.fp, road.fn_count), (0, 1, 1));
        // PQ† uses the class IoU for stuff even when unmatched.
        assert_abs_diff_eq!(road.iou, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn pq_dagger_replaces_stuff_pq_with_iou() {
        let tax = micro_tax_two_things();
        // Road IoU 0.6 (matched, SQ 0.6 RQ 1): PQ 0.6; PQ† also 0.6 = IoU.
        // Make road iou 0.6: gt road 5 points, pred covers 3 of them and
        // nothing else: iou 3/5.
        let gt = scene(vec![1, 1, 1, 1, 1, 2, 2], vec![0, 0, 0, 0, 0, 1, 1]);
        let pred = label(vec![1, 1, 1, 2, 2, 2, 2], vec![0, 0, 0, 3, 3, 3, 3]);
        let report = evaluate(&pred, &gt, &tax).unwrap();
        let road = report.per_class.iter().find(|c| c.class_id == 1).unwrap();
        assert_abs_diff_eq!(road.iou, 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(road.pq, 0.6, epsilon = 1e-12);
        // car: gt segment 2 pts {5,6}; pred segment 4 pts {3,4,5,6};
        // inter 2, union 4 → iou 0.5, not a match.
        let car = report.per_class.iter().find(|c| c.class_id == 2).unwrap();
        assert_eq!(car.tp, 0);
        // PQ† mean: stuff road uses iou 0.6; car thing uses pq 0.
        assert_abs_diff_eq!(report.pq_dagger, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn multi_scene_accumulation_pools_counts() {
        let tax = micro_tax_two_things();
        let gt = scene(vec![2, 2, 1], vec![1, 1, 0]);
        let good = label(vec![2, 2, 1], vec![4, 4, 0]);
        let bad = label(vec![2, 2, 1], vec![1, 2, 0]); // split: both halves IoU 0.5 → no match
        let mut stats = EvalStats::new();
        stats.add_scene(&good, &gt, &tax).unwrap();
        stats.add_scene(&bad, &gt, &tax).unwrap();
        let report = stats.report(&tax);
        let car = report.per_class.iter().find(|c| c.class_id == 2).unwrap();
        assert_eq!((car.tp, car.fp, car.fn_count), (1, 2, 1));
        // Merging two accumulators matches scoring both scenes in one.
        let mut left = EvalStats::new();
        left.add_scene(&good, &gt, &tax).unwrap();
        let mut right = EvalStats::new();
        right.add_scene(&bad, &gt, &tax).unwrap();
        left.merge(&right);
        assert_eq!(format!("{}", left.report(&tax)), format!("{report}"));
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let tax = micro_tax_two_things();
        let gt = scene(vec![1, 1], vec![0, 0]);
        let pred = label(vec![1], vec![0]);
        assert!(evaluate(&pred, &gt, &tax).is_err());
    }
}
