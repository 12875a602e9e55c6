//! Semantic-branch objectives: weighted cross-entropy and the Lovász-softmax
//! relaxation of the Jaccard loss.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::types::Scene;

use super::{LossResult, LOG_CLAMP};

/// Per-point weights: `factor` for points inside thing instances smaller than
/// `threshold` points, 1 everywhere else.
pub fn small_instance_weights(scene: &Scene, factor: f64, threshold: usize) -> Vec<f64> {
    let mut sizes = std::collections::BTreeMap::new();
    for &inst in scene.inst_gt() {
        if inst > 0 {
            *sizes.entry(inst).or_insert(0usize) += 1;
        }
    }
    scene
        .inst_gt()
        .iter()
        .map(|&inst| {
            if inst > 0 && sizes[&inst] < threshold {
                factor
            } else {
                1.0
            }
        })
        .collect()
}

/// Inverse log-frequency class weights, `w_c = 1/ln(1.02 + f_c)` with `f_c`
/// the class's share of non-ignored points, rescaled to unit mean over the
/// non-ignore classes so the overall loss scale stays independent of the
/// class balance. The ignore class gets weight 0.
pub fn inverse_log_frequency_weights(class_counts: &[u64], ignore_id: u32) -> Vec<f64> {
    let total: u64 = class_counts
        .iter()
        .enumerate()
        .filter(|(c, _)| *c as u32 != ignore_id)
        .map(|(_, &n)| n)
        .sum();
    let mut weights: Vec<f64> = class_counts
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            if c as u32 == ignore_id || total == 0 {
                0.0
            } else {
                let freq = n as f64 / total as f64;
                1.0 / (1.02 + freq).ln()
            }
        })
        .collect();
    let active = weights.iter().filter(|&&w| w > 0.0).count();
    if active > 0 {
        let mean = weights.iter().sum::<f64>() / active as f64;
        for w in &mut weights {
            *w /= mean;
        }
    }
    weights
}

/// Mean over non-ignored points of `−w_class · w_point · log p(true class)`,
/// with the log clamped at `LOG_CLAMP`.
pub fn weighted_cross_entropy(
    sem_prob: &Mat,
    sem_gt: &[u32],
    class_weights: &[f64],
    per_point_weights: &[f64],
    ignore_id: u32,
) -> Result<LossResult> {
    if sem_prob.rows() != sem_gt.len() {
        return Err(Error::LengthMismatch {
            context: "sem_prob rows vs sem_gt",
            left: sem_prob.rows(),
            right: sem_gt.len(),
        });
    }
    if sem_prob.rows() != per_point_weights.len() {
        return Err(Error::LengthMismatch {
            context: "sem_prob rows vs per-point weights",
            left: sem_prob.rows(),
            right: per_point_weights.len(),
        });
    }
    if class_weights.len() != sem_prob.cols() {
        return Err(Error::LengthMismatch {
            context: "class weights vs classes",
            left: class_weights.len(),
            right: sem_prob.cols(),
        });
    }

    let kept: Vec<usize> = (0..sem_gt.len())
        .filter(|&p| sem_gt[p] != ignore_id)
        .collect();
    let mut grad = Mat::zeros(sem_prob.rows(), sem_prob.cols());
    if kept.is_empty() {
        return Ok(LossResult { value: 0.0, grad });
    }

    let inv_count = 1.0 / kept.len() as f64;
    let mut value = 0.0;
    for &p in &kept {
        let class = sem_gt[p] as usize;
        if class >= sem_prob.cols() {
            return Err(Error::invalid(format!(
                "point {p}: class {class} out of range"
            )));
        }
        let w = class_weights[class] * per_point_weights[p];
        let prob = sem_prob.get(p, class);
        value -= w * prob.max(LOG_CLAMP).ln() * inv_count;
        if prob > LOG_CLAMP {
            grad.add_at(p, class, -w / prob * inv_count);
        }
    }
    Ok(LossResult::checked(value, grad))
}

/// Gradient of the Jaccard loss extension along the sorted ground-truth
/// sequence: `g_1 = J_1`, `g_k = J_k − J_{k−1}` with
/// `J_k = 1 − |fg ∩ top-k| / |fg ∪ top-k|`.
fn lovasz_grad(sorted_fg: &[bool]) -> Vec<f64> {
    let gts = sorted_fg.iter().filter(|&&b| b).count() as f64;
    let mut coeffs = Vec::with_capacity(sorted_fg.len());
    let mut intersection = gts;
    let mut union = gts;
    let mut prev = 0.0;
    for &fg in sorted_fg {
        if fg {
            intersection -= 1.0;
        } else {
            union += 1.0;
        }
        let jaccard = 1.0 - intersection / union;
        coeffs.push(jaccard - prev);
        prev = jaccard;
    }
    coeffs
}

/// The per-class descending error orders the Lovász extension sorts by.
/// The extension is non-smooth exactly where these orders flip, so the
/// gradient checker treats them as the loss's branch signature.
pub(crate) fn lovasz_orders(sem_prob: &Mat, sem_gt: &[u32], ignore_id: u32) -> Vec<Vec<usize>> {
    let kept: Vec<usize> = (0..sem_gt.len())
        .filter(|&p| sem_gt[p] != ignore_id)
        .collect();
    let present: BTreeSet<u32> = kept.iter().map(|&p| sem_gt[p]).collect();
    present
        .iter()
        .map(|&class| {
            let c = class as usize;
            let errors: Vec<f64> = kept
                .iter()
                .map(|&p| {
                    let prob = sem_prob.get(p, c);
                    if sem_gt[p] == class {
                        1.0 - prob
                    } else {
                        prob
                    }
                })
                .collect();
            let mut order: Vec<usize> = (0..kept.len()).collect();
            order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
            order
        })
        .collect()
}

/// Lovász-softmax: mean over classes present in the (non-ignored) ground
/// truth of the Lovász extension of the Jaccard loss applied to that class's
/// error vector `e_p = |1{gt=c} − p(c)|`, errors sorted descending.
pub fn lovasz_softmax(sem_prob: &Mat, sem_gt: &[u32], ignore_id: u32) -> Result<LossResult> {
    if sem_prob.rows() != sem_gt.len() {
        return Err(Error::LengthMismatch {
            context: "sem_prob rows vs sem_gt",
            left: sem_prob.rows(),
            right: sem_gt.len(),
        });
    }
    let kept: Vec<usize> = (0..sem_gt.len())
        .filter(|&p| sem_gt[p] != ignore_id)
        .collect();
    let mut grad = Mat::zeros(sem_prob.rows(), sem_prob.cols());
    if kept.is_empty() {
        return Ok(LossResult { value: 0.0, grad });
    }

    let present: BTreeSet<u32> = kept.iter().map(|&p| sem_gt[p]).collect();
    let inv_present = 1.0 / present.len() as f64;

    let mut value = 0.0;
    for &class in &present {
        let c = class as usize;
        if c >= sem_prob.cols() {
            return Err(Error::invalid(format!("class {c} out of range")));
        }
        let fg: Vec<bool> = kept.iter().map(|&p| sem_gt[p] == class).collect();
        let errors: Vec<f64> = kept
            .iter()
            .zip(&fg)
            .map(|(&p, &is_fg)| {
                let prob = sem_prob.get(p, c);
                if is_fg {
                    1.0 - prob
                } else {
                    prob
                }
            })
            .collect();

        // Stable descending sort keeps tie handling deterministic.
        let mut order: Vec<usize> = (0..kept.len()).collect();
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));

        let sorted_fg: Vec<bool> = order.iter().map(|&k| fg[k]).collect();
        let coeffs = lovasz_grad(&sorted_fg);

        for (rank, &k) in order.iter().enumerate() {
            value += errors[k] * coeffs[rank] * inv_present;
            let sign = if fg[k] { -1.0 } else { 1.0 };
            grad.add_at(kept[k], c, sign * coeffs[rank] * inv_present);
        }
    }
    Ok(LossResult::checked(value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::tests_support::micro_tax_two_things;
    use crate::types::Point3;
    use approx::assert_abs_diff_eq;

    #[test]
    fn wce_perfect_prediction_is_zero() {
        let probs = Mat::from_rows(vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        let r = weighted_cross_entropy(&probs, &[1, 0], &[1.0, 1.0], &[1.0, 1.0], 9).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn wce_half_probability_is_ln2() {
        let probs = Mat::from_rows(vec![vec![0.5, 0.5]]);
        let r = weighted_cross_entropy(&probs, &[0], &[1.0, 1.0], &[1.0], 9).unwrap();
        assert_abs_diff_eq!(r.value, std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(r.grad.get(0, 0), -2.0, epsilon = 1e-12);
        assert_eq!(r.grad.get(0, 1), 0.0);
    }

    #[test]
    fn wce_ignores_ignore_points() {
        let probs = Mat::from_rows(vec![vec![0.5, 0.5], vec![0.9, 0.1]]);
        let r = weighted_cross_entropy(&probs, &[9, 0], &[1.0, 1.0], &[1.0, 1.0], 9).unwrap();
        assert_abs_diff_eq!(r.value, -(0.9f64.ln()), epsilon = 1e-12);
        assert_eq!(r.grad.get(0, 0), 0.0);
    }

    #[test]
    fn wce_all_ignored_is_zero() {
        let probs = Mat::from_rows(vec![vec![0.5, 0.5]]);
        let r = weighted_cross_entropy(&probs, &[9], &[1.0, 1.0], &[1.0], 9).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn small_instance_points_weighted_up() {
        let tax = micro_tax_two_things();
        // Instance 1: 2 points (small); instance 2: 3 points; threshold 3.
        let points = (0..6)
            .map(|i| Point3::new(i as f64, 0.0, 0.0).unwrap())
            .collect();
        let scene = Scene::new(
            points,
            vec![2, 2, 3, 3, 3, 1],
            vec![1, 1, 2, 2, 2, 0],
            &tax,
        )
        .unwrap();
        let w = small_instance_weights(&scene, 3.0, 3);
        assert_eq!(w, vec![3.0, 3.0, 1.0, 1.0, 1.0, 1.0]);

        // A weighted point's WCE term is exactly tripled.
        let probs = Mat::from_rows(vec![vec![0.0, 0.0, 0.6, 0.4]]);
        let small = weighted_cross_entropy(&probs, &[2], &[1.0; 4], &[3.0], 0).unwrap();
        let large = weighted_cross_entropy(&probs, &[2], &[1.0; 4], &[1.0], 0).unwrap();
        assert_abs_diff_eq!(small.value, 3.0 * large.value, epsilon = 1e-12);
    }

    #[test]
    fn inverse_log_frequency_downweights_common_classes() {
        let w = inverse_log_frequency_weights(&[0, 900, 100], 0);
        assert_eq!(w[0], 0.0);
        assert!(w[2] > w[1], "rarer class should weigh more");
        let raw = [1.0 / (1.02f64 + 0.9).ln(), 1.0 / (1.02f64 + 0.1).ln()];
        let mean = (raw[0] + raw[1]) / 2.0;
        assert_abs_diff_eq!(w[1], raw[0] / mean, epsilon = 1e-12);
        assert_abs_diff_eq!((w[1] + w[2]) / 2.0, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn lovasz_perfect_prediction_is_zero() {
        let probs = Mat::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let r = lovasz_softmax(&probs, &[0, 1], 9).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn lovasz_single_foreground_point() {
        // One kept point of class 1 predicted at 0.6 → error 0.4, Jaccard
        // coefficient 1 → loss 0.4 for the only present class.
        let probs = Mat::from_rows(vec![vec![0.4, 0.6]]);
        let r = lovasz_softmax(&probs, &[1], 9).unwrap();
        assert_abs_diff_eq!(r.value, 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(r.grad.get(0, 1), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn lovasz_binary_hard_prediction_equals_one_minus_iou() {
        // GT: the foreground class only (class 1 present). Hard predictions
        // miss 2 of 5 points. IoU = 3/5 computed directly.
        let rows = vec![
            vec![0.0, 1.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![1.0, 0.0],
        ];
        let gt = vec![1u32, 1, 1, 1, 1];
        let pred_fg: Vec<bool> = rows.iter().map(|r| r[1] > 0.5).collect();
        let tp = pred_fg.iter().zip(&gt).filter(|(&p, &g)| p && g == 1).count() as f64;
        let fp = pred_fg.iter().zip(&gt).filter(|(&p, &g)| p && g != 1).count() as f64;
        let fn_ = pred_fg.iter().zip(&gt).filter(|(&p, &g)| !p && g == 1).count() as f64;
        let iou = tp / (tp + fp + fn_);
        let r = lovasz_softmax(&Mat::from_rows(rows), &gt, 9).unwrap();
        assert_abs_diff_eq!(r.value, 1.0 - iou, epsilon = 1e-12);
    }

    #[test]
    fn lovasz_two_present_classes_averages_jaccard_losses() {
        // Hard binary predictions with both classes present: the loss is the
        // mean of the two per-class Jaccard losses, each checked by direct
        // IoU counting.
        let rows = vec![
            vec![1.0, 0.0], // gt 0, pred 0
            vec![0.0, 1.0], // gt 0, pred 1 (error)
            vec![0.0, 1.0], // gt 1, pred 1
            vec![0.0, 1.0], // gt 1, pred 1
        ];
        let gt = vec![0, 0, 1, 1];
        let iou_of = |class: u32| {
            let mut tp = 0.0;
            let mut fp = 0.0;
            let mut fn_ = 0.0;
            for (row, &g) in rows.iter().zip(&gt) {
                let pred = if row[1] > 0.5 { 1 } else { 0 };
                match (g == class, pred == class) {
                    (true, true) => tp += 1.0,
                    (false, true) => fp += 1.0,
                    (true, false) => fn_ += 1.0,
                    _ => {}
                }
            }
            tp / (tp + fp + fn_)
        };
        let expected = ((1.0 - iou_of(0)) + (1.0 - iou_of(1))) / 2.0;
        let r = lovasz_softmax(&Mat::from_rows(rows.clone()), &gt, 9).unwrap();
        assert_abs_diff_eq!(r.value, expected, epsilon = 1e-12);
    }

    #[test]
    fn lovasz_no_kept_points_is_zero() {
        let probs = Mat::from_rows(vec![vec![0.5, 0.5]]);
        let r = lovasz_softmax(&probs, &[9], 9).unwrap();
        assert_eq!(r.value, 0.0);
    }
}
