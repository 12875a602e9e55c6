//! Training objectives: the two instance-clustering losses read off the soft
//! confusion matrix (impurity and fragmentation), the two semantic losses
//! (weighted cross-entropy and Lovász-softmax), and their weighted
//! combination. Every loss returns its value together with the analytic
//! gradient with respect to the input probability entries; `gradcheck`
//! verifies those gradients against central finite differences.

mod gradcheck;
mod semantic;

pub use gradcheck::{
    finite_difference_check, run_trials, CaseParams, GradCheckCase, GradCheckReport,
    GradCheckSummary, GradTarget, LossKind,
};
pub use semantic::{
    inverse_log_frequency_weights, lovasz_softmax, small_instance_weights,
    weighted_cross_entropy,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::softmat::{column_maxima, SoftMatrix};
use crate::types::{ClassTaxonomy, Prediction, Scene};

/// Fragment cells below this mass are treated as empty: they are counted in
/// neither the fragmentation value nor its gradient. Keeps the elementwise
/// S/S counting well-defined at 0 and bounds the 1/S gradient.
pub const FRAGMENT_MASS_FLOOR: f64 = 1e-6;

/// Probabilities are clamped here before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

/// Scalar weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_imp: f64,
    pub w_frag: f64,
    pub w_sem: f64,
    pub small_instance_factor: f64,
    pub small_instance_threshold: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_imp: 0.2,
            w_frag: 0.05,
            w_sem: 0.7,
            small_instance_factor: 3.0,
            small_instance_threshold: 100,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.w_imp,
            self.w_frag,
            self.w_sem,
            self.small_instance_factor,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// A loss value and its gradient with respect to each input probability entry.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub value: f64,
    pub grad: Mat,
}

impl LossResult {
    fn checked(value: f64, grad: Mat) -> Self {
        assert!(value.is_finite(), "loss value must be finite");
        assert!(grad.is_finite(), "loss gradient must be finite");
        LossResult { value, grad }
    }

    fn zero(rows: usize, cols: usize) -> Self {
        LossResult {
            value: 0.0,
            grad: Mat::zeros(rows, cols),
        }
    }
}

/// Cells of the fragmentation set F(S): column maxima that share a row with a
/// larger column maximum. Per row the largest column-maximum is exempt (ties
/// exempt the lowest column index); cells below `FRAGMENT_MASS_FLOOR` are
/// treated as empty. Returned in (row, column) order.
pub fn fragment_cells(matrix: &SoftMatrix) -> Vec<(usize, usize)> {
    let values = matrix.values();
    let maxima = column_maxima(matrix);
    let mut per_row: Vec<Vec<usize>> = vec![Vec::new(); matrix.num_objects()];
    for &(i, j) in &maxima {
        per_row[i].push(j);
    }
    let mut fragments = Vec::new();
    for (i, cols) in per_row.iter().enumerate() {
        if cols.len() < 2 {
            continue;
        }
        // Columns were collected in ascending order, so the first strict
        // maximum is the lowest-index one.
        let mut exempt = cols[0];
        for &j in &cols[1..] {
            if values.get(i, j) > values.get(i, exempt) {
                exempt = j;
            }
        }
        for &j in cols {
            if j != exempt && values.get(i, j) >= FRAGMENT_MASS_FLOOR {
                fragments.push((i, j));
            }
        }
    }
    fragments.sort_unstable();
    fragments
}

/// Impurity: the share of assignment mass that lands outside the column
/// maxima, `ΣQ(S)/ΣS`. ΣS equals the object count G exactly because every
/// row sums to 1, so the gradient of each non-maximum cell is 1/G, chained
/// through the per-object averaging to the contributing points.
pub fn impurity_loss(matrix: &SoftMatrix) -> LossResult {
    let g = matrix.num_objects();
    let n = matrix.num_clusters();
    if g == 0 {
        return LossResult::zero(matrix.num_points(), n);
    }
    let values = matrix.values();
    let mut is_max = vec![false; g * n];
    for (i, j) in column_maxima(matrix) {
        is_max[i * n + j] = true;
    }

    let inv_total = 1.0 / g as f64;
    let mut value = 0.0;
    let mut grad = Mat::zeros(matrix.num_points(), n);
    for i in 0..g {
        let members = &matrix.point_index()[i];
        let per_point = inv_total / members.len() as f64;
        for j in 0..n {
            if is_max[i * n + j] {
                continue;
            }
            value += values.get(i, j) * inv_total;
            for &p in members {
                grad.add_at(p, j, per_point);
            }
        }
    }
    LossResult::checked(value, grad)
}

/// Fragmentation: the number of mass-bearing fragments over N. The counting
/// numerator Σ F(S)⊘F(S) is differentiated with the denominator frozen at its
/// current value, giving each fragment cell slope 1/(N·S[i][j]).
pub fn fragmentation_loss(matrix: &SoftMatrix) -> LossResult {
    let g = matrix.num_objects();
    let n = matrix.num_clusters();
    if g == 0 {
        return LossResult::zero(matrix.num_points(), n);
    }
    let values = matrix.values();
    let fragments = fragment_cells(matrix);
    let value = fragments.len() as f64 / n as f64;

    let mut grad = Mat::zeros(matrix.num_points(), n);
    for (i, j) in fragments {
        let members = &matrix.point_index()[i];
        let slope = 1.0 / (n as f64 * values.get(i, j));
        let per_point = slope / members.len() as f64;
        for &p in members {
            grad.add_at(p, j, per_point);
        }
    }
    LossResult::checked(value, grad)
}

/// Per-component breakdown of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub wce: f64,
    pub lovasz: f64,
    pub impurity: f64,
    pub fragmentation: f64,
}

/// Combined objective with gradients for both heads.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub value: f64,
    pub sem_grad: Mat,
    pub inst_grad: Mat,
    pub components: LossBreakdown,
}

/// `w_sem·(WCE + Lovász) + w_imp·impurity + w_frag·fragmentation`.
///
/// `class_weights` must have one entry per semantic class; the per-point
/// small-instance weighting is derived from the scene's ground truth.
pub fn total_loss(
    scene: &Scene,
    pred: &Prediction,
    weights: &LossWeights,
    class_weights: &[f64],
    taxonomy: &ClassTaxonomy,
) -> Result<TotalLoss> {
    weights.validate()?;
    if pred.len() != scene.len() {
        return Err(Error::LengthMismatch {
            context: "prediction vs scene",
            left: pred.len(),
            right: scene.len(),
        });
    }

    let point_weights = small_instance_weights(
        scene,
        weights.small_instance_factor,
        weights.small_instance_threshold,
    );
    let wce = weighted_cross_entropy(
        pred.sem_prob(),
        scene.sem_gt(),
        class_weights,
        &point_weights,
        taxonomy.ignore_id(),
    )?;
    let lovasz = lovasz_softmax(pred.sem_prob(), scene.sem_gt(), taxonomy.ignore_id())?;

    let matrix = SoftMatrix::build(scene, pred.inst_prob())?;
    let impurity = impurity_loss(&matrix);
    let fragmentation = fragmentation_loss(&matrix);

    let value = weights.w_sem * (wce.value + lovasz.value)
        + weights.w_imp * impurity.value
        + weights.w_frag * fragmentation.value;

    let mut sem_grad = Mat::zeros(pred.len(), pred.num_classes());
    sem_grad.axpy(weights.w_sem, &wce.grad);
    sem_grad.axpy(weights.w_sem, &lovasz.grad);

    let mut inst_grad = Mat::zeros(pred.len(), pred.num_clusters());
    inst_grad.axpy(weights.w_imp, &impurity.grad);
    inst_grad.axpy(weights.w_frag, &fragmentation.grad);

    Ok(TotalLoss {
        value,
        sem_grad,
        inst_grad,
        components: LossBreakdown {
            wce: wce.value,
            lovasz: lovasz.value,
            impurity: impurity.value,
            fragmentation: fragmentation.value,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::softmax_rows;
    use crate::types::tests_support::micro_tax_two_things;
    use crate::types::{Point3, Prediction};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn sm(rows: Vec<Vec<f64>>) -> SoftMatrix {
        SoftMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn impurity_zero_for_pure_clusters() {
        let s = sm(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(impurity_loss(&s).value, 0.0);
    }

    #[test]
    fn impurity_worked_example() {
        let s = sm(vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.6, 0.3]]);
        assert_abs_diff_eq!(impurity_loss(&s).value, 0.2, epsilon = 1e-12);
    }

    #[test]
    fn impurity_split_object_is_not_impure() {
        // One object over two clusters: both cells are column maxima.
        let s = sm(vec![vec![0.5, 0.5]]);
        assert_eq!(impurity_loss(&s).value, 0.0);
    }

    #[test]
    fn impurity_empty_matrix() {
        let s = SoftMatrix::from_rows(vec![]).unwrap();
        let r = impurity_loss(&s);
        assert_eq!(r.value, 0.0);
        assert_eq!(r.grad.rows(), 0);
    }

    #[test]
    fn fragmentation_zero_for_identity() {
        let s = sm(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(fragmentation_loss(&s).value, 0.0);
    }

    #[test]
    fn fragmentation_worked_example() {
        let s = sm(vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.6, 0.3]]);
        assert_eq!(fragment_cells(&s), vec![(1, 2)]);
        assert_abs_diff_eq!(fragmentation_loss(&s).value, 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn fragmentation_tie_exempts_lowest_column() {
        let s = sm(vec![vec![0.5, 0.5]]);
        assert_eq!(fragment_cells(&s), vec![(0, 1)]);
        assert_abs_diff_eq!(fragmentation_loss(&s).value, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn fragmentation_ignores_massless_cells() {
        // Column 1's maximum sits in row 0 but carries (almost) no mass:
        // not a countable fragment.
        let s = sm(vec![vec![1.0 - 1e-9, 1e-9, 0.0], vec![0.0, 0.0, 1.0]]);
        assert_eq!(fragment_cells(&s), Vec::<(usize, usize)>::new());
        assert_eq!(fragmentation_loss(&s).value, 0.0);
    }

    #[test]
    fn impurity_gradient_chains_through_normalization() {
        // Two objects of sizes 2 and 1 over N=2 clusters.
        let tax = micro_tax_two_things();
        let points = (0..3)
            .map(|i| Point3::new(i as f64, 0.0, 0.0).unwrap())
            .collect();
        let scene = Scene::new(points, vec![2, 2, 3], vec![1, 1, 2], &tax).unwrap();
        let probs = Mat::from_rows(vec![
            vec![0.9, 0.1],
            vec![0.7, 0.3],
            vec![0.2, 0.8],
        ]);
        let s = SoftMatrix::build(&scene, &probs).unwrap();
        // S = [[0.8, 0.2], [0.2, 0.8]]; Q = {(0,1),(1,0)}; G=2.
        let r = impurity_loss(&s);
        assert_abs_diff_eq!(r.value, 0.2, epsilon = 1e-12);
        // Object 0 has 2 points: each Q-cell point grad = (1/G)·(1/2).
        assert_abs_diff_eq!(r.grad.get(0, 1), 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(r.grad.get(1, 1), 0.25, epsilon = 1e-12);
        // Object 1 has 1 point.
        assert_abs_diff_eq!(r.grad.get(2, 0), 0.5, epsilon = 1e-12);
        // Maxima cells get no gradient.
        assert_eq!(r.grad.get(0, 0), 0.0);
        assert_eq!(r.grad.get(2, 1), 0.0);
    }

    #[test]
    fn total_loss_combines_components() {
        let tax = micro_tax_two_things();
        let points = (0..4)
            .map(|i| Point3::new(i as f64, 0.0, 0.0).unwrap())
            .collect();
        let scene = Scene::new(
            points,
            vec![2, 2, 3, 1],
            vec![1, 1, 2, 0],
            &tax,
        )
        .unwrap();
        let sem_prob = softmax_rows(&Mat::from_rows(vec![vec![0.0; 4]; 4]));
        let inst_prob = Mat::from_rows(vec![
            vec![1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![1.0, 0.0, 0.0],
        ]);
        let pred = Prediction::new(sem_prob, inst_prob).unwrap();
        let weights = LossWeights::default();
        let cw = vec![1.0; 4];
        let total = total_loss(&scene, &pred, &weights, &cw, &tax).unwrap();
        let expected = weights.w_sem * (total.components.wce + total.components.lovasz)
            + weights.w_imp * total.components.impurity
            + weights.w_frag * total.components.fragmentation;
        assert_abs_diff_eq!(total.value, expected, epsilon = 1e-12);
        // Perfect clustering here: no impurity, no fragments.
        assert_eq!(total.components.impurity, 0.0);
        assert_eq!(total.components.fragmentation, 0.0);
    }

    #[test]
    fn total_loss_zero_weights() {
        let tax = micro_tax_two_things();
        let points = (0..2)
            .map(|i| Point3::new(i as f64, 0.0, 0.0).unwrap())
            .collect();
        let scene = Scene::new(points, vec![2, 1], vec![1, 0], &tax).unwrap();
        let sem_prob = softmax_rows(&Mat::from_rows(vec![vec![0.3, -1.0, 0.5, 0.0]; 2]));
        let inst_prob = softmax_rows(&Mat::from_rows(vec![vec![1.0, -0.5]; 2]));
        let pred = Prediction::new(sem_prob, inst_prob).unwrap();
        let weights = LossWeights {
            w_imp: 0.0,
            w_frag: 0.0,
            w_sem: 0.0,
            ..LossWeights::default()
        };
        let total = total_loss(&scene, &pred, &weights, &[1.0; 4], &tax).unwrap();
        assert_eq!(total.value, 0.0);
    }

    #[test]
    fn total_loss_default_weight_arithmetic() {
        // With defaults, components (WCE+Lov)=1.0, imp=0.2, frag=1/3 combine
        // to 0.7·1.0 + 0.2·0.2 + 0.05/3.
        let w = LossWeights::default();
        let combined = w.w_sem * 1.0 + w.w_imp * 0.2 + w.w_frag * (1.0 / 3.0);
        assert_abs_diff_eq!(combined, 0.7566666666666667, epsilon = 1e-12);
    }

    proptest! {
        /// Both instance losses are invariant under a consistent permutation
        /// of the cluster columns; gradients permute with the columns.
        #[test]
        fn losses_invariant_under_column_permutation(seed in 0u64..500) {
            use rand::seq::SliceRandom;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = rng.gen_range(1usize..5);
            let n = rng.gen_range(2usize..7);
            let rows: Vec<Vec<f64>> = (0..g)
                .map(|_| {
                    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0f64)).collect();
                    let s: f64 = raw.iter().sum();
                    raw.into_iter().map(|v| v / s).collect()
                })
                .collect();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let permuted: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| perm.iter().map(|&j| r[j]).collect())
                .collect();

            let a = sm(rows);
            let b = sm(permuted);
            for (f, name) in [
                (impurity_loss as fn(&SoftMatrix) -> LossResult, "impurity"),
                (fragmentation_loss as fn(&SoftMatrix) -> LossResult, "fragmentation"),
            ] {
                let ra = f(&a);
                let rb = f(&b);
                prop_assert!((ra.value - rb.value).abs() < 1e-12, "{} value changed", name);
                for p in 0..a.num_points() {
                    for (jb, &ja) in perm.iter().enumerate() {
                        prop_assert!(
                            (ra.grad.get(p, ja) - rb.grad.get(p, jb)).abs() < 1e-12,
                            "{} gradient did not permute",
                            name
                        );
                    }
                }
            }
        }

        /// Value bounds and the impurity-zero characterization.
        #[test]
        fn loss_bounds(seed in 0u64..500) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = rng.gen_range(1usize..6);
            let n = rng.gen_range(1usize..8);
            let rows: Vec<Vec<f64>> = (0..g)
                .map(|_| {
                    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0f64) + 1e-3).collect();
                    let s: f64 = raw.iter().sum();
                    raw.into_iter().map(|v| v / s).collect()
                })
                .collect();
            let s = sm(rows);
            let imp = impurity_loss(&s).value;
            let frag = fragmentation_loss(&s).value;
            prop_assert!((0.0..=1.0).contains(&imp));
            prop_assert!((0.0..=1.0).contains(&frag));

            // impurity == 0 ⟺ every non-maximum cell is 0.
            let maxima: std::collections::BTreeSet<(usize, usize)> =
                column_maxima(&s).into_iter().collect();
            let q_mass: f64 = (0..g)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .filter(|cell| !maxima.contains(cell))
                .map(|(i, j)| s.values().get(i, j))
                .sum();
            prop_assert_eq!(imp == 0.0, q_mass == 0.0);
        }

        /// Monotone reparameterizations of the logits that preserve each
        /// column's value ordering leave the column-maxima set unchanged.
        #[test]
        fn column_maxima_stable_under_order_preserving_rescaling(
            seed in 0u64..300,
            scale in prop::sample::select(vec![0.5f64, 2.0, 4.0]),
        ) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = rng.gen_range(2usize..5);
            let n = rng.gen_range(2usize..6);
            let logits: Vec<Vec<f64>> = (0..g)
                .map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0f64)).collect())
                .collect();
            let probs = softmax_rows(&Mat::from_rows(logits.clone()));
            let scaled = softmax_rows(&Mat::from_rows(
                logits
                    .iter()
                    .map(|r| r.iter().map(|&z| z * scale).collect())
                    .collect(),
            ));
            let a = sm((0..g).map(|i| probs.row(i).to_vec()).collect());
            let b = sm((0..g).map(|i| scaled.row(i).to_vec()).collect());

            let order_preserved = (0..n).all(|j| {
                let mut ra: Vec<usize> = (0..g).collect();
                let mut rb: Vec<usize> = (0..g).collect();
                ra.sort_by(|&x, &y| a.values().get(x, j).total_cmp(&a.values().get(y, j)));
                rb.sort_by(|&x, &y| b.values().get(x, j).total_cmp(&b.values().get(y, j)));
                ra == rb
            });
            if order_preserved {
                prop_assert_eq!(column_maxima(&a), column_maxima(&b));
            }
        }

        /// total_loss is linear in (w_sem, w_imp, w_frag) at fixed predictions.
        #[test]
        fn total_loss_linear_in_weights(seed in 0u64..100) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let tax = micro_tax_two_things();
            let n_points = 6usize;
            let points = (0..n_points)
                .map(|i| Point3::new(i as f64, 0.0, 0.0).unwrap())
                .collect();
            let scene = Scene::new(
                points,
                vec![2, 2, 3, 3, 1, 1],
                vec![1, 1, 2, 2, 0, 0],
                &tax,
            )
            .unwrap();
            let sem = softmax_rows(&Mat::from_rows(
                (0..n_points)
                    .map(|_| (0..4).map(|_| rng.gen_range(-1.5..1.5)).collect())
                    .collect(),
            ));
            let inst = softmax_rows(&Mat::from_rows(
                (0..n_points)
                    .map(|_| (0..3).map(|_| rng.gen_range(-1.5..1.5)).collect())
                    .collect(),
            ));
            let pred = Prediction::new(sem, inst).unwrap();
            let cw = vec![1.0; 4];

            let wa = LossWeights { w_imp: 0.3, w_frag: 0.1, w_sem: 0.4, ..Default::default() };
            let wb = LossWeights { w_imp: 0.1, w_frag: 0.02, w_sem: 0.9, ..Default::default() };
            let wsum = LossWeights {
                w_imp: wa.w_imp + wb.w_imp,
                w_frag: wa.w_frag + wb.w_frag,
                w_sem: wa.w_sem + wb.w_sem,
                ..Default::default()
            };
            let va = total_loss(&scene, &pred, &wa, &cw, &tax).unwrap().value;
            let vb = total_loss(&scene, &pred, &wb, &cw, &tax).unwrap().value;
            let vs = total_loss(&scene, &pred, &wsum, &cw, &tax).unwrap().value;
            prop_assert!((vs - (va + vb)).abs() < 1e-10);
        }
    }
}
