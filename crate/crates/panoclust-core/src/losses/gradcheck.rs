//! Central-difference verification of the analytic loss gradients.
//!
//! Probes live in logit space and probabilities are re-derived through
//! softmax at every evaluation, so perturbed inputs stay on the simplex.
//! Two subtleties:
//!
//! - The losses are piecewise smooth: non-differentiable where a
//!   column-maximum, fragment-exemption, or error-sort decision flips. Each
//!   target exposes a branch signature, and any coordinate whose signature
//!   changes within ±10h of the base point is excluded.
//! - Fragmentation counts fragments, so its raw value is locally constant;
//!   its gradient is defined as the linearization with the fragment set and
//!   the ⊘-denominators frozen at the forward pass. The checker therefore
//!   probes that frozen linearization (which coincides with the loss in
//!   value and gradient at the base point), exactly the function the
//!   backward pass differentiates.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mat::{softmax_backward, softmax_rows, Mat};
use crate::softmat::{column_maxima, SoftMatrix};
use crate::types::{ClassTaxonomy, Point3, Scene};

use super::semantic::lovasz_orders;
use super::{
    fragment_cells, impurity_loss, lovasz_softmax, small_instance_weights,
    weighted_cross_entropy, LossWeights,
};

/// Relative errors are measured against max(|analytic|, |numeric|, this),
/// so near-zero gradient pairs compare absolutely.
const REL_ERROR_FLOOR: f64 = 1e-6;

/// How far around the base point (in units of h) branch flips disqualify a
/// coordinate.
const TIE_MARGIN: f64 = 10.0;

/// A differentiable loss viewed as a function of one logit tensor.
pub trait GradTarget {
    /// Loss value and analytic gradient with respect to the logits.
    fn eval(&self, logits: &Mat) -> (f64, Mat);

    /// Hash of the active selection pattern; constant for smooth losses.
    fn branch_id(&self, _logits: &Mat) -> u64 {
        0
    }
}

/// Outcome of checking one logit tensor.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: Option<(usize, usize)>,
    pub checked: usize,
    pub skipped_ties: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Compare analytic gradients against central differences with step `h`,
/// skipping coordinates within the tie margin of a branch flip.
pub fn finite_difference_check(
    target: &dyn GradTarget,
    logits: &Mat,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must be in (0, 1e-2], got {h}"
        )));
    }
    let (_, analytic) = target.eval(logits);
    let base_branch = target.branch_id(logits);

    let mut probe = logits.clone();
    let mut max_rel_error: f64 = 0.0;
    let mut worst = None;
    let mut checked = 0;
    let mut skipped = 0;

    for r in 0..logits.rows() {
        for c in 0..logits.cols() {
            let base = logits.get(r, c);

            let mut branch_stable = true;
            for offset in [-TIE_MARGIN * h, -h, h, TIE_MARGIN * h] {
                probe.set(r, c, base + offset);
                if target.branch_id(&probe) != base_branch {
                    branch_stable = false;
                    break;
                }
            }
            if !branch_stable {
                probe.set(r, c, base);
                skipped += 1;
                continue;
            }

            probe.set(r, c, base + h);
            let (plus, _) = target.eval(&probe);
            probe.set(r, c, base - h);
            let (minus, _) = target.eval(&probe);
            probe.set(r, c, base);

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(r, c);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            checked += 1;
            if rel > max_rel_error {
                max_rel_error = rel;
                worst = Some((r, c));
            }
        }
    }

    Ok(GradCheckReport {
        max_rel_error,
        worst_coordinate: worst,
        checked,
        skipped_ties: skipped,
        tolerance,
    })
}

/// Which loss a generated check case exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Impurity,
    Fragmentation,
    WeightedCrossEntropy,
    LovaszSoftmax,
    Total,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "impurity" => Ok(LossKind::Impurity),
            "fragmentation" => Ok(LossKind::Fragmentation),
            "wce" | "cross-entropy" => Ok(LossKind::WeightedCrossEntropy),
            "lovasz" => Ok(LossKind::LovaszSoftmax),
            "total" => Ok(LossKind::Total),
            other => Err(Error::InvalidConfig(format!(
                "unknown loss '{other}' (expected impurity|fragmentation|wce|lovasz|total)"
            ))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            LossKind::Impurity => "impurity",
            LossKind::Fragmentation => "fragmentation",
            LossKind::WeightedCrossEntropy => "wce",
            LossKind::LovaszSoftmax => "lovasz",
            LossKind::Total => "total",
        };
        f.write_str(name)
    }
}

/// Shape of a generated check case.
#[derive(Debug, Clone, Copy)]
pub struct CaseParams {
    pub points: usize,
    pub objects: usize,
    pub classes: usize,
    pub clusters: usize,
    pub stuff_points: usize,
    pub ignored_points: usize,
}

impl Default for CaseParams {
    fn default() -> Self {
        CaseParams {
            points: 10,
            objects: 3,
            classes: 4,
            clusters: 5,
            stuff_points: 2,
            ignored_points: 1,
        }
    }
}

/// A randomly generated scene plus starting logits for one loss.
pub struct GradCheckCase {
    kind: LossKind,
    scene: Scene,
    taxonomy: ClassTaxonomy,
    class_weights: Vec<f64>,
    point_weights: Vec<f64>,
    loss_weights: LossWeights,
    classes: usize,
    clusters: usize,
    /// Fragment cells and their frozen denominators, captured from the base
    /// logits; the linearization the fragmentation backward pass defines.
    frozen_fragments: Vec<(usize, usize, f64)>,
    pub logits: Mat,
}

fn check_taxonomy(classes: usize) -> ClassTaxonomy {
    assert!(classes >= 3, "need ignore + stuff + at least one thing");
    let things: Vec<u32> = (2..classes as u32).collect();
    let extent = things.iter().map(|&t| (t, 5.0)).collect();
    let eps = things.iter().map(|&t| (t, 1.0)).collect();
    ClassTaxonomy::new(
        classes as u32,
        [1],
        things,
        0,
        (0..classes).map(|c| format!("class{c}")).collect(),
        extent,
        eps,
        vec![],
    )
    .expect("generated taxonomy is valid")
}

impl GradCheckCase {
    pub fn generate(kind: LossKind, params: CaseParams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let CaseParams {
            points,
            objects,
            classes,
            clusters,
            stuff_points,
            ignored_points,
        } = params;
        let thing_points = points
            .checked_sub(stuff_points + ignored_points)
            .expect("params must leave room for thing points");
        assert!(
            thing_points >= objects && objects >= 1,
            "every object needs at least one point"
        );

        let taxonomy = check_taxonomy(classes);
        let thing_classes = classes - 2;

        let mut sem = Vec::with_capacity(points);
        let mut inst = Vec::with_capacity(points);
        for k in 0..thing_points {
            let object = k % objects;
            sem.push(2 + (object % thing_classes) as u32);
            inst.push(object as u32 + 1);
        }
        sem.extend(std::iter::repeat(1).take(stuff_points));
        inst.extend(std::iter::repeat(0).take(stuff_points));
        sem.extend(std::iter::repeat(0).take(ignored_points));
        inst.extend(std::iter::repeat(0).take(ignored_points));

        let pts = (0..points)
            .map(|i| Point3::new(i as f64, 0.0, 0.0).unwrap())
            .collect();
        let scene = Scene::new(pts, sem, inst, &taxonomy).expect("generated scene is valid");

        let class_weights: Vec<f64> = (0..classes)
            .map(|c| if c == 0 { 0.0 } else { rng.gen_range(0.5..2.0) })
            .collect();
        let loss_weights = LossWeights::default();
        let point_weights = small_instance_weights(
            &scene,
            loss_weights.small_instance_factor,
            loss_weights.small_instance_threshold,
        );

        let cols = match kind {
            LossKind::Impurity | LossKind::Fragmentation => clusters,
            LossKind::WeightedCrossEntropy | LossKind::LovaszSoftmax => classes,
            LossKind::Total => classes + clusters,
        };
        let logits = Mat::from_vec(
            points,
            cols,
            (0..points * cols).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        );

        let mut case = GradCheckCase {
            kind,
            scene,
            taxonomy,
            class_weights,
            point_weights,
            loss_weights,
            classes,
            clusters,
            frozen_fragments: Vec::new(),
            logits,
        };
        if matches!(kind, LossKind::Fragmentation | LossKind::Total) {
            let inst_logits = match kind {
                LossKind::Fragmentation => case.logits.clone(),
                _ => case.split_total(&case.logits).1,
            };
            let probs = softmax_rows(&inst_logits);
            let matrix =
                SoftMatrix::build(&case.scene, &probs).expect("case shapes are consistent");
            case.frozen_fragments = fragment_cells(&matrix)
                .into_iter()
                .map(|(i, j)| (i, j, matrix.values().get(i, j)))
                .collect();
        }
        case
    }

    /// The frozen fragmentation linearization: value Σ S'[i][j]/(N·c_ij),
    /// which equals |F|/N at the base point, and its gradient chained to the
    /// per-point probabilities.
    fn frozen_fragmentation(&self, matrix: &SoftMatrix) -> (f64, Mat) {
        let n = matrix.num_clusters() as f64;
        let mut value = 0.0;
        let mut grad = Mat::zeros(matrix.num_points(), matrix.num_clusters());
        for &(i, j, denom) in &self.frozen_fragments {
            value += matrix.values().get(i, j) / (n * denom);
            let members = &matrix.point_index()[i];
            let per_point = 1.0 / (members.len() as f64 * n * denom);
            for &p in members {
                grad.add_at(p, j, per_point);
            }
        }
        (value, grad)
    }

    fn split_total(&self, logits: &Mat) -> (Mat, Mat) {
        let mut sem = Mat::zeros(logits.rows(), self.classes);
        let mut inst = Mat::zeros(logits.rows(), self.clusters);
        for p in 0..logits.rows() {
            let row = logits.row(p);
            sem.row_mut(p).copy_from_slice(&row[..self.classes]);
            inst.row_mut(p).copy_from_slice(&row[self.classes..]);
        }
        (sem, inst)
    }
}

/// Chain a gradient w.r.t. probabilities back through the row softmax.
fn chain_softmax(probs: &Mat, grad_probs: &Mat) -> Mat {
    let mut out = Mat::zeros(probs.rows(), probs.cols());
    for p in 0..probs.rows() {
        let mut row = vec![0.0; probs.cols()];
        softmax_backward(probs.row(p), grad_probs.row(p), &mut row);
        out.row_mut(p).copy_from_slice(&row);
    }
    out
}

fn hash_cells(hasher: &mut DefaultHasher, cells: &[(usize, usize)]) {
    for cell in cells {
        cell.hash(hasher);
    }
}

impl GradTarget for GradCheckCase {
    fn eval(&self, logits: &Mat) -> (f64, Mat) {
        match self.kind {
            LossKind::Impurity => {
                let probs = softmax_rows(logits);
                let matrix =
                    SoftMatrix::build(&self.scene, &probs).expect("case shapes are consistent");
                let result = impurity_loss(&matrix);
                (result.value, chain_softmax(&probs, &result.grad))
            }
            LossKind::Fragmentation => {
                let probs = softmax_rows(logits);
                let matrix =
                    SoftMatrix::build(&self.scene, &probs).expect("case shapes are consistent");
                let (value, grad) = self.frozen_fragmentation(&matrix);
                (value, chain_softmax(&probs, &grad))
            }
            LossKind::WeightedCrossEntropy => {
                let probs = softmax_rows(logits);
                let result = weighted_cross_entropy(
                    &probs,
                    self.scene.sem_gt(),
                    &self.class_weights,
                    &self.point_weights,
                    self.taxonomy.ignore_id(),
                )
                .expect("case shapes are consistent");
                (result.value, chain_softmax(&probs, &result.grad))
            }
            LossKind::LovaszSoftmax => {
                let probs = softmax_rows(logits);
                let result =
                    lovasz_softmax(&probs, self.scene.sem_gt(), self.taxonomy.ignore_id())
                        .expect("case shapes are consistent");
                (result.value, chain_softmax(&probs, &result.grad))
            }
            LossKind::Total => {
                // Same composition as total_loss, with the fragmentation
                // component replaced by its frozen linearization; identical
                // in value and gradient at the base point.
                let (sem_logits, inst_logits) = self.split_total(logits);
                let sem_prob = softmax_rows(&sem_logits);
                let inst_prob = softmax_rows(&inst_logits);
                let w = &self.loss_weights;

                let wce = weighted_cross_entropy(
                    &sem_prob,
                    self.scene.sem_gt(),
                    &self.class_weights,
                    &self.point_weights,
                    self.taxonomy.ignore_id(),
                )
                .expect("case shapes are consistent");
                let lovasz =
                    lovasz_softmax(&sem_prob, self.scene.sem_gt(), self.taxonomy.ignore_id())
                        .expect("case shapes are consistent");
                let matrix = SoftMatrix::build(&self.scene, &inst_prob)
                    .expect("case shapes are consistent");
                let impurity = impurity_loss(&matrix);
                let (frag_value, frag_grad) = self.frozen_fragmentation(&matrix);

                let value = w.w_sem * (wce.value + lovasz.value)
                    + w.w_imp * impurity.value
                    + w.w_frag * frag_value;
                let mut sem_grad_prob = Mat::zeros(logits.rows(), self.classes);
                sem_grad_prob.axpy(w.w_sem, &wce.grad);
                sem_grad_prob.axpy(w.w_sem, &lovasz.grad);
                let mut inst_grad_prob = Mat::zeros(logits.rows(), self.clusters);
                inst_grad_prob.axpy(w.w_imp, &impurity.grad);
                inst_grad_prob.axpy(w.w_frag, &frag_grad);

                let sem_grad = chain_softmax(&sem_prob, &sem_grad_prob);
                let inst_grad = chain_softmax(&inst_prob, &inst_grad_prob);
                let mut grad = Mat::zeros(logits.rows(), logits.cols());
                for p in 0..logits.rows() {
                    grad.row_mut(p)[..self.classes].copy_from_slice(sem_grad.row(p));
                    grad.row_mut(p)[self.classes..].copy_from_slice(inst_grad.row(p));
                }
                (value, grad)
            }
        }
    }

    fn branch_id(&self, logits: &Mat) -> u64 {
        let mut hasher = DefaultHasher::new();
        match self.kind {
            LossKind::Impurity => {
                let probs = softmax_rows(logits);
                let matrix =
                    SoftMatrix::build(&self.scene, &probs).expect("case shapes are consistent");
                hash_cells(&mut hasher, &column_maxima(&matrix));
            }
            LossKind::Fragmentation => {
                // The frozen linearization is globally smooth.
            }
            LossKind::WeightedCrossEntropy => {
                // Smooth away from the log clamp, which these logit ranges
                // cannot reach.
            }
            LossKind::LovaszSoftmax => {
                let probs = softmax_rows(logits);
                for order in lovasz_orders(&probs, self.scene.sem_gt(), self.taxonomy.ignore_id())
                {
                    order.hash(&mut hasher);
                }
            }
            LossKind::Total => {
                let (sem_logits, inst_logits) = self.split_total(logits);
                let sem_prob = softmax_rows(&sem_logits);
                let inst_prob = softmax_rows(&inst_logits);
                let matrix = SoftMatrix::build(&self.scene, &inst_prob)
                    .expect("case shapes are consistent");
                hash_cells(&mut hasher, &column_maxima(&matrix));
                for order in
                    lovasz_orders(&sem_prob, self.scene.sem_gt(), self.taxonomy.ignore_id())
                {
                    order.hash(&mut hasher);
                }
            }
        }
        hasher.finish()
    }
}

/// Aggregate outcome over many random cases of one loss.
#[derive(Debug, Clone)]
pub struct GradCheckSummary {
    pub kind: LossKind,
    pub trials: usize,
    pub failures: usize,
    pub worst_rel_error: f64,
    pub total_checked: usize,
    pub total_skipped: usize,
    pub tolerance: f64,
}

impl GradCheckSummary {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Run `trials` random cases of `kind`, each on a fresh scene and logit
/// tensor derived from `seed`.
pub fn run_trials(
    kind: LossKind,
    trials: usize,
    h: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = GradCheckSummary {
        kind,
        trials,
        failures: 0,
        worst_rel_error: 0.0,
        total_checked: 0,
        total_skipped: 0,
        tolerance,
    };
    for trial in 0..trials {
        let objects = rng.gen_range(1usize..5);
        let stuff_points = rng.gen_range(0usize..3);
        let ignored_points = rng.gen_range(0usize..2);
        let params = CaseParams {
            points: objects + stuff_points + ignored_points + rng.gen_range(3usize..8),
            objects,
            classes: rng.gen_range(3usize..6),
            clusters: rng.gen_range(3usize..8),
            stuff_points,
            ignored_points,
        };
        let case = GradCheckCase::generate(kind, params, seed ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let report = finite_difference_check(&case, &case.logits, h, tolerance)?;
        if !report.passed() {
            summary.failures += 1;
        }
        summary.worst_rel_error = summary.worst_rel_error.max(report.max_rel_error);
        summary.total_checked += report.checked;
        summary.total_skipped += report.skipped_ties;
    }
    Ok(summary)
}
