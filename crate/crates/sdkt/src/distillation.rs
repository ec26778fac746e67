//! Feature-alignment distillation losses: the single-teacher loss, the
//! selection-weighted dual-teacher objective with its re-weighted variant,
//! and the total objective (cross-entropy plus distillation).
//!
//! Per-sample contributions are accumulated with their weights folded in, so
//! a saturated selector (eta identically 0 or 1) reproduces the matching
//! single-teacher objective bit for bit.

use crate::error::{Error, Result};
use crate::linalg::{euclidean, Matrix};
use crate::model::{
    backprop_feature_grad, ce_accumulate, forward, EncoderParams, FeatureVec, LabeledBatch,
    PrototypeSet,
};

/// Below this distance the norm gradient is replaced by the zero subgradient.
pub const ZERO_DIST_EPS: f64 = 1e-8;

/// One reference batch prepared for distillation: inputs, cached teacher
/// features from both frozen teachers, per-sample selection scores, and the
/// re-weighting factor for the fine-tuned teacher's term.
#[derive(Debug, Clone)]
pub struct DistillBatchPlan {
    pub ref_inputs: Matrix,
    pub eta: Vec<f64>,
    pub feats_prev: Vec<FeatureVec>,
    pub feats_pre: Vec<FeatureVec>,
    pub lambda: f64,
}

impl DistillBatchPlan {
    pub fn new(
        ref_inputs: Matrix,
        eta: Vec<f64>,
        feats_prev: Vec<FeatureVec>,
        feats_pre: Vec<FeatureVec>,
        lambda: f64,
    ) -> Result<Self> {
        let n = ref_inputs.rows();
        if eta.len() != n || feats_prev.len() != n || feats_pre.len() != n {
            return Err(Error::shape(format!(
                "plan rows disagree: inputs {n}, eta {}, prev {}, pre {}",
                eta.len(),
                feats_prev.len(),
                feats_pre.len()
            )));
        }
        if eta.iter().any(|&e| !(0.0..=1.0).contains(&e)) {
            return Err(Error::param("eta values must lie in [0, 1]"));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::param(format!(
                "lambda must be nonnegative and finite, got {lambda}"
            )));
        }
        Ok(DistillBatchPlan {
            ref_inputs,
            eta,
            feats_prev,
            feats_pre,
            lambda,
        })
    }

    /// A plan with no reference samples; its distillation term is zero.
    pub fn empty(input_dim: usize, lambda: f64) -> Self {
        DistillBatchPlan {
            ref_inputs: Matrix::zeros(0, input_dim),
            eta: Vec::new(),
            feats_prev: Vec::new(),
            feats_pre: Vec::new(),
            lambda,
        }
    }

    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }
}

pub(crate) struct KdStats {
    /// Sum over samples of weight * distance, both teachers interleaved.
    pub weighted_sum: f64,
    /// Unweighted distance sums per teacher slot, for diagnostics.
    pub prev_raw_sum: f64,
    pub pre_raw_sum: f64,
}

/// Shared distillation core: for each sample, encodes the student once,
/// accumulates `weight * |f_student - f_teacher|` per configured teacher
/// slot, and backpropagates the combined feature gradient. Zero-weight
/// terms are skipped, as are samples closer than `ZERO_DIST_EPS` to the
/// teacher (zero subgradient).
pub(crate) fn kd_accumulate(
    student: &EncoderParams,
    inputs: &Matrix,
    prev: Option<(&[FeatureVec], &[f64])>,
    pre: Option<(&[FeatureVec], &[f64])>,
    grad: &mut EncoderParams,
) -> Result<KdStats> {
    let n = inputs.rows();
    for (name, slot) in [("prev", &prev), ("pre", &pre)] {
        if let Some((feats, weights)) = slot {
            if feats.len() != n || weights.len() != n {
                return Err(Error::shape(format!(
                    "{name} teacher arrays do not match {n} inputs"
                )));
            }
        }
    }
    let f_dim = student.feature_dim;
    let mut stats = KdStats {
        weighted_sum: 0.0,
        prev_raw_sum: 0.0,
        pre_raw_sum: 0.0,
    };
    let mut dldf = vec![0.0; f_dim];
    for i in 0..n {
        let x = inputs.row(i);
        let cache = forward(student, x)?;
        let f = &cache.feature;
        dldf.iter_mut().for_each(|v| *v = 0.0);
        let mut has_grad = false;
        for (slot, raw_sum) in [
            (&prev, &mut stats.prev_raw_sum),
            (&pre, &mut stats.pre_raw_sum),
        ] {
            if let Some((feats, weights)) = slot {
                let t = feats[i].values();
                if t.len() != f_dim {
                    return Err(Error::shape(format!(
                        "teacher feature dim {} vs student feature dim {}",
                        t.len(),
                        f_dim
                    )));
                }
                let dist = euclidean(f, t);
                *raw_sum += dist;
                let w = weights[i];
                if w != 0.0 {
                    stats.weighted_sum += w * dist;
                    if dist >= ZERO_DIST_EPS {
                        for k in 0..f_dim {
                            dldf[k] += w * (f[k] - t[k]) / dist;
                        }
                        has_grad = true;
                    }
                }
            }
        }
        if has_grad {
            backprop_feature_grad(student, x, &cache, &dldf, 1.0, grad);
        }
    }
    Ok(stats)
}

/// Mean feature distance between the student and one frozen teacher over a
/// batch, with the exact analytic gradient (zero subgradient at distance 0).
pub fn kd_loss_and_grad(
    student: &EncoderParams,
    inputs: &Matrix,
    teacher_feats: &[FeatureVec],
) -> Result<(f64, EncoderParams)> {
    if inputs.rows() == 0 {
        return Err(Error::EmptyInput("distillation batch is empty".into()));
    }
    if inputs.rows() != teacher_feats.len() {
        return Err(Error::shape(format!(
            "{} inputs vs {} teacher features",
            inputs.rows(),
            teacher_feats.len()
        )));
    }
    let inv_b = 1.0 / inputs.rows() as f64;
    let weights = vec![inv_b; inputs.rows()];
    let mut grad = student.zeros_like();
    let stats = kd_accumulate(student, inputs, Some((teacher_feats, &weights)), None, &mut grad)?;
    Ok((stats.weighted_sum, grad))
}

/// Re-weighted dual-teacher distillation sum
/// `lambda * sum_i eta_i * L_prev_i + sum_i (1 - eta_i) * L_pre_i`.
/// With `lambda = 1` this is the plain selection-weighted objective.
pub fn dual_kd_loss(
    loss_prev: &[f64],
    loss_pre: &[f64],
    eta: &[f64],
    lambda: f64,
) -> Result<f64> {
    if loss_prev.len() != loss_pre.len() || loss_prev.len() != eta.len() {
        return Err(Error::shape(format!(
            "per-sample vectors disagree: prev {}, pre {}, eta {}",
            loss_prev.len(),
            loss_pre.len(),
            eta.len()
        )));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::param(format!(
            "lambda must be nonnegative and finite, got {lambda}"
        )));
    }
    let mut prev_sum = 0.0;
    let mut pre_sum = 0.0;
    for i in 0..eta.len() {
        prev_sum += eta[i] * loss_prev[i];
        pre_sum += (1.0 - eta[i]) * loss_pre[i];
    }
    Ok(lambda * prev_sum + pre_sum)
}

/// Loss components of one training step.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    /// Weighted dual distillation term actually included in `total`.
    pub kd_dual: f64,
    /// Unweighted mean distance to the fine-tuned teacher (diagnostic).
    pub kd_prev: f64,
    /// Unweighted mean distance to the pre-trained teacher (diagnostic).
    pub kd_pre: f64,
}

impl LossBreakdown {
    pub fn ce_only(ce: f64) -> Self {
        LossBreakdown {
            total: ce,
            ce,
            kd_dual: 0.0,
            kd_prev: 0.0,
            kd_pre: 0.0,
        }
    }
}

/// Total objective: batch cross-entropy plus the per-sample re-weighted
/// dual distillation term averaged over the reference batch. An empty plan
/// reduces the objective to plain cross-entropy, bit for bit.
pub fn total_loss_and_grad(
    student: &EncoderParams,
    task_batch: &LabeledBatch,
    plan: &DistillBatchPlan,
    protos: &PrototypeSet,
    tau: f64,
) -> Result<(LossBreakdown, EncoderParams)> {
    let mut grad = student.zeros_like();
    let ce = ce_accumulate(student, task_batch, protos, tau, &mut grad)?;
    if plan.is_empty() {
        return Ok((LossBreakdown::ce_only(ce), grad));
    }
    let b = plan.len();
    let inv_b = 1.0 / b as f64;
    let w_prev: Vec<f64> = plan.eta.iter().map(|&e| (plan.lambda * e) * inv_b).collect();
    let w_pre: Vec<f64> = plan.eta.iter().map(|&e| (1.0 - e) * inv_b).collect();
    let stats = kd_accumulate(
        student,
        &plan.ref_inputs,
        Some((&plan.feats_prev, &w_prev)),
        Some((&plan.feats_pre, &w_pre)),
        &mut grad,
    )?;
    let kd_dual = stats.weighted_sum;
    Ok((
        LossBreakdown {
            total: ce + kd_dual,
            ce,
            kd_dual,
            kd_prev: stats.prev_raw_sum * inv_b,
            kd_pre: stats.pre_raw_sum * inv_b,
        },
        grad,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::encode;
    use crate::seeds::derive_rng;
    use rand::Rng;

    fn random_params(d: usize, h: usize, f: usize, seed: u64) -> EncoderParams {
        let mut rng = derive_rng(seed, &[0xD1]);
        EncoderParams::random_init(d, h, f, &mut rng)
    }

    fn random_inputs(b: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = derive_rng(seed, &[0xD2]);
        let rows: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        Matrix::from_rows(&rows).unwrap()
    }

    fn random_protos(l: usize, f: usize, seed: u64) -> PrototypeSet {
        let mut rng = derive_rng(seed, &[0xD3]);
        PrototypeSet::random((0..l as u32).collect(), f, &mut rng).unwrap()
    }

    fn teacher_feats(teacher: &EncoderParams, inputs: &Matrix) -> Vec<FeatureVec> {
        (0..inputs.rows())
            .map(|i| encode(teacher, inputs.row(i)).unwrap())
            .collect()
    }

    fn fd_grad(
        params: &EncoderParams,
        loss: impl Fn(&EncoderParams) -> f64,
        step: f64,
    ) -> Vec<f64> {
        let mut out = Vec::with_capacity(params.num_entries());
        for i in 0..params.num_entries() {
            let v = params.entry(i);
            let mut plus = params.clone();
            plus.set_entry(i, v + step);
            let mut minus = params.clone();
            minus.set_entry(i, v - step);
            out.push((loss(&plus) - loss(&minus)) / (2.0 * step));
        }
        out
    }

    fn max_rel_err(analytic: &EncoderParams, numeric: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..analytic.num_entries() {
            let a = analytic.entry(i);
            let n = numeric[i];
            let denom = a.abs().max(n.abs()).max(1e-8);
            worst = worst.max((a - n).abs() / denom);
        }
        worst
    }

    #[test]
    fn kd_student_equals_teacher_gives_zero_loss_and_grad() {
        let p = random_params(4, 3, 3, 13);
        let inputs = random_inputs(4, 4, 13);
        let feats = teacher_feats(&p, &inputs);
        let (loss, grad) = kd_loss_and_grad(&p, &inputs, &feats).unwrap();
        assert_eq!(loss, 0.0);
        for i in 0..grad.num_entries() {
            assert_eq!(grad.entry(i), 0.0);
        }
    }

    #[test]
    fn kd_gradient_matches_finite_differences() {
        let student = random_params(4, 3, 3, 13);
        let teacher = random_params(4, 3, 3, 14);
        let inputs = random_inputs(4, 4, 15);
        let feats = teacher_feats(&teacher, &inputs);
        // Skip the check if any sample is in the subgradient regime.
        for (i, fv) in feats.iter().enumerate() {
            let fs = encode(&student, inputs.row(i)).unwrap();
            assert!(euclidean(fs.values(), fv.values()) >= ZERO_DIST_EPS);
        }
        let (_, grad) = kd_loss_and_grad(&student, &inputs, &feats).unwrap();
        let fd = fd_grad(
            &student,
            |q| kd_loss_and_grad(q, &inputs, &feats).unwrap().0,
            1e-6,
        );
        let err = max_rel_err(&grad, &fd);
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn kd_orthogonal_single_sample() {
        // Constant encoder producing (1, 0); teacher feature (0, 1).
        let mut b2 = vec![0.0, 0.0];
        b2[0] = 1.0;
        let student =
            EncoderParams::new(2, 2, 2, vec![0.0; 4], vec![0.0; 2], vec![0.0; 4], b2).unwrap();
        let inputs = random_inputs(1, 2, 99);
        let teacher = vec![FeatureVec::unit(vec![0.0, 1.0]).unwrap()];
        let (loss, _) = kd_loss_and_grad(&student, &inputs, &teacher).unwrap();
        assert!((loss - 2f64.sqrt()).abs() < 1e-12);

        // Same configuration with a live encoder so the gradient is nonzero
        // and finite-difference checkable.
        let student = random_params(2, 3, 2, 101);
        let (_, grad) = kd_loss_and_grad(&student, &inputs, &teacher).unwrap();
        let fd = fd_grad(
            &student,
            |q| kd_loss_and_grad(q, &inputs, &teacher).unwrap().0,
            1e-6,
        );
        let err = max_rel_err(&grad, &fd);
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn kd_shape_errors() {
        let p = random_params(4, 3, 3, 1);
        let inputs = random_inputs(2, 4, 1);
        let feats = teacher_feats(&p, &inputs);
        assert!(matches!(
            kd_loss_and_grad(&p, &inputs, &feats[..1]),
            Err(Error::Shape(_))
        ));
        let empty = Matrix::zeros(0, 4);
        assert!(matches!(
            kd_loss_and_grad(&p, &empty, &[]),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn dual_loss_saturated_selectors() {
        let prev = [0.3, 0.7, 0.2];
        let pre = [0.5, 0.1, 0.4];
        let ones = [1.0, 1.0, 1.0];
        let zeros = [0.0, 0.0, 0.0];
        let prev_sum: f64 = prev.iter().sum();
        let pre_sum: f64 = pre.iter().sum();
        assert_eq!(dual_kd_loss(&prev, &pre, &ones, 1.0).unwrap(), prev_sum);
        assert_eq!(dual_kd_loss(&prev, &pre, &zeros, 1.0).unwrap(), pre_sum);
        assert_eq!(dual_kd_loss(&prev, &pre, &zeros, 7.0).unwrap(), pre_sum);
    }

    #[test]
    fn dual_loss_reweighted_hand_example() {
        let loss = dual_kd_loss(&[0.2, 0.4], &[0.1, 0.3], &[0.75, 0.25], 9.0).unwrap();
        assert!((loss - 2.5).abs() < 1e-12);
    }

    #[test]
    fn dual_loss_shape_and_lambda_errors() {
        assert!(matches!(
            dual_kd_loss(&[0.1], &[0.1, 0.2], &[0.5], 1.0),
            Err(Error::Shape(_))
        ));
        assert!(dual_kd_loss(&[0.1], &[0.1], &[0.5], -1.0).is_err());
    }

    #[test]
    fn dual_loss_is_linear_in_each_argument() {
        let mut rng = derive_rng(17, &[0xE0]);
        for _ in 0..20 {
            let n = 4;
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let pre: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let eta: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let lambda = rng.random_range(0.0..10.0);
            let s = rng.random_range(-2.0..2.0);
            let t = rng.random_range(-2.0..2.0);
            let combo: Vec<f64> = a.iter().zip(&b).map(|(x, y)| s * x + t * y).collect();
            let zero = vec![0.0; n];

            // Linear in loss_prev (pre losses zeroed to isolate the term).
            let la = dual_kd_loss(&a, &zero, &eta, lambda).unwrap();
            let lb = dual_kd_loss(&b, &zero, &eta, lambda).unwrap();
            let lc = dual_kd_loss(&combo, &zero, &eta, lambda).unwrap();
            assert!((lc - (s * la + t * lb)).abs() <= 1e-12);

            // Linear in loss_pre.
            let pa = dual_kd_loss(&zero, &a, &eta, lambda).unwrap();
            let pb = dual_kd_loss(&zero, &b, &eta, lambda).unwrap();
            let pc = dual_kd_loss(&zero, &combo, &eta, lambda).unwrap();
            assert!((pc - (s * pa + t * pb)).abs() <= 1e-12);

            // Affine in each eta entry: second differences vanish.
            let mut eta0 = eta.clone();
            let mut eta1 = eta.clone();
            let mut eta2 = eta.clone();
            eta0[1] = 0.0;
            eta1[1] = 0.5;
            eta2[1] = 1.0;
            let f0 = dual_kd_loss(&a, &pre, &eta0, lambda).unwrap();
            let f1 = dual_kd_loss(&a, &pre, &eta1, lambda).unwrap();
            let f2 = dual_kd_loss(&a, &pre, &eta2, lambda).unwrap();
            assert!((f2 - 2.0 * f1 + f0).abs() <= 1e-12);
        }
    }

    #[test]
    fn dual_loss_lambda_one_reduces_to_unweighted_form() {
        let mut rng = derive_rng(23, &[0xE1]);
        for _ in 0..20 {
            let n = 5;
            let prev: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
            let pre: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
            let eta: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let got = dual_kd_loss(&prev, &pre, &eta, 1.0).unwrap();
            let mut expected = 0.0;
            for i in 0..n {
                expected += eta[i] * prev[i] + (1.0 - eta[i]) * pre[i];
            }
            assert!((got - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn total_with_empty_plan_equals_ce_exactly() {
        let student = random_params(4, 3, 3, 31);
        let protos = random_protos(3, 3, 31);
        let inputs = random_inputs(5, 4, 31);
        let labels: Vec<u32> = vec![0, 1, 2, 0, 1];
        let batch = LabeledBatch::new(inputs, labels).unwrap();
        let plan = DistillBatchPlan::empty(4, 9.0);
        let (bd, grad) = total_loss_and_grad(&student, &batch, &plan, &protos, 0.01).unwrap();
        let (ce, ce_grad) = crate::model::ce_loss_and_grad(&student, &batch, &protos, 0.01).unwrap();
        assert_eq!(bd.total, ce);
        assert_eq!(bd.kd_dual, 0.0);
        assert_eq!(grad, ce_grad);
    }

    #[test]
    fn total_with_zero_eta_matches_pretrained_teacher_objective() {
        let student = random_params(4, 3, 3, 37);
        let g0 = random_params(4, 3, 3, 38);
        let gprev = random_params(4, 3, 3, 39);
        let protos = random_protos(3, 3, 37);
        let task = LabeledBatch::new(random_inputs(4, 4, 40), vec![0, 1, 2, 0]).unwrap();
        let ref_inputs = random_inputs(6, 4, 41);
        let plan = DistillBatchPlan::new(
            ref_inputs.clone(),
            vec![0.0; 6],
            teacher_feats(&gprev, &ref_inputs),
            teacher_feats(&g0, &ref_inputs),
            5.0,
        )
        .unwrap();
        let (bd, grad) = total_loss_and_grad(&student, &task, &plan, &protos, 0.01).unwrap();

        let mut expected_grad = student.zeros_like();
        let ce = ce_accumulate(&student, &task, &protos, 0.01, &mut expected_grad).unwrap();
        let feats_pre = teacher_feats(&g0, &ref_inputs);
        let inv = 1.0 / 6.0f64;
        let w = vec![inv; 6];
        let stats = kd_accumulate(
            &student,
            &ref_inputs,
            None,
            Some((&feats_pre, &w)),
            &mut expected_grad,
        )
        .unwrap();
        assert!((bd.total - (ce + stats.weighted_sum)).abs() <= 1e-12);
        assert!(grad.max_abs_diff(&expected_grad) <= 1e-12);
    }

    #[test]
    fn total_grad_is_sum_of_components_and_matches_fd() {
        let student = random_params(4, 3, 3, 47);
        let g0 = random_params(4, 3, 3, 48);
        let gprev = random_params(4, 3, 3, 49);
        let protos = random_protos(3, 3, 47);
        let task = LabeledBatch::new(random_inputs(3, 4, 50), vec![0, 1, 2]).unwrap();
        let ref_inputs = random_inputs(4, 4, 51);
        let mut rng = derive_rng(52, &[0xE9]);
        let eta: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
        let plan = DistillBatchPlan::new(
            ref_inputs.clone(),
            eta,
            teacher_feats(&gprev, &ref_inputs),
            teacher_feats(&g0, &ref_inputs),
            9.0,
        )
        .unwrap();
        let (bd, grad) = total_loss_and_grad(&student, &task, &plan, &protos, 0.01).unwrap();
        assert!((bd.total - (bd.ce + bd.kd_dual)).abs() <= 1e-12);

        // Entrywise sum of the two component gradients.
        let (_, ce_grad) = crate::model::ce_loss_and_grad(&student, &task, &protos, 0.01).unwrap();
        let mut kd_grad = student.zeros_like();
        let inv = 1.0 / 4.0f64;
        let wp: Vec<f64> = plan.eta.iter().map(|&e| (plan.lambda * e) * inv).collect();
        let wq: Vec<f64> = plan.eta.iter().map(|&e| (1.0 - e) * inv).collect();
        kd_accumulate(
            &student,
            &plan.ref_inputs,
            Some((&plan.feats_prev, &wp)),
            Some((&plan.feats_pre, &wq)),
            &mut kd_grad,
        )
        .unwrap();
        for i in 0..grad.num_entries() {
            let sum = ce_grad.entry(i) + kd_grad.entry(i);
            assert!((grad.entry(i) - sum).abs() <= 1e-12);
        }

        let fd = fd_grad(
            &student,
            |q| total_loss_and_grad(q, &task, &plan, &protos, 0.01).unwrap().0.total,
            1e-6,
        );
        let err = max_rel_err(&grad, &fd);
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn total_saturated_eta_equals_single_teacher_gradients_exactly() {
        let student = random_params(4, 3, 3, 61);
        let g0 = random_params(4, 3, 3, 62);
        let gprev = random_params(4, 3, 3, 63);
        let protos = random_protos(3, 3, 61);
        let task = LabeledBatch::new(random_inputs(3, 4, 64), vec![0, 1, 2]).unwrap();
        let ref_inputs = random_inputs(5, 4, 65);
        let feats_prev = teacher_feats(&gprev, &ref_inputs);
        let feats_pre = teacher_feats(&g0, &ref_inputs);

        // eta = 1, lambda = 1: exactly CE + mean distance to the fine-tuned teacher.
        let plan = DistillBatchPlan::new(
            ref_inputs.clone(),
            vec![1.0; 5],
            feats_prev.clone(),
            feats_pre.clone(),
            1.0,
        )
        .unwrap();
        let (bd, grad) = total_loss_and_grad(&student, &task, &plan, &protos, 0.01).unwrap();
        let mut expected = student.zeros_like();
        let ce = ce_accumulate(&student, &task, &protos, 0.01, &mut expected).unwrap();
        let (kd, _) = kd_loss_and_grad(&student, &ref_inputs, &feats_prev).unwrap();
        let w = vec![1.0 / 5.0f64; 5];
        kd_accumulate(
            &student,
            &ref_inputs,
            Some((&feats_prev, &w)),
            None,
            &mut expected,
        )
        .unwrap();
        assert_eq!(bd.total, ce + kd);
        assert_eq!(grad, expected);

        // eta = 0: exactly CE + mean distance to the pre-trained teacher.
        let plan0 = DistillBatchPlan::new(
            ref_inputs.clone(),
            vec![0.0; 5],
            feats_prev.clone(),
            feats_pre.clone(),
            9.0,
        )
        .unwrap();
        let (bd0, grad0) = total_loss_and_grad(&student, &task, &plan0, &protos, 0.01).unwrap();
        let (kd0, _) = kd_loss_and_grad(&student, &ref_inputs, &feats_pre).unwrap();
        assert_eq!(bd0.total, ce + kd0);
        let mut expected0 = student.zeros_like();
        ce_accumulate(&student, &task, &protos, 0.01, &mut expected0).unwrap();
        kd_accumulate(
            &student,
            &ref_inputs,
            None,
            Some((&feats_pre, &w)),
            &mut expected0,
        )
        .unwrap();
        assert_eq!(grad0, expected0);
    }
}
