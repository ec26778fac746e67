//! Accuracy evaluation under both incremental regimes and the three
//! sequence metrics (catastrophic forgetting, zero-shot degradation,
//! average accuracy), all reported in percentage points.

use crate::data::{Split, TaskDataset};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::model::{forward, EncoderParams, PrototypeSet};
use serde::{Deserialize, Serialize};

/// Evaluation regime: task-incremental scores within each task's own label
/// subset, class-incremental scores against the merged label space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Mtil,
    Mcil,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mtil" => Ok(Regime::Mtil),
            "mcil" => Ok(Regime::Mcil),
            other => Err(Error::config(format!("unknown regime '{other}'"))),
        }
    }
}

/// Accuracy of each stage's model on each task: row 0 is the pre-trained
/// model, row k the model after stage k; column j the j-th task of the
/// sequence. Entries are fractions in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    values: Vec<f64>,
    num_tasks: usize,
}

impl AccuracyMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::shape("accuracy matrix needs at least one row"));
        }
        let num_tasks = rows.len() - 1;
        if num_tasks == 0 {
            return Err(Error::shape("accuracy matrix needs K >= 1 tasks"));
        }
        let mut values = Vec::with_capacity(rows.len() * num_tasks);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != num_tasks {
                return Err(Error::shape(format!(
                    "row {i} has {} entries, expected {num_tasks}",
                    row.len()
                )));
            }
            for &v in row {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::param(format!(
                        "accuracy entry {v} outside [0, 1]"
                    )));
                }
            }
            values.extend_from_slice(row);
        }
        Ok(AccuracyMatrix { values, num_tasks })
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn num_rows(&self) -> usize {
        self.num_tasks + 1
    }

    /// Entry for the model after `stage` (0 = pre-trained) on task at
    /// 0-based sequence position `task`.
    pub fn get(&self, stage: usize, task: usize) -> f64 {
        self.values[stage * self.num_tasks + task]
    }

    pub fn row(&self, stage: usize) -> &[f64] {
        &self.values[stage * self.num_tasks..(stage + 1) * self.num_tasks]
    }
}

/// Fraction of test-split samples whose argmax class matches the label.
/// Under MTIL the prototype set is restricted to the task's own labels;
/// under MCIL the full (merged) set is used. Argmax ties resolve to the
/// lowest label id.
pub fn accuracy(
    params: &EncoderParams,
    data: &TaskDataset,
    protos: &PrototypeSet,
    tau: f64,
    regime: Regime,
) -> Result<f64> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidTemperature(tau));
    }
    let test = data.indices(Split::Test);
    if test.is_empty() {
        return Err(Error::EmptyInput("dataset has no test split".into()));
    }
    let restricted;
    let eval_protos = match regime {
        Regime::Mtil => {
            restricted = protos.subset(&data.label_ids)?;
            &restricted
        }
        Regime::Mcil => protos,
    };
    let mut correct = 0usize;
    for &i in &test {
        let cache = forward(params, data.inputs.row(i))?;
        let mut best_label = None;
        let mut best_score = f64::NEG_INFINITY;
        for j in 0..eval_protos.len() {
            let score = dot(&cache.feature, eval_protos.row(j));
            let label = eval_protos.label_ids()[j];
            let better = score > best_score
                || (score == best_score && best_label.is_none_or(|b| label < b));
            if better {
                best_score = score;
                best_label = Some(label);
            }
        }
        if best_label == Some(data.labels[i]) {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Catastrophic forgetting: for each task except the last, the largest drop
/// from its just-fine-tuned accuracy over the remaining stages (floored at
/// zero), averaged and reported in percentage points.
pub fn forgetting(a: &AccuracyMatrix) -> Result<f64> {
    let k = a.num_tasks();
    if k < 2 {
        return Err(Error::UndefinedMetric(
            "forgetting needs at least 2 tasks".into(),
        ));
    }
    let mut sum = 0.0;
    for j in 0..k - 1 {
        let p = j + 1; // stage right after training task j
        let peak = a.get(p, j);
        let mut drop: f64 = 0.0;
        for i in p..=k {
            drop = drop.max(peak - a.get(i, j));
        }
        sum += drop;
    }
    Ok(100.0 * sum / (k - 1) as f64)
}

/// Zero-shot degradation: for each task except the first, the largest drop
/// from the pre-trained accuracy over the stages before that task is
/// trained (floored at zero), averaged and reported in percentage points.
pub fn zs_degradation(a: &AccuracyMatrix) -> Result<f64> {
    let k = a.num_tasks();
    if k < 2 {
        return Err(Error::UndefinedMetric(
            "zero-shot degradation needs at least 2 tasks".into(),
        ));
    }
    let mut sum = 0.0;
    for j in 1..k {
        let p = j + 1;
        let base = a.get(0, j);
        let mut drop: f64 = 0.0;
        for i in 1..p {
            drop = drop.max(base - a.get(i, j));
        }
        sum += drop;
    }
    Ok(100.0 * sum / (k - 1) as f64)
}

/// Mean of the final row, in percentage points.
pub fn avg_accuracy(a: &AccuracyMatrix) -> f64 {
    let last = a.row(a.num_tasks());
    let mut sum = 0.0;
    for &v in last {
        sum += v;
    }
    100.0 * sum / a.num_tasks() as f64
}

/// The three metrics of one sequence, in percentage points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricTriple {
    pub forgetting: f64,
    pub degradation: f64,
    pub avg_accuracy: f64,
}

impl MetricTriple {
    pub fn from_matrix(a: &AccuracyMatrix) -> Result<Self> {
        Ok(MetricTriple {
            forgetting: forgetting(a)?,
            degradation: zs_degradation(a)?,
            avg_accuracy: avg_accuracy(a),
        })
    }
}

/// Arithmetic mean of per-sequence metric triples.
pub fn aggregate(results: &[MetricTriple]) -> Result<MetricTriple> {
    if results.is_empty() {
        return Err(Error::EmptyInput("no metric triples to aggregate".into()));
    }
    let n = results.len() as f64;
    let mut f = 0.0;
    let mut d = 0.0;
    let mut a = 0.0;
    for r in results {
        f += r.forgetting;
        d += r.degradation;
        a += r.avg_accuracy;
    }
    Ok(MetricTriple {
        forgetting: f / n,
        degradation: d / n,
        avg_accuracy: a / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_domain, DomainSpec};
    use crate::linalg::Matrix;
    use crate::seeds::derive_rng;
    use rand::Rng;

    fn pct(rows: &[Vec<f64>]) -> AccuracyMatrix {
        let scaled: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|v| v / 100.0).collect())
            .collect();
        AccuracyMatrix::new(scaled).unwrap()
    }

    fn worked_example() -> AccuracyMatrix {
        pct(&[
            vec![50.0, 60.0, 70.0],
            vec![80.0, 55.0, 68.0],
            vec![75.0, 85.0, 65.0],
            vec![72.0, 83.0, 90.0],
        ])
    }

    #[test]
    fn matrix_shape_validation() {
        assert!(AccuracyMatrix::new(vec![vec![0.5, 0.5]]).is_err());
        assert!(AccuracyMatrix::new(vec![vec![0.5], vec![0.5, 0.5]]).is_err());
        assert!(AccuracyMatrix::new(vec![vec![1.5], vec![0.5]]).is_err());
        let ok = AccuracyMatrix::new(vec![vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5, 0.6]]).unwrap();
        assert_eq!(ok.num_tasks(), 2);
        assert_eq!(ok.num_rows(), 3);
        assert_eq!(ok.get(2, 1), 0.6);
    }

    #[test]
    fn forgetting_worked_example() {
        let a = worked_example();
        assert!((forgetting(&a).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn degradation_worked_example() {
        let a = worked_example();
        assert!((zs_degradation(&a).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn avg_accuracy_worked_example() {
        let a = worked_example();
        assert!((avg_accuracy(&a) - 81.66666666666667).abs() < 1e-9);
    }

    #[test]
    fn constant_matrix_has_zero_drops() {
        let a = pct(&vec![vec![60.0; 3]; 4]);
        assert_eq!(forgetting(&a).unwrap(), 0.0);
        assert_eq!(zs_degradation(&a).unwrap(), 0.0);
    }

    #[test]
    fn nondecreasing_columns_floor_forgetting_at_zero() {
        let a = pct(&[
            vec![10.0, 10.0],
            vec![50.0, 20.0],
            vec![60.0, 70.0],
        ]);
        assert_eq!(forgetting(&a).unwrap(), 0.0);
    }

    #[test]
    fn degradation_zero_when_rows_match_baseline() {
        let a = pct(&[
            vec![40.0, 50.0, 60.0],
            vec![90.0, 50.0, 60.0],
            vec![85.0, 92.0, 60.0],
            vec![80.0, 88.0, 95.0],
        ]);
        assert_eq!(zs_degradation(&a).unwrap(), 0.0);
    }

    #[test]
    fn metrics_reject_single_task() {
        let a = AccuracyMatrix::new(vec![vec![0.5], vec![0.9]]).unwrap();
        assert!(matches!(forgetting(&a), Err(Error::UndefinedMetric(_))));
        assert!(matches!(zs_degradation(&a), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn avg_accuracy_is_column_permutation_invariant() {
        let a = pct(&[vec![10.0, 20.0, 30.0], vec![40.0, 50.0, 60.0], vec![70.0, 80.0, 90.0], vec![72.0, 83.0, 90.0]]);
        let b = pct(&[vec![30.0, 10.0, 20.0], vec![60.0, 40.0, 50.0], vec![90.0, 70.0, 80.0], vec![90.0, 72.0, 83.0]]);
        assert!((avg_accuracy(&a) - avg_accuracy(&b)).abs() < 1e-12);
    }

    #[test]
    fn forgetting_ignores_pre_training_region() {
        // Perturbing entries at stages before a task's own stage must not
        // change forgetting; perturbing later stages must not change
        // degradation.
        let base = worked_example();
        let forg = forgetting(&base).unwrap();
        let deg = zs_degradation(&base).unwrap();

        let mut rows: Vec<Vec<f64>> = (0..base.num_rows())
            .map(|i| base.row(i).to_vec())
            .collect();
        rows[0][0] = 0.01; // row 0 of a task is never used by forgetting
        rows[1][2] = 0.01; // stage 1 < p for task 3: forgetting unaffected
        let perturbed = AccuracyMatrix::new(rows).unwrap();
        assert_eq!(forgetting(&perturbed).unwrap(), forg);

        let mut rows: Vec<Vec<f64>> = (0..base.num_rows())
            .map(|i| base.row(i).to_vec())
            .collect();
        rows[3][1] = 0.01; // stage 3 >= p for task 2: degradation unaffected
        rows[2][1] = 0.80; // stage 2 == p for task 2: also unaffected
        let perturbed = AccuracyMatrix::new(rows).unwrap();
        assert_eq!(zs_degradation(&perturbed).unwrap(), deg);
    }

    #[test]
    fn aggregate_matches_hand_arithmetic() {
        let a = MetricTriple {
            forgetting: 4.0,
            degradation: 2.0,
            avg_accuracy: 80.0,
        };
        let b = MetricTriple {
            forgetting: 6.0,
            degradation: 4.0,
            avg_accuracy: 90.0,
        };
        let m = aggregate(&[a, b]).unwrap();
        assert_eq!(m.forgetting, 5.0);
        assert_eq!(m.degradation, 3.0);
        assert_eq!(m.avg_accuracy, 85.0);
        let single = aggregate(&[a]).unwrap();
        assert_eq!(single, a);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn accuracy_perfect_with_class_mean_prototypes() {
        // Prototypes at the normalized class-conditional mean feature of a
        // well-separated domain classify it perfectly under the identity
        // encoder analog: use a random encoder and build prototypes from its
        // own per-class mean features.
        let spec = DomainSpec {
            domain_id: 2,
            num_classes: 3,
            samples_per_class: 30,
            center_scale: 10.0,
            noise_sigma: 0.5,
            input_dim: 8,
            seed: 21,
        };
        let data = gen_domain(&spec).unwrap();
        let mut rng = derive_rng(77, &[0xAC]);
        let enc = EncoderParams::random_init(8, 16, 6, &mut rng);
        let mut rows = Vec::new();
        for &lid in &data.label_ids {
            let mut mean = vec![0.0; 6];
            for i in 0..data.len() {
                if data.labels[i] == lid {
                    let f = crate::model::encode(&enc, data.inputs.row(i)).unwrap();
                    for (m, v) in mean.iter_mut().zip(f.values()) {
                        *m += v;
                    }
                }
            }
            let norm = crate::linalg::norm(&mean);
            rows.push(mean.iter().map(|v| v / norm).collect::<Vec<f64>>());
        }
        let protos = PrototypeSet::new(
            Matrix::from_rows(&rows).unwrap(),
            data.label_ids.clone(),
        )
        .unwrap();
        let acc = accuracy(&enc, &data, &protos, 0.01, Regime::Mtil).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn accuracy_single_prototype_is_trivially_one() {
        let spec = DomainSpec {
            domain_id: 3,
            num_classes: 2,
            samples_per_class: 10,
            center_scale: 5.0,
            noise_sigma: 1.0,
            input_dim: 4,
            seed: 5,
        };
        let data = gen_domain(&spec).unwrap();
        // Collapse to one class analytically: restrict the dataset to one label.
        let keep: Vec<usize> = (0..data.len())
            .filter(|&i| data.labels[i] == data.label_ids[0])
            .collect();
        let inputs = data.inputs.gather_rows(&keep);
        let labels = vec![data.label_ids[0]; keep.len()];
        let split: Vec<_> = keep.iter().map(|&i| data.split[i]).collect();
        let single =
            TaskDataset::new(inputs, labels, vec![data.label_ids[0]], split).unwrap();
        let mut rng = derive_rng(6, &[0xAD]);
        let enc = EncoderParams::random_init(4, 8, 5, &mut rng);
        let protos = PrototypeSet::random(vec![data.label_ids[0]], 5, &mut rng).unwrap();
        let acc = accuracy(&enc, &single, &protos, 0.01, Regime::Mtil).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn accuracy_invariant_under_label_relabeling() {
        let spec = DomainSpec {
            domain_id: 4,
            num_classes: 3,
            samples_per_class: 20,
            center_scale: 4.0,
            noise_sigma: 1.0,
            input_dim: 6,
            seed: 31,
        };
        let data = gen_domain(&spec).unwrap();
        let mut rng = derive_rng(8, &[0xAE]);
        let enc = EncoderParams::random_init(6, 10, 5, &mut rng);
        let protos = PrototypeSet::random(data.label_ids.clone(), 5, &mut rng).unwrap();
        let base = accuracy(&enc, &data, &protos, 0.01, Regime::Mtil).unwrap();

        // Apply a bijection to labels and prototype ids consistently.
        let map = |l: u32| l + 50_000;
        let relabeled = TaskDataset::new(
            data.inputs.clone(),
            data.labels.iter().map(|&l| map(l)).collect(),
            data.label_ids.iter().map(|&l| map(l)).collect(),
            data.split.clone(),
        )
        .unwrap();
        let rows: Vec<Vec<f64>> = (0..protos.len()).map(|i| protos.row(i).to_vec()).collect();
        let reprotos = PrototypeSet::new(
            Matrix::from_rows(&rows).unwrap(),
            protos.label_ids().iter().map(|&l| map(l)).collect(),
        )
        .unwrap();
        let relabeled_acc =
            accuracy(&enc, &relabeled, &reprotos, 0.01, Regime::Mtil).unwrap();
        assert_eq!(base, relabeled_acc);
    }

    #[test]
    fn accuracy_argmax_tie_breaks_to_lowest_label() {
        // Two identical prototypes: every score ties, the lower label wins.
        let rows = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let protos =
            PrototypeSet::new(Matrix::from_rows(&rows).unwrap(), vec![5, 9]).unwrap();
        let mut rng = derive_rng(9, &[0xAF]);
        let enc = EncoderParams::random_init(3, 4, 2, &mut rng);
        let inputs = Matrix::from_rows(&[vec![0.1, 0.2, 0.3], vec![0.4, 0.5, 0.6]]).unwrap();
        let data = TaskDataset::new(
            inputs,
            vec![5, 5],
            vec![5, 9],
            vec![Split::Train, Split::Test],
        )
        .unwrap();
        assert_eq!(accuracy(&enc, &data, &protos, 0.01, Regime::Mtil).unwrap(), 1.0);
        let data_9 = TaskDataset::new(
            data.inputs.clone(),
            vec![9, 9],
            vec![5, 9],
            vec![Split::Train, Split::Test],
        )
        .unwrap();
        assert_eq!(accuracy(&enc, &data_9, &protos, 0.01, Regime::Mtil).unwrap(), 0.0);
    }

    #[test]
    fn brute_force_oracle_agreement_on_random_matrices() {
        // Independent double-loop implementations of both drop metrics.
        fn forgetting_oracle(a: &AccuracyMatrix) -> f64 {
            let k = a.num_tasks();
            let mut drops = Vec::new();
            for j in 0..k - 1 {
                let mut worst = 0.0f64;
                for i in (j + 1)..=k {
                    let drop = a.get(j + 1, j) - a.get(i, j);
                    if drop > worst {
                        worst = drop;
                    }
                }
                drops.push(worst);
            }
            let mut s = 0.0;
            for d in &drops {
                s += d;
            }
            100.0 * s / drops.len() as f64
        }
        fn degradation_oracle(a: &AccuracyMatrix) -> f64 {
            let k = a.num_tasks();
            let mut drops = Vec::new();
            for j in 1..k {
                let mut worst = 0.0f64;
                for i in 1..(j + 1) {
                    let drop = a.get(0, j) - a.get(i, j);
                    if drop > worst {
                        worst = drop;
                    }
                }
                drops.push(worst);
            }
            let mut s = 0.0;
            for d in &drops {
                s += d;
            }
            100.0 * s / drops.len() as f64
        }

        let mut rng = derive_rng(123, &[0xB0]);
        for _ in 0..100 {
            let k = rng.random_range(2..=6);
            let rows: Vec<Vec<f64>> = (0..=k)
                .map(|_| (0..k).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect();
            let a = AccuracyMatrix::new(rows).unwrap();
            assert_eq!(forgetting(&a).unwrap(), forgetting_oracle(&a));
            assert_eq!(zs_degradation(&a).unwrap(), degradation_oracle(&a));
        }
    }
}
