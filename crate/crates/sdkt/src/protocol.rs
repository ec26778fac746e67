//! Experiment protocol: rotated task sequences, the per-stage trainer with
//! frozen dual teachers, baseline methods, and the full-sequence runner
//! that produces the accuracy matrix.

use crate::data::{
    gen_domain, gen_reference_pool, load_feature_file, sample_reference, DomainId, DomainSpec,
    LoadedFeatures, PoolComponent, PoolSource, ReferencePool, Split, TaskDataset,
};
use crate::distillation::{
    kd_accumulate, total_loss_and_grad, DistillBatchPlan, LossBreakdown,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::{accuracy, AccuracyMatrix, Regime};
use crate::model::{
    ce_accumulate, ce_loss_and_grad, encode, EncoderParams, FeatureVec, LabelId, LabeledBatch,
    PrototypeSet,
};
use crate::optimizer::{adamw_step, cosine_lr, OptimizerConfig, OptimizerState, ScheduleSpec};
use crate::seeds::{derive_rng, derive_seed};
use crate::selection::{discrepancy, DiscrepancyRecord, SelectionParams};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;

const TAG_PROTO: u64 = 1;
const TAG_INIT: u64 = 2;
const TAG_PRETRAIN_DATA: u64 = 3;
const TAG_PRETRAIN_SHUFFLE: u64 = 4;
const TAG_DOMAIN_DATA: u64 = 5;
const TAG_POOL: u64 = 6;
const TAG_STAGE_TASK: u64 = 7;
const TAG_STAGE_REF: u64 = 8;

/// Training method: the dual-teacher scheme or one of the baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ours,
    ContinualFt,
    DistillPre,
    DistillPrev,
    Lwf,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ours" => Ok(Method::Ours),
            "continual_ft" => Ok(Method::ContinualFt),
            "distill_pre" => Ok(Method::DistillPre),
            "distill_prev" => Ok(Method::DistillPrev),
            "lwf" => Ok(Method::Lwf),
            other => Err(Error::config(format!("unknown method '{other}'"))),
        }
    }
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::ContinualFt => "continual_ft",
            Method::DistillPre => "distill_pre",
            Method::DistillPrev => "distill_prev",
            Method::Lwf => "lwf",
        }
    }

    fn needs_reference_pool(&self) -> bool {
        matches!(self, Method::DistillPre | Method::DistillPrev)
    }

    fn uses_reference_pool(&self) -> bool {
        matches!(self, Method::Ours | Method::DistillPre | Method::DistillPrev)
    }
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Mtil => "mtil",
            Regime::Mcil => "mcil",
        }
    }
}

/// One ordering of the configured domains; `index` is 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceSpec {
    pub index: usize,
    pub task_order: Vec<DomainId>,
}

/// All K left-rotations of the base order: sequence i starts at the i-th
/// task and wraps around.
pub fn make_sequences(base_order: &[DomainId]) -> Vec<SequenceSpec> {
    let k = base_order.len();
    (0..k)
        .map(|shift| SequenceSpec {
            index: shift + 1,
            task_order: (0..k).map(|j| base_order[(shift + j) % k]).collect(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
}

/// Pre-training phase that produces the frozen pre-trained encoder: plain
/// cross-entropy over a noisier redraw of every domain, so the starting
/// model is competent but not saturated on each task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub samples_per_class: usize,
    /// Multiplier on each domain's noise_sigma for the pre-training draws.
    pub noise_mult: f64,
    pub epochs: usize,
    pub base_lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    pub id: DomainId,
    /// Precomputed-feature file; when set, the synthetic fields are unused.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_per_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl DomainConfig {
    fn base_spec(&self, input_dim: usize) -> Result<DomainSpec> {
        let field = |name: &str, v: Option<f64>| {
            v.ok_or_else(|| Error::config(format!("domain {}: missing {name}", self.id)))
        };
        let spec = DomainSpec {
            domain_id: self.id,
            num_classes: self
                .num_classes
                .ok_or_else(|| Error::config(format!("domain {}: missing num_classes", self.id)))?,
            samples_per_class: self.samples_per_class.ok_or_else(|| {
                Error::config(format!("domain {}: missing samples_per_class", self.id))
            })?,
            center_scale: field("center_scale", self.center_scale)?,
            noise_sigma: field("noise_sigma", self.noise_sigma)?,
            input_dim,
            seed: self
                .seed
                .ok_or_else(|| Error::config(format!("domain {}: missing seed", self.id)))?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Synthetic spec with the run seed folded into the data seed, so each
    /// run seed draws fresh domains with the same structure.
    fn effective_spec(&self, input_dim: usize, run_seed: u64) -> Result<DomainSpec> {
        let mut spec = self.base_spec(input_dim)?;
        spec.seed = derive_seed(run_seed, &[TAG_DOMAIN_DATA, spec.seed]);
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolComponentConfig {
    pub weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_id: Option<DomainId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background_sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub size: usize,
    pub seed: u64,
    /// Precomputed-feature file; when set, components are unused.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(default)]
    pub component: Vec<PoolComponentConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSection {
    pub method: Method,
    pub regime: Regime,
    pub seeds: Vec<u64>,
    pub epochs_per_stage: usize,
    pub task_batch: usize,
    pub ref_batch: usize,
    pub tau: f64,
    pub lambda: f64,
    pub base_order: Vec<DomainId>,
}

/// Full declarative description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub encoder: EncoderConfig,
    pub selection: SelectionParams,
    pub optimizer: OptimizerConfig,
    pub pretrain: PretrainConfig,
    #[serde(rename = "domain")]
    pub domains: Vec<DomainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_pool: Option<PoolConfig>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let enc = &self.encoder;
        if enc.input_dim == 0 || enc.hidden_dim == 0 || enc.feature_dim == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        let exp = &self.experiment;
        if exp.seeds.is_empty() {
            return Err(Error::config("experiment.seeds must be nonempty"));
        }
        if exp.task_batch == 0 {
            return Err(Error::config("experiment.task_batch must be at least 1"));
        }
        if !(exp.tau > 0.0) || !exp.tau.is_finite() {
            return Err(Error::config(format!("experiment.tau must be positive, got {}", exp.tau)));
        }
        if !(exp.lambda >= 0.0) || !exp.lambda.is_finite() {
            return Err(Error::config(format!(
                "experiment.lambda must be nonnegative, got {}",
                exp.lambda
            )));
        }
        if self.domains.is_empty() {
            return Err(Error::config("at least one [[domain]] is required"));
        }
        let mut ids: Vec<DomainId> = self.domains.iter().map(|d| d.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.domains.len() {
            return Err(Error::config("duplicate domain ids"));
        }
        if exp.base_order.is_empty() {
            return Err(Error::config("experiment.base_order must be nonempty"));
        }
        for id in &exp.base_order {
            if !self.domains.iter().any(|d| d.id == *id) {
                return Err(Error::config(format!(
                    "experiment.base_order references undefined domain {id}"
                )));
            }
        }
        let mut order = exp.base_order.clone();
        order.sort_unstable();
        order.dedup();
        if order.len() != exp.base_order.len() {
            return Err(Error::config("experiment.base_order repeats a domain"));
        }
        for d in &self.domains {
            if d.file.is_none() {
                d.base_spec(enc.input_dim)?;
            }
        }
        self.selection.validate().map_err(|e| Error::config(e.to_string()))?;
        self.optimizer.validate().map_err(|e| Error::config(e.to_string()))?;
        let pre = &self.pretrain;
        if pre.samples_per_class == 0 {
            return Err(Error::config("pretrain.samples_per_class must be at least 1"));
        }
        if !(pre.noise_mult > 0.0) || !pre.noise_mult.is_finite() {
            return Err(Error::config("pretrain.noise_mult must be positive"));
        }
        if !(pre.base_lr > 0.0) || !pre.base_lr.is_finite() {
            return Err(Error::config("pretrain.base_lr must be positive"));
        }
        if let Some(pool) = &self.reference_pool {
            if pool.size == 0 {
                return Err(Error::config("reference_pool.size must be at least 1"));
            }
            if pool.file.is_none() {
                if pool.component.is_empty() {
                    return Err(Error::config(
                        "reference_pool needs a file or at least one component",
                    ));
                }
                for (i, c) in pool.component.iter().enumerate() {
                    match (c.domain_id, c.background_sigma) {
                        (Some(_), Some(_)) => {
                            return Err(Error::config(format!(
                                "reference_pool.component {i}: set domain_id or background_sigma, not both"
                            )))
                        }
                        (None, None) => {
                            return Err(Error::config(format!(
                                "reference_pool.component {i}: needs domain_id or background_sigma"
                            )))
                        }
                        (Some(id), None) => {
                            if !self.domains.iter().any(|d| d.id == id) {
                                return Err(Error::config(format!(
                                    "reference_pool.component {i} references undefined domain {id}"
                                )));
                            }
                        }
                        (None, Some(s)) => {
                            if !(s > 0.0) || !s.is_finite() {
                                return Err(Error::config(format!(
                                    "reference_pool.component {i}: background_sigma must be positive"
                                )));
                            }
                        }
                    }
                    if !(c.weight >= 0.0) || !c.weight.is_finite() {
                        return Err(Error::config(format!(
                            "reference_pool.component {i}: weight must be nonnegative"
                        )));
                    }
                }
                if !(pool.component.iter().map(|c| c.weight).sum::<f64>() > 0.0) {
                    return Err(Error::config(
                        "reference_pool component weights must sum to a positive value",
                    ));
                }
            }
        }
        let method = exp.method;
        if method.needs_reference_pool() {
            if self.reference_pool.is_none() {
                return Err(Error::config(format!(
                    "method {} requires a [reference_pool] section",
                    method.as_str()
                )));
            }
            if exp.ref_batch == 0 {
                return Err(Error::config(format!(
                    "method {} requires experiment.ref_batch >= 1",
                    method.as_str()
                )));
            }
        }
        if method == Method::Ours && exp.ref_batch > 0 && self.reference_pool.is_none() {
            return Err(Error::config(
                "method ours with ref_batch >= 1 requires a [reference_pool] section",
            ));
        }
        Ok(())
    }

    /// The standard synthetic experiment: four well-separated domains, a
    /// mixed reference pool with a broad background component, dual-teacher
    /// training with the default selection parameters.
    pub fn standard_synthetic() -> Self {
        let domains = (1..=4u32)
            .map(|id| DomainConfig {
                id,
                file: None,
                num_classes: Some(5),
                samples_per_class: Some(50),
                center_scale: Some(5.0),
                noise_sigma: Some(1.0),
                seed: Some(100 + id as u64),
            })
            .collect();
        let mut component: Vec<PoolComponentConfig> = (1..=4u32)
            .map(|id| PoolComponentConfig {
                weight: 0.15,
                domain_id: Some(id),
                background_sigma: None,
            })
            .collect();
        component.push(PoolComponentConfig {
            weight: 0.4,
            domain_id: None,
            background_sigma: Some(5.0),
        });
        ExperimentConfig {
            experiment: ExperimentSection {
                method: Method::Ours,
                regime: Regime::Mtil,
                seeds: vec![1],
                epochs_per_stage: 10,
                task_batch: 64,
                ref_batch: 64,
                tau: 0.01,
                lambda: 9.0,
                base_order: vec![1, 2, 3, 4],
            },
            encoder: EncoderConfig {
                input_dim: 16,
                hidden_dim: 32,
                feature_dim: 8,
            },
            selection: SelectionParams::default(),
            optimizer: OptimizerConfig {
                base_lr: 5e-3,
                ..OptimizerConfig::default()
            },
            pretrain: PretrainConfig {
                samples_per_class: 40,
                noise_mult: 2.0,
                epochs: 12,
                base_lr: 1e-3,
            },
            domains,
            reference_pool: Some(PoolConfig {
                size: 2000,
                seed: 707,
                file: None,
                component,
            }),
        }
    }
}

/// Per-stage cache of both frozen teachers' features and the selection
/// score over the whole reference pool. Built once at stage start; the
/// teachers do not change within a stage.
pub struct ReferenceCache {
    pub feats_prev: Vec<FeatureVec>,
    pub feats_pre: Vec<FeatureVec>,
    pub eta: Vec<f64>,
    pub records: Vec<DiscrepancyRecord>,
}

pub fn build_reference_cache(
    g_prev: &EncoderParams,
    g0: &EncoderParams,
    pool: &ReferencePool,
    sel: &SelectionParams,
) -> Result<ReferenceCache> {
    let m = pool.len();
    let mut feats_prev = Vec::with_capacity(m);
    let mut feats_pre = Vec::with_capacity(m);
    let mut eta = Vec::with_capacity(m);
    let mut records = Vec::with_capacity(m);
    for i in 0..m {
        let x = pool.inputs.row(i);
        let fp = encode(g_prev, x)?;
        let f0 = encode(g0, x)?;
        let d = discrepancy(&fp, &f0)?;
        let rec = DiscrepancyRecord::new(pool.sample_ids[i].clone(), d, sel)?;
        eta.push(rec.eta);
        records.push(rec);
        feats_prev.push(fp);
        feats_pre.push(f0);
    }
    Ok(ReferenceCache {
        feats_prev,
        feats_pre,
        eta,
        records,
    })
}

/// Loss and gradient of one optimization step under the given method.
///
/// `ref_plan` carries the reference batch for the distillation methods; the
/// dual method with no plan degenerates to plain fine-tuning. `lwf_feats`
/// are the previous teacher's features on the task batch.
pub fn method_step_loss(
    method: Method,
    student: &EncoderParams,
    task_batch: &LabeledBatch,
    protos: &PrototypeSet,
    tau: f64,
    ref_plan: Option<&DistillBatchPlan>,
    lwf_feats: Option<&[FeatureVec]>,
) -> Result<(LossBreakdown, EncoderParams)> {
    match method {
        Method::ContinualFt => {
            let (ce, grad) = ce_loss_and_grad(student, task_batch, protos, tau)?;
            Ok((LossBreakdown::ce_only(ce), grad))
        }
        Method::Ours => match ref_plan {
            Some(plan) => total_loss_and_grad(student, task_batch, plan, protos, tau),
            None => {
                let (ce, grad) = ce_loss_and_grad(student, task_batch, protos, tau)?;
                Ok((LossBreakdown::ce_only(ce), grad))
            }
        },
        Method::DistillPre | Method::DistillPrev => {
            let plan = ref_plan.ok_or_else(|| {
                Error::param(format!("method {} needs a reference batch", method.as_str()))
            })?;
            let mut grad = student.zeros_like();
            let ce = ce_accumulate(student, task_batch, protos, tau, &mut grad)?;
            let b = plan.len();
            if b == 0 {
                return Err(Error::EmptyInput("reference batch is empty".into()));
            }
            let weights = vec![1.0 / b as f64; b];
            let (prev_slot, pre_slot) = match method {
                Method::DistillPrev => (Some((plan.feats_prev.as_slice(), weights.as_slice())), None),
                _ => (None, Some((plan.feats_pre.as_slice(), weights.as_slice()))),
            };
            let stats = kd_accumulate(student, &plan.ref_inputs, prev_slot, pre_slot, &mut grad)?;
            let inv_b = 1.0 / b as f64;
            Ok((
                LossBreakdown {
                    total: ce + stats.weighted_sum,
                    ce,
                    kd_dual: stats.weighted_sum,
                    kd_prev: stats.prev_raw_sum * inv_b,
                    kd_pre: stats.pre_raw_sum * inv_b,
                },
                grad,
            ))
        }
        Method::Lwf => {
            let feats = lwf_feats.ok_or_else(|| {
                Error::param("method lwf needs previous-teacher features on the task batch")
            })?;
            let mut grad = student.zeros_like();
            let ce = ce_accumulate(student, task_batch, protos, tau, &mut grad)?;
            let b = task_batch.len();
            let weights = vec![1.0 / b as f64; b];
            let stats = kd_accumulate(
                student,
                &task_batch.inputs,
                Some((feats, &weights)),
                None,
                &mut grad,
            )?;
            Ok((
                LossBreakdown {
                    total: ce + stats.weighted_sum,
                    ce,
                    kd_dual: stats.weighted_sum,
                    kd_prev: stats.prev_raw_sum / b as f64,
                    kd_pre: 0.0,
                },
                grad,
            ))
        }
    }
}

/// One logged optimization step.
#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub stage: usize,
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_kd_prev: f64,
    pub loss_kd_pre: f64,
    pub eta_mean: f64,
}

/// Output of one fine-tuning stage.
pub struct StageResult {
    pub stage_index: usize,
    pub params: EncoderParams,
    pub traces: Vec<TraceRow>,
    /// Selection records over the whole pool at stage start (empty without a pool).
    pub eta_records: Vec<DiscrepancyRecord>,
}

/// Frozen inputs of one stage.
pub struct StageInputs<'a> {
    pub g_prev: &'a EncoderParams,
    pub g0: &'a EncoderParams,
    pub task: &'a TaskDataset,
    pub pool: Option<&'a ReferencePool>,
    pub protos: &'a PrototypeSet,
}

/// Runs one fine-tuning stage: freezes both teachers, initializes the
/// student from the previous model, precomputes teacher features and
/// selection scores over the pool, then trains for the configured epochs
/// with a cosine schedule. Deterministic given config and seeds.
pub fn train_stage(
    inp: &StageInputs,
    cfg: &ExperimentConfig,
    run_seed: u64,
    seq_index: usize,
    stage_index: usize,
) -> Result<StageResult> {
    let exp = &cfg.experiment;
    let method = exp.method;
    let mut student = inp.g_prev.clone();

    let cache = match inp.pool {
        Some(pool) => Some(build_reference_cache(inp.g_prev, inp.g0, pool, &cfg.selection)?),
        None => None,
    };
    let eta_records = cache.as_ref().map(|c| c.records.clone()).unwrap_or_default();

    // CE during a stage runs over the current task's own label space.
    let task_protos = inp.protos.subset(&inp.task.label_ids)?;

    let train_idx = inp.task.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::EmptyInput("task has no train split".into()));
    }
    let steps_per_epoch = train_idx.len().div_ceil(exp.task_batch);
    let total_steps = exp.epochs_per_stage * steps_per_epoch;
    let mut traces = Vec::with_capacity(total_steps);
    if total_steps == 0 {
        return Ok(StageResult {
            stage_index,
            params: student,
            traces,
            eta_records,
        });
    }

    let schedule = ScheduleSpec::new(cfg.optimizer.base_lr, total_steps as u64)?;
    let mut opt = OptimizerState::new(&student, &cfg.optimizer)?;
    let mut task_rng = derive_rng(run_seed, &[TAG_STAGE_TASK, seq_index as u64, stage_index as u64]);
    let mut ref_rng = derive_rng(run_seed, &[TAG_STAGE_REF, seq_index as u64, stage_index as u64]);

    let draw_ref = method.uses_reference_pool() && exp.ref_batch > 0 && inp.pool.is_some();
    let mut step = 0usize;
    for _epoch in 0..exp.epochs_per_stage {
        let mut order = train_idx.clone();
        order.shuffle(&mut task_rng);
        for chunk in order.chunks(exp.task_batch) {
            let batch = inp.task.batch(chunk)?;
            let lr = cosine_lr(step as u64, &schedule)?;

            let mut plan_storage = None;
            let mut eta_mean = 0.0;
            if draw_ref {
                let pool = inp.pool.unwrap();
                let cache = cache.as_ref().unwrap();
                let rb = sample_reference(pool, exp.ref_batch, &mut ref_rng)?;
                let eta: Vec<f64> = rb.indices.iter().map(|&i| cache.eta[i]).collect();
                let feats_prev: Vec<FeatureVec> =
                    rb.indices.iter().map(|&i| cache.feats_prev[i].clone()).collect();
                let feats_pre: Vec<FeatureVec> =
                    rb.indices.iter().map(|&i| cache.feats_pre[i].clone()).collect();
                let mut s = 0.0;
                for &e in &eta {
                    s += e;
                }
                eta_mean = s / eta.len() as f64;
                plan_storage = Some(DistillBatchPlan::new(
                    rb.inputs,
                    eta,
                    feats_prev,
                    feats_pre,
                    exp.lambda,
                )?);
            }

            let lwf_storage = if method == Method::Lwf {
                let feats: Result<Vec<FeatureVec>> = (0..batch.len())
                    .map(|i| encode(inp.g_prev, batch.inputs.row(i)))
                    .collect();
                Some(feats?)
            } else {
                None
            };

            // Numeric failures inside a training step mean the run diverged.
            let (breakdown, grad) = method_step_loss(
                method,
                &student,
                &batch,
                &task_protos,
                exp.tau,
                plan_storage.as_ref(),
                lwf_storage.as_deref(),
            )
            .map_err(|e| match e {
                Error::Numeric(_) | Error::DegenerateFeature { .. } => Error::Divergence {
                    stage: stage_index,
                    step,
                    location: String::new(),
                },
                other => other,
            })?;
            if !breakdown.total.is_finite() {
                return Err(Error::Divergence {
                    stage: stage_index,
                    step,
                    location: String::new(),
                });
            }
            let (next, next_opt) = adamw_step(opt, student, &grad, lr).map_err(|e| match e {
                Error::Numeric(_) => Error::Divergence {
                    stage: stage_index,
                    step,
                    location: String::new(),
                },
                other => other,
            })?;
            student = next;
            opt = next_opt;
            traces.push(TraceRow {
                stage: stage_index,
                step,
                lr,
                loss_total: breakdown.total,
                loss_ce: breakdown.ce,
                loss_kd_prev: breakdown.kd_prev,
                loss_kd_pre: breakdown.kd_pre,
                eta_mean,
            });
            step += 1;
        }
    }
    Ok(StageResult {
        stage_index,
        params: student,
        traces,
        eta_records,
    })
}

/// Per-stage, per-domain mean dual-teacher discrepancy measured at stage start.
#[derive(Debug, Clone, Copy)]
pub struct DiscrepancyRow {
    pub stage: usize,
    pub domain_id: DomainId,
    pub avg_d: f64,
}

/// Everything produced by running one sequence.
pub struct SequenceRun {
    pub matrix: AccuracyMatrix,
    pub stages: Vec<StageResult>,
    pub discrepancies: Vec<DiscrepancyRow>,
}

/// Immutable per-seed experiment state: datasets, pool, prototypes, and the
/// frozen pre-trained encoder.
pub struct ExperimentContext {
    pub cfg: ExperimentConfig,
    pub run_seed: u64,
    pub datasets: BTreeMap<DomainId, TaskDataset>,
    pub pool: Option<ReferencePool>,
    pub protos: PrototypeSet,
    pub g0: EncoderParams,
}

#[allow(clippy::too_many_arguments)]
fn shuffled_ce_training(
    mut params: EncoderParams,
    inputs: &Matrix,
    labels: &[LabelId],
    protos: &PrototypeSet,
    tau: f64,
    epochs: usize,
    batch: usize,
    opt_cfg: &OptimizerConfig,
    base_lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EncoderParams> {
    let n = inputs.rows();
    let steps_per_epoch = n.div_ceil(batch);
    let total_steps = epochs * steps_per_epoch;
    if total_steps == 0 {
        return Ok(params);
    }
    let schedule = ScheduleSpec::new(base_lr, total_steps as u64)?;
    let mut opt = OptimizerState::new(&params, opt_cfg)?;
    let mut step = 0u64;
    let all: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        let mut order = all.clone();
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            let b = LabeledBatch::new(
                inputs.gather_rows(chunk),
                chunk.iter().map(|&i| labels[i]).collect(),
            )?;
            let (_, grad) = ce_loss_and_grad(&params, &b, protos, tau)?;
            let lr = cosine_lr(step, &schedule)?;
            let (next, next_opt) = adamw_step(opt, params, &grad, lr)?;
            params = next;
            opt = next_opt;
            step += 1;
        }
    }
    Ok(params)
}

impl ExperimentContext {
    pub fn prepare(cfg: &ExperimentConfig, run_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let enc = &cfg.encoder;

        // Datasets: synthetic generation or feature-file ingestion.
        let mut datasets = BTreeMap::new();
        for d in &cfg.domains {
            let data = match &d.file {
                Some(path) => match load_feature_file(path)? {
                    LoadedFeatures::Task(t) => {
                        if t.input_dim() != enc.input_dim {
                            return Err(Error::config(format!(
                                "domain {}: file dim {} vs encoder input_dim {}",
                                d.id,
                                t.input_dim(),
                                enc.input_dim
                            )));
                        }
                        t
                    }
                    LoadedFeatures::Pool(_) => {
                        return Err(Error::config(format!(
                            "domain {}: file {} holds unlabeled data",
                            d.id,
                            path.display()
                        )))
                    }
                },
                None => gen_domain(&d.effective_spec(enc.input_dim, run_seed)?)?,
            };
            datasets.insert(d.id, data);
        }

        // Global label space must be collision-free across domains.
        let mut all_labels: Vec<LabelId> = Vec::new();
        for data in datasets.values() {
            all_labels.extend_from_slice(&data.label_ids);
        }
        let total = all_labels.len();
        all_labels.sort_unstable();
        all_labels.dedup();
        if all_labels.len() != total {
            return Err(Error::config("domains share label ids; the merged label space must be disjoint"));
        }

        let mut proto_rng = derive_rng(run_seed, &[TAG_PROTO]);
        let protos = PrototypeSet::random(all_labels, enc.feature_dim, &mut proto_rng)?;

        let pool = match &cfg.reference_pool {
            None => None,
            Some(pc) => match &pc.file {
                Some(path) => match load_feature_file(path)? {
                    LoadedFeatures::Pool(p) => {
                        if p.input_dim() != enc.input_dim {
                            return Err(Error::config(format!(
                                "reference_pool: file dim {} vs encoder input_dim {}",
                                p.input_dim(),
                                enc.input_dim
                            )));
                        }
                        Some(p)
                    }
                    LoadedFeatures::Task(_) => {
                        return Err(Error::config(
                            "reference_pool file holds labeled data; expected unlabeled",
                        ))
                    }
                },
                None => {
                    let components: Vec<PoolComponent> = pc
                        .component
                        .iter()
                        .map(|c| -> Result<PoolComponent> {
                            let source = match (c.domain_id, c.background_sigma) {
                                (Some(id), None) => {
                                    let dc = cfg
                                        .domains
                                        .iter()
                                        .find(|d| d.id == id)
                                        .expect("validated above");
                                    if dc.file.is_some() {
                                        return Err(Error::config(format!(
                                            "reference_pool component for domain {id}: file-backed domains cannot seed pool components"
                                        )));
                                    }
                                    PoolSource::Domain(dc.effective_spec(enc.input_dim, run_seed)?)
                                }
                                (None, Some(sigma)) => PoolSource::Background {
                                    sigma,
                                    input_dim: enc.input_dim,
                                },
                                _ => unreachable!("validated above"),
                            };
                            Ok(PoolComponent {
                                source,
                                weight: c.weight,
                            })
                        })
                        .collect::<Result<_>>()?;
                    Some(gen_reference_pool(
                        &components,
                        pc.size,
                        derive_seed(run_seed, &[TAG_POOL, pc.seed]),
                    )?)
                }
            },
        };

        // Pre-training: noisy redraws of every synthetic domain (file-backed
        // domains contribute their train split), trained with plain CE.
        let mut init_rng = derive_rng(run_seed, &[TAG_INIT]);
        let init = EncoderParams::random_init(
            enc.input_dim,
            enc.hidden_dim,
            enc.feature_dim,
            &mut init_rng,
        );
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut labels: Vec<LabelId> = Vec::new();
        let mut pre_rng = derive_rng(run_seed, &[TAG_PRETRAIN_DATA]);
        for d in &cfg.domains {
            match &d.file {
                Some(_) => {
                    let data = &datasets[&d.id];
                    for i in data.indices(Split::Train) {
                        rows.push(data.inputs.row(i).to_vec());
                        labels.push(data.labels[i]);
                    }
                }
                None => {
                    let spec = d.effective_spec(enc.input_dim, run_seed)?;
                    let centers = crate::data::domain_centers(&spec);
                    let sigma = spec.noise_sigma * cfg.pretrain.noise_mult;
                    for (c, center) in centers.iter().enumerate() {
                        for _ in 0..cfg.pretrain.samples_per_class {
                            let row: Vec<f64> = center
                                .iter()
                                .map(|&mu| {
                                    let z: f64 =
                                        rand::Rng::sample(&mut pre_rng, rand_distr::StandardNormal);
                                    mu + sigma * z
                                })
                                .collect();
                            rows.push(row);
                            labels.push(crate::data::global_label(spec.domain_id, c));
                        }
                    }
                }
            }
        }
        let pre_inputs = Matrix::from_rows(&rows)?;
        let mut shuffle_rng = derive_rng(run_seed, &[TAG_PRETRAIN_SHUFFLE]);
        let g0 = shuffled_ce_training(
            init,
            &pre_inputs,
            &labels,
            &protos,
            cfg.experiment.tau,
            cfg.pretrain.epochs,
            cfg.experiment.task_batch,
            &cfg.optimizer,
            cfg.pretrain.base_lr,
            &mut shuffle_rng,
        )?;

        Ok(ExperimentContext {
            cfg: cfg.clone(),
            run_seed,
            datasets,
            pool,
            protos,
            g0,
        })
    }

    fn eval_row(&self, params: &EncoderParams, seq: &SequenceSpec) -> Result<Vec<f64>> {
        seq.task_order
            .iter()
            .map(|id| {
                accuracy(
                    params,
                    &self.datasets[id],
                    &self.protos,
                    self.cfg.experiment.tau,
                    self.cfg.experiment.regime,
                )
            })
            .collect()
    }

    /// Runs the full sequence: row 0 is the pre-trained model's accuracy on
    /// every task, row k the model after fine-tuning stage k.
    pub fn run_sequence(&self, seq: &SequenceSpec) -> Result<SequenceRun> {
        for id in &seq.task_order {
            if !self.datasets.contains_key(id) {
                return Err(Error::config(format!("sequence references undefined domain {id}")));
            }
        }
        let mut rows = Vec::with_capacity(seq.task_order.len() + 1);
        rows.push(self.eval_row(&self.g0, seq)?);
        let mut stages = Vec::with_capacity(seq.task_order.len());
        let mut discrepancies = Vec::new();
        let mut g_prev = self.g0.clone();
        for (pos, domain_id) in seq.task_order.iter().enumerate() {
            let stage_index = pos + 1;
            for d in &self.cfg.domains {
                let avg_d = crate::selection::avg_domain_discrepancy(
                    &g_prev,
                    &self.g0,
                    &self.datasets[&d.id],
                )?;
                discrepancies.push(DiscrepancyRow {
                    stage: stage_index,
                    domain_id: d.id,
                    avg_d,
                });
            }
            let result = train_stage(
                &StageInputs {
                    g_prev: &g_prev,
                    g0: &self.g0,
                    task: &self.datasets[domain_id],
                    pool: self.pool.as_ref(),
                    protos: &self.protos,
                },
                &self.cfg,
                self.run_seed,
                seq.index,
                stage_index,
            )?;
            rows.push(self.eval_row(&result.params, seq)?);
            g_prev = result.params.clone();
            stages.push(result);
        }
        Ok(SequenceRun {
            matrix: AccuracyMatrix::new(rows)?,
            stages,
            discrepancies,
        })
    }
}

/// Convenience wrapper: prepare the context for one seed and run one sequence.
pub fn run_sequence(
    cfg: &ExperimentConfig,
    seq: &SequenceSpec,
    run_seed: u64,
) -> Result<SequenceRun> {
    ExperimentContext::prepare(cfg, run_seed)?.run_sequence(seq)
}
