//! Synthetic multi-domain data generation, the unlabeled reference pool,
//! and the binary/CSV feature-file ingestion path.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{LabelId, LabeledBatch};
use crate::seeds::{derive_rng, splitmix64};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub type DomainId = u32;
pub type SampleId = String;

pub const FEATURE_MAGIC: [u8; 4] = *b"SDKT";
pub const FEATURE_VERSION: u32 = 1;

const CENTER_STREAM: u64 = 0xC0;
const SAMPLE_STREAM: u64 = 0x5A;
const TRAIN_FRACTION: f64 = 0.8;

/// Synthetic labels are `domain_id * 1000 + class_index`.
pub fn global_label(domain_id: DomainId, class_idx: usize) -> LabelId {
    domain_id * 1000 + class_idx as u32
}

/// Generator parameters for one synthetic domain: a Gaussian cluster per
/// class, cluster centers themselves drawn from a scaled Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: DomainId,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub center_scale: f64,
    pub noise_sigma: f64,
    pub input_dim: usize,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::param(format!(
                "domain {} needs at least 2 classes",
                self.domain_id
            )));
        }
        if self.num_classes > 1000 {
            return Err(Error::param("at most 1000 classes per domain"));
        }
        if self.samples_per_class < 2 {
            return Err(Error::param(format!(
                "domain {} needs at least 2 samples per class for a train/test split",
                self.domain_id
            )));
        }
        if !(self.noise_sigma > 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::param(format!(
                "domain {} noise_sigma must be positive",
                self.domain_id
            )));
        }
        if !self.center_scale.is_finite() {
            return Err(Error::param(format!(
                "domain {} center_scale must be finite",
                self.domain_id
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::param("input_dim must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Labeled samples of one domain with a per-sample train/test tag.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub inputs: Matrix,
    pub labels: Vec<LabelId>,
    /// Distinct labels of this task, ascending.
    pub label_ids: Vec<LabelId>,
    pub split: Vec<Split>,
}

impl TaskDataset {
    pub fn new(
        inputs: Matrix,
        labels: Vec<LabelId>,
        label_ids: Vec<LabelId>,
        split: Vec<Split>,
    ) -> Result<Self> {
        let n = inputs.rows();
        if n == 0 {
            return Err(Error::EmptyInput("dataset has no samples".into()));
        }
        if labels.len() != n || split.len() != n {
            return Err(Error::shape(format!(
                "{} inputs vs {} labels vs {} split tags",
                n,
                labels.len(),
                split.len()
            )));
        }
        let mut sorted = label_ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != label_ids {
            return Err(Error::param("label_ids must be distinct and ascending"));
        }
        if labels.iter().any(|l| !label_ids.contains(l)) {
            return Err(Error::param("sample label outside the task's label set"));
        }
        if !split.contains(&Split::Train) || !split.contains(&Split::Test) {
            return Err(Error::param("train and test splits must both be nonempty"));
        }
        Ok(TaskDataset {
            inputs,
            labels,
            label_ids,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<LabeledBatch> {
        LabeledBatch::new(
            self.inputs.gather_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Unlabeled sample pool used for distillation. Sample ids carry the pool
/// component that produced them (`d<domain>-<n>` or `bg-<n>`).
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePool {
    pub inputs: Matrix,
    pub sample_ids: Vec<SampleId>,
}

impl ReferencePool {
    pub fn new(inputs: Matrix, sample_ids: Vec<SampleId>) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::EmptyInput("reference pool has no samples".into()));
        }
        if inputs.rows() != sample_ids.len() {
            return Err(Error::shape(format!(
                "{} pool inputs vs {} sample ids",
                inputs.rows(),
                sample_ids.len()
            )));
        }
        Ok(ReferencePool { inputs, sample_ids })
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }
}

fn domain_rng(spec: &DomainSpec, stream: u64) -> ChaCha8Rng {
    derive_rng(
        spec.seed,
        &[splitmix64(spec.domain_id as u64), stream],
    )
}

/// Per-class cluster centers of a domain, a pure function of
/// `(seed, domain_id)`; shared between task generation and pool components.
pub fn domain_centers(spec: &DomainSpec) -> Vec<Vec<f64>> {
    let mut rng = domain_rng(spec, CENTER_STREAM);
    (0..spec.num_classes)
        .map(|_| {
            (0..spec.input_dim)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    spec.center_scale * z
                })
                .collect()
        })
        .collect()
}

fn train_count(samples_per_class: usize) -> usize {
    let n = (samples_per_class as f64 * TRAIN_FRACTION).floor() as usize;
    n.clamp(1, samples_per_class - 1)
}

/// Generates one synthetic domain. Per class: a fixed center plus isotropic
/// noise, with the first 80% of each class tagged as the train split.
/// The same spec always yields a bitwise-identical dataset.
pub fn gen_domain(spec: &DomainSpec) -> Result<TaskDataset> {
    spec.validate()?;
    let centers = domain_centers(spec);
    let mut rng = domain_rng(spec, SAMPLE_STREAM);
    let n = spec.num_classes * spec.samples_per_class;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut split = Vec::with_capacity(n);
    let n_train = train_count(spec.samples_per_class);
    for (c, center) in centers.iter().enumerate() {
        for s in 0..spec.samples_per_class {
            let row: Vec<f64> = center
                .iter()
                .map(|&m| {
                    let z: f64 = rng.sample(StandardNormal);
                    m + spec.noise_sigma * z
                })
                .collect();
            rows.push(row);
            labels.push(global_label(spec.domain_id, c));
            split.push(if s < n_train { Split::Train } else { Split::Test });
        }
    }
    let label_ids: Vec<LabelId> = (0..spec.num_classes)
        .map(|c| global_label(spec.domain_id, c))
        .collect();
    TaskDataset::new(Matrix::from_rows(&rows)?, labels, label_ids, split)
}

/// One mixture component of the reference pool.
#[derive(Debug, Clone)]
pub struct PoolComponent {
    pub source: PoolSource,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub enum PoolSource {
    /// Samples drawn from a domain's class clusters (labels discarded).
    Domain(DomainSpec),
    /// Broad isotropic Gaussian background.
    Background { sigma: f64, input_dim: usize },
}

impl PoolSource {
    fn input_dim(&self) -> usize {
        match self {
            PoolSource::Domain(spec) => spec.input_dim,
            PoolSource::Background { input_dim, .. } => *input_dim,
        }
    }

    fn id_prefix(&self) -> String {
        match self {
            PoolSource::Domain(spec) => format!("d{}", spec.domain_id),
            PoolSource::Background { .. } => "bg".to_string(),
        }
    }
}

/// Draws `size` unlabeled samples from the weighted mixture of components.
///
/// Draw protocol per sample, in order: one uniform in `[0, total_weight)`
/// selecting the component, then for a domain component one uniform class
/// index followed by `input_dim` standard normals, or for the background
/// just `input_dim` standard normals.
pub fn gen_reference_pool(
    components: &[PoolComponent],
    size: usize,
    seed: u64,
) -> Result<ReferencePool> {
    if size == 0 {
        return Err(Error::param("reference pool size must be at least 1"));
    }
    if components.is_empty() {
        return Err(Error::param("reference pool needs at least one component"));
    }
    let mut total_weight = 0.0;
    for c in components {
        if !(c.weight >= 0.0) || !c.weight.is_finite() {
            return Err(Error::param(format!(
                "component weights must be nonnegative, got {}",
                c.weight
            )));
        }
        total_weight += c.weight;
    }
    if !(total_weight > 0.0) {
        return Err(Error::param("component weights must sum to a positive value"));
    }
    let dim = components[0].source.input_dim();
    if components.iter().any(|c| c.source.input_dim() != dim) {
        return Err(Error::shape("pool components disagree on input_dim"));
    }
    let centers: Vec<Option<Vec<Vec<f64>>>> = components
        .iter()
        .map(|c| match &c.source {
            PoolSource::Domain(spec) => {
                spec.validate().map(|_| Some(domain_centers(spec)))
            }
            PoolSource::Background { sigma, .. } => {
                if !(*sigma > 0.0) || !sigma.is_finite() {
                    Err(Error::param("background sigma must be positive"))
                } else {
                    Ok(None)
                }
            }
        })
        .collect::<Result<_>>()?;

    let mut rng = derive_rng(seed, &[0x9001]);
    let mut rows = Vec::with_capacity(size);
    let mut ids = Vec::with_capacity(size);
    for m in 0..size {
        let pick: f64 = rng.random_range(0.0..total_weight);
        let mut acc = 0.0;
        let mut chosen = components.len() - 1;
        for (i, c) in components.iter().enumerate() {
            acc += c.weight;
            if pick < acc {
                chosen = i;
                break;
            }
        }
        let row: Vec<f64> = match &components[chosen].source {
            PoolSource::Domain(spec) => {
                let class = rng.random_range(0..spec.num_classes);
                let center = &centers[chosen].as_ref().unwrap()[class];
                center
                    .iter()
                    .map(|&mu| {
                        let z: f64 = rng.sample(StandardNormal);
                        mu + spec.noise_sigma * z
                    })
                    .collect()
            }
            PoolSource::Background { sigma, input_dim } => (0..*input_dim)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    sigma * z
                })
                .collect(),
        };
        rows.push(row);
        ids.push(format!("{}-{}", components[chosen].source.id_prefix(), m));
    }
    ReferencePool::new(Matrix::from_rows(&rows)?, ids)
}

/// A batch drawn from the pool, keeping the pool indices so cached
/// per-sample quantities can be looked up.
#[derive(Debug, Clone)]
pub struct ReferenceBatch {
    pub indices: Vec<usize>,
    pub inputs: Matrix,
}

/// Uniform sampling with replacement; advances the RNG deterministically.
pub fn sample_reference(
    pool: &ReferencePool,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ReferenceBatch> {
    if pool.is_empty() {
        return Err(Error::EmptyInput("reference pool is empty".into()));
    }
    if n == 0 {
        return Err(Error::param("reference batch size must be at least 1"));
    }
    let m = pool.len();
    let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
    let inputs = pool.inputs.gather_rows(&indices);
    Ok(ReferenceBatch { indices, inputs })
}

/// Contents of a feature file: labeled rows become a task dataset, a label
/// column of -1 throughout marks an unlabeled reference pool.
#[derive(Debug)]
pub enum LoadedFeatures {
    Task(TaskDataset),
    Pool(ReferencePool),
}

/// Writes the binary feature format: magic `SDKT`, version u32, count u64,
/// dim u32, then per record a label i32 (-1 for unlabeled) and dim f32
/// values, all little-endian.
pub fn write_feature_file(
    path: &Path,
    inputs: &Matrix,
    labels: Option<&[LabelId]>,
) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != inputs.rows() {
            return Err(Error::shape(format!(
                "{} labels vs {} rows",
                l.len(),
                inputs.rows()
            )));
        }
    }
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(inputs.rows() as u64).to_le_bytes())?;
    w.write_all(&(inputs.cols() as u32).to_le_bytes())?;
    for i in 0..inputs.rows() {
        let label: i32 = match labels {
            Some(l) => l[i] as i32,
            None => -1,
        };
        w.write_all(&label.to_le_bytes())?;
        for &v in inputs.row(i) {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn finish_loaded(path: &Path, rows: Vec<Vec<f64>>, labels: Vec<i32>) -> Result<LoadedFeatures> {
    if rows.is_empty() {
        return Err(Error::EmptyInput(format!(
            "feature file {} declares zero records",
            path.display()
        )));
    }
    for (i, row) in rows.iter().enumerate() {
        if !crate::linalg::all_finite(row) {
            return Err(Error::Numeric(format!(
                "non-finite value in record {i} of {}",
                path.display()
            )));
        }
    }
    let unlabeled = labels.iter().filter(|&&l| l == -1).count();
    if unlabeled == labels.len() {
        let ids: Vec<SampleId> = (0..rows.len()).map(|i| format!("f-{i}")).collect();
        return Ok(LoadedFeatures::Pool(ReferencePool::new(
            Matrix::from_rows(&rows)?,
            ids,
        )?));
    }
    if unlabeled > 0 {
        return Err(Error::Format(format!(
            "{} mixes labeled and unlabeled records",
            path.display()
        )));
    }
    if labels.iter().any(|&l| l < 0) {
        return Err(Error::Format("negative label other than -1".into()));
    }
    let labels: Vec<LabelId> = labels.into_iter().map(|l| l as LabelId).collect();
    let mut label_ids: Vec<LabelId> = labels.clone();
    label_ids.sort_unstable();
    label_ids.dedup();

    // Per-class 80/20 split in file order.
    let mut split = vec![Split::Test; labels.len()];
    for &lid in &label_ids {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == lid).collect();
        if members.len() < 2 {
            return Err(Error::Format(format!(
                "label {lid} has fewer than 2 samples; cannot split"
            )));
        }
        let n_train = train_count(members.len());
        for (pos, &i) in members.iter().enumerate() {
            split[i] = if pos < n_train { Split::Train } else { Split::Test };
        }
    }
    Ok(LoadedFeatures::Task(TaskDataset::new(
        Matrix::from_rows(&rows)?,
        labels,
        label_ids,
        split,
    )?))
}

fn load_binary(path: &Path, bytes: &[u8]) -> Result<LoadedFeatures> {
    let mut r = bytes;
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u32buf)
        .map_err(|_| Error::Truncation(format!("{} shorter than header", path.display())))?;
    if u32buf != FEATURE_MAGIC {
        return Err(Error::Format(format!(
            "{} has wrong magic bytes",
            path.display()
        )));
    }
    r.read_exact(&mut u32buf)
        .map_err(|_| Error::Truncation(format!("{} shorter than header", path.display())))?;
    let version = u32::from_le_bytes(u32buf);
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!(
            "unsupported feature file version {version}"
        )));
    }
    r.read_exact(&mut u64buf)
        .map_err(|_| Error::Truncation(format!("{} shorter than header", path.display())))?;
    let count = u64::from_le_bytes(u64buf) as usize;
    r.read_exact(&mut u32buf)
        .map_err(|_| Error::Truncation(format!("{} shorter than header", path.display())))?;
    let dim = u32::from_le_bytes(u32buf) as usize;
    if count == 0 {
        return Err(Error::EmptyInput(format!(
            "feature file {} declares zero records",
            path.display()
        )));
    }
    if dim == 0 {
        return Err(Error::Format("feature file declares zero dimensions".into()));
    }
    let record_len = 4 + 4 * dim;
    let expected = count * record_len;
    if r.len() != expected {
        return Err(Error::Truncation(format!(
            "{}: payload is {} bytes, header implies {}",
            path.display(),
            r.len(),
            expected
        )));
    }
    let mut rows = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let mut i32buf = [0u8; 4];
    for _ in 0..count {
        r.read_exact(&mut i32buf).expect("length checked above");
        labels.push(i32::from_le_bytes(i32buf));
        let mut row = Vec::with_capacity(dim);
        for _ in 0..dim {
            r.read_exact(&mut i32buf).expect("length checked above");
            row.push(f32::from_le_bytes(i32buf) as f64);
        }
        rows.push(row);
    }
    finish_loaded(path, rows, labels)
}

fn load_csv(path: &Path, bytes: &[u8]) -> Result<LoadedFeatures> {
    let reader = BufReader::new(bytes);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{} is empty", path.display())))??;
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.first() != Some(&"label") || cols.len() < 2 {
        return Err(Error::Format(format!(
            "{} is neither the binary format nor a label,f0,... CSV",
            path.display()
        )));
    }
    for (i, c) in cols[1..].iter().enumerate() {
        if *c != format!("f{i}") {
            return Err(Error::Format(format!(
                "unexpected CSV column {c}, expected f{i}"
            )));
        }
    }
    let dim = cols.len() - 1;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::Truncation(format!(
                "{} line {}: {} fields, expected {}",
                path.display(),
                lineno + 2,
                fields.len(),
                dim + 1
            )));
        }
        let label: i32 = fields[0]
            .parse()
            .map_err(|_| Error::Format(format!("bad label on line {}", lineno + 2)))?;
        let mut row = Vec::with_capacity(dim);
        for f in &fields[1..] {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::Format(format!("bad value on line {}", lineno + 2)))?;
            row.push(v);
        }
        labels.push(label);
        rows.push(row);
    }
    finish_loaded(path, rows, labels)
}

/// Reads a feature file, accepting the binary format (detected by magic
/// bytes) or the CSV alternative.
pub fn load_feature_file(path: &Path) -> Result<LoadedFeatures> {
    let bytes = std::fs::read(path)?;
    if bytes.len() >= 4 && bytes[..4] == FEATURE_MAGIC {
        load_binary(path, &bytes)
    } else {
        load_csv(path, &bytes)
    }
}
