//! Seeded synthetic multi-task benchmarks.
//!
//! A fixed random tanh teacher maps inputs to `h` features. Each task reads
//! `round(rho * h)` shared feature slots plus task-private slots for the
//! remainder, through its own random head, so `rho` controls how much the
//! tasks overlap. Regression targets add Gaussian noise; classification
//! targets are the argmax of the head logits, with heads redrawn when a
//! class ends up rarer than 10%.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

pub const DATASET_FORMAT_VERSION: u32 = 1;
const CLASS_BALANCE_FLOOR: f64 = 0.10;
const HEAD_REDRAW_LIMIT: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TaskKind {
    Regression {
        /// Output dimensionality (1 for scalar targets).
        #[serde(default = "default_output_dim")]
        output_dim: usize,
        /// Standard deviation of the target noise.
        noise_std: f64,
    },
    Classification { classes: usize },
}

fn default_output_dim() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub input_dim: usize,
    pub teacher_hidden: usize,
    /// Fraction of teacher features shared between tasks, in [0, 1].
    pub relatedness: f64,
    pub tasks: Vec<TaskKind>,
    pub n_train: usize,
    pub n_eval: usize,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.relatedness) {
            return Err(Error::Config(format!(
                "relatedness must lie in [0, 1], got {}",
                self.relatedness
            )));
        }
        if self.input_dim == 0 || self.teacher_hidden == 0 {
            return Err(Error::Config("benchmark dimensions must be positive".into()));
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(Error::Config("benchmark sizes must be >= 1".into()));
        }
        if self.tasks.len() < 2 {
            return Err(Error::Config(format!(
                "benchmark needs T >= 2 tasks, got {}",
                self.tasks.len()
            )));
        }
        for (t, task) in self.tasks.iter().enumerate() {
            match task {
                TaskKind::Regression { output_dim, noise_std } => {
                    if *output_dim == 0 {
                        return Err(Error::Config(format!("task {t}: output_dim must be >= 1")));
                    }
                    if *noise_std < 0.0 {
                        return Err(Error::Config(format!("task {t}: noise_std must be >= 0")));
                    }
                }
                TaskKind::Classification { classes } => {
                    if *classes < 2 {
                        return Err(Error::Config(format!("task {t}: class count must be >= 2")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Shared feature slots per task head.
    pub fn shared_slots(&self) -> usize {
        ((self.relatedness * self.teacher_hidden as f64).round() as usize)
            .min(self.teacher_hidden)
    }
}

/// Per-task targets for a whole split.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskTargets {
    /// [n, output_dim] row-major values.
    Values(Tensor),
    Classes(Vec<usize>),
}

/// One split: inputs plus all T task targets for every example.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// [n, d] inputs.
    pub inputs: Tensor,
    pub targets: Vec<TaskTargets>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `indices` of the inputs as a new tensor.
    pub fn gather_inputs(&self, indices: &[usize]) -> Result<Tensor> {
        let d = self.inputs.cols();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * d..(i + 1) * d]);
        }
        Tensor::matrix(indices.len(), d, data)
    }

    /// Rows `indices` of task `t`'s targets.
    pub fn gather_targets(&self, task: usize, indices: &[usize]) -> Result<crate::model::Targets> {
        match &self.targets[task] {
            TaskTargets::Values(v) => {
                let o = v.cols();
                let mut data = Vec::with_capacity(indices.len() * o);
                for &i in indices {
                    data.extend_from_slice(&v.data()[i * o..(i + 1) * o]);
                }
                Ok(crate::model::Targets::Values(Tensor::matrix(
                    indices.len(),
                    o,
                    data,
                )?))
            }
            TaskTargets::Classes(c) => Ok(crate::model::Targets::Classes(
                indices.iter().map(|&i| c[i]).collect(),
            )),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: SyntheticTaskSpec,
    pub seed: u64,
    pub train: Split,
    pub eval: Split,
}

struct Teacher {
    /// [d, h] shared feature map.
    shared: Vec<f64>,
    /// Per-task [d, h] private feature maps.
    private: Vec<Vec<f64>>,
    /// Per-task head rows, each [out, h].
    heads: Vec<Vec<f64>>,
}

/// Generate a seeded dataset: train and eval splits with all T annotations
/// per example.
pub fn generate(spec: &SyntheticTaskSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let root = Stream::new(seed, "synthbench");
    let teacher = build_teacher(spec, &root)?;

    let train = generate_split(spec, &teacher, &root.derive_str("train"), spec.n_train)?;
    let eval = generate_split(spec, &teacher, &root.derive_str("eval"), spec.n_eval)?;
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        train,
        eval,
    })
}

fn build_teacher(spec: &SyntheticTaskSpec, root: &Stream) -> Result<Teacher> {
    let d = spec.input_dim;
    let h = spec.teacher_hidden;
    let t = spec.num_tasks();
    let scale = 1.0 / (d as f64).sqrt();
    let mut stream = root.derive_str("teacher");
    let shared: Vec<f64> = (0..d * h).map(|_| stream.next_normal() * scale).collect();
    let private: Vec<Vec<f64>> = (0..t)
        .map(|task| {
            let mut s = root.derive_str("private").derive(task as u64);
            (0..d * h).map(|_| s.next_normal() * scale).collect()
        })
        .collect();

    // Heads are drawn per task; classification heads are accepted only when
    // every class keeps at least 10% mass on a probe sample.
    let head_scale = 1.0 / (h as f64).sqrt();
    let probe = probe_features(spec, &shared, &private, &root.derive_str("probe"))?;
    let mut heads = Vec::with_capacity(t);
    for (task, kind) in spec.tasks.iter().enumerate() {
        let out = match kind {
            TaskKind::Regression { output_dim, .. } => *output_dim,
            TaskKind::Classification { classes } => *classes,
        };
        let head_root = root.derive_str("head").derive(task as u64);
        let mut accepted = None;
        for attempt in 0..HEAD_REDRAW_LIMIT {
            let mut s = head_root.derive(attempt as u64);
            let head: Vec<f64> = (0..out * h).map(|_| s.next_normal() * head_scale).collect();
            let ok = match kind {
                TaskKind::Regression { .. } => true,
                TaskKind::Classification { classes } => {
                    class_frequencies_ok(&probe[task], &head, h, *classes)
                }
            };
            if ok {
                accepted = Some(head);
                break;
            }
        }
        heads.push(accepted.ok_or_else(|| {
            Error::Contract(format!(
                "task {task}: no class-balanced head found in {HEAD_REDRAW_LIMIT} redraws"
            ))
        })?);
    }
    Ok(Teacher {
        shared,
        private,
        heads,
    })
}

/// Teacher features for a probe batch, used for head acceptance.
fn probe_features(
    spec: &SyntheticTaskSpec,
    shared: &[f64],
    private: &[Vec<f64>],
    stream: &Stream,
) -> Result<Vec<Vec<f64>>> {
    let n = 512;
    let d = spec.input_dim;
    let mut s = stream.clone();
    let inputs: Vec<f64> = (0..n * d).map(|_| s.next_normal()).collect();
    (0..spec.num_tasks())
        .map(|task| {
            let mut rows = Vec::with_capacity(n * spec.teacher_hidden);
            for row in 0..n {
                let x = &inputs[row * d..(row + 1) * d];
                rows.extend(task_features(spec, shared, &private[task], x));
            }
            Ok(rows)
        })
        .collect()
}

fn class_frequencies_ok(features: &[f64], head: &[f64], h: usize, classes: usize) -> bool {
    let n = features.len() / h;
    let mut counts = vec![0usize; classes];
    for row in 0..n {
        let f = &features[row * h..(row + 1) * h];
        counts[argmax_logits(f, head, h, classes)] += 1;
    }
    counts
        .iter()
        .all(|&c| c as f64 / n as f64 >= CLASS_BALANCE_FLOOR)
}

/// Feature vector a task head reads: shared slots then private slots.
fn task_features(spec: &SyntheticTaskSpec, shared: &[f64], private: &[f64], x: &[f64]) -> Vec<f64> {
    let h = spec.teacher_hidden;
    let d = spec.input_dim;
    let n_shared = spec.shared_slots();
    let mut out = Vec::with_capacity(h);
    for j in 0..n_shared {
        let pre: f64 = (0..d).map(|i| x[i] * shared[i * h + j]).sum();
        out.push(pre.tanh());
    }
    for j in n_shared..h {
        let pre: f64 = (0..d).map(|i| x[i] * private[i * h + j]).sum();
        out.push(pre.tanh());
    }
    out
}

fn argmax_logits(features: &[f64], head: &[f64], h: usize, classes: usize) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for c in 0..classes {
        let v: f64 = (0..h).map(|j| head[c * h + j] * features[j]).sum();
        if v > best_v {
            best_v = v;
            best = c;
        }
    }
    best
}

fn generate_split(
    spec: &SyntheticTaskSpec,
    teacher: &Teacher,
    stream: &Stream,
    n: usize,
) -> Result<Split> {
    let d = spec.input_dim;
    let h = spec.teacher_hidden;
    let mut input_stream = stream.derive_str("inputs");
    let inputs: Vec<f64> = (0..n * d).map(|_| input_stream.next_normal()).collect();

    let mut targets = Vec::with_capacity(spec.num_tasks());
    for (task, kind) in spec.tasks.iter().enumerate() {
        let head = &teacher.heads[task];
        let mut noise = stream.derive_str("noise").derive(task as u64);
        match kind {
            TaskKind::Regression { output_dim, noise_std } => {
                let mut vals = Vec::with_capacity(n * output_dim);
                for row in 0..n {
                    let x = &inputs[row * d..(row + 1) * d];
                    let f = task_features(spec, &teacher.shared, &teacher.private[task], x);
                    for c in 0..*output_dim {
                        let y: f64 = (0..h).map(|j| head[c * h + j] * f[j]).sum();
                        vals.push(y + noise_std * noise.next_normal());
                    }
                }
                targets.push(TaskTargets::Values(Tensor::matrix(n, *output_dim, vals)?));
            }
            TaskKind::Classification { classes } => {
                let mut labels = Vec::with_capacity(n);
                for row in 0..n {
                    let x = &inputs[row * d..(row + 1) * d];
                    let f = task_features(spec, &teacher.shared, &teacher.private[task], x);
                    labels.push(argmax_logits(&f, head, h, *classes));
                }
                targets.push(TaskTargets::Classes(labels));
            }
        }
    }
    Ok(Split {
        inputs: Tensor::matrix(n, d, inputs)?,
        targets,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Rmse,
    L1,
    Accuracy,
}

impl MetricKind {
    /// True when larger values are better.
    pub fn higher_is_better(&self) -> bool {
        matches!(self, MetricKind::Accuracy)
    }

    pub fn for_task(kind: &TaskKind) -> MetricKind {
        match kind {
            TaskKind::Regression { .. } => MetricKind::Rmse,
            TaskKind::Classification { .. } => MetricKind::Accuracy,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricSpec {
    pub task: usize,
    pub kind: MetricKind,
}

/// Predictions for one task over a whole split: raw head outputs.
pub fn evaluate(predictions: &Tensor, targets: &TaskTargets, metric: MetricKind) -> Result<f64> {
    if predictions.rows() == 0 {
        return Err(Error::Contract("evaluate needs a non-empty eval set".into()));
    }
    match (metric, targets) {
        (MetricKind::Rmse, TaskTargets::Values(y)) => {
            check_same_shape(predictions, y)?;
            let mse: f64 = predictions
                .data()
                .iter()
                .zip(y.data())
                .map(|(&p, &t)| (p - t) * (p - t))
                .sum::<f64>()
                / y.len() as f64;
            Ok(mse.sqrt())
        }
        (MetricKind::L1, TaskTargets::Values(y)) => {
            check_same_shape(predictions, y)?;
            Ok(predictions
                .data()
                .iter()
                .zip(y.data())
                .map(|(&p, &t)| (p - t).abs())
                .sum::<f64>()
                / y.len() as f64)
        }
        (MetricKind::Accuracy, TaskTargets::Classes(labels)) => {
            if predictions.rows() != labels.len() {
                return Err(Error::Contract(format!(
                    "{} prediction rows for {} labels",
                    predictions.rows(),
                    labels.len()
                )));
            }
            let k = predictions.cols();
            let correct = labels
                .iter()
                .enumerate()
                .filter(|(row, &lab)| {
                    let r = &predictions.data()[row * k..(row + 1) * k];
                    let pred = r
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0;
                    pred == lab
                })
                .count();
            Ok(correct as f64 / labels.len() as f64 * 100.0)
        }
        _ => Err(Error::Contract(
            "metric kind incompatible with target kind".into(),
        )),
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    seed: u64,
    spec: SyntheticTaskSpec,
}

/// Write a split as CSV (x_0..x_{d-1}, then y<t>_<j> / y<t>_label columns)
/// with a JSON sidecar holding the spec and seed.
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, split) in [("train", &dataset.train), ("eval", &dataset.eval)] {
        let mut header: Vec<String> = (0..dataset.spec.input_dim)
            .map(|i| format!("x_{i}"))
            .collect();
        for (t, target) in split.targets.iter().enumerate() {
            match target {
                TaskTargets::Values(v) => {
                    header.extend((0..v.cols()).map(|j| format!("y{t}_{j}")));
                }
                TaskTargets::Classes(_) => header.push(format!("y{t}_label")),
            }
        }
        let mut lines = vec![header.join(",")];
        for row in 0..split.len() {
            let mut fields: Vec<String> = (0..dataset.spec.input_dim)
                .map(|c| format_f64(split.inputs.at(row, c)))
                .collect();
            for target in &split.targets {
                match target {
                    TaskTargets::Values(v) => {
                        fields.extend((0..v.cols()).map(|c| format_f64(v.at(row, c))));
                    }
                    TaskTargets::Classes(labels) => fields.push(labels[row].to_string()),
                }
            }
            lines.push(fields.join(","));
        }
        std::fs::write(dir.join(format!("{name}.csv")), lines.join("\n") + "\n")?;
    }
    let sidecar = Sidecar {
        format_version: DATASET_FORMAT_VERSION,
        seed: dataset.seed,
        spec: dataset.spec.clone(),
    };
    std::fs::write(
        dir.join("dataset.json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

/// Shortest f64 text that parses back to the same bits.
pub fn format_f64(v: f64) -> String {
    format!("{v}")
}

/// Load a dataset previously written by [`export_dataset`].
pub fn import_dataset(dir: &Path) -> Result<Dataset> {
    let sidecar: Sidecar =
        serde_json::from_str(&std::fs::read_to_string(dir.join("dataset.json"))?)?;
    if sidecar.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported dataset format_version {}",
            sidecar.format_version
        )));
    }
    sidecar.spec.validate()?;
    let train = import_split(&sidecar.spec, &dir.join("train.csv"))?;
    let eval = import_split(&sidecar.spec, &dir.join("eval.csv"))?;
    Ok(Dataset {
        spec: sidecar.spec,
        seed: sidecar.seed,
        train,
        eval,
    })
}

fn import_split(spec: &SyntheticTaskSpec, path: &Path) -> Result<Split> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let d = spec.input_dim;
    let mut inputs = Vec::new();
    let mut value_targets: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut class_targets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut n = 0;
    for record in reader.records() {
        let record = record?;
        let mut col = 0;
        for _ in 0..d {
            inputs.push(parse_field(&record, col)?);
            col += 1;
        }
        for (t, kind) in spec.tasks.iter().enumerate() {
            match kind {
                TaskKind::Regression { output_dim, .. } => {
                    let dst = value_targets.entry(t).or_default();
                    for _ in 0..*output_dim {
                        dst.push(parse_field(&record, col)?);
                        col += 1;
                    }
                }
                TaskKind::Classification { .. } => {
                    let raw = record
                        .get(col)
                        .ok_or_else(|| Error::Config(format!("missing column {col}")))?;
                    let label: usize = raw
                        .parse()
                        .map_err(|_| Error::Config(format!("bad class label {raw:?}")))?;
                    class_targets.entry(t).or_default().push(label);
                    col += 1;
                }
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config(format!("empty dataset file {}", path.display())));
    }
    let targets = spec
        .tasks
        .iter()
        .enumerate()
        .map(|(t, kind)| match kind {
            TaskKind::Regression { output_dim, .. } => Ok(TaskTargets::Values(Tensor::matrix(
                n,
                *output_dim,
                value_targets.remove(&t).unwrap(),
            )?)),
            TaskKind::Classification { .. } => {
                Ok(TaskTargets::Classes(class_targets.remove(&t).unwrap()))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Split {
        inputs: Tensor::matrix(n, d, inputs)?,
        targets,
    })
}

fn parse_field(record: &csv::StringRecord, col: usize) -> Result<f64> {
    let raw = record
        .get(col)
        .ok_or_else(|| Error::Config(format!("missing column {col}")))?;
    raw.parse()
        .map_err(|_| Error::Config(format!("bad numeric field {raw:?}")))
}

/// The default desk-scale benchmark: one noisy regression task and one
/// 4-class classification task over a mostly-shared teacher.
pub fn default_spec() -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        input_dim: 16,
        teacher_hidden: 32,
        relatedness: 0.9,
        tasks: vec![
            TaskKind::Regression {
                output_dim: 1,
                noise_std: 0.1,
            },
            TaskKind::Classification { classes: 4 },
        ],
        n_train: 2_000,
        n_eval: 1_000,
    }
}
