//! Gradient-angle instrumentation on a frozen model.
//!
//! Two profiles, both free of parameter updates:
//!
//! * task angles: per step, the angle between per-task shared gradients,
//!   where each task's gradient comes from exactly the examples the step's
//!   allocation gave it;
//! * step angles: the angle between the combined shared gradients of every
//!   two consecutive optimizer (sub-)steps.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alloc::{epoch_batches, plan_step, AllocationMode, SubStepAllocation};
use crate::error::{Error, Result};
use crate::model::MultiTaskModel;
use crate::rng::Stream;
use crate::synth::Split;
use crate::tape::Tape;
use crate::tensor::{dot, norm, Tensor};

pub const ANGLE_BINS: usize = 36;
pub const ANGLE_BIN_WIDTH: f64 = 5.0;

/// Angle between two non-zero vectors, in degrees within [0, 180].
pub fn angle_between(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Contract(
            "angle undefined for a zero-length gradient".into(),
        ));
    }
    let cos = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
    Ok(cos.acos().to_degrees())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleHistogram {
    /// 37 bin edges covering [0, 180] in 5-degree steps.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub sample_count: usize,
    pub mean: f64,
    pub std: f64,
    /// Measurement opportunities that produced no angle (empty groups or
    /// zero gradients).
    pub skipped: usize,
}

impl AngleHistogram {
    pub fn from_samples(angles: &[f64], skipped: usize) -> Self {
        let edges: Vec<f64> = (0..=ANGLE_BINS).map(|i| i as f64 * ANGLE_BIN_WIDTH).collect();
        let mut counts = vec![0u64; ANGLE_BINS];
        for &a in angles {
            let bin = ((a / ANGLE_BIN_WIDTH) as usize).min(ANGLE_BINS - 1);
            counts[bin] += 1;
        }
        let n = angles.len();
        let mean = if n == 0 {
            0.0
        } else {
            angles.iter().sum::<f64>() / n as f64
        };
        let std = if n == 0 {
            0.0
        } else {
            (angles.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64).sqrt()
        };
        AngleHistogram {
            edges,
            counts,
            sample_count: n,
            mean,
            std,
            skipped,
        }
    }

    /// Fraction of samples with angle in [lo, hi].
    pub fn mass_between(&self, lo: f64, hi: f64) -> f64 {
        if self.sample_count == 0 {
            return 0.0;
        }
        let mut inside = 0u64;
        for (i, &c) in self.counts.iter().enumerate() {
            let left = self.edges[i];
            let right = self.edges[i + 1];
            if left >= lo && right <= hi {
                inside += c;
            }
        }
        inside as f64 / self.sample_count as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    TaskPair,
    StepPair,
}

impl ProfileKind {
    pub fn label(&self) -> &'static str {
        match self {
            ProfileKind::TaskPair => "task_pair",
            ProfileKind::StepPair => "step_pair",
        }
    }
}

#[derive(Clone, Debug)]
pub struct AngleSample {
    /// Update index the sample was measured at.
    pub step: usize,
    pub angle_deg: f64,
}

#[derive(Clone, Debug)]
pub struct ProfileResult {
    pub kind: ProfileKind,
    pub samples: Vec<AngleSample>,
    pub histogram: AngleHistogram,
}

#[derive(Clone, Debug)]
pub struct ProfileOptions {
    pub mode: AllocationMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Per-task shared gradients for one sub-step on a frozen model.
///
/// Returns one flattened gradient per task (`None` when the task has no
/// allocated examples) and the normalized per-task losses.
pub fn sub_step_shared_gradients(
    model: &MultiTaskModel,
    split: &Split,
    batch: &[usize],
    allocation: &SubStepAllocation,
) -> Result<(Vec<Option<Vec<f64>>>, Vec<Option<f64>>)> {
    let t = model.num_tasks();
    let mut tape = Tape::new();
    let binding = model.params.bind(&mut tape);
    let inputs = tape.constant(split.gather_inputs(batch)?);
    let rep = model.encode(&mut tape, &binding, inputs)?;

    let (shared, _) = model.partition_parameters();
    let wrt = binding.ids_for(&shared)?;
    let layout = model.params.layout_matching(|p| p.starts_with("shared/"));

    let mut grads = Vec::with_capacity(t);
    let mut losses = Vec::with_capacity(t);
    for task in 0..t {
        let group = &allocation.groups[task];
        if group.is_empty() {
            grads.push(None);
            losses.push(None);
            continue;
        }
        let rep_t = tape.gather_rows(rep, group.clone())?;
        let pred = model.decode(&mut tape, &binding, task, rep_t)?;
        let batch_rows: Vec<usize> = group.iter().map(|&i| batch[i]).collect();
        let targets = split.gather_targets(task, &batch_rows)?;
        let per_ex = model.per_example_losses(&mut tape, task, pred, &targets)?;
        let loss = tape.mean(per_ex)?;
        losses.push(Some(tape.scalar_value(loss)?));
        let grad_ids = tape.backward(loss, &wrt)?;
        let values: BTreeMap<String, Tensor> = shared
            .iter()
            .cloned()
            .zip(grad_ids.iter().map(|&id| tape.value(id).clone()))
            .collect();
        grads.push(Some(layout.flatten(&values)?));
    }
    Ok((grads, losses))
}

/// Combined shared gradient of one sub-step:
/// grad of (1/T) sum_t lambda_t (l_t / c_t) over the allocated groups.
fn combined_shared_gradient(
    model: &MultiTaskModel,
    split: &Split,
    batch: &[usize],
    allocation: &SubStepAllocation,
) -> Result<Vec<f64>> {
    let t = model.num_tasks() as f64;
    let (grads, _) = sub_step_shared_gradients(model, split, batch, allocation)?;
    let len = model
        .params
        .layout_matching(|p| p.starts_with("shared/"))
        .flat_len();
    let mut out = vec![0.0; len];
    for (task, grad) in grads.iter().enumerate() {
        if let Some(g) = grad {
            let w = model.losses[task].weight / t;
            for (o, &v) in out.iter_mut().zip(g) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}

/// Angle distribution between per-task gradients under FT or STA
/// allocations, on a frozen model.
pub fn profile_task_angles(
    model: &MultiTaskModel,
    split: &Split,
    opts: &ProfileOptions,
) -> Result<ProfileResult> {
    if !matches!(opts.mode, AllocationMode::Ft | AllocationMode::Sta { .. }) {
        return Err(Error::Config(
            "task-angle profiling supports the ft and sta modes".into(),
        ));
    }
    let t = model.num_tasks();
    let alloc_root = Stream::new(opts.seed, "alloc");
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    let mut step = 0usize;
    for epoch in 0..opts.epochs {
        for batch in epoch_batches(split.len(), opts.batch_size, opts.seed, epoch) {
            let plan = plan_step(opts.mode, batch.len(), t, &alloc_root.derive(step as u64))?;
            for sub in &plan.sub_steps {
                let (grads, _) = sub_step_shared_gradients(model, split, &batch, sub)?;
                for a in 0..t {
                    for b in (a + 1)..t {
                        match (&grads[a], &grads[b]) {
                            (Some(ga), Some(gb)) if norm(ga) > 0.0 && norm(gb) > 0.0 => {
                                samples.push(AngleSample {
                                    step,
                                    angle_deg: angle_between(ga, gb)?,
                                });
                            }
                            _ => skipped += 1,
                        }
                    }
                }
            }
            step += 1;
        }
    }
    let angles: Vec<f64> = samples.iter().map(|s| s.angle_deg).collect();
    Ok(ProfileResult {
        kind: ProfileKind::TaskPair,
        histogram: AngleHistogram::from_samples(&angles, skipped),
        samples,
    })
}

/// Angle distribution between the combined shared gradients of consecutive
/// optimizer (sub-)steps under FT or ISTA, on a frozen model.
pub fn profile_step_angles(
    model: &MultiTaskModel,
    split: &Split,
    opts: &ProfileOptions,
) -> Result<ProfileResult> {
    if !matches!(opts.mode, AllocationMode::Ft | AllocationMode::Ista { .. }) {
        return Err(Error::Config(
            "step-angle profiling supports the ft and ista modes".into(),
        ));
    }
    let t = model.num_tasks();
    let alloc_root = Stream::new(opts.seed, "alloc");
    let mut gradients: Vec<Vec<f64>> = Vec::new();
    let mut planned_step = 0usize;
    for epoch in 0..opts.epochs {
        for batch in epoch_batches(split.len(), opts.batch_size, opts.seed, epoch) {
            let plan = plan_step(
                opts.mode,
                batch.len(),
                t,
                &alloc_root.derive(planned_step as u64),
            )?;
            for sub in &plan.sub_steps {
                gradients.push(combined_shared_gradient(model, split, &batch, sub)?);
            }
            planned_step += 1;
        }
    }
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    for (i, pair) in gradients.windows(2).enumerate() {
        if norm(&pair[0]) == 0.0 || norm(&pair[1]) == 0.0 {
            skipped += 1;
            continue;
        }
        samples.push(AngleSample {
            step: i + 1,
            angle_deg: angle_between(&pair[0], &pair[1])?,
        });
    }
    let angles: Vec<f64> = samples.iter().map(|s| s.angle_deg).collect();
    Ok(ProfileResult {
        kind: ProfileKind::StepPair,
        histogram: AngleHistogram::from_samples(&angles, skipped),
        samples,
    })
}

/// Angles CSV: `kind,step,angle_deg`.
pub fn write_angles_csv(path: &Path, result: &ProfileResult) -> Result<()> {
    let mut lines = vec!["kind,step,angle_deg".to_string()];
    for s in &result.samples {
        lines.push(format!(
            "{},{},{}",
            result.kind.label(),
            s.step,
            crate::synth::format_f64(s.angle_deg)
        ));
    }
    std::fs::write(path, lines.join("\n") + "\n")?;
    Ok(())
}

pub fn write_histogram_json(path: &Path, histogram: &AngleHistogram) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(histogram)?)?;
    Ok(())
}

/// Standalone SVG bar chart of the histogram.
pub fn write_histogram_svg(path: &Path, histogram: &AngleHistogram, title: &str) -> Result<()> {
    let width = 720.0;
    let height = 360.0;
    let margin = 40.0;
    let plot_w = width - 2.0 * margin;
    let plot_h = height - 2.0 * margin;
    let max_count = histogram.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bar_w = plot_w / ANGLE_BINS as f64;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
        width / 2.0,
        title
    ));
    for (i, &c) in histogram.counts.iter().enumerate() {
        let h = c as f64 / max_count * plot_h;
        let x = margin + i as f64 * bar_w;
        let y = height - margin - h;
        svg.push_str(&format!(
            "  <rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#4878a8\"/>\n",
            x,
            y,
            bar_w - 1.0,
            h
        ));
    }
    for deg in (0..=180).step_by(45) {
        let x = margin + deg as f64 / 180.0 * plot_w;
        svg.push_str(&format!(
            "  <text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{deg}</text>\n",
            height - margin + 16.0
        ));
    }
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">mean {:.2}&#176;, n = {}</text>\n",
        width / 2.0,
        height - 6.0,
        histogram.mean,
        histogram.sample_count
    ));
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, DecoderSpec, EncoderSpec, HeadKind, LossKind, TaskLossSpec};
    use crate::synth::{generate, SyntheticTaskSpec, TaskKind};

    fn angle(a: &[f64], b: &[f64]) -> f64 {
        angle_between(a, b).unwrap()
    }

    #[test]
    fn angle_oracles() {
        assert!((angle(&[1.0, 0.0], &[0.0, 1.0]) - 90.0).abs() < 1e-12);
        // acos is steep near +-1; 1e-5 degrees absorbs the cosine rounding.
        assert!(angle(&[1.0, 1.0], &[2.0, 2.0]).abs() < 1e-5);
        assert!((angle(&[1.0, 2.0], &[2.0, 1.0]) - 36.8699).abs() < 1e-4);
        assert!((angle(&[1.0, 0.0], &[-1.0, 0.0]) - 180.0).abs() < 1e-5);
    }

    #[test]
    fn zero_vector_angle_is_error() {
        assert!(angle_between(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn angle_is_symmetric_and_scale_invariant() {
        let mut s = Stream::new(0, "angles");
        for _ in 0..200 {
            let a: Vec<f64> = (0..5).map(|_| s.next_normal()).collect();
            let b: Vec<f64> = (0..5).map(|_| s.next_normal()).collect();
            let a2: Vec<f64> = a.iter().map(|&x| 2.0 * x).collect();
            assert!((angle(&a, &b) - angle(&b, &a)).abs() < 1e-9);
            assert!((angle(&a, &b) - angle(&a2, &b)).abs() < 1e-9);
        }
    }

    #[test]
    fn histogram_totals_and_mass() {
        let h = AngleHistogram::from_samples(&[0.0, 90.0, 90.0, 179.9, 180.0], 2);
        assert_eq!(h.sample_count, 5);
        assert_eq!(h.counts.iter().sum::<u64>(), 5);
        assert_eq!(h.skipped, 2);
        assert!((h.mass_between(80.0, 100.0) - 0.4).abs() < 1e-12);
        assert!(h.mean >= 0.0 && h.mean <= 180.0);
    }

    fn duplicated_task_spec() -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            input_dim: 6,
            teacher_hidden: 8,
            relatedness: 1.0,
            tasks: vec![
                TaskKind::Regression { output_dim: 1, noise_std: 0.0 },
                TaskKind::Regression { output_dim: 1, noise_std: 0.0 },
            ],
            n_train: 64,
            n_eval: 16,
        }
    }

    fn small_model(input_dim: usize) -> MultiTaskModel {
        MultiTaskModel::init(
            EncoderSpec {
                input_dim,
                hidden: vec![8],
                activation: Activation::Tanh,
            },
            vec![
                DecoderSpec { task: 0, output_dim: 1, head: HeadKind::Regression },
                DecoderSpec { task: 1, output_dim: 1, head: HeadKind::Regression },
            ],
            vec![
                TaskLossSpec { task: 0, loss: LossKind::MeanSquaredError, weight: 1.0 },
                TaskLossSpec { task: 1, loss: LossKind::MeanSquaredError, weight: 1.0 },
            ],
            &Stream::new(4, "init"),
        )
        .unwrap()
    }

    #[test]
    fn identical_tasks_under_ft_give_zero_angles() {
        // Duplicate task 0 into task 1 completely: same targets, same loss,
        // same decoder weights. Per-task gradients then coincide and every
        // angle is 0.
        let spec = duplicated_task_spec();
        let mut data = generate(&spec, 0).unwrap();
        data.train.targets[1] = data.train.targets[0].clone();
        let mut model = small_model(spec.input_dim);
        for leaf in ["weight", "bias"] {
            let from = model.params.get(&format!("task/0/head/{leaf}")).unwrap().clone();
            model.params.set(&format!("task/1/head/{leaf}"), from).unwrap();
        }
        let opts = ProfileOptions {
            mode: AllocationMode::Ft,
            epochs: 1,
            batch_size: 16,
            seed: 0,
        };
        let result = profile_task_angles(&model, &data.train, &opts).unwrap();
        assert!(result.histogram.sample_count > 0);
        for s in &result.samples {
            assert!(s.angle_deg.abs() < 1e-5, "angle {}", s.angle_deg);
        }
    }

    #[test]
    fn single_example_sta_has_no_angle_samples() {
        let spec = duplicated_task_spec();
        let data = generate(&spec, 1).unwrap();
        let model = small_model(spec.input_dim);
        let opts = ProfileOptions {
            mode: AllocationMode::Sta { k: 1 },
            epochs: 2,
            batch_size: 1,
            seed: 3,
        };
        let result = profile_task_angles(&model, &data.train, &opts).unwrap();
        // One group is always empty with m = 1, k = 1, T = 2.
        assert_eq!(result.histogram.sample_count, 0);
        assert!(result.histogram.skipped > 0);
    }

    #[test]
    fn replayed_batch_under_ft_gives_zero_step_angle() {
        let spec = duplicated_task_spec();
        let data = generate(&spec, 2).unwrap();
        let model = small_model(spec.input_dim);
        // Two epochs over a dataset of exactly one batch: consecutive steps
        // replay the same batch, so consecutive combined gradients agree.
        let opts = ProfileOptions {
            mode: AllocationMode::Ft,
            epochs: 2,
            batch_size: 64,
            seed: 5,
        };
        let result = profile_step_angles(&model, &data.train, &opts).unwrap();
        assert_eq!(result.histogram.sample_count, 1);
        assert!(result.samples[0].angle_deg.abs() < 1e-6);
    }

    #[test]
    fn orthogonal_injected_gradients_measure_ninety() {
        // Bypass hook: the angle path itself.
        assert!((angle(&[0.0, 3.0, 0.0], &[4.0, 0.0, 0.0]) - 90.0).abs() < 1e-12);
    }

    #[test]
    fn profiling_does_not_mutate_parameters() {
        let spec = duplicated_task_spec();
        let data = generate(&spec, 3).unwrap();
        let model = small_model(spec.input_dim);
        let before = model.params.checksum();
        let opts = ProfileOptions {
            mode: AllocationMode::Sta { k: 1 },
            epochs: 2,
            batch_size: 8,
            seed: 1,
        };
        let _ = profile_task_angles(&model, &data.train, &opts).unwrap();
        let opts_step = ProfileOptions {
            mode: AllocationMode::Ista { k: 1 },
            epochs: 1,
            batch_size: 8,
            seed: 1,
        };
        let _ = profile_step_angles(&model, &data.train, &opts_step).unwrap();
        assert_eq!(model.params.checksum(), before);
    }

    #[test]
    fn profiles_are_reproducible() {
        let spec = duplicated_task_spec();
        let data = generate(&spec, 4).unwrap();
        let model = small_model(spec.input_dim);
        let opts = ProfileOptions {
            mode: AllocationMode::Sta { k: 1 },
            epochs: 2,
            batch_size: 8,
            seed: 9,
        };
        let a = profile_task_angles(&model, &data.train, &opts).unwrap();
        let b = profile_task_angles(&model, &data.train, &opts).unwrap();
        assert_eq!(a.histogram, b.histogram);
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.angle_deg.to_bits(), y.angle_deg.to_bits());
        }
    }

    #[test]
    fn wrong_mode_for_profile_kind_is_config_error() {
        let spec = duplicated_task_spec();
        let data = generate(&spec, 5).unwrap();
        let model = small_model(spec.input_dim);
        let bad_task = ProfileOptions {
            mode: AllocationMode::Ista { k: 1 },
            epochs: 1,
            batch_size: 8,
            seed: 0,
        };
        assert!(profile_task_angles(&model, &data.train, &bad_task).is_err());
        let bad_step = ProfileOptions {
            mode: AllocationMode::Sta { k: 1 },
            epochs: 1,
            batch_size: 8,
            seed: 0,
        };
        assert!(profile_step_angles(&model, &data.train, &bad_step).is_err());
    }
}
