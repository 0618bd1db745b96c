//! Hard-parameter-sharing multi-task network.
//!
//! One MLP encoder feeds `T` linear decoder heads. Encoder parameters live
//! under `shared/`, decoder parameters under `task/<t>/`, so partitioning
//! shared vs task-specific gradients is a namespace filter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamBinding, ParameterStore};
use crate::rng::Stream;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("encoder input_dim must be positive".into()));
        }
        if self.hidden.is_empty() {
            return Err(Error::Config("encoder needs at least one hidden layer".into()));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        Ok(())
    }

    /// Width of the representation fed to decoders.
    pub fn output_dim(&self) -> usize {
        *self.hidden.last().unwrap()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Regression,
    Classification,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub task: usize,
    pub output_dim: usize,
    pub head: HeadKind,
}

impl DecoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.output_dim == 0 {
            return Err(Error::Config("decoder output_dim must be >= 1".into()));
        }
        if self.head == HeadKind::Classification && self.output_dim < 2 {
            return Err(Error::Config(
                "classification decoders need output_dim >= 2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    MeanSquaredError,
    L1,
    SoftmaxCrossEntropy,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskLossSpec {
    pub task: usize,
    pub loss: LossKind,
    /// Static task weight from the multi-task loss combination.
    pub weight: f64,
}

impl TaskLossSpec {
    pub fn validate(&self, head: HeadKind) -> Result<()> {
        if self.weight <= 0.0 {
            return Err(Error::Config(format!(
                "task {} weight must be positive, got {}",
                self.task, self.weight
            )));
        }
        let compatible = match self.loss {
            LossKind::MeanSquaredError | LossKind::L1 => head == HeadKind::Regression,
            LossKind::SoftmaxCrossEntropy => head == HeadKind::Classification,
        };
        if !compatible {
            return Err(Error::Config(format!(
                "task {} loss {:?} incompatible with head {:?}",
                self.task, self.loss, head
            )));
        }
        Ok(())
    }
}

/// Per-task targets for one batch: dense values or class indices.
#[derive(Clone, Debug)]
pub enum Targets {
    Values(Tensor),
    Classes(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct MultiTaskModel {
    pub encoder: EncoderSpec,
    pub decoders: Vec<DecoderSpec>,
    pub losses: Vec<TaskLossSpec>,
    pub params: ParameterStore,
}

impl MultiTaskModel {
    /// Build and initialize a model. Layer weights are uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero, seeded per path.
    pub fn init(
        encoder: EncoderSpec,
        decoders: Vec<DecoderSpec>,
        losses: Vec<TaskLossSpec>,
        init_stream: &Stream,
    ) -> Result<Self> {
        encoder.validate()?;
        if decoders.len() < 2 {
            return Err(Error::Config(format!(
                "multi-task model needs T >= 2 decoders, got {}",
                decoders.len()
            )));
        }
        if decoders.len() != losses.len() {
            return Err(Error::Config(format!(
                "{} decoders but {} loss specs",
                decoders.len(),
                losses.len()
            )));
        }
        for (t, (d, l)) in decoders.iter().zip(&losses).enumerate() {
            d.validate()?;
            if d.task != t || l.task != t {
                return Err(Error::Config(format!(
                    "decoder/loss specs must be listed in task order, position {t}"
                )));
            }
            l.validate(d.head)?;
        }

        let mut params = ParameterStore::new();
        let mut fan_in = encoder.input_dim;
        for (layer, &width) in encoder.hidden.iter().enumerate() {
            init_layer(
                &mut params,
                &format!("shared/layer{layer}"),
                fan_in,
                width,
                init_stream,
            )?;
            fan_in = width;
        }
        for d in &decoders {
            init_layer(
                &mut params,
                &format!("task/{}/head", d.task),
                encoder.output_dim(),
                d.output_dim,
                init_stream,
            )?;
        }

        Ok(MultiTaskModel {
            encoder,
            decoders,
            losses,
            params,
        })
    }

    /// One encoder plus a single decoder, for single-task baselines. The
    /// decoder lives at `task/0/` regardless of which benchmark column it
    /// is trained against.
    pub fn init_single_task(
        encoder: EncoderSpec,
        mut decoder: DecoderSpec,
        mut loss: TaskLossSpec,
        init_stream: &Stream,
    ) -> Result<Self> {
        encoder.validate()?;
        decoder.validate()?;
        loss.validate(decoder.head)?;
        decoder.task = 0;
        loss.task = 0;

        let mut params = ParameterStore::new();
        let mut fan_in = encoder.input_dim;
        for (layer, &width) in encoder.hidden.iter().enumerate() {
            init_layer(
                &mut params,
                &format!("shared/layer{layer}"),
                fan_in,
                width,
                init_stream,
            )?;
            fan_in = width;
        }
        init_layer(
            &mut params,
            "task/0/head",
            encoder.output_dim(),
            decoder.output_dim,
            init_stream,
        )?;
        Ok(MultiTaskModel {
            encoder,
            decoders: vec![decoder],
            losses: vec![loss],
            params,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.decoders.len()
    }

    /// Encoder representation for a batch already on the tape.
    pub fn encode(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        inputs: NodeId,
    ) -> Result<NodeId> {
        let got = tape.value(inputs).cols();
        if tape.value(inputs).shape().len() != 2 || got != self.encoder.input_dim {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: tape.value(inputs).shape().to_vec(),
                rhs: vec![self.encoder.input_dim],
            });
        }
        let m = tape.value(inputs).rows();
        let mut h = inputs;
        for layer in 0..self.encoder.hidden.len() {
            h = linear(tape, binding, &format!("shared/layer{layer}"), h, m)?;
            h = match self.encoder.activation {
                Activation::Tanh => tape.tanh(h)?,
                Activation::Relu => tape.relu(h)?,
            };
        }
        Ok(h)
    }

    /// Decoder head `task` applied to (a subset of) the shared representation.
    pub fn decode(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        task: usize,
        representation: NodeId,
    ) -> Result<NodeId> {
        let m = tape.value(representation).rows();
        linear(tape, binding, &format!("task/{task}/head"), representation, m)
    }

    /// Full forward pass: the shared representation is computed once and fed
    /// to every decoder.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        inputs: NodeId,
    ) -> Result<Vec<NodeId>> {
        let rep = self.encode(tape, binding, inputs)?;
        (0..self.num_tasks())
            .map(|t| self.decode(tape, binding, t, rep))
            .collect()
    }

    /// (shared paths, per-task path lists); a disjoint cover of all paths.
    pub fn partition_parameters(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let shared = self
            .params
            .paths()
            .filter(|p| p.starts_with("shared/"))
            .map(str::to_string)
            .collect();
        let per_task = (0..self.num_tasks())
            .map(|t| {
                let prefix = format!("task/{t}/");
                self.params
                    .paths()
                    .filter(|p| p.starts_with(&prefix))
                    .map(str::to_string)
                    .collect()
            })
            .collect();
        (shared, per_task)
    }

    /// Per-example losses for `task` as a `[m]` tape vector.
    pub fn per_example_losses(
        &self,
        tape: &mut Tape,
        task: usize,
        predictions: NodeId,
        targets: &Targets,
    ) -> Result<NodeId> {
        let spec = &self.losses[task];
        per_example_losses(tape, spec.loss, predictions, targets)
    }
}

fn init_layer(
    params: &mut ParameterStore,
    path: &str,
    fan_in: usize,
    fan_out: usize,
    init_stream: &Stream,
) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut stream = init_stream.derive_str(path);
    let w: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| stream.next_range(-bound, bound))
        .collect();
    params.insert(format!("{path}/weight"), Tensor::matrix(fan_in, fan_out, w)?)?;
    params.insert(format!("{path}/bias"), Tensor::vector(vec![0.0; fan_out]))?;
    Ok(())
}

fn linear(
    tape: &mut Tape,
    binding: &ParamBinding,
    path: &str,
    input: NodeId,
    rows: usize,
) -> Result<NodeId> {
    let w = binding
        .id(&format!("{path}/weight"))
        .ok_or_else(|| Error::Contract(format!("missing parameter {path}/weight")))?;
    let b = binding
        .id(&format!("{path}/bias"))
        .ok_or_else(|| Error::Contract(format!("missing parameter {path}/bias")))?;
    let xw = tape.matmul(input, w)?;
    let bb = tape.broadcast_rows(b, rows)?;
    tape.add(xw, bb)
}

/// Per-example losses as a `[m]` vector: mean over output dims for MSE/L1,
/// per-row cross-entropy for classification.
pub fn per_example_losses(
    tape: &mut Tape,
    loss: LossKind,
    predictions: NodeId,
    targets: &Targets,
) -> Result<NodeId> {
    match (loss, targets) {
        (LossKind::MeanSquaredError, Targets::Values(y)) => {
            let o = y.cols() as f64;
            let yv = tape.constant(y.clone());
            let d = tape.sub(predictions, yv)?;
            let sq = tape.square(d)?;
            let rows = tape.sum_axis1(sq)?;
            tape.scale(rows, 1.0 / o)
        }
        (LossKind::L1, Targets::Values(y)) => {
            let o = y.cols() as f64;
            let yv = tape.constant(y.clone());
            let d = tape.sub(predictions, yv)?;
            let a = tape.abs(d)?;
            let rows = tape.sum_axis1(a)?;
            tape.scale(rows, 1.0 / o)
        }
        (LossKind::SoftmaxCrossEntropy, Targets::Classes(labels)) => {
            tape.softmax_xent(predictions, labels.clone())
        }
        (kind, _) => Err(Error::Contract(format!(
            "loss {kind:?} incompatible with provided target kind"
        ))),
    }
}

/// Scalar per-example-mean task loss, the `L_t` used by training and tests.
pub fn task_loss(
    tape: &mut Tape,
    loss: LossKind,
    predictions: NodeId,
    targets: &Targets,
) -> Result<NodeId> {
    let per_ex = per_example_losses(tape, loss, predictions, targets)?;
    tape.mean(per_ex)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn two_task_model(input: usize, hidden: Vec<usize>, outs: (usize, usize)) -> MultiTaskModel {
        MultiTaskModel::init(
            EncoderSpec {
                input_dim: input,
                hidden,
                activation: Activation::Tanh,
            },
            vec![
                DecoderSpec {
                    task: 0,
                    output_dim: outs.0,
                    head: HeadKind::Regression,
                },
                DecoderSpec {
                    task: 1,
                    output_dim: outs.1,
                    head: if outs.1 >= 2 {
                        HeadKind::Classification
                    } else {
                        HeadKind::Regression
                    },
                },
            ],
            vec![
                TaskLossSpec {
                    task: 0,
                    loss: LossKind::MeanSquaredError,
                    weight: 1.0,
                },
                TaskLossSpec {
                    task: 1,
                    loss: if outs.1 >= 2 {
                        LossKind::SoftmaxCrossEntropy
                    } else {
                        LossKind::L1
                    },
                    weight: 1.0,
                },
            ],
            &Stream::new(0, "init"),
        )
        .unwrap()
    }

    fn random_batch(m: usize, d: usize, seed: u64) -> Tensor {
        let mut s = Stream::new(seed, "batch");
        Tensor::matrix(m, d, (0..m * d).map(|_| s.next_normal()).collect()).unwrap()
    }

    #[test]
    fn forward_shapes_propagate() {
        let model = two_task_model(8, vec![16], (1, 4));
        let mut tape = Tape::new();
        let binding = model.params.bind(&mut tape);
        let x = tape.constant(random_batch(5, 8, 1));
        let preds = model.forward(&mut tape, &binding, x).unwrap();
        assert_eq!(tape.value(preds[0]).shape(), &[5, 1]);
        assert_eq!(tape.value(preds[1]).shape(), &[5, 4]);
    }

    #[test]
    fn zero_parameters_give_zero_predictions() {
        let mut model = two_task_model(8, vec![16], (1, 4));
        let zeros = vec![0.0; model.params.flat_len()];
        model.params.unflatten(&zeros).unwrap();
        let mut tape = Tape::new();
        let binding = model.params.bind(&mut tape);
        let x = tape.constant(random_batch(3, 8, 2));
        let preds = model.forward(&mut tape, &binding, x).unwrap();
        for p in preds {
            assert!(tape.value(p).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_example_matches_batched_row() {
        let model = two_task_model(8, vec![16], (1, 4));
        let batch = random_batch(6, 8, 3);

        let mut tape = Tape::new();
        let binding = model.params.bind(&mut tape);
        let x = tape.constant(batch.clone());
        let preds = model.forward(&mut tape, &binding, x).unwrap();
        let batched_row: Vec<f64> = (0..4).map(|c| tape.value(preds[1]).at(2, c)).collect();

        let mut tape1 = Tape::new();
        let binding1 = model.params.bind(&mut tape1);
        let row = Tensor::matrix(1, 8, batch.data()[2 * 8..3 * 8].to_vec()).unwrap();
        let x1 = tape1.constant(row);
        let preds1 = model.forward(&mut tape1, &binding1, x1).unwrap();
        let single: Vec<f64> = tape1.value(preds1[1]).data().to_vec();

        for (a, b) in batched_row.iter().zip(&single) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn partition_covers_all_parameters_disjointly() {
        let model = two_task_model(8, vec![16], (1, 1));
        let (shared, per_task) = model.partition_parameters();
        assert_eq!(shared.len(), 2); // weight + bias of one hidden layer
        assert_eq!(per_task.len(), 2);
        assert_eq!(per_task[0].len(), 2);

        let mut all: Vec<String> = shared.clone();
        for t in &per_task {
            all.extend(t.iter().cloned());
        }
        all.sort();
        let expected: Vec<String> = model.params.paths().map(str::to_string).collect();
        assert_eq!(all, expected);

        for s in &shared {
            for t in &per_task {
                assert!(!t.contains(s));
            }
        }
    }

    #[test]
    fn shared_flat_length_is_parameter_count() {
        let model = two_task_model(8, vec![16], (1, 1));
        let layout = model.params.layout_matching(|p| p.starts_with("shared/"));
        assert_eq!(layout.flat_len(), 8 * 16 + 16); // 144
    }

    #[test]
    fn identically_seeded_constructions_match() {
        let a = two_task_model(8, vec![16], (1, 4));
        let b = two_task_model(8, vec![16], (1, 4));
        assert_eq!(a.params.checksum(), b.params.checksum());
    }

    #[test]
    fn task_loss_values() {
        let mut tape = Tape::new();
        // MSE of identical vectors is 0.
        let p = tape.leaf(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let l = task_loss(
            &mut tape,
            LossKind::MeanSquaredError,
            p,
            &Targets::Values(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap()),
        )
        .unwrap();
        assert_eq!(tape.scalar_value(l).unwrap(), 0.0);

        // L1 of [3] vs [1] is 2.
        let p = tape.leaf(Tensor::matrix(1, 1, vec![3.0]).unwrap());
        let l = task_loss(
            &mut tape,
            LossKind::L1,
            p,
            &Targets::Values(Tensor::matrix(1, 1, vec![1.0]).unwrap()),
        )
        .unwrap();
        assert_eq!(tape.scalar_value(l).unwrap(), 2.0);

        // Uniform 2-class logits vs any label is ln 2.
        let p = tape.leaf(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        let l = task_loss(
            &mut tape,
            LossKind::SoftmaxCrossEntropy,
            p,
            &Targets::Classes(vec![0, 1]),
        )
        .unwrap();
        assert!((tape.scalar_value(l).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn invalid_class_index_is_domain_error() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        let r = task_loss(
            &mut tape,
            LossKind::SoftmaxCrossEntropy,
            p,
            &Targets::Classes(vec![3]),
        );
        assert!(matches!(r, Err(Error::InvalidClassIndex { index: 3, classes: 3 })));
    }

    #[test]
    fn decoder_gradients_are_task_local() {
        let model = two_task_model(6, vec![10], (1, 3));
        let mut tape = Tape::new();
        let binding = model.params.bind(&mut tape);
        let x = tape.constant(random_batch(4, 6, 7));
        let preds = model.forward(&mut tape, &binding, x).unwrap();
        // Loss that involves only task 0.
        let loss = task_loss(
            &mut tape,
            LossKind::MeanSquaredError,
            preds[0],
            &Targets::Values(Tensor::matrix(4, 1, vec![0.5; 4]).unwrap()),
        )
        .unwrap();
        let (_, per_task) = model.partition_parameters();
        let wrt = binding.ids_for(&per_task[1]).unwrap();
        let grads = tape.backward(loss, &wrt).unwrap();
        for g in grads {
            assert!(tape.value(g).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn shared_gradient_of_total_is_sum_of_per_task() {
        let model = two_task_model(6, vec![10], (1, 3));
        let batch = random_batch(4, 6, 9);
        let targets0 = Targets::Values(Tensor::matrix(4, 1, vec![0.2, -0.4, 0.9, 0.1]).unwrap());
        let targets1 = Targets::Classes(vec![0, 2, 1, 0]);

        let mut tape = Tape::new();
        let binding = model.params.bind(&mut tape);
        let x = tape.constant(batch);
        let preds = model.forward(&mut tape, &binding, x).unwrap();
        let l0 = model
            .per_example_losses(&mut tape, 0, preds[0], &targets0)
            .unwrap();
        let l0 = tape.mean(l0).unwrap();
        let l1 = model
            .per_example_losses(&mut tape, 1, preds[1], &targets1)
            .unwrap();
        let l1 = tape.mean(l1).unwrap();
        let total = tape.add(l0, l1).unwrap();

        let (shared, _) = model.partition_parameters();
        let wrt = binding.ids_for(&shared).unwrap();
        let g_total = tape.backward(total, &wrt).unwrap();
        let g0 = tape.backward(l0, &wrt).unwrap();
        let g1 = tape.backward(l1, &wrt).unwrap();

        let layout = model.params.layout_matching(|p| p.starts_with("shared/"));
        let to_map = |tape: &Tape, ids: &[crate::tape::NodeId]| -> BTreeMap<String, Tensor> {
            shared
                .iter()
                .cloned()
                .zip(ids.iter().map(|&id| tape.value(id).clone()))
                .collect()
        };
        let ft = layout.flatten(&to_map(&tape, &g_total)).unwrap();
        let f0 = layout.flatten(&to_map(&tape, &g0)).unwrap();
        let f1 = layout.flatten(&to_map(&tape, &g1)).unwrap();
        for i in 0..ft.len() {
            assert!(
                (ft[i] - (f0[i] + f1[i])).abs() < 1e-10,
                "linearity violated at {i}"
            );
        }
    }
}
