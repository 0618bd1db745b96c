//! Temporary exploration probe (deleted before ship).

use mtlab_core::alloc::AllocationMode;
use mtlab_core::model::*;
use mtlab_core::rng::Stream;
use mtlab_core::synth;
use mtlab_core::telemetry::*;

fn default_model(seed: u64, hidden: Vec<usize>) -> MultiTaskModel {
    MultiTaskModel::init(
        EncoderSpec {
            input_dim: 16,
            hidden,
            activation: Activation::Tanh,
        },
        vec![
            DecoderSpec { task: 0, output_dim: 1, head: HeadKind::Regression },
            DecoderSpec { task: 1, output_dim: 4, head: HeadKind::Classification },
        ],
        vec![
            TaskLossSpec { task: 0, loss: LossKind::MeanSquaredError, weight: 1.0 },
            TaskLossSpec { task: 1, loss: LossKind::SoftmaxCrossEntropy, weight: 1.0 },
        ],
        &Stream::new(seed, "init"),
    )
    .unwrap()
}

fn warmup_ft(model: &mut MultiTaskModel, data: &synth::Dataset, steps: usize, lr: f64, seed: u64) {
    use mtlab_core::tape::Tape;
    let n = data.train.len();
    let m = 32;
    let mut step = 0;
    'outer: for epoch in 0.. {
        for batch in epoch_batches(n, m, seed, epoch) {
            if step >= steps {
                break 'outer;
            }
            let mut tape = Tape::new();
            let binding = model.params.bind(&mut tape);
            let x = tape.constant(data.train.gather_inputs(&batch).unwrap());
            let preds = model.forward(&mut tape, &binding, x).unwrap();
            let mut total = None;
            for t in 0..model.num_tasks() {
                let targets = data.train.gather_targets(t, &batch).unwrap();
                let per_ex = model.per_example_losses(&mut tape, t, preds[t], &targets).unwrap();
                let l = tape.mean(per_ex).unwrap();
                total = Some(match total {
                    Some(p) => tape.add(p, l).unwrap(),
                    None => l,
                });
            }
            let loss = tape.scale(total.unwrap(), 0.5).unwrap();
            let (paths, ids): (Vec<_>, Vec<_>) =
                binding.iter().map(|(p, id)| (p.to_string(), id)).unzip();
            let grads = tape.backward(loss, &ids).unwrap();
            let map: std::collections::BTreeMap<String, mtlab_core::tensor::Tensor> = paths
                .into_iter()
                .zip(grads.iter().map(|&g| tape.value(g).clone()))
                .collect();
            model.params.apply_step(&map, lr).unwrap();
            step += 1;
        }
    }
}

#[test]
#[ignore]
fn probe_fig2_batch() {
    for (label, spec) in [
        ("default", synth::default_spec()),
        ("rho1-noise0", {
            let mut s = synth::default_spec();
            s.relatedness = 1.0;
            s.tasks[0] = synth::TaskKind::Regression { output_dim: 1, noise_std: 0.0 };
            s
        }),
        ("two-reg", {
            let mut s = synth::default_spec();
            s.tasks = vec![
                synth::TaskKind::Regression { output_dim: 1, noise_std: 0.0 },
                synth::TaskKind::Regression { output_dim: 1, noise_std: 0.0 },
            ];
            s.relatedness = 1.0;
            s
        }),
    ] {
        for m in [2usize, 4, 8, 16, 32, 128] {
            let mut fig2_wins = 0;
            let mut ista_mean = 0.0;
            let mut ft_mean = 0.0;
            for seed in 0..10u64 {
                let data = synth::generate(&spec, seed).unwrap();
                let model = if matches!(spec.tasks[1], synth::TaskKind::Regression { .. }) {
                    MultiTaskModel::init(
                        EncoderSpec { input_dim: 16, hidden: vec![32, 4], activation: Activation::Tanh },
                        vec![
                            DecoderSpec { task: 0, output_dim: 1, head: HeadKind::Regression },
                            DecoderSpec { task: 1, output_dim: 1, head: HeadKind::Regression },
                        ],
                        vec![
                            TaskLossSpec { task: 0, loss: LossKind::MeanSquaredError, weight: 1.0 },
                            TaskLossSpec { task: 1, loss: LossKind::MeanSquaredError, weight: 1.0 },
                        ],
                        &Stream::new(seed, "init"),
                    )
                    .unwrap()
                } else {
                    default_model(seed, vec![32, 4])
                };
                let ft = ProfileOptions { mode: AllocationMode::Ft, epochs: 1, batch_size: m, seed };
                let ista = ProfileOptions { mode: AllocationMode::Ista { k: 1 }, epochs: 1, batch_size: m, seed };
                let ft_step = profile_step_angles(&model, &data.train, &ft).unwrap();
                let ista_step = profile_step_angles(&model, &data.train, &ista).unwrap();
                if ista_step.histogram.mean < ft_step.histogram.mean {
                    fig2_wins += 1;
                }
                ista_mean += ista_step.histogram.mean / 10.0;
                ft_mean += ft_step.histogram.mean / 10.0;
            }
            println!(
                "{label} m={m}: fig2 {fig2_wins}/10 | ista {ista_mean:.1} ft {ft_mean:.1}"
            );
        }
    }
}

#[test]
#[ignore]
fn probe_fig2_warmup() {
    let spec = synth::default_spec();
    for warmup in [0usize, 200, 500, 1000] {
        for hidden in [vec![32usize, 4], vec![32]] {
            let mut fig2_wins = 0;
            let mut within_sum = 0.0;
            let mut across_sum = 0.0;
            let mut ft_sum = 0.0;
            for seed in 0..10u64 {
                let data = synth::generate(&spec, seed).unwrap();
                let mut model = default_model(seed, hidden.clone());
                warmup_ft(&mut model, &data, warmup, 0.05, seed + 1000);

                let ft = ProfileOptions { mode: AllocationMode::Ft, epochs: 2, batch_size: 32, seed };
                let ista = ProfileOptions { mode: AllocationMode::Ista { k: 1 }, epochs: 2, batch_size: 32, seed };
                let ft_step = profile_step_angles(&model, &data.train, &ft).unwrap();
                let ista_step = profile_step_angles(&model, &data.train, &ista).unwrap();
                if ista_step.histogram.mean < ft_step.histogram.mean {
                    fig2_wins += 1;
                }
                // Sample index i pairs gradients (i-1, i); with 2 sub-steps
                // per batch, within-batch pairs sit at odd i.
                let (mut w, mut wn, mut a, mut an) = (0.0, 0, 0.0, 0);
                for s in &ista_step.samples {
                    if s.step % 2 == 1 {
                        w += s.angle_deg;
                        wn += 1;
                    } else {
                        a += s.angle_deg;
                        an += 1;
                    }
                }
                within_sum += w / wn as f64;
                across_sum += a / an as f64;
                ft_sum += ft_step.histogram.mean;
            }
            println!(
                "warmup {warmup} hidden {hidden:?}: fig2 {fig2_wins}/10 | ista within {:.1} across {:.1} vs ft {:.1}",
                within_sum / 10.0,
                across_sum / 10.0,
                ft_sum / 10.0
            );
        }
    }
}

#[test]
#[ignore]
fn probe_fig1_fig2() {
    let spec = synth::default_spec();
    for hidden in [vec![32usize], vec![8], vec![4], vec![32, 4], vec![16, 4], vec![32, 8]] {
        for m in [32usize] {
            let mut fig1_wins = 0;
            let mut fig2_wins = 0;
            let mut detail = String::new();
            for seed in 0..10u64 {
                let data = synth::generate(&spec, seed).unwrap();
                let model = default_model(seed, hidden.clone());

                let ft = ProfileOptions { mode: AllocationMode::Ft, epochs: 2, batch_size: m, seed };
                let sta = ProfileOptions { mode: AllocationMode::Sta { k: 1 }, epochs: 2, batch_size: m, seed };
                let ista = ProfileOptions { mode: AllocationMode::Ista { k: 1 }, epochs: 2, batch_size: m, seed };

                let ft_task = profile_task_angles(&model, &data.train, &ft).unwrap();
                let sta_task = profile_task_angles(&model, &data.train, &sta).unwrap();
                let m_ft = ft_task.histogram.mass_between(80.0, 100.0);
                let m_sta = sta_task.histogram.mass_between(80.0, 100.0);
                if m_sta > m_ft {
                    fig1_wins += 1;
                }

                let ft_step = profile_step_angles(&model, &data.train, &ft).unwrap();
                let ista_step = profile_step_angles(&model, &data.train, &ista).unwrap();
                if ista_step.histogram.mean < ft_step.histogram.mean {
                    fig2_wins += 1;
                }
                detail.push_str(&format!(
                    "  seed {seed}: fig1 sta {m_sta:.3} ft {m_ft:.3} | fig2 ista {:.1} ft {:.1}\n",
                    ista_step.histogram.mean, ft_step.histogram.mean
                ));
            }
            println!("hidden {hidden:?} m={m}: fig1 {fig1_wins}/10, fig2 {fig2_wins}/10");
            if fig1_wins < 10 || fig2_wins < 10 {
                print!("{detail}");
            }
        }
    }
}
