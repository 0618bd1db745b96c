//! Central finite-difference gradient oracle.
//!
//! This is the independent check used throughout the test suites: the
//! function under test is rebuilt on a fresh tape for every perturbed
//! evaluation, so the oracle shares no state with the analytic path.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamBinding, ParameterStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// A scalar function of a parameter store, expressed as a tape program.
pub trait ScalarProgram {
    fn build(&self, tape: &mut Tape, binding: &ParamBinding) -> Result<NodeId>;
}

impl<F> ScalarProgram for F
where
    F: Fn(&mut Tape, &ParamBinding) -> Result<NodeId>,
{
    fn build(&self, tape: &mut Tape, binding: &ParamBinding) -> Result<NodeId> {
        self(tape, binding)
    }
}

fn evaluate(program: &impl ScalarProgram, params: &ParameterStore) -> Result<f64> {
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape);
    let out = program.build(&mut tape, &binding)?;
    tape.scalar_value(out)
}

/// Analytic gradients of `program` for every parameter path.
pub fn analytic_gradients(
    program: &impl ScalarProgram,
    params: &ParameterStore,
) -> Result<BTreeMap<String, Tensor>> {
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape);
    let out = program.build(&mut tape, &binding)?;
    let (paths, ids): (Vec<_>, Vec<_>) = binding.iter().map(|(p, id)| (p.to_string(), id)).unzip();
    let grads = tape.backward(out, &ids)?;
    Ok(paths
        .into_iter()
        .zip(grads)
        .map(|(p, g)| (p, tape.value(g).clone()))
        .collect())
}

/// Max over parameters of `|analytic - central| / max(1, |central|)`.
///
/// Evaluates the program twice on unperturbed parameters first; if the two
/// values disagree bit-for-bit the function is not deterministic and the
/// oracle result would be meaningless.
pub fn finite_diff_check(
    program: &impl ScalarProgram,
    params: &ParameterStore,
    epsilon: f64,
) -> Result<f64> {
    if epsilon <= 0.0 {
        return Err(Error::Contract(format!(
            "finite_diff_check needs epsilon > 0, got {epsilon}"
        )));
    }
    let first = evaluate(program, params)?;
    let second = evaluate(program, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::OracleInvalid(format!(
            "two forward passes disagree: {first} vs {second}"
        )));
    }

    let analytic = analytic_gradients(program, params)?;
    let mut flat = params.flatten();
    let mut worst = 0.0f64;
    let mut offset = 0;
    for (path, base) in params.iter() {
        let grad = &analytic[path];
        for i in 0..base.len() {
            let idx = offset + i;
            let saved = flat[idx];

            flat[idx] = saved + epsilon;
            let mut plus = params.clone();
            plus.unflatten(&flat)?;
            let f_plus = evaluate(program, &plus)?;

            flat[idx] = saved - epsilon;
            let mut minus = params.clone();
            minus.unflatten(&flat)?;
            let f_minus = evaluate(program, &minus)?;

            flat[idx] = saved;

            let central = (f_plus - f_minus) / (2.0 * epsilon);
            let err = (grad.data()[i] - central).abs() / central.abs().max(1.0);
            worst = worst.max(err);
        }
        offset += base.len();
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn linear_program(tape: &mut Tape, binding: &ParamBinding) -> Result<NodeId> {
        let w = binding.id("w").unwrap();
        let c = tape.constant(Tensor::vector(vec![2.0, -3.0, 0.5]));
        tape.dot(w, c)
    }

    #[test]
    fn linear_function_is_exact() {
        let mut params = ParameterStore::new();
        params
            .insert("w", Tensor::vector(vec![1.0, 2.0, 3.0]))
            .unwrap();
        let err = finite_diff_check(&linear_program, &params, 1e-5).unwrap();
        assert!(err <= 1e-8, "err {err}");
    }

    #[test]
    fn constant_function_has_zero_gradient_and_zero_error() {
        let program = |tape: &mut Tape, _: &ParamBinding| -> Result<NodeId> {
            Ok(tape.scalar_constant(7.0))
        };
        let mut params = ParameterStore::new();
        params.insert("w", Tensor::vector(vec![0.3, 0.4])).unwrap();
        let grads = analytic_gradients(&program, &params).unwrap();
        assert_eq!(grads["w"].data(), &[0.0, 0.0]);
        let err = finite_diff_check(&program, &params, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn mse_gradient_matches_central_differences() {
        // || W x - y ||^2 / n on a random 4x3 case.
        let mut stream = Stream::new(11, "fd-mse");
        let mut params = ParameterStore::new();
        let w: Vec<f64> = (0..12).map(|_| stream.next_normal()).collect();
        params.insert("W", Tensor::matrix(4, 3, w).unwrap()).unwrap();
        let x: Vec<f64> = (0..3).map(|_| stream.next_normal()).collect();
        let y: Vec<f64> = (0..4).map(|_| stream.next_normal()).collect();

        let program = move |tape: &mut Tape, binding: &ParamBinding| -> Result<NodeId> {
            let w = binding.id("W").unwrap();
            let xv = tape.constant(Tensor::matrix(3, 1, x.clone()).unwrap());
            let yv = tape.constant(Tensor::matrix(4, 1, y.clone()).unwrap());
            let pred = tape.matmul(w, xv)?;
            tape.mse(pred, yv)
        };
        let err = finite_diff_check(&program, &params, 1e-5).unwrap();
        assert!(err <= 1e-4, "err {err}");
    }

    #[test]
    fn two_layer_tanh_network_passes_at_1e4() {
        let mut stream = Stream::new(5, "fd-tanh");
        let mut params = ParameterStore::new();
        let w1: Vec<f64> = (0..12).map(|_| stream.next_normal() * 0.5).collect();
        let w2: Vec<f64> = (0..4).map(|_| stream.next_normal() * 0.5).collect();
        params.insert("w1", Tensor::matrix(3, 4, w1).unwrap()).unwrap();
        params.insert("w2", Tensor::matrix(4, 1, w2).unwrap()).unwrap();
        let x: Vec<f64> = (0..6).map(|_| stream.next_normal()).collect();

        let program = move |tape: &mut Tape, binding: &ParamBinding| -> Result<NodeId> {
            let w1 = binding.id("w1").unwrap();
            let w2 = binding.id("w2").unwrap();
            let xv = tape.constant(Tensor::matrix(2, 3, x.clone()).unwrap());
            let h = tape.matmul(xv, w1)?;
            let a = tape.tanh(h)?;
            let out = tape.matmul(a, w2)?;
            tape.mean(out)
        };
        let err = finite_diff_check(&program, &params, 1e-5).unwrap();
        assert!(err <= 1e-4, "err {err}");
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::cell::Cell;
        let counter = Cell::new(0.0f64);
        let program = move |tape: &mut Tape, _: &ParamBinding| -> Result<NodeId> {
            counter.set(counter.get() + 1.0);
            Ok(tape.scalar_constant(counter.get()))
        };
        let mut params = ParameterStore::new();
        params.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            finite_diff_check(&program, &params, 1e-5),
            Err(Error::OracleInvalid(_))
        ));
    }
}
