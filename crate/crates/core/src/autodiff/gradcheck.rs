use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_relative_error: f64,
    /// Largest relative error within each input tensor.
    pub per_parameter_errors: Vec<f64>,
    pub tolerance: f64,
    pub pass: bool,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Checks `backward()` for the scalar function built by `f` at `point`.
///
/// `f` receives a fresh tape with one leaf per tensor in `point` and must
/// return the scalar loss node.
pub fn finite_diff_check<F>(f: F, point: &[Tensor], h: f64, tolerance: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = point.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &leaves)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .map(|&id| grads.get(id).cloned().expect("leaf gradient"))
        .collect();

    let eval = |params: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = params.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &leaves)?;
        Ok(tape.value(loss).item())
    };
    check_against(eval, point, &analytic, h, tolerance)
}

/// Central-difference gradient of `eval` at `point`, one tensor per input.
pub fn numeric_gradient<E>(eval: E, point: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    E: Fn(&[Tensor]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("step h must be positive, got {h}")));
    }
    let mut probe: Vec<Tensor> = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for p in 0..point.len() {
        let mut values = Vec::with_capacity(point[p].numel());
        for i in 0..point[p].numel() {
            let x = point[p].values()[i];
            probe[p] = point[p].with_value(i, x + h)?;
            let plus = eval(&probe)?;
            probe[p] = point[p].with_value(i, x - h)?;
            let minus = eval(&probe)?;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::invalid(format!(
                    "non-finite function value probing tensor {p}, entry {i}"
                )));
            }
            values.push((plus - minus) / (2.0 * h));
        }
        probe[p] = point[p].clone();
        out.push(Tensor::new(point[p].shape().to_vec(), values)?);
    }
    Ok(out)
}

/// Compares caller-supplied analytic gradients with central differences of
/// `eval`. Useful on its own for gradients that do not come from a tape.
pub fn check_against<E>(
    eval: E,
    point: &[Tensor],
    analytic: &[Tensor],
    h: f64,
    tolerance: f64,
) -> Result<GradReport>
where
    E: Fn(&[Tensor]) -> Result<f64>,
{
    if analytic.len() != point.len()
        || analytic.iter().zip(point).any(|(a, p)| a.shape() != p.shape())
    {
        return Err(Error::shape("finite_diff_check", "gradient shapes differ from point"));
    }
    let numeric = numeric_gradient(eval, point, h)?;
    let per_parameter_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            a.values()
                .iter()
                .zip(n.values())
                .map(|(&a, &n)| relative_error(a, n))
                .fold(0.0, f64::max)
        })
        .collect();
    let max_relative_error = per_parameter_errors.iter().cloned().fold(0.0, f64::max);
    Ok(GradReport {
        max_relative_error,
        per_parameter_errors,
        tolerance,
        pass: max_relative_error <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Primitive;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube(tape: &mut Tape, x: &[NodeId]) -> Result<NodeId> {
        let c = tape.pow_const(x[0], 3.0)?;
        tape.reduce_sum(c)
    }

    #[test]
    fn cube_matches_analytic() {
        let point = [Tensor::scalar(2.0).unwrap()];
        let report = finite_diff_check(cube, &point, 1e-5, 1e-8).unwrap();
        assert!(report.pass, "{report:?}");
        assert!(report.max_relative_error < 1e-8);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let point = [Tensor::scalar(2.0).unwrap()];
        let eval = |p: &[Tensor]| Ok(p[0].item().powi(3));
        let good = check_against(eval, &point, &[Tensor::scalar(12.0).unwrap()], 1e-5, 1e-8).unwrap();
        assert!(good.pass);
        let bad = check_against(eval, &point, &[Tensor::scalar(11.0).unwrap()], 1e-5, 1e-8).unwrap();
        assert!(!bad.pass);
        assert!((bad.max_relative_error - 1.0 / 12.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_step_and_non_finite_probe() {
        let point = [Tensor::scalar(2.0).unwrap()];
        assert!(finite_diff_check(cube, &point, 0.0, 1e-4).is_err());
        let eval = |p: &[Tensor]| Ok(if p[0].item() > 2.0 { f64::NAN } else { 0.0 });
        assert!(check_against(eval, &point, &[Tensor::scalar(0.0).unwrap()], 1e-5, 1e-4).is_err());
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    /// Weighted sum with fixed pseudo-random weights, so each output entry
    /// gets a distinct upstream gradient.
    fn weighted_sum(tape: &mut Tape, y: NodeId) -> Result<NodeId> {
        let shape = tape.value(y).shape().to_vec();
        let n: usize = shape.iter().product();
        let w = Tensor::new(shape, (0..n).map(|i| 0.3 + 0.7 * ((i * 37 % 11) as f64) / 11.0).collect())?;
        let w = tape.constant(w);
        let p = tape.mul(y, w)?;
        tape.reduce_sum(p)
    }

    /// Input shapes and sampling ranges for each primitive.
    fn cases() -> Vec<(Primitive, Vec<(Vec<usize>, f64, f64)>)> {
        let m = |r: usize, c: usize| vec![r, c];
        vec![
            (Primitive::MatMul, vec![(m(3, 4), -1.0, 1.0), (m(4, 2), -1.0, 1.0)]),
            (Primitive::Add, vec![(m(2, 3), -1.0, 1.0), (m(2, 3), -1.0, 1.0)]),
            (Primitive::Sub, vec![(m(2, 3), -1.0, 1.0), (m(2, 3), -1.0, 1.0)]),
            (Primitive::Mul, vec![(m(2, 3), -1.0, 1.0), (m(2, 3), -1.0, 1.0)]),
            (Primitive::AddRowBias, vec![(m(3, 2), -1.0, 1.0), (vec![2], -1.0, 1.0)]),
            (Primitive::Scale(-1.7), vec![(m(2, 2), -1.0, 1.0)]),
            (Primitive::AddConst(0.4), vec![(m(2, 2), -1.0, 1.0)]),
            // Kept away from the kink so central differences stay on one side.
            (Primitive::Relu, vec![(m(3, 3), 0.1, 1.0)]),
            (Primitive::Log, vec![(m(2, 3), 0.2, 2.0)]),
            (Primitive::Exp, vec![(m(2, 3), -1.0, 1.0)]),
            (Primitive::Sqrt, vec![(m(2, 3), 0.2, 2.0)]),
            (Primitive::Square, vec![(m(2, 3), -1.0, 1.0)]),
            (Primitive::PowConst(2.5), vec![(m(2, 3), 0.2, 2.0)]),
            (Primitive::SoftmaxRows, vec![(m(3, 4), -2.0, 2.0)]),
            (Primitive::LogSoftmaxRows, vec![(m(3, 4), -2.0, 2.0)]),
            (Primitive::ReduceMean, vec![(m(3, 2), -1.0, 1.0)]),
            (Primitive::ReduceSum, vec![(m(3, 2), -1.0, 1.0)]),
            (Primitive::RowSums, vec![(m(3, 4), -1.0, 1.0)]),
            (Primitive::ColMeans, vec![(m(3, 4), -1.0, 1.0)]),
            (Primitive::Transpose, vec![(m(2, 3), -1.0, 1.0)]),
            (Primitive::Diag, vec![(m(3, 3), -1.0, 1.0)]),
            (Primitive::ConcatRows, vec![(m(2, 3), -1.0, 1.0), (m(1, 3), -1.0, 1.0)]),
            (Primitive::SliceRows { start: 1, end: 3 }, vec![(m(4, 2), -1.0, 1.0)]),
            (Primitive::FrobeniusSq, vec![(m(2, 3), -1.0, 1.0)]),
        ]
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (op, inputs) in cases() {
            for trial in 0..10 {
                let point: Vec<Tensor> = inputs
                    .iter()
                    .map(|(shape, lo, hi)| random_tensor(&mut rng, shape.clone(), *lo, *hi))
                    .collect();
                let report = finite_diff_check(
                    |tape, leaves| {
                        let y = tape.apply(op, leaves)?;
                        weighted_sum(tape, y)
                    },
                    &point,
                    1e-5,
                    1e-4,
                )
                .unwrap();
                assert!(report.pass, "{op} trial {trial}: {report:?}");
            }
        }
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_tensor(&mut rng, vec![4, 5], -1.0, 1.0);
        let b = random_tensor(&mut rng, vec![5, 3], -1.0, 1.0);
        let run = || {
            let mut tape = Tape::new();
            let (a, b) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
            let c = tape.matmul(a, b).unwrap();
            let s = tape.softmax_rows(c).unwrap();
            let l = tape.frobenius_sq(s).unwrap();
            let g = tape.backward(l).unwrap();
            (g.get(a).unwrap().clone(), g.get(b).unwrap().clone())
        };
        let (x, y) = (run(), run());
        assert_eq!(x.0.values(), y.0.values());
        assert_eq!(x.1.values(), y.1.values());
    }

    #[test]
    fn matmul_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let point: Vec<Tensor> = (0..3)
                .map(|_| random_tensor(&mut rng, vec![3, 3], -1.0, 1.0))
                .collect();
            let report = finite_diff_check(
                |tape, x| {
                    let ab = tape.matmul(x[0], x[1])?;
                    let abc = tape.matmul(ab, x[2])?;
                    weighted_sum(tape, abc)
                },
                &point,
                1e-5,
                1e-6,
            )
            .unwrap();
            assert!(report.pass, "{report:?}");
        }
    }
}
