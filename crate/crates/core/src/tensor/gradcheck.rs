//! Central finite-difference gradient checks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{attention, Tape, Tensor, TensorError, Var};
use crate::scalar::Real;

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Largest relative error between the tape gradient of scalar `f` at `at` and
/// a central difference with step `h`.
pub fn grad_check<F>(f: F, at: &Tensor<f64>, h: f64) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>, TensorError>,
{
    grad_check_many(f, std::slice::from_ref(at), h)
}

/// Like [`grad_check`] for several inputs; returns the worst error over all.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>, TensorError>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.param(x.clone())).collect();
        Ok(f(&vars)?.value().item())
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&vars)?;
    if out.value().len() != 1 {
        return Err(TensorError::InvalidArgument { op: "grad_check", reason: "output is not scalar".into() });
    }
    let grads = tape.backward(out);
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.tensor(v);
        for k in 0..inputs[i].len() {
            let x0 = inputs[i].data()[k];
            probe[i].data_mut()[k] = x0 + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[k] = x0 - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[k] = x0;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[k].as_f64(), numeric));
        }
    }
    Ok(worst)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values at least `gap` away from zero, for ops with a kink there.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Pairwise-distinct values, for max pooling.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).expect("length matches")
}

type Case = (&'static str, Vec<Tensor<f64>>, OpFn);
type OpFn = Box<dyn for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>, TensorError>>;

/// Reduces an op output to a scalar through fixed random weights, so every
/// output coordinate contributes a distinct amount.
fn probe<'t>(y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, &y.shape(), -1.0, 1.0);
    y.mul(&y.tape().constant(w)).map(|z| z.sum())
}

fn op_cases(seed: u64) -> Vec<Case> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut r;
    let m = |r: &mut ChaCha8Rng, s: &[usize]| rand_tensor(r, s, -1.0, 1.0);
    let mut cases: Vec<Case> = vec![
        ("add", vec![m(r, &[3, 4]), m(r, &[3, 4])], Box::new(|v| probe(v[0].add(&v[1])?, 1))),
        ("sub", vec![m(r, &[3, 4]), m(r, &[3, 4])], Box::new(|v| probe(v[0].sub(&v[1])?, 2))),
        ("mul", vec![m(r, &[3, 4]), m(r, &[3, 4])], Box::new(|v| probe(v[0].mul(&v[1])?, 3))),
        ("scale", vec![m(r, &[5])], Box::new(|v| probe(v[0].scale(-1.7), 4))),
        ("add_row_bias", vec![m(r, &[3, 4]), m(r, &[4])], Box::new(|v| probe(v[0].add_row_bias(&v[1])?, 5))),
        ("transpose", vec![m(r, &[3, 5])], Box::new(|v| probe(v[0].transpose()?, 6))),
        ("reshape", vec![m(r, &[2, 6])], Box::new(|v| probe(v[0].reshape(&[3, 4])?, 7))),
        ("relu", vec![off_zero(r, &[4, 5], 0.05)], Box::new(|v| probe(v[0].relu(), 8))),
        ("sigmoid", vec![m(r, &[4, 5])], Box::new(|v| probe(v[0].sigmoid(), 9))),
        ("softmax", vec![m(r, &[3, 5])], Box::new(|v| probe(v[0].softmax(1)?, 10))),
        ("softmax_axis0", vec![m(r, &[3, 5])], Box::new(|v| probe(v[0].softmax(0)?, 11))),
        ("sum", vec![m(r, &[7])], Box::new(|v| Ok(v[0].sum()))),
        ("mse_loss", vec![m(r, &[2, 3]), m(r, &[2, 3])], Box::new(|v| v[0].mse_loss(&v[1]))),
        (
            "layer_norm",
            vec![m(r, &[3, 6]), m(r, &[6]), m(r, &[6])],
            Box::new(|v| probe(v[0].layer_norm(&v[1], &v[2], 1e-5)?, 12)),
        ),
        (
            "conv2d",
            vec![m(r, &[2, 2, 5, 5]), m(r, &[3, 2, 3, 3]), m(r, &[3])],
            Box::new(|v| probe(v[0].conv2d(&v[1], Some(&v[2]), 1, 1)?, 13)),
        ),
        (
            "conv2d_stride2",
            vec![m(r, &[1, 2, 6, 6]), m(r, &[2, 2, 3, 3])],
            Box::new(|v| probe(v[0].conv2d(&v[1], None, 2, 1)?, 14)),
        ),
        (
            "conv2d_1x1",
            vec![m(r, &[2, 3, 4, 4]), m(r, &[2, 3, 1, 1]), m(r, &[2])],
            Box::new(|v| probe(v[0].conv2d(&v[1], Some(&v[2]), 1, 0)?, 15)),
        ),
        (
            "conv_transpose2d",
            vec![m(r, &[2, 3, 3, 3]), m(r, &[3, 2, 2, 2]), m(r, &[2])],
            Box::new(|v| probe(v[0].conv_transpose2d(&v[1], Some(&v[2]))?, 16)),
        ),
        ("max_pool2d", vec![distinct(r, &[2, 2, 4, 4])], Box::new(|v| probe(v[0].max_pool2d()?, 17))),
        ("upsample2x", vec![m(r, &[1, 2, 3, 3])], Box::new(|v| probe(v[0].upsample2x()?, 18))),
        ("repeat_channels", vec![m(r, &[2, 1, 3, 3])], Box::new(|v| probe(v[0].repeat_channels(3)?, 19))),
        (
            "concat_channels",
            vec![m(r, &[2, 1, 3, 3]), m(r, &[2, 2, 3, 3])],
            Box::new(|v| probe(v[0].concat_channels(&v[1])?, 20)),
        ),
        (
            "concat_cols",
            vec![m(r, &[3, 2]), m(r, &[3, 4])],
            Box::new(|v| probe(Var::concat_cols(&[v[0], v[1]])?, 21)),
        ),
        (
            "attention",
            vec![m(r, &[4, 8]), m(r, &[8, 8]), m(r, &[8, 8]), m(r, &[8, 8])],
            Box::new(|v| attention(&v[0], &v[0], &v[1], &v[2], &v[3], None).map(|y| y.sum())),
        ),
        (
            "cross_attention",
            vec![m(r, &[3, 4]), m(r, &[5, 6]), m(r, &[4, 3]), m(r, &[6, 3]), m(r, &[6, 2])],
            Box::new(|v| probe(attention(&v[0], &v[1], &v[2], &v[3], &v[4], None)?, 22)),
        ),
    ];
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let (sa, sb) = (if ta { [4, 3] } else { [3, 4] }, if tb { [2, 4] } else { [4, 2] });
        let name = match (ta, tb) {
            (false, false) => "matmul",
            (true, false) => "matmul_ta",
            (false, true) => "matmul_tb",
            (true, true) => "matmul_ta_tb",
        };
        cases.push((name, vec![m(r, &sa), m(r, &sb)], Box::new(move |v| probe(v[0].matmul_t(&v[1], ta, tb)?, 23))));
    }
    cases
}

/// Worst relative error per differentiable op, 64-bit, step `1e-6`.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, f64)>, TensorError> {
    op_cases(seed).into_iter().map(|(name, inputs, f)| Ok((name, grad_check_many(f, &inputs, 1e-6)?))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 0.5) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn every_op_passes() {
        for (name, err) in op_suite(7).unwrap() {
            assert!(err < 1e-5, "{name}: {err}");
        }
    }

    #[test]
    fn sum_of_squares_and_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[10], -2.0, 2.0);
        assert!(grad_check(|v| Ok(v[0].mul(&v[0])?.sum()), &x, 1e-5).unwrap() < 1e-7);
        let err = grad_check(
            |v| {
                let z = v[0].tape().constant(Tensor::zeros(&[10]));
                v[0].mse_loss(&z)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn checks_a_polynomial() {
        let x = Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap();
        let err = grad_check(|v| v[0].mul(&v[0])?.mul(&v[0]).map(|y| y.sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }
}
