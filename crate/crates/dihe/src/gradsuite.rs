//! Finite-difference coverage for every differentiable op and loss.
//!
//! Each named check builds a scalar function of one tensor input, runs
//! [`grad_check`] on randomized instances, and reports the worst relative
//! error. Inputs are kept away from kinks (relu, hinge, clamp edges,
//! pooling ties) so the central difference is valid.

use crate::losses::{self, LossWeights};
use crate::tensor::{grad_check, Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "matmul",
    "relu",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "log",
    "clamp",
    "sum",
    "mean",
    "sum_rows",
    "bias_add",
    "concat",
    "reshape",
    "l2_normalize",
    "zncc",
    "conv2d",
    "max_pool2d",
    "global_max_pool",
    "global_avg_pool",
    "nearest_upsample",
    "triplet_loss",
    "discriminator_loss",
    "generator_loss",
];

/// Step size for the central difference, per element width.
fn eps<F: Scalar>() -> F {
    if std::mem::size_of::<F>() == 4 {
        F::from_f64(1e-2)
    } else {
        F::from_f64(1e-5)
    }
}

/// Acceptance threshold on the relative error, per element width.
pub fn tolerance<F: Scalar>() -> f64 {
    if std::mem::size_of::<F>() == 4 {
        1e-2
    } else {
        1e-5
    }
}

fn rand_t<F: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<F> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_f64(shape, &data)
}

/// Uniform magnitudes in [min_abs, max_abs] with random sign; keeps values
/// clear of the origin.
fn away_from_zero<F: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: Vec<usize>,
    min_abs: f64,
    max_abs: f64,
) -> Tensor<F> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(min_abs..max_abs)
        })
        .collect();
    Tensor::from_f64(shape, &data)
}

/// A shuffled ladder of well-separated levels; no two entries are within
/// 0.1 of each other, so argmax selections are stable under the probe step.
fn separated<F: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let mut levels: Vec<f64> = (0..n).map(|i| -1.0 + 0.13 * i as f64).collect();
    levels.shuffle(rng);
    Tensor::from_f64(shape, &levels)
}

fn unit_rows<F: Scalar>(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
        data.extend(row.into_iter().map(|v| v / norm));
    }
    Tensor::from_f64(vec![n, d], &data)
}

/// Checks d/dx of sum(op(x) * w) for a random weighting w matched to the
/// op's output shape. The weighting keeps reduction gradients nontrivial.
fn check_weighted<F: Scalar>(
    build: &dyn Fn(&Tape<F>, Var) -> Var,
    x: &Tensor<F>,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let out_shape = {
        let tape = Tape::new();
        let xv = tape.input(x.clone());
        tape.shape_of(build(&tape, xv))
    };
    let w: Tensor<F> = rand_t(rng, out_shape, -1.0, 1.0);
    grad_check(
        |tape, xv| {
            let wv = tape.input(w.clone());
            tape.sum(tape.mul(build(tape, xv), wv))
        },
        x,
        eps::<F>(),
    )
}

/// Runs one randomized instance of the named check. Returns None for an
/// unknown name.
fn run_once<F: Scalar>(name: &str, rng: &mut ChaCha8Rng) -> Option<f64> {
    let e = eps::<F>();
    let err = match name {
        "add" => {
            let c: Tensor<F> = rand_t(rng, vec![2, 3], -1.0, 1.0);
            let x: Tensor<F> = rand_t(rng, vec![2, 3], -1.0, 1.0);
            check_weighted(&|tape, xv| tape.add(xv, tape.input(c.clone())), &x, rng)
        }
        "sub" => {
            let c: Tensor<F> = rand_t(rng, vec![2, 3], -1.0, 1.0);
            let x: Tensor<F> = rand_t(rng, vec![2, 3], -1.0, 1.0);
            let a = check_weighted(&|tape, xv| tape.sub(xv, tape.input(c.clone())), &x, rng);
            let b = check_weighted(&|tape, xv| tape.sub(tape.input(c.clone()), xv), &x, rng);
            a.max(b)
        }
        "mul" => {
            let c: Tensor<F> = rand_t(rng, vec![2, 3], -1.0, 1.0);
            let x: Tensor<F> = rand_t(rng, vec![2, 3], -1.0, 1.0);
            check_weighted(&|tape, xv| tape.mul(xv, tape.input(c.clone())), &x, rng)
        }
        "scale" => {
            let x: Tensor<F> = rand_t(rng, vec![4], -1.0, 1.0);
            check_weighted(&|tape, xv| tape.scale(xv, F::from_f64(1.7)), &x, rng)
        }
        "add_scalar" => {
            let x: Tensor<F> = rand_t(rng, vec![4], -1.0, 1.0);
            check_weighted(&|tape, xv| tape.add_scalar(xv, F::from_f64(-0.4)), &x, rng)
        }
        "matmul" => {
            let c: Tensor<F> = rand_t(rng, vec![3, 2], -1.0, 1.0);
            let x: Tensor<F> = rand_t(rng, vec![2, 3], -1.0, 1.0);
            let a = check_weighted(&|tape, xv| tape.matmul(xv, tape.input(c.clone())), &x, rng);
            let c2: Tensor<F> = rand_t(rng, vec![4, 2], -1.0, 1.0);
            let b = check_weighted(&|tape, xv| tape.matmul(tape.input(c2.clone()), xv), &x, rng);
            a.max(b)
        }
        "relu" => {
            let x: Tensor<F> = away_from_zero(rng, vec![2, 4], 0.2, 1.0);
            check_weighted(&|tape, xv| tape.relu(xv), &x, rng)
        }
        "leaky_relu" => {
            let x: Tensor<F> = away_from_zero(rng, vec![2, 4], 0.2, 1.0);
            check_weighted(&|tape, xv| tape.leaky_relu(xv, F::from_f64(0.2)), &x, rng)
        }
        "tanh" => {
            let x: Tensor<F> = rand_t(rng, vec![2, 4], -1.5, 1.5);
            check_weighted(&|tape, xv| tape.tanh(xv), &x, rng)
        }
        "sigmoid" => {
            let x: Tensor<F> = rand_t(rng, vec![2, 4], -2.0, 2.0);
            check_weighted(&|tape, xv| tape.sigmoid(xv), &x, rng)
        }
        "log" => {
            let x: Tensor<F> = rand_t(rng, vec![2, 4], 0.5, 2.0);
            check_weighted(&|tape, xv| tape.log(xv), &x, rng)
        }
        "clamp" => {
            // Values clear of the +-0.5 edges on both sides.
            let inside: Tensor<F> = rand_t(rng, vec![6], -0.4, 0.4);
            let outside: Tensor<F> = away_from_zero(rng, vec![6], 0.6, 1.0);
            let x = Tensor::concat(&[&inside, &outside], 0);
            check_weighted(
                &|tape, xv| tape.clamp(xv, F::from_f64(-0.5), F::from_f64(0.5)),
                &x,
                rng,
            )
        }
        "sum" => {
            let x: Tensor<F> = rand_t(rng, vec![3, 3], -1.0, 1.0);
            grad_check(|tape, xv| tape.sum(xv), &x, e)
        }
        "mean" => {
            let x: Tensor<F> = rand_t(rng, vec![3, 3], -1.0, 1.0);
            grad_check(|tape, xv| tape.mean(xv), &x, e)
        }
        "sum_rows" => {
            let x: Tensor<F> = rand_t(rng, vec![3, 4], -1.0, 1.0);
            check_weighted(&|tape, xv| tape.sum_rows(xv), &x, rng)
        }
        "bias_add" => {
            let bias: Tensor<F> = rand_t(rng, vec![3], -1.0, 1.0);
            let x: Tensor<F> = rand_t(rng, vec![2, 2, 2, 3], -1.0, 1.0);
            let a = check_weighted(
                &|tape, xv| tape.bias_add(xv, tape.input(bias.clone())),
                &x,
                rng,
            );
            let big: Tensor<F> = rand_t(rng, vec![2, 2, 2, 3], -1.0, 1.0);
            let xb: Tensor<F> = rand_t(rng, vec![3], -1.0, 1.0);
            let b = check_weighted(
                &|tape, xv| tape.bias_add(tape.input(big.clone()), xv),
                &xb,
                rng,
            );
            a.max(b)
        }
        "concat" => {
            let c: Tensor<F> = rand_t(rng, vec![2, 2], -1.0, 1.0);
            let x: Tensor<F> = rand_t(rng, vec![2, 3], -1.0, 1.0);
            check_weighted(
                &|tape, xv| tape.concat(&[xv, tape.input(c.clone())], 1),
                &x,
                rng,
            )
        }
        "reshape" => {
            let x: Tensor<F> = rand_t(rng, vec![2, 6], -1.0, 1.0);
            check_weighted(&|tape, xv| tape.reshape(xv, vec![3, 4]), &x, rng)
        }
        "l2_normalize" => {
            // Rows with norm well above the epsilon floor.
            let x: Tensor<F> = away_from_zero(rng, vec![2, 4], 0.3, 1.0);
            check_weighted(&|tape, xv| tape.l2_normalize(xv, F::from_f64(1e-12)), &x, rng)
        }
        "zncc" => {
            let c: Tensor<F> = rand_t(rng, vec![1, 4, 4, 3], -1.0, 1.0);
            let x: Tensor<F> = rand_t(rng, vec![1, 4, 4, 3], -1.0, 1.0);
            let a = grad_check(|tape, xv| tape.zncc(xv, tape.input(c.clone())), &x, e);
            let b = grad_check(|tape, xv| tape.zncc(tape.input(c.clone()), xv), &x, e);
            a.max(b)
        }
        "conv2d" => {
            let kernel: Tensor<F> = rand_t(rng, vec![3, 3, 2, 2], -0.5, 0.5);
            let x: Tensor<F> = rand_t(rng, vec![1, 5, 5, 2], -1.0, 1.0);
            let a = check_weighted(
                &|tape, xv| tape.conv2d(xv, tape.input(kernel.clone()), 1, 1),
                &x,
                rng,
            );
            let image: Tensor<F> = rand_t(rng, vec![1, 5, 5, 2], -1.0, 1.0);
            let xk: Tensor<F> = rand_t(rng, vec![3, 3, 2, 2], -0.5, 0.5);
            let b = check_weighted(
                &|tape, xv| tape.conv2d(tape.input(image.clone()), xv, 2, 0),
                &xk,
                rng,
            );
            a.max(b)
        }
        "max_pool2d" => {
            let x: Tensor<F> = separated(rng, vec![1, 4, 4, 1]);
            check_weighted(&|tape, xv| tape.max_pool2d(xv, 2, 2), &x, rng)
        }
        "global_max_pool" => {
            let x: Tensor<F> = separated(rng, vec![1, 3, 3, 2]);
            check_weighted(&|tape, xv| tape.global_max_pool(xv), &x, rng)
        }
        "global_avg_pool" => {
            let x: Tensor<F> = rand_t(rng, vec![1, 3, 3, 2], -1.0, 1.0);
            check_weighted(&|tape, xv| tape.global_avg_pool(xv), &x, rng)
        }
        "nearest_upsample" => {
            let x: Tensor<F> = rand_t(rng, vec![1, 3, 3, 2], -1.0, 1.0);
            check_weighted(&|tape, xv| tape.nearest_upsample(xv, 2), &x, rng)
        }
        "triplet_loss" => {
            // Raw anchor gets normalized inside the function under test;
            // instances are resampled until every hinge argument is clear
            // of zero.
            let (n, d) = (2usize, 4usize);
            let e_p: Tensor<F> = unit_rows(rng, n, d);
            let e_n: Tensor<F> = unit_rows(rng, n, d);
            let alpha = F::from_f64(0.3);
            let x = loop {
                let cand: Tensor<F> = away_from_zero(rng, vec![n, d], 0.3, 1.0);
                let safe = (0..n).all(|i| {
                    let row = &cand.data()[i * d..(i + 1) * d];
                    let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt();
                    let dot = |other: &Tensor<F>| {
                        row.iter()
                            .zip(&other.data()[i * d..(i + 1) * d])
                            .map(|(&a, &b)| a / norm * b)
                            .sum::<F>()
                            .to_f64()
                    };
                    let margin = (1.0 - dot(&e_p)) - (1.0 - dot(&e_n)) + 0.3;
                    margin.abs() > 0.05
                });
                if safe {
                    break cand;
                }
            };
            grad_check(
                |tape, xv| {
                    let a = tape.l2_normalize(xv, F::from_f64(1e-12));
                    let p = tape.input(e_p.clone());
                    let nn = tape.input(e_n.clone());
                    let al = tape.input(Tensor::full(vec![n], alpha));
                    losses::triplet_loss(tape, a, p, nn, al)
                },
                &x,
                e,
            )
        }
        "discriminator_loss" => {
            let c: Tensor<F> = rand_t(rng, vec![1, 3, 3, 1], -2.0, 2.0);
            let x: Tensor<F> = rand_t(rng, vec![1, 3, 3, 1], -2.0, 2.0);
            let a = grad_check(
                |tape, xv| {
                    losses::discriminator_loss(
                        tape,
                        tape.sigmoid(xv),
                        tape.sigmoid(tape.input(c.clone())),
                    )
                },
                &x,
                e,
            );
            let b = grad_check(
                |tape, xv| {
                    losses::discriminator_loss(
                        tape,
                        tape.sigmoid(tape.input(c.clone())),
                        tape.sigmoid(xv),
                    )
                },
                &x,
                e,
            );
            a.max(b)
        }
        "generator_loss" => {
            // All three terms active; three separate gradient paths: the
            // adversarial logits, the generated image, the raw generated
            // embedding.
            let w = LossWeights::default();
            let i_p: Tensor<F> = rand_t(rng, vec![1, 4, 4, 3], -1.0, 1.0);
            let g_out: Tensor<F> = rand_t(rng, vec![1, 4, 4, 3], -1.0, 1.0);
            let d_fake: Tensor<F> = rand_t(rng, vec![1, 2, 2, 1], -2.0, 2.0);
            let e_p: Tensor<F> = unit_rows(rng, 1, 4);
            let e_g_raw: Tensor<F> = away_from_zero(rng, vec![1, 4], 0.3, 1.0);

            let adv = grad_check(
                |tape, xv| {
                    losses::generator_loss(
                        tape,
                        tape.sigmoid(xv),
                        tape.input(i_p.clone()),
                        tape.input(g_out.clone()),
                        tape.input(e_p.clone()),
                        tape.l2_normalize(tape.input(e_g_raw.clone()), F::from_f64(1e-12)),
                        &w,
                    )
                    .total
                },
                &d_fake,
                e,
            );
            let img = grad_check(
                |tape, xv| {
                    losses::generator_loss(
                        tape,
                        tape.sigmoid(tape.input(d_fake.clone())),
                        tape.input(i_p.clone()),
                        xv,
                        tape.input(e_p.clone()),
                        tape.l2_normalize(tape.input(e_g_raw.clone()), F::from_f64(1e-12)),
                        &w,
                    )
                    .total
                },
                &g_out,
                e,
            );
            let emb = grad_check(
                |tape, xv| {
                    losses::generator_loss(
                        tape,
                        tape.sigmoid(tape.input(d_fake.clone())),
                        tape.input(i_p.clone()),
                        tape.input(g_out.clone()),
                        tape.input(e_p.clone()),
                        tape.l2_normalize(xv, F::from_f64(1e-12)),
                        &w,
                    )
                    .total
                },
                &e_g_raw,
                e,
            );
            adv.max(img).max(emb)
        }
        _ => return None,
    };
    Some(err)
}

/// Worst relative error over `trials` randomized instances, or None for an
/// unknown op name.
pub fn check_op<F: Scalar>(name: &str, trials: usize, seed: u64) -> Option<f64> {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0x9e3779b97f4a7c15));
        worst = worst.max(run_once::<F>(name, &mut rng)?);
    }
    Some(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_op_is_none() {
        assert!(check_op::<f64>("frobnicate", 1, 0).is_none());
    }

    #[test]
    fn registry_has_no_duplicates() {
        let mut names: Vec<_> = OPS.to_vec();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), OPS.len());
    }
}
