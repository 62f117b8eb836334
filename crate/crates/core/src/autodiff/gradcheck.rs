//! Finite-difference verification of the analytic gradients.
//!
//! Each registered operation is evaluated on random small inputs in `f64`.
//! The scalar objective is `Σ out ⊙ R` for a fixed random projection `R`
//! (or the output itself for reductions), and every input element is
//! perturbed by ±eps to form a central difference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Result, Tape, Tensor, Var};

/// Operations accepted by [`grad_check`].
pub const REGISTERED_OPS: &[&str] = &[
    "conv2d",
    "conv_transpose2d",
    "transition_conv",
    "leaky_relu",
    "relu",
    "sigmoid",
    "scale",
    "concat",
    "select_channel",
    "mul",
    "add",
    "sub",
    "mean_abs",
    "sum",
    "weighted_sum",
];

/// Relative error with a floor on the denominator so that two near-zero
/// gradients compare by absolute difference.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    build: Box<Build>,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], kink_gap: Option<f64>) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-1.0..1.0);
            // resample values that sit within reach of a kink at zero
            if kink_gap.map_or(true, |gap| v.abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

fn make_case(op: &str, rng: &mut ChaCha8Rng, eps: f64) -> Result<Case> {
    let gap = Some(4.0 * eps);
    let b = rng.gen_range(1..=2);
    let case = match op {
        "conv2d" => {
            let (ci, co) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let h = 2 * rng.gen_range(2..=4);
            let w = 2 * rng.gen_range(2..=4);
            Case {
                inputs: vec![
                    random_tensor(rng, &[b, ci, h, w], None),
                    random_tensor(rng, &[co, ci, 4, 4], None),
                    random_tensor(rng, &[co], None),
                ],
                build: Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 2, 1)),
            }
        }
        "transition_conv" => {
            let (ci, co) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let h = rng.gen_range(1..=5);
            Case {
                inputs: vec![
                    random_tensor(rng, &[b, ci, h, h + 1], None),
                    random_tensor(rng, &[co, ci, 3, 3], None),
                    random_tensor(rng, &[co], None),
                ],
                build: Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 1, 1)),
            }
        }
        "conv_transpose2d" => {
            let (ci, co) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            Case {
                inputs: vec![
                    random_tensor(rng, &[b, ci, h, w], None),
                    random_tensor(rng, &[ci, co, 4, 4], None),
                    random_tensor(rng, &[co], None),
                ],
                build: Box::new(|t, v| t.conv_transpose2d(v[0], v[1], v[2], 2, 1)),
            }
        }
        "leaky_relu" | "relu" => {
            let slope = if op == "relu" { 0.0 } else { 0.2 };
            Case {
                inputs: vec![random_tensor(rng, &[b, 2, 3, 3], gap)],
                build: Box::new(move |t, v| Ok(t.leaky_relu(v[0], slope))),
            }
        }
        "sigmoid" => Case {
            inputs: vec![random_tensor(rng, &[b, 2, 3, 3], None).map(|x| 4.0 * x)],
            build: Box::new(|t, v| Ok(t.sigmoid(v[0]))),
        },
        "scale" => {
            let f = rng.gen_range(-3.0..3.0);
            Case {
                inputs: vec![random_tensor(rng, &[b, 3], None)],
                build: Box::new(move |t, v| Ok(t.scale(v[0], f))),
            }
        }
        "concat" => {
            let (ca, cb) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            Case {
                inputs: vec![
                    random_tensor(rng, &[b, ca, 2, 3], None),
                    random_tensor(rng, &[b, cb, 2, 3], None),
                ],
                build: Box::new(|t, v| t.concat(v[0], v[1])),
            }
        }
        "select_channel" => {
            let c = rng.gen_range(1..=4);
            let k = rng.gen_range(0..c);
            Case {
                inputs: vec![random_tensor(rng, &[b, c, 3, 2], None)],
                build: Box::new(move |t, v| t.select_channel(v[0], k)),
            }
        }
        "mul" | "add" | "sub" => {
            let shape = [b, 2, 3, 2];
            let inputs = vec![
                random_tensor(rng, &shape, None),
                random_tensor(rng, &shape, None),
            ];
            let build: Box<Build> = match op {
                "mul" => Box::new(|t, v| t.mul(v[0], v[1])),
                "add" => Box::new(|t, v| t.add(v[0], v[1])),
                _ => Box::new(|t, v| t.sub(v[0], v[1])),
            };
            Case { inputs, build }
        }
        "mean_abs" => Case {
            inputs: vec![random_tensor(rng, &[b, 2, 4, 3], gap)],
            build: Box::new(|t, v| Ok(t.mean_abs(v[0]))),
        },
        "sum" => Case {
            inputs: vec![random_tensor(rng, &[b, 5], None)],
            build: Box::new(|t, v| Ok(t.sum(v[0]))),
        },
        "weighted_sum" => {
            let k = rng.gen_range(1..=4);
            let weights: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..5.0)).collect();
            Case {
                inputs: (0..k).map(|_| random_tensor(rng, &[1], None)).collect(),
                build: Box::new(move |t, v| {
                    let terms: Vec<(Var, f64)> =
                        v.iter().copied().zip(weights.iter().copied()).collect();
                    t.weighted_sum(&terms)
                }),
            }
        }
        other => return Err(AutodiffError::UnknownOp(other.to_string())),
    };
    Ok(case)
}

/// Scalar objective: the output itself when it is a scalar, else `Σ out ⊙ R`.
fn objective(
    case: &Case,
    inputs: &[Tensor<f64>],
    projection: &mut Option<Tensor<f64>>,
    rng: &mut ChaCha8Rng,
    want_grads: bool,
) -> Result<(f64, Vec<Tensor<f64>>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let loss = if tape.value(out).len() == 1 && tape.value(out).shape().len() <= 1 {
        out
    } else {
        let proj = projection.get_or_insert_with(|| {
            // magnitudes in [0.5, 1.5] keep every projected gradient away from zero
            let shape = tape.value(out).shape().to_vec();
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| {
                    let m: f64 = rng.gen_range(0.5..1.5);
                    if rng.gen_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                })
                .collect();
            Tensor::new(shape, data)
        });
        let r = tape.constant(proj.clone());
        let prod = tape.mul(out, r)?;
        tape.sum(prod)
    };
    let value = tape.value(loss).item();
    if !want_grads {
        return Ok((value, Vec::new()));
    }
    let mut grads = tape.backward(loss)?;
    let g = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, g))
}

/// Largest relative error between analytic and central-difference gradients
/// of `op` over `trials` random cases.
pub fn grad_check(op: &str, trials: usize, eps: f64) -> Result<f64> {
    if !REGISTERED_OPS.contains(&op) {
        return Err(AutodiffError::UnknownOp(op.to_string()));
    }
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164 ^ trial as u64);
        let case = make_case(op, &mut rng, eps)?;
        let mut projection = None;
        let (_, analytic) = objective(&case, &case.inputs, &mut projection, &mut rng, true)?;
        for (which, grad) in analytic.iter().enumerate() {
            for idx in 0..grad.len() {
                let mut plus = case.inputs.clone();
                plus[which].data_mut()[idx] += eps;
                let mut minus = case.inputs.clone();
                minus[which].data_mut()[idx] -= eps;
                let (fp, _) = objective(&case, &plus, &mut projection, &mut rng, false)?;
                let (fm, _) = objective(&case, &minus, &mut projection, &mut rng, false)?;
                let numeric = (fp - fm) / (2.0 * eps);
                worst = worst.max(relative_error(grad.data()[idx], numeric));
            }
        }
    }
    Ok(worst)
}
