//! Per-task losses recorded on the tape, and an end-to-end gradient check
//! of network plus loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AutodiffError, Element, Tape, Tensor, Var};
use crate::loss::LossKind;
use crate::net::{Network, NetworkConfig};

/// Constant tensors of one batch, each `[B, 1, H, W]`.
#[derive(Debug, Clone)]
pub struct BatchTargets<T> {
    pub mixture: Tensor<T>,
    pub sources: Vec<Tensor<T>>,
    pub masks: Vec<Tensor<T>>,
}

/// One scalar loss per output channel, all from the same forward output.
pub fn task_losses<T: Element>(
    tape: &mut Tape<T>,
    output: Var,
    targets: &BatchTargets<T>,
    kind: LossKind,
) -> Result<Vec<Var>, AutodiffError> {
    let k = targets.sources.len();
    let mixture = match kind {
        LossKind::Indirect => Some(tape.constant(targets.mixture.clone())),
        LossKind::Direct => None,
    };
    (0..k)
        .map(|i| {
            let est = tape.select_channel(output, i)?;
            let diff = match mixture {
                Some(mix) => {
                    let masked = tape.mul(est, mix)?;
                    let src = tape.constant(targets.sources[i].clone());
                    tape.sub(src, masked)?
                }
                None => {
                    let m = tape.constant(targets.masks[i].clone());
                    tape.sub(est, m)?
                }
            };
            Ok(tape.mean_abs(diff))
        })
        .collect()
}

fn weighted_objective<T: Element>(
    net: &Network<T>,
    input: &Tensor<T>,
    targets: &BatchTargets<T>,
    weights: &[f64],
    kind: LossKind,
    with_grads: bool,
) -> crate::net::Result<(Tape<T>, Var, Option<crate::net::ForwardPass>)> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let pass = net.forward(&mut tape, x, None, with_grads)?;
    let losses = task_losses(&mut tape, pass.output, targets, kind)?;
    let terms: Vec<(Var, T)> = losses
        .iter()
        .zip(weights)
        .map(|(&l, &w)| (l, T::from_f64(w)))
        .collect();
    let total = tape.weighted_sum(&terms)?;
    Ok((tape, total, with_grads.then_some(pass)))
}

/// Largest relative error between backprop and central differences for the
/// weighted multi-task loss of a freshly initialized `f64` network.
/// Each parameter tensor is probed along `probes` random directions.
pub fn network_grad_check(
    config: NetworkConfig,
    kind: LossKind,
    spatial: usize,
    probes: usize,
    eps: f64,
    seed: u64,
) -> crate::net::Result<f64> {
    let mut net = Network::<f64>::new(config)?;
    let k = net.config().out_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, 1, spatial, spatial];
    let n: usize = shape.iter().product();
    let input = Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-8.0..3.0)).collect());
    let mixture: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..4.0)).collect();

    // Targets sit at least one unit from the current predictions so that the
    // L1 kinks stay out of reach of the finite differences.
    let predicted = net.predict(&input)?;
    let plane = spatial * spatial;
    let mut offset = |pred: f64| {
        let d = rng.gen_range(1.0..3.0);
        if pred > 5.0 { pred - d } else { pred + d }
    };
    let mut sources = Vec::with_capacity(k);
    let mut masks = Vec::with_capacity(k);
    for i in 0..k {
        let mut src = vec![0.0; n];
        let mut mask = vec![0.0; n];
        for b in 0..2 {
            for j in 0..plane {
                let m = predicted.data()[(b * k + i) * plane + j];
                let at = b * plane + j;
                mask[at] = offset(m);
                src[at] = offset(m * mixture[at]).abs();
            }
        }
        sources.push(Tensor::new(shape.to_vec(), src));
        masks.push(Tensor::new(shape.to_vec(), mask));
    }
    let targets = BatchTargets {
        mixture: Tensor::new(shape.to_vec(), mixture),
        sources,
        masks,
    };
    let weights: Vec<f64> = (0..k).map(|_| rng.gen_range(0.5..3.0)).collect();

    let (mut tape, total, pass) = weighted_objective(&net, &input, &targets, &weights, kind, true)?;
    let mut grads = tape.backward(total)?;
    let pass = pass.expect("gradients requested");
    net.accumulate_grads(&mut grads, &pass);

    let loss_at = |net: &Network<f64>| -> crate::net::Result<f64> {
        let (tape, total, _) = weighted_objective(net, &input, &targets, &weights, kind, false)?;
        Ok(tape.value(total).item())
    };
    // Directional derivatives along random sign vectors, one parameter
    // tensor at a time. Single entries of a deep network often carry
    // gradients too small to resolve against rounding in the loss.
    let mut worst: f64 = 0.0;
    for p in 0..net.parameters().len() {
        let len = net.parameters()[p].value.len();
        let scale = 1.0 / (len as f64).sqrt();
        for _ in 0..probes {
            let dir: Vec<f64> = (0..len)
                .map(|_| if rng.gen::<bool>() { scale } else { -scale })
                .collect();
            let analytic: f64 = net.parameters()[p]
                .grad
                .as_ref()
                .map_or(0.0, |g| g.data().iter().zip(&dir).map(|(g, d)| g * d).sum());
            let orig = net.parameters()[p].value.clone();
            let shifted = |sign: f64| {
                let mut t = orig.clone();
                t.data_mut().iter_mut().zip(&dir).for_each(|(v, d)| *v += sign * eps * d);
                t
            };
            net.parameters_mut()[p].value = shifted(1.0);
            let plus = loss_at(&net)?;
            net.parameters_mut()[p].value = shifted(-1.0);
            let minus = loss_at(&net)?;
            net.parameters_mut()[p].value = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = crate::autodiff::gradcheck::relative_error(analytic, numeric);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
