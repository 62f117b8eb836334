//! Rational-ratio polyphase resampling with a Kaiser-windowed sinc kernel.

use std::f64::consts::PI;

use super::{AudioError, Result, Waveform};

pub const KAISER_BETA: f64 = 8.6;
pub const TAPS_PER_PHASE: usize = 64;

/// Passband edge as a fraction of the lower of the two Nyquist rates.
const ROLLOFF: f64 = 0.95;

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    while term > sum * 1e-17 {
        term *= q / (k * k);
        sum += term;
        k += 1.0;
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// One row of `TAPS_PER_PHASE` coefficients per fractional phase.
struct PolyphaseBank {
    taps: Vec<f64>,
}

impl PolyphaseBank {
    fn new(phases: usize, cutoff: f64) -> Self {
        let half = (TAPS_PER_PHASE / 2) as f64;
        let norm = bessel_i0(KAISER_BETA);
        let mut taps = vec![0.0; phases * TAPS_PER_PHASE];
        for (p, row) in taps.chunks_exact_mut(TAPS_PER_PHASE).enumerate() {
            let frac = p as f64 / phases as f64;
            for (j, tap) in row.iter_mut().enumerate() {
                // tap j covers input sample (ipos - half + 1 + j)
                let x = frac + half - 1.0 - j as f64;
                let r = x / half;
                let window = if r.abs() <= 1.0 {
                    bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm
                } else {
                    0.0
                };
                *tap = cutoff * sinc(cutoff * x) * window;
            }
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|t| *t /= sum);
        }
        Self { taps }
    }

    fn row(&self, phase: usize) -> &[f64] {
        &self.taps[phase * TAPS_PER_PHASE..(phase + 1) * TAPS_PER_PHASE]
    }
}

/// Resample to `target_rate`. Output length is `round(len * target / source)`;
/// equal rates return the input unchanged.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(AudioError::InvalidRate(target_rate));
    }
    if target_rate == w.sample_rate {
        return Ok(w.clone());
    }
    let src = w.sample_rate as u64;
    let dst = target_rate as u64;
    let g = gcd(src, dst);
    let (up, down) = (dst / g, src / g);
    let out_len = ((w.len() as u64 * dst) as f64 / src as f64).round() as usize;
    let cutoff = ROLLOFF * (dst as f64 / src as f64).min(1.0);
    let bank = PolyphaseBank::new(up as usize, cutoff);

    let half = (TAPS_PER_PHASE / 2) as i64;
    let input = &w.samples;
    let n_in = input.len() as i64;
    let samples = (0..out_len as u64)
        .map(|n| {
            let pos = n * down;
            let ipos = (pos / up) as i64;
            let phase = (pos % up) as usize;
            let first = ipos - half + 1;
            bank.row(phase)
                .iter()
                .enumerate()
                .filter_map(|(j, &c)| {
                    let k = first + j as i64;
                    (0..n_in).contains(&k).then(|| c * input[k as usize])
                })
                .sum()
        })
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: target_rate,
    })
}
