//! Amplitude masks: targets, application, and mixture-phase reconstruction.

use rustfft::num_complex::Complex64;

use crate::audio::{
    istft, AudioError, ComplexSpectrogram, Grid, MagnitudeSpectrogram, Result, Waveform,
};

pub const MASK_CEILING: f64 = 10.0;

/// Mixture bins quieter than this get a zero target mask.
pub const SILENT_BIN: f64 = 1e-8;

/// K masks aligned to one mixture spectrogram.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub masks: Vec<Grid>,
    pub ceiling: f64,
}

impl MaskSet {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Ideal amplitude masks of `sources` against `mixture`.
    pub fn ideal(sources: &[MagnitudeSpectrogram], mixture: &MagnitudeSpectrogram) -> Result<Self> {
        let masks = sources
            .iter()
            .map(|s| compute_iam(s, mixture))
            .collect::<Result<_>>()?;
        Ok(Self {
            masks,
            ceiling: MASK_CEILING,
        })
    }
}

/// `min(S_i / S_mix, 10)` per bin, 0 where the mixture is silent.
pub fn compute_iam(source: &MagnitudeSpectrogram, mixture: &MagnitudeSpectrogram) -> Result<Grid> {
    iam_grid(&source.values, &mixture.values)
}

pub fn iam_grid(source: &Grid, mixture: &Grid) -> Result<Grid> {
    source.zip_with(mixture, |s, m| {
        if m < SILENT_BIN {
            0.0
        } else {
            (s / m).min(MASK_CEILING)
        }
    })
}

pub fn apply_mask(mask: &Grid, mixture: &MagnitudeSpectrogram) -> Result<MagnitudeSpectrogram> {
    let values = mask.zip_with(&mixture.values, |a, b| (a * b).max(0.0))?;
    Ok(mixture.with_values(values))
}

/// Pair an estimated magnitude with the mixture phase and invert.
pub fn reconstruct(est: &MagnitudeSpectrogram, mixture: &ComplexSpectrogram) -> Result<Waveform> {
    let (f, t) = mixture.shape();
    if est.shape() != (f, t) {
        return Err(AudioError::Shape {
            expected: (f, t),
            actual: est.shape(),
        });
    }
    let bins = mixture
        .bins
        .iter()
        .zip(est.values.as_slice())
        .map(|(&z, &m)| {
            let norm = z.norm();
            if norm > 0.0 {
                z * (m / norm)
            } else {
                Complex64::new(m, 0.0)
            }
        })
        .collect();
    istft(&ComplexSpectrogram {
        bins,
        ..mixture.clone()
    })
}
