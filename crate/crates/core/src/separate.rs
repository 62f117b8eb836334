//! Mask-based separation of whole recordings, chunk by chunk.

use thiserror::Error;

use crate::audio::{
    resample, spec_resize, stft, AudioError, Grid, ResizeDirection, Waveform,
};
use crate::autodiff::Tensor;
use crate::features::{network_input, AudioParams};
use crate::masking::{apply_mask, compute_iam, reconstruct};
use crate::net::{NetError, Network};

#[derive(Error, Debug)]
pub enum SeparationError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("empty input")]
    Empty,
    #[error("expected {expected} stems, got {actual}")]
    StemCount { expected: usize, actual: usize },
}

pub type Result<T> = std::result::Result<T, SeparationError>;

/// Mask the mixture chunk with network-resolution masks and invert each.
pub fn apply_network_masks(
    mixture: &Waveform,
    masks: &[Grid],
    params: &AudioParams,
) -> Result<Vec<Waveform>> {
    let spec = stft(mixture, params.window_size, params.hop)?;
    let mag = spec.magnitude();
    masks
        .iter()
        .map(|m| {
            let full = spec_resize(m, spec.freq_bins, ResizeDirection::Up)?;
            Ok(reconstruct(&apply_mask(&full, &mag)?, &spec)?)
        })
        .collect()
}

/// Separation with full-resolution ideal amplitude masks from the true stems.
pub fn ideal_mask_separation(
    mixture: &Waveform,
    stems: &[Waveform],
    params: &AudioParams,
) -> Result<Vec<Waveform>> {
    let spec = stft(mixture, params.window_size, params.hop)?;
    let mag = spec.magnitude();
    stems
        .iter()
        .map(|s| {
            let src = stft(s, params.window_size, params.hop)?.magnitude();
            let mask = compute_iam(&src, &mag)?;
            Ok(reconstruct(&apply_mask(&mask, &mag)?, &spec)?)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Separation {
    pub stems: Vec<Waveform>,
    pub chunks: usize,
    /// The input did not fill a whole number of chunks and was zero-padded.
    pub padded: bool,
}

pub struct Separator<'a> {
    pub net: &'a Network<f32>,
    pub params: AudioParams,
    pub batch_size: usize,
}

impl<'a> Separator<'a> {
    pub fn new(net: &'a Network<f32>, params: AudioParams) -> Self {
        Self {
            net,
            params,
            batch_size: 8,
        }
    }

    /// Network masks (K grids at network resolution) for each chunk.
    pub fn masks(&self, chunks: &[Waveform]) -> Result<Vec<Vec<Grid>>> {
        let mut out = Vec::with_capacity(chunks.len());
        for batch in chunks.chunks(self.batch_size.max(1)) {
            let mut data = Vec::new();
            let mut rows = 0;
            let mut cols = 0;
            for chunk in batch {
                let mag = stft(chunk, self.params.window_size, self.params.hop)?.magnitude();
                let input = network_input(&mag)?;
                (rows, cols) = input.shape();
                data.extend(input.as_slice().iter().map(|&v| v as f32));
            }
            let masks = self
                .net
                .predict(&Tensor::new(vec![batch.len(), 1, rows, cols], data))?;
            let k = masks.shape()[1];
            let plane = rows * cols;
            for b in 0..batch.len() {
                out.push(
                    (0..k)
                        .map(|i| {
                            let start = (b * k + i) * plane;
                            let v = masks.data()[start..start + plane]
                                .iter()
                                .map(|&x| x as f64)
                                .collect();
                            Grid::from_vec(rows, cols, v)
                        })
                        .collect(),
                );
            }
        }
        Ok(out)
    }

    /// K stems per chunk.
    pub fn separate_chunks(&self, chunks: &[Waveform]) -> Result<Vec<Vec<Waveform>>> {
        let masks = self.masks(chunks)?;
        chunks
            .iter()
            .zip(&masks)
            .map(|(c, m)| apply_network_masks(c, m, &self.params))
            .collect()
    }

    /// Resample, split into zero-padded chunks, separate, and concatenate.
    /// Output stems have the resampled input's length.
    pub fn separate(&self, mixture: &Waveform) -> Result<Separation> {
        if mixture.is_empty() {
            return Err(SeparationError::Empty);
        }
        let x = resample(mixture, self.params.sample_rate)?;
        let n = x.len();
        let len = self.params.chunk_length;
        let count = n.div_ceil(len);
        let chunks: Vec<Waveform> = (0..count).map(|i| x.slice(i * len, len)).collect();
        let k = self.net.config().out_channels;
        let mut stems = vec![Vec::with_capacity(count * len); k];
        for per_chunk in self.separate_chunks(&chunks)? {
            for (dst, w) in stems.iter_mut().zip(per_chunk) {
                dst.extend(w.samples);
            }
        }
        let stems = stems
            .into_iter()
            .map(|mut s| {
                s.truncate(n);
                Waveform {
                    samples: s,
                    sample_rate: self.params.sample_rate,
                }
            })
            .collect();
        Ok(Separation {
            stems,
            chunks: count,
            padded: n % len != 0,
        })
    }
}
