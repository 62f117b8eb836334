//! Network-resolution features of one chunk: log-magnitude input, mixture
//! and source magnitudes, and ideal masks, all halved along frequency.

use crate::audio::{
    log_magnitude, spec_resize, stft, Grid, MagnitudeSpectrogram, ResizeDirection, Result, Waveform,
};
use crate::masking::iam_grid;

use serde::{Deserialize, Serialize};

/// Rate, chunking, and STFT geometry shared by training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AudioParams {
    pub sample_rate: u32,
    pub chunk_length: usize,
    pub window_size: usize,
    pub hop: usize,
}

impl Default for AudioParams {
    fn default() -> Self {
        Self {
            sample_rate: 10880,
            chunk_length: 65280,
            window_size: 1022,
            hop: 256,
        }
    }
}

/// Halve the frequency axis.
pub fn to_network_resolution(g: &Grid) -> Result<Grid> {
    spec_resize(g, g.rows() / 2, ResizeDirection::Down)
}

/// Log-magnitude of the full-resolution mixture, then halved.
pub fn network_input(mixture: &MagnitudeSpectrogram) -> Result<Grid> {
    to_network_resolution(&log_magnitude(mixture))
}

/// Everything the trainer needs for one chunk, stored in `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub rows: usize,
    pub cols: usize,
    pub input: Vec<f32>,
    pub mixture: Vec<f32>,
    pub sources: Vec<Vec<f32>>,
    pub masks: Vec<Vec<f32>>,
    /// Per-source `Σ S² / (F·T)` at network resolution.
    pub energies: Vec<f64>,
}

fn to_f32(g: &Grid) -> Vec<f32> {
    g.as_slice().iter().map(|&v| v as f32).collect()
}

impl PreparedSample {
    pub fn from_audio(
        mixture: &Waveform,
        stems: &[Waveform],
        window_size: usize,
        hop: usize,
    ) -> Result<Self> {
        let mix_mag = stft(mixture, window_size, hop)?.magnitude();
        let input = network_input(&mix_mag)?;
        let mix = to_network_resolution(&mix_mag.values)?;
        let mut sources = Vec::with_capacity(stems.len());
        let mut masks = Vec::with_capacity(stems.len());
        let mut energies = Vec::with_capacity(stems.len());
        for stem in stems {
            let mag = to_network_resolution(&stft(stem, window_size, hop)?.magnitude().values)?;
            masks.push(to_f32(&iam_grid(&mag, &mix)?));
            energies.push(mag.sum_squares() / mag.as_slice().len() as f64);
            sources.push(to_f32(&mag));
        }
        Ok(Self {
            rows: mix.rows(),
            cols: mix.cols(),
            input: to_f32(&input),
            mixture: to_f32(&mix),
            sources,
            masks,
            energies,
        })
    }

    pub fn k(&self) -> usize {
        self.sources.len()
    }

    pub fn source_grid(&self, i: usize) -> Grid {
        Grid::from_vec(
            self.rows,
            self.cols,
            self.sources[i].iter().map(|&v| v as f64).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_features_have_network_shape() {
        let n = 65280;
        let a: Vec<f64> = (0..n).map(|i| 0.1 * (i as f64 * 0.05).sin()).collect();
        let b: Vec<f64> = (0..n).map(|i| 0.05 * (i as f64 * 1.3).sin()).collect();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let w = |v: Vec<f64>| Waveform::new(v, 10880).unwrap();
        let s = PreparedSample::from_audio(&w(mix), &[w(a), w(b)], 1022, 256).unwrap();
        assert_eq!((s.rows, s.cols), (256, 256));
        assert_eq!(s.input.len(), 256 * 256);
        assert!(s.masks.iter().flatten().all(|&m| (0.0..=10.0).contains(&m)));
        assert!(s.energies[0] > s.energies[1]);
    }
}
