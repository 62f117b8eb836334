//! Centered short-time Fourier transform and its least-squares inverse.

use std::f64::consts::PI;

use rustfft::{num_complex::Complex64, FftPlanner};

use super::{AudioError, Grid, Result, Waveform};

/// Complex STFT grid, frequency-major: `bins[f * frames + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub bins: Vec<Complex64>,
    pub freq_bins: usize,
    pub frames: usize,
    pub window_size: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub center_padded: bool,
    /// Length of the analysed signal, used to trim the inverse.
    pub signal_len: usize,
}

/// Magnitude grid (F x T) plus the frame metadata of the STFT it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeSpectrogram {
    pub values: Grid,
    pub window_size: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub signal_len: usize,
}

impl MagnitudeSpectrogram {
    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    /// Same metadata, new values.
    pub fn with_values(&self, values: Grid) -> Self {
        Self {
            values,
            window_size: self.window_size,
            hop: self.hop,
            sample_rate: self.sample_rate,
            signal_len: self.signal_len,
        }
    }
}

impl ComplexSpectrogram {
    pub fn shape(&self) -> (usize, usize) {
        (self.freq_bins, self.frames)
    }

    pub fn magnitude(&self) -> MagnitudeSpectrogram {
        let values = Grid::from_vec(
            self.freq_bins,
            self.frames,
            self.bins.iter().map(|c| c.norm()).collect(),
        );
        MagnitudeSpectrogram {
            values,
            window_size: self.window_size,
            hop: self.hop,
            sample_rate: self.sample_rate,
            signal_len: self.signal_len,
        }
    }

    pub fn get(&self, f: usize, t: usize) -> Complex64 {
        self.bins[f * self.frames + t]
    }
}

/// Periodic Hann window.
pub(crate) fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / n as f64).cos()))
        .collect()
}

fn reflect_index(i: i64, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as i64 - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as i64 {
        j = period - j;
    }
    j as usize
}

/// STFT with a periodic Hann window and reflect padding of `window_size / 2`
/// on both sides, giving `len / hop + 1` frames.
pub fn stft(w: &Waveform, window_size: usize, hop: usize) -> Result<ComplexSpectrogram> {
    if window_size == 0 || window_size % 2 != 0 || hop == 0 || hop > window_size {
        return Err(AudioError::InvalidGeometry {
            window: window_size,
            hop,
        });
    }
    if w.len() < hop {
        return Err(AudioError::TooShort { len: w.len(), hop });
    }
    let pad = window_size / 2;
    let frames = w.len() / hop + 1;
    let freq_bins = window_size / 2 + 1;
    let window = hann(window_size);
    let fft = FftPlanner::new().plan_fft_forward(window_size);

    let mut bins = vec![Complex64::new(0.0, 0.0); freq_bins * frames];
    let mut buf = vec![Complex64::new(0.0, 0.0); window_size];
    for t in 0..frames {
        let start = (t * hop) as i64 - pad as i64;
        for (j, slot) in buf.iter_mut().enumerate() {
            let x = w.samples[reflect_index(start + j as i64, w.len())];
            *slot = Complex64::new(x * window[j], 0.0);
        }
        fft.process(&mut buf);
        for f in 0..freq_bins {
            bins[f * frames + t] = buf[f];
        }
    }
    Ok(ComplexSpectrogram {
        bins,
        freq_bins,
        frames,
        window_size,
        hop,
        sample_rate: w.sample_rate,
        center_padded: true,
        signal_len: w.len(),
    })
}

/// Weighted overlap-add inverse, normalized by the summed squared window.
pub fn istft(s: &ComplexSpectrogram) -> Result<Waveform> {
    let n = s.window_size;
    if n == 0 || n % 2 != 0 || s.freq_bins != n / 2 + 1 || s.bins.len() != s.freq_bins * s.frames
    {
        return Err(AudioError::InvalidGeometry {
            window: n,
            hop: s.hop,
        });
    }
    let window = hann(n);
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let total = (s.frames.saturating_sub(1)) * s.hop + n;
    let mut acc = vec![0.0; total];
    let mut norm = vec![0.0; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let scale = 1.0 / n as f64;
    for t in 0..s.frames {
        for f in 0..s.freq_bins {
            buf[f] = s.get(f, t);
        }
        buf[0].im = 0.0;
        buf[n / 2].im = 0.0;
        for f in 1..n / 2 {
            buf[n - f] = buf[f].conj();
        }
        ifft.process(&mut buf);
        let start = t * s.hop;
        for j in 0..n {
            acc[start + j] += buf[j].re * scale * window[j];
            norm[start + j] += window[j] * window[j];
        }
    }
    let offset = if s.center_padded { n / 2 } else { 0 };
    let len = s.signal_len;
    if offset + len > total {
        return Err(AudioError::InvalidGeometry {
            window: n,
            hop: s.hop,
        });
    }
    let mut samples = Vec::with_capacity(len);
    for i in 0..len {
        let d = norm[offset + i];
        if d < 1e-12 {
            return Err(AudioError::DegenerateNormalization(i));
        }
        samples.push(acc[offset + i] / d);
    }
    Ok(Waveform {
        samples,
        sample_rate: s.sample_rate,
    })
}
