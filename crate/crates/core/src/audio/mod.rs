//! Time-domain audio: the [`Waveform`] type and WAV file I/O.
//!
//! Reading accepts PCM16, PCM24 and float32 RIFF/WAVE files with one or two
//! channels; stereo input is downmixed to mono by averaging the channels.
//! Writing always produces float32 mono.

mod resample;
mod spectrogram;
mod stft;

pub use resample::{resample, KAISER_BETA, TAPS_PER_PHASE};
pub use spectrogram::{log_magnitude, spec_resize, Grid, ResizeDirection, LOG_FLOOR};
pub use stft::{istft, stft, ComplexSpectrogram, MagnitudeSpectrogram};

use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Error, Debug)]
pub enum AudioError {
    #[error("unreadable audio file {path}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("unsupported encoding in {path}: {detail}")]
    UnsupportedEncoding { path: PathBuf, detail: String },
    #[error("zero-length stream in {0}")]
    ZeroLength(PathBuf),
    #[error("cannot write {path}")]
    Unwritable {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("invalid sample rate {0}")]
    InvalidRate(u32),
    #[error("waveform of {len} samples is shorter than hop {hop}")]
    TooShort { len: usize, hop: usize },
    #[error("invalid STFT geometry: window {window}, hop {hop}")]
    InvalidGeometry { window: usize, hop: usize },
    #[error("degenerate overlap-add normalization at sample {0}")]
    DegenerateNormalization(usize),
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: (usize, usize),
        actual: (usize, usize),
    },
}

pub type Result<T> = std::result::Result<T, AudioError>;

/// A mono signal with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidRate(sample_rate));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::NonFinite(i));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Copy of `len` samples starting at `offset`, zero-padded past the end.
    pub fn slice(&self, offset: usize, len: usize) -> Waveform {
        let mut samples = vec![0.0; len];
        if offset < self.samples.len() {
            let end = (offset + len).min(self.samples.len());
            samples[..end - offset].copy_from_slice(&self.samples[offset..end]);
        }
        Waveform {
            samples,
            sample_rate: self.sample_rate,
        }
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.energy() / self.samples.len() as f64).sqrt()
    }
}

/// Read a WAV file as a mono waveform scaled to [-1, 1].
pub fn load_audio(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|source| match source {
        hound::Error::Unsupported | hound::Error::FormatError(_) => {
            AudioError::UnsupportedEncoding {
                path: path.to_path_buf(),
                detail: source.to_string(),
            }
        }
        source => AudioError::Unreadable {
            path: path.to_path_buf(),
            source,
        },
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 || channels > 2 {
        return Err(AudioError::UnsupportedEncoding {
            path: path.to_path_buf(),
            detail: format!("{channels} channels"),
        });
    }
    let read_err = |source| AudioError::Unreadable {
        path: path.to_path_buf(),
        source,
    };
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(read_err)?,
        (hound::SampleFormat::Int, 24) => reader
            .samples::<i32>()
            .map(|s| s.map(|v| v as f64 / 8_388_608.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(read_err)?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(read_err)?,
        (format, bits) => {
            return Err(AudioError::UnsupportedEncoding {
                path: path.to_path_buf(),
                detail: format!("{format:?} {bits}-bit"),
            })
        }
    };
    if interleaved.is_empty() {
        return Err(AudioError::ZeroLength(path.to_path_buf()));
    }
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(2)
            .map(|frame| 0.5 * (frame[0] + frame[1]))
            .collect()
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Write a float32 mono WAV. Samples outside [-1, 1] are stored unchanged.
pub fn write_audio(w: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(i) = w.samples.iter().position(|s| !s.is_finite()) {
        return Err(AudioError::NonFinite(i));
    }
    let clipped = w.samples.iter().filter(|s| s.abs() > 1.0).count();
    if clipped > 0 {
        log::warn!(
            "{}: {clipped} samples outside [-1, 1] written without clipping",
            path.display()
        );
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let write_err = |source| AudioError::Unwritable {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(write_err)?;
    for &s in &w.samples {
        writer.write_sample(s as f32).map_err(write_err)?;
    }
    writer.finalize().map_err(write_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_pcm16(path: &Path, channels: u16, frames: &[&[i16]]) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for frame in frames {
            for &s in frame.iter() {
                w.write_sample(s).unwrap();
            }
        }
        w.finalize().unwrap();
    }

    #[test]
    fn stereo_opposite_channels_downmix_to_silence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..100 {
            w.write_sample(0.5f32).unwrap();
            w.write_sample(-0.5f32).unwrap();
        }
        w.finalize().unwrap();
        let wave = load_audio(&path).unwrap();
        assert_eq!(wave.len(), 100);
        assert!(wave.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn pcm16_full_scale() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.wav");
        write_pcm16(&path, 1, &[&[32767, -32768, 0]]);
        let wave = load_audio(&path).unwrap();
        assert!((wave.samples[0] - 32767.0 / 32768.0).abs() < 1e-12);
        assert!((wave.samples[0] - 0.99997).abs() < 1e-5);
        assert_eq!(wave.samples[1], -1.0);
    }

    #[test]
    fn pcm24_is_scaled() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p24.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(4_194_304i32).unwrap();
        w.finalize().unwrap();
        let wave = load_audio(&path).unwrap();
        assert_eq!(wave.samples, vec![0.5]);
    }

    #[test]
    fn empty_body_is_zero_length_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.wav");
        write_pcm16(&path, 1, &[]);
        let err = load_audio(&path).unwrap_err();
        assert!(err.to_string().contains("zero-length stream"), "{err}");
    }

    #[test]
    fn missing_file_is_unreadable() {
        assert!(matches!(
            load_audio("/nonexistent/x.wav"),
            Err(AudioError::Unreadable { .. })
        ));
    }

    #[test]
    fn garbage_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.wav");
        std::fs::write(&path, b"not a riff file at all, definitely").unwrap();
        assert!(matches!(
            load_audio(&path),
            Err(AudioError::UnsupportedEncoding { .. })
        ));
    }

    #[test]
    fn float_round_trip_white_noise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<f64> = (0..10880).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = Waveform::new(samples, 10880).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.wav");
        write_audio(&w, &path).unwrap();
        let back = load_audio(&path).unwrap();
        assert_eq!(back.sample_rate, 10880);
        let max = w
            .samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-7, "{max}");
    }

    #[test]
    fn out_of_range_samples_are_not_clipped() {
        let w = Waveform::new(vec![1.5, -2.0, 0.25], 8000).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loud.wav");
        write_audio(&w, &path).unwrap();
        assert_eq!(load_audio(&path).unwrap().samples, vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn zero_length_waveform_writes_valid_empty_file() {
        let w = Waveform::zeros(0, 8000);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.wav");
        write_audio(&w, &path).unwrap();
        let reader = hound::WavReader::open(&path).unwrap();
        assert_eq!(reader.duration(), 0);
        assert_eq!(reader.spec().sample_format, hound::SampleFormat::Float);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            Waveform::new(vec![0.0, f64::NAN], 8000),
            Err(AudioError::NonFinite(1))
        ));
        assert!(Waveform::new(vec![], 0).is_err());
    }
}
