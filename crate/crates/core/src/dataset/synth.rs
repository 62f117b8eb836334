//! Seeded synthetic multitrack data: each stem is drawn from a simple
//! archetype, and the mixture is the exact sample-wise sum of the stems.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{io_err, DatasetError, Result, Split, TrackEntry, TRACK_LIST};
use crate::audio::{write_audio, Waveform};

/// Stem RMS before the per-source gain is applied.
const BASE_RMS: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Archetype {
    /// Harmonic tone with a random fundamental, partials at 1/n amplitude.
    SineBank { min_hz: f64, max_hz: f64, partials: usize },
    /// White noise restricted to a frequency band.
    Noise { low_hz: f64, high_hz: f64 },
    /// Decaying tone bursts at a fixed rate.
    AmPulses { min_hz: f64, max_hz: f64, rate_hz: f64 },
    /// Repeating linear sweep.
    Chirp { start_hz: f64, end_hz: f64, period_secs: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSource {
    pub name: String,
    pub archetype: Archetype,
    #[serde(default = "one")]
    pub gain: f64,
    /// Probability that a stem is muted for a whole segment.
    #[serde(default)]
    pub mute_probability: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub sample_rate: u32,
    pub duration_secs: f64,
    /// Training tracks.
    pub tracks: usize,
    #[serde(default)]
    pub test_tracks: usize,
    pub seed: u64,
    /// Muting granularity.
    #[serde(default = "segment")]
    pub segment_secs: f64,
    pub sources: Vec<SynthSource>,
}

fn segment() -> f64 {
    6.0
}

impl SynthConfig {
    /// Two spectrally distinct sources: a low harmonic tone and high band noise.
    pub fn two_source(tracks: usize, duration_secs: f64, seed: u64) -> Self {
        Self {
            sample_rate: 10880,
            duration_secs,
            tracks,
            test_tracks: 0,
            seed,
            segment_secs: 6.0,
            sources: vec![
                SynthSource {
                    name: "tone".into(),
                    archetype: Archetype::SineBank {
                        min_hz: 150.0,
                        max_hz: 400.0,
                        partials: 3,
                    },
                    gain: 1.0,
                    mute_probability: 0.0,
                },
                SynthSource {
                    name: "noise".into(),
                    archetype: Archetype::Noise {
                        low_hz: 1800.0,
                        high_hz: 4000.0,
                    },
                    gain: 1.0,
                    mute_probability: 0.0,
                },
            ],
        }
    }

    pub fn source_names(&self) -> Vec<String> {
        self.sources.iter().map(|s| s.name.clone()).collect()
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DatasetError::Config(m));
        if self.sources.len() < 2 {
            return bad("synthetic config needs at least two sources".into());
        }
        if self.sample_rate == 0 || !(self.duration_secs > 0.0) || !(self.segment_secs > 0.0) {
            return bad("sample_rate, duration_secs and segment_secs must be positive".into());
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        for s in &self.sources {
            if s.name.is_empty() || s.name == "mixture" || s.name.contains(['/', '\\']) {
                return bad(format!("invalid source name '{}'", s.name));
            }
            if !(s.gain >= 0.0) || !(0.0..=1.0).contains(&s.mute_probability) {
                return bad(format!("source {}: gain or mute_probability out of range", s.name));
            }
            let (lo, hi) = match s.archetype {
                Archetype::SineBank { min_hz, max_hz, .. } => (min_hz, max_hz),
                Archetype::Noise { low_hz, high_hz } => (low_hz, high_hz),
                Archetype::AmPulses { min_hz, max_hz, .. } => (min_hz, max_hz),
                Archetype::Chirp { start_hz, end_hz, .. } => (start_hz.min(end_hz), start_hz.max(end_hz)),
            };
            if !(0.0 <= lo && lo <= hi && hi <= nyquist) {
                return bad(format!("source {}: frequency range outside 0..{nyquist} Hz", s.name));
            }
        }
        Ok(())
    }
}

fn band_noise(rng: &mut ChaCha8Rng, n: usize, rate: f64, low: f64, high: f64) -> Vec<f64> {
    let mut buf: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, z) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * rate / n as f64;
        if f < low || f > high {
            *z = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|z| z.re / n as f64).collect()
}

fn render(archetype: &Archetype, rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Vec<f64> {
    let t = |i: usize| i as f64 / rate;
    match *archetype {
        Archetype::SineBank { min_hz, max_hz, partials } => {
            let f0 = rng.gen_range(min_hz..=max_hz);
            let nyquist = rate / 2.0;
            let parts: Vec<(f64, f64, f64)> = (1..=partials.max(1))
                .map(|k| (k as f64 * f0, 1.0 / k as f64, rng.gen_range(0.0..2.0 * PI)))
                .filter(|(f, _, _)| *f < nyquist)
                .collect();
            (0..n)
                .map(|i| {
                    parts
                        .iter()
                        .map(|(f, a, p)| a * (2.0 * PI * f * t(i) + p).sin())
                        .sum()
                })
                .collect()
        }
        Archetype::Noise { low_hz, high_hz } => band_noise(rng, n, rate, low_hz, high_hz),
        Archetype::AmPulses { min_hz, max_hz, rate_hz } => {
            let f = rng.gen_range(min_hz..=max_hz);
            let phase = rng.gen_range(0.0..1.0);
            (0..n)
                .map(|i| {
                    let pos = (t(i) * rate_hz + phase).fract();
                    (-12.0 * pos).exp() * (2.0 * PI * f * t(i)).sin()
                })
                .collect()
        }
        Archetype::Chirp { start_hz, end_hz, period_secs } => {
            let offset = rng.gen_range(0.0..period_secs);
            let slope = (end_hz - start_hz) / period_secs;
            (0..n)
                .map(|i| {
                    let tau = (t(i) + offset) % period_secs;
                    (2.0 * PI * (start_hz * tau + 0.5 * slope * tau * tau)).sin()
                })
                .collect()
        }
    }
}

/// Write `<out>/<track_id>/{mixture.wav, <source>.wav}` for every track plus
/// a `tracks.json` listing, and return the entries.
pub fn gen_synthetic(config: &SynthConfig, out_dir: &Path) -> Result<Vec<TrackEntry>> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let rate = config.sample_rate as f64;
    let n = (config.duration_secs * rate).round() as usize;
    let segment = ((config.segment_secs * rate).round() as usize).max(1);
    let total = config.tracks + config.test_tracks;
    let mut entries = Vec::with_capacity(total);
    let mut listing = Vec::with_capacity(total);

    for track in 0..total {
        let track_id = format!("track_{track:03}");
        let split = if track < config.tracks {
            Split::Train
        } else {
            Split::Test
        };
        let dir = out_dir.join(&track_id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut mixture = vec![0.0f64; n];
        let mut stem_paths = Vec::new();
        let mut relative = Vec::new();
        for (si, source) in config.sources.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream((track * 1024 + si) as u64);
            let mut x = render(&source.archetype, &mut rng, n, rate);
            let rms = (x.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
            let scale = if rms > 0.0 { source.gain * BASE_RMS / rms } else { 0.0 };
            for seg in x.chunks_mut(segment) {
                let muted = source.mute_probability > 0.0 && rng.gen_bool(source.mute_probability);
                for v in seg {
                    // round through f32 so the written mixture is the exact sum of the written stems
                    *v = if muted { 0.0 } else { (*v * scale) as f32 as f64 };
                }
            }
            for (m, v) in mixture.iter_mut().zip(&x) {
                *m += v;
            }
            let path = dir.join(format!("{}.wav", source.name));
            write_stem(&x, config.sample_rate, &path, &track_id)?;
            relative.push(PathBuf::from(&track_id).join(format!("{}.wav", source.name)));
            stem_paths.push(path);
        }
        let mix_path = dir.join("mixture.wav");
        write_stem(&mixture, config.sample_rate, &mix_path, &track_id)?;
        listing.push(TrackEntry {
            track_id: track_id.clone(),
            mixture_path: PathBuf::from(&track_id).join("mixture.wav"),
            stem_paths: relative,
            split,
        });
        entries.push(TrackEntry {
            track_id,
            mixture_path: mix_path,
            stem_paths,
            split,
        });
    }
    let list_path = out_dir.join(TRACK_LIST);
    let mut json = serde_json::to_string_pretty(&listing).expect("track list serializes");
    json.push('\n');
    fs::write(&list_path, json).map_err(io_err(&list_path))?;
    Ok(entries)
}

fn write_stem(samples: &[f64], rate: u32, path: &Path, track_id: &str) -> Result<()> {
    let w = Waveform {
        samples: samples.to_vec(),
        sample_rate: rate,
    };
    write_audio(&w, path).map_err(|source| DatasetError::Audio {
        track_id: track_id.into(),
        source,
    })
}
