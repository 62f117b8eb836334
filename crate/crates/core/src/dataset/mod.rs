//! Track discovery, chunking, silent-source detection, validation split, and
//! the JSON manifest that ties them together.

mod synth;

pub use synth::{gen_synthetic, Archetype, SynthConfig, SynthSource};

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio::{load_audio, resample, AudioError, Waveform};

pub const MANIFEST_VERSION: u32 = 1;
pub const TRACK_LIST: &str = "tracks.json";

#[derive(Error, Debug)]
pub enum DatasetError {
    #[error("track {track_id}")]
    Audio {
        track_id: String,
        #[source]
        source: AudioError,
    },
    #[error("track {track_id}: stem {stem} has {stem_len} samples, mixture has {mixture_len}")]
    LengthMismatch {
        track_id: String,
        stem: usize,
        stem_len: usize,
        mixture_len: usize,
    },
    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("unknown track {0}")]
    UnknownTrack(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackEntry {
    pub track_id: String,
    pub mixture_path: PathBuf,
    pub stem_paths: Vec<PathBuf>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub track_id: String,
    pub chunk_index: usize,
    pub offset: usize,
    pub split: Split,
    /// One flag per source, true when that stem is silent in this chunk.
    pub silent: Vec<bool>,
}

impl SampleRecord {
    pub fn any_silent(&self) -> bool {
        self.silent.iter().any(|&s| s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub source_names: Vec<String>,
    pub sample_rate: u32,
    pub chunk_seconds: f64,
    pub window_size: usize,
    pub hop: usize,
    pub valid_fraction: f64,
    pub seed: u64,
    pub filter_silent: bool,
    pub silence_rms: f64,
}

impl PipelineConfig {
    pub fn new(source_names: Vec<String>) -> Self {
        Self {
            source_names,
            sample_rate: 10880,
            chunk_seconds: 6.0,
            window_size: 1022,
            hop: 256,
            valid_fraction: 0.05,
            seed: 0,
            filter_silent: true,
            silence_rms: 1e-4,
        }
    }

    pub fn chunk_length(&self) -> usize {
        (self.chunk_seconds * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DatasetError::Config(m.into()));
        if self.source_names.len() < 2 {
            return bad("need at least two sources");
        }
        let unique: BTreeSet<_> = self.source_names.iter().collect();
        if unique.len() != self.source_names.len() || self.source_names.iter().any(|s| s.is_empty()) {
            return bad("source names must be distinct and non-empty");
        }
        if self.sample_rate == 0 || !(self.chunk_seconds > 0.0) || self.chunk_length() < self.hop {
            return bad("sample_rate and chunk_seconds must give at least one hop per chunk");
        }
        if self.hop == 0 || self.window_size % 4 != 2 || self.hop > self.window_size {
            return bad("window_size must be 2 mod 4 (even bin count after halving) and hop in 1..=window");
        }
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return bad("valid_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub source_names: Vec<String>,
    pub sample_rate: u32,
    pub chunk_length: usize,
    pub window_size: usize,
    pub hop: usize,
    pub config_hash: String,
    pub removed_silent: usize,
    pub tracks: Vec<TrackEntry>,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn empty(config: &PipelineConfig) -> Self {
        Self {
            version: MANIFEST_VERSION,
            source_names: config.source_names.clone(),
            sample_rate: config.sample_rate,
            chunk_length: config.chunk_length(),
            window_size: config.window_size,
            hop: config.hop,
            config_hash: config.hash(),
            removed_silent: 0,
            tracks: Vec::new(),
            records: Vec::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.source_names.len()
    }

    pub fn audio_params(&self) -> crate::features::AudioParams {
        crate::features::AudioParams {
            sample_rate: self.sample_rate,
            chunk_length: self.chunk_length,
            window_size: self.window_size,
            hop: self.hop,
        }
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.records_in(split).count()
    }

    pub fn track(&self, track_id: &str) -> Result<&TrackEntry> {
        self.tracks
            .iter()
            .find(|t| t.track_id == track_id)
            .ok_or_else(|| DatasetError::UnknownTrack(track_id.into()))
    }

    /// Write as pretty JSON; track paths under the manifest's directory are
    /// stored relative to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = absolute_parent(path)?;
        let mut copy = self.clone();
        for t in &mut copy.tracks {
            t.mixture_path = relative_to(&t.mixture_path, &base);
            for p in &mut t.stem_paths {
                *p = relative_to(p, &base);
            }
        }
        let mut json = serde_json::to_string_pretty(&copy).expect("manifest serializes");
        json.push('\n');
        fs::write(path, json).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut m: Manifest = serde_json::from_str(&text).map_err(|source| DatasetError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if m.version != MANIFEST_VERSION {
            return Err(DatasetError::Config(format!(
                "manifest version {} is not supported",
                m.version
            )));
        }
        let base = absolute_parent(path)?;
        for t in &mut m.tracks {
            t.mixture_path = base.join(&t.mixture_path);
            for p in &mut t.stem_paths {
                *p = base.join(&*p);
            }
        }
        Ok(m)
    }
}

fn absolute_parent(path: &Path) -> Result<PathBuf> {
    let abs = std::path::absolute(path).map_err(io_err(path))?;
    Ok(abs.parent().map(Path::to_path_buf).unwrap_or_default())
}

fn relative_to(path: &Path, base: &Path) -> PathBuf {
    match std::path::absolute(path) {
        Ok(abs) => abs
            .strip_prefix(base)
            .map(Path::to_path_buf)
            .unwrap_or(abs),
        Err(_) => path.to_path_buf(),
    }
}

/// Mixture and stems of one track at the pipeline rate, trimmed to a common length.
#[derive(Debug, Clone)]
pub struct TrackAudio {
    pub mixture: Waveform,
    pub stems: Vec<Waveform>,
}

impl TrackAudio {
    pub fn load(entry: &TrackEntry, sample_rate: u32, tolerance: usize) -> Result<Self> {
        let ctx = |source| DatasetError::Audio {
            track_id: entry.track_id.clone(),
            source,
        };
        let read = |p: &Path| -> Result<Waveform> {
            resample(&load_audio(p).map_err(ctx)?, sample_rate).map_err(ctx)
        };
        let mut mixture = read(&entry.mixture_path)?;
        let mut stems = entry
            .stem_paths
            .iter()
            .map(|p| read(p))
            .collect::<Result<Vec<_>>>()?;
        let mut len = mixture.len();
        for (i, s) in stems.iter().enumerate() {
            if s.len().abs_diff(mixture.len()) > tolerance {
                return Err(DatasetError::LengthMismatch {
                    track_id: entry.track_id.clone(),
                    stem: i,
                    stem_len: s.len(),
                    mixture_len: mixture.len(),
                });
            }
            len = len.min(s.len());
        }
        mixture.samples.truncate(len);
        stems.iter_mut().for_each(|s| s.samples.truncate(len));
        Ok(Self { mixture, stems })
    }
}

/// True when the chunk's RMS is below `threshold`.
pub fn detect_silent(chunk: &Waveform, threshold: f64) -> bool {
    chunk.rms() < threshold
}

/// Non-overlapping full-length chunks; the trailing remainder is dropped.
pub fn chunk_waveforms(
    track_id: &str,
    split: Split,
    stems: &[Waveform],
    chunk_length: usize,
    silence_rms: f64,
) -> Vec<SampleRecord> {
    let len = stems.iter().map(Waveform::len).min().unwrap_or(0);
    (0..len / chunk_length)
        .map(|i| {
            let offset = i * chunk_length;
            SampleRecord {
                track_id: track_id.to_string(),
                chunk_index: i,
                offset,
                split,
                silent: stems
                    .iter()
                    .map(|s| detect_silent(&s.slice(offset, chunk_length), silence_rms))
                    .collect(),
            }
        })
        .collect()
}

pub fn chunk_track(entry: &TrackEntry, config: &PipelineConfig) -> Result<Vec<SampleRecord>> {
    let audio = TrackAudio::load(entry, config.sample_rate, config.hop)?;
    Ok(chunk_waveforms(
        &entry.track_id,
        entry.split,
        &audio.stems,
        config.chunk_length(),
        config.silence_rms,
    ))
}

/// Move `ceil(fraction * N_train)` seeded-random train records to valid.
pub fn split_validation(mut manifest: Manifest, fraction: f64, seed: u64) -> Manifest {
    let train: Vec<usize> = (0..manifest.records.len())
        .filter(|&i| manifest.records[i].split == Split::Train)
        .collect();
    let n = (fraction * train.len() as f64).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &i in train.choose_multiple(&mut rng, n.min(train.len())) {
        manifest.records[i].split = Split::Valid;
    }
    manifest
}

/// Drop train records with any silent source; other splits are untouched.
pub fn filter_silent(mut manifest: Manifest) -> (Manifest, usize) {
    let before = manifest.records.len();
    manifest
        .records
        .retain(|r| r.split != Split::Train || !r.any_silent());
    let removed = before - manifest.records.len();
    manifest.removed_silent += removed;
    (manifest, removed)
}

/// Resample, downmix, chunk, flag silence, split, and filter.
pub fn build_manifest(entries: &[TrackEntry], config: &PipelineConfig) -> Result<Manifest> {
    config.validate()?;
    let k = config.source_names.len();
    let mut entries = entries.to_vec();
    entries.sort_by(|a, b| a.track_id.cmp(&b.track_id));
    let mut seen = BTreeSet::new();
    for e in &entries {
        if e.stem_paths.len() != k {
            return Err(DatasetError::Config(format!(
                "track {} lists {} stems for {} sources",
                e.track_id,
                e.stem_paths.len(),
                k
            )));
        }
        if !seen.insert(e.track_id.clone()) {
            return Err(DatasetError::Config(format!("duplicate track {}", e.track_id)));
        }
    }
    let mut manifest = Manifest::empty(config);
    for e in &entries {
        let records = chunk_track(e, config)?;
        log::info!("{}: {} chunks", e.track_id, records.len());
        manifest.records.extend(records);
    }
    manifest.tracks = entries;
    if config.valid_fraction > 0.0 {
        manifest = split_validation(manifest, config.valid_fraction, config.seed);
    }
    if config.filter_silent {
        let (m, removed) = filter_silent(manifest);
        log::info!("removed {removed} train chunks with a silent source");
        manifest = m;
    }
    Ok(manifest)
}

/// Tracks under `root`: from `tracks.json` when present, otherwise every
/// subdirectory holding `mixture.wav` plus one WAV per source (all train).
pub fn discover_tracks(root: &Path, source_names: &[String]) -> Result<Vec<TrackEntry>> {
    let listing = root.join(TRACK_LIST);
    if listing.exists() {
        let text = fs::read_to_string(&listing).map_err(io_err(&listing))?;
        let mut entries: Vec<TrackEntry> =
            serde_json::from_str(&text).map_err(|source| DatasetError::Json {
                path: listing.clone(),
                source,
            })?;
        for e in &mut entries {
            e.mixture_path = root.join(&e.mixture_path);
            e.stem_paths = e.stem_paths.iter().map(|p| root.join(p)).collect();
        }
        return Ok(entries);
    }
    let mut entries = Vec::new();
    let dir = fs::read_dir(root).map_err(io_err(root))?;
    for item in dir {
        let path = item.map_err(io_err(root))?.path();
        if !path.join("mixture.wav").is_file() {
            continue;
        }
        let track_id = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        entries.push(TrackEntry {
            track_id,
            mixture_path: path.join("mixture.wav"),
            stem_paths: source_names
                .iter()
                .map(|s| path.join(format!("{s}.wav")))
                .collect(),
            split: Split::Train,
        });
    }
    entries.sort_by(|a, b| a.track_id.cmp(&b.track_id));
    Ok(entries)
}
