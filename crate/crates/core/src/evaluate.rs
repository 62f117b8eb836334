//! Per-chunk SDR/SIR/SAR over a manifest split, with pooled statistics.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::Waveform;
use crate::dataset::{DatasetError, Manifest, SampleRecord, Split, TrackAudio};
use crate::metrics::{MetricsError, Projector, Stat};
use crate::net::Network;
use crate::separate::{ideal_mask_separation, SeparationError, Separator};

#[derive(Error, Debug)]
pub enum EvalError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Separation(#[from] SeparationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("no evaluable chunks in the {0:?} split ({1} skipped)")]
    NothingToEvaluate(Split, usize),
    #[error("network has {net} outputs, manifest has {manifest} sources")]
    SourceCount { net: usize, manifest: usize },
    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Where the separated estimates come from.
#[derive(Clone, Copy)]
pub enum Estimator<'a> {
    Network(&'a Network<f32>),
    /// Ideal amplitude masks computed from the true stems.
    IdealMask,
    /// The unprocessed mixture as every source estimate.
    Mixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkMetrics {
    pub track_id: String,
    pub chunk_index: usize,
    pub source: String,
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
    pub rank_deficient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSummary {
    pub source: String,
    pub sdr: Stat,
    pub sir: Stat,
    pub sar: Stat,
}

impl SourceSummary {
    fn of(source: String, rows: &[&ChunkMetrics]) -> Self {
        let col = |f: fn(&ChunkMetrics) -> f64| Stat::of(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
        Self {
            source,
            sdr: col(|r| r.sdr),
            sir: col(|r| r.sir),
            sar: col(|r| r.sar),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub filter_length: usize,
    pub chunks_evaluated: usize,
    pub chunks_skipped: usize,
    pub sources: Vec<SourceSummary>,
    pub overall: SourceSummary,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub rows: Vec<ChunkMetrics>,
    pub report: EvalReport,
}

impl Evaluation {
    pub fn csv(&self) -> String {
        let mut out = String::from("track_id,chunk_index,source,sdr,sir,sar\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.track_id, r.chunk_index, r.source, r.sdr, r.sir, r.sar
            ));
        }
        out
    }

    /// Writes `metrics.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let io = |path: PathBuf| move |source| EvalError::Io { path, source };
        fs::create_dir_all(dir).map_err(io(dir.to_path_buf()))?;
        let csv = dir.join("metrics.csv");
        fs::write(&csv, self.csv()).map_err(io(csv.clone()))?;
        let json = dir.join("summary.json");
        let mut text = serde_json::to_string_pretty(&self.report).expect("report serializes");
        text.push('\n');
        fs::write(&json, text).map_err(io(json.clone()))?;
        Ok(())
    }
}

fn estimates(
    estimator: Estimator<'_>,
    manifest: &Manifest,
    mixtures: &[Waveform],
    stems: &[Vec<Waveform>],
) -> Result<Vec<Vec<Waveform>>> {
    let params = manifest.audio_params();
    Ok(match estimator {
        Estimator::Network(net) => Separator::new(net, params).separate_chunks(mixtures)?,
        Estimator::IdealMask => mixtures
            .iter()
            .zip(stems)
            .map(|(m, s)| ideal_mask_separation(m, s, &params))
            .collect::<std::result::Result<_, _>>()?,
        Estimator::Mixture => mixtures
            .iter()
            .map(|m| vec![m.clone(); manifest.k()])
            .collect(),
    })
}

/// Score every chunk of `split`. Chunks with a silent reference are skipped
/// and counted.
pub fn evaluate_manifest(
    manifest: &Manifest,
    split: Split,
    estimator: Estimator<'_>,
    filter_length: usize,
) -> Result<Evaluation> {
    if let Estimator::Network(net) = estimator {
        if net.config().out_channels != manifest.k() {
            return Err(EvalError::SourceCount {
                net: net.config().out_channels,
                manifest: manifest.k(),
            });
        }
    }
    let mut records: Vec<&SampleRecord> = manifest.records_in(split).collect();
    records.sort_by(|a, b| (&a.track_id, a.chunk_index).cmp(&(&b.track_id, b.chunk_index)));
    let mut rows = Vec::new();
    let mut skipped = 0;
    let mut evaluated = 0;
    let len = manifest.chunk_length;
    let mut start = 0;
    while start < records.len() {
        let track_id = &records[start].track_id;
        let end = start + records[start..].iter().take_while(|r| &r.track_id == track_id).count();
        let group: Vec<&SampleRecord> = records[start..end]
            .iter()
            .copied()
            .filter(|r| {
                let silent = r.any_silent();
                skipped += silent as usize;
                !silent
            })
            .collect();
        start = end;
        if group.is_empty() {
            continue;
        }
        let audio = TrackAudio::load(manifest.track(track_id)?, manifest.sample_rate, manifest.hop)?;
        let mixtures: Vec<Waveform> = group.iter().map(|r| audio.mixture.slice(r.offset, len)).collect();
        let stems: Vec<Vec<Waveform>> = group
            .iter()
            .map(|r| audio.stems.iter().map(|s| s.slice(r.offset, len)).collect())
            .collect();
        let est = estimates(estimator, manifest, &mixtures, &stems)?;
        for ((r, refs), est) in group.iter().zip(&stems).zip(&est) {
            let views: Vec<&[f64]> = refs.iter().map(|w| w.samples.as_slice()).collect();
            let mut projector = match Projector::new(&views, filter_length) {
                Ok(p) => p,
                Err(MetricsError::SilentReference(_)) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            evaluated += 1;
            for (i, name) in manifest.source_names.iter().enumerate() {
                let d = projector.decompose(&est[i].samples, i)?;
                let ratios = d.ratios()?;
                rows.push(ChunkMetrics {
                    track_id: r.track_id.clone(),
                    chunk_index: r.chunk_index,
                    source: name.clone(),
                    sdr: ratios.sdr,
                    sir: ratios.sir,
                    sar: ratios.sar,
                    rank_deficient: d.rank_deficient,
                });
            }
        }
    }
    if evaluated == 0 {
        return Err(EvalError::NothingToEvaluate(split, skipped));
    }
    let sources = manifest
        .source_names
        .iter()
        .map(|name| {
            let mine: Vec<&ChunkMetrics> = rows.iter().filter(|r| &r.source == name).collect();
            SourceSummary::of(name.clone(), &mine)
        })
        .collect();
    let all: Vec<&ChunkMetrics> = rows.iter().collect();
    let report = EvalReport {
        split,
        filter_length,
        chunks_evaluated: evaluated,
        chunks_skipped: skipped,
        sources,
        overall: SourceSummary::of("Overall".into(), &all),
    };
    Ok(Evaluation { rows, report })
}
