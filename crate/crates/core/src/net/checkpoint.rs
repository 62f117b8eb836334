//! Binary checkpoint format.
//!
//! ```text
//! "MUNET" | u32 version | u32 header_len | header JSON
//!         | f32 parameters (LE, declared order) | u64 epoch
//!         | rng seed [32] | u128 word position
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{Network, NetError, NetworkConfig, Parameter, Result};
use crate::autodiff::Tensor;
use crate::features::AudioParams;

const MAGIC: &[u8; 5] = b"MUNET";
pub const FORMAT_VERSION: u32 = 1;

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: String,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub network: NetworkConfig,
    pub optimizer: OptimizerState,
    pub source_names: Vec<String>,
    #[serde(default)]
    pub audio: AudioParams,
    /// Free-form training settings, carried through untouched.
    #[serde(default)]
    pub training: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    meta: CheckpointMeta,
    parameters: Vec<(String, Vec<usize>)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub network: Network<f32>,
    pub epoch: u64,
    pub rng: RngState,
}

pub fn save_checkpoint(
    path: &Path,
    network: &Network<f32>,
    meta: &CheckpointMeta,
    epoch: u64,
    rng: &RngState,
) -> Result<()> {
    if meta.network != *network.config() {
        return Err(NetError::Incompatible(
            "metadata config differs from the network being saved".into(),
        ));
    }
    let header = Header {
        meta: meta.clone(),
        parameters: network
            .parameters()
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| NetError::Version(e.to_string()))?;
    let mut buf = Vec::with_capacity(64 + json.len() + 4 * network.parameter_count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in network.parameters() {
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&epoch.to_le_bytes());
    buf.extend_from_slice(&rng.seed);
    buf.extend_from_slice(&rng.word_pos.to_le_bytes());

    // write-then-rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(NetError::Truncated(format!(
                "{what} needs {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            ))),
        }
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(NetError::Version("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.array("version")?);
    if version != FORMAT_VERSION {
        return Err(NetError::Version(format!(
            "unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let len = u32::from_le_bytes(r.array("header length")?) as usize;
    let header: Header = serde_json::from_slice(r.take(len, "header")?)
        .map_err(|e| NetError::Version(format!("malformed header: {e}")))?;
    let config = header.meta.network.clone();
    config.validate()?;
    let layout = config.parameter_layout();
    if layout != header.parameters {
        return Err(NetError::Incompatible(
            "parameter list does not match the stored network config".into(),
        ));
    }
    let mut params = Vec::with_capacity(layout.len());
    for (name, shape) in layout {
        let n: usize = shape.iter().product();
        let bytes = r.take(4 * n, &name)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(Parameter {
            name,
            value: Tensor::new(shape, data),
            grad: None,
        });
    }
    let epoch = u64::from_le_bytes(r.array("epoch")?);
    let seed = r.array::<32>("rng seed")?;
    let word_pos = u128::from_le_bytes(r.array("rng position")?);
    if r.pos != buf.len() {
        return Err(NetError::Version(format!(
            "{} trailing bytes after checkpoint body",
            buf.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        network: Network::from_parts(config, params),
        meta: header.meta,
        epoch,
        rng: RngState { seed, word_pos },
    })
}

impl Checkpoint {
    /// Load and require the stored architecture to match `expected`
    /// (seed and dropout may differ).
    pub fn load_compatible(path: &Path, expected: &NetworkConfig) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        let got = &ckpt.meta.network;
        if got.filters != expected.filters
            || got.in_channels != expected.in_channels
            || got.out_channels != expected.out_channels
        {
            return Err(NetError::Incompatible(format!(
                "checkpoint has filters {:?} and {} sources, expected {:?} and {}",
                got.filters, got.out_channels, expected.filters, expected.out_channels
            )));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn setup() -> (Network<f32>, CheckpointMeta) {
        let config = NetworkConfig {
            filters: vec![2, 3, 4],
            ..NetworkConfig::toy(2)
        };
        let meta = CheckpointMeta {
            network: config.clone(),
            optimizer: OptimizerState {
                kind: "sgd".into(),
                learning_rate: 0.01,
            },
            source_names: vec!["a".into(), "b".into()],
            audio: AudioParams::default(),
            training: serde_json::Value::Null,
        };
        (Network::new(config).unwrap(), meta)
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.munet");
        let (net, meta) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.next_u64();
        save_checkpoint(&path, &net, &meta, 7, &RngState::capture(&rng)).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.network.parameters(), net.parameters());
        assert_eq!(back.meta, meta);
        assert_eq!(back.epoch, 7);
        let mut restored = back.rng.restore();
        assert_eq!(restored.next_u64(), rng.next_u64());
    }

    #[test]
    fn truncation_and_version_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.munet");
        let (net, meta) = setup();
        let rng = RngState::capture(&ChaCha8Rng::seed_from_u64(0));
        save_checkpoint(&path, &net, &meta, 1, &rng).unwrap();
        let bytes = fs::read(&path).unwrap();

        fs::write(&path, &bytes[..bytes.len() - 20]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(NetError::Truncated(_))));

        let mut bad = bytes.clone();
        bad[5] = 99;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(NetError::Version(_))));

        fs::write(&path, b"RIFF....").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(NetError::Version(_))));
    }

    #[test]
    fn mismatched_sources_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.munet");
        let (net, meta) = setup();
        let rng = RngState::capture(&ChaCha8Rng::seed_from_u64(0));
        save_checkpoint(&path, &net, &meta, 1, &rng).unwrap();
        let mut expected = meta.network.clone();
        expected.out_channels = 3;
        assert!(matches!(
            Checkpoint::load_compatible(&path, &expected),
            Err(NetError::Incompatible(_))
        ));
        assert!(Checkpoint::load_compatible(&path, &meta.network).is_ok());
    }
}
