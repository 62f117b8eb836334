//! Per-source L1 losses, their weighted sum, and the task-weighting schedules.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioError, Grid};

pub const DWA_TEMPERATURE: f64 = 2.0;

#[derive(Error, Debug)]
pub enum LossError {
    #[error("energy statistics need at least one sample")]
    Empty,
    #[error(transparent)]
    Shape(#[from] AudioError),
    #[error("source {index} has non-positive energy {value}")]
    NonPositiveEnergy { index: usize, value: f64 },
    #[error("expected {expected} task values, got {actual}")]
    CountMismatch { expected: usize, actual: usize },
    #[error("loss history for task {index} is non-positive ({value})")]
    NonPositiveLoss { index: usize, value: f64 },
    #[error("operation requires strategy {expected}, state uses {actual}")]
    WrongStrategy { expected: Strategy, actual: Strategy },
    #[error("strategy {0} needs global source energies")]
    MissingEnergies(Strategy),
    #[error("unknown {kind} '{value}'")]
    Unknown { kind: &'static str, value: String },
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// L1 between predicted and ideal masks.
    Direct,
    /// L1 between source magnitudes and mask-times-mixture.
    Indirect,
}

impl FromStr for LossKind {
    type Err = LossError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "direct" => Ok(Self::Direct),
            "indirect" => Ok(Self::Indirect),
            _ => Err(LossError::Unknown {
                kind: "loss kind",
                value: s.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "UW")]
    Uniform,
    #[serde(rename = "DWA")]
    Dwa,
    #[serde(rename = "EBW_P1")]
    EbwP1,
    #[serde(rename = "EBW_InstP1")]
    EbwInstP1,
    #[serde(rename = "EBW_P2")]
    EbwP2,
    #[serde(rename = "OH")]
    Oh,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Uniform,
        Strategy::Dwa,
        Strategy::EbwP1,
        Strategy::EbwInstP1,
        Strategy::EbwP2,
        Strategy::Oh,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Strategy::Uniform => "UW",
            Strategy::Dwa => "DWA",
            Strategy::EbwP1 => "EBW_P1",
            Strategy::EbwInstP1 => "EBW_InstP1",
            Strategy::EbwP2 => "EBW_P2",
            Strategy::Oh => "OH",
        }
    }

    /// Whether the strategy needs dataset-wide source energies up front.
    pub fn needs_energies(self) -> bool {
        matches!(
            self,
            Strategy::EbwP1 | Strategy::EbwInstP1 | Strategy::EbwP2 | Strategy::Oh
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Strategy {
    type Err = LossError;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| LossError::Unknown {
                kind: "strategy",
                value: s.into(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EbwVariant {
    P1,
    P2,
}

/// Mean over samples of `Σ S² / (F·T)`.
pub fn source_energy(mags: &[Grid]) -> Result<f64> {
    let first = mags.first().ok_or(LossError::Empty)?;
    let mut total = 0.0;
    for m in mags {
        first.check_shape(m)?;
        total += m.sum_squares() / m.as_slice().len() as f64;
    }
    Ok(total / mags.len() as f64)
}

/// Mean absolute difference between target and estimated masks.
pub fn direct_loss(target_mask: &Grid, est_mask: &Grid) -> Result<f64> {
    target_mask.check_shape(est_mask)?;
    let n = target_mask.as_slice().len() as f64;
    Ok(target_mask
        .as_slice()
        .iter()
        .zip(est_mask.as_slice())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// Mean absolute difference between the source magnitude and the masked mixture.
pub fn indirect_loss(target_mag: &Grid, est_mask: &Grid, mixture_mag: &Grid) -> Result<f64> {
    target_mag.check_shape(est_mask)?;
    target_mag.check_shape(mixture_mag)?;
    let n = target_mag.as_slice().len() as f64;
    Ok(target_mag
        .as_slice()
        .iter()
        .zip(est_mask.as_slice())
        .zip(mixture_mag.as_slice())
        .map(|((s, m), x)| (s - m * x).abs())
        .sum::<f64>()
        / n)
}

/// `Σ w_i · L_i` with the state's current weights.
pub fn total_loss(per_task: &[f64], state: &WeightState) -> Result<f64> {
    check_count(state.weights.len(), per_task.len())?;
    Ok(per_task.iter().zip(&state.weights).map(|(l, w)| l * w).sum())
}

fn check_count(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(LossError::CountMismatch { expected, actual })
    }
}

fn check_energies(energies: &[f64]) -> Result<()> {
    match energies.iter().position(|&e| !(e > 0.0 && e.is_finite())) {
        Some(index) => Err(LossError::NonPositiveEnergy {
            index,
            value: energies[index],
        }),
        None if energies.is_empty() => Err(LossError::Empty),
        None => Ok(()),
    }
}

/// `K · softmax(γ / T)`.
pub fn dwa_weights(gammas: &[f64], temperature: f64) -> Vec<f64> {
    let k = gammas.len() as f64;
    let top = gammas.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = gammas
        .iter()
        .map(|g| ((g - top) / temperature).exp())
        .collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| k * e / z).collect()
}

/// `max E / E_i`, squared for P2. The smallest weight is exactly 1.
pub fn ebw_weights(energies: &[f64], variant: EbwVariant) -> Result<Vec<f64>> {
    check_energies(energies)?;
    let top = energies.iter().fold(0.0f64, |a, &b| a.max(b));
    Ok(energies
        .iter()
        .map(|&e| {
            let r = top / e;
            match variant {
                EbwVariant::P1 => r,
                EbwVariant::P2 => r * r,
            }
        })
        .collect())
}

/// EBW_P1 on energies measured over the current batch.
/// `batch_mags[i]` holds source i's magnitude grids for every batch item.
pub fn ebw_inst_weights(batch_mags: &[Vec<Grid>]) -> Result<Vec<f64>> {
    let energies = batch_mags
        .iter()
        .map(|m| source_energy(m))
        .collect::<Result<Vec<_>>>()?;
    ebw_weights(&energies, EbwVariant::P1)
}

/// Normalized inverse energies: `w_i E_i` constant and `Σ w_i = 1`.
pub fn oh_weights(energies: &[f64]) -> Result<Vec<f64>> {
    check_energies(energies)?;
    let inv: Vec<f64> = energies.iter().map(|e| 1.0 / e).collect();
    let z: f64 = inv.iter().sum();
    Ok(inv.iter().map(|v| v / z).collect())
}

/// Weights for `strategy` as they stand before any training feedback.
pub fn initial_weights(strategy: Strategy, k: usize, energies: Option<&[f64]>) -> Result<Vec<f64>> {
    let need = || energies.ok_or(LossError::MissingEnergies(strategy));
    match strategy {
        Strategy::Uniform | Strategy::Dwa => Ok(vec![1.0; k]),
        Strategy::EbwP1 | Strategy::EbwInstP1 => {
            let e = need()?;
            check_count(k, e.len())?;
            ebw_weights(e, EbwVariant::P1)
        }
        Strategy::EbwP2 => {
            let e = need()?;
            check_count(k, e.len())?;
            ebw_weights(e, EbwVariant::P2)
        }
        Strategy::Oh => {
            let e = need()?;
            check_count(k, e.len())?;
            oh_weights(e)
        }
    }
}

/// Current task weights plus whatever history the strategy needs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightState {
    pub strategy: Strategy,
    pub weights: Vec<f64>,
    /// Up to two most recent per-task epoch averages, oldest first.
    pub dwa_history: Vec<Vec<f64>>,
    pub temperature: f64,
    pub global_energies: Option<Vec<f64>>,
    /// 1-based index of the epoch the current weights apply to.
    pub epoch_index: usize,
    /// Batches where the per-batch energies fell back to global ones.
    pub fallback_count: usize,
}

impl WeightState {
    pub fn new(strategy: Strategy, k: usize, global_energies: Option<Vec<f64>>) -> Result<Self> {
        let weights = initial_weights(strategy, k, global_energies.as_deref())?;
        Ok(Self {
            strategy,
            weights,
            dwa_history: Vec::new(),
            temperature: DWA_TEMPERATURE,
            global_energies,
            epoch_index: 1,
            fallback_count: 0,
        })
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    /// Per-batch hook; only EBW_InstP1 reacts. `batch_energies` are the
    /// per-source energies of the batch about to be stepped on.
    pub fn begin_batch(&mut self, batch_energies: &[f64]) -> Result<()> {
        if self.strategy != Strategy::EbwInstP1 {
            return Ok(());
        }
        check_count(self.k(), batch_energies.len())?;
        match ebw_weights(batch_energies, EbwVariant::P1) {
            Ok(w) => self.weights = w,
            Err(LossError::NonPositiveEnergy { index, .. }) => {
                let global = self
                    .global_energies
                    .as_deref()
                    .ok_or(LossError::MissingEnergies(self.strategy))?;
                log::warn!("batch energy of source {index} is zero; using global energies");
                self.weights = ebw_weights(global, EbwVariant::P1)?;
                self.fallback_count += 1;
            }
            Err(e) => return Err(e),
        }
        Ok(())
    }

    /// Epoch-end hook: advances the epoch counter and runs the DWA update.
    pub fn end_epoch(&mut self, epoch_avg_losses: &[f64]) -> Result<()> {
        if self.strategy == Strategy::Dwa {
            self.dwa_update(epoch_avg_losses)
        } else {
            check_count(self.k(), epoch_avg_losses.len())?;
            self.epoch_index += 1;
            Ok(())
        }
    }

    /// Record the finished epoch's unweighted averages and set the weights
    /// for the next epoch. Epochs 1 and 2 always get unit weights.
    pub fn dwa_update(&mut self, epoch_avg_losses: &[f64]) -> Result<()> {
        if self.strategy != Strategy::Dwa {
            return Err(LossError::WrongStrategy {
                expected: Strategy::Dwa,
                actual: self.strategy,
            });
        }
        check_count(self.k(), epoch_avg_losses.len())?;
        if let Some(index) = epoch_avg_losses.iter().position(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(LossError::NonPositiveLoss {
                index,
                value: epoch_avg_losses[index],
            });
        }
        self.dwa_history.push(epoch_avg_losses.to_vec());
        if self.dwa_history.len() > 2 {
            self.dwa_history.remove(0);
        }
        self.epoch_index += 1;
        self.weights = if self.epoch_index <= 2 {
            vec![1.0; self.k()]
        } else {
            let (older, newer) = (&self.dwa_history[0], &self.dwa_history[1]);
            let gammas: Vec<f64> = newer.iter().zip(older).map(|(n, o)| n / o).collect();
            dwa_weights(&gammas, self.temperature)
        };
        Ok(())
    }
}

/// Per-source energy statistics over a set of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyStats {
    pub source_names: Vec<String>,
    pub per_source_energy: Vec<f64>,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub source: String,
    pub energy: f64,
    pub weights: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub sample_count: usize,
    pub sources: Vec<EnergyRow>,
}

impl EnergyReport {
    /// Starting weights of every strategy for the given energies. DWA shows
    /// its epoch-1 weights; EBW_InstP1 shows P1 on the global energies.
    pub fn new(stats: &EnergyStats) -> Result<Self> {
        let k = stats.per_source_energy.len();
        check_count(stats.source_names.len(), k)?;
        let mut columns = Vec::new();
        for s in Strategy::ALL {
            columns.push((s, initial_weights(s, k, Some(&stats.per_source_energy))?));
        }
        let sources = (0..k)
            .map(|i| EnergyRow {
                source: stats.source_names[i].clone(),
                energy: stats.per_source_energy[i],
                weights: columns
                    .iter()
                    .map(|(s, w)| (s.label().to_string(), w[i]))
                    .collect(),
            })
            .collect();
        Ok(Self {
            sample_count: stats.sample_count,
            sources,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("source,energy");
        for s in Strategy::ALL {
            out.push(',');
            out.push_str(s.label());
        }
        out.push('\n');
        for row in &self.sources {
            out.push_str(&format!("{},{}", row.source, row.energy));
            for s in Strategy::ALL {
                out.push_str(&format!(",{}", row.weights[s.label()]));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn energy_examples() {
        assert_eq!(source_energy(&[Grid::filled(3, 5, 1.0)]).unwrap(), 1.0);
        let g = Grid::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(source_energy(&[g]).unwrap(), 7.5);
        let a = Grid::filled(2, 2, 1.0);
        let b = Grid::filled(2, 2, 3f64.sqrt());
        assert!((source_energy(&[a, b]).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(source_energy(&[]), Err(LossError::Empty)));
    }

    #[test]
    fn loss_examples() {
        let one = Grid::filled(1, 1, 1.0);
        let half = Grid::filled(1, 1, 0.5);
        assert_eq!(direct_loss(&one, &half).unwrap(), 0.5);
        assert_eq!(direct_loss(&half, &half).unwrap(), 0.0);
        let s = Grid::from_vec(1, 2, vec![2.0, -3.0]);
        let zero = Grid::zeros(1, 2);
        assert_eq!(indirect_loss(&s, &zero, &Grid::filled(1, 2, 7.0)).unwrap(), 2.5);
        assert!(direct_loss(&one, &zero).is_err());
    }

    #[test]
    fn total_examples() {
        let mut st = WeightState::new(Strategy::Uniform, 2, None).unwrap();
        assert_eq!(total_loss(&[1.0, 2.0], &st).unwrap(), 3.0);
        st.weights = vec![2.0, 0.5];
        assert_eq!(total_loss(&[1.0, 2.0], &st).unwrap(), 3.0);
        assert!(total_loss(&[1.0], &st).is_err());
    }

    #[test]
    fn ebw_and_oh_examples() {
        assert_eq!(ebw_weights(&[4.0, 1.0], EbwVariant::P1).unwrap(), vec![1.0, 4.0]);
        assert_eq!(ebw_weights(&[4.0, 1.0], EbwVariant::P2).unwrap(), vec![1.0, 16.0]);
        assert_eq!(oh_weights(&[1.0, 3.0]).unwrap(), vec![0.75, 0.25]);
        assert!(ebw_weights(&[1.0, 0.0], EbwVariant::P1).is_err());
        assert!(oh_weights(&[-1.0, 1.0]).is_err());
    }

    #[test]
    fn inst_weights_and_fallback() {
        let batch = vec![vec![Grid::filled(2, 2, 2f64.sqrt())], vec![Grid::filled(2, 2, 8f64.sqrt())]];
        let w = ebw_inst_weights(&batch).unwrap();
        assert!((w[0] - 4.0).abs() < 1e-12 && (w[1] - 1.0).abs() < 1e-12);

        let mut st = WeightState::new(Strategy::EbwInstP1, 2, Some(vec![1.0, 2.0])).unwrap();
        st.begin_batch(&[2.0, 8.0]).unwrap();
        assert_eq!(st.weights, vec![4.0, 1.0]);
        st.begin_batch(&[0.0, 8.0]).unwrap();
        assert_eq!(st.weights, vec![2.0, 1.0]);
        assert_eq!(st.fallback_count, 1);
    }

    #[test]
    fn dwa_schedule() {
        let mut st = WeightState::new(Strategy::Dwa, 2, None).unwrap();
        assert_eq!(st.weights, vec![1.0, 1.0]);
        st.dwa_update(&[2.0, 2.0]).unwrap();
        assert_eq!(st.weights, vec![1.0, 1.0]);
        st.dwa_update(&[2.0, 1.0]).unwrap();
        // epoch 3 uses gamma = (1.0, 0.5)
        let e = |x: f64| (x / 2.0).exp();
        let expect = 2.0 * e(1.0) / (e(1.0) + e(0.5));
        assert!((st.weights[0] - expect).abs() < 1e-12);
        assert!((st.weights.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        assert!(st.dwa_update(&[0.0, 1.0]).is_err());
        let mut uw = WeightState::new(Strategy::Uniform, 2, None).unwrap();
        assert!(matches!(uw.dwa_update(&[1.0, 1.0]), Err(LossError::WrongStrategy { .. })));
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.label().parse::<Strategy>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.label()));
        }
        assert!("adam".parse::<Strategy>().is_err());
    }

    #[test]
    fn report_columns() {
        let stats = EnergyStats {
            source_names: vec!["a".into(), "b".into()],
            per_source_energy: vec![4.0, 1.0],
            sample_count: 3,
        };
        let r = EnergyReport::new(&stats).unwrap();
        assert_eq!(r.sources[1].weights["EBW_P1"], 4.0);
        assert_eq!(r.sources[1].weights["EBW_P2"], 16.0);
        assert_eq!(r.to_csv().lines().count(), 3);
    }
}
