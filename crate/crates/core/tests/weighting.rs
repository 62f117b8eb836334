mod common;

use munet::dataset::SynthConfig;
use munet::loss::{
    dwa_weights, ebw_weights, initial_weights, oh_weights, EbwVariant, EnergyReport, Strategy,
    WeightState,
};
use munet::train::TrainingData;
use proptest::prelude::*;

fn energies() -> impl proptest::strategy::Strategy<Value = Vec<f64>> {
    proptest::collection::vec(1e-6f64..1e3, 1..8)
}

proptest! {
    #[test]
    fn ebw_smallest_weight_is_one(e in energies()) {
        for variant in [EbwVariant::P1, EbwVariant::P2] {
            let w = ebw_weights(&e, variant).unwrap();
            let min = w.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(min, 1.0);
        }
    }

    #[test]
    fn ebw_p2_squares_p1(e in energies()) {
        let p1 = ebw_weights(&e, EbwVariant::P1).unwrap();
        let p2 = ebw_weights(&e, EbwVariant::P2).unwrap();
        for (a, b) in p1.iter().zip(&p2) {
            prop_assert!((a * a - b).abs() <= 1e-12 * b);
        }
    }

    #[test]
    fn ebw_balances_weighted_energy(e in energies()) {
        let w = ebw_weights(&e, EbwVariant::P1).unwrap();
        let top = e.iter().cloned().fold(0.0, f64::max);
        for (wi, ei) in w.iter().zip(&e) {
            prop_assert!((wi * ei - top).abs() <= 1e-9 * top);
        }
    }

    #[test]
    fn oh_sums_to_one(e in energies()) {
        let w = oh_weights(&e).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let products: Vec<f64> = w.iter().zip(&e).map(|(a, b)| a * b).collect();
        for p in &products {
            prop_assert!((p - products[0]).abs() <= 1e-9 * products[0]);
        }
    }

    #[test]
    fn dwa_weights_sum_to_k(g in proptest::collection::vec(0.01f64..10.0, 1..8), t in 0.1f64..10.0) {
        let w = dwa_weights(&g, t);
        prop_assert!((w.iter().sum::<f64>() - g.len() as f64).abs() < 1e-9);
        prop_assert!(w.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn strategy_labels_round_trip(i in 0usize..6) {
        let s = Strategy::ALL[i];
        prop_assert_eq!(s.label().parse::<Strategy>().unwrap(), s);
        let json = serde_json::to_string(&s).unwrap();
        prop_assert_eq!(json, format!("\"{}\"", s.label()));
    }
}

#[test]
fn dwa_keeps_uniform_weights_for_two_epochs() {
    let mut state = WeightState::new(Strategy::Dwa, 3, None).unwrap();
    assert_eq!(state.weights(), &[1.0, 1.0, 1.0]);
    state.end_epoch(&[1.0, 2.0, 3.0]).unwrap();
    assert_eq!(state.weights(), &[1.0, 1.0, 1.0]);
    state.end_epoch(&[0.5, 2.0, 3.0]).unwrap();
    let w = state.weights().to_vec();
    // the task whose loss fell fastest gets the smallest weight
    assert!(w[0] < w[1] && (w[1] - w[2]).abs() < 1e-12);
    assert!((w.iter().sum::<f64>() - 3.0).abs() < 1e-12);
}

#[test]
fn energy_strategies_need_energies() {
    for s in Strategy::ALL {
        let r = initial_weights(s, 2, None);
        assert_eq!(r.is_err(), s.needs_energies(), "{s}");
    }
    assert!(initial_weights(Strategy::EbwP1, 3, Some(&[1.0, 2.0])).is_err());
    assert!(ebw_weights(&[1.0, 0.0], EbwVariant::P1).is_err());
}

#[test]
fn half_gain_source_has_quarter_energy() {
    let tmp = tempfile::tempdir().unwrap();
    let mut synth = SynthConfig::two_source(4, 12.0, 21);
    // same archetype for both so only the gain differs
    synth.sources[0].archetype = synth.sources[1].archetype.clone();
    synth.sources[1].gain = 0.5;
    let manifest = common::synth_manifest(tmp.path(), &synth, 0.0, true);
    let data = TrainingData::from_manifest(&manifest, true).unwrap();
    let stats = data.energy_stats().unwrap();
    let ratio = stats.per_source_energy[0] / stats.per_source_energy[1];
    assert!((ratio - 4.0).abs() < 0.2, "energy ratio {ratio}");

    let report = EnergyReport::new(&stats).unwrap();
    let quiet = &report.sources[1].weights;
    assert!((quiet["EBW_P1"] - ratio).abs() < 1e-9);
    assert!((quiet["EBW_P2"] - ratio * ratio).abs() < 1e-6);
    assert_eq!(report.sources[0].weights["EBW_P1"], 1.0);
    let csv = report.to_csv();
    assert!(csv.starts_with("source,energy,UW,DWA,EBW_P1,EBW_InstP1,EBW_P2,OH\n"));
    assert_eq!(csv.lines().count(), 3);
}
