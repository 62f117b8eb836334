use munet::metrics::{db_ratio, decompose, Projector, Stat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn sdr(refs: &[&[f64]], est: &[f64], target: usize, l: usize) -> f64 {
    decompose(refs, est, target, l).unwrap().ratios().unwrap().sdr
}

#[test]
fn sdr_falls_as_noise_grows() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = noise(&mut rng, 4000);
    let b = noise(&mut rng, 4000);
    let extra = noise(&mut rng, 4000);
    let refs = [a.as_slice(), b.as_slice()];
    let mut last = f64::INFINITY;
    for level in [0.01, 0.05, 0.2, 0.8] {
        let est: Vec<f64> = a.iter().zip(&extra).map(|(s, e)| s + level * e).collect();
        let v = sdr(&refs, &est, 0, 32);
        assert!(v < last, "level {level}: {v} after {last}");
        last = v;
    }
}

#[test]
fn leaked_interference_shows_in_sir_not_sar() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = noise(&mut rng, 4000);
    let b = noise(&mut rng, 4000);
    let est: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + 0.1 * y).collect();
    let r = decompose(&[&a, &b], &est, 0, 16).unwrap().ratios().unwrap();
    assert!((r.sir - 20.0).abs() < 0.5, "{r:?}");
    assert!(r.sar > 60.0, "{r:?}");
}

#[test]
fn filtered_target_is_not_distortion() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut a = noise(&mut rng, 4000);
    // silent tail so the echo does not run past the end
    a[3990..].fill(0.0);
    let b = noise(&mut rng, 4000);
    // a short FIR of the reference lies inside the allowed distortion
    let est: Vec<f64> = (0..a.len())
        .map(|t| 0.7 * a[t] + if t >= 3 { 0.2 * a[t - 3] } else { 0.0 })
        .collect();
    assert!(sdr(&[&a, &b], &est, 0, 8) > 60.0);
    // but not with a filter too short to reach the echo
    assert!(sdr(&[&a, &b], &est, 0, 2) < 20.0);
}

#[test]
fn projector_matches_one_shot() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = noise(&mut rng, 2000);
    let b = noise(&mut rng, 2000);
    let est = noise(&mut rng, 2000);
    let mut p = Projector::new(&[&a, &b], 16).unwrap();
    assert_eq!(p.sources(), 2);
    for target in 0..2 {
        let reused = p.decompose(&est, target).unwrap();
        let fresh = decompose(&[&a, &b], &est, target, 16).unwrap();
        assert_eq!(reused, fresh);
    }
}

#[test]
fn bad_inputs_are_errors() {
    let a = vec![1.0; 100];
    let short = vec![1.0; 50];
    assert!(decompose(&[&a], &short, 0, 8).is_err());
    assert!(decompose(&[&a], &a, 1, 8).is_err());
    assert!(decompose(&[&a], &a, 0, 0).is_err());
}

#[test]
fn db_ratio_limits() {
    assert_eq!(db_ratio(1.0, 0.0), f64::INFINITY);
    assert_eq!(db_ratio(0.0, 1.0), f64::NEG_INFINITY);
    assert!((db_ratio(100.0, 1.0) - 20.0).abs() < 1e-12);
}

#[test]
fn stat_skips_infinities() {
    let s = Stat::of(&[1.0, 2.0, f64::INFINITY, 3.0, 10.0]);
    assert_eq!(s.count, 4);
    assert_eq!(s.infinite, 1);
    assert_eq!(s.mean, 4.0);
    assert_eq!(s.median, 2.5);
}
