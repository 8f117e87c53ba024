use corep_lab::td_detect::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn direct_stats(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

#[test]
fn running_stats_track_contents() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let law = Normal::new(3.0, 2.0).unwrap();
    let mut b = TdBuffer::new(250).unwrap();
    for i in 0..1000 {
        b.push(law.sample(&mut rng)).unwrap();
        if i % 37 == 0 || i == 999 {
            let contents: Vec<f64> = b.values().collect();
            let (m, s) = direct_stats(&contents);
            assert!((b.mean().unwrap() - m).abs() < 1e-9);
            assert!((b.std().unwrap() - s).abs() < 1e-9);
        }
    }
}

#[test]
fn recent_mean_edge_cases() {
    let mut b = TdBuffer::new(100).unwrap();
    for i in 0..100 {
        b.push(i as f64).unwrap();
    }
    assert!((b.recent_mean(1.0).unwrap() - b.mean().unwrap()).abs() < 1e-12);
    assert_eq!(b.recent_mean(0.1).unwrap(), (90..100).sum::<i32>() as f64 / 10.0);
    assert_eq!(recent_count(0.1, 7), 1);
    assert_eq!(recent_count(0.3, 10), 3);
}

#[test]
fn zero_width_interval_opens_for_any_departure() {
    let mut b = TdBuffer::new(20).unwrap();
    for i in 0..20 {
        b.push((i % 3) as f64).unwrap();
    }
    assert_ne!(b.recent_mean(0.1), b.mean());
    assert!(b.should_update_core(0.1, 0.0));
}

#[test]
fn buffer_restores_from_values() {
    let mut b = TdBuffer::new(5).unwrap();
    for v in [1.0, 4.0, 2.0, 8.0, 5.0, 7.0] {
        b.push(v).unwrap();
    }
    let contents: Vec<f64> = b.values().collect();
    let c = TdBuffer::from_values(5, &contents).unwrap();
    assert_eq!(c.values().collect::<Vec<_>>(), contents);
    assert_eq!(c.should_update_core(0.1, 1.96), b.should_update_core(0.1, 1.96));
    assert!(TdBuffer::from_values(2, &contents).is_err());
}

proptest! {
    #[test]
    fn gate_is_monotone_in_eta(values in prop::collection::vec(-10.0f64..10.0, 1..300), e1 in 0.0f64..4.0, de in 0.0f64..4.0) {
        let mut b = TdBuffer::new(200).unwrap();
        for v in &values {
            b.push(*v).unwrap();
        }
        if !b.should_update_core(0.1, e1) {
            prop_assert!(!b.should_update_core(0.1, e1 + de));
        }
    }

    #[test]
    fn stats_match_recomputation(values in prop::collection::vec(-1e3f64..1e3, 1..100), cap in 1usize..50) {
        let mut b = TdBuffer::new(cap).unwrap();
        for v in &values {
            b.push(*v).unwrap();
        }
        prop_assert!(b.len() <= cap);
        let contents: Vec<f64> = b.values().collect();
        let (m, s) = direct_stats(&contents);
        prop_assert!((b.mean().unwrap() - m).abs() < 1e-9 * (1.0 + m.abs()));
        prop_assert!((b.std().unwrap() - s).abs() < 1e-6);
    }
}
