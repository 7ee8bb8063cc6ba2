//! Forgetting ledger and CKA properties.

mod common;

use proptest::prelude::*;

use strlora::metrics::{cka, forgetting, read_accuracy_csv, MetricLedger};
use strlora::Tensor;

use common::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn forgetting_clamps_at_zero(history in prop::collection::vec(0.0f64..=1.0, 1..8), bump in 0.0f64..0.5) {
        let best = history.iter().copied().fold(0.0, f64::max);
        prop_assert_eq!(forgetting(&history, best + bump), 0.0);
    }

    #[test]
    fn forgetting_decreases_as_accuracy_rises(
        history in prop::collection::vec(0.01f64..=1.0, 1..8),
        a in 0.0f64..=1.0,
        b in 0.0f64..=1.0,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(forgetting(&history, lo) >= forgetting(&history, hi));
    }

    #[test]
    fn forgetting_is_scale_free(
        history in prop::collection::vec(0.01f64..=1.0, 1..8),
        current in 0.0f64..=1.0,
        c in 0.01f64..=1.0,
    ) {
        let scaled: Vec<f64> = history.iter().map(|v| v * c).collect();
        let f = forgetting(&history, current);
        let g = forgetting(&scaled, current * c);
        prop_assert!((f - g).abs() <= 1e-12, "{f} vs {g}");
    }

    #[test]
    fn ledger_matches_brute_force(seed in any::<u64>()) {
        let mut r = rng(seed);
        let acc = random_accuracy_matrix(&mut r, 10, 6);
        let ledger = MetricLedger::from_matrix(&acc).unwrap();
        let brute = brute_force_metrics(&acc);
        for (row, (per, map, maf)) in ledger.rows().iter().zip(&brute) {
            prop_assert!((row.map - map).abs() <= 1e-12);
            prop_assert!((row.maf - maf).abs() <= 1e-12);
            for (got, want) in row.tasks.iter().zip(per) {
                match (got, want) {
                    (None, None) => {}
                    (Some(g), Some((a, f, ap, af))) => {
                        prop_assert_eq!(g.a, *a);
                        prop_assert!((g.f - f).abs() <= 1e-12);
                        prop_assert!((g.ap - ap).abs() <= 1e-12);
                        prop_assert!((g.af - af).abs() <= 1e-12);
                    }
                    _ => prop_assert!(false, "seen-task sets differ"),
                }
            }
        }
    }

    #[test]
    fn cka_is_symmetric_and_bounded(seed in any::<u64>(), n in 3usize..12, p in 1usize..6, q in 1usize..6) {
        let mut r = rng(seed);
        let x = normal(&mut r, n, p, 1.0);
        let y = normal(&mut r, n, q, 1.0);
        let xy = cka(&x, &y).unwrap();
        let yx = cka(&y, &x).unwrap();
        prop_assert!((xy - yx).abs() <= 1e-12);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&xy));
        prop_assert!((xy - cka_direct(&x, &y)).abs() <= 1e-10);
    }

    #[test]
    fn cka_ignores_rotation_and_scale(seed in any::<u64>(), n in 3usize..10, p in 1usize..6, c in 0.1f64..10.0) {
        let mut r = rng(seed);
        let x = normal(&mut r, n, p, 1.0);
        let rotated = x.matmul(&random_orthogonal(&mut r, p)).unwrap().map(|v| c * v);
        prop_assert!((cka(&x, &rotated).unwrap() - 1.0).abs() <= 1e-10);
    }
}

#[test]
fn csv_round_trip_reproduces_the_ledger() {
    let mut r = rng(8);
    for _ in 0..20 {
        let acc = random_accuracy_matrix(&mut r, 8, 5);
        let ledger = MetricLedger::from_matrix(&acc).unwrap();
        let mut buf = Vec::new();
        ledger.write_task_csv(&mut buf).unwrap();
        let back = read_accuracy_csv(buf.as_slice()).unwrap();
        let again = MetricLedger::from_matrix(&back).unwrap();
        assert_eq!(ledger.rows(), again.rows());
    }
}

#[test]
fn constant_features_are_rejected() {
    let x = Tensor::filled(5, 3, 0.7);
    let y = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![0.0], vec![4.0], vec![3.0]]).unwrap();
    assert!(cka(&x, &y).is_err());
}
