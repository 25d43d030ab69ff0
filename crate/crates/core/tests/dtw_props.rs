use graphmut::oracles::dtw_distance;
use proptest::prelude::*;

fn series() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0..100.0f64, 1..=6)
}

fn exhaustive(x: &[f64], y: &[f64], i: usize, j: usize) -> f64 {
    let here = (x[i] - y[j]).abs();
    if i == 0 && j == 0 {
        return here;
    }
    let mut best = f64::INFINITY;
    if i > 0 {
        best = best.min(exhaustive(x, y, i - 1, j));
    }
    if j > 0 {
        best = best.min(exhaustive(x, y, i, j - 1));
    }
    if i > 0 && j > 0 {
        best = best.min(exhaustive(x, y, i - 1, j - 1));
    }
    best + here
}

proptest! {
    #[test]
    fn non_negative_and_symmetric(x in series(), y in series()) {
        let d = dtw_distance(&x, &y).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d, dtw_distance(&y, &x).unwrap());
    }

    #[test]
    fn warped_copies_are_at_distance_zero(x in series(), reps in prop::collection::vec(1..4usize, 6)) {
        let warped: Vec<f64> = x.iter().zip(&reps).flat_map(|(v, r)| std::iter::repeat_n(*v, *r)).collect();
        prop_assert_eq!(dtw_distance(&x, &warped).unwrap(), 0.0);
        prop_assert_eq!(dtw_distance(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn matches_path_enumeration(x in series(), y in series()) {
        let want = exhaustive(&x, &y, x.len() - 1, y.len() - 1);
        let got = dtw_distance(&x, &y).unwrap();
        prop_assert!((got - want).abs() <= 1e-9 * want.max(1.0));
    }
}
