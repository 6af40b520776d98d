use niff_core::stats::{merge_stats, ClassMoments, RunningClassStats};
use proptest::prelude::*;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

fn same(a: &ClassMoments, b: &ClassMoments) -> bool {
    a.count == b.count
        && a.mean.iter().zip(&b.mean).all(|(x, y)| close(*x, *y))
        && a.var.iter().zip(&b.var).all(|(x, y)| close(*x, *y))
}

/// Labelled rows with `d` columns, labels in `0..k`.
fn stream() -> impl Strategy<Value = (usize, usize, Vec<(usize, Vec<f64>)>)> {
    (1usize..6, 1usize..4).prop_flat_map(|(d, k)| {
        let row = (0..k, prop::collection::vec(-50.0f64..50.0, d));
        (Just(d), Just(k), prop::collection::vec(row, 1..120))
    })
}

fn streamed(d: usize, k: usize, rows: &[(usize, Vec<f64>)]) -> RunningClassStats {
    let mut s = RunningClassStats::new(k, d);
    for (c, x) in rows {
        s.observe(x, *c).unwrap();
    }
    s
}

fn moments(rows: &[Vec<f64>], d: usize) -> ClassMoments {
    ClassMoments::from_rows(rows, d)
}

proptest! {
    #[test]
    fn streaming_matches_two_pass((d, k, rows) in stream()) {
        let s = streamed(d, k, &rows);
        for c in 0..k {
            let mine: Vec<Vec<f64>> = rows.iter().filter(|r| r.0 == c).map(|r| r.1.clone()).collect();
            prop_assert!(same(s.class(c).unwrap(), &moments(&mine, d)));
        }
    }

    #[test]
    fn order_does_not_matter((d, k, rows) in stream(), seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let (a, b) = (streamed(d, k, &rows), streamed(d, k, &shuffled));
        for c in 0..k {
            prop_assert!(same(a.class(c).unwrap(), b.class(c).unwrap()));
        }
    }

    #[test]
    fn merge_is_associative(
        parts in prop::collection::vec(prop::collection::vec(prop::collection::vec(-20.0f64..20.0, 3), 1..30), 3)
    ) {
        let [a, b, c] = [0, 1, 2].map(|i| moments(&parts[i], 3));
        let left = merge_stats(&merge_stats(&a, &b).unwrap(), &c).unwrap();
        let right = merge_stats(&a, &merge_stats(&b, &c).unwrap()).unwrap();
        prop_assert!(same(&left, &right));
        let all: Vec<Vec<f64>> = parts.concat();
        prop_assert!(same(&left, &moments(&all, 3)));
    }

    #[test]
    fn classes_are_isolated((d, k, rows) in stream(), x in prop::collection::vec(-5.0f64..5.0, 6)) {
        let mut s = streamed(d, k, &rows);
        let before = s.clone();
        let target = rows[0].0;
        s.observe(&x[..d], target).unwrap();
        for c in (0..k).filter(|&c| c != target) {
            prop_assert_eq!(s.class(c), before.class(c));
        }
    }
}
