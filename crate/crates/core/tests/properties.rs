//! Property tests over the numeric kernels and metrics.

use proptest::prelude::*;

use geofuse::metrics::{dtw, smoothness, Trajectory};
use geofuse::rng::chacha;
use geofuse::tensor::{mean_pool_rows, row_softmax, TokenMatrix};
use geofuse::world::dist3;
use rand::Rng;

fn shuffle_rows(m: &TokenMatrix, seed: u64) -> TokenMatrix {
    let mut order: Vec<usize> = (0..m.rows()).collect();
    let mut rng = chacha(seed);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let rows: Vec<Vec<f64>> = order.iter().map(|&r| m.row(r).to_vec()).collect();
    TokenMatrix::from_rows(&rows)
}

fn small_matrix() -> impl Strategy<Value = TokenMatrix> {
    (1usize..6, 1usize..6)
        .prop_flat_map(|(r, c)| {
            prop::collection::vec(-50.0..50.0f64, r * c).prop_map(move |data| {
                TokenMatrix::from_vec(r, c, data)
            })
        })
}

fn points(max_len: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(
        (-100.0..100.0f64, -100.0..100.0f64, 0.0..50.0f64).prop_map(|(x, y, z)| [x, y, z]),
        1..max_len,
    )
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(m in small_matrix()) {
        let s = row_softmax(&m);
        prop_assert!(s.all_finite());
        for r in 0..s.rows() {
            let sum: f64 = s.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(s.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn softmax_shift_invariance(m in small_matrix(), shift in -30.0..30.0f64) {
        let shifted = TokenMatrix::from_vec(
            m.rows(),
            m.cols(),
            m.data().iter().map(|v| v + shift).collect(),
        );
        let a = row_softmax(&m);
        let b = row_softmax(&shifted);
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_pool_exactly_permutation_invariant(m in small_matrix(), seed in 0u64..1000) {
        let shuffled = shuffle_rows(&m, seed);
        let base = mean_pool_rows(&m).unwrap();
        let perm = mean_pool_rows(&shuffled).unwrap();
        prop_assert_eq!(base.data(), perm.data());
    }

    #[test]
    fn dtw_nonnegative_symmetric_zero_on_self(a in points(6), b in points(6)) {
        let ab = dtw(&a, &b).unwrap();
        let ba = dtw(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, ba);
        prop_assert_eq!(dtw(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn smoothness_angles_bounded(pts in points(10)) {
        let goal = *pts.last().unwrap();
        let start = pts[0];
        let t = Trajectory {
            points: pts,
            goal,
            success: true,
            shortest_path_length: dist3(start, goal).max(1.0),
        };
        if let Some((mean, var)) = smoothness(&t) {
            prop_assert!((0.0..=180.0).contains(&mean));
            prop_assert!(var >= 0.0);
        }
    }
}
