use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lprnet::layers::{Lpr, LprHyper};

/// Singular values of `P2 P1` (the effective pointwise matrix minus identity).
fn branch_singular_values(m: usize, r: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = Lpr::<f64>::new(LprHyper::new(m).rank(r), &mut rng).unwrap();
    let p1 = DMatrix::from_row_slice(r, m, block.p1.weight().data());
    let p2 = DMatrix::from_row_slice(m, r, block.p2.weight().data());
    let dense = DMatrix::from_row_slice(m, m, &block.low_rank_matrix());
    assert!((&p2 * &p1 - &dense).abs().max() < 1e-12);
    let mut sv: Vec<f64> = dense.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn effective_matrix_minus_identity_has_rank_at_most_r(
        m in 2usize..40,
        r_frac in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let r = 1 + ((m - 1) as f64 * r_frac) as usize;
        let sv = branch_singular_values(m, r, seed);
        let largest = sv[0];
        prop_assert!(largest > 0.0);
        for (i, s) in sv.iter().enumerate().skip(r) {
            prop_assert!(*s < 1e-6 * largest, "sigma_{} = {} vs largest {}", i, s, largest);
        }
    }
}

#[test]
fn full_rank_factors_are_generically_full_rank() {
    let sv = branch_singular_values(12, 12, 3);
    assert!(sv[11] > 1e-6 * sv[0]);
}
