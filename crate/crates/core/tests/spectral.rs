use nalgebra::DVector;
use proptest::prelude::*;

use nlwave::spectral::{SpatialDomain, SpectralBasis};

fn coeffs(m: usize) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-2.0f64..2.0, m).prop_map(DVector::from_vec)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn projection_inverts_evaluation(u in coeffs(10), len in 0.5f64..4.0) {
        let b = SpectralBasis::build(SpatialDomain::interval(len), 10).unwrap();
        let back = b.project_samples(&b.evaluate_nodes(&u)).unwrap();
        prop_assert!((back - &u).amax() < 1e-11);
    }

    #[test]
    fn coordinate_norms_match_samples(u in coeffs(9), lx in 0.5f64..3.0, ly in 0.5f64..3.0) {
        let b = SpectralBasis::build(SpatialDomain::rectangle(lx, ly), 9).unwrap();
        let (h, v) = b.norms(&u);
        prop_assert!((b.sample_norm(&b.evaluate_nodes(&u)) - h).abs() < 1e-10 * (1.0 + h));
        prop_assert!(v >= h);
    }

    #[test]
    fn eigenvalues_are_sorted_and_start_at_zero(m in 1usize..30) {
        let b = SpectralBasis::build(SpatialDomain::rectangle(1.0, 2.0), m).unwrap();
        prop_assert_eq!(b.eigenvalues()[0], 0.0);
        prop_assert!(b.eigenvalues().windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn gram_matrix_is_identity() {
    let b = SpectralBasis::build(SpatialDomain::interval(std::f64::consts::PI), 32).unwrap();
    let g = b.gram();
    assert!((g - nalgebra::DMatrix::identity(32, 32)).amax() < 1e-12);
}
