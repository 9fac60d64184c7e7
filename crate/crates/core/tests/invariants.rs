use std::sync::Arc;

use nalgebra::DMatrix;
use proptest::prelude::*;
use svelift::discretize::ApproximatingComponent;
use svelift::ergodics::wasserstein1_1d;
use svelift::kernelbasis::{make_expsum_basis, Which};
use svelift::weights::{distance_dphi, WeightTable};

fn component(rates: &[f64]) -> ApproximatingComponent {
    let terms: Vec<_> = rates
        .iter()
        .map(|&a| (a, DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 0.5)))
        .collect();
    ApproximatingComponent::from_atoms(&Arc::new(make_expsum_basis(&terms).unwrap())).unwrap()
}

proptest! {
    #[test]
    fn w1_is_symmetric_and_shift_equivariant(
        a in prop::collection::vec(-5.0f64..5.0, 1..40),
        b in prop::collection::vec(-5.0f64..5.0, 1..40),
        s in -3.0f64..3.0,
    ) {
        let ab = wasserstein1_1d(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - wasserstein1_1d(&b, &a).unwrap()).abs() <= 1e-12);
        let shifted: Vec<f64> = a.iter().map(|x| x + s).collect();
        prop_assert!((wasserstein1_1d(&a, &shifted).unwrap() - s.abs()).abs() <= 1e-9);
    }

    #[test]
    fn atom_components_reconstruct_their_kernel(
        r1 in 0.1f64..5.0,
        gap in 0.1f64..20.0,
        t in 0.0f64..10.0,
    ) {
        let c = component(&[r1, r1 + gap]);
        let exact = (-r1 * t).exp() + (-(r1 + gap) * t).exp();
        let k = c.reconstructed_kernel(Which::Drift, t)[(0, 0)];
        prop_assert!((k - exact).abs() <= 1e-14 * (1.0 + exact));
        let ks = c.reconstructed_kernel(Which::Diffusion, t)[(0, 0)];
        prop_assert!((ks - 0.5 * exact).abs() <= 1e-14 * (1.0 + exact));
    }

    #[test]
    fn phi0_distance_is_a_metric(
        z1 in prop::collection::vec(-3.0f64..3.0, 3),
        z2 in prop::collection::vec(-3.0f64..3.0, 3),
        z3 in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        let c = component(&[0.5, 2.0, 7.0]);
        let phi = WeightTable::phi0(&c);
        let d = |a: &[f64], b: &[f64]| distance_dphi(a, b, &c, &phi).unwrap();
        prop_assert_eq!(d(&z1, &z1), 0.0);
        prop_assert!((d(&z1, &z2) - d(&z2, &z1)).abs() <= 1e-12);
        prop_assert!(d(&z1, &z3) <= d(&z1, &z2) + d(&z2, &z3) + 1e-12);
    }
}
