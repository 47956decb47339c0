//! Parity constraints of the basis and the passivity of the learned model.

use hamgp::basis::{BasisExpansion, DomainBox, SymmetryMode};
use hamgp::hamiltonian::{predict_gradient, predict_hamiltonian, GpParams, SystemStructure};
use proptest::prelude::*;

fn basis(m: usize, symmetry: SymmetryMode) -> BasisExpansion {
    BasisExpansion::build(DomainBox::new(vec![8.0, 8.0]).unwrap(), m, 12, symmetry).unwrap()
}

fn weights(m: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, m)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn anti_symmetric_hamiltonian_is_odd(a in weights(15), q in -8.0..8.0f64, p in -8.0..8.0f64) {
        let b = basis(15, SymmetryMode::AntiSymmetric);
        let params = GpParams::new(a, 1.0).unwrap();
        let h = predict_hamiltonian(&b, &params, &[q, p]).unwrap();
        let hm = predict_hamiltonian(&b, &params, &[-q, -p]).unwrap();
        prop_assert!((h + hm).abs() <= 1e-12 * (1.0 + h.abs()));
        let g = predict_gradient(&b, &params, &[q, p]).unwrap();
        let gm = predict_gradient(&b, &params, &[-q, -p]).unwrap();
        for (x, y) in g.iter().zip(&gm) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn every_anti_symmetric_basis_function_is_odd(q in -8.0..8.0f64, p in -8.0..8.0f64) {
        let b = basis(15, SymmetryMode::AntiSymmetric);
        let f = b.eval(&[q, p]).unwrap();
        let fm = b.eval(&[-q, -p]).unwrap();
        for (x, y) in f.iter().zip(&fm) {
            prop_assert!((x + y).abs() <= 1e-15);
        }
    }

    #[test]
    fn odd_index_hamiltonian_is_even_per_coordinate(a in weights(15), q in -8.0..8.0f64, p in -8.0..8.0f64) {
        let b = basis(15, SymmetryMode::AllOddIndices);
        let params = GpParams::new(a, 1.0).unwrap();
        let h = predict_hamiltonian(&b, &params, &[q, p]).unwrap();
        for x in [[-q, p], [q, -p], [-q, -p]] {
            prop_assert!((h - predict_hamiltonian(&b, &params, &x).unwrap()).abs() <= 1e-12 * (1.0 + h.abs()));
        }
    }

    #[test]
    fn unforced_energy_never_increases(a in weights(20), d in 0.0..3.0f64, q in -8.0..8.0f64, p in -8.0..8.0f64) {
        let b = basis(20, SymmetryMode::None);
        let m = SystemStructure::oscillator(d).matrices().unwrap();
        let g = predict_gradient(&b, &GpParams::new(a, 1.0).unwrap(), &[q, p]).unwrap();
        prop_assert!(m.energy_rate(&g) <= 0.0);
    }
}
