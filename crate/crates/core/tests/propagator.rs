use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use nlwave::propagator::{check_axioms, Assembly, AxiomOptions, BlockOperator, FundamentalSolution, MatrixFn};
use nlwave::scenarios;
use nlwave::spectral::TimeGrid;

fn spd(entries: &[f64], shift: f64) -> DMatrix<f64> {
    let b = DMatrix::from_row_slice(2, 2, entries);
    &b * b.transpose() + DMatrix::identity(2, 2) * shift
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn composition_and_boundary_hold(
        entries in prop::array::uniform4(-1.5f64..1.5),
        shift in 0.0f64..2.0,
        damping in prop::option::of(0.0f64..1.0),
    ) {
        let a = spd(&entries, shift);
        let a_t = a.clone();
        let stiffness: MatrixFn = Arc::new(move |t: f64| &a_t * (1.0 + 0.25 * t.sin()));
        let op = match damping {
            None => BlockOperator::undamped(2, stiffness),
            Some(b) => BlockOperator::damped(2, stiffness, Arc::new(move |_| DMatrix::identity(2, 2) * b)),
        };
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let fs = FundamentalSolution::build(&op, &grid, 1e-3, Assembly::Direct).unwrap();
        for i in 0..grid.len() {
            prop_assert!((fs.e(i, i) - DMatrix::identity(4, 4)).amax() < 1e-12);
            for j in 0..=i {
                for r in 0..=j {
                    let d = (fs.e(i, r) - fs.e(i, j) * fs.e(j, r)).amax();
                    prop_assert!(d < 1e-10, "composition defect {d}");
                }
            }
        }
    }

    #[test]
    fn direct_and_chained_tables_agree(entries in prop::array::uniform4(-1.0f64..1.0)) {
        let a = spd(&entries, 0.5);
        let op = BlockOperator::constant(a, None);
        let grid = TimeGrid::uniform(1.5, 6).unwrap();
        let d = FundamentalSolution::build(&op, &grid, 1e-3, Assembly::Direct).unwrap();
        let c = FundamentalSolution::build(&op, &grid, 1e-3, Assembly::Chained).unwrap();
        for i in 0..grid.len() {
            for j in 0..=i {
                prop_assert!((d.e(i, j) - c.e(i, j)).amax() < 1e-12);
            }
        }
    }
}

#[test]
fn binary_dump_round_trips() {
    let s = scenarios::population();
    let basis = s.basis(4).unwrap();
    let op = s.operator(&basis).unwrap();
    let grid = s.grid(6).unwrap();
    let fs = FundamentalSolution::build(&op, &grid, 1e-3, Assembly::Chained).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fs.bin");
    fs.save(&path).unwrap();
    assert_eq!(FundamentalSolution::load(&path).unwrap(), fs);

    std::fs::write(&path, b"not a table").unwrap();
    assert!(FundamentalSolution::load(&path).is_err());
}

#[test]
fn unstable_step_is_rejected() {
    let op = BlockOperator::constant(DMatrix::from_element(1, 1, 1e6), None);
    let grid = TimeGrid::uniform(1.0, 4).unwrap();
    let err = FundamentalSolution::build(&op, &grid, 0.1, Assembly::Chained).unwrap_err();
    assert!(err.to_string().contains("unstable"), "{err}");
}

#[test]
fn non_finite_coefficients_are_located() {
    let stiffness: MatrixFn = Arc::new(|t: f64| DMatrix::from_element(1, 1, if t > 0.5 { f64::NAN } else { 1.0 }));
    let op = BlockOperator::undamped(1, stiffness);
    let grid = TimeGrid::uniform(1.0, 4).unwrap();
    let err = FundamentalSolution::build(&op, &grid, 1e-2, Assembly::Direct).unwrap_err();
    assert!(err.to_string().contains("propagation failed"), "{err}");
}

#[test]
fn damped_scenario_axioms() {
    let s = scenarios::damped_skeleton();
    let basis = s.basis(4).unwrap();
    let op = s.operator(&basis).unwrap();
    let grid = s.grid(10).unwrap();
    let fs = FundamentalSolution::build(&op, &grid, 1e-3, Assembly::Direct).unwrap();
    let r = check_axioms(&fs, &op, &AxiomOptions::default()).unwrap();
    assert!(r.s2a < 1e-6 && r.s2b < 1e-6 && r.composition < 1e-10, "{r:?}");
    assert!(r.s2c.is_none());
    let u = fs.block(10, 0, nlwave::propagator::Block::V1) * DVector::from_element(4, 1.0);
    assert!(u.iter().all(|v| v.is_finite()));
}
