use ndarray::{Array2, ArrayView2};
use proptest::prelude::*;
use upcl_core::assignment::{assign_new_classes, has_stabilized, solve_assignment};
use upcl_core::geometry::{gram_schmidt_extend, Generator, PrototypeSet};
use upcl_core::rng::seeded;
use upcl_core::{Assignment, ClassCenters, Error};

fn cost_of(cost: ArrayView2<'_, f64>, cols: &[usize]) -> f64 {
    cols.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum()
}

/// Smallest total over all injections, by enumeration.
fn exhaustive_min(cost: ArrayView2<'_, f64>) -> f64 {
    fn go(cost: ArrayView2<'_, f64>, row: usize, used: &mut [bool]) -> f64 {
        if row == cost.nrows() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for col in 0..cost.ncols() {
            if !used[col] {
                used[col] = true;
                best = best.min(cost[[row, col]] + go(cost, row + 1, used));
                used[col] = false;
            }
        }
        best
    }
    go(cost, 0, &mut vec![false; cost.ncols()])
}

fn matrix(n: usize, m: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(-5.0f64..5.0, n * m)
        .prop_map(move |v| Array2::from_shape_vec((n, m), v).unwrap())
}

fn rectangular() -> impl Strategy<Value = Array2<f64>> {
    (1usize..=6)
        .prop_flat_map(|n| (Just(n), n..=7))
        .prop_flat_map(|(n, m)| matrix(n, m))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn hungarian_reaches_the_exhaustive_optimum(cost in rectangular()) {
        let cols = solve_assignment(cost.view()).unwrap();
        let mut seen = cols.clone();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), cols.len());
        prop_assert!((cost_of(cost.view(), &cols) - exhaustive_min(cost.view())).abs() < 1e-9);
    }

    #[test]
    fn integer_costs_with_ties_still_optimal(cost in (1usize..=5).prop_flat_map(|n| (Just(n), n..=6)).prop_flat_map(|(n, m)| {
        proptest::collection::vec(0u8..3, n * m).prop_map(move |v| Array2::from_shape_fn((n, m), |(i, j)| v[i * m + j] as f64))
    })) {
        let cols = solve_assignment(cost.view()).unwrap();
        prop_assert_eq!(cost_of(cost.view(), &cols), exhaustive_min(cost.view()));
    }
}

#[test]
fn tall_cost_is_infeasible() {
    let cost = Array2::<f64>::zeros((3, 2));
    assert!(matches!(
        solve_assignment(cost.view()),
        Err(Error::InfeasibleShape { rows: 3, cols: 2 })
    ));
}

#[test]
fn new_classes_take_free_rows_and_old_entries_stay() {
    let mut rng = seeded(5);
    let protos =
        gram_schmidt_extend(&PrototypeSet::empty(6, Generator::GramSchmidt), 6, &mut rng).unwrap();
    let old = Assignment::from_pairs([(10, 2), (11, 4)]).unwrap();
    let mut centers = ClassCenters::new(6, 0.9).unwrap();
    // Put each new class right on top of a free prototype.
    let targets = [(20usize, 5usize), (21, 0), (22, 3)];
    let feats = Array2::from_shape_fn((3, 6), |(i, j)| protos.rows()[[targets[i].1, j]]);
    centers.update(feats.view(), &[20, 21, 22]).unwrap();
    let merged = assign_new_classes(&centers, &protos, &old, &[20, 21, 22]).unwrap();
    assert_eq!(merged.get(10), Some(2));
    assert_eq!(merged.get(11), Some(4));
    for (class, row) in targets {
        assert_eq!(merged.get(class), Some(row));
    }
}

#[test]
fn running_out_of_rows_is_reported() {
    let protos = gram_schmidt_extend(
        &PrototypeSet::empty(4, Generator::GramSchmidt),
        2,
        &mut seeded(0),
    )
    .unwrap();
    let mut centers = ClassCenters::new(4, 0.9).unwrap();
    centers
        .update(Array2::from_elem((3, 4), 0.5).view(), &[0, 1, 2])
        .unwrap();
    let err = assign_new_classes(&centers, &protos, &Assignment::new(), &[0, 1, 2]).unwrap_err();
    assert!(matches!(
        err,
        Error::NotEnoughPrototypes { needed: 3, free: 2 }
    ));
    let err = assign_new_classes(&centers, &protos, &Assignment::new(), &[7]).unwrap_err();
    assert!(matches!(err, Error::MissingCenter(7)));
}

#[test]
fn stabilization_window() {
    let a = Assignment::from_pairs([(0, 0), (1, 1)]).unwrap();
    let b = Assignment::from_pairs([(0, 1), (1, 0)]).unwrap();
    assert!(!has_stabilized(&[a.clone(), a.clone()], 3));
    assert!(!has_stabilized(&[a.clone(), b.clone(), b.clone()], 3));
    assert!(has_stabilized(&[a, b.clone(), b.clone(), b], 3));
}
