mod common;

use common::vertex_max;
use proptest::prelude::*;

use vardro::inner_solver::interior_count;
use vardro::{box_bounds, lp_oracle, robust_objective, water_fill, BudgetVector, LossVector};

fn instance(max_len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2..=max_len).prop_flat_map(|n| {
        (
            prop::collection::vec(-3.0f64..3.0, n),
            prop::collection::vec(0.0f64..1.0, n),
        )
    })
}

fn solve(l: &[f64], eps: &[f64]) -> (Vec<f64>, f64) {
    let losses = LossVector::new(l.to_vec()).unwrap();
    let q = water_fill(&losses, &BudgetVector::new(eps.to_vec()).unwrap()).unwrap();
    let obj = robust_objective(&losses, &q).unwrap();
    (q.into_inner(), obj)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn matches_vertex_enumeration((l, eps) in instance(8)) {
        let (_, obj) = solve(&l, &eps);
        prop_assert!((obj - vertex_max(&l, &eps)).abs() <= 1e-9);
    }

    #[test]
    fn matches_lp_oracle((l, eps) in instance(10)) {
        let losses = LossVector::new(l.clone()).unwrap();
        let budgets = BudgetVector::new(eps.clone()).unwrap();
        let q = water_fill(&losses, &budgets).unwrap();
        let bounds = box_bounds(&budgets, l.len()).unwrap();
        let r = lp_oracle(&losses, &bounds).unwrap();
        let dq = robust_objective(&losses, &q).unwrap() - robust_objective(&losses, &r).unwrap();
        prop_assert!(dq.abs() <= 1e-9);
        for (x, y) in q.as_slice().iter().zip(r.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-8);
        }
    }

    #[test]
    fn feasible_with_one_interior((l, eps) in instance(32)) {
        let n = l.len() as f64;
        let budgets = BudgetVector::new(eps.clone()).unwrap();
        let q = water_fill(&LossVector::new(l.clone()).unwrap(), &budgets).unwrap();
        prop_assert!((q.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        for (qi, e) in q.as_slice().iter().zip(&eps) {
            let info = (n * qi).ln();
            prop_assert!(info >= -e - 1e-9 && info <= e + 1e-9);
        }
        prop_assert!(interior_count(&q, &box_bounds(&budgets, l.len()).unwrap()) <= 1);
    }

    #[test]
    fn budget_increase_never_lowers_objective((l, eps) in instance(12), pick in any::<prop::sample::Index>()) {
        let (_, before) = solve(&l, &eps);
        let mut raised = eps.clone();
        raised[pick.index(eps.len())] += 0.1;
        let (_, after) = solve(&l, &raised);
        prop_assert!(after >= before - 1e-12);
    }

    #[test]
    fn bracketed_by_mean_and_max((l, eps) in instance(16)) {
        let (_, obj) = solve(&l, &eps);
        let mean = l.iter().sum::<f64>() / l.len() as f64;
        let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(obj >= mean - 1e-12);
        prop_assert!(obj <= max + 1e-12);
    }

    #[test]
    fn shift_and_scale_leave_weights((l, eps) in instance(12), shift in -5.0f64..5.0, scale in 0.1f64..10.0) {
        let (q, _) = solve(&l, &eps);
        let moved: Vec<f64> = l.iter().map(|v| scale * v + shift).collect();
        let (r, _) = solve(&moved, &eps);
        for (x, y) in q.iter().zip(&r) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn permutation_equivariant((l, eps) in instance(12), seed in any::<u64>()) {
        let n = l.len();
        let mut perm: Vec<usize> = (0..n).collect();
        // Fisher-Yates driven by a tiny LCG so the strategy stays simple
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let (q, _) = solve(&l, &eps);
        let pl: Vec<f64> = perm.iter().map(|&i| l[i]).collect();
        let pe: Vec<f64> = perm.iter().map(|&i| eps[i]).collect();
        let (r, _) = solve(&pl, &pe);
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!((r[k] - q[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn equal_budgets_favor_larger_losses(l in prop::collection::vec(-3.0f64..3.0, 2..16), e in 0.0f64..1.0) {
        let (q, _) = solve(&l, &vec![e; l.len()]);
        for i in 0..l.len() {
            for j in 0..l.len() {
                if l[i] > l[j] {
                    prop_assert!(q[i] >= q[j]);
                }
            }
        }
    }

    #[test]
    fn zero_budget_is_uniform(l in prop::collection::vec(-3.0f64..3.0, 1..64)) {
        let (q, _) = solve(&l, &vec![0.0; l.len()]);
        let u = 1.0 / l.len() as f64;
        prop_assert!(q.iter().all(|&v| v == u));
    }
}

#[test]
fn tied_losses_fill_lower_index_first() {
    let (q, _) = solve(&[1.0, 1.0, 0.0], &[0.5; 3]);
    let b = 0.5f64.exp() / 3.0;
    assert_eq!(q[0], b);
    assert!(q[1] < b && q[1] > (-0.5f64).exp() / 3.0);
}

#[test]
fn rejects_bad_input() {
    let l = LossVector::new(vec![1.0, 2.0]).unwrap();
    assert!(water_fill(&l, &BudgetVector::new(vec![0.1; 3]).unwrap()).is_err());
    assert!(LossVector::new(vec![f64::NAN]).is_err());
    assert!(BudgetVector::new(vec![-0.1]).is_err());
    assert!(LossVector::new(vec![]).is_err());
}
