use std::collections::HashMap;

use courselab::catalog::{cost, Permissibility, Schedule};
use courselab::harness::{
    audit_fairness, envy_bound, max_subset_envy, max_subset_envy_monotone, maximin_share, pareto_improvement,
};
use courselab::valuemodel::MonotoneValueModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const A: usize = 0;
const B: usize = 1;
const C: usize = 2;
const D: usize = 3;

fn s(c: &[usize]) -> Schedule {
    Schedule::from_courses(c.iter().copied())
}

fn table(entries: Vec<(Schedule, f64)>) -> impl Fn(Schedule) -> f64 {
    let map: HashMap<Schedule, f64> = entries.into_iter().collect();
    move |x| map.get(&x).copied().unwrap_or(0.0)
}

fn best_affordable(u: &dyn Fn(Schedule) -> f64, m: usize, prices: &[f64], budget: f64) -> f64 {
    (0..1u64 << m)
        .map(Schedule::from_bits)
        .filter(|&x| cost(prices, x) <= budget + 1e-12)
        .map(u)
        .fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn envy_tightness_construction_is_exactly_two_eps() {
    for eps in [0.01, 0.05, 0.1] {
        let u1 = table(vec![(s(&[A, B]), 1.0), (s(&[A, B, C]), 1.0)]);
        let u2 = table(vec![
            (s(&[A]), 0.5 - eps),
            (s(&[B]), 0.5 - eps),
            (s(&[A, C]), 0.5 + eps),
            (s(&[B, C]), 0.5 + eps),
            (s(&[A, B]), 1.0),
            (s(&[A, B, C]), 1.0),
        ]);
        let h1 = table(vec![(s(&[A, B]), 1.0 - eps), (s(&[A, B, C]), 1.0)]);
        let h2 = table(vec![
            (s(&[A]), 0.5),
            (s(&[B]), 0.5),
            (s(&[A, C]), 0.5),
            (s(&[B, C]), 0.5),
            (s(&[A, B]), 1.0),
            (s(&[A, B, C]), 1.0),
        ]);
        let beta = 0.25;
        let prices = [beta, 1.0, 0.0];
        let alloc = [s(&[A, B, C]), s(&[A])];
        // the allocation is a competitive equilibrium of the learned utilities
        assert_eq!(h1(alloc[0]), best_affordable(&h1, 3, &prices, 1.0 + beta));
        assert_eq!(h2(alloc[1]), best_affordable(&h2, 3, &prices, 1.0));
        for x in (0..8).map(Schedule::from_bits) {
            assert!((h1(x) - u1(x)).abs() <= eps + 1e-12 && (h2(x) - u2(x)).abs() <= eps + 1e-12);
        }

        let bound = envy_bound(&u2, alloc[1], alloc[0]);
        assert!((bound - 2.0 * eps).abs() < 1e-12, "eps {eps}: bound {bound}");
        assert_eq!(envy_bound(&u1, alloc[0], alloc[1]), 0.0);

        let u = |i: usize, x: Schedule| if i == 0 { u1(x) } else { u2(x) };
        let perm = Permissibility::with_max_courses(3);
        let caps = [2, 1, 1];
        assert!(audit_fairness(u, &alloc, &caps, &perm, 2.0 * eps).envy_ok);
        assert!(!audit_fairness(u, &alloc, &caps, &perm, 1.9 * eps).envy_ok);
    }
}

#[test]
fn maximin_tightness_construction_is_exactly_two_eps() {
    let eps = 0.05;
    let u1 = table(vec![
        (s(&[A]), 1.0),
        (s(&[B]), 0.5 + eps),
        (s(&[C]), 0.5 - eps),
        (s(&[B, C]), 0.5 + eps),
        (s(&[B, D]), 0.5 + eps),
        (s(&[C, D]), 0.5 + eps),
    ]);
    let u2 = table(vec![
        (s(&[A]), 0.8),
        (s(&[A, B]), 0.9),
        (s(&[A, D]), 0.9),
        (s(&[A, B, D]), 1.0),
    ]);
    let h1 = table(vec![
        (s(&[A]), 1.0),
        (s(&[B]), 0.5),
        (s(&[C]), 0.5),
        (s(&[B, C]), 0.5),
        (s(&[B, D]), 0.5),
        (s(&[C, D]), 0.5),
    ]);
    let prices = [1.1, 0.15, 0.15, 0.0];
    let alloc = [s(&[C]), s(&[A, B, D])];
    assert_eq!(h1(alloc[0]), best_affordable(&h1, 4, &prices, 1.0));
    assert_eq!(u2(alloc[1]), best_affordable(&u2, 4, &prices, 1.25));

    let perm = Permissibility::with_max_courses(4);
    let caps = [1, 1, 1, 1];
    let mms = maximin_share(&u1, 3, &caps, &perm).unwrap();
    assert!((mms - (0.5 + eps)).abs() < 1e-12);
    assert!((mms - u1(alloc[0]) - 2.0 * eps).abs() < 1e-12);

    let u = |i: usize, x: Schedule| if i == 0 { u1(x) } else { u2(x) };
    let r = audit_fairness(u, &alloc, &caps, &perm, 2.0 * eps);
    assert!((r.max_maximin_gap.unwrap() - 2.0 * eps).abs() < 1e-12);
    assert_eq!(r.maximin_ok, Some(true));
    assert_eq!(audit_fairness(u, &alloc, &caps, &perm, eps).maximin_ok, Some(false));
}

/// Assigns each seat to one of `l` bundles or leaves it out.
fn maximin_by_partition(u: &dyn Fn(Schedule) -> f64, l: usize, m: usize, perm: &Permissibility) -> f64 {
    let mut best = f64::NEG_INFINITY;
    let total = (l + 1).pow(m as u32);
    for code in 0..total {
        let mut bundles = vec![Schedule::EMPTY; l];
        let mut c = code;
        for j in 0..m {
            let slot = c % (l + 1);
            c /= l + 1;
            if slot < l {
                bundles[slot] = bundles[slot].with(j);
            }
        }
        if bundles.iter().all(|&b| perm.is_permissible(b)) {
            best = best.max(bundles.iter().map(|&b| u(b)).fold(f64::INFINITY, f64::min));
        }
    }
    best
}

/// Every pair of schedules, checked for feasibility and domination.
fn pareto_by_enumeration(
    u: &dyn Fn(usize, Schedule) -> f64,
    alloc: &[Schedule],
    caps: &[u32],
    perm: &Permissibility,
    eps: f64,
) -> bool {
    let m = caps.len();
    for x0 in (0..1u64 << m).map(Schedule::from_bits) {
        for x1 in (0..1u64 << m).map(Schedule::from_bits) {
            let feasible = perm.is_permissible(x0)
                && perm.is_permissible(x1)
                && (0..m).all(|j| u32::from(x0.contains(j)) + u32::from(x1.contains(j)) <= caps[j]);
            if feasible && u(0, x0) > u(0, alloc[0]) + eps && u(1, x1) > u(1, alloc[1]) + eps {
                return true;
            }
        }
    }
    false
}

fn random_utility(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    (0..1usize << m).map(|_| f64::from(rng.random_range(0..20u32))).collect()
}

#[test]
fn brute_force_audits_agree_with_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..40 {
        let m = 3 + trial % 4;
        let k = 2 + trial % 2;
        let perm = Permissibility::with_max_courses(k);
        let caps: Vec<u32> = vec![1; m];
        let tables: Vec<Vec<f64>> = (0..2).map(|_| random_utility(&mut rng, m)).collect();
        let u = |i: usize, x: Schedule| tables[i][x.bits() as usize];
        for i in 0..2 {
            let ui = |x: Schedule| u(i, x);
            for l in 2..=3 {
                assert_eq!(
                    maximin_share(ui, l, &caps, &perm).unwrap(),
                    maximin_by_partition(&ui, l, m, &perm),
                    "trial {trial} student {i} l {l}"
                );
            }
        }
        let alloc = [Schedule::from_courses([0]), Schedule::from_courses([1])];
        for eps in [0.0, 2.0] {
            let found = pareto_improvement(u, &alloc, &caps, &perm, eps).unwrap();
            assert_eq!(found.is_some(), pareto_by_enumeration(&u, &alloc, &caps, &perm, eps), "trial {trial}");
            if let Some(better) = found {
                for i in 0..2 {
                    assert!(u(i, better[i]) > u(i, alloc[i]) + eps);
                }
            }
        }
    }
}

#[test]
fn exhaustive_audits_refuse_large_instances() {
    let perm = Permissibility::with_max_courses(2);
    let u = |x: Schedule| x.len() as f64;
    assert!(maximin_share(u, 3, &[1; 9], &perm).is_err());
    let alloc = vec![Schedule::EMPTY; 4];
    assert!(pareto_improvement(|_, x: Schedule| x.len() as f64, &alloc, &[1; 5], &perm, 0.0).is_err());
}

#[test]
fn monotone_shortcut_matches_subset_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = 6;
    for _ in 0..20 {
        let model = MonotoneValueModel::new_mvnn(m, 8, 1.0, 50.0, &mut rng);
        for _ in 0..20 {
            let own = Schedule::from_bits(rng.random_range(0..1u64 << m));
            let other = Schedule::from_bits(rng.random_range(0..1u64 << m));
            let full = max_subset_envy(|x| model.predict(x), own, other);
            let fast = max_subset_envy_monotone(|x| model.predict(x), own, other);
            assert!((full - fast).abs() < 1e-12);
        }
    }
}
