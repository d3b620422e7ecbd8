use courselab::catalog::{Catalog, CatalogSpec, Permissibility, Schedule};
use courselab::prefgen::{GeneratorConfig, Instance};
use courselab::reporting::{report, MistakeProfile};
use courselab::valuemodel::{
    build_cardinal, classification_grad, classification_loss, fit_cardinal, regression_grad, regression_loss,
    train, train_classification, train_regression, BundleType, CardinalDataset, MonotoneValueModel,
    OrdinalDataset, OrdinalUnits, TrainConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_schedule(rng: &mut ChaCha8Rng, m: usize) -> Schedule {
    Schedule::from_bits(rng.random_range(0..1u64 << m))
}

/// A model with some biases pushed negative so every activation regime shows up.
fn random_model(rng: &mut ChaCha8Rng, m: usize, hidden: usize) -> MonotoneValueModel {
    let mut model = MonotoneValueModel::new_mvnn(m, hidden, 1.0, rng.random_range(10.0..200.0), rng);
    for b in &mut model.theta[m * hidden..m * hidden + hidden] {
        *b = rng.random_range(-0.6..0.0);
    }
    model
}

fn trained_models() -> Vec<MonotoneValueModel> {
    let catalog = Catalog::build(&CatalogSpec { seed: 4, ..CatalogSpec::default() }).unwrap();
    let perm = catalog.default_permissibility();
    let cfg = GeneratorConfig {
        seed: 4,
        ..GeneratorConfig::for_popular(9)
    };
    let instance = Instance::generate(catalog, &cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    instance
        .students
        .iter()
        .map(|u| {
            let r = report(u, &MistakeProfile::calibrated(9), &mut rng);
            let card = build_cardinal(&r, &perm, 25, 100, 100, &mut rng).unwrap();
            let tc = TrainConfig::default();
            let base = fit_cardinal(&card, 25, &tc, &mut rng);
            let mut ranked: Vec<Schedule> = (0..8).map(|_| random_schedule(&mut rng, 25)).collect();
            ranked.sort_by(|a, b| u.eval(*b).total_cmp(&u.eval(*a)));
            train(&base, &CardinalDataset::default(), &OrdinalDataset::from_sorted(&ranked), &tc)
        })
        .collect()
}

#[test]
fn trained_models_are_monotone_with_zero_at_empty() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for model in trained_models() {
        assert!(model.satisfies_constraints());
        assert_eq!(model.predict(Schedule::EMPTY), 0.0);
        for _ in 0..10_000 {
            let small = random_schedule(&mut rng, 25);
            let large = Schedule::from_bits(small.bits() | rng.random_range(0..1u64 << 25));
            assert!(model.predict(small) <= model.predict(large));
        }
    }
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm(analytic).max(norm(numeric)).max(1e-12)
}

fn central_difference(model: &MonotoneValueModel, loss: impl Fn(&MonotoneValueModel) -> f64) -> Vec<f64> {
    let h = 1e-6;
    let mut probe = model.clone();
    (0..model.n_params())
        .map(|i| {
            let t = probe.theta[i];
            probe.theta[i] = t + h;
            let up = loss(&probe);
            probe.theta[i] = t - h;
            let down = loss(&probe);
            probe.theta[i] = t;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = 8;
    for point in 0..100 {
        let model = random_model(&mut rng, m, 6);
        let mut card = CardinalDataset::default();
        for _ in 0..12 {
            let x = random_schedule(&mut rng, m);
            card.push(x, rng.random_range(0.0..model.scale), BundleType::T2);
        }
        let ord = OrdinalDataset {
            pairs: (0..10).map(|_| (random_schedule(&mut rng, m), random_schedule(&mut rng, m))).collect(),
        };
        let lambda = 1e-3;
        let mut grad = vec![0.0; model.n_params()];

        regression_grad(&model, &card, lambda, &mut grad);
        let fd = central_difference(&model, |p| regression_loss(p, &card, lambda));
        let err = relative_error(&grad, &fd);
        assert!(err <= 1e-3, "regression point {point}: {err}");

        for units in [OrdinalUnits::Utility, OrdinalUnits::Normalized] {
            classification_grad(&model, &ord, lambda, units, &mut grad);
            let fd = central_difference(&model, |p| classification_loss(p, &ord, lambda, units));
            let err = relative_error(&grad, &fd);
            assert!(err <= 1e-3, "classification point {point} {units:?}: {err}");
        }
    }
}

#[test]
fn expected_bce_peaks_at_the_most_uncertain_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = 4;
    for _ in 0..20 {
        let model = random_model(&mut rng, m, 5);
        let all: Vec<Schedule> = (0..1u64 << m).map(Schedule::from_bits).collect();
        let mut best_bce = (f64::NEG_INFINITY, (Schedule::EMPTY, Schedule::EMPTY));
        let mut best_gap = (f64::INFINITY, (Schedule::EMPTY, Schedule::EMPTY));
        for (i, &a) in all.iter().enumerate() {
            for &b in &all[i + 1..] {
                let p = 1.0 / (1.0 + (model.predict(b) - model.predict(a)).exp());
                // expectation over the answer drawn with the model's own probability
                let bce = p * -p.clamp(1e-7, 1.0).ln() + (1.0 - p) * -(1.0 - p).clamp(1e-7, 1.0).ln();
                if bce > best_bce.0 {
                    best_bce = (bce, (a, b));
                }
                let gap = (p - (1.0 - p)).abs();
                if gap < best_gap.0 {
                    best_gap = (gap, (a, b));
                }
            }
        }
        assert_eq!(best_bce.1, best_gap.1);
    }
}

#[test]
fn phase_order_matters() {
    let s = |c: &[usize]| Schedule::from_courses(c.iter().copied());
    let mut card = CardinalDataset::default();
    for (j, v) in [75.0, 77.0, 42.0, 45.0].into_iter().enumerate() {
        card.push(s(&[j]), v, BundleType::T1);
    }
    card.push(s(&[0, 2]), 135.0, BundleType::T2);
    let ord = OrdinalDataset::from_sorted(&[s(&[0, 2]), s(&[0, 3]), s(&[1, 2]), s(&[1, 3])]);
    let cfg = TrainConfig::default();
    let init = MonotoneValueModel::new_mvnn(4, 20, 1.0, card.max_target(), &mut ChaCha8Rng::seed_from_u64(0));

    let forward = train(&init, &card, &ord, &cfg);
    let mut backward = init.clone();
    train_classification(&mut backward, &ord, &cfg);
    train_regression(&mut backward, &card, &cfg);
    assert_ne!(forward.theta, backward.theta);
    assert_eq!(forward, train(&init, &card, &ord, &cfg));
}

#[test]
fn cardinal_dataset_respects_report_and_permissibility() {
    let perm = Permissibility::with_max_courses(3);
    let mut r = courselab::reporting::GuiReport::new(6);
    r.set_base(0, 80.0);
    r.set_base(2, 40.0);
    r.set_adjustment(0, 2, 10.0);
    let card = build_cardinal(&r, &perm, 6, 20, 20, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    for p in &card.points {
        assert!(perm.is_permissible(p.x));
        if p.kind == BundleType::T1 || p.kind == BundleType::T2 {
            assert_eq!(p.y, r.eval(p.x));
        }
    }
}

proptest! {
    #[test]
    fn projected_models_are_monotone(seed in any::<u64>(), raw in proptest::collection::vec(-1.0f64..1.0, 8 * 5 + 10)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = MonotoneValueModel::new_mvnn(8, 5, 1.0, 50.0, &mut rng);
        model.theta.copy_from_slice(&raw);
        model.project();
        prop_assert!(model.satisfies_constraints());
        prop_assert_eq!(model.predict(Schedule::EMPTY), 0.0);
        for _ in 0..50 {
            let x = random_schedule(&mut rng, 8);
            let j = rng.random_range(0..8);
            prop_assert!(model.predict(x) <= model.predict(x.with(j)));
        }
    }
}
