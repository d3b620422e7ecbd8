//! The base-value/adjustment reporting language, the mistake model that turns
//! true utilities into reports, and calibration metrics comparing the two.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::catalog::Schedule;
use crate::error::{LabError, Result};
use crate::prefgen::TrueUtility;

pub const BASE_MAX: f64 = 100.0;
pub const ADJ_MAX: f64 = 200.0;

/// A report: base values (0 means "not reported") and pairwise adjustments
/// keyed by `(j, j')` with `j < j'`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GuiReport {
    base: Vec<f64>,
    adj: BTreeMap<(usize, usize), f64>,
}

impl GuiReport {
    pub fn new(m: usize) -> Self {
        GuiReport {
            base: vec![0.0; m],
            adj: BTreeMap::new(),
        }
    }

    pub fn from_parts(base: Vec<f64>, adj: BTreeMap<(usize, usize), f64>) -> Result<Self> {
        let r = GuiReport { base, adj };
        r.validate(r.base.len())?;
        Ok(r)
    }

    /// Pads the base vector to `m` courses.
    pub fn with_len(mut self, m: usize) -> Self {
        if self.base.len() < m {
            self.base.resize(m, 0.0);
        }
        self
    }

    pub fn base(&self, j: usize) -> f64 {
        self.base.get(j).copied().unwrap_or(0.0)
    }

    pub fn bases(&self) -> &[f64] {
        &self.base
    }

    pub fn adjustments(&self) -> &BTreeMap<(usize, usize), f64> {
        &self.adj
    }

    pub fn set_base(&mut self, j: usize, v: f64) {
        if j >= self.base.len() {
            self.base.resize(j + 1, 0.0);
        }
        self.base[j] = v;
    }

    pub fn set_adjustment(&mut self, a: usize, b: usize, v: f64) {
        let key = (a.min(b), a.max(b));
        if v == 0.0 {
            self.adj.remove(&key);
        } else {
            self.adj.insert(key, v);
        }
    }

    pub fn is_reported(&self, j: usize) -> bool {
        self.base(j) > 0.0
    }

    pub fn reported(&self) -> Schedule {
        Schedule::from_courses((0..self.base.len()).filter(|&j| self.base[j] > 0.0))
    }

    pub fn n_reported(&self) -> usize {
        self.base.iter().filter(|&&v| v > 0.0).count()
    }

    /// Smallest nonzero reported base value.
    pub fn lowest_reported(&self) -> Option<f64> {
        self.base
            .iter()
            .copied()
            .filter(|&v| v > 0.0)
            .min_by(f64::total_cmp)
    }

    pub fn is_empty(&self) -> bool {
        self.n_reported() == 0 && self.adj.is_empty()
    }

    /// Sum of base values in `x` plus adjustments for pairs inside `x`.
    pub fn eval(&self, x: Schedule) -> f64 {
        let mut total = 0.0;
        for j in x.courses() {
            total += self.base(j);
        }
        for (&(a, b), &v) in &self.adj {
            if x.contains(a) && x.contains(b) {
                total += v;
            }
        }
        total
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if self.base.len() > m && self.base[m..].iter().any(|&v| v != 0.0) {
            return Err(LabError::validation(format!("base value for course beyond {m}")));
        }
        for (j, &v) in self.base.iter().enumerate() {
            if !(0.0..=BASE_MAX).contains(&v) {
                return Err(LabError::validation(format!(
                    "base value {v} for course {j} outside [0, {BASE_MAX}]"
                )));
            }
        }
        for (&(a, b), &v) in &self.adj {
            if a >= b || b >= m {
                return Err(LabError::validation(format!("bad adjustment pair ({a}, {b})")));
            }
            if !(-ADJ_MAX..=ADJ_MAX).contains(&v) {
                return Err(LabError::validation(format!(
                    "adjustment {v} for ({a}, {b}) outside [-{ADJ_MAX}, {ADJ_MAX}]"
                )));
            }
        }
        Ok(())
    }
}

pub fn eval_gui(r: &GuiReport, x: Schedule) -> f64 {
    r.eval(x)
}

#[derive(Serialize, Deserialize)]
struct GuiReportFile {
    // string keys so the report also reads back from buffered (tagged) content
    base: BTreeMap<String, f64>,
    #[serde(default)]
    adj: Vec<(usize, usize, f64)>,
}

impl Serialize for GuiReport {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        GuiReportFile {
            base: self
                .base
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(j, &v)| (j.to_string(), v))
                .collect(),
            adj: self.adj.iter().map(|(&(a, b), &v)| (a, b, v)).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GuiReport {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let file = GuiReportFile::deserialize(d)?;
        let mut base = Vec::with_capacity(file.base.len());
        for (key, v) in file.base {
            let j: usize = key
                .parse()
                .map_err(|_| de::Error::custom(format!("course id {key:?} is not an index")))?;
            base.push((j, v));
        }
        let m = base.iter().map(|&(j, _)| j + 1).max().unwrap_or(0);
        let mut r = GuiReport::new(m);
        for (j, v) in base {
            r.base[j] = v;
        }
        for (a, b, v) in file.adj {
            if a == b {
                return Err(de::Error::custom(format!("adjustment on a single course {a}")));
            }
            let key = (a.min(b), a.max(b));
            if r.adj.insert(key, v).is_some() {
                return Err(de::Error::custom(format!("duplicate adjustment ({a}, {b})")));
            }
        }
        Ok(r)
    }
}

/// Reporting mistake parameters. `gamma` scales the four report parameters;
/// `p_m` is the probability of answering a comparison query wrongly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MistakeProfile {
    pub f_b: f64,
    pub f_a: f64,
    pub sigma_b: f64,
    pub sigma_a: f64,
    pub gamma: f64,
    pub p_m: f64,
}

impl Default for MistakeProfile {
    fn default() -> Self {
        MistakeProfile::calibrated(9)
    }
}

impl MistakeProfile {
    pub fn none() -> Self {
        MistakeProfile {
            f_b: 0.0,
            f_a: 0.0,
            sigma_b: 0.0,
            sigma_a: 0.0,
            gamma: 1.0,
            p_m: 0.0,
        }
    }

    /// Calibrated profile for the given number of popular courses.
    pub fn calibrated(n_popular: usize) -> Self {
        let (f_a, sigma_b) = if n_popular <= 6 { (0.4825, 17.0) } else { (0.48, 23.0) };
        MistakeProfile {
            f_b: 0.5,
            f_a,
            sigma_b,
            sigma_a: 0.2,
            gamma: 1.0,
            p_m: 0.0,
        }
    }

    pub fn with_gamma(self, gamma: f64) -> Self {
        MistakeProfile { gamma, ..self }
    }

    pub fn with_p_m(self, p_m: f64) -> Self {
        MistakeProfile { p_m, ..self }
    }

    /// The γ-scaled report parameters `(f_b, f_a, σ_b, σ_a)`.
    pub fn effective(&self) -> (f64, f64, f64, f64) {
        let g = self.gamma;
        (
            (self.f_b * g).clamp(0.0, 1.0),
            (self.f_a * g).clamp(0.0, 1.0),
            self.sigma_b * g,
            self.sigma_a * g,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.f_b, self.f_a, self.p_m];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(LabError::validation("mistake probabilities must lie in [0, 1]"));
        }
        if self.sigma_b < 0.0 || self.sigma_a < 0.0 || self.gamma < 0.0 {
            return Err(LabError::validation("noise scales must be nonnegative"));
        }
        Ok(())
    }
}

/// Pairwise adjustments implied by the synergy sets: every pair inside a
/// complement set earns `ψ(2)` times the pair's base values, every pair inside
/// a substitute set `ξ(2)` times the same; contributions of several centers add.
pub fn true_adjustments(u: &TrueUtility) -> BTreeMap<(usize, usize), f64> {
    let mut adj = BTreeMap::new();
    for c in &u.centers {
        for (set, factor) in [(c.comps, c.psi[2.min(c.psi.len() - 1)]), (c.subs, c.xi[2.min(c.xi.len() - 1)])] {
            if factor == 0.0 {
                continue;
            }
            let members: Vec<usize> = set.courses().collect();
            for (i, &a) in members.iter().enumerate() {
                for &b in &members[i + 1..] {
                    *adj.entry((a, b)).or_insert(0.0) += factor * (u.base[a] + u.base[b]);
                }
            }
        }
    }
    adj.retain(|_, v| *v != 0.0);
    adj
}

/// Number of bases forgotten out of `n`: `f·n` rounded stochastically, so the
/// expected count is exactly `f·n`.
fn forget_count<R: Rng>(rng: &mut R, f: f64, n: usize) -> usize {
    let expected = f * n as f64;
    let whole = expected.floor();
    let extra = rng.random::<f64>() < expected - whole;
    (whole as usize + usize::from(extra)).min(n)
}

/// Produces a report from true preferences under the mistake profile.
///
/// Every base value is perceived with additive Gaussian noise and clamped to
/// `[0, 100]`; the student then forgets her lowest-valued courses first (by
/// perceived value) and reports the rest. A value clamped to 0 counts as
/// unreported. True adjustments between two reported courses are
/// each forgotten with probability `f_a`; the rest get multiplicative uniform
/// noise and are clamped to `[-200, 200]`.
pub fn report<R: Rng>(u: &TrueUtility, mp: &MistakeProfile, rng: &mut R) -> GuiReport {
    let (f_b, f_a, sigma_b, sigma_a) = mp.effective();
    let m = u.m();
    let noise = (sigma_b > 0.0).then(|| Normal::new(0.0, sigma_b).expect("finite sigma"));
    let perceived: Vec<f64> = (0..m)
        .map(|j| {
            let eps = noise.as_ref().map_or(0.0, |n| n.sample(rng));
            (u.base[j] + eps).clamp(0.0, BASE_MAX)
        })
        .collect();
    let mut positive: Vec<usize> = (0..m).filter(|&j| u.base[j] > 0.0).collect();
    positive.sort_by(|&a, &b| {
        perceived[a]
            .total_cmp(&perceived[b])
            .then(u.base[a].total_cmp(&u.base[b]))
            .then(a.cmp(&b))
    });
    let n_forget = forget_count(rng, f_b, positive.len());

    let mut r = GuiReport::new(m);
    for &j in &positive[n_forget..] {
        r.base[j] = perceived[j];
    }

    for ((a, b), alpha) in true_adjustments(u) {
        if !(r.is_reported(a) && r.is_reported(b)) {
            continue;
        }
        if rng.random::<f64>() < f_a {
            continue;
        }
        let eps = if sigma_a > 0.0 {
            rng.random_range(-sigma_a..=sigma_a)
        } else {
            0.0
        };
        let v = (alpha * (1.0 + eps)).clamp(-ADJ_MAX, ADJ_MAX);
        if v != 0.0 {
            r.adj.insert((a, b), v);
        }
    }
    r
}

/// Aggregate statistics comparing reports with true preferences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n_students: usize,
    /// Mean number of courses with a reported value above 0.
    pub bases_mean: f64,
    pub bases_ci: f64,
    /// Mean number of reported values in (0, 50).
    pub low_mean: f64,
    /// Mean number of reported values in [50, 100].
    pub high_mean: f64,
    pub adj_mean: f64,
    pub adj_ci: f64,
    pub adj_median: f64,
    pub adj_min: usize,
    pub adj_max: usize,
    /// Share of probe pairs on which report and truth agree, in percent.
    pub accuracy_pct: f64,
    pub accuracy_ci: f64,
    /// Median relative reported-utility difference on disagreements, in percent.
    pub disagreement_median_pct: Option<f64>,
}

pub(crate) fn mean_ci(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

pub(crate) fn median(xs: &mut [f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    })
}

/// How comparison probes are drawn during calibration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub pairs_per_student: usize,
    /// Sampling weight of a reported course relative to an unreported one
    /// when drawing probe schedules (1 = uniform schedules).
    pub reported_weight: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            pairs_per_student: 25,
            reported_weight: 2.0,
        }
    }
}

/// Random permissible schedule with exactly `size` courses, drawing courses
/// without replacement with weight `w` for reported courses and 1 otherwise.
fn probe_schedule<R: Rng>(u: &TrueUtility, r: &GuiReport, w: f64, size: usize, rng: &mut R) -> Schedule {
    loop {
        let x = if w == 1.0 {
            Schedule::from_courses(rand::seq::index::sample(rng, u.m(), size))
        } else {
            let picks = rand::seq::index::sample_weighted(
                rng,
                u.m(),
                |j| if r.is_reported(j) { w } else { 1.0 },
                size,
            )
            .expect("positive finite weights");
            Schedule::from_courses(picks)
        };
        if u.perm.is_permissible(x) {
            return x;
        }
    }
}

/// Computes the calibration statistics. Each student is probed with pairs of
/// distinct permissible full-size schedules; a probe agrees when the reported
/// and true utility differences have the same strict sign.
pub fn calibration_metrics<R: Rng>(
    students: &[TrueUtility],
    reports: &[GuiReport],
    probe: &ProbeConfig,
    rng: &mut R,
) -> CalibrationReport {
    let n_probe_pairs = probe.pairs_per_student;
    assert_eq!(students.len(), reports.len());
    let mut bases = Vec::new();
    let (mut low, mut high) = (0usize, 0usize);
    let mut adj_counts = Vec::new();
    let mut per_student_acc = Vec::new();
    let mut disagreements = Vec::new();
    for (u, r) in students.iter().zip(reports) {
        bases.push(r.n_reported() as f64);
        low += r.bases().iter().filter(|&&v| v > 0.0 && v < 50.0).count();
        high += r.bases().iter().filter(|&&v| v >= 50.0).count();
        adj_counts.push(r.adjustments().len() as f64);
        let size = u.perm.max_courses.min(u.m());
        let mut agree = 0usize;
        let mut probes = 0usize;
        let possible = crate::catalog::schedule_count_bound(u.m(), size)
            - crate::catalog::schedule_count_bound(u.m(), size.saturating_sub(1));
        if size == 0 || possible < 2 {
            continue;
        }
        while probes < n_probe_pairs {
            let a = probe_schedule(u, r, probe.reported_weight, size, rng);
            let b = probe_schedule(u, r, probe.reported_weight, size, rng);
            if a == b {
                continue;
            }
            probes += 1;
            let (ta, tb) = (u.eval(a), u.eval(b));
            let (ga, gb) = (r.eval(a), r.eval(b));
            let true_sign = (ta - tb).partial_cmp(&0.0).expect("finite utilities");
            let gui_sign = (ga - gb).partial_cmp(&0.0).expect("finite utilities");
            if true_sign == gui_sign {
                agree += 1;
                continue;
            }
            let (gw, gl) = if ta >= tb { (ga, gb) } else { (gb, ga) };
            let scale = gw.abs().max(gl.abs());
            disagreements.push(if scale > 0.0 { (gw - gl) / scale * 100.0 } else { 0.0 });
        }
        per_student_acc.push(agree as f64 / probes as f64 * 100.0);
    }
    let n = students.len();
    let (bases_mean, bases_ci) = mean_ci(&bases);
    let (adj_mean, adj_ci) = mean_ci(&adj_counts);
    let (accuracy_pct, accuracy_ci) = mean_ci(&per_student_acc);
    CalibrationReport {
        n_students: n,
        bases_mean,
        bases_ci,
        low_mean: low as f64 / n as f64,
        high_mean: high as f64 / n as f64,
        adj_mean,
        adj_ci,
        adj_median: median(&mut adj_counts.clone()).unwrap_or(f64::NAN),
        adj_min: adj_counts.iter().map(|&c| c as usize).min().unwrap_or(0),
        adj_max: adj_counts.iter().map(|&c| c as usize).max().unwrap_or(0),
        accuracy_pct,
        accuracy_ci,
        disagreement_median_pct: median(&mut disagreements),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{Catalog, CatalogSpec};
    use crate::prefgen::{generate_instance, GeneratorConfig};
    use crate::seed;

    fn cohort(n: usize, additive: bool) -> Vec<TrueUtility> {
        let cat = Catalog::build(&CatalogSpec::default()).unwrap();
        let cfg = GeneratorConfig {
            additive_mode: additive,
            ..GeneratorConfig::default()
        };
        generate_instance(&cfg, &cat, n).unwrap()
    }

    #[test]
    fn worked_example_report_value() {
        let mut r = GuiReport::new(4);
        for (j, v) in [75.0, 77.0, 42.0, 45.0].into_iter().enumerate() {
            r.set_base(j, v);
        }
        assert_eq!(r.eval(Schedule::EMPTY), 0.0);
        assert_eq!(r.eval(Schedule::from_courses([1, 3])), 122.0);
        r.set_adjustment(2, 0, 10.0);
        assert_eq!(r.eval(Schedule::from_courses([0, 2])), 75.0 + 42.0 + 10.0);
    }

    #[test]
    fn noiseless_report_is_exact() {
        let mut rng = seed::rng(1, &[]);
        for u in cohort(20, false) {
            let r = report(&u, &MistakeProfile::none(), &mut rng);
            for j in 0..u.m() {
                assert_eq!(r.base(j), u.base[j].clamp(0.0, 100.0));
            }
            let truth = true_adjustments(&u);
            let expected: BTreeMap<_, _> = truth
                .into_iter()
                .map(|(k, v)| (k, v.clamp(-ADJ_MAX, ADJ_MAX)))
                .collect();
            assert_eq!(r.adjustments(), &expected);
        }
    }

    #[test]
    fn gamma_zero_is_noiseless() {
        let mp = MistakeProfile::calibrated(9).with_gamma(0.0);
        let mut rng = seed::rng(2, &[]);
        for u in cohort(5, false) {
            let a = report(&u, &mp, &mut rng);
            let b = report(&u, &MistakeProfile::none(), &mut rng);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn forgetting_everything_gives_empty_report() {
        let mp = MistakeProfile {
            f_b: 1.0,
            ..MistakeProfile::calibrated(9)
        };
        let mut rng = seed::rng(3, &[]);
        for u in cohort(5, false) {
            assert!(report(&u, &mp, &mut rng).is_empty());
        }
    }

    #[test]
    fn forgotten_courses_are_the_lowest_valued() {
        // without base noise nothing is clamped to zero, so every unreported
        // course was forgotten
        let mp = MistakeProfile {
            sigma_b: 0.0,
            ..MistakeProfile::calibrated(9)
        };
        let mut rng = seed::rng(4, &[]);
        for u in cohort(50, false) {
            let r = report(&u, &mp, &mut rng);
            let n = r.n_reported();
            assert!(n == 12 || n == 13, "{n} reported");
            let reported_min = (0..u.m())
                .filter(|&j| r.is_reported(j))
                .map(|j| u.base[j])
                .fold(f64::INFINITY, f64::min);
            for j in (0..u.m()).filter(|&j| !r.is_reported(j)) {
                assert!(u.base[j] <= reported_min);
            }
        }
    }

    #[test]
    fn reports_are_deterministic_and_in_range() {
        let mp = MistakeProfile::calibrated(9);
        for u in cohort(10, false) {
            let a = report(&u, &mp, &mut seed::rng(5, &[]));
            let b = report(&u, &mp, &mut seed::rng(5, &[]));
            assert_eq!(a, b);
            a.validate(u.m()).unwrap();
            for &(x, y) in a.adjustments().keys() {
                assert!(a.is_reported(x) && a.is_reported(y));
            }
        }
    }

    #[test]
    fn perfect_additive_reports_agree_everywhere() {
        let students = cohort(100, true);
        let mut rng = seed::rng(6, &[]);
        let reports: Vec<_> = students
            .iter()
            .map(|u| report(u, &MistakeProfile::none(), &mut rng))
            .collect();
        let cal = calibration_metrics(&students, &reports, &ProbeConfig::default(), &mut rng);
        assert_eq!(cal.accuracy_pct, 100.0);
        assert_eq!(cal.disagreement_median_pct, None);
        assert_eq!(cal.bases_mean, 25.0);
    }

    #[test]
    fn json_shape() {
        let mut r = GuiReport::new(5);
        r.set_base(1, 60.0);
        r.set_base(3, 20.5);
        r.set_adjustment(3, 1, -15.0);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(json, r#"{"base":{"1":60.0,"3":20.5},"adj":[[1,3,-15.0]]}"#);
        let back: GuiReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.with_len(5), r);
    }

    #[test]
    fn out_of_range_values_fail_validation() {
        let mut r = GuiReport::new(3);
        r.set_base(0, 101.0);
        assert!(r.validate(3).is_err());
        let mut r = GuiReport::new(3);
        r.set_base(0, 10.0);
        r.set_base(1, 10.0);
        r.set_adjustment(0, 1, 250.0);
        assert!(r.validate(3).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn eval_is_additive(
                base in proptest::collection::vec(0.0f64..100.0, 8),
                adj in proptest::collection::vec((0usize..8, 0usize..8, -200.0f64..200.0), 0..10),
                x in 0u64..256,
                j in 0usize..8,
            ) {
                let mut r = GuiReport::new(8);
                for (i, v) in base.into_iter().enumerate() {
                    r.set_base(i, v);
                }
                for (a, b, v) in adj {
                    if a != b {
                        r.set_adjustment(a, b, v);
                    }
                }
                let x = Schedule::from_bits(x).without(j);
                let delta = r.eval(x.with(j)) - r.eval(x);
                let expected = r.base(j)
                    + x.courses()
                        .filter_map(|i| r.adjustments().get(&(i.min(j), i.max(j))))
                        .sum::<f64>();
                prop_assert!((delta - expected).abs() < 1e-9);
            }
        }
    }
}
