//! Budgets, clearing error and the three Course Match stages, plus random
//! serial dictatorship.
//!
//! Every student is represented by a [`Valuer`]: her values over the
//! permissible schedules, pre-sorted best first so that demand at any prices
//! is the first affordable entry.

use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{affordable, cost, Schedule, ScheduleSpace};
use crate::error::{LabError, Result};
use crate::seed;

pub const DEFAULT_BETA: f64 = 0.04;

/// A student's values over the permissible schedules.
#[derive(Clone, Debug)]
pub struct Valuer {
    space: Arc<ScheduleSpace>,
    /// Value per schedule, indexed like `space.schedules()`.
    values: Vec<f64>,
    /// Schedules sorted by value (descending), then bit pattern (ascending).
    order: Vec<Schedule>,
}

impl Valuer {
    pub fn from_fn<F: Fn(Schedule) -> f64>(space: &Arc<ScheduleSpace>, value: F) -> Self {
        let values: Vec<f64> = space.schedules().iter().map(|&x| value(x)).collect();
        let mut idx: Vec<u32> = (0..values.len() as u32).collect();
        idx.sort_by(|&a, &b| {
            values[b as usize]
                .total_cmp(&values[a as usize])
                .then(space.schedules()[a as usize].bits().cmp(&space.schedules()[b as usize].bits()))
        });
        let order = idx.into_iter().map(|i| space.schedules()[i as usize]).collect();
        Valuer {
            space: space.clone(),
            values,
            order,
        }
    }

    pub fn space(&self) -> &Arc<ScheduleSpace> {
        &self.space
    }

    /// Value of a permissible schedule; `None` if `x` is not permissible.
    pub fn value(&self, x: Schedule) -> Option<f64> {
        self.space
            .schedules()
            .binary_search_by_key(&x.bits(), |s| s.bits())
            .ok()
            .map(|i| self.values[i])
    }

    /// Best affordable schedule at `prices`.
    pub fn demand(&self, prices: &[f64], budget: f64) -> Schedule {
        self.demand_where(prices, budget, |_| true)
    }

    /// Best affordable schedule satisfying `ok`; the empty schedule if none.
    pub fn demand_where<F: Fn(Schedule) -> bool>(&self, prices: &[f64], budget: f64, ok: F) -> Schedule {
        self.order
            .iter()
            .copied()
            .find(|&x| affordable(cost(prices, x), budget) && ok(x))
            .unwrap_or(Schedule::EMPTY)
    }

    /// Schedules in preference order.
    pub fn ranking(&self) -> &[Schedule] {
        &self.order
    }
}

/// Budgets `1 + U(0, beta)`, one per student.
pub fn draw_budgets<R: Rng>(n: usize, beta: f64, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| if beta > 0.0 { 1.0 + rng.random_range(0.0..beta) } else { 1.0 })
        .collect()
}

pub type Allocation = Vec<Schedule>;

pub fn demand(valuers: &[Valuer], prices: &[f64], budgets: &[f64]) -> Allocation {
    valuers.iter().zip(budgets).map(|(v, &b)| v.demand(prices, b)).collect()
}

/// Seats taken per course.
pub fn course_demand(a: &[Schedule], m: usize) -> Vec<u32> {
    let mut d = vec![0u32; m];
    for x in a {
        for j in x.courses() {
            d[j] += 1;
        }
    }
    d
}

pub fn is_feasible(a: &[Schedule], capacities: &[u32], space: &ScheduleSpace) -> bool {
    let d = course_demand(a, capacities.len());
    d.iter().zip(capacities).all(|(d, q)| d <= q) && a.iter().all(|&x| space.permissibility().is_permissible(x))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClearingReport {
    pub z: Vec<f64>,
    pub alpha: f64,
    pub target: f64,
}

impl ClearingReport {
    pub fn clears(&self) -> bool {
        self.alpha <= self.target
    }
}

/// Clearing-error target `sqrt(σ m) / 2` with `σ = min(2k, m)`.
pub fn clearing_target(m: usize, k: usize) -> f64 {
    let sigma = (2 * k).min(m) as f64;
    (sigma * m as f64).sqrt() / 2.0
}

/// Per-course error: excess demand where the price is positive, only the
/// positive part where the course is free.
pub fn clearing_error(a: &[Schedule], prices: &[f64], capacities: &[u32], k: usize) -> ClearingReport {
    let d = course_demand(a, capacities.len());
    let z: Vec<f64> = d
        .iter()
        .zip(capacities)
        .zip(prices)
        .map(|((&d, &q), &p)| {
            let e = d as f64 - q as f64;
            if p > 0.0 {
                e
            } else {
                e.max(0.0)
            }
        })
        .collect();
    let alpha = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    ClearingReport {
        z,
        alpha,
        target: clearing_target(capacities.len(), k),
    }
}

/// The data every stage needs: valuers, budgets and seats.
#[derive(Clone, Debug)]
pub struct Economy {
    pub valuers: Vec<Valuer>,
    pub budgets: Vec<f64>,
    pub capacities: Vec<u32>,
    pub max_courses: usize,
}

impl Economy {
    pub fn new(valuers: Vec<Valuer>, budgets: Vec<f64>, capacities: Vec<u32>, max_courses: usize) -> Result<Self> {
        if valuers.len() != budgets.len() {
            return Err(LabError::validation("one budget per student required"));
        }
        if valuers.iter().any(|v| v.space.m() != capacities.len()) {
            return Err(LabError::validation("valuer space does not match the catalog"));
        }
        Ok(Economy {
            valuers,
            budgets,
            capacities,
            max_courses,
        })
    }

    pub fn m(&self) -> usize {
        self.capacities.len()
    }

    pub fn n(&self) -> usize {
        self.valuers.len()
    }

    pub fn demand(&self, prices: &[f64]) -> Allocation {
        demand(&self.valuers, prices, &self.budgets)
    }

    pub fn clearing_error(&self, a: &[Schedule], prices: &[f64]) -> ClearingReport {
        clearing_error(a, prices, &self.capacities, self.max_courses)
    }

    pub fn max_budget(&self) -> f64 {
        self.budgets.iter().copied().fold(0.0, f64::max)
    }

    pub fn min_budget(&self) -> f64 {
        self.budgets.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub max_steps: usize,
    pub delta: f64,
    pub eta: f64,
    pub tenure: usize,
    /// Multipliers applied to `delta` and `eta`; every move is tried at each.
    pub scales: Vec<f64>,
    /// Steps without a new best before jumping to a jittered copy of the
    /// best vector (0 disables).
    pub restart_after: usize,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            max_steps: 500,
            delta: 0.1,
            eta: 0.1,
            tenure: 10,
            scales: vec![1.0, 0.25, 0.05],
            restart_after: 40,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub alpha: f64,
    pub best_alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Result {
    pub prices: Vec<f64>,
    pub allocation: Allocation,
    pub report: ClearingReport,
    pub steps: usize,
    pub trace: Vec<TraceStep>,
}

/// Starting prices: proportional to demand at uniform prices `1/k`, scaled so
/// that `k` average-priced courses cost 1.
pub fn initial_prices(econ: &Economy) -> Vec<f64> {
    let m = econ.m();
    let k = econ.max_courses.max(1);
    let a = econ.demand(&vec![1.0 / k as f64; m]);
    let d = course_demand(&a, m);
    let mean = d.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
    if mean == 0.0 {
        return vec![0.0; m];
    }
    d.iter().map(|&v| v as f64 / (k as f64 * mean)).collect()
}

fn price_key(p: &[f64]) -> Vec<i64> {
    p.iter().map(|v| (v * 1e6).round() as i64).collect()
}

/// Demand at `prices`, reusing `prev` (demand at `prev_prices`) for students
/// whose choice cannot change: where no price fell, a student whose
/// schedule did not get dearer keeps it.
fn demand_from(econ: &Economy, prev_prices: &[f64], prev: &[Schedule], prices: &[f64]) -> Allocation {
    let any_fell = prices.iter().zip(prev_prices).any(|(p, q)| p < q);
    let rose: Schedule = Schedule::from_courses((0..prices.len()).filter(|&j| prices[j] > prev_prices[j]));
    econ.valuers
        .iter()
        .zip(&econ.budgets)
        .zip(prev)
        .map(|((v, &b), &x)| {
            if !any_fell && x.intersect(rose).is_empty() {
                x
            } else {
                v.demand(prices, b)
            }
        })
        .collect()
}

/// Tabu search over price vectors minimizing the clearing error. Zero prices
/// are returned as is when they already clear.
///
/// Each step looks at a move along the excess-demand vector and, for every
/// course with nonzero error, a price raise and cut proportional to its error,
/// each at several step scales; it moves to the best neighbour not visited within the last `tenure` steps
/// and remembers the best vector seen. After `restart_after` steps without
/// progress the search resumes from a jittered copy of the best vector.
pub fn stage1(econ: &Economy, cfg: &Stage1Config) -> Stage1Result {
    let m = econ.m();
    let cap = econ.max_budget();
    let mut rng = seed::rng_tagged(cfg.seed, "market.stage1", &[]);
    let free = fixed_prices(econ, vec![0.0; m]);
    if free.report.clears() {
        return free;
    }
    let mut p = initial_prices(econ);
    let mut a = econ.demand(&p);
    let mut rep = econ.clearing_error(&a, &p);
    let mut best = (p.clone(), a.clone(), rep.clone());
    let mut trace = vec![TraceStep {
        step: 0,
        alpha: rep.alpha,
        best_alpha: rep.alpha,
    }];
    let mut tabu: std::collections::VecDeque<Vec<i64>> = std::collections::VecDeque::new();
    let mut tabu_set: HashSet<Vec<i64>> = HashSet::new();
    tabu.push_back(price_key(&p));
    tabu_set.insert(price_key(&p));
    let mut steps = 0;
    let mut since_best = 0;

    while !best.2.clears() && steps < cfg.max_steps {
        steps += 1;
        let mut candidates: Vec<Vec<f64>> = Vec::new();
        let mut order: Vec<usize> = (0..m).filter(|&j| rep.z[j] != 0.0).collect();
        order.shuffle(&mut rng);
        for &s in &cfg.scales {
            candidates.push(p.iter().zip(&rep.z).map(|(pj, zj)| (pj + s * cfg.eta * zj).clamp(0.0, cap)).collect());
            for &j in &order {
                for sign in [1.0, -1.0] {
                    let mut q = p.clone();
                    q[j] = (q[j] + sign * s * cfg.delta * rep.z[j].abs()).clamp(0.0, cap);
                    candidates.push(q);
                }
            }
        }
        let mut chosen: Option<(Vec<f64>, Allocation, ClearingReport)> = None;
        for q in candidates {
            let key = price_key(&q);
            if tabu_set.contains(&key) {
                continue;
            }
            let aq = demand_from(econ, &p, &a, &q);
            let rq = econ.clearing_error(&aq, &q);
            if chosen.as_ref().is_none_or(|c| rq.alpha < c.2.alpha) {
                chosen = Some((q, aq, rq));
            }
        }
        let Some((q, aq, rq)) = chosen else {
            break;
        };
        let key = price_key(&q);
        tabu.push_back(key.clone());
        tabu_set.insert(key);
        while tabu.len() > cfg.tenure {
            if let Some(old) = tabu.pop_front() {
                tabu_set.remove(&old);
            }
        }
        p = q;
        a = aq;
        rep = rq;
        if rep.alpha < best.2.alpha {
            best = (p.clone(), a.clone(), rep.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        if cfg.restart_after > 0 && since_best >= cfg.restart_after {
            since_best = 0;
            p = best.0.iter().map(|&v| (v * rng.random_range(0.9..1.1)).clamp(0.0, cap)).collect();
            a = econ.demand(&p);
            rep = econ.clearing_error(&a, &p);
            if rep.alpha < best.2.alpha {
                best = (p.clone(), a.clone(), rep.clone());
            }
        }
        trace.push(TraceStep {
            step: steps,
            alpha: rep.alpha,
            best_alpha: best.2.alpha,
        });
    }
    Stage1Result {
        prices: best.0,
        allocation: best.1,
        report: best.2,
        steps,
        trace,
    }
}

/// Price granularity of the oversubscription search.
pub const STAGE2_GRANULARITY: f64 = 1e-4;

/// Raises the price of the most oversubscribed course (ties: lowest index) to
/// the smallest level, within [`STAGE2_GRANULARITY`], at which at least one
/// of its demanders drops it; repeats until nothing is oversubscribed.
pub fn stage2(econ: &Economy, prices: &[f64], allocation: &[Schedule]) -> (Vec<f64>, Allocation) {
    let m = econ.m();
    let mut p = prices.to_vec();
    let mut a = allocation.to_vec();
    let ceiling = econ.max_budget() + STAGE2_GRANULARITY;
    loop {
        let d = course_demand(&a, m);
        let worst = (0..m)
            .filter(|&j| d[j] > econ.capacities[j])
            .max_by(|&i, &j| (d[i] - econ.capacities[i]).cmp(&(d[j] - econ.capacities[j])).then(j.cmp(&i)));
        let Some(j) = worst else {
            return (p, a);
        };
        let demanders: Vec<usize> = (0..a.len()).filter(|&i| a[i].contains(j)).collect();
        let count_at = |price: f64| {
            let mut q = p.clone();
            q[j] = price;
            demanders
                .iter()
                .filter(|&&i| econ.valuers[i].demand(&q, econ.budgets[i]).contains(j))
                .count()
        };
        let n0 = demanders.len();
        let (mut lo, mut hi) = (p[j], ceiling.max(p[j] + STAGE2_GRANULARITY));
        while hi - lo > STAGE2_GRANULARITY {
            let mid = 0.5 * (lo + hi);
            if count_at(mid) < n0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let old = p.clone();
        p[j] = hi;
        a = demand_from(econ, &old, &a, &p);
    }
}

/// Raises every budget by `bump` and lets students, in seeded random order,
/// switch to their best affordable schedule among courses with free seats.
pub fn stage3(econ: &Economy, prices: &[f64], allocation: &[Schedule], bump: f64, order_seed: u64) -> Allocation {
    let m = econ.m();
    let mut a = allocation.to_vec();
    let mut used = course_demand(&a, m);
    let mut order: Vec<usize> = (0..a.len()).collect();
    order.shuffle(&mut seed::rng_tagged(order_seed, "market.stage3", &[]));
    for i in order {
        for j in a[i].courses() {
            used[j] -= 1;
        }
        let free = Schedule::from_courses((0..m).filter(|&j| used[j] < econ.capacities[j]));
        let budget = econ.budgets[i] * (1.0 + bump);
        let current = econ.valuers[i].value(a[i]).unwrap_or(f64::NEG_INFINITY);
        let best = econ.valuers[i].demand_where(prices, budget, |x| x.is_subset_of(free));
        if econ.valuers[i].value(best).unwrap_or(f64::NEG_INFINITY) > current {
            a[i] = best;
        }
        for j in a[i].courses() {
            used[j] += 1;
        }
    }
    a
}

/// Random serial dictatorship: in seeded random order each student takes her
/// favourite schedule among courses with seats left.
pub fn rsd(valuers: &[Valuer], capacities: &[u32], seed_value: u64) -> Allocation {
    let m = capacities.len();
    let mut used = vec![0u32; m];
    let mut a = vec![Schedule::EMPTY; valuers.len()];
    let mut order: Vec<usize> = (0..valuers.len()).collect();
    order.shuffle(&mut seed::rng_tagged(seed_value, "market.rsd", &[]));
    let zero = vec![0.0; m];
    for i in order {
        let free = Schedule::from_courses((0..m).filter(|&j| used[j] < capacities[j]));
        let x = valuers[i].demand_where(&zero, 0.0, |x| x.is_subset_of(free));
        for j in x.courses() {
            used[j] += 1;
        }
        a[i] = x;
    }
    a
}

/// Outcome of the three Course Match stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CourseMatchOutcome {
    pub stage1: Stage1Result,
    pub stage2_prices: Vec<f64>,
    pub stage2_allocation: Allocation,
    pub allocation: Allocation,
    pub stage2_alpha: f64,
}

/// Stages 2 and 3 from given prices.
pub fn finish_from_prices(econ: &Economy, stage1: Stage1Result, bump: f64, order_seed: u64) -> CourseMatchOutcome {
    let (p2, a2) = stage2(econ, &stage1.prices, &stage1.allocation);
    let a3 = stage3(econ, &p2, &a2, bump, order_seed);
    let stage2_alpha = econ.clearing_error(&a2, &p2).alpha;
    CourseMatchOutcome {
        stage1,
        stage2_prices: p2,
        stage2_allocation: a2,
        allocation: a3,
        stage2_alpha,
    }
}

/// Runs all three stages.
pub fn course_match(econ: &Economy, cfg: &Stage1Config, bump: f64, order_seed: u64) -> CourseMatchOutcome {
    let s1 = stage1(econ, cfg);
    finish_from_prices(econ, s1, bump, order_seed)
}

/// Stage-1 result for externally fixed prices (no search).
pub fn fixed_prices(econ: &Economy, prices: Vec<f64>) -> Stage1Result {
    let a = econ.demand(&prices);
    let report = econ.clearing_error(&a, &prices);
    Stage1Result {
        trace: vec![TraceStep {
            step: 0,
            alpha: report.alpha,
            best_alpha: report.alpha,
        }],
        prices,
        allocation: a,
        report,
        steps: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Permissibility;

    fn additive_valuers(space: &Arc<ScheduleSpace>, bases: &[Vec<f64>]) -> Vec<Valuer> {
        bases
            .iter()
            .map(|b| Valuer::from_fn(space, |x| x.courses().map(|j| b[j]).sum()))
            .collect()
    }

    #[test]
    fn zero_price_demand_is_unconstrained_argmax() {
        let space = ScheduleSpace::new(&Permissibility::with_max_courses(2), 4).unwrap();
        let v = additive_valuers(&space, &[vec![85.0, 70.0, 50.0, 40.0]]);
        assert_eq!(v[0].demand(&[0.0; 4], 1.0), Schedule::from_courses([0, 1]));
        assert_eq!(v[0].demand(&[0.6, 0.6, 0.3, 0.3], 1.0), Schedule::from_courses([0, 2]));
    }

    #[test]
    fn clearing_error_cases() {
        let a = vec![Schedule::from_courses([0]), Schedule::from_courses([0])];
        let free = clearing_error(&a, &[0.0], &[5], 1);
        assert_eq!(free.z, vec![0.0]);
        let priced = clearing_error(&a, &[0.1], &[5], 1);
        assert_eq!(priced.z, vec![-3.0]);
        assert_eq!(priced.alpha, 3.0);
        let exact = clearing_error(&a, &[0.1], &[2], 1);
        assert_eq!(exact.alpha, 0.0);
    }

    #[test]
    fn target_formula() {
        assert!((clearing_target(25, 5) - (250f64).sqrt() / 2.0).abs() < 1e-12);
        assert!((clearing_target(4, 5) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn excess_supply_returns_zero_prices() {
        let space = ScheduleSpace::new(&Permissibility::with_max_courses(2), 4).unwrap();
        let v = additive_valuers(&space, &[vec![10.0, 0.0, 0.0, 0.0], vec![0.0, 10.0, 0.0, 0.0]]);
        let econ = Economy::new(v, vec![1.0, 1.02], vec![5, 5, 5, 5], 2).unwrap();
        let r = stage1(&econ, &Stage1Config::default());
        assert!(r.report.clears());
        assert_eq!(r.steps, 0);
    }

    #[test]
    fn contested_single_seat() {
        let space = ScheduleSpace::new(&Permissibility::with_max_courses(1), 1).unwrap();
        let v = additive_valuers(&space, &[vec![10.0], vec![10.0]]);
        let econ = Economy::new(v, vec![1.0, 1.03], vec![1], 1).unwrap();
        let out = course_match(&econ, &Stage1Config::default(), 0.0, 1);
        assert!(is_feasible(&out.allocation, &[1], &space));
        // the richer student can pay a price the poorer one cannot
        assert!(out.stage2_prices[0] > 1.0);
        assert_eq!(out.allocation, vec![Schedule::EMPTY, Schedule::from_courses([0])]);
    }

    #[test]
    fn stage2_identity_without_oversubscription() {
        let space = ScheduleSpace::new(&Permissibility::with_max_courses(2), 3).unwrap();
        let v = additive_valuers(&space, &[vec![5.0, 3.0, 1.0]]);
        let econ = Economy::new(v, vec![1.0], vec![1, 1, 1], 2).unwrap();
        let p = vec![0.2, 0.2, 0.2];
        let a = econ.demand(&p);
        assert_eq!(stage2(&econ, &p, &a), (p.clone(), a.clone()));
        assert_eq!(stage3(&econ, &p, &a, 0.0, 0), a);
    }

    #[test]
    fn stage3_gives_single_student_her_argmax() {
        let space = ScheduleSpace::new(&Permissibility::with_max_courses(2), 3).unwrap();
        let v = additive_valuers(&space, &[vec![5.0, 3.0, 1.0]]);
        let econ = Economy::new(v, vec![1.0], vec![1, 1, 1], 2).unwrap();
        let a = stage3(&econ, &[0.0; 3], &[Schedule::EMPTY], 0.1, 0);
        assert_eq!(a, vec![Schedule::from_courses([0, 1])]);
    }

    #[test]
    fn rsd_first_in_order_wins() {
        let space = ScheduleSpace::new(&Permissibility::with_max_courses(1), 2).unwrap();
        let v = additive_valuers(&space, &[vec![10.0, 1.0], vec![10.0, 1.0]]);
        let a = rsd(&v, &[1, 1], 5);
        let mut order: Vec<usize> = vec![0, 1];
        order.shuffle(&mut seed::rng_tagged(5, "market.rsd", &[]));
        assert_eq!(a[order[0]], Schedule::from_courses([0]));
        assert_eq!(a[order[1]], Schedule::from_courses([1]));
    }

    #[test]
    fn budgets_in_range() {
        let b = draw_budgets(1000, DEFAULT_BETA, &mut seed::rng(1, &[]));
        assert!(b.iter().all(|&v| (1.0..1.0 + DEFAULT_BETA).contains(&v)));
        let ratio = b.iter().cloned().fold(0.0, f64::max) / b.iter().cloned().fold(f64::MAX, f64::min);
        assert!(ratio <= 1.0 + DEFAULT_BETA);
    }
}
