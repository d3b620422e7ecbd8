//! Comparison-query generation.
//!
//! Online binary insertion sort (OBIS) keeps a best-first list of schedules
//! the student has ranked. Each new candidate, the model's best schedule not
//! yet in the list, is placed by binary search; every placement adds one
//! ordinal pair per list element. The naive baseline pits the current
//! favourite against the model's best unqueried schedule; the random baseline
//! compares two uniformly drawn affordable schedules.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{affordable, cost, Schedule, ScheduleSpace};
use crate::error::{LabError, Result};
use crate::prefgen::TrueUtility;
use crate::seed;
use crate::valuemodel::{train_classification, MonotoneValueModel, OrdinalDataset, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum QueryAlgorithm {
    Obis,
    Naive,
    Random,
}

impl std::str::FromStr for QueryAlgorithm {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "obis" => Ok(QueryAlgorithm::Obis),
            "naive" => Ok(QueryAlgorithm::Naive),
            "random" => Ok(QueryAlgorithm::Random),
            _ => Err(LabError::validation(format!("unknown query algorithm {s:?}"))),
        }
    }
}

impl std::fmt::Display for QueryAlgorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QueryAlgorithm::Obis => "OBIS",
            QueryAlgorithm::Naive => "NAIVE",
            QueryAlgorithm::Random => "RANDOM",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonQuery {
    pub id: u64,
    pub left: Schedule,
    pub right: Schedule,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Next {
    Query(ComparisonQuery),
    Done,
}

/// One step of binary insertion of `x` into the best-first list `sorted`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SearchStep<T> {
    /// Compare `x` against this element.
    Ask(T),
    /// Every needed comparison is known; insert at this index.
    Insert(usize),
}

/// Replays the binary search from scratch. `prefers(a, b)` returns
/// `Some(true)` when `a` is known to beat `b`, `Some(false)` when `b` is known
/// to beat `a`, and `None` if the pair has not been compared.
pub fn search_step<T: Copy>(sorted: &[T], x: T, prefers: impl Fn(T, T) -> Option<bool>) -> SearchStep<T> {
    let mut lo: isize = 0;
    let mut hi: isize = sorted.len() as isize - 1;
    while lo <= hi {
        let mid = ((lo + hi) / 2) as usize;
        match prefers(x, sorted[mid]) {
            Some(true) => hi = mid as isize - 1,
            Some(false) => lo = mid as isize + 1,
            None => return SearchStep::Ask(sorted[mid]),
        }
    }
    SearchStep::Insert(lo as usize)
}

/// Binary insertion sort driven by an external comparison oracle, for any
/// item type. Used to check the query bounds independently of the models.
#[derive(Clone, Debug)]
pub struct InsertionSorter<T> {
    pub sorted: Vec<T>,
    answers: HashMap<(T, T), bool>,
    pub queries: usize,
}

impl<T: Copy + Eq + std::hash::Hash> Default for InsertionSorter<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Copy + Eq + std::hash::Hash> InsertionSorter<T> {
    pub fn new() -> Self {
        InsertionSorter {
            sorted: Vec::new(),
            answers: HashMap::new(),
            queries: 0,
        }
    }

    fn known(&self, a: T, b: T) -> Option<bool> {
        self.answers.get(&(a, b)).copied()
    }

    /// Inserts `x`, asking `better(x, y)` for each comparison needed. Returns
    /// the number of queries spent.
    pub fn insert(&mut self, x: T, mut better: impl FnMut(T, T) -> bool) -> usize {
        let mut spent = 0;
        loop {
            match search_step(&self.sorted, x, |a, b| self.known(a, b)) {
                SearchStep::Ask(y) => {
                    let w = better(x, y);
                    self.answers.insert((x, y), w);
                    self.answers.insert((y, x), !w);
                    spent += 1;
                }
                SearchStep::Insert(pos) => {
                    self.sorted.insert(pos, x);
                    self.queries += spent;
                    return spent;
                }
            }
        }
    }

    pub fn inferred_pairs(&self) -> usize {
        inferred_pairs(self.sorted.len())
    }
}

/// Number of preference pairs implied by a sorted list of length `l`.
pub fn inferred_pairs(l: usize) -> usize {
    l * l.saturating_sub(1) / 2
}

fn key(a: Schedule, b: Schedule) -> (Schedule, Schedule) {
    if a.bits() <= b.bits() {
        (a, b)
    } else {
        (b, a)
    }
}

/// Per-student elicitation state. Deterministic given its inputs and seed.
#[derive(Clone, Debug)]
pub struct ElicitationSession {
    algorithm: QueryAlgorithm,
    space: Arc<ScheduleSpace>,
    prices: Vec<f64>,
    budget: f64,
    cfg: TrainConfig,
    base_model: MonotoneValueModel,
    model: MonotoneValueModel,
    /// OBIS: best-first ranked list.
    sorted: Vec<Schedule>,
    /// OBIS: the schedule being inserted. NAIVE: the challenger.
    pending: Option<Schedule>,
    /// Unordered pair → winner.
    answered: HashMap<(Schedule, Schedule), Schedule>,
    /// Ordinal data for the baselines.
    ordinal: OrdinalDataset,
    /// NAIVE: current favourite and every schedule shown so far.
    champion: Option<Schedule>,
    queried: HashSet<Schedule>,
    /// Affordable schedules at the session prices.
    pool: Vec<Schedule>,
    outstanding: Option<ComparisonQuery>,
    next_id: u64,
    n_answered: usize,
    rng: ChaCha8Rng,
}

impl ElicitationSession {
    /// Starts a session from a model already fitted to the student's
    /// cardinal data. The model is treated as the phase-1 checkpoint: every
    /// retrain starts from it and runs only the ordinal phase.
    pub fn new(
        algorithm: QueryAlgorithm,
        base_model: MonotoneValueModel,
        space: Arc<ScheduleSpace>,
        prices: Vec<f64>,
        budget: f64,
        cfg: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        if prices.len() != space.m() || base_model.m != space.m() {
            return Err(LabError::validation("price/model length does not match the schedule space"));
        }
        let pool: Vec<Schedule> = space
            .schedules()
            .iter()
            .copied()
            .filter(|&x| affordable(cost(&prices, x), budget))
            .collect();
        let mut s = ElicitationSession {
            algorithm,
            space,
            prices,
            budget,
            cfg,
            model: base_model.clone(),
            base_model,
            sorted: Vec::new(),
            pending: None,
            answered: HashMap::new(),
            ordinal: OrdinalDataset::default(),
            champion: None,
            queried: HashSet::new(),
            pool,
            outstanding: None,
            next_id: 1,
            n_answered: 0,
            rng: seed::rng_tagged(seed, "elicitation.session", &[]),
        };
        match algorithm {
            QueryAlgorithm::Obis => {
                let top1 = s.best_excluding(&HashSet::new()).unwrap_or(Schedule::EMPTY);
                s.sorted.push(top1);
                s.pending = s.best_excluding(&HashSet::from([top1]));
            }
            QueryAlgorithm::Naive => {
                let top1 = s.best_excluding(&HashSet::new()).unwrap_or(Schedule::EMPTY);
                s.champion = Some(top1);
                s.queried.insert(top1);
                s.pending = s.best_excluding(&s.queried.clone());
            }
            QueryAlgorithm::Random => {}
        }
        Ok(s)
    }

    /// Highest-predicted affordable schedule outside `exclude` (ties: smallest
    /// bit pattern).
    fn best_excluding(&self, exclude: &HashSet<Schedule>) -> Option<Schedule> {
        let mut best: Option<(f64, Schedule)> = None;
        for &x in &self.pool {
            if exclude.contains(&x) {
                continue;
            }
            let v = self.model.predict(x);
            if best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, x));
            }
        }
        best.map(|(_, x)| x)
    }

    fn retrain(&mut self, data: &OrdinalDataset) {
        let mut model = self.base_model.clone();
        train_classification(&mut model, data, &self.cfg);
        self.model = model;
    }

    pub fn space(&self) -> &Arc<ScheduleSpace> {
        &self.space
    }

    pub fn algorithm(&self) -> QueryAlgorithm {
        self.algorithm
    }

    pub fn prices(&self) -> &[f64] {
        &self.prices
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn sorted(&self) -> &[Schedule] {
        &self.sorted
    }

    pub fn pending(&self) -> Option<Schedule> {
        self.pending
    }

    pub fn model(&self) -> &MonotoneValueModel {
        &self.model
    }

    pub fn base_model(&self) -> &MonotoneValueModel {
        &self.base_model
    }

    pub fn n_answered(&self) -> usize {
        self.n_answered
    }

    pub fn outstanding(&self) -> Option<ComparisonQuery> {
        self.outstanding
    }

    /// Recorded winner of a compared pair, in either order.
    pub fn winner(&self, a: Schedule, b: Schedule) -> Option<Schedule> {
        self.answered.get(&key(a, b)).copied()
    }

    /// Number of ordinal pairs the answers imply.
    pub fn inferred_pairs(&self) -> usize {
        match self.algorithm {
            QueryAlgorithm::Obis => inferred_pairs(self.sorted.len()),
            _ => self.ordinal.len(),
        }
    }

    /// Ordinal training data implied by the answers so far.
    pub fn ordinal_dataset(&self) -> OrdinalDataset {
        match self.algorithm {
            QueryAlgorithm::Obis => OrdinalDataset::from_sorted(&self.sorted),
            _ => self.ordinal.clone(),
        }
    }

    /// Model to allocate with. For OBIS, answers about a schedule whose
    /// insertion is still unfinished are added as direct pairs.
    pub fn final_model(&self) -> MonotoneValueModel {
        if self.algorithm != QueryAlgorithm::Obis {
            return self.model.clone();
        }
        let Some(x) = self.pending else {
            return self.model.clone();
        };
        let extra: Vec<(Schedule, Schedule)> = self
            .sorted
            .iter()
            .filter_map(|&y| self.winner(x, y).map(|w| if w == x { (x, y) } else { (y, x) }))
            .collect();
        if extra.is_empty() {
            return self.model.clone();
        }
        let mut data = OrdinalDataset::from_sorted(&self.sorted);
        data.pairs.extend(extra);
        let mut model = self.base_model.clone();
        train_classification(&mut model, &data, &self.cfg);
        model
    }

    fn issue(&mut self, left: Schedule, right: Schedule) -> ComparisonQuery {
        let q = ComparisonQuery {
            id: self.next_id,
            left,
            right,
        };
        self.next_id += 1;
        self.outstanding = Some(q);
        q
    }

    /// Next comparison to show, or `Done` when nothing unqueried remains.
    /// Errors if a query is already outstanding.
    pub fn next_query(&mut self) -> Result<Next> {
        if let Some(q) = self.outstanding {
            return Err(LabError::protocol(format!("query {} is still unanswered", q.id)));
        }
        match self.algorithm {
            QueryAlgorithm::Obis => {
                self.settle();
                let Some(x) = self.pending else {
                    return Ok(Next::Done);
                };
                match search_step(&self.sorted, x, |a, b| self.winner(a, b).map(|w| w == a)) {
                    SearchStep::Ask(y) => Ok(Next::Query(self.issue(x, y))),
                    SearchStep::Insert(_) => unreachable!("settle leaves no insertable schedule"),
                }
            }
            QueryAlgorithm::Naive => match (self.champion, self.pending) {
                (Some(c), Some(x)) => Ok(Next::Query(self.issue(c, x))),
                _ => Ok(Next::Done),
            },
            QueryAlgorithm::Random => {
                let n = self.pool.len();
                let total = n * n.saturating_sub(1) / 2;
                if self.answered.len() >= total {
                    return Ok(Next::Done);
                }
                loop {
                    let a = self.pool[self.rng.random_range(0..n)];
                    let b = self.pool[self.rng.random_range(0..n)];
                    if a != b && !self.answered.contains_key(&key(a, b)) {
                        return Ok(Next::Query(self.issue(a, b)));
                    }
                }
            }
        }
    }

    /// OBIS: while the pending schedule's position is determined by known
    /// answers, insert it, retrain, and pick the next pending schedule.
    fn settle(&mut self) {
        while let Some(x) = self.pending {
            match search_step(&self.sorted, x, |a, b| self.winner(a, b).map(|w| w == a)) {
                SearchStep::Ask(_) => return,
                SearchStep::Insert(pos) => {
                    self.sorted.insert(pos, x);
                    let data = OrdinalDataset::from_sorted(&self.sorted);
                    self.retrain(&data);
                    let exclude: HashSet<Schedule> = self.sorted.iter().copied().collect();
                    self.pending = self.best_excluding(&exclude);
                }
            }
        }
    }

    /// Records the answer to the outstanding query.
    pub fn submit_answer(&mut self, query_id: u64, winner: Schedule) -> Result<()> {
        let Some(q) = self.outstanding else {
            return Err(LabError::protocol(format!("no outstanding query (got answer for {query_id})")));
        };
        if q.id != query_id {
            return Err(LabError::protocol(format!(
                "answer for query {query_id} but query {} is outstanding",
                q.id
            )));
        }
        if winner != q.left && winner != q.right {
            return Err(LabError::protocol("winner is not one of the two compared schedules"));
        }
        let loser = if winner == q.left { q.right } else { q.left };
        self.outstanding = None;
        self.answered.insert(key(q.left, q.right), winner);
        self.n_answered += 1;
        match self.algorithm {
            QueryAlgorithm::Obis => self.settle(),
            QueryAlgorithm::Naive => {
                let champion = self.champion.expect("naive session has a champion");
                let challenger = if q.left == champion { q.right } else { q.left };
                self.queried.insert(challenger);
                if winner == challenger {
                    // the new schedule beats everything shown before
                    for &y in &self.queried {
                        if y != challenger {
                            self.ordinal.pairs.push((challenger, y));
                        }
                    }
                    self.champion = Some(challenger);
                } else {
                    self.ordinal.pairs.push((winner, loser));
                }
                let data = self.ordinal.clone();
                self.retrain(&data);
                self.pending = self.best_excluding(&self.queried.clone());
            }
            QueryAlgorithm::Random => {
                self.ordinal.pairs.push((winner, loser));
                let data = self.ordinal.clone();
                self.retrain(&data);
            }
        }
        Ok(())
    }
}

/// Answer of a simulated student: the schedule with the higher true utility;
/// true ties go to the higher model prediction, then to the smaller bit
/// pattern. The answer is flipped with probability `p_m`.
pub fn simulated_answer<R: Rng>(
    u: &TrueUtility,
    q: &ComparisonQuery,
    model: &MonotoneValueModel,
    p_m: f64,
    rng: &mut R,
) -> Schedule {
    let (ul, ur) = (u.eval(q.left), u.eval(q.right));
    let truthful = if ul != ur {
        if ul > ur {
            q.left
        } else {
            q.right
        }
    } else {
        let (pl, pr) = (model.predict(q.left), model.predict(q.right));
        if pl != pr {
            if pl > pr {
                q.left
            } else {
                q.right
            }
        } else if q.left.bits() < q.right.bits() {
            q.left
        } else {
            q.right
        }
    };
    if p_m > 0.0 && rng.random::<f64>() < p_m {
        if truthful == q.left {
            q.right
        } else {
            q.left
        }
    } else {
        truthful
    }
}

/// Lets a simulated student answer up to `n_queries` queries. Returns the
/// asked queries with their recorded winners.
pub fn simulate_student<R: Rng>(
    s: &mut ElicitationSession,
    u: &TrueUtility,
    p_m: f64,
    n_queries: usize,
    rng: &mut R,
) -> Result<Vec<(ComparisonQuery, Schedule)>> {
    let mut trace = Vec::with_capacity(n_queries);
    for _ in 0..n_queries {
        let q = match s.next_query()? {
            Next::Query(q) => q,
            Next::Done => break,
        };
        let w = simulated_answer(u, &q, s.model(), p_m, rng);
        s.submit_answer(q.id, w)?;
        trace.push((q, w));
    }
    Ok(trace)
}
