//! Courses, schedules and permissibility.
//!
//! A [`Schedule`] is a bit set over the catalog's courses (bit `j` set iff
//! course `j` is taken). Ordering on schedules is the numeric order of the
//! bit pattern; every argmax in the lab breaks ties toward the smallest
//! pattern in this order.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::seq::index::sample;
use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::seed;

/// Largest catalog a [`Schedule`] can represent.
pub const MAX_COURSES: usize = 64;
/// Largest catalog for which schedules can be enumerated exhaustively.
pub const MAX_ENUMERABLE_COURSES: usize = 32;
/// Slack used by every affordability check.
pub const AFFORD_EPS: f64 = 1e-9;

#[derive(Copy, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Schedule(u64);

impl Schedule {
    pub const EMPTY: Schedule = Schedule(0);

    pub const fn from_bits(bits: u64) -> Self {
        Schedule(bits)
    }

    pub const fn bits(self) -> u64 {
        self.0
    }

    pub fn from_courses<I: IntoIterator<Item = usize>>(courses: I) -> Self {
        Schedule(courses.into_iter().fold(0, |acc, j| {
            assert!(j < MAX_COURSES, "course index {j} out of range");
            acc | (1u64 << j)
        }))
    }

    #[inline]
    pub fn contains(self, course: usize) -> bool {
        course < MAX_COURSES && self.0 >> course & 1 == 1
    }

    #[inline]
    pub fn with(self, course: usize) -> Self {
        Schedule(self.0 | 1u64 << course)
    }

    #[inline]
    pub fn without(self, course: usize) -> Self {
        Schedule(self.0 & !(1u64 << course))
    }

    #[inline]
    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    #[inline]
    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    #[inline]
    pub fn intersect(self, other: Schedule) -> Schedule {
        Schedule(self.0 & other.0)
    }

    #[inline]
    pub fn union(self, other: Schedule) -> Schedule {
        Schedule(self.0 | other.0)
    }

    pub fn is_subset_of(self, other: Schedule) -> bool {
        self.0 & !other.0 == 0
    }

    /// Course indices in ascending order.
    pub fn courses(self) -> Courses {
        Courses(self.0)
    }

    /// Highest course index plus one, i.e. the minimum catalog size holding it.
    pub fn span(self) -> usize {
        64 - self.0.leading_zeros() as usize
    }
}

/// Iterator over the courses of a schedule.
#[derive(Clone)]
pub struct Courses(u64);

impl Iterator for Courses {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        if self.0 == 0 {
            return None;
        }
        let j = self.0.trailing_zeros() as usize;
        self.0 &= self.0 - 1;
        Some(j)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.0.count_ones() as usize;
        (n, Some(n))
    }
}

impl ExactSizeIterator for Courses {}

impl fmt::Debug for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.courses()).finish()
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, j) in self.courses().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{j}")?;
        }
        write!(f, "}}")
    }
}

impl Serialize for Schedule {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.courses())
    }
}

impl<'de> Deserialize<'de> for Schedule {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let ids = Vec::<usize>::deserialize(d)?;
        let mut bits = 0u64;
        for j in ids {
            if j >= MAX_COURSES {
                return Err(de::Error::custom(format!("course index {j} out of range")));
            }
            if bits >> j & 1 == 1 {
                return Err(de::Error::custom(format!("course {j} listed twice")));
            }
            bits |= 1 << j;
        }
        Ok(Schedule(bits))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Course {
    pub id: usize,
    pub capacity: u32,
    pub x: i32,
    pub y: i32,
    pub popular: bool,
    #[serde(default)]
    pub slot: Option<u32>,
}

/// Constraints defining a student's permissible schedules.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permissibility {
    pub max_courses: usize,
    #[serde(default)]
    pub ineligible: Schedule,
    /// Slot id to the set of courses meeting in that slot.
    #[serde(default)]
    pub slot_conflicts: BTreeMap<u32, Schedule>,
}

impl Permissibility {
    pub fn with_max_courses(max_courses: usize) -> Self {
        Permissibility {
            max_courses,
            ineligible: Schedule::EMPTY,
            slot_conflicts: BTreeMap::new(),
        }
    }

    pub fn is_permissible(&self, x: Schedule) -> bool {
        x.len() <= self.max_courses
            && x.intersect(self.ineligible).is_empty()
            && self
                .slot_conflicts
                .values()
                .all(|&slot| x.intersect(slot).len() <= 1)
    }
}

/// Free-function form of [`Permissibility::is_permissible`].
pub fn is_permissible(x: Schedule, perm: &Permissibility) -> bool {
    perm.is_permissible(x)
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Upper bound on the number of schedules with at most `k` of `m` courses.
pub fn schedule_count_bound(m: usize, k: usize) -> u128 {
    (0..=k.min(m)).map(|j| binomial(m, j)).sum()
}

/// Lazily enumerates permissible schedules in ascending bit order.
pub struct PermissibleIter<'a> {
    perm: &'a Permissibility,
    next: Option<u64>,
    limit: u64,
}

impl Iterator for PermissibleIter<'_> {
    type Item = Schedule;

    fn next(&mut self) -> Option<Schedule> {
        let k = self.perm.max_courses as u32;
        loop {
            let mut x = self.next?;
            // skip blocks whose popcount already exceeds k: every pattern
            // between x and x + lowbit(x) keeps the high bits of x
            while x < self.limit && x.count_ones() > k {
                x += x & x.wrapping_neg();
            }
            if x >= self.limit {
                self.next = None;
                return None;
            }
            self.next = Some(x + 1);
            let s = Schedule(x);
            if self.perm.is_permissible(s) {
                return Some(s);
            }
        }
    }
}

/// Enumerates every permissible schedule over `m` courses.
pub fn enumerate_permissible(perm: &Permissibility, m: usize) -> Result<PermissibleIter<'_>> {
    if m > MAX_ENUMERABLE_COURSES {
        return Err(LabError::capability(format!(
            "enumeration supports at most {MAX_ENUMERABLE_COURSES} courses, got {m}"
        )));
    }
    if perm.max_courses > m {
        return Err(LabError::validation(format!(
            "max_courses {} exceeds catalog size {m}",
            perm.max_courses
        )));
    }
    Ok(PermissibleIter {
        perm,
        next: Some(0),
        limit: 1u64 << m,
    })
}

/// The materialized set of permissible schedules for one permissibility
/// profile, in ascending bit order. Shared between students with identical
/// constraints.
#[derive(Debug)]
pub struct ScheduleSpace {
    m: usize,
    perm: Permissibility,
    schedules: Vec<Schedule>,
}

impl ScheduleSpace {
    pub fn new(perm: &Permissibility, m: usize) -> Result<Arc<Self>> {
        let schedules: Vec<Schedule> = enumerate_permissible(perm, m)?.collect();
        Ok(Arc::new(ScheduleSpace {
            m,
            perm: perm.clone(),
            schedules,
        }))
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn permissibility(&self) -> &Permissibility {
        &self.perm
    }

    pub fn schedules(&self) -> &[Schedule] {
        &self.schedules
    }

    pub fn len(&self) -> usize {
        self.schedules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.schedules.is_empty()
    }

    /// Highest-valued affordable schedule not rejected by `exclude`.
    /// Ties go to the smallest bit pattern; returns the empty schedule when
    /// nothing qualifies.
    pub fn argmax_affordable<V, E>(&self, prices: &[f64], budget: f64, exclude: E, value: V) -> Schedule
    where
        V: Fn(Schedule) -> f64,
        E: Fn(Schedule) -> bool,
    {
        let mut best: Option<(f64, Schedule)> = None;
        for &x in &self.schedules {
            if !affordable(cost(prices, x), budget) || exclude(x) {
                continue;
            }
            let v = value(x);
            if best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, x));
            }
        }
        best.map_or(Schedule::EMPTY, |(_, x)| x)
    }
}

#[inline]
pub fn cost(prices: &[f64], x: Schedule) -> f64 {
    x.courses().map(|j| prices[j]).sum()
}

#[inline]
pub fn affordable(cost: f64, budget: f64) -> bool {
    cost <= budget + AFFORD_EPS
}

/// Parameters for building a synthetic catalog.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogSpec {
    pub m: usize,
    pub n_students: usize,
    pub max_courses: usize,
    pub supply_ratio: f64,
    pub n_popular: usize,
    pub seed: u64,
}

impl Default for CatalogSpec {
    fn default() -> Self {
        CatalogSpec {
            m: 25,
            n_students: 30,
            max_courses: 5,
            supply_ratio: 1.25,
            n_popular: 9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    courses: Vec<Course>,
    supply_ratio: f64,
    max_courses: usize,
}

#[derive(Serialize, Deserialize)]
struct CatalogFile {
    m: usize,
    supply_ratio: f64,
    #[serde(default = "default_max_courses")]
    max_courses: usize,
    courses: Vec<Course>,
}

fn default_max_courses() -> usize {
    5
}

impl Serialize for Catalog {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        CatalogFile {
            m: self.courses.len(),
            supply_ratio: self.supply_ratio,
            max_courses: self.max_courses,
            courses: self.courses.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Catalog {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let file = CatalogFile::deserialize(d)?;
        if file.m != file.courses.len() {
            return Err(de::Error::custom(format!(
                "m = {} but {} courses listed",
                file.m,
                file.courses.len()
            )));
        }
        Catalog::new(file.courses, file.supply_ratio, file.max_courses).map_err(de::Error::custom)
    }
}

/// Width and height of the smallest near-square grid with at least `m` cells.
pub fn grid_dims(m: usize) -> (usize, usize) {
    let mut width = 1;
    while width * width < m {
        width += 1;
    }
    let height = m.div_ceil(width).max(1);
    (width, height)
}

impl Catalog {
    pub fn new(courses: Vec<Course>, supply_ratio: f64, max_courses: usize) -> Result<Self> {
        if courses.is_empty() || courses.len() > MAX_COURSES {
            return Err(LabError::validation(format!(
                "catalog must hold 1..={MAX_COURSES} courses, got {}",
                courses.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, c) in courses.iter().enumerate() {
            if c.id != i {
                return Err(LabError::validation(format!("course at position {i} has id {}", c.id)));
            }
            if c.capacity == 0 {
                return Err(LabError::validation(format!("course {i} has zero capacity")));
            }
            if !seen.insert((c.x, c.y)) {
                return Err(LabError::validation(format!(
                    "latent position ({}, {}) used twice",
                    c.x, c.y
                )));
            }
        }
        Ok(Catalog {
            courses,
            supply_ratio,
            max_courses,
        })
    }

    /// Builds a grid catalog: row-major latent positions starting at (1,1),
    /// a seeded random popular subset, and `round(sr * n * k)` seats split
    /// as evenly as possible (earlier courses take the remainder).
    pub fn build(spec: &CatalogSpec) -> Result<Self> {
        if spec.m == 0 || spec.m > MAX_COURSES {
            return Err(LabError::validation(format!("m must be in 1..={MAX_COURSES}")));
        }
        if spec.n_popular > spec.m {
            return Err(LabError::validation("more popular courses than courses"));
        }
        if !(spec.supply_ratio > 0.0) {
            return Err(LabError::validation("supply ratio must be positive"));
        }
        let (width, _) = grid_dims(spec.m);
        let total = (spec.supply_ratio * (spec.n_students * spec.max_courses) as f64).round() as usize;
        let total = total.max(spec.m);
        let (per, extra) = (total / spec.m, total % spec.m);
        let mut rng = seed::rng_tagged(spec.seed, "catalog.popular", &[]);
        let popular: std::collections::BTreeSet<usize> =
            sample(&mut rng, spec.m, spec.n_popular).into_iter().collect();
        let courses = (0..spec.m)
            .map(|id| Course {
                id,
                capacity: (per + usize::from(id < extra)) as u32,
                x: (id % width) as i32 + 1,
                y: (id / width) as i32 + 1,
                popular: popular.contains(&id),
                slot: None,
            })
            .collect();
        Catalog::new(courses, spec.supply_ratio, spec.max_courses)
    }

    pub fn m(&self) -> usize {
        self.courses.len()
    }

    pub fn courses(&self) -> &[Course] {
        &self.courses
    }

    pub fn course(&self, j: usize) -> &Course {
        &self.courses[j]
    }

    pub fn supply_ratio(&self) -> f64 {
        self.supply_ratio
    }

    pub fn max_courses(&self) -> usize {
        self.max_courses
    }

    pub fn capacities(&self) -> Vec<u32> {
        self.courses.iter().map(|c| c.capacity).collect()
    }

    pub fn total_seats(&self) -> u64 {
        self.courses.iter().map(|c| c.capacity as u64).sum()
    }

    pub fn popular(&self) -> Vec<usize> {
        self.courses.iter().filter(|c| c.popular).map(|c| c.id).collect()
    }

    /// Slot table derived from the courses' `slot` fields.
    pub fn slot_conflicts(&self) -> BTreeMap<u32, Schedule> {
        let mut slots: BTreeMap<u32, Schedule> = BTreeMap::new();
        for c in &self.courses {
            if let Some(h) = c.slot {
                let e = slots.entry(h).or_default();
                *e = e.with(c.id);
            }
        }
        slots.retain(|_, s| s.len() > 1);
        slots
    }

    /// Default permissibility for a student: the catalog's schedule size cap
    /// and its slot conflicts, no ineligible courses.
    pub fn default_permissibility(&self) -> Permissibility {
        Permissibility {
            max_courses: self.max_courses,
            ineligible: Schedule::EMPTY,
            slot_conflicts: self.slot_conflicts(),
        }
    }

    pub fn l1(&self, a: usize, b: usize) -> i32 {
        let (p, q) = (&self.courses[a], &self.courses[b]);
        (p.x - q.x).abs() + (p.y - q.y).abs()
    }

    pub fn linf(&self, a: usize, b: usize) -> i32 {
        let (p, q) = (&self.courses[a], &self.courses[b]);
        (p.x - q.x).abs().max((p.y - q.y).abs())
    }
}
