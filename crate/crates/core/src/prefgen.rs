//! Synthetic true utilities on a latent course grid.
//!
//! Each student draws base values (high for a handful of favorite courses
//! picked from the popular set, low elsewhere) and a few synergy centers among
//! her favorites. Around each center, courses at L1 distance `r_s` form a
//! substitute set and the remaining courses within L∞ distance `r_c` (plus the
//! center) form a complement set. Step tables ψ and ξ scale the whole set's
//! base value by the number of set members in the schedule.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Permissibility, Schedule, ScheduleSpace};
use crate::error::{LabError, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_popular: usize,
    pub n_favorites: usize,
    pub n_centers: usize,
    pub r_s: i32,
    pub r_c: i32,
    pub l_p: f64,
    pub u_p: f64,
    pub l_np: f64,
    pub u_np: f64,
    /// Upper end of each ψ increment, drawn from U(0, psi_step).
    pub psi_step: f64,
    /// Upper end of each ξ decrement, drawn from U(0, xi_step).
    pub xi_step: f64,
    /// Smallest number of set members at which ψ starts to grow (at least 2).
    pub psi_from: usize,
    /// Smallest number of set members at which ξ starts to fall (at least 2).
    pub xi_from: usize,
    pub additive_mode: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_popular: 9,
            n_favorites: 7,
            n_centers: 1,
            r_s: 1,
            r_c: 1,
            l_p: 45.0,
            u_p: 100.0,
            l_np: 0.0,
            u_np: 20.0,
            psi_step: 0.2,
            xi_step: 0.05,
            psi_from: 2,
            xi_from: 3,
            additive_mode: false,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// Default knobs for a catalog with `n_popular` popular courses.
    pub fn for_popular(n_popular: usize) -> Self {
        let d = GeneratorConfig::default();
        GeneratorConfig {
            n_popular,
            n_favorites: d.n_favorites.min(n_popular),
            n_centers: d.n_centers.min(n_popular),
            ..d
        }
    }

    pub fn validate(&self, catalog: &Catalog) -> Result<()> {
        let n_pop = catalog.popular().len();
        if self.n_popular != n_pop {
            return Err(LabError::validation(format!(
                "config expects {} popular courses, catalog has {n_pop}",
                self.n_popular
            )));
        }
        if !(self.n_centers <= self.n_favorites && self.n_favorites <= self.n_popular) {
            return Err(LabError::validation(
                "need n_centers <= n_favorites <= n_popular",
            ));
        }
        if self.n_popular > catalog.m() {
            return Err(LabError::validation("more popular courses than courses"));
        }
        if self.r_s < 1 || self.r_c < 1 {
            return Err(LabError::validation("radii must be positive"));
        }
        let ranges_ok = 0.0 <= self.l_np
            && self.l_np <= self.u_np
            && self.l_p <= self.u_p
            && self.l_np <= self.l_p
            && self.u_np <= self.u_p;
        if !ranges_ok {
            return Err(LabError::validation("inconsistent base value ranges"));
        }
        if self.psi_from < 2 || self.xi_from < 2 {
            return Err(LabError::validation("synergy needs at least two set members"));
        }
        if self.psi_step < 0.0 || self.xi_step < 0.0 {
            return Err(LabError::validation("synergy steps must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynergyCenter {
    pub c: usize,
    /// Substitute set.
    #[serde(rename = "S")]
    pub subs: Schedule,
    /// Complement set.
    #[serde(rename = "C")]
    pub comps: Schedule,
    /// ψ(0..=|C|), nondecreasing, ψ(0) = ψ(1) = 0.
    pub psi: Vec<f64>,
    /// ξ(0..=|S|), nonincreasing, ξ(0) = ξ(1) = 0.
    pub xi: Vec<f64>,
}

impl SynergyCenter {
    /// Builds the substitute and complement sets of `c` with empty tables.
    pub fn around(catalog: &Catalog, c: usize, r_s: i32, r_c: i32) -> SynergyCenter {
        let mut subs = Schedule::EMPTY;
        let mut comps = Schedule::EMPTY;
        for j in 0..catalog.m() {
            if catalog.l1(j, c) <= r_s {
                subs = subs.with(j);
            } else if catalog.linf(j, c) <= r_c {
                comps = comps.with(j);
            }
        }
        comps = comps.with(c);
        SynergyCenter {
            c,
            subs,
            comps,
            psi: vec![0.0; comps.len() + 1],
            xi: vec![0.0; subs.len() + 1],
        }
    }

    fn check(&self) -> Result<()> {
        let ok = self.psi.len() == self.comps.len() + 1
            && self.xi.len() == self.subs.len() + 1
            && self.subs.contains(self.c)
            && self.comps.contains(self.c)
            && self.psi.iter().take(2).all(|&v| v == 0.0)
            && self.xi.iter().take(2).all(|&v| v == 0.0)
            && self.psi.windows(2).all(|w| w[0] <= w[1])
            && self.xi.windows(2).all(|w| w[0] >= w[1]);
        if ok {
            Ok(())
        } else {
            Err(LabError::validation(format!("malformed synergy center {}", self.c)))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueUtility {
    pub base: Vec<f64>,
    pub centers: Vec<SynergyCenter>,
    pub perm: Permissibility,
    #[serde(default)]
    pub favorites: Vec<usize>,
}

impl TrueUtility {
    pub fn additive(base: Vec<f64>, perm: Permissibility) -> Self {
        TrueUtility {
            base,
            centers: Vec::new(),
            perm,
            favorites: Vec::new(),
        }
    }

    pub fn m(&self) -> usize {
        self.base.len()
    }

    /// Utility of `x`. Terms are accumulated complements first, then
    /// substitutes, then base values, each set in ascending course order.
    pub fn eval(&self, x: Schedule) -> f64 {
        let mut total = 0.0;
        for c in &self.centers {
            let f = c.psi[x.intersect(c.comps).len()];
            for j in c.comps.courses() {
                total += f * self.base[j];
            }
        }
        for c in &self.centers {
            let f = c.xi[x.intersect(c.subs).len()];
            for j in c.subs.courses() {
                total += f * self.base[j];
            }
        }
        for j in x.courses() {
            total += self.base[j];
        }
        total
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if self.base.len() != m {
            return Err(LabError::validation("base vector length mismatch"));
        }
        if self.base.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(LabError::validation("base values must be finite and nonnegative"));
        }
        let all = Schedule::from_bits(if m == 64 { u64::MAX } else { (1u64 << m) - 1 });
        for c in &self.centers {
            c.check()?;
            if !c.subs.union(c.comps).is_subset_of(all) {
                return Err(LabError::validation("synergy set outside catalog"));
            }
        }
        Ok(())
    }
}

pub fn eval_true(u: &TrueUtility, x: Schedule) -> f64 {
    u.eval(x)
}

/// Best affordable schedule in `space` under `u`, skipping `exclude`.
pub fn argmax_true(
    u: &TrueUtility,
    space: &ScheduleSpace,
    prices: &[f64],
    budget: f64,
    exclude: &HashSet<Schedule>,
) -> Schedule {
    space.argmax_affordable(prices, budget, |x| exclude.contains(&x), |x| u.eval(x))
}

/// Draws `n` students. Student `i` uses the stream derived from
/// `(cfg.seed, i)`, so prefixes of a larger cohort are stable.
pub fn generate_instance(cfg: &GeneratorConfig, catalog: &Catalog, n: usize) -> Result<Vec<TrueUtility>> {
    cfg.validate(catalog)?;
    let popular = catalog.popular();
    let m = catalog.m();
    let perm = catalog.default_permissibility();
    let mut students = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = seed::rng_tagged(cfg.seed, "prefgen.student", &[i as u64]);
        let mut favorites: Vec<usize> = sample(&mut rng, popular.len(), cfg.n_favorites)
            .into_iter()
            .map(|k| popular[k])
            .collect();
        favorites.sort_unstable();
        let base: Vec<f64> = (0..m)
            .map(|j| {
                let (lo, hi) = if favorites.contains(&j) {
                    (cfg.l_p, cfg.u_p)
                } else {
                    (cfg.l_np, cfg.u_np)
                };
                uniform(&mut rng, lo, hi)
            })
            .collect();
        let mut centers = Vec::new();
        if !cfg.additive_mode {
            let mut picks: Vec<usize> = sample(&mut rng, favorites.len(), cfg.n_centers)
                .into_iter()
                .map(|k| favorites[k])
                .collect();
            picks.sort_unstable();
            for c in picks {
                let mut center = SynergyCenter::around(catalog, c, cfg.r_s, cfg.r_c);
                for t in 2..center.psi.len() {
                    let step = uniform(&mut rng, 0.0, cfg.psi_step);
                    center.psi[t] = center.psi[t - 1] + if t >= cfg.psi_from { step } else { 0.0 };
                }
                for t in 2..center.xi.len() {
                    let step = uniform(&mut rng, 0.0, cfg.xi_step);
                    center.xi[t] = center.xi[t - 1] - if t >= cfg.xi_from { step } else { 0.0 };
                }
                centers.push(center);
            }
        }
        students.push(TrueUtility {
            base,
            centers,
            perm: perm.clone(),
            favorites,
        });
    }
    Ok(students)
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// A catalog together with its students' true utilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub catalog: Catalog,
    pub generator: Option<GeneratorConfig>,
    pub students: Vec<TrueUtility>,
}

impl Instance {
    pub fn generate(catalog: Catalog, cfg: &GeneratorConfig, n: usize) -> Result<Self> {
        let students = generate_instance(cfg, &catalog, n)?;
        Ok(Instance {
            catalog,
            generator: Some(cfg.clone()),
            students,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.catalog.m();
        for (i, s) in self.students.iter().enumerate() {
            s.validate(m)
                .map_err(|e| e.in_context(format!("student {i}")))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let inst: Instance = serde_json::from_str(s)?;
        inst.validate()?;
        Ok(inst)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Brute-force evaluation of the single-student integer program.
///
/// For a fixed schedule `x`, every assignment of the indicator variables
/// `G[c][j][τ]` (complements) and `J[c][j][τ]` (substitutes) that satisfies
///
/// - `Σ_τ τ·G[c][j][τ] ≤ |x ∩ C_c|` and `Σ_τ G[c][j][τ] ≤ 1`,
/// - `Σ_τ τ·J[c][j][τ] ≥ |x ∩ S_c|` and `Σ_τ J[c][j][τ] ≤ 1`,
///
/// for `τ ∈ 1..=k` is enumerated and the objective maximized. Constraints
/// never couple the indicators of two different (center, course) pairs, so
/// each pair's `k + 1` options are enumerated on their own.
pub mod mip {
    use super::TrueUtility;
    use crate::catalog::Schedule;

    /// Maximizing choice of τ (0 = no indicator set) for every member of
    /// one set. Each member's indicators form their own constraint block.
    fn best_block(members: &[usize], count: usize, k: usize, table: &[f64], base: &[f64], lower: bool) -> Vec<usize> {
        let step = |t: usize| table[t.min(table.len() - 1)];
        members
            .iter()
            .map(|&j| {
                let mut best: Option<(f64, usize)> = None;
                for t in 0..=k {
                    let feasible = if lower { t >= count } else { t <= count };
                    if !feasible {
                        continue;
                    }
                    let value = if t == 0 { 0.0 } else { step(t) * base[j] };
                    if best.is_none_or(|(bv, _)| value > bv) {
                        best = Some((value, t));
                    }
                }
                best.expect("τ = |x ∩ set| is always feasible").1
            })
            .collect()
    }

    /// Maximum objective over feasible indicator assignments for fixed `x`,
    /// accumulated in the same term order as [`TrueUtility::eval`].
    pub fn objective(u: &TrueUtility, x: Schedule, k: usize) -> f64 {
        let mut total = 0.0;
        for c in &u.centers {
            let members: Vec<usize> = c.comps.courses().collect();
            let count = x.intersect(c.comps).len();
            let pick = best_block(&members, count, k, &c.psi, &u.base, false);
            for (&j, &t) in members.iter().zip(&pick) {
                total += if t == 0 { 0.0 } else { c.psi[t.min(c.psi.len() - 1)] } * u.base[j];
            }
        }
        for c in &u.centers {
            let members: Vec<usize> = c.subs.courses().collect();
            let count = x.intersect(c.subs).len();
            let pick = best_block(&members, count, k, &c.xi, &u.base, true);
            for (&j, &t) in members.iter().zip(&pick) {
                total += if t == 0 { 0.0 } else { c.xi[t.min(c.xi.len() - 1)] } * u.base[j];
            }
        }
        for j in x.courses() {
            total += u.base[j];
        }
        total
    }
}
