//! Batch experiments: mechanism comparisons on shared instances, report
//! calibration, the opt-in study, the query-algorithm study and small-scale
//! fairness audits.
//!
//! Utilities reported here always come from the students' true utility
//! functions. Averages are normalized by the batch mean of CM*'s average
//! utility.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, CatalogSpec, Permissibility, Schedule, ScheduleSpace};
use crate::elicitation::{simulated_answer, ElicitationSession, Next, QueryAlgorithm};
use crate::error::{LabError, Result};
use crate::market::{self, Valuer};
use crate::mechanism::{
    initial_models, run_mechanism, Market, MechanismConfig, MechanismKind, PriceNoise, PriceSource, RunResult,
};
use crate::prefgen::{generate_instance, GeneratorConfig, Instance};
use crate::reporting::{calibration_metrics, report, CalibrationReport, MistakeProfile, ProbeConfig};
use crate::seed;

/// Mean with a normal-approximation 95% confidence half-width.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub ci95: f64,
    pub n: usize,
}

pub fn summarize(xs: &[f64]) -> Summary {
    let n = xs.len();
    if n == 0 {
        return Summary::default();
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let ci95 = if n > 1 {
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        1.96 * (var / n as f64).sqrt()
    } else {
        0.0
    };
    Summary { mean, ci95, n }
}

/// Economy parameters shared by every cell of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub m: usize,
    pub n_students: usize,
    pub max_courses: usize,
    pub supply_ratio: f64,
    pub n_popular: usize,
    pub gamma: f64,
    pub p_m: f64,
    pub additive: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            m: 25,
            n_students: 30,
            max_courses: 5,
            supply_ratio: 1.25,
            n_popular: 9,
            gamma: 1.0,
            p_m: 0.0,
            additive: false,
        }
    }
}

impl Scenario {
    pub fn mistakes(&self) -> MistakeProfile {
        MistakeProfile::calibrated(self.n_popular)
            .with_gamma(self.gamma)
            .with_p_m(self.p_m)
    }

    /// The `index`-th instance of a batch; identical for every cell.
    pub fn instance(&self, base_seed: u64, index: usize) -> Result<Instance> {
        let s = seed::derive(base_seed, &[index as u64]);
        let catalog = Catalog::build(&CatalogSpec {
            m: self.m,
            n_students: self.n_students,
            max_courses: self.max_courses,
            supply_ratio: self.supply_ratio,
            n_popular: self.n_popular,
            seed: s,
        })?;
        let cfg = GeneratorConfig {
            additive_mode: self.additive,
            seed: s,
            ..GeneratorConfig::for_popular(self.n_popular)
        };
        Instance::generate(catalog, &cfg, self.n_students)
    }

    pub fn market(&self, base_seed: u64, index: usize) -> Result<Market> {
        let instance = self.instance(base_seed, index)?;
        Market::prepare(instance, self.mistakes(), seed::derive(base_seed, &[index as u64, 1]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub label: String,
    pub config: MechanismConfig,
}

impl Cell {
    pub fn new(label: impl Into<String>, config: MechanismConfig) -> Self {
        Cell {
            label: label.into(),
            config,
        }
    }

    pub fn mechanism(kind: MechanismKind) -> Self {
        Cell::new(kind.label(), MechanismConfig::new(kind))
    }

    pub fn mlcm(kind: MechanismKind, n_queries: usize, algorithm: QueryAlgorithm) -> Self {
        Cell::new(
            format!("{} ({} {})", kind.label(), n_queries, algorithm),
            MechanismConfig {
                kind,
                n_queries,
                query_algorithm: algorithm,
                ..MechanismConfig::default()
            },
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub scenario: Scenario,
    pub cells: Vec<Cell>,
    pub n_instances: usize,
    pub seed: u64,
    /// Record wall-clock times (makes output nondeterministic).
    pub timing: bool,
    /// When set, ML cells with fresh Phase-3 prices ask their queries at a
    /// perturbed copy of those prices instead.
    #[serde(default)]
    pub price_noise: Option<PriceNoise>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_instances == 0 {
            return Err(LabError::validation("n_instances must be at least 1"));
        }
        if self.cells.is_empty() {
            return Err(LabError::validation("no mechanisms to run"));
        }
        Ok(())
    }
}

/// Aggregated results of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub label: String,
    pub supply_ratio: f64,
    pub n_popular: usize,
    pub gamma: f64,
    pub p_m: f64,
    pub runs: usize,
    pub failures: usize,
    pub avg_utility_pct: f64,
    pub avg_utility_ci95: f64,
    pub min_utility_pct: f64,
    pub min_utility_ci95: f64,
    pub stage1_cleared_pct: f64,
    pub wall_time_s: Option<f64>,
}

/// One mechanism run on one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRow {
    pub instance: usize,
    pub label: String,
    pub supply_ratio: f64,
    pub n_popular: usize,
    pub gamma: f64,
    pub p_m: f64,
    pub avg_utility: Option<f64>,
    pub min_utility: Option<f64>,
    pub avg_utility_pct: Option<f64>,
    pub min_utility_pct: Option<f64>,
    pub stage1_alpha: Option<f64>,
    pub stage1_cleared: Option<bool>,
    pub error: Option<String>,
    pub wall_time_s: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub normalizer: f64,
    pub rows: Vec<MetricsRow>,
    pub raw: Vec<RawRow>,
}

impl ExperimentResult {
    pub fn row(&self, label: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn extend(&mut self, other: ExperimentResult) {
        self.rows.extend(other.rows);
        self.raw.extend(other.raw);
    }
}

/// Runs every cell on the same instances. A failing run is recorded and the
/// batch continues.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    run_experiment_with(spec, |_, _| {})
}

/// As [`run_experiment`], calling `progress(instance, label)` after each run.
pub fn run_experiment_with<F: FnMut(usize, &str)>(spec: &ExperimentSpec, mut progress: F) -> Result<ExperimentResult> {
    spec.validate()?;
    let sc = &spec.scenario;
    let mut cells = spec.cells.clone();
    let reference = cells.iter().position(|c| c.config.kind == MechanismKind::CmStar);
    let hidden_reference = reference.is_none();
    if hidden_reference {
        cells.push(Cell::mechanism(MechanismKind::CmStar));
    }
    let ref_idx = reference.unwrap_or(cells.len() - 1);

    let mut results: Vec<Vec<(usize, std::result::Result<RunResult, String>, f64)>> = vec![Vec::new(); cells.len()];
    for i in 0..spec.n_instances {
        let market = sc.market(spec.seed, i).map_err(|e| e.in_context(format!("instance {i}")))?;
        for (c, cell) in cells.iter().enumerate() {
            let mut cfg = MechanismConfig {
                seed: seed::derive(spec.seed, &[i as u64, 2]),
                ..cell.config.clone()
            };
            let t = Instant::now();
            let r = with_price_noise(&market, &mut cfg, spec.price_noise)
                .and_then(|()| run_mechanism(&market, &cfg))
                .map_err(|e| e.to_string());
            results[c].push((i, r, t.elapsed().as_secs_f64()));
            progress(i, &cell.label);
        }
    }

    let ref_avgs: Vec<f64> = results[ref_idx]
        .iter()
        .filter_map(|(_, r, _)| r.as_ref().ok().map(RunResult::mean_utility))
        .collect();
    let normalizer = summarize(&ref_avgs).mean;
    if !(normalizer > 0.0) {
        return Err(LabError::validation("CM* reference produced no positive average utility"));
    }
    let pct = |v: f64| 100.0 * v / normalizer;

    let mut out = ExperimentResult {
        normalizer,
        ..ExperimentResult::default()
    };
    for (c, cell) in cells.iter().enumerate() {
        if hidden_reference && c == ref_idx {
            continue;
        }
        let mut avgs = Vec::new();
        let mut mins = Vec::new();
        let mut cleared = Vec::new();
        let mut time = 0.0;
        let mut failures = 0;
        for (i, r, secs) in &results[c] {
            time += secs;
            let wall = spec.timing.then_some(*secs);
            let base = RawRow {
                instance: *i,
                label: cell.label.clone(),
                supply_ratio: sc.supply_ratio,
                n_popular: sc.n_popular,
                gamma: sc.gamma,
                p_m: sc.p_m,
                avg_utility: None,
                min_utility: None,
                avg_utility_pct: None,
                min_utility_pct: None,
                stage1_alpha: None,
                stage1_cleared: None,
                error: None,
                wall_time_s: wall,
            };
            match r {
                Ok(r) => {
                    let (a, m) = (r.mean_utility(), r.min_utility());
                    avgs.push(pct(a));
                    mins.push(pct(m));
                    let clears = r.stage1_alpha.zip(r.stage1_target).map(|(a, t)| a <= t);
                    if let Some(c) = clears {
                        cleared.push(if c { 100.0 } else { 0.0 });
                    }
                    out.raw.push(RawRow {
                        avg_utility: Some(a),
                        min_utility: Some(m),
                        avg_utility_pct: Some(pct(a)),
                        min_utility_pct: Some(pct(m)),
                        stage1_alpha: r.stage1_alpha,
                        stage1_cleared: clears,
                        ..base
                    });
                }
                Err(e) => {
                    failures += 1;
                    out.raw.push(RawRow {
                        error: Some(e.clone()),
                        ..base
                    });
                }
            }
        }
        let (a, m) = (summarize(&avgs), summarize(&mins));
        out.rows.push(MetricsRow {
            label: cell.label.clone(),
            supply_ratio: sc.supply_ratio,
            n_popular: sc.n_popular,
            gamma: sc.gamma,
            p_m: sc.p_m,
            runs: avgs.len(),
            failures,
            avg_utility_pct: a.mean,
            avg_utility_ci95: a.ci95,
            min_utility_pct: m.mean,
            min_utility_ci95: m.ci95,
            stage1_cleared_pct: summarize(&cleared).mean,
            wall_time_s: spec.timing.then_some(time),
        });
    }
    Ok(out)
}

fn with_price_noise(market: &Market, cfg: &mut MechanismConfig, noise: Option<PriceNoise>) -> Result<()> {
    let Some(noise) = noise else { return Ok(()) };
    if !cfg.kind.is_ml() || cfg.price_source != PriceSource::Fresh || cfg.n_queries == 0 {
        return Ok(());
    }
    let valuers = initial_models(market, cfg)?
        .iter()
        .zip(&market.reports)
        .map(|(m, r)| match m {
            Some(m) => Valuer::from_fn(&market.space, |x| m.predict(x)),
            None => Valuer::from_fn(&market.space, |x| r.eval(x)),
        })
        .collect();
    let prices = stage1_on(market, valuers, cfg)?;
    cfg.price_source = PriceSource::Perturbed { prices, noise };
    Ok(())
}

/// Writes rows as CSV with a header.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `metrics.csv` and `raw.csv` into `dir`.
pub fn write_experiment(dir: &Path, result: &ExperimentResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_csv(&dir.join("metrics.csv"), &result.rows)?;
    write_csv(&dir.join("raw.csv"), &result.raw)?;
    Ok(())
}

/// Writes pretty JSON followed by a newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OptInMode {
    NobodyElse,
    EverybodyElse,
}

impl std::str::FromStr for OptInMode {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "nobodyelse" | "nobody" => Ok(OptInMode::NobodyElse),
            "everybodyelse" | "everybody" => Ok(OptInMode::EverybodyElse),
            _ => Err(LabError::validation(format!("unknown opt-in mode {s:?}"))),
        }
    }
}

/// One focal student's comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptInRecord {
    pub instance: usize,
    pub student: usize,
    pub utility_cm: f64,
    pub utility_mlcm: f64,
    /// `(u_mlcm − u_cm) / max(u_cm, 1)` in percent.
    pub gain_pct: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptInSummary {
    pub students: usize,
    pub prefer_mlcm_pct: f64,
    pub prefer_cm_pct: f64,
    pub indifferent_pct: f64,
    pub expected_gain_pct: f64,
    pub gain_if_prefer_mlcm_pct: f64,
    pub gain_if_prefer_cm_pct: f64,
}

impl OptInSummary {
    pub fn from_records(records: &[OptInRecord]) -> Self {
        let n = records.len();
        if n == 0 {
            return OptInSummary::default();
        }
        let ml: Vec<f64> = records
            .iter()
            .filter(|r| r.utility_mlcm > r.utility_cm)
            .map(|r| r.gain_pct)
            .collect();
        let cm: Vec<f64> = records
            .iter()
            .filter(|r| r.utility_mlcm < r.utility_cm)
            .map(|r| r.gain_pct)
            .collect();
        let share = |k: usize| 100.0 * k as f64 / n as f64;
        OptInSummary {
            students: n,
            prefer_mlcm_pct: share(ml.len()),
            prefer_cm_pct: share(cm.len()),
            indifferent_pct: share(n - ml.len() - cm.len()),
            expected_gain_pct: records.iter().map(|r| r.gain_pct).sum::<f64>() / n as f64,
            gain_if_prefer_mlcm_pct: summarize(&ml).mean,
            gain_if_prefer_cm_pct: summarize(&cm).mean,
        }
    }
}

/// Expected gain of a single student opting into the ML feature.
///
/// The focal student is treated as a price taker: one price vector per
/// instance is computed with the focal student opted out (with
/// `NobodyElse`, CM's Stage-1 prices on the reports; with `EverybodyElse`,
/// Stage-1 prices on everyone's post-query models). Her CM schedule is
/// her report's demand at those prices, her MLCM schedule her final model's
/// demand after `n_queries` comparisons asked at the same prices. With zero
/// queries the two coincide.
pub fn opt_in_study(
    scenario: &Scenario,
    n_instances: usize,
    n_queries: usize,
    algorithm: QueryAlgorithm,
    mode: OptInMode,
    base_seed: u64,
) -> Result<Vec<OptInRecord>> {
    let mut records = Vec::new();
    for inst in 0..n_instances {
        let market = scenario.market(base_seed, inst)?;
        let cfg = MechanismConfig {
            kind: MechanismKind::Mlcm,
            n_queries,
            query_algorithm: algorithm,
            seed: seed::derive(base_seed, &[inst as u64, 2]),
            ..MechanismConfig::default()
        };
        let gui: Vec<Valuer> = market
            .reports
            .iter()
            .map(|r| Valuer::from_fn(&market.space, |x| r.eval(x)))
            .collect();
        let cm_prices = stage1_on(&market, gui.clone(), &cfg)?;
        let models = initial_models(&market, &cfg)?;
        let final_models = |prices: &[f64]| -> Result<Vec<_>> {
            models
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    let m = m.clone().expect("everyone is opted in");
                    if n_queries == 0 {
                        return Ok(m);
                    }
                    let mut s = ElicitationSession::new(
                        algorithm,
                        m,
                        market.space.clone(),
                        prices.to_vec(),
                        market.budgets[i],
                        cfg.train.clone(),
                        seed::derive(cfg.seed, &[5, i as u64]),
                    )?;
                    let mut rng = seed::rng_tagged(cfg.seed, "mechanism.answers", &[i as u64]);
                    crate::elicitation::simulate_student(&mut s, &market.students()[i], market.mistakes.p_m, n_queries, &mut rng)?;
                    Ok(s.final_model())
                })
                .collect()
        };
        let prices = match mode {
            OptInMode::NobodyElse => cm_prices,
            OptInMode::EverybodyElse => {
                let phase3 = stage1_on(
                    &market,
                    models
                        .iter()
                        .map(|m| {
                            let m = m.as_ref().expect("everyone is opted in");
                            Valuer::from_fn(&market.space, |x| m.predict(x))
                        })
                        .collect(),
                    &cfg,
                )?;
                let finals = final_models(&phase3)?;
                stage1_on(
                    &market,
                    finals.iter().map(|m| Valuer::from_fn(&market.space, |x| m.predict(x))).collect(),
                    &cfg,
                )?
            }
        };
        let finals = final_models(&prices)?;
        for (i, u) in market.students().iter().enumerate() {
            let b = market.budgets[i];
            let x_cm = gui[i].demand(&prices, b);
            let x_ml = if n_queries == 0 {
                x_cm
            } else {
                Valuer::from_fn(&market.space, |x| finals[i].predict(x)).demand(&prices, b)
            };
            let (u_cm, u_ml) = (u.eval(x_cm), u.eval(x_ml));
            records.push(OptInRecord {
                instance: inst,
                student: i,
                utility_cm: u_cm,
                utility_mlcm: u_ml,
                gain_pct: 100.0 * (u_ml - u_cm) / u_cm.max(1.0),
            });
        }
    }
    Ok(records)
}

fn stage1_on(market: &Market, valuers: Vec<Valuer>, cfg: &MechanismConfig) -> Result<Vec<f64>> {
    Ok(crate::mechanism::stage1_prices(market, valuers, &cfg.stage1)?.prices)
}

/// One answered query in the query-algorithm study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub instance: usize,
    pub student: usize,
    pub algorithm: QueryAlgorithm,
    pub query: usize,
    /// Inferred ordinal pairs after the answer.
    pub ordinal_size: usize,
    /// The model before the answer ranked the winner at least as high.
    pub agrees: bool,
}

/// Per-query-index averages of one algorithm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryCurvePoint {
    pub algorithm: QueryAlgorithm,
    pub query: usize,
    pub students: usize,
    pub mean_ordinal_size: f64,
    pub agreement_pct: f64,
}

/// Ordinal-dataset growth and model/answer agreement per query index for each
/// algorithm, on the same students and prices. Queries are asked at the
/// Stage-1 prices of the initial models. A query whose two schedules the
/// model values equally counts as agreement.
pub fn query_algorithm_study(
    scenario: &Scenario,
    n_instances: usize,
    n_queries: usize,
    algorithms: &[QueryAlgorithm],
    base_seed: u64,
) -> Result<Vec<QueryCurvePoint>> {
    let records = query_records(scenario, n_instances, n_queries, algorithms, base_seed)?;
    Ok(query_curves(&records, algorithms))
}

/// The per-answer records behind [`query_algorithm_study`].
pub fn query_records(
    scenario: &Scenario,
    n_instances: usize,
    n_queries: usize,
    algorithms: &[QueryAlgorithm],
    base_seed: u64,
) -> Result<Vec<QueryRecord>> {
    let mut records = Vec::new();
    for inst in 0..n_instances {
        let market = scenario.market(base_seed, inst)?;
        let cfg = MechanismConfig {
            kind: MechanismKind::Mlcm,
            seed: seed::derive(base_seed, &[inst as u64, 2]),
            ..MechanismConfig::default()
        };
        let models = initial_models(&market, &cfg)?;
        let valuers = models
            .iter()
            .map(|m| {
                let m = m.as_ref().expect("everyone is opted in");
                Valuer::from_fn(&market.space, |x| m.predict(x))
            })
            .collect();
        let prices = stage1_on(&market, valuers, &cfg)?;
        for &alg in algorithms {
            for (i, m) in models.iter().enumerate() {
                let mut s = ElicitationSession::new(
                    alg,
                    m.clone().expect("everyone is opted in"),
                    market.space.clone(),
                    prices.clone(),
                    market.budgets[i],
                    cfg.train.clone(),
                    seed::derive(cfg.seed, &[5, i as u64]),
                )?;
                let mut rng = seed::rng_tagged(cfg.seed, "mechanism.answers", &[i as u64]);
                for q in 1..=n_queries {
                    let query = match s.next_query()? {
                        Next::Query(query) => query,
                        Next::Done => break,
                    };
                    let (pl, pr) = (s.model().predict(query.left), s.model().predict(query.right));
                    let w = simulated_answer(&market.students()[i], &query, s.model(), market.mistakes.p_m, &mut rng);
                    let agrees = pl == pr || (pl > pr) == (w == query.left);
                    s.submit_answer(query.id, w)?;
                    records.push(QueryRecord {
                        instance: inst,
                        student: i,
                        algorithm: alg,
                        query: q,
                        ordinal_size: s.inferred_pairs(),
                        agrees,
                    });
                }
            }
        }
    }
    Ok(records)
}

/// Averages records per algorithm and query index, in the order of
/// `algorithms`.
pub fn query_curves(records: &[QueryRecord], algorithms: &[QueryAlgorithm]) -> Vec<QueryCurvePoint> {
    let mut sums: BTreeMap<(usize, usize), (usize, f64, f64)> = BTreeMap::new();
    for r in records {
        let Some(ai) = algorithms.iter().position(|&a| a == r.algorithm) else {
            continue;
        };
        let e = sums.entry((ai, r.query)).or_insert((0, 0.0, 0.0));
        e.0 += 1;
        e.1 += r.ordinal_size as f64;
        e.2 += f64::from(u8::from(r.agrees));
    }
    sums.into_iter()
        .map(|((ai, q), (n, size, agree))| QueryCurvePoint {
            algorithm: algorithms[ai],
            query: q,
            students: n,
            mean_ordinal_size: size / n as f64,
            agreement_pct: 100.0 * agree / n as f64,
        })
        .collect()
}

/// Per-student reporting statistics of a calibration run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub instance: usize,
    pub student: usize,
    pub reported: usize,
    pub low: usize,
    pub high: usize,
    pub adjustments: usize,
}

/// Generates `n_instances` default catalogs of `per_instance` students each,
/// simulates their reports under the calibrated mistake profile and compares
/// reports with true preferences.
pub fn calibration_study(
    n_popular: usize,
    n_instances: usize,
    per_instance: usize,
    probe: &ProbeConfig,
    base_seed: u64,
) -> Result<(CalibrationReport, Vec<CalibrationRow>)> {
    let mistakes = MistakeProfile::calibrated(n_popular);
    let mut students = Vec::new();
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for inst in 0..n_instances {
        let s = seed::derive(base_seed, &[inst as u64]);
        let catalog = Catalog::build(&CatalogSpec {
            n_popular,
            n_students: per_instance,
            seed: s,
            ..CatalogSpec::default()
        })?;
        let cfg = GeneratorConfig {
            seed: s,
            ..GeneratorConfig::for_popular(n_popular)
        };
        let mut rng = seed::rng_tagged(s, "calibration.report", &[]);
        for (i, u) in generate_instance(&cfg, &catalog, per_instance)?.into_iter().enumerate() {
            let r = report(&u, &mistakes, &mut rng);
            rows.push(CalibrationRow {
                instance: inst,
                student: i,
                reported: r.n_reported(),
                low: r.bases().iter().filter(|&&v| v > 0.0 && v < 50.0).count(),
                high: r.bases().iter().filter(|&&v| v >= 50.0).count(),
                adjustments: r.adjustments().len(),
            });
            students.push(u);
            reports.push(r);
        }
    }
    let mut rng = seed::rng_tagged(base_seed, "calibration.probe", &[]);
    Ok((calibration_metrics(&students, &reports, probe, &mut rng), rows))
}

/// Largest instance the exhaustive maximin and Pareto checks accept.
pub const AUDIT_MAX_COURSES: usize = 8;
pub const AUDIT_MAX_STUDENTS: usize = 3;

/// Smallest `ε` for which `i`'s envy of `other` is `ε`-bounded by a single
/// good.
pub fn envy_bound<U: Fn(Schedule) -> f64>(u: U, own: Schedule, other: Schedule) -> f64 {
    let base = u(own);
    let full = u(other) - base;
    let single = other.courses().map(|j| u(other.without(j)) - base).fold(f64::INFINITY, f64::min);
    full.min(single).max(0.0)
}

/// Largest gain from any subset of `other` over `own`, by enumeration.
pub fn max_subset_envy<U: Fn(Schedule) -> f64>(u: U, own: Schedule, other: Schedule) -> f64 {
    let courses: Vec<usize> = other.courses().collect();
    let base = u(own);
    (0..1u64 << courses.len())
        .map(|mask| {
            let s = Schedule::from_courses(courses.iter().enumerate().filter(|(b, _)| mask >> b & 1 == 1).map(|(_, &j)| j));
            u(s) - base
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// [`max_subset_envy`] for monotone utilities, where the whole bundle is
/// always the most valuable subset.
pub fn max_subset_envy_monotone<U: Fn(Schedule) -> f64>(u: U, own: Schedule, other: Schedule) -> f64 {
    u(other) - u(own)
}

/// The `l`-maximin share value: the best achievable minimum over `l`
/// permissible bundles whose combined seat use respects `capacities`.
pub fn maximin_share<U: Fn(Schedule) -> f64>(u: U, l: usize, capacities: &[u32], perm: &Permissibility) -> Result<f64> {
    let m = capacities.len();
    if m > AUDIT_MAX_COURSES || l > AUDIT_MAX_STUDENTS + 1 {
        return Err(LabError::capability(format!(
            "maximin audit supports at most {AUDIT_MAX_COURSES} courses and {} bundles",
            AUDIT_MAX_STUDENTS + 1
        )));
    }
    let space = ScheduleSpace::new(perm, m)?;
    let mut cands: Vec<(f64, Schedule)> = space.schedules().iter().map(|&x| (u(x), x)).collect();
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.bits().cmp(&b.1.bits())));
    let mut best = f64::NEG_INFINITY;
    let mut used = vec![0u32; m];
    fn rec(
        cands: &[(f64, Schedule)],
        start: usize,
        left: usize,
        current_min: f64,
        used: &mut [u32],
        caps: &[u32],
        best: &mut f64,
    ) {
        if left == 0 {
            *best = best.max(current_min);
            return;
        }
        // bundles are chosen in candidate order, so later ones are worth less
        for idx in start..cands.len() {
            let (v, x) = cands[idx];
            if v.min(current_min) <= *best {
                break;
            }
            if x.courses().any(|j| used[j] >= caps[j]) {
                continue;
            }
            x.courses().for_each(|j| used[j] += 1);
            rec(cands, idx, left - 1, current_min.min(v), used, caps, best);
            x.courses().for_each(|j| used[j] -= 1);
        }
    }
    rec(&cands, 0, l, f64::INFINITY, &mut used, capacities, &mut best);
    Ok(best)
}

/// A feasible allocation giving every student strictly more than `eps` above
/// her utility in `allocation`, if one exists.
pub fn pareto_improvement<U: Fn(usize, Schedule) -> f64>(
    u: U,
    allocation: &[Schedule],
    capacities: &[u32],
    perm: &Permissibility,
    eps: f64,
) -> Result<Option<Vec<Schedule>>> {
    let (m, n) = (capacities.len(), allocation.len());
    if m > AUDIT_MAX_COURSES || n > AUDIT_MAX_STUDENTS {
        return Err(LabError::capability(format!(
            "Pareto audit supports at most {AUDIT_MAX_COURSES} courses and {AUDIT_MAX_STUDENTS} students"
        )));
    }
    let space = ScheduleSpace::new(perm, m)?;
    let options: Vec<Vec<Schedule>> = (0..n)
        .map(|i| {
            let floor = u(i, allocation[i]) + eps;
            space.schedules().iter().copied().filter(|&x| u(i, x) > floor).collect()
        })
        .collect();
    let mut used = vec![0u32; m];
    let mut pick = Vec::with_capacity(n);
    fn rec(options: &[Vec<Schedule>], used: &mut [u32], caps: &[u32], pick: &mut Vec<Schedule>) -> bool {
        let i = pick.len();
        if i == options.len() {
            return true;
        }
        for &x in &options[i] {
            if x.courses().any(|j| used[j] >= caps[j]) {
                continue;
            }
            x.courses().for_each(|j| used[j] += 1);
            pick.push(x);
            if rec(options, used, caps, pick) {
                return true;
            }
            pick.pop();
            x.courses().for_each(|j| used[j] -= 1);
        }
        false
    }
    Ok(rec(&options, &mut used, capacities, &mut pick).then_some(pick))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub eps: f64,
    /// Largest single-good envy bound over ordered pairs.
    pub max_envy_bound: f64,
    pub envy_ok: bool,
    /// Largest shortfall below the (n+1)-maximin share; `None` if skipped.
    pub max_maximin_gap: Option<f64>,
    pub maximin_ok: Option<bool>,
    pub pareto_improvement: Option<Vec<Schedule>>,
    pub pareto_ok: Option<bool>,
    /// Checks skipped because the instance is too large.
    pub skipped: Vec<String>,
}

/// Audits an allocation for approximate envy-freeness up to one good,
/// `(n+1)`-maximin shares and Pareto efficiency, each with tolerance `eps`.
/// The maximin and Pareto checks are exhaustive and skipped above
/// [`AUDIT_MAX_COURSES`] courses or [`AUDIT_MAX_STUDENTS`] students.
pub fn audit_fairness<U: Fn(usize, Schedule) -> f64>(
    u: U,
    allocation: &[Schedule],
    capacities: &[u32],
    perm: &Permissibility,
    eps: f64,
) -> AuditReport {
    let n = allocation.len();
    let mut max_envy = 0.0f64;
    for i in 0..n {
        for k in 0..n {
            if i != k {
                max_envy = max_envy.max(envy_bound(|x| u(i, x), allocation[i], allocation[k]));
            }
        }
    }
    let mut skipped = Vec::new();
    let gap = (0..n)
        .map(|i| maximin_share(|x| u(i, x), n + 1, capacities, perm).map(|mms| mms - u(i, allocation[i])))
        .collect::<Result<Vec<f64>>>();
    let max_maximin_gap = match gap {
        Ok(g) => Some(g.into_iter().fold(f64::NEG_INFINITY, f64::max)),
        Err(e) => {
            skipped.push(format!("maximin: {e}"));
            None
        }
    };
    let pareto = match pareto_improvement(&u, allocation, capacities, perm, eps) {
        Ok(p) => Some(p),
        Err(e) => {
            skipped.push(format!("pareto: {e}"));
            None
        }
    };
    let tol = 1e-12;
    AuditReport {
        eps,
        max_envy_bound: max_envy,
        envy_ok: max_envy <= eps + tol,
        maximin_ok: max_maximin_gap.map(|g| g <= eps + tol),
        max_maximin_gap,
        pareto_ok: pareto.as_ref().map(Option::is_none),
        pareto_improvement: pareto.flatten(),
        skipped,
    }
}

/// Stage-1 allocation on the given valuers, for audits.
pub fn stage1_allocation(market: &Market, valuers: Vec<Valuer>, cfg: &market::Stage1Config) -> Result<Vec<Schedule>> {
    Ok(crate::mechanism::stage1_prices(market, valuers, cfg)?.allocation)
}
