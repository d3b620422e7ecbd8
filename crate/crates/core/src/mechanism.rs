//! End-to-end mechanisms on one economy: Course Match on reports (CM), on
//! true utilities (CM*), on mistake-free reports, the ML-powered variant
//! (MLCM) with its projected twin, and random serial dictatorship.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::catalog::{Schedule, ScheduleSpace};
use crate::elicitation::{simulate_student, ComparisonQuery, ElicitationSession, QueryAlgorithm};
use crate::error::{LabError, Result};
use crate::market::{self, Economy, Stage1Config, Stage1Result, Valuer, DEFAULT_BETA};
use crate::prefgen::{Instance, TrueUtility};
use crate::reporting::{report, GuiReport, MistakeProfile};
use crate::seed;
use crate::valuemodel::{build_cardinal, fit_cardinal, project_to_gui, MonotoneValueModel, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MechanismKind {
    Cm,
    CmStar,
    CmNoMistakes,
    Mlcm,
    MlcmProjected,
    Rsd,
}

impl MechanismKind {
    pub fn is_ml(self) -> bool {
        matches!(self, MechanismKind::Mlcm | MechanismKind::MlcmProjected)
    }

    pub fn label(self) -> &'static str {
        match self {
            MechanismKind::Cm => "CM",
            MechanismKind::CmStar => "CM*",
            MechanismKind::CmNoMistakes => "CM-NM",
            MechanismKind::Mlcm => "MLCM",
            MechanismKind::MlcmProjected => "MLCM-Projected",
            MechanismKind::Rsd => "RSD",
        }
    }
}

impl std::str::FromStr for MechanismKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "cm" => Ok(MechanismKind::Cm),
            "cm*" | "cmstar" => Ok(MechanismKind::CmStar),
            "cmnm" | "cmnomistakes" => Ok(MechanismKind::CmNoMistakes),
            "mlcm" => Ok(MechanismKind::Mlcm),
            "mlcmprojected" | "projected" => Ok(MechanismKind::MlcmProjected),
            "rsd" => Ok(MechanismKind::Rsd),
            _ => Err(LabError::validation(format!("unknown mechanism {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriceNoise {
    /// `p + N(0, sigma)`.
    Additive { sigma: f64 },
    /// `p · (1 + U[-l, l])`.
    Multiplicative { l: f64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriceSource {
    /// Compute Phase-3 prices with Stage 1 on the initial models.
    #[default]
    Fresh,
    External { prices: Vec<f64> },
    Perturbed { prices: Vec<f64>, noise: PriceNoise },
}

/// Perturbs prices and clamps them to `[0, min_budget]`.
pub fn perturb_prices<R: Rng>(p: &[f64], noise: PriceNoise, min_budget: f64, rng: &mut R) -> Vec<f64> {
    p.iter()
        .map(|&v| {
            let q = match noise {
                PriceNoise::Additive { sigma } if sigma > 0.0 => {
                    v + Normal::new(0.0, sigma).expect("positive sigma").sample(rng)
                }
                PriceNoise::Additive { .. } => v,
                PriceNoise::Multiplicative { l } if l > 0.0 => v * (1.0 + rng.random_range(-l..=l)),
                PriceNoise::Multiplicative { .. } => v,
            };
            q.clamp(0.0, min_budget)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismConfig {
    pub kind: MechanismKind,
    pub n_queries: usize,
    pub query_algorithm: QueryAlgorithm,
    /// Per-student participation in the ML phases; `None` means everyone.
    pub opt_in: Option<Vec<bool>>,
    pub price_source: PriceSource,
    pub stage1: Stage1Config,
    /// Stage-3 budget increase.
    pub bump: f64,
    pub train: TrainConfig,
    pub n_t2: usize,
    pub n_t3: usize,
    pub projection_samples: usize,
    pub seed: u64,
}

impl Default for MechanismConfig {
    fn default() -> Self {
        MechanismConfig {
            kind: MechanismKind::Cm,
            n_queries: 10,
            query_algorithm: QueryAlgorithm::Obis,
            opt_in: None,
            price_source: PriceSource::Fresh,
            stage1: Stage1Config::default(),
            bump: 0.10,
            train: TrainConfig::default(),
            n_t2: 100,
            n_t3: 100,
            projection_samples: 1000,
            seed: 0,
        }
    }
}

impl MechanismConfig {
    pub fn new(kind: MechanismKind) -> Self {
        MechanismConfig {
            kind,
            ..MechanismConfig::default()
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if let Some(o) = &self.opt_in {
            if o.len() != n {
                return Err(LabError::validation("opt-in mask length differs from the number of students"));
            }
        }
        if !(self.bump >= 0.0) {
            return Err(LabError::validation("stage-3 bump must be nonnegative"));
        }
        Ok(())
    }

    fn opted_in(&self, i: usize) -> bool {
        self.opt_in.as_ref().is_none_or(|o| o[i])
    }
}

/// Everything every mechanism in a batch shares: the economy, its reports
/// and its budgets.
#[derive(Clone, Debug)]
pub struct Market {
    pub instance: Instance,
    pub space: Arc<ScheduleSpace>,
    pub reports: Vec<GuiReport>,
    pub mistakes: MistakeProfile,
    pub budgets: Vec<f64>,
    pub seed: u64,
}

impl Market {
    /// Draws reports (under `mistakes`) and budgets for `instance`.
    pub fn prepare(instance: Instance, mistakes: MistakeProfile, seed_value: u64) -> Result<Self> {
        instance.validate()?;
        mistakes.validate()?;
        let perm = instance.catalog.default_permissibility();
        let space = ScheduleSpace::new(&perm, instance.catalog.m())?;
        let reports = instance
            .students
            .iter()
            .enumerate()
            .map(|(i, u)| report(u, &mistakes, &mut seed::rng_tagged(seed_value, "market.report", &[i as u64])))
            .collect();
        let budgets = market::draw_budgets(
            instance.students.len(),
            DEFAULT_BETA,
            &mut seed::rng_tagged(seed_value, "market.budgets", &[]),
        );
        Ok(Market {
            instance,
            space,
            reports,
            mistakes,
            budgets,
            seed: seed_value,
        })
    }

    pub fn n(&self) -> usize {
        self.instance.students.len()
    }

    pub fn m(&self) -> usize {
        self.instance.catalog.m()
    }

    pub fn students(&self) -> &[TrueUtility] {
        &self.instance.students
    }

    fn economy(&self, valuers: Vec<Valuer>) -> Result<Economy> {
        Economy::new(
            valuers,
            self.budgets.clone(),
            self.instance.catalog.capacities(),
            self.instance.catalog.max_courses(),
        )
    }

    fn gui_valuer(&self, r: &GuiReport) -> Valuer {
        Valuer::from_fn(&self.space, |x| r.eval(x))
    }

    fn model_valuer(&self, model: &MonotoneValueModel) -> Valuer {
        Valuer::from_fn(&self.space, |x| model.predict(x))
    }

    /// Utility of each student's schedule under her true preferences.
    pub fn true_utilities(&self, allocation: &[Schedule]) -> Vec<f64> {
        self.students().iter().zip(allocation).map(|(u, &x)| u.eval(x)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentElicitation {
    pub student: usize,
    pub queries: Vec<(ComparisonQuery, Schedule)>,
    pub inferred_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub kind: MechanismKind,
    pub allocation: Vec<Schedule>,
    /// Final (post-Stage-2) prices; empty for RSD.
    pub prices: Vec<f64>,
    /// Phase-3 prices used for the comparison queries (ML variants only).
    pub query_prices: Option<Vec<f64>>,
    pub utilities: Vec<f64>,
    pub stage1_alpha: Option<f64>,
    pub stage1_target: Option<f64>,
    pub stage1_steps: Option<usize>,
    pub stage2_alpha: Option<f64>,
    pub elicitation: Vec<StudentElicitation>,
}

impl RunResult {
    pub fn mean_utility(&self) -> f64 {
        if self.utilities.is_empty() {
            0.0
        } else {
            self.utilities.iter().sum::<f64>() / self.utilities.len() as f64
        }
    }

    pub fn min_utility(&self) -> f64 {
        self.utilities.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn run_course_match(market: &Market, cfg: &MechanismConfig, kind: MechanismKind, valuers: Vec<Valuer>) -> Result<RunResult> {
    let econ = market.economy(valuers)?;
    let out = market::course_match(&econ, &cfg.stage1, cfg.bump, seed::derive(cfg.seed, &[3]));
    Ok(RunResult {
        kind,
        utilities: market.true_utilities(&out.allocation),
        allocation: out.allocation,
        prices: out.stage2_prices,
        query_prices: None,
        stage1_alpha: Some(out.stage1.report.alpha),
        stage1_target: Some(out.stage1.report.target),
        stage1_steps: Some(out.stage1.steps),
        stage2_alpha: Some(out.stage2_alpha),
        elicitation: Vec::new(),
    })
}

/// Runs one mechanism on a prepared market.
pub fn run_mechanism(market: &Market, cfg: &MechanismConfig) -> Result<RunResult> {
    cfg.validate(market.n())?;
    let ctx = |e: LabError| e.in_context(format!("{} on seed {}", cfg.kind.label(), cfg.seed));
    match cfg.kind {
        MechanismKind::Cm => {
            let valuers = market.reports.iter().map(|r| market.gui_valuer(r)).collect();
            run_course_match(market, cfg, cfg.kind, valuers).map_err(ctx)
        }
        MechanismKind::CmStar => {
            let valuers = market
                .students()
                .iter()
                .map(|u| Valuer::from_fn(&market.space, |x| u.eval(x)))
                .collect();
            run_course_match(market, cfg, cfg.kind, valuers).map_err(ctx)
        }
        MechanismKind::CmNoMistakes => {
            let none = MistakeProfile::none();
            let valuers = market
                .students()
                .iter()
                .enumerate()
                .map(|(i, u)| {
                    let r = report(u, &none, &mut seed::rng_tagged(market.seed, "market.report", &[i as u64]));
                    market.gui_valuer(&r)
                })
                .collect();
            run_course_match(market, cfg, cfg.kind, valuers).map_err(ctx)
        }
        MechanismKind::Rsd => {
            let valuers: Vec<Valuer> = market.reports.iter().map(|r| market.gui_valuer(r)).collect();
            let allocation = market::rsd(&valuers, &market.instance.catalog.capacities(), seed::derive(cfg.seed, &[4]));
            Ok(RunResult {
                kind: cfg.kind,
                utilities: market.true_utilities(&allocation),
                allocation,
                prices: Vec::new(),
                query_prices: None,
                stage1_alpha: None,
                stage1_target: None,
                stage1_steps: None,
                stage2_alpha: None,
                elicitation: Vec::new(),
            })
        }
        MechanismKind::Mlcm | MechanismKind::MlcmProjected => run_ml(market, cfg, &BTreeMap::new()).map_err(ctx),
    }
}

/// Phase-2 models for opted-in students.
pub fn initial_models(market: &Market, cfg: &MechanismConfig) -> Result<Vec<Option<MonotoneValueModel>>> {
    (0..market.n())
        .map(|i| {
            if !cfg.opted_in(i) {
                return Ok(None);
            }
            initial_model(&market.reports[i], &market.space, cfg, i)
                .map(Some)
                .map_err(|e| e.in_context(format!("student {i}")))
        })
        .collect()
}

/// Phase-2 model for student `i`: the cardinal dataset built from her report
/// and a network fitted to it, both drawn from the student's own stream.
pub fn initial_model(
    report: &GuiReport,
    space: &ScheduleSpace,
    cfg: &MechanismConfig,
    i: usize,
) -> Result<MonotoneValueModel> {
    let mut rng = seed::rng_tagged(cfg.seed, "mechanism.cardinal", &[i as u64]);
    let card = build_cardinal(report, space.permissibility(), space.m(), cfg.n_t2, cfg.n_t3, &mut rng)?;
    Ok(fit_cardinal(&card, space.m(), &cfg.train, &mut rng))
}

/// Runs MLCM (or MLCM-Projected) with the final models of some students
/// supplied by the caller, e.g. live students who answered their own queries.
/// Those students skip simulated elicitation.
pub fn run_ml_with_models(
    market: &Market,
    cfg: &MechanismConfig,
    fixed: &BTreeMap<usize, MonotoneValueModel>,
) -> Result<RunResult> {
    cfg.validate(market.n())?;
    if !cfg.kind.is_ml() {
        return Err(LabError::validation(format!("{} does not use value models", cfg.kind.label())));
    }
    if let Some((&i, _)) = fixed.iter().find(|(&i, m)| i >= market.n() || m.m != market.m()) {
        return Err(LabError::validation(format!("supplied model for student {i} does not fit the market")));
    }
    run_ml(market, cfg, fixed).map_err(|e| e.in_context(format!("{} on seed {}", cfg.kind.label(), cfg.seed)))
}

fn run_ml(market: &Market, cfg: &MechanismConfig, fixed: &BTreeMap<usize, MonotoneValueModel>) -> Result<RunResult> {
    let models = initial_models(market, cfg)?;
    let anyone = models.iter().any(Option::is_some);
    let valuers_for = |models: &[Option<MonotoneValueModel>]| -> Vec<Valuer> {
        models
            .iter()
            .zip(&market.reports)
            .map(|(m, r)| match m {
                Some(m) => market.model_valuer(m),
                None => market.gui_valuer(r),
            })
            .collect()
    };

    let mut final_models = models.clone();
    for (&i, m) in fixed {
        final_models[i] = Some(m.clone());
    }
    let mut elicitation = Vec::new();
    let mut query_prices = None;
    if anyone && cfg.n_queries > 0 {
        let phase3 = match &cfg.price_source {
            PriceSource::Fresh => {
                let econ = market.economy(valuers_for(&models))?;
                market::stage1(&econ, &cfg.stage1).prices
            }
            PriceSource::External { prices } => prices.clone(),
            PriceSource::Perturbed { prices, noise } => {
                let min_budget = market.budgets.iter().copied().fold(f64::INFINITY, f64::min);
                perturb_prices(prices, *noise, min_budget, &mut seed::rng_tagged(cfg.seed, "mechanism.perturb", &[]))
            }
        };
        if phase3.len() != market.m() {
            return Err(LabError::validation("phase-3 price vector has the wrong length"));
        }
        for (i, model) in models.iter().enumerate() {
            let Some(model) = model else { continue };
            if fixed.contains_key(&i) {
                continue;
            }
            let mut session = ElicitationSession::new(
                cfg.query_algorithm,
                model.clone(),
                market.space.clone(),
                phase3.clone(),
                market.budgets[i],
                cfg.train.clone(),
                seed::derive(cfg.seed, &[5, i as u64]),
            )?;
            let mut rng = seed::rng_tagged(cfg.seed, "mechanism.answers", &[i as u64]);
            let queries = simulate_student(&mut session, &market.students()[i], market.mistakes.p_m, cfg.n_queries, &mut rng)?;
            final_models[i] = Some(session.final_model());
            elicitation.push(StudentElicitation {
                student: i,
                queries,
                inferred_pairs: session.inferred_pairs(),
            });
        }
        query_prices = Some(phase3);
    }

    let valuers = if cfg.kind == MechanismKind::MlcmProjected {
        final_models
            .iter()
            .enumerate()
            .map(|(i, m)| match m {
                Some(m) => {
                    let mut rng = seed::rng_tagged(cfg.seed, "mechanism.projection", &[i as u64]);
                    project_to_gui(m, &market.space, cfg.projection_samples, &mut rng).map(|r| market.gui_valuer(&r))
                }
                None => Ok(market.gui_valuer(&market.reports[i])),
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        valuers_for(&final_models)
    };
    let mut result = run_course_match(market, cfg, cfg.kind, valuers)?;
    result.query_prices = query_prices;
    result.elicitation = elicitation;
    Ok(result)
}

/// Stage-1 result on the given valuers, for callers that need the prices
/// alone (e.g. to feed an external price source).
pub fn stage1_prices(market: &Market, valuers: Vec<Valuer>, cfg: &Stage1Config) -> Result<Stage1Result> {
    Ok(market::stage1(&market.economy(valuers)?, cfg))
}
