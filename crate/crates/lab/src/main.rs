use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use courselab::catalog::ScheduleSpace;
use courselab::elicitation::QueryAlgorithm;
use courselab::harness::{
    audit_fairness, calibration_study, opt_in_study, query_curves, query_records, run_experiment_with, write_csv,
    write_experiment, write_json, Cell, ExperimentResult, ExperimentSpec, OptInMode, OptInSummary, Scenario,
};
use courselab::mechanism::{run_mechanism, MechanismConfig, MechanismKind, PriceNoise};
use courselab::prefgen::Instance;
use courselab::reporting::ProbeConfig;
use courselab::seed;
use courselab_service::{AppState, ServiceConfig};

#[derive(Parser)]
#[command(name = "courselab", version, about = "Course allocation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate instances and write them as JSON.
    Gen(GenArgs),
    /// Compare simulated reports with true preferences.
    Calibrate(CalibrateArgs),
    /// Run mechanisms on a batch of instances.
    Run(RunArgs),
    /// Repeat a run over values of one parameter.
    Sweep(SweepArgs),
    /// Expected gain of a single student opting into the ML feature.
    Optin(OptInArgs),
    /// Ordinal dataset growth and model agreement per query.
    Qstudy(QStudyArgs),
    /// Fairness audit of allocations on small instances.
    Audit(AuditArgs),
    /// Serve live elicitation sessions over HTTP.
    Serve(ServeArgs),
}

#[derive(Args, Clone, Debug, Serialize)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

/// Economy overrides; unset fields keep the command's defaults.
#[derive(Args, Clone, Debug, Default, Serialize)]
struct ScenarioArgs {
    #[arg(long)]
    courses: Option<usize>,
    #[arg(long)]
    students: Option<usize>,
    #[arg(long)]
    max_courses: Option<usize>,
    #[arg(long)]
    supply_ratio: Option<f64>,
    #[arg(long)]
    popular: Option<usize>,
    /// Scale of the reporting mistakes.
    #[arg(long)]
    gamma: Option<f64>,
    /// Probability of answering a comparison query wrongly.
    #[arg(long)]
    p_m: Option<f64>,
    /// Students without complements or substitutes.
    #[arg(long)]
    additive: bool,
    #[arg(long)]
    instances: Option<usize>,
    /// 100 students and 500 instances unless given explicitly.
    #[arg(long)]
    full_scale: bool,
}

impl ScenarioArgs {
    fn scenario(&self, defaults: Scenario) -> Scenario {
        let students = self.students.or(self.full_scale.then_some(100));
        Scenario {
            m: self.courses.unwrap_or(defaults.m),
            n_students: students.unwrap_or(defaults.n_students),
            max_courses: self.max_courses.unwrap_or(defaults.max_courses),
            supply_ratio: self.supply_ratio.unwrap_or(defaults.supply_ratio),
            n_popular: self.popular.unwrap_or(defaults.n_popular),
            gamma: self.gamma.unwrap_or(defaults.gamma),
            p_m: self.p_m.unwrap_or(defaults.p_m),
            additive: self.additive || defaults.additive,
        }
    }

    fn instances(&self, default: usize) -> usize {
        self.instances.or(self.full_scale.then_some(500)).unwrap_or(default)
    }
}

#[derive(Args, Debug, Serialize)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    scenario: ScenarioArgs,
}

#[derive(Args, Debug, Serialize)]
struct CalibrateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 9)]
    popular: usize,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 100)]
    students_per_instance: usize,
    #[arg(long, default_value_t = 25)]
    probe_pairs: usize,
    /// Probe sampling weight of reported courses (1 = uniform schedules).
    #[arg(long, default_value_t = 2.0)]
    reported_weight: f64,
}

#[derive(Args, Debug, Serialize)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Comma-separated cells: `cm`, `cm*`, `cm-nm`, `rsd`, `mlcm:10:obis`, ...
    #[arg(long, value_delimiter = ',')]
    cells: Vec<String>,
    /// Experiment spec as JSON; replaces the scenario and cell options.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Record wall-clock times (outputs are no longer reproducible).
    #[arg(long)]
    timing: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum SweepParam {
    Gamma,
    PM,
    SupplyRatio,
    Popular,
    /// Standard deviation of additive noise on the query prices.
    PriceNoise,
}

#[derive(Args, Debug, Serialize)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, value_enum)]
    param: SweepParam,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    cells: Vec<String>,
    #[arg(long)]
    timing: bool,
}

#[derive(Args, Debug, Serialize)]
struct OptInArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value_t = 10)]
    queries: usize,
    #[arg(long, default_value = "obis")]
    algorithm: String,
    /// `nobody-else`, `everybody-else` or `both`.
    #[arg(long, default_value = "both")]
    mode: String,
}

#[derive(Args, Debug, Serialize)]
struct QStudyArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value_t = 25)]
    queries: usize,
    #[arg(long, value_delimiter = ',', default_value = "obis,naive,random")]
    algorithms: Vec<String>,
}

#[derive(Args, Debug, Serialize)]
struct AuditArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value = "mlcm")]
    mechanism: String,
    #[arg(long, default_value_t = 10)]
    queries: usize,
    #[arg(long, default_value = "obis")]
    algorithm: String,
    /// Tolerance of every check, in utility points.
    #[arg(long, default_value_t = 0.0)]
    eps: f64,
}

#[derive(Args, Debug, Serialize)]
struct ServeArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    /// Instance JSON; generated from the scenario options when absent.
    #[arg(long)]
    instance: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen(a) => gen(&a),
        Command::Calibrate(a) => calibrate(&a),
        Command::Run(a) => run(&a),
        Command::Sweep(a) => sweep(&a),
        Command::Optin(a) => optin(&a),
        Command::Qstudy(a) => qstudy(&a),
        Command::Audit(a) => audit(&a),
        Command::Serve(a) => serve(&a),
    }
}

#[derive(Serialize)]
struct ConfigEcho<'a, A: Serialize, E: Serialize> {
    command: &'a str,
    version: &'a str,
    args: &'a A,
    resolved: E,
}

fn prepare_out<A: Serialize, E: Serialize>(out: &Path, command: &str, args: &A, resolved: E) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let echo = ConfigEcho {
        command,
        version: env!("CARGO_PKG_VERSION"),
        args,
        resolved,
    };
    write_json(&out.join("config.json"), &echo)?;
    Ok(())
}

fn parse_cell(s: &str) -> Result<Cell> {
    let parts: Vec<&str> = s.trim().split(':').collect();
    let kind: MechanismKind = parts[0].parse()?;
    if !kind.is_ml() {
        if parts.len() > 1 {
            bail!("{} takes no query options: {s:?}", kind.label());
        }
        return Ok(Cell::mechanism(kind));
    }
    let n_queries = match parts.get(1) {
        Some(n) => n.parse().with_context(|| format!("query count in {s:?}"))?,
        None => 10,
    };
    let algorithm = match parts.get(2) {
        Some(a) => a.parse()?,
        None => QueryAlgorithm::Obis,
    };
    if parts.len() > 3 {
        bail!("too many fields in cell {s:?}");
    }
    Ok(Cell::mlcm(kind, n_queries, algorithm))
}

fn parse_cells(specs: &[String], default: &[&str]) -> Result<Vec<Cell>> {
    if specs.is_empty() {
        default.iter().map(|s| parse_cell(s)).collect()
    } else {
        specs.iter().map(|s| parse_cell(s)).collect()
    }
}

const WELFARE_CELLS: [&str; 7] = ["cm*", "cm-nm", "cm", "mlcm:10:obis", "mlcm:10:naive", "mlcm:10:random", "rsd"];

fn run_logged(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    let n_cells = spec.cells.len();
    let mut done = 0;
    let r = run_experiment_with(spec, |i, label| {
        done += 1;
        if done % n_cells == 0 || i + 1 == spec.n_instances {
            eprintln!("instance {}/{} ({label})", i + 1, spec.n_instances);
        }
    })?;
    Ok(r)
}

fn print_rows(result: &ExperimentResult) {
    for r in &result.rows {
        eprintln!(
            "{:<24} avg {:6.2} ± {:4.2}  min {:6.2} ± {:4.2}  runs {} failures {}",
            r.label, r.avg_utility_pct, r.avg_utility_ci95, r.min_utility_pct, r.min_utility_ci95, r.runs, r.failures
        );
    }
}

fn gen(a: &GenArgs) -> Result<()> {
    let sc = a.scenario.scenario(Scenario::default());
    let n = a.scenario.instances(10);
    prepare_out(&a.common.out, "gen", a, (&sc, n))?;
    let dir = a.common.out.join("instances");
    std::fs::create_dir_all(&dir)?;

    #[derive(Serialize)]
    struct InstanceRow {
        instance: usize,
        courses: usize,
        students: usize,
        seats: u32,
        mean_total_base: f64,
        mean_best_utility: f64,
    }
    #[derive(Serialize)]
    struct StudentRow {
        instance: usize,
        student: usize,
        favorites: usize,
        centers: usize,
        total_base: f64,
        best_utility: f64,
    }
    let mut metrics = Vec::new();
    let mut raw = Vec::new();
    for i in 0..n {
        let inst = sc.instance(a.common.seed, i)?;
        inst.save(&dir.join(format!("instance-{i:03}.json")))?;
        let space = ScheduleSpace::new(&inst.catalog.default_permissibility(), inst.catalog.m())?;
        let mut totals = Vec::new();
        let mut bests = Vec::new();
        for (s, u) in inst.students.iter().enumerate() {
            let total_base: f64 = u.base.iter().sum();
            let best_utility = space.schedules().iter().map(|&x| u.eval(x)).fold(0.0, f64::max);
            totals.push(total_base);
            bests.push(best_utility);
            raw.push(StudentRow {
                instance: i,
                student: s,
                favorites: u.favorites.len(),
                centers: u.centers.len(),
                total_base,
                best_utility,
            });
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        metrics.push(InstanceRow {
            instance: i,
            courses: inst.catalog.m(),
            students: inst.students.len(),
            seats: inst.catalog.capacities().iter().sum(),
            mean_total_base: mean(&totals),
            mean_best_utility: mean(&bests),
        });
    }
    write_csv(&a.common.out.join("metrics.csv"), &metrics)?;
    write_csv(&a.common.out.join("raw.csv"), &raw)?;
    eprintln!("wrote {n} instances to {}", dir.display());
    Ok(())
}

fn calibrate(a: &CalibrateArgs) -> Result<()> {
    let probe = ProbeConfig {
        pairs_per_student: a.probe_pairs,
        reported_weight: a.reported_weight,
    };
    prepare_out(&a.common.out, "calibrate", a, probe)?;
    let (report, rows) = calibration_study(a.popular, a.instances, a.students_per_instance, &probe, a.common.seed)?;
    write_csv(&a.common.out.join("metrics.csv"), &[&report])?;
    write_csv(&a.common.out.join("raw.csv"), &rows)?;
    eprintln!(
        "{} students: bases {:.2} ({:.2} low / {:.2} high), adjustments {:.2}, accuracy {:.1}%, disagreement median {}",
        report.n_students,
        report.bases_mean,
        report.low_mean,
        report.high_mean,
        report.adj_mean,
        report.accuracy_pct,
        report
            .disagreement_median_pct
            .map_or_else(|| "n/a".to_string(), |d| format!("{d:.1}%"))
    );
    Ok(())
}

fn run(a: &RunArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut spec: ExperimentSpec = serde_json::from_str(&text).context("parsing experiment spec")?;
            spec.timing |= a.timing;
            spec
        }
        None => ExperimentSpec {
            scenario: a.scenario.scenario(Scenario::default()),
            cells: parse_cells(&a.cells, &WELFARE_CELLS)?,
            n_instances: a.scenario.instances(50),
            seed: a.common.seed,
            timing: a.timing,
            price_noise: None,
        },
    };
    prepare_out(&a.common.out, "run", a, &spec)?;
    let result = run_logged(&spec)?;
    write_experiment(&a.common.out, &result)?;
    print_rows(&result);
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let base = a.scenario.scenario(Scenario::default());
    let cells = parse_cells(&a.cells, &["cm", "mlcm:10:obis"])?;
    let specs: Vec<ExperimentSpec> = a
        .values
        .iter()
        .map(|&v| {
            let mut spec = ExperimentSpec {
                scenario: base.clone(),
                cells: cells.clone(),
                n_instances: a.scenario.instances(50),
                seed: a.common.seed,
                timing: a.timing,
                price_noise: None,
            };
            match a.param {
                SweepParam::Gamma => spec.scenario.gamma = v,
                SweepParam::PM => spec.scenario.p_m = v,
                SweepParam::SupplyRatio => spec.scenario.supply_ratio = v,
                SweepParam::Popular => spec.scenario.n_popular = v as usize,
                SweepParam::PriceNoise => {
                    spec.price_noise = (v > 0.0).then_some(PriceNoise::Additive { sigma: v });
                    for c in &mut spec.cells {
                        c.label = format!("{} [price noise {v}]", c.label);
                    }
                }
            }
            spec
        })
        .collect();
    prepare_out(&a.common.out, "sweep", a, &specs)?;
    let mut all = ExperimentResult::default();
    for (spec, v) in specs.iter().zip(&a.values) {
        eprintln!("{:?} = {v}", a.param);
        all.extend(run_logged(spec)?);
    }
    write_experiment(&a.common.out, &all)?;
    print_rows(&all);
    Ok(())
}

fn optin(a: &OptInArgs) -> Result<()> {
    let sc = a.scenario.scenario(Scenario::default());
    let n = a.scenario.instances(10);
    let algorithm: QueryAlgorithm = a.algorithm.parse()?;
    let modes = match a.mode.to_ascii_lowercase().as_str() {
        "both" => vec![OptInMode::NobodyElse, OptInMode::EverybodyElse],
        m => vec![m.parse::<OptInMode>()?],
    };
    prepare_out(&a.common.out, "optin", a, (&sc, n))?;

    #[derive(Serialize)]
    struct Row {
        mode: OptInMode,
        instance: usize,
        student: usize,
        utility_cm: f64,
        utility_mlcm: f64,
        gain_pct: f64,
    }
    #[derive(Serialize)]
    struct Metrics {
        mode: OptInMode,
        students: usize,
        prefer_mlcm_pct: f64,
        prefer_cm_pct: f64,
        indifferent_pct: f64,
        expected_gain_pct: f64,
        gain_if_prefer_mlcm_pct: f64,
        gain_if_prefer_cm_pct: f64,
    }
    let mut raw = Vec::new();
    let mut metrics = Vec::new();
    for mode in modes {
        let records = opt_in_study(&sc, n, a.queries, algorithm, mode, a.common.seed)?;
        let s = OptInSummary::from_records(&records);
        eprintln!(
            "{mode:?}: prefer MLCM {:.1}%, prefer CM {:.1}%, indifferent {:.1}%, expected gain {:.2}%",
            s.prefer_mlcm_pct, s.prefer_cm_pct, s.indifferent_pct, s.expected_gain_pct
        );
        metrics.push(Metrics {
            mode,
            students: s.students,
            prefer_mlcm_pct: s.prefer_mlcm_pct,
            prefer_cm_pct: s.prefer_cm_pct,
            indifferent_pct: s.indifferent_pct,
            expected_gain_pct: s.expected_gain_pct,
            gain_if_prefer_mlcm_pct: s.gain_if_prefer_mlcm_pct,
            gain_if_prefer_cm_pct: s.gain_if_prefer_cm_pct,
        });
        raw.extend(records.into_iter().map(|r| Row {
            mode,
            instance: r.instance,
            student: r.student,
            utility_cm: r.utility_cm,
            utility_mlcm: r.utility_mlcm,
            gain_pct: r.gain_pct,
        }));
    }
    write_csv(&a.common.out.join("metrics.csv"), &metrics)?;
    write_csv(&a.common.out.join("raw.csv"), &raw)?;
    Ok(())
}

fn qstudy(a: &QStudyArgs) -> Result<()> {
    let sc = a.scenario.scenario(Scenario::default());
    let n = a.scenario.instances(4);
    let algorithms = a
        .algorithms
        .iter()
        .map(|s| s.parse::<QueryAlgorithm>())
        .collect::<Result<Vec<_>, _>>()?;
    prepare_out(&a.common.out, "qstudy", a, (&sc, n))?;
    let records = query_records(&sc, n, a.queries, &algorithms, a.common.seed)?;
    let curves = query_curves(&records, &algorithms);
    write_csv(&a.common.out.join("metrics.csv"), &curves)?;
    write_csv(&a.common.out.join("raw.csv"), &records)?;
    for alg in &algorithms {
        if let Some(p) = curves.iter().filter(|p| p.algorithm == *alg).max_by_key(|p| p.query) {
            eprintln!(
                "{alg}: after {} queries, ordinal size {:.1}, agreement {:.1}% ({} students)",
                p.query, p.mean_ordinal_size, p.agreement_pct, p.students
            );
        }
    }
    Ok(())
}

fn audit(a: &AuditArgs) -> Result<()> {
    let defaults = Scenario {
        m: 6,
        n_students: 3,
        max_courses: 2,
        n_popular: 2,
        ..Scenario::default()
    };
    let sc = a.scenario.scenario(defaults);
    let n = a.scenario.instances(20);
    let cfg = MechanismConfig {
        kind: a.mechanism.parse()?,
        n_queries: a.queries,
        query_algorithm: a.algorithm.parse()?,
        ..MechanismConfig::default()
    };
    prepare_out(&a.common.out, "audit", a, (&sc, n, &cfg))?;

    #[derive(Serialize)]
    struct Row {
        instance: usize,
        max_envy_bound: f64,
        envy_ok: bool,
        max_maximin_gap: Option<f64>,
        maximin_ok: Option<bool>,
        pareto_ok: Option<bool>,
        skipped: String,
    }
    #[derive(Serialize)]
    struct Metrics {
        instances: usize,
        eps: f64,
        envy_ok_pct: f64,
        mean_envy_bound: f64,
        maximin_checked: usize,
        maximin_ok_pct: f64,
        pareto_checked: usize,
        pareto_ok_pct: f64,
    }
    let mut raw = Vec::new();
    for i in 0..n {
        let market = sc.market(a.common.seed, i)?;
        let run_cfg = MechanismConfig {
            seed: seed::derive(a.common.seed, &[i as u64, 2]),
            ..cfg.clone()
        };
        let result = run_mechanism(&market, &run_cfg)?;
        let caps = market.instance.catalog.capacities();
        let students = market.students();
        let report = audit_fairness(
            |s, x| students[s].eval(x),
            &result.allocation,
            &caps,
            market.space.permissibility(),
            a.eps,
        );
        raw.push(Row {
            instance: i,
            max_envy_bound: report.max_envy_bound,
            envy_ok: report.envy_ok,
            max_maximin_gap: report.max_maximin_gap,
            maximin_ok: report.maximin_ok,
            pareto_ok: report.pareto_ok,
            skipped: report.skipped.join("; "),
        });
    }
    let pct = |xs: Vec<bool>| (xs.len(), 100.0 * xs.iter().filter(|&&b| b).count() as f64 / xs.len().max(1) as f64);
    let (_, envy_ok_pct) = pct(raw.iter().map(|r| r.envy_ok).collect());
    let (maximin_checked, maximin_ok_pct) = pct(raw.iter().filter_map(|r| r.maximin_ok).collect());
    let (pareto_checked, pareto_ok_pct) = pct(raw.iter().filter_map(|r| r.pareto_ok).collect());
    let metrics = Metrics {
        instances: n,
        eps: a.eps,
        envy_ok_pct,
        mean_envy_bound: raw.iter().map(|r| r.max_envy_bound).sum::<f64>() / n.max(1) as f64,
        maximin_checked,
        maximin_ok_pct,
        pareto_checked,
        pareto_ok_pct,
    };
    eprintln!(
        "envy ok {:.1}%, maximin ok {:.1}% of {}, Pareto ok {:.1}% of {}",
        metrics.envy_ok_pct, metrics.maximin_ok_pct, maximin_checked, metrics.pareto_ok_pct, pareto_checked
    );
    write_csv(&a.common.out.join("metrics.csv"), &[metrics])?;
    write_csv(&a.common.out.join("raw.csv"), &raw)?;
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<()> {
    let instance = match &a.instance {
        Some(path) => Instance::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => a.scenario.scenario(Scenario::default()).instance(a.common.seed, 0)?,
    };
    prepare_out(&a.common.out, "serve", a, ())?;
    let state = AppState::open(ServiceConfig::new(instance, &a.data_dir, a.common.seed))?;
    eprintln!(
        "{} stored sessions; listening on port {} (data in {})",
        state.n_sessions(),
        a.port,
        a.data_dir.display()
    );
    let addr = SocketAddr::from(([0, 0, 0, 0], a.port));
    tokio::runtime::Runtime::new()?.block_on(courselab_service::serve(addr, state))?;
    Ok(())
}
