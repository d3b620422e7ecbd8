use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use courselab::catalog::{cost, Schedule};
use courselab::elicitation::QueryAlgorithm;
use courselab::market::{Stage1Config, Valuer};
use courselab::mechanism::{
    run_mechanism, run_ml_with_models, stage1_prices, Market, MechanismConfig, MechanismKind,
};
use courselab::prefgen::Instance;
use courselab::reporting::{GuiReport, MistakeProfile};
use courselab::seed;

use crate::error::ServiceError;
use crate::session::{LiveSession, QueryView, RankedSchedule, ScheduleView, SessionContext, Status};
use crate::store::Store;

pub const SUMMARY_SIZE: usize = 5;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// The simulated cohort; live students take over its slots.
    pub instance: Instance,
    pub data_dir: PathBuf,
    pub seed: u64,
    pub mistakes: MistakeProfile,
    pub mechanism: MechanismConfig,
}

impl ServiceConfig {
    pub fn new(instance: Instance, data_dir: impl Into<PathBuf>, seed: u64) -> Self {
        let n_popular = instance.catalog.popular().len();
        ServiceConfig {
            instance,
            data_dir: data_dir.into(),
            seed,
            mistakes: MistakeProfile::calibrated(n_popular),
            mechanism: MechanismConfig::default(),
        }
    }
}

type SessionRef = Arc<Mutex<LiveSession>>;

pub struct AppState {
    ctx: SessionContext,
    market: Market,
    store: Store,
    seed: u64,
    sessions: RwLock<BTreeMap<u64, SessionRef>>,
}

impl AppState {
    /// Prepares the cohort, fixes the query prices and replays every stored
    /// session.
    ///
    /// Query prices are Course Match's Stage-1 prices on the cohort's
    /// reports; live students are price takers.
    pub fn open(cfg: ServiceConfig) -> Result<Arc<AppState>, ServiceError> {
        let market = Market::prepare(cfg.instance, cfg.mistakes, cfg.seed)?;
        let valuers = market
            .reports
            .iter()
            .map(|r| Valuer::from_fn(&market.space, |x| r.eval(x)))
            .collect();
        let stage1 = Stage1Config {
            seed: cfg.seed,
            ..cfg.mechanism.stage1.clone()
        };
        let prices = stage1_prices(&market, valuers, &stage1)?.prices;
        let ctx = SessionContext {
            space: market.space.clone(),
            prices,
            course_names: (0..market.m()).map(|j| format!("C{:02}", j + 1)).collect(),
            mechanism: cfg.mechanism,
        };
        let store = Store::open(cfg.data_dir)?;
        let mut sessions = BTreeMap::new();
        for id in store.ids()? {
            let events = store.read(id)?;
            let s = LiveSession::replay(&ctx, &events)?;
            if s.id != id {
                return Err(ServiceError::Internal(format!("log file for session {id} holds session {}", s.id)));
            }
            sessions.insert(id, Arc::new(Mutex::new(s)));
        }
        Ok(Arc::new(AppState {
            ctx,
            market,
            store,
            seed: cfg.seed,
            sessions: RwLock::new(sessions),
        }))
    }

    pub fn prices(&self) -> &[f64] {
        &self.ctx.prices
    }

    pub fn n_sessions(&self) -> usize {
        self.sessions.read().expect("session map poisoned").len()
    }

    fn session(&self, id: u64) -> Result<SessionRef, ServiceError> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(&id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("session {id}")))
    }

    fn info(&self, s: &LiveSession) -> SessionInfo {
        SessionInfo {
            id: s.id,
            status: s.status(),
            student: s.student,
            algorithm: s.algorithm,
            budget: s.budget,
            max_courses: self.market.instance.catalog.max_courses(),
            courses: (0..self.market.m())
                .map(|j| CourseView {
                    id: j,
                    name: self.ctx.course_names[j].clone(),
                    capacity: self.market.instance.catalog.course(j).capacity,
                    price: self.ctx.prices[j],
                })
                .collect(),
            answered: s.n_answered(),
            inferred_pairs: s.inferred_pairs(),
        }
    }
}

/// Runs `f` on one session off the async executor, holding the session lock
/// so requests to the same session are serialized.
async fn with_session<T, F>(state: &Arc<AppState>, id: u64, f: F) -> Result<T, ServiceError>
where
    T: Send + 'static,
    F: FnOnce(&AppState, &mut LiveSession) -> Result<T, ServiceError> + Send + 'static,
{
    let session = state.session(id)?;
    let state = state.clone();
    tokio::task::spawn_blocking(move || {
        let mut s = session.lock().unwrap_or_else(|e| e.into_inner());
        f(&state, &mut s)
    })
    .await
    .map_err(|e| ServiceError::Internal(e.to_string()))?
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub student: Option<usize>,
    pub algorithm: Option<QueryAlgorithm>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CourseView {
    pub id: usize,
    pub name: String,
    pub capacity: u32,
    pub price: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: u64,
    pub status: Status,
    pub student: usize,
    pub algorithm: QueryAlgorithm,
    pub budget: f64,
    pub max_courses: usize,
    pub courses: Vec<CourseView>,
    pub answered: usize,
    pub inferred_pairs: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NextQueryResponse {
    pub status: Status,
    pub query: Option<QueryView>,
    pub answered: usize,
    pub inferred_pairs: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnswerRequest {
    pub query_id: u64,
    pub winner: Schedule,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Progress {
    pub status: Status,
    pub answered: usize,
    pub inferred_pairs: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SummaryResponse {
    pub id: u64,
    pub status: Status,
    pub answered: usize,
    pub inferred_pairs: usize,
    pub top: Vec<RankedSchedule>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocateRequest {
    pub kind: Option<MechanismKind>,
    /// Queries answered by each simulated student.
    pub n_queries: Option<usize>,
    pub query_algorithm: Option<QueryAlgorithm>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LiveAssignment {
    pub session: u64,
    pub student: usize,
    pub schedule: ScheduleView,
    /// The student's final model value of the schedule (her report's value
    /// for mechanisms without models).
    pub value: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AllocateResponse {
    pub kind: MechanismKind,
    pub prices: Vec<f64>,
    pub sessions: Vec<LiveAssignment>,
    /// Mean true utility of the simulated students.
    pub cohort_mean_utility: f64,
}

fn parse_body<T: Default + for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ServiceError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ServiceError::Unprocessable(e.to_string()))
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<SessionInfo>, ServiceError> {
    let req: CreateRequest = parse_body(&body)?;
    let n = state.market.n();
    let mut sessions = state.sessions.write().expect("session map poisoned");
    let taken: Vec<usize> = sessions
        .values()
        .map(|s| s.lock().unwrap_or_else(|e| e.into_inner()).student)
        .collect();
    let student = match req.student {
        Some(i) if i >= n => return Err(ServiceError::Unprocessable(format!("student slot {i} outside 0..{n}"))),
        Some(i) if taken.contains(&i) => return Err(ServiceError::Conflict(format!("student slot {i} is taken"))),
        Some(i) => i,
        None => (0..n)
            .find(|i| !taken.contains(i))
            .ok_or_else(|| ServiceError::Conflict("every student slot is taken".into()))?,
    };
    let id = sessions.keys().next_back().map_or(1, |k| k + 1);
    let s = LiveSession::new(
        id,
        student,
        req.algorithm.unwrap_or(QueryAlgorithm::Obis),
        req.seed.unwrap_or_else(|| seed::derive(state.seed, &[id])),
        state.market.budgets[student],
    );
    state.store.append(id, &[s.created_event(&state.ctx)])?;
    let info = state.info(&s);
    sessions.insert(id, Arc::new(Mutex::new(s)));
    Ok(Json(info))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<u64>) -> Result<Json<SessionInfo>, ServiceError> {
    with_session(&state, id, |st, s| Ok(Json(st.info(s)))).await
}

async fn put_report(
    State(state): State<Arc<AppState>>,
    Path(id): Path<u64>,
    body: Bytes,
) -> Result<Json<Progress>, ServiceError> {
    state.session(id)?;
    let report: GuiReport = serde_json::from_slice(&body).map_err(|e| ServiceError::Unprocessable(e.to_string()))?;
    with_session(&state, id, move |st, s| {
        let events = s.submit_report(&st.ctx, report)?;
        st.store.append(id, &events)?;
        Ok(Json(progress(s)))
    })
    .await
}

async fn next_query(State(state): State<Arc<AppState>>, Path(id): Path<u64>) -> Result<Json<NextQueryResponse>, ServiceError> {
    with_session(&state, id, move |st, s| {
        let (q, events) = s.next_query()?;
        st.store.append(id, &events)?;
        Ok(Json(NextQueryResponse {
            status: s.status(),
            query: q.map(|q| QueryView {
                id: q.id,
                left: st.ctx.describe(q.left),
                right: st.ctx.describe(q.right),
            }),
            answered: s.n_answered(),
            inferred_pairs: s.inferred_pairs(),
        }))
    })
    .await
}

async fn post_answer(
    State(state): State<Arc<AppState>>,
    Path(id): Path<u64>,
    body: Bytes,
) -> Result<Json<Progress>, ServiceError> {
    state.session(id)?;
    let req: AnswerRequest = serde_json::from_slice(&body).map_err(|e| ServiceError::Unprocessable(e.to_string()))?;
    with_session(&state, id, move |st, s| {
        let events = s.answer(req.query_id, req.winner)?;
        st.store.append(id, &events)?;
        Ok(Json(progress(s)))
    })
    .await
}

async fn summary(State(state): State<Arc<AppState>>, Path(id): Path<u64>) -> Result<Json<SummaryResponse>, ServiceError> {
    with_session(&state, id, move |st, s| {
        Ok(Json(SummaryResponse {
            id,
            status: s.status(),
            answered: s.n_answered(),
            inferred_pairs: s.inferred_pairs(),
            top: s.top(&st.ctx, SUMMARY_SIZE)?,
        }))
    })
    .await
}

fn progress(s: &LiveSession) -> Progress {
    Progress {
        status: s.status(),
        answered: s.n_answered(),
        inferred_pairs: s.inferred_pairs(),
    }
}

async fn allocate(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<AllocateResponse>, ServiceError> {
    let req: AllocateRequest = parse_body(&body)?;
    let sessions: Vec<SessionRef> = state.sessions.read().expect("session map poisoned").values().cloned().collect();
    let st = state.clone();
    tokio::task::spawn_blocking(move || allocate_blocking(&st, &req, &sessions))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
        .map(Json)
}

/// Runs a mechanism on the cohort with every reported live student in her
/// slot: her report replaces the simulated one and, for the ML mechanisms,
/// her final model replaces simulated elicitation.
fn allocate_blocking(state: &AppState, req: &AllocateRequest, sessions: &[SessionRef]) -> Result<AllocateResponse, ServiceError> {
    let kind = req.kind.unwrap_or(MechanismKind::Mlcm);
    let mut market = state.market.clone();
    let mut live = Vec::new();
    let mut models = BTreeMap::new();
    for s in sessions {
        let s = s.lock().unwrap_or_else(|e| e.into_inner());
        let (Some(report), Some(model)) = (s.report(), s.final_model()) else {
            continue;
        };
        market.reports[s.student] = report.clone();
        models.insert(s.student, model);
        live.push((s.id, s.student));
    }
    let cfg = MechanismConfig {
        kind,
        n_queries: req.n_queries.unwrap_or(state.ctx.mechanism.n_queries),
        query_algorithm: req.query_algorithm.unwrap_or(state.ctx.mechanism.query_algorithm),
        seed: req.seed.unwrap_or(state.seed),
        ..state.ctx.mechanism.clone()
    };
    let result = if kind.is_ml() {
        run_ml_with_models(&market, &cfg, &models)?
    } else {
        run_mechanism(&market, &cfg)?
    };
    let sessions = live
        .iter()
        .map(|&(id, i)| {
            let x = result.allocation[i];
            LiveAssignment {
                session: id,
                student: i,
                schedule: ScheduleView {
                    courses: x,
                    names: x.courses().map(|j| state.ctx.course_names[j].clone()).collect(),
                    cost: cost(&result.prices, x),
                },
                value: if kind.is_ml() {
                    models[&i].predict(x)
                } else {
                    market.reports[i].eval(x)
                },
            }
        })
        .collect();
    let simulated: Vec<f64> = result
        .utilities
        .iter()
        .enumerate()
        .filter(|(i, _)| !models.contains_key(i))
        .map(|(_, &u)| u)
        .collect();
    Ok(AllocateResponse {
        kind,
        prices: result.prices,
        sessions,
        cohort_mean_utility: if simulated.is_empty() {
            0.0
        } else {
            simulated.iter().sum::<f64>() / simulated.len() as f64
        },
    })
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/report", put(put_report))
        .route("/sessions/{id}/next-query", get(next_query))
        .route("/sessions/{id}/answer", post(post_answer))
        .route("/sessions/{id}/summary", get(summary))
        .route("/allocate", post(allocate))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
