//! One live student: report, elicitation and the events that reproduce them.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use courselab::catalog::{affordable, cost, Schedule, ScheduleSpace};
use courselab::elicitation::{ComparisonQuery, ElicitationSession, Next, QueryAlgorithm};
use courselab::error::LabError;
use courselab::mechanism::{initial_model, MechanismConfig};
use courselab::reporting::GuiReport;
use courselab::valuemodel::MonotoneValueModel;

use crate::error::ServiceError;

/// What every session of one service shares.
#[derive(Clone, Debug)]
pub struct SessionContext {
    pub space: Arc<ScheduleSpace>,
    pub prices: Vec<f64>,
    pub course_names: Vec<String>,
    pub mechanism: MechanismConfig,
}

impl SessionContext {
    pub fn m(&self) -> usize {
        self.space.m()
    }

    pub fn describe(&self, x: Schedule) -> ScheduleView {
        ScheduleView {
            courses: x,
            names: x.courses().map(|j| self.course_names[j].clone()).collect(),
            cost: cost(&self.prices, x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Status {
    Reporting,
    Eliciting,
    Done,
}

/// Log entry; replaying a session's events in order rebuilds it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        id: u64,
        student: usize,
        algorithm: QueryAlgorithm,
        seed: u64,
        budget: f64,
        prices: Vec<f64>,
    },
    Report {
        report: GuiReport,
    },
    Query {
        query: ComparisonQuery,
    },
    Answer {
        query_id: u64,
        winner: Schedule,
    },
    /// Model after the preceding event, for verification on replay.
    Checkpoint {
        model: MonotoneValueModel,
    },
    Finished,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleView {
    pub courses: Schedule,
    pub names: Vec<String>,
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryView {
    pub id: u64,
    pub left: ScheduleView,
    pub right: ScheduleView,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedSchedule {
    #[serde(flatten)]
    pub schedule: ScheduleView,
    pub value: f64,
}

#[derive(Debug)]
pub struct LiveSession {
    pub id: u64,
    pub student: usize,
    pub algorithm: QueryAlgorithm,
    pub seed: u64,
    pub budget: f64,
    report: Option<GuiReport>,
    elicitation: Option<ElicitationSession>,
    done: bool,
}

impl LiveSession {
    pub fn new(id: u64, student: usize, algorithm: QueryAlgorithm, seed: u64, budget: f64) -> Self {
        LiveSession {
            id,
            student,
            algorithm,
            seed,
            budget,
            report: None,
            elicitation: None,
            done: false,
        }
    }

    pub fn created_event(&self, ctx: &SessionContext) -> Event {
        Event::Created {
            id: self.id,
            student: self.student,
            algorithm: self.algorithm,
            seed: self.seed,
            budget: self.budget,
            prices: ctx.prices.clone(),
        }
    }

    pub fn status(&self) -> Status {
        match (&self.elicitation, self.done) {
            (None, _) => Status::Reporting,
            (Some(_), false) => Status::Eliciting,
            (Some(_), true) => Status::Done,
        }
    }

    pub fn report(&self) -> Option<&GuiReport> {
        self.report.as_ref()
    }

    pub fn n_answered(&self) -> usize {
        self.elicitation.as_ref().map_or(0, ElicitationSession::n_answered)
    }

    pub fn inferred_pairs(&self) -> usize {
        self.elicitation.as_ref().map_or(0, ElicitationSession::inferred_pairs)
    }

    /// Model used for allocation: the current model plus any direct answers
    /// about a schedule still being inserted.
    pub fn final_model(&self) -> Option<MonotoneValueModel> {
        self.elicitation.as_ref().map(ElicitationSession::final_model)
    }

    fn current_model(&self) -> Option<&MonotoneValueModel> {
        self.elicitation.as_ref().map(ElicitationSession::model)
    }

    /// Validates the report and fits the student's initial model.
    pub fn submit_report(&mut self, ctx: &SessionContext, report: GuiReport) -> Result<Vec<Event>, ServiceError> {
        if self.report.is_some() {
            return Err(ServiceError::Conflict("report already submitted".into()));
        }
        report
            .validate(ctx.m())
            .map_err(|e| ServiceError::Unprocessable(e.to_string()))?;
        let report = report.with_len(ctx.m());
        let cfg = MechanismConfig {
            seed: self.seed,
            ..ctx.mechanism.clone()
        };
        let model = initial_model(&report, &ctx.space, &cfg, self.student).map_err(ServiceError::from)?;
        let session = ElicitationSession::new(
            self.algorithm,
            model.clone(),
            ctx.space.clone(),
            ctx.prices.clone(),
            self.budget,
            ctx.mechanism.train.clone(),
            self.seed,
        )?;
        self.report = Some(report.clone());
        self.elicitation = Some(session);
        Ok(vec![Event::Report { report }, Event::Checkpoint { model }])
    }

    /// The outstanding query, or a new one. `None` when the session is done.
    pub fn next_query(&mut self) -> Result<(Option<ComparisonQuery>, Vec<Event>), ServiceError> {
        if self.done {
            return Ok((None, Vec::new()));
        }
        let Some(session) = self.elicitation.as_mut() else {
            return Err(ServiceError::Conflict("submit a report first".into()));
        };
        if let Some(q) = session.outstanding() {
            return Ok((Some(q), Vec::new()));
        }
        match session.next_query()? {
            Next::Query(q) => Ok((Some(q.clone()), vec![Event::Query { query: q }])),
            Next::Done => {
                self.done = true;
                Ok((None, vec![Event::Finished]))
            }
        }
    }

    pub fn answer(&mut self, query_id: u64, winner: Schedule) -> Result<Vec<Event>, ServiceError> {
        let Some(session) = self.elicitation.as_mut() else {
            return Err(ServiceError::Conflict("submit a report first".into()));
        };
        session.submit_answer(query_id, winner)?;
        Ok(vec![
            Event::Answer { query_id, winner },
            Event::Checkpoint {
                model: session.model().clone(),
            },
        ])
    }

    /// The `n` affordable schedules the final model values most.
    pub fn top(&self, ctx: &SessionContext, n: usize) -> Result<Vec<RankedSchedule>, ServiceError> {
        let model = self
            .final_model()
            .ok_or_else(|| ServiceError::Conflict("submit a report first".into()))?;
        let mut ranked: Vec<(f64, Schedule)> = ctx
            .space
            .schedules()
            .iter()
            .filter(|&&x| affordable(cost(&ctx.prices, x), self.budget))
            .map(|&x| (model.predict(x), x))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.bits().cmp(&b.1.bits())));
        Ok(ranked
            .into_iter()
            .take(n)
            .map(|(value, x)| RankedSchedule {
                schedule: ctx.describe(x),
                value,
            })
            .collect())
    }

    /// Rebuilds a session from its log, checking every recorded query and
    /// checkpoint against the recomputed state.
    pub fn replay(ctx: &SessionContext, events: &[Event]) -> Result<LiveSession, ServiceError> {
        let corrupt = |msg: String| ServiceError::Internal(format!("log replay failed: {msg}"));
        let Some(Event::Created {
            id,
            student,
            algorithm,
            seed,
            budget,
            prices,
        }) = events.first()
        else {
            return Err(corrupt("log does not start with a creation event".into()));
        };
        if *prices != ctx.prices {
            return Err(corrupt(format!("session {id} was created under different prices")));
        }
        let mut s = LiveSession::new(*id, *student, *algorithm, *seed, *budget);
        for e in &events[1..] {
            match e {
                Event::Created { .. } => return Err(corrupt("duplicate creation event".into())),
                Event::Report { report } => {
                    s.submit_report(ctx, report.clone())?;
                }
                Event::Query { query } => {
                    let (q, _) = s.next_query()?;
                    if q.as_ref() != Some(query) {
                        return Err(corrupt(format!("session {id}: query {} differs on replay", query.id)));
                    }
                }
                Event::Answer { query_id, winner } => {
                    s.answer(*query_id, *winner)?;
                }
                Event::Checkpoint { model } => {
                    if s.current_model() != Some(model) {
                        return Err(corrupt(format!("session {id}: model checkpoint differs on replay")));
                    }
                }
                Event::Finished => {
                    let (q, _) = s.next_query()?;
                    if q.is_some() || !s.done {
                        return Err(corrupt(format!("session {id}: expected the session to be finished")));
                    }
                }
            }
        }
        Ok(s)
    }
}

impl From<LabError> for ServiceError {
    fn from(e: LabError) -> Self {
        match e {
            LabError::Protocol(m) => ServiceError::Conflict(m),
            LabError::Validation(m) => ServiceError::Unprocessable(m),
            other => ServiceError::Internal(other.to_string()),
        }
    }
}
