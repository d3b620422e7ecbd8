//! Monotone value networks: one hidden layer of bounded ReLUs with
//! nonnegative weights and nonpositive biases, so the empty schedule is worth
//! exactly 0 and adding a course never lowers the prediction. A linear variant
//! with unconstrained coefficients shares the trainer.
//!
//! Training has two phases: full-batch regression (MAE) on cardinal data
//! derived from a report, then full-batch fine-tuning with a logistic
//! (Bradley–Terry) loss on ordinal pairs from comparison answers. Targets are
//! divided by `scale` (the largest cardinal target) during training.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Permissibility, Schedule, ScheduleSpace};
use crate::error::{LabError, Result};
use crate::reporting::{GuiReport, ADJ_MAX, BASE_MAX};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Mvnn { hidden: usize, cutoff: f64 },
    Linear,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::Mvnn {
            hidden: 20,
            cutoff: 1.0,
        }
    }
}

/// Parameters are stored flat. For the network: `W` as `m` rows of `hidden`
/// weights (row `j` holds course `j`'s weights into every hidden unit), then
/// the `hidden` biases, then the `hidden` output weights. For the linear
/// variant: `m` coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotoneValueModel {
    pub arch: Architecture,
    pub m: usize,
    pub scale: f64,
    pub theta: Vec<f64>,
}

impl MonotoneValueModel {
    /// Network with weights drawn from U(0, 1/sqrt(fan-in)) and zero biases.
    pub fn new_mvnn<R: Rng>(m: usize, hidden: usize, cutoff: f64, scale: f64, rng: &mut R) -> Self {
        let mut theta = Vec::with_capacity(m * hidden + 2 * hidden);
        let w_hi = 1.0 / (m as f64).sqrt();
        for _ in 0..m * hidden {
            theta.push(rng.random_range(0.0..w_hi));
        }
        theta.extend(std::iter::repeat_n(0.0, hidden));
        let v_hi = 1.0 / (hidden as f64).sqrt();
        for _ in 0..hidden {
            theta.push(rng.random_range(0.0..v_hi));
        }
        MonotoneValueModel {
            arch: Architecture::Mvnn { hidden, cutoff },
            m,
            scale: positive_scale(scale),
            theta,
        }
    }

    pub fn new_linear(m: usize, scale: f64) -> Self {
        MonotoneValueModel {
            arch: Architecture::Linear,
            m,
            scale: positive_scale(scale),
            theta: vec![0.0; m],
        }
    }

    pub fn init<R: Rng>(arch: Architecture, m: usize, scale: f64, rng: &mut R) -> Self {
        match arch {
            Architecture::Mvnn { hidden, cutoff } => Self::new_mvnn(m, hidden, cutoff, scale, rng),
            Architecture::Linear => Self::new_linear(m, scale),
        }
    }

    /// Linear model with the given coefficients in utility units.
    pub fn linear_from(coefficients: &[f64], scale: f64) -> Self {
        let scale = positive_scale(scale);
        MonotoneValueModel {
            arch: Architecture::Linear,
            m: coefficients.len(),
            scale,
            theta: coefficients.iter().map(|c| c / scale).collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    /// Linear coefficients in utility units (linear variant only).
    pub fn coefficients(&self) -> Option<Vec<f64>> {
        matches!(self.arch, Architecture::Linear).then(|| self.theta.iter().map(|c| c * self.scale).collect())
    }

    /// Prediction in normalized units.
    #[inline]
    pub fn raw(&self, x: Schedule) -> f64 {
        match self.arch {
            Architecture::Linear => x.courses().map(|j| self.theta[j]).sum(),
            Architecture::Mvnn { hidden, cutoff } => {
                let m = self.m;
                let (w, rest) = self.theta.split_at(m * hidden);
                let (b, v) = rest.split_at(hidden);
                let mut z = [0.0f64; 64];
                let z = if hidden <= 64 { &mut z[..hidden] } else { return self.raw_wide(x) };
                z.copy_from_slice(b);
                for j in x.courses() {
                    for (zk, wk) in z.iter_mut().zip(&w[j * hidden..(j + 1) * hidden]) {
                        *zk += wk;
                    }
                }
                z.iter().zip(v).map(|(&zk, &vk)| vk * zk.clamp(0.0, cutoff)).sum()
            }
        }
    }

    fn raw_wide(&self, x: Schedule) -> f64 {
        let Architecture::Mvnn { hidden, cutoff } = self.arch else {
            unreachable!()
        };
        let m = self.m;
        let (w, rest) = self.theta.split_at(m * hidden);
        let (b, v) = rest.split_at(hidden);
        let mut z = b.to_vec();
        for j in x.courses() {
            for (zk, wk) in z.iter_mut().zip(&w[j * hidden..(j + 1) * hidden]) {
                *zk += wk;
            }
        }
        z.iter().zip(v).map(|(&zk, &vk)| vk * zk.clamp(0.0, cutoff)).sum()
    }

    /// Predicted utility of `x`.
    #[inline]
    pub fn predict(&self, x: Schedule) -> f64 {
        self.raw(x) * self.scale
    }

    /// Adds `weight * ∂raw(x)/∂θ` to `grad` and returns `raw(x)`.
    pub fn accumulate_grad(&self, x: Schedule, weight: f64, grad: &mut [f64]) -> f64 {
        match self.arch {
            Architecture::Linear => {
                let mut out = 0.0;
                for j in x.courses() {
                    out += self.theta[j];
                    grad[j] += weight;
                }
                out
            }
            Architecture::Mvnn { hidden, cutoff } => {
                let m = self.m;
                let (w, rest) = self.theta.split_at(m * hidden);
                let (b, v) = rest.split_at(hidden);
                let mut z = b.to_vec();
                for j in x.courses() {
                    for (zk, wk) in z.iter_mut().zip(&w[j * hidden..(j + 1) * hidden]) {
                        *zk += wk;
                    }
                }
                let (gw, grest) = grad.split_at_mut(m * hidden);
                let (gb, gv) = grest.split_at_mut(hidden);
                let mut out = 0.0;
                for k in 0..hidden {
                    let a = z[k].clamp(0.0, cutoff);
                    out += v[k] * a;
                    gv[k] += weight * a;
                    if z[k] > 0.0 && z[k] < cutoff {
                        let d = weight * v[k];
                        gb[k] += d;
                        for j in x.courses() {
                            gw[j * hidden + k] += d;
                        }
                    }
                }
                out
            }
        }
    }

    /// Restores the sign constraints: weights ≥ 0, hidden biases ≤ 0.
    pub fn project(&mut self) {
        if let Architecture::Mvnn { hidden, .. } = self.arch {
            let mh = self.m * hidden;
            for (i, t) in self.theta.iter_mut().enumerate() {
                if i >= mh && i < mh + hidden {
                    *t = t.min(0.0);
                } else {
                    *t = t.max(0.0);
                }
            }
        }
    }

    pub fn satisfies_constraints(&self) -> bool {
        match self.arch {
            Architecture::Linear => true,
            Architecture::Mvnn { hidden, .. } => {
                let mh = self.m * hidden;
                self.theta.iter().enumerate().all(|(i, &t)| {
                    if i >= mh && i < mh + hidden {
                        t <= 0.0
                    } else {
                        t >= 0.0
                    }
                })
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: MonotoneValueModel = serde_json::from_str(s)?;
        let expected = match model.arch {
            Architecture::Linear => model.m,
            Architecture::Mvnn { hidden, .. } => model.m * hidden + 2 * hidden,
        };
        if model.theta.len() != expected {
            return Err(LabError::validation("checkpoint parameter count mismatch"));
        }
        Ok(model)
    }
}

fn positive_scale(scale: f64) -> f64 {
    if scale.is_finite() && scale > 0.0 {
        scale
    } else {
        1.0
    }
}

/// Which rule produced a cardinal training point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BundleType {
    /// A single reported course or a pair with a reported adjustment.
    T1,
    /// A full-size bundle of reported courses.
    T2,
    /// A full-size bundle with at least one unreported course.
    T3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CardinalPoint {
    pub x: Schedule,
    pub y: f64,
    pub kind: BundleType,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CardinalDataset {
    pub points: Vec<CardinalPoint>,
}

impl CardinalDataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn max_target(&self) -> f64 {
        self.points.iter().map(|p| p.y).fold(0.0, f64::max)
    }

    pub fn push(&mut self, x: Schedule, y: f64, kind: BundleType) {
        self.points.push(CardinalPoint { x, y, kind });
    }
}

/// Preference pairs `(better, worse)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OrdinalDataset {
    pub pairs: Vec<(Schedule, Schedule)>,
}

impl OrdinalDataset {
    /// Every pair implied by a best-first sorted list.
    pub fn from_sorted(sorted: &[Schedule]) -> Self {
        let mut pairs = Vec::with_capacity(sorted.len() * sorted.len().saturating_sub(1) / 2);
        for (i, &a) in sorted.iter().enumerate() {
            for &b in &sorted[i + 1..] {
                pairs.push((a, b));
            }
        }
        OrdinalDataset { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Value used for an unreported course: the expected value of a uniform draw
/// between 0 and the lowest reported base (or between 0 and 100 when nothing
/// was reported).
pub fn imputed_base(r: &GuiReport) -> f64 {
    r.lowest_reported().unwrap_or(BASE_MAX) / 2.0
}

/// Builds the cardinal training set from a report.
///
/// T1 holds every reported course and every pair with a reported adjustment.
/// T2 holds up to `n_t2` distinct bundles of `k` reported courses (fewer when
/// fewer reported courses exist). T3 holds up to `n_t3` distinct bundles of
/// `k` courses containing at least one unreported course, whose unreported
/// courses are valued at [`imputed_base`].
pub fn build_cardinal<R: Rng>(
    r: &GuiReport,
    perm: &Permissibility,
    m: usize,
    n_t2: usize,
    n_t3: usize,
    rng: &mut R,
) -> Result<CardinalDataset> {
    let reported: Vec<usize> = (0..m).filter(|&j| r.is_reported(j)).collect();
    if reported.is_empty() && n_t3 == 0 {
        return Err(LabError::validation("empty report and no imputed bundles requested"));
    }
    let mut data = CardinalDataset::default();
    let mut seen = HashSet::new();
    for &j in &reported {
        let x = Schedule::from_courses([j]);
        if perm.is_permissible(x) && seen.insert(x) {
            data.push(x, r.eval(x), BundleType::T1);
        }
    }
    for &(a, b) in r.adjustments().keys() {
        let x = Schedule::from_courses([a, b]);
        if perm.is_permissible(x) && seen.insert(x) {
            data.push(x, r.eval(x), BundleType::T1);
        }
    }

    let k = perm.max_courses.min(m);
    let size = k.min(reported.len());
    if size > 0 {
        let available = crate::catalog::schedule_count_bound(reported.len(), size)
            - crate::catalog::schedule_count_bound(reported.len(), size - 1);
        let target = (n_t2 as u128).min(available) as usize;
        let mut added = 0;
        let mut attempts = 0;
        while added < target && attempts < 50 * n_t2.max(1) {
            attempts += 1;
            let x = Schedule::from_courses(sample(rng, reported.len(), size).into_iter().map(|i| reported[i]));
            if perm.is_permissible(x) && seen.insert(x) {
                data.push(x, r.eval(x), BundleType::T2);
                added += 1;
            }
        }
    }

    if reported.len() < m && k > 0 {
        let fill = imputed_base(r);
        let reported_set = r.reported();
        let mut added = 0;
        let mut attempts = 0;
        while added < n_t3 && attempts < 50 * n_t3 {
            attempts += 1;
            let x = Schedule::from_courses(sample(rng, m, k));
            let missing = x.len() - x.intersect(reported_set).len();
            if missing == 0 || !perm.is_permissible(x) || !seen.insert(x) {
                continue;
            }
            data.push(x, r.eval(x) + missing as f64 * fill, BundleType::T3);
            added += 1;
        }
    }
    if data.is_empty() {
        return Err(LabError::validation("no permissible cardinal bundles"));
    }
    Ok(data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub t_reg: usize,
    pub eta_reg: f64,
    pub lambda_reg: f64,
    pub t_class: usize,
    pub eta_class: f64,
    pub lambda_class: f64,
    #[serde(default)]
    pub ordinal_units: OrdinalUnits,
    pub arch: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            t_reg: 100,
            eta_reg: 1e-2,
            lambda_reg: 1e-3,
            t_class: 10,
            eta_class: 1e-2,
            lambda_class: 0.0,
            ordinal_units: OrdinalUnits::default(),
            arch: Architecture::default(),
        }
    }
}

/// Adam on a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            theta[i] -= self.lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

fn l2(theta: &[f64]) -> f64 {
    theta.iter().map(|t| t * t).sum()
}

/// Mean absolute error on normalized targets plus `lambda·‖θ‖²`.
pub fn regression_loss(model: &MonotoneValueModel, data: &CardinalDataset, lambda: f64) -> f64 {
    let n = data.len().max(1) as f64;
    let mae: f64 = data
        .points
        .iter()
        .map(|p| (model.raw(p.x) - p.y / model.scale).abs())
        .sum::<f64>()
        / n;
    mae + lambda * l2(&model.theta)
}

/// Gradient of [`regression_loss`] (sign subgradient at zero residual is 0).
pub fn regression_grad(model: &MonotoneValueModel, data: &CardinalDataset, lambda: f64, grad: &mut [f64]) {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let n = data.len().max(1) as f64;
    let mut scratch = vec![0.0; grad.len()];
    for p in &data.points {
        scratch.iter_mut().for_each(|g| *g = 0.0);
        let out = model.accumulate_grad(p.x, 1.0, &mut scratch);
        let r = out - p.y / model.scale;
        let s = if r > 0.0 {
            1.0
        } else if r < 0.0 {
            -1.0
        } else {
            0.0
        };
        if s != 0.0 {
            for (g, d) in grad.iter_mut().zip(&scratch) {
                *g += s * d / n;
            }
        }
    }
    for (g, t) in grad.iter_mut().zip(&model.theta) {
        *g += 2.0 * lambda * t;
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Scale of the value difference fed to the sigmoid of the ordinal loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrdinalUnits {
    /// Differences in utility points: well-separated pairs barely contribute.
    #[default]
    Utility,
    /// Differences in the normalized training scale.
    Normalized,
}

impl OrdinalUnits {
    fn factor(self, model: &MonotoneValueModel) -> f64 {
        match self {
            OrdinalUnits::Utility => model.scale,
            OrdinalUnits::Normalized => 1.0,
        }
    }
}

/// Mean binary cross-entropy of σ(M(better) − M(worse)) against label 1, plus
/// `lambda·‖θ‖²`.
pub fn classification_loss(model: &MonotoneValueModel, data: &OrdinalDataset, lambda: f64, units: OrdinalUnits) -> f64 {
    let n = data.len().max(1) as f64;
    let c = units.factor(model);
    let bce: f64 = data
        .pairs
        .iter()
        .map(|&(a, b)| softplus(-c * (model.raw(a) - model.raw(b))))
        .sum::<f64>()
        / n;
    bce + lambda * l2(&model.theta)
}

pub fn classification_grad(
    model: &MonotoneValueModel,
    data: &OrdinalDataset,
    lambda: f64,
    units: OrdinalUnits,
    grad: &mut [f64],
) {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let n = data.len().max(1) as f64;
    let c = units.factor(model);
    for &(a, b) in &data.pairs {
        let d = c * (model.raw(a) - model.raw(b));
        // d/dd softplus(-d) = -σ(-d)
        let w = -c * sigmoid(-d) / n;
        model.accumulate_grad(a, w, grad);
        model.accumulate_grad(b, -w, grad);
    }
    for (g, t) in grad.iter_mut().zip(&model.theta) {
        *g += 2.0 * lambda * t;
    }
}

/// Phase 1: `t_reg` full-batch Adam steps on the regression loss. Returns the
/// loss before each step.
pub fn train_regression(model: &mut MonotoneValueModel, data: &CardinalDataset, cfg: &TrainConfig) -> Vec<f64> {
    let mut adam = Adam::new(model.n_params(), cfg.eta_reg);
    let mut grad = vec![0.0; model.n_params()];
    let mut history = Vec::with_capacity(cfg.t_reg);
    if data.is_empty() {
        return history;
    }
    for _ in 0..cfg.t_reg {
        history.push(regression_loss(model, data, cfg.lambda_reg));
        regression_grad(model, data, cfg.lambda_reg, &mut grad);
        adam.step(&mut model.theta, &grad);
        model.project();
    }
    history
}

/// Phase 2: `t_class` full-batch Adam steps on the ordinal loss, starting from
/// a fresh optimizer state.
pub fn train_classification(model: &mut MonotoneValueModel, data: &OrdinalDataset, cfg: &TrainConfig) -> Vec<f64> {
    let mut adam = Adam::new(model.n_params(), cfg.eta_class);
    let mut grad = vec![0.0; model.n_params()];
    let mut history = Vec::with_capacity(cfg.t_class);
    if data.is_empty() {
        return history;
    }
    for _ in 0..cfg.t_class {
        history.push(classification_loss(model, data, cfg.lambda_class, cfg.ordinal_units));
        classification_grad(model, data, cfg.lambda_class, cfg.ordinal_units, &mut grad);
        adam.step(&mut model.theta, &grad);
        model.project();
    }
    history
}

/// Runs both phases in order and returns the trained copy.
pub fn train(
    model: &MonotoneValueModel,
    card: &CardinalDataset,
    ord: &OrdinalDataset,
    cfg: &TrainConfig,
) -> MonotoneValueModel {
    let mut out = model.clone();
    train_regression(&mut out, card, cfg);
    train_classification(&mut out, ord, cfg);
    out
}

/// Fresh model fitted to the cardinal data only, with `scale` set to the
/// largest target.
pub fn fit_cardinal<R: Rng>(card: &CardinalDataset, m: usize, cfg: &TrainConfig, rng: &mut R) -> MonotoneValueModel {
    let mut model = MonotoneValueModel::init(cfg.arch, m, card.max_target(), rng);
    train_regression(&mut model, card, cfg);
    model
}

/// Highest-predicted affordable schedule not in `exclude`; ties go to the
/// smallest bit pattern, and the empty schedule is returned if nothing else
/// qualifies.
pub fn argmax_model<E: Fn(Schedule) -> bool>(
    model: &MonotoneValueModel,
    space: &ScheduleSpace,
    prices: &[f64],
    budget: f64,
    exclude: E,
) -> Schedule {
    space.argmax_affordable(prices, budget, exclude, |x| model.predict(x))
}

fn pair_index(m: usize, a: usize, b: usize) -> usize {
    // position of (a, b), a < b, in row-major upper-triangle order
    m + a * (2 * m - a - 1) / 2 + (b - a - 1)
}

fn features(m: usize, x: Schedule, out: &mut Vec<usize>) {
    out.clear();
    let courses: Vec<usize> = x.courses().collect();
    out.extend(courses.iter().copied());
    for (i, &a) in courses.iter().enumerate() {
        for &b in &courses[i + 1..] {
            out.push(pair_index(m, a, b));
        }
    }
}

/// Fits base values and pairwise adjustments to `value` by bound-constrained
/// least squares (accelerated projected gradient) over degree-2 indicator
/// features of `samples`. Bases are confined to `[0, 100]` and adjustments to
/// `[-200, 200]`.
pub fn project_values<F: Fn(Schedule) -> f64>(m: usize, samples: &[Schedule], value: F, iterations: usize) -> GuiReport {
    let p = m + m * (m - 1) / 2;
    let n = samples.len().max(1) as f64;
    let mut gram = vec![0.0; p * p];
    let mut rhs = vec![0.0; p];
    let mut active = Vec::new();
    for &x in samples {
        let y = value(x);
        features(m, x, &mut active);
        for &a in &active {
            rhs[a] += y / n;
            for &b in &active {
                gram[a * p + b] += 1.0 / n;
            }
        }
    }
    let lower: Vec<f64> = (0..p).map(|i| if i < m { 0.0 } else { -ADJ_MAX }).collect();
    let upper: Vec<f64> = (0..p).map(|i| if i < m { BASE_MAX } else { ADJ_MAX }).collect();

    // Lipschitz constant of the gradient: largest eigenvalue of the Gram matrix
    let mut v = vec![1.0 / (p as f64).sqrt(); p];
    let mut lip = 1.0;
    for _ in 0..100 {
        let w = matvec(&gram, &v, p);
        let norm = w.iter().map(|t| t * t).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        lip = norm;
        v = w.into_iter().map(|t| t / norm).collect();
    }
    let step = 1.0 / (lip * 1.01);

    let mut w = vec![0.0; p];
    let mut yk = w.clone();
    let mut tk = 1.0f64;
    for _ in 0..iterations {
        let g = matvec(&gram, &yk, p);
        let next: Vec<f64> = (0..p)
            .map(|i| (yk[i] - step * (g[i] - rhs[i])).clamp(lower[i], upper[i]))
            .collect();
        let t_next = (1.0 + (1.0 + 4.0 * tk * tk).sqrt()) / 2.0;
        let mom = (tk - 1.0) / t_next;
        yk = (0..p).map(|i| next[i] + mom * (next[i] - w[i])).collect();
        w = next;
        tk = t_next;
    }

    let mut r = GuiReport::new(m);
    for (j, &b) in w.iter().enumerate().take(m) {
        r.set_base(j, b);
    }
    for a in 0..m {
        for b in a + 1..m {
            let v = w[pair_index(m, a, b)];
            if v.abs() > 1e-9 {
                r.set_adjustment(a, b, v);
            }
        }
    }
    r
}

fn matvec(a: &[f64], x: &[f64], p: usize) -> Vec<f64> {
    (0..p)
        .map(|i| a[i * p..(i + 1) * p].iter().zip(x).map(|(u, v)| u * v).sum())
        .collect()
}

/// Projects a trained model into the reporting language using `k_samples`
/// schedules drawn uniformly from the permissible space.
pub fn project_to_gui<R: Rng>(
    model: &MonotoneValueModel,
    space: &ScheduleSpace,
    k_samples: usize,
    rng: &mut R,
) -> Result<GuiReport> {
    let m = space.m();
    if k_samples < m + m * (m - 1) / 2 {
        return Err(LabError::validation(format!(
            "projection needs at least {} samples",
            m + m * (m - 1) / 2
        )));
    }
    let all = space.schedules();
    let samples: Vec<Schedule> = (0..k_samples).map(|_| all[rng.random_range(0..all.len())]).collect();
    Ok(project_values(m, &samples, |x| model.predict(x), 3000))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn toy_card() -> CardinalDataset {
        let mut d = CardinalDataset::default();
        for (j, y) in [(0, 60.0), (1, 30.0), (2, 45.0), (3, 10.0)] {
            d.push(Schedule::from_courses([j]), y, BundleType::T1);
        }
        d.push(Schedule::from_courses([0, 1]), 85.0, BundleType::T2);
        d.push(Schedule::from_courses([2, 3]), 50.0, BundleType::T2);
        d
    }

    #[test]
    fn empty_schedule_is_worth_zero() {
        let mut rng = seed::rng(1, &[]);
        let mut model = MonotoneValueModel::new_mvnn(6, 8, 1.0, 50.0, &mut rng);
        assert_eq!(model.predict(Schedule::EMPTY), 0.0);
        for t in model.theta.iter_mut() {
            *t = rng.random_range(-1.0..1.0);
        }
        model.project();
        assert_eq!(model.predict(Schedule::EMPTY), 0.0);
    }

    #[test]
    fn single_course_report_gives_single_t1_point() {
        let mut r = GuiReport::new(4);
        r.set_base(0, 60.0);
        let perm = Permissibility::with_max_courses(2);
        let d = build_cardinal(&r, &perm, 4, 0, 0, &mut seed::rng(0, &[])).unwrap();
        assert_eq!(d.points.len(), 1);
        assert_eq!((d.points[0].x, d.points[0].y), (Schedule::from_courses([0]), 60.0));
    }

    #[test]
    fn imputation_uses_half_the_lowest_report() {
        let mut r = GuiReport::new(4);
        r.set_base(0, 90.0);
        r.set_base(1, 42.0);
        assert_eq!(imputed_base(&r), 21.0);
        let perm = Permissibility::with_max_courses(2);
        let d = build_cardinal(&r, &perm, 4, 0, 5, &mut seed::rng(0, &[])).unwrap();
        for p in d.points.iter().filter(|p| p.kind == BundleType::T3) {
            let missing = p.x.courses().filter(|&j| !r.is_reported(j)).count();
            assert!(missing >= 1);
            assert_eq!(p.y, r.eval(p.x) + 21.0 * missing as f64);
        }
        assert_eq!(imputed_base(&GuiReport::new(3)), 50.0);
    }

    #[test]
    fn regression_without_ordinal_data_descends() {
        let d = toy_card();
        let mut model = MonotoneValueModel::new_linear(4, d.max_target());
        let cfg = TrainConfig {
            t_reg: 200,
            eta_reg: 1e-3,
            lambda_reg: 0.0,
            arch: Architecture::Linear,
            ..TrainConfig::default()
        };
        let hist = train_regression(&mut model, &d, &cfg);
        // full batch with a small learning rate: loss falls until it reaches
        // the oscillation floor of sign-gradient steps
        let first_half = &hist[..100];
        assert!(first_half.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(hist.last().unwrap() < &hist[0]);
        let trained = train(&MonotoneValueModel::new_linear(4, d.max_target()), &d, &OrdinalDataset::default(), &cfg);
        assert_eq!(trained, model);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = seed::rng(3, &[]);
        let model = MonotoneValueModel::new_mvnn(25, 20, 1.0, 123.456, &mut rng);
        let back = MonotoneValueModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn linear_argmax_matches_worked_example() {
        let model = MonotoneValueModel::linear_from(&[75.0, 77.0, 42.0, 45.0], 152.0);
        let space = ScheduleSpace::new(&Permissibility::with_max_courses(2), 4).unwrap();
        let x = argmax_model(&model, &space, &[0.6, 0.6, 0.3, 0.3], 1.0, |_| false);
        assert_eq!(x, Schedule::from_courses([1, 3]));
        let zero = MonotoneValueModel::new_linear(4, 1.0);
        assert_eq!(argmax_model(&zero, &space, &[0.6, 0.6, 0.3, 0.3], 1.0, |_| false), Schedule::EMPTY);
    }

    #[test]
    fn pair_indexing_is_dense() {
        let m = 6;
        let mut seen = HashSet::new();
        for a in 0..m {
            for b in a + 1..m {
                let i = pair_index(m, a, b);
                assert!(i >= m && i < m + m * (m - 1) / 2);
                assert!(seen.insert(i));
            }
        }
    }
}
