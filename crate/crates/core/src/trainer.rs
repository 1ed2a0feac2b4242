//! EM-wrapped sequential BPR training.
//!
//! Every training unit is a triple `(u, i, m, n)`: user `u` moved from `i` to
//! the observed `m`, and `n` is a sampled venue `u` never moved to from `i`.
//! The E-step computes the posterior over patterns
//!
//! ```text
//! gamma(s) ∝ sigmoid(x^s(u,i,m) - x^s(u,i,n)) * exp(alpha^s · g(c))
//! ```
//!
//! and the M-step ascends the expected complete-data log posterior with the
//! responsibilities held fixed. Two schedules are provided: stochastic ascent
//! one triple at a time (the production path), and a full-batch variant over
//! a fixed triple set that backtracks until the expected objective improves,
//! which makes the marginal objective monotone.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkin::{build_transitions, Catalog, Dataset, Provenance, Transition};
use crate::error::{Error, Result};
use crate::features::{build_feature_schema, ContextVector, FeatureSchema, DEFAULT_TIME_BINS};
use crate::math::{ln_sigmoid, log_sum_exp, sigmoid, softmax_in_place};
use crate::model::{GateMode, ModelMeta, ModelParams};
use crate::spatial::{spatial_preference, DEFAULT_MIN_DISTANCE_KM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    /// One ascent step per sampled triple, fresh negatives every epoch.
    Stochastic,
    /// Fixed triples, one batch step per epoch with backtracking.
    FullBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub num_patterns: usize,
    pub dim: usize,
    pub lambda_theta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub negatives_per_positive: usize,
    pub seed: u64,
    pub mode: GateMode,
    /// Standard deviation of the initial draw. `None` uses the prior,
    /// `sqrt(2 / lambda_theta)`.
    pub init_sigma: Option<f64>,
    /// Stop when the relative change of the audit objective drops below this.
    pub convergence_tol: f64,
    pub schedule: Schedule,
    /// Number of fixed triples the audit objective is evaluated on.
    pub audit_size: usize,
    /// Drop transitions with a longer time gap. Unset keeps every pair.
    pub max_gap_hours: Option<f64>,
    pub time_bins: usize,
    pub utc_offset_hours: f64,
    pub min_distance_km: f64,
    /// Keep gate weights at their initial values.
    pub freeze_gate: bool,
    /// In per-user mode, draw one gate block and copy it to every user
    /// instead of drawing each block independently.
    pub tied_gate_init: bool,
    /// Run a finite-difference check on one audit triple every epoch.
    pub check_gradients: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            num_patterns: 6,
            dim: 60,
            lambda_theta: 1.0,
            learning_rate: 0.05,
            epochs: 30,
            negatives_per_positive: 1,
            seed: 0,
            mode: GateMode::Global,
            init_sigma: None,
            convergence_tol: 1e-5,
            schedule: Schedule::Stochastic,
            audit_size: 2000,
            max_gap_hours: None,
            time_bins: DEFAULT_TIME_BINS,
            utc_offset_hours: 0.0,
            min_distance_km: DEFAULT_MIN_DISTANCE_KM,
            freeze_gate: false,
            tied_gate_init: false,
            check_gradients: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patterns", self.num_patterns as f64),
            ("dims", self.dim as f64),
            ("lambda", self.lambda_theta),
            ("learning rate", self.learning_rate),
            ("negatives per positive", self.negatives_per_positive as f64),
            ("distance clamp", self.min_distance_km),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(s) = self.init_sigma {
            if !(s >= 0.0) {
                return Err(Error::Config(format!("init sigma must be non-negative, got {s}")));
            }
        }
        if self.convergence_tol < 0.0 {
            return Err(Error::Config("convergence tolerance must be non-negative".into()));
        }
        Ok(())
    }

    pub fn init_sigma(&self) -> f64 {
        self.init_sigma.unwrap_or_else(|| (2.0 / self.lambda_theta).sqrt())
    }
}

/// Draws every factor, spatial weight and gate weight i.i.d. from
/// `N(0, sigma^2)` in a fixed order.
pub fn init_params(config: &TrainConfig, meta: ModelMeta, schema: FeatureSchema, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut model = ModelParams::zeros(
        config.num_patterns,
        config.dim,
        config.mode,
        schema,
        config.lambda_theta,
        config.min_distance_km,
        meta,
    )?;
    let sigma = config.init_sigma();
    if sigma == 0.0 {
        return Ok(model);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in &mut model.patterns {
        for f in [
            &mut p.user_factors,
            &mut p.next_user_factors,
            &mut p.next_prev_factors,
            &mut p.prev_factors,
        ] {
            f.as_mut_slice().iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        }
        p.rho = normal.sample(&mut rng);
    }
    if config.tied_gate_init {
        let first: Vec<f64> = (0..model.gate.block(0).len()).map(|_| normal.sample(&mut rng)).collect();
        for b in 0..model.gate.num_blocks() {
            model.gate.block_mut(b).copy_from_slice(&first);
        }
    } else {
        model
            .gate
            .as_mut_slice()
            .iter_mut()
            .for_each(|x| *x = normal.sample(&mut rng));
    }
    Ok(model)
}

/// A sampled pairwise preference: `positive` over `negative` after `prev_poi`.
#[derive(Clone, Debug, PartialEq)]
pub struct BprTriple {
    pub user: u32,
    pub prev_poi: u32,
    pub positive: u32,
    pub negative: u32,
    pub context: ContextVector,
    pub d_pos: f64,
    pub d_neg: f64,
}

/// Observed next venues per `(user, previous venue)`.
#[derive(Clone, Debug, Default)]
pub struct TrainIndex {
    observed: HashMap<(u32, u32), Vec<u32>>,
}

impl TrainIndex {
    pub fn new(transitions: &[Transition]) -> Self {
        let mut observed: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
        for t in transitions {
            observed.entry((t.user, t.prev_poi)).or_default().push(t.next_poi);
        }
        for v in observed.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        TrainIndex { observed }
    }

    pub fn observed(&self, user: u32, prev_poi: u32) -> &[u32] {
        self.observed.get(&(user, prev_poi)).map_or(&[], Vec::as_slice)
    }

    pub fn contains(&self, user: u32, prev_poi: u32, next_poi: u32) -> bool {
        self.observed(user, prev_poi).binary_search(&next_poi).is_ok()
    }

    /// Number of distinct observed `(u, i, l)` cells.
    pub fn num_cells(&self) -> usize {
        self.observed.values().map(Vec::len).sum()
    }
}

/// Draws a negative uniformly from the venues `u` never moved to from `i`.
pub fn sample_bpr_triple<R: Rng + ?Sized>(
    transition: &Transition,
    context: &ContextVector,
    index: &TrainIndex,
    catalog: &Catalog,
    rng: &mut R,
) -> Result<BprTriple> {
    let n = catalog.num_pois() as u32;
    let observed = index.observed(transition.user, transition.prev_poi);
    let free = n as usize - observed.len().min(n as usize);
    if free == 0 {
        return Err(Error::Sampling(format!(
            "user {} has moved from venue {} to every venue; no negative exists",
            transition.user, transition.prev_poi
        )));
    }
    let negative = if observed.len() * 2 <= n as usize {
        loop {
            let cand = rng.random_range(0..n);
            if observed.binary_search(&cand).is_err() {
                break cand;
            }
        }
    } else {
        // dense observed set: pick the k-th unobserved venue directly
        let mut k = rng.random_range(0..free as u32);
        let mut cand = 0u32;
        for &o in observed {
            if cand + k < o {
                break;
            }
            k -= o - cand;
            cand = o + 1;
        }
        cand + k
    };
    Ok(BprTriple {
        user: transition.user,
        prev_poi: transition.prev_poi,
        positive: transition.next_poi,
        negative,
        context: context.clone(),
        d_pos: transition.distance_km,
        d_neg: catalog.poi_distance_km(transition.prev_poi, negative),
    })
}

/// Posterior over patterns for one triple.
#[derive(Clone, Debug, PartialEq)]
pub struct Responsibilities {
    pub gamma: Vec<f64>,
}

/// Per-pattern score differences `x^s(m) - x^s(n)`.
pub fn score_gaps(model: &ModelParams, triple: &BprTriple) -> Vec<f64> {
    let (u, i, m, n) = (
        triple.user as usize,
        triple.prev_poi as usize,
        triple.positive as usize,
        triple.negative as usize,
    );
    (0..model.num_patterns())
        .map(|s| {
            model.pattern_score_unchecked(s, u, i, m, triple.d_pos) - model.pattern_score_unchecked(s, u, i, n, triple.d_neg)
        })
        .collect()
}

fn gate_logits(model: &ModelParams, triple: &BprTriple) -> Vec<f64> {
    let block = model.gate.block_of(Some(triple.user)).expect("user in range");
    let mut logits = vec![0.0; model.num_patterns()];
    model.gate.logits_into(block, &triple.context, &mut logits);
    logits
}

/// E-step for one triple, computed in log space.
pub fn responsibilities(model: &ModelParams, triple: &BprTriple) -> Responsibilities {
    let mut gamma: Vec<f64> = score_gaps(model, triple)
        .iter()
        .zip(gate_logits(model, triple))
        .map(|(&gap, logit)| ln_sigmoid(gap) + logit)
        .collect();
    softmax_in_place(&mut gamma);
    Responsibilities { gamma }
}

/// Gradient of the expected complete-data objective of one triple with
/// respect to the parameters it touches.
#[derive(Clone, Debug, PartialEq)]
pub struct TripleGradient {
    pub patterns: Vec<PatternGradient>,
    /// Gradient of the gate block used by this triple, K x F.
    pub gate: Vec<f64>,
    pub gate_block: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatternGradient {
    pub user: Vec<f64>,
    pub prev: Vec<f64>,
    pub pos_user: Vec<f64>,
    pub neg_user: Vec<f64>,
    pub pos_prev: Vec<f64>,
    pub neg_prev: Vec<f64>,
    pub rho: f64,
}

/// How the L2 prior enters a per-triple gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regularization {
    /// `-lambda * gamma(s) * theta` on every parameter the triple touches.
    Local,
    /// Left out; the caller applies the prior once over all parameters.
    None,
}

/// Gradient of `sum_s gamma(s) [ln sigmoid(gap_s) + ln p(s|c)]`, plus the
/// local prior when requested.
pub fn triple_gradient(model: &ModelParams, triple: &BprTriple, gamma: &[f64], reg: Regularization) -> TripleGradient {
    let (u, i, m, n) = (
        triple.user as usize,
        triple.prev_poi as usize,
        triple.positive as usize,
        triple.negative as usize,
    );
    let lambda = match reg {
        Regularization::Local => model.lambda_theta,
        Regularization::None => 0.0,
    };
    let gaps = score_gaps(model, triple);
    let sp_pos = spatial_preference(triple.d_pos, model.min_distance_km);
    let sp_neg = spatial_preference(triple.d_neg, model.min_distance_km);

    let patterns = model
        .patterns
        .iter()
        .enumerate()
        .map(|(s, p)| {
            let g = gamma[s];
            let delta = 1.0 - sigmoid(gaps[s]);
            let user = p.user_factors.row(u);
            let prev = p.prev_factors.row(i);
            let (mu, nu) = (p.next_user_factors.row(m), p.next_user_factors.row(n));
            let (mi, ni) = (p.next_prev_factors.row(m), p.next_prev_factors.row(n));
            let grad = |sens: &dyn Fn(usize) -> f64, theta: &[f64]| -> Vec<f64> {
                (0..theta.len()).map(|k| g * (delta * sens(k) - lambda * theta[k])).collect()
            };
            PatternGradient {
                user: grad(&|k| mu[k] - nu[k], user),
                prev: grad(&|k| mi[k] - ni[k], prev),
                pos_user: grad(&|k| user[k], mu),
                neg_user: grad(&|k| -user[k], nu),
                pos_prev: grad(&|k| prev[k], mi),
                neg_prev: grad(&|k| -prev[k], ni),
                rho: g * (delta * (sp_pos - sp_neg) - lambda * p.rho),
            }
        })
        .collect();

    let (gate_block, gate) = gate_gradient_with(model, triple, gamma, lambda);
    TripleGradient {
        patterns,
        gate,
        gate_block,
    }
}

fn gate_gradient_with(model: &ModelParams, triple: &BprTriple, gamma: &[f64], lambda: f64) -> (usize, Vec<f64>) {
    let k = model.num_patterns();
    let f = model.num_features();
    let block = model.gate.block_of(Some(triple.user)).expect("user in range");
    let mut probs = vec![0.0; k];
    model.gate.logits_into(block, &triple.context, &mut probs);
    softmax_in_place(&mut probs);
    let mut grad = vec![0.0; k * f];
    for s in 0..k {
        let alpha = model.gate.weights(block, s);
        let row = &mut grad[s * f..(s + 1) * f];
        for j in 0..f {
            row[j] = (gamma[s] - probs[s]) * triple.context.values[j] - lambda * gamma[s] * alpha[j];
        }
    }
    (block, grad)
}

/// Gate part of [`triple_gradient`] with the local prior: `(block, K x F)`.
pub fn gate_gradient(model: &ModelParams, triple: &BprTriple, gamma: &[f64]) -> (usize, Vec<f64>) {
    gate_gradient_with(model, triple, gamma, model.lambda_theta)
}

fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, v) in dst.iter_mut().zip(x) {
        *d += a * v;
    }
}

/// Applies `theta += scale * gradient` for the parameters a triple touches.
pub fn apply_gradient(model: &mut ModelParams, triple: &BprTriple, grad: &TripleGradient, scale: f64, update_gate: bool) {
    let (u, i, m, n) = (
        triple.user as usize,
        triple.prev_poi as usize,
        triple.positive as usize,
        triple.negative as usize,
    );
    for (p, g) in model.patterns.iter_mut().zip(&grad.patterns) {
        axpy(p.user_factors.row_mut(u), scale, &g.user);
        axpy(p.prev_factors.row_mut(i), scale, &g.prev);
        axpy(p.next_user_factors.row_mut(m), scale, &g.pos_user);
        axpy(p.next_user_factors.row_mut(n), scale, &g.neg_user);
        axpy(p.next_prev_factors.row_mut(m), scale, &g.pos_prev);
        axpy(p.next_prev_factors.row_mut(n), scale, &g.neg_prev);
        p.rho += scale * g.rho;
    }
    if update_gate {
        axpy(model.gate.block_mut(grad.gate_block), scale, &grad.gate);
    }
}

fn gradient_is_finite(grad: &TripleGradient) -> bool {
    grad.gate.iter().all(|x| x.is_finite())
        && grad.patterns.iter().all(|p| {
            p.rho.is_finite()
                && [&p.user, &p.prev, &p.pos_user, &p.neg_user, &p.pos_prev, &p.neg_prev]
                    .iter()
                    .all(|v| v.iter().all(|x| x.is_finite()))
        })
}

/// One stochastic M-step on a single triple: every touched parameter moves
/// by `learning_rate * gamma(s) * (delta_s * dgap/dtheta - lambda * theta)`,
/// and the gate by `learning_rate * ((gamma - p) g(c) - lambda * gamma * alpha)`.
pub fn sgd_step(model: &mut ModelParams, triple: &BprTriple, gamma: &[f64], learning_rate: f64) -> Result<()> {
    sgd_step_inner(model, triple, gamma, learning_rate, true)
}

fn sgd_step_inner(model: &mut ModelParams, triple: &BprTriple, gamma: &[f64], learning_rate: f64, update_gate: bool) -> Result<()> {
    let grad = triple_gradient(model, triple, gamma, Regularization::Local);
    if !gradient_is_finite(&grad) {
        return Err(Error::Diverged {
            epoch: 0,
            reason: format!(
                "non-finite gradient on triple (user {}, prev {}, pos {}, neg {})",
                triple.user, triple.prev_poi, triple.positive, triple.negative
            ),
            last_good: None,
        });
    }
    apply_gradient(model, triple, &grad, learning_rate, update_gate);
    Ok(())
}

/// `ln sum_s sigmoid(gap_s) p(s|c)` for one triple.
pub fn triple_log_likelihood(model: &ModelParams, triple: &BprTriple) -> f64 {
    let mut logits = gate_logits(model, triple);
    let norm = log_sum_exp(&logits);
    for (l, gap) in logits.iter_mut().zip(score_gaps(model, triple)) {
        *l = ln_sigmoid(gap) + *l - norm;
    }
    log_sum_exp(&logits)
}

/// Marginal log posterior over a triple set:
/// `sum_t ln sum_s sigmoid(gap_s) p(s|c) - lambda/2 ||theta||^2`.
pub fn log_objective(model: &ModelParams, triples: &[BprTriple]) -> f64 {
    let data: f64 = triples.iter().map(|t| triple_log_likelihood(model, t)).sum();
    data - 0.5 * model.lambda_theta * model.squared_norm()
}

/// Expected complete-data objective for fixed responsibilities:
/// `sum_t sum_s gamma_ts [ln sigmoid(gap_s) + ln p(s|c)] - lambda/2 ||theta||^2`.
pub fn expected_objective(model: &ModelParams, triples: &[BprTriple], gammas: &[Responsibilities]) -> f64 {
    let data: f64 = triples
        .iter()
        .zip(gammas)
        .map(|(t, r)| {
            let logits = gate_logits(model, t);
            let norm = log_sum_exp(&logits);
            score_gaps(model, t)
                .iter()
                .zip(&logits)
                .zip(&r.gamma)
                .map(|((&gap, &logit), &g)| if g == 0.0 { 0.0 } else { g * (ln_sigmoid(gap) + logit - norm) })
                .sum::<f64>()
        })
        .sum();
    data - 0.5 * model.lambda_theta * model.squared_norm()
}

/// A zeroed parameter set of the same shape, used as a gradient buffer.
fn zeros_like(model: &ModelParams) -> ModelParams {
    let mut z = model.clone();
    for p in &mut z.patterns {
        for f in [
            &mut p.user_factors,
            &mut p.next_user_factors,
            &mut p.next_prev_factors,
            &mut p.prev_factors,
        ] {
            f.as_mut_slice().iter_mut().for_each(|x| *x = 0.0);
        }
        p.rho = 0.0;
    }
    z.gate.as_mut_slice().iter_mut().for_each(|x| *x = 0.0);
    z
}

/// `dst += a * src` over every parameter.
fn axpy_params(dst: &mut ModelParams, a: f64, src: &ModelParams, update_gate: bool) {
    for (d, s) in dst.patterns.iter_mut().zip(&src.patterns) {
        axpy(d.user_factors.as_mut_slice(), a, s.user_factors.as_slice());
        axpy(d.next_user_factors.as_mut_slice(), a, s.next_user_factors.as_slice());
        axpy(d.next_prev_factors.as_mut_slice(), a, s.next_prev_factors.as_slice());
        axpy(d.prev_factors.as_mut_slice(), a, s.prev_factors.as_slice());
        d.rho += a * s.rho;
    }
    if update_gate {
        axpy(dst.gate.as_mut_slice(), a, src.gate.as_slice());
    }
}

/// Full gradient of [`expected_objective`] at `model`.
pub fn batch_gradient(model: &ModelParams, triples: &[BprTriple], gammas: &[Responsibilities]) -> ModelParams {
    let mut grad = zeros_like(model);
    for (t, r) in triples.iter().zip(gammas) {
        let g = triple_gradient(model, t, &r.gamma, Regularization::None);
        apply_gradient(&mut grad, t, &g, 1.0, true);
    }
    // prior, once per parameter
    axpy_params(&mut grad, -model.lambda_theta, model, true);
    grad
}

/// Outcome of one full-batch EM iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchStep {
    pub step_size: f64,
    pub expected_before: f64,
    pub expected_after: f64,
}

/// One generalized EM iteration: E-step over all triples, then a gradient
/// step on the expected objective, halved until that objective does not
/// decrease. A rejected step leaves the model unchanged.
pub fn full_batch_em_step(model: &mut ModelParams, triples: &[BprTriple], learning_rate: f64, update_gate: bool) -> BatchStep {
    let gammas: Vec<Responsibilities> = triples.iter().map(|t| responsibilities(model, t)).collect();
    let before = expected_objective(model, triples, &gammas);
    let grad = batch_gradient(model, triples, &gammas);
    let mut step = learning_rate;
    while step > 1e-14 {
        let mut candidate = model.clone();
        axpy_params(&mut candidate, step, &grad, update_gate);
        let after = expected_objective(&candidate, triples, &gammas);
        if after.is_finite() && after >= before {
            *model = candidate;
            return BatchStep {
                step_size: step,
                expected_before: before,
                expected_after: after,
            };
        }
        step *= 0.5;
    }
    BatchStep {
        step_size: 0.0,
        expected_before: before,
        expected_after: before,
    }
}

/// One row of the training trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub audit_objective: f64,
    pub gradient_check: GradientCheck,
    pub wall_time_secs: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientCheck {
    Skipped,
    Passed,
    Failed,
}

impl std::fmt::Display for GradientCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GradientCheck::Skipped => "skipped",
            GradientCheck::Passed => "passed",
            GradientCheck::Failed => "failed",
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
}

/// Training examples derived from a dataset: transitions with their
/// contexts, plus the observed-cell index used for negative sampling.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub transitions: Vec<Transition>,
    pub contexts: Vec<ContextVector>,
    pub index: TrainIndex,
    pub schema: FeatureSchema,
}

impl TrainingSet {
    pub fn build(dataset: &Dataset, config: &TrainConfig) -> Result<Self> {
        if dataset.provenance() == Provenance::Test {
            return Err(Error::Config("refusing to train on a test split".into()));
        }
        let schema = build_feature_schema(dataset, config.time_bins, config.utc_offset_hours)?;
        let transitions = build_transitions(dataset, config.max_gap_hours);
        if transitions.is_empty() {
            return Err(Error::Config("training data has no transitions".into()));
        }
        let pois = dataset.catalog().pois();
        let contexts = transitions
            .iter()
            .map(|t| schema.encode(t.prev_time, pois[t.prev_poi as usize].category))
            .collect::<Result<Vec<_>>>()?;
        let index = TrainIndex::new(&transitions);
        Ok(TrainingSet {
            transitions,
            contexts,
            index,
            schema,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, t: usize, catalog: &Catalog, rng: &mut R) -> Result<BprTriple> {
        sample_bpr_triple(&self.transitions[t], &self.contexts[t], &self.index, catalog, rng)
    }

    /// Fixed triples for the audit objective: up to `size` transitions
    /// chosen without replacement, one negative each.
    pub fn audit_triples(&self, catalog: &Catalog, size: usize, seed: u64) -> Result<Vec<BprTriple>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a0d1_7000_0001);
        let mut order: Vec<usize> = (0..self.transitions.len()).collect();
        order.shuffle(&mut rng);
        order.truncate(size.max(1));
        order.sort_unstable();
        order.into_iter().map(|t| self.sample(t, catalog, &mut rng)).collect()
    }
}

/// Per-triple expected objective with the local prior, the function whose
/// gradient [`triple_gradient`] returns under [`Regularization::Local`].
pub fn triple_expected_objective(model: &ModelParams, triple: &BprTriple, gamma: &[f64]) -> f64 {
    let logits = gate_logits(model, triple);
    let norm = log_sum_exp(&logits);
    let gaps = score_gaps(model, triple);
    let block = model.gate.block_of(Some(triple.user)).expect("user in range");
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    (0..model.num_patterns())
        .map(|s| {
            let p = &model.patterns[s];
            let local = sq(p.user_factors.row(triple.user as usize))
                + sq(p.prev_factors.row(triple.prev_poi as usize))
                + sq(p.next_user_factors.row(triple.positive as usize))
                + sq(p.next_user_factors.row(triple.negative as usize))
                + sq(p.next_prev_factors.row(triple.positive as usize))
                + sq(p.next_prev_factors.row(triple.negative as usize))
                + p.rho * p.rho
                + sq(model.gate.weights(block, s));
            gamma[s] * (ln_sigmoid(gaps[s]) + logits[s] - norm - 0.5 * model.lambda_theta * local)
        })
        .sum()
}

/// Relative finite-difference check of [`triple_gradient`] on a few
/// coordinates of one triple.
fn spot_check_gradient(model: &ModelParams, triple: &BprTriple) -> GradientCheck {
    let gamma = responsibilities(model, triple).gamma;
    let grad = triple_gradient(model, triple, &gamma, Regularization::Local);
    let h = 1e-5;
    let u = triple.user as usize;
    let fd = |edit: &dyn Fn(&mut ModelParams, f64)| {
        let mut plus = model.clone();
        let mut minus = model.clone();
        edit(&mut plus, h);
        edit(&mut minus, -h);
        (triple_expected_objective(&plus, triple, &gamma) - triple_expected_objective(&minus, triple, &gamma)) / (2.0 * h)
    };
    let close = |fd: f64, an: f64| (fd - an).abs() <= 1e-3 * an.abs().max(1e-4);
    let ok = grad.patterns.iter().enumerate().all(|(s, g)| {
        close(fd(&|m, e| m.patterns[s].rho += e), g.rho)
            && close(fd(&|m, e| m.patterns[s].user_factors.row_mut(u)[0] += e), g.user[0])
    });
    if ok {
        GradientCheck::Passed
    } else {
        GradientCheck::Failed
    }
}

/// Per-user gate weights of users without training transitions are replaced
/// by the mean of the trained users' weights.
fn fill_cold_gates(model: &mut ModelParams, trained: &[bool]) {
    if model.mode() != GateMode::PerUser {
        return;
    }
    let warm: Vec<usize> = trained.iter().enumerate().filter(|(_, &t)| t).map(|(u, _)| u).collect();
    if warm.is_empty() || warm.len() == trained.len() {
        return;
    }
    let width = model.gate.block(0).len();
    let mut mean = vec![0.0; width];
    for &u in &warm {
        axpy(&mut mean, 1.0 / warm.len() as f64, model.gate.block(u));
    }
    for (u, &t) in trained.iter().enumerate() {
        if !t {
            model.gate.block_mut(u).copy_from_slice(&mean);
        }
    }
}

/// Trains a model on the training side of a split.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let set = TrainingSet::build(dataset, config)?;
    let catalog = dataset.catalog();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init_seed: u64 = rng.random();
    let mut model = init_params(config, ModelMeta::from_catalog(catalog), set.schema.clone(), init_seed)?;
    if config.num_patterns == 1 && !config.freeze_gate {
        log::debug!("single pattern: gate is constant");
    }

    let mut trained_users = vec![false; dataset.num_users()];
    for t in &set.transitions {
        trained_users[t.user as usize] = true;
    }

    let batch_triples = match config.schedule {
        Schedule::FullBatch => {
            let mut triples = Vec::with_capacity(set.transitions.len() * config.negatives_per_positive);
            for t in 0..set.transitions.len() {
                for _ in 0..config.negatives_per_positive {
                    triples.push(set.sample(t, catalog, &mut rng)?);
                }
            }
            triples
        }
        Schedule::Stochastic => Vec::new(),
    };
    let audit = match config.schedule {
        Schedule::FullBatch => batch_triples.clone(),
        Schedule::Stochastic => set.audit_triples(catalog, config.audit_size, config.seed)?,
    };

    let started = Instant::now();
    let mut trace = vec![TraceRow {
        epoch: 0,
        audit_objective: log_objective(&model, &audit),
        gradient_check: GradientCheck::Skipped,
        wall_time_secs: 0.0,
    }];
    let mut last_good = model.clone();
    let mut order: Vec<usize> = (0..set.transitions.len()).collect();
    let mut converged = false;
    let update_gate = !config.freeze_gate;

    for epoch in 1..=config.epochs {
        match config.schedule {
            Schedule::Stochastic => {
                order.shuffle(&mut rng);
                for &t in &order {
                    for _ in 0..config.negatives_per_positive {
                        let triple = set.sample(t, catalog, &mut rng)?;
                        let gamma = responsibilities(&model, &triple).gamma;
                        if let Err(Error::Diverged { reason, .. }) =
                            sgd_step_inner(&mut model, &triple, &gamma, config.learning_rate, update_gate)
                        {
                            return Err(Error::Diverged {
                                epoch,
                                reason,
                                last_good: Some(Box::new(last_good)),
                            });
                        }
                    }
                }
            }
            Schedule::FullBatch => {
                full_batch_em_step(&mut model, &batch_triples, config.learning_rate, update_gate);
            }
        }

        let objective = log_objective(&model, &audit);
        if !objective.is_finite() || !model.is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: format!("audit objective became {objective}"),
                last_good: Some(Box::new(last_good)),
            });
        }
        let gradient_check = if config.check_gradients {
            spot_check_gradient(&model, &audit[epoch % audit.len()])
        } else {
            GradientCheck::Skipped
        };
        let previous = trace.last().map(|r| r.audit_objective).unwrap_or(objective);
        trace.push(TraceRow {
            epoch,
            audit_objective: objective,
            gradient_check,
            wall_time_secs: started.elapsed().as_secs_f64(),
        });
        log::debug!("epoch {epoch}: audit objective {objective:.6}");
        last_good.clone_from(&model);

        let rel = (objective - previous).abs() / previous.abs().max(1e-12);
        if rel < config.convergence_tol {
            converged = true;
            break;
        }
    }

    fill_cold_gates(&mut model, &trained_users);
    Ok(TrainOutcome {
        model,
        trace,
        converged,
    })
}
