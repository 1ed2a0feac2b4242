//! Top-N recommendation and precision metrics over a chronological split.
//!
//! Every test check-in is one query: the previous check-in (the last
//! training one for a user's first test event) gives `u`, `i` and the
//! context, and the query is a hit at N when the true next venue is among
//! the N best-scored candidates. Candidates are all venues except `i`;
//! equal scores rank the lower venue index first.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkin::{Dataset, SplitDataset};
use crate::error::{Error, Result};
use crate::features::ContextVector;
use crate::math::{dot, format_sig, sigmoid};
use crate::model::ModelParams;

/// Anything that scores every venue as the next stop after `prev_poi`.
pub trait Scorer: Sync {
    fn num_users(&self) -> usize;
    fn num_pois(&self) -> usize;
    /// Fingerprint of the dataset the scorer was trained on.
    fn fingerprint(&self) -> [u8; 32];
    /// Context of a query whose previous check-in was at `prev_poi` at `prev_time`.
    fn context(&self, prev_poi: u32, prev_time: i64) -> Result<ContextVector>;
    /// Writes the score of every venue into `out` (length N).
    fn score_into(&self, user: u32, prev_poi: u32, context: &ContextVector, out: &mut [f64]) -> Result<()>;
}

impl Scorer for ModelParams {
    fn num_users(&self) -> usize {
        ModelParams::num_users(self)
    }

    fn num_pois(&self) -> usize {
        ModelParams::num_pois(self)
    }

    fn fingerprint(&self) -> [u8; 32] {
        self.meta.fingerprint
    }

    fn context(&self, prev_poi: u32, prev_time: i64) -> Result<ContextVector> {
        let poi = self.meta.pois.get(prev_poi as usize).ok_or(Error::IndexOutOfRange {
            kind: "poi",
            index: prev_poi as usize,
            size: self.meta.pois.len(),
        })?;
        self.schema.encode(prev_time, poi.category)
    }

    fn score_into(&self, user: u32, prev_poi: u32, context: &ContextVector, out: &mut [f64]) -> Result<()> {
        self.score_all_into(user, prev_poi, context, out)
    }
}

/// One ranked candidate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub poi: u32,
    pub score: f64,
}

/// Descending score, then ascending index.
fn rank_order(a: &Recommendation, b: &Recommendation) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then(a.poi.cmp(&b.poi))
}

/// The `n` best candidates for the move after `prev_poi`. `candidates`
/// defaults to every venue except `prev_poi`.
pub fn recommend_top_n<S: Scorer + ?Sized>(
    scorer: &S,
    user: u32,
    prev_poi: u32,
    context: &ContextVector,
    n: usize,
    candidates: Option<&[u32]>,
) -> Result<Vec<Recommendation>> {
    let mut scores = vec![0.0; scorer.num_pois()];
    scorer.score_into(user, prev_poi, context, &mut scores)?;
    let mut ranked: Vec<Recommendation> = match candidates {
        Some(c) => {
            if c.is_empty() {
                return Err(Error::Evaluation("empty candidate set".into()));
            }
            c.iter()
                .map(|&poi| {
                    scores
                        .get(poi as usize)
                        .map(|&score| Recommendation { poi, score })
                        .ok_or(Error::IndexOutOfRange {
                            kind: "poi",
                            index: poi as usize,
                            size: scores.len(),
                        })
                })
                .collect::<Result<_>>()?
        }
        None => scores
            .iter()
            .enumerate()
            .filter(|&(l, _)| l != prev_poi as usize)
            .map(|(l, &score)| Recommendation { poi: l as u32, score })
            .collect(),
    };
    if n < ranked.len() && n > 0 {
        ranked.select_nth_unstable_by(n - 1, rank_order);
        ranked.truncate(n);
    }
    ranked.sort_by(rank_order);
    ranked.truncate(n);
    Ok(ranked)
}

/// A held-out move.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestQuery {
    pub user: u32,
    pub prev_poi: u32,
    pub prev_time: i64,
    pub target: u32,
    /// The target never occurs in the user's training history.
    pub is_new: bool,
}

/// Test queries of every user, grouped by user in index order.
pub fn test_queries(split: &SplitDataset) -> Vec<Vec<TestQuery>> {
    (0..split.test.num_users() as u32)
        .map(|u| {
            let train = split.train.sequence(u);
            let test = split.test.sequence(u);
            let known: HashSet<u32> = train.iter().map(|v| v.poi).collect();
            let mut prev = train.last().copied();
            let mut out = Vec::with_capacity(test.len());
            for v in test {
                if let Some(p) = prev {
                    out.push(TestQuery {
                        user: u,
                        prev_poi: p.poi,
                        prev_time: p.timestamp,
                        target: v.poi,
                        is_new: !known.contains(&v.poi),
                    });
                }
                prev = Some(*v);
            }
            out
        })
        .collect()
}

/// Zero-based position of `target` in the full ranking of candidates
/// (every venue except `prev_poi`), or `None` when `target == prev_poi`.
fn target_rank(scores: &[f64], prev_poi: u32, target: u32) -> Option<usize> {
    if target == prev_poi {
        return None;
    }
    let t = scores[target as usize];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(l, &s)| l != prev_poi as usize && (s > t || (s == t && (l as u32) < target)))
        .count();
    Some(ahead)
}

#[derive(Clone, Debug, PartialEq)]
struct UserHits {
    queries: usize,
    new_queries: usize,
    hits: Vec<usize>,
    new_hits: Vec<usize>,
}

fn evaluate_user<S: Scorer + ?Sized>(scorer: &S, queries: &[TestQuery], cutoffs: &[usize]) -> Result<UserHits> {
    let mut scores = vec![0.0; scorer.num_pois()];
    let mut out = UserHits {
        queries: queries.len(),
        new_queries: queries.iter().filter(|q| q.is_new).count(),
        hits: vec![0; cutoffs.len()],
        new_hits: vec![0; cutoffs.len()],
    };
    for q in queries {
        let ctx = scorer.context(q.prev_poi, q.prev_time)?;
        scorer.score_into(q.user, q.prev_poi, &ctx, &mut scores)?;
        let Some(rank) = target_rank(&scores, q.prev_poi, q.target) else {
            continue;
        };
        for (c, &n) in cutoffs.iter().enumerate() {
            if rank < n {
                out.hits[c] += 1;
                if q.is_new {
                    out.new_hits[c] += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Per-user metric values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserBreakdown {
    pub user_id: String,
    pub train_events: usize,
    pub test_events: usize,
    pub queries: usize,
    pub new_queries: usize,
    pub precision_at: BTreeMap<usize, f64>,
    /// Empty when the user has no new-venue queries.
    pub precision_new_at: BTreeMap<usize, f64>,
}

impl UserBreakdown {
    pub fn total_events(&self) -> usize {
        self.train_events + self.test_events
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub dataset_id: String,
    pub cutoffs: Vec<usize>,
    pub precision_at: BTreeMap<usize, f64>,
    /// Empty when the test set holds no new-venue queries.
    pub precision_new_at: BTreeMap<usize, f64>,
    /// Share of hits whose target was a new venue, pooled over all hits.
    pub new_fraction_at: BTreeMap<usize, f64>,
    pub per_user_breakdown: Option<Vec<UserBreakdown>>,
    pub config: serde_json::Value,
}

fn check_compatible<S: Scorer + ?Sized>(scorer: &S, split: &SplitDataset) -> Result<()> {
    let catalog = split.train.catalog();
    if scorer.fingerprint() != catalog.fingerprint() {
        return Err(Error::Mismatch(
            "model was trained on a different dataset (fingerprint differs)".into(),
        ));
    }
    if scorer.num_users() != catalog.num_users() || scorer.num_pois() != catalog.num_pois() {
        return Err(Error::Mismatch(format!(
            "model has {} users / {} venues, split has {} / {}",
            scorer.num_users(),
            scorer.num_pois(),
            catalog.num_users(),
            catalog.num_pois()
        )));
    }
    Ok(())
}

fn normalized_cutoffs(cutoffs: &[usize]) -> Result<Vec<usize>> {
    let mut c: Vec<usize> = cutoffs.to_vec();
    c.sort_unstable();
    c.dedup();
    if c.is_empty() || c[0] == 0 {
        return Err(Error::Evaluation("cutoffs must be a non-empty list of positive integers".into()));
    }
    Ok(c)
}

/// Scores one model on every test query. Users are evaluated in parallel and
/// merged in user order.
pub fn evaluate<S: Scorer + ?Sized>(
    model_id: &str,
    scorer: &S,
    split: &SplitDataset,
    cutoffs: &[usize],
    config: serde_json::Value,
    per_user: bool,
) -> Result<EvalReport> {
    check_compatible(scorer, split)?;
    let cutoffs = normalized_cutoffs(cutoffs)?;
    let queries = test_queries(split);
    if queries.iter().all(Vec::is_empty) {
        return Err(Error::Evaluation("test split holds no queries".into()));
    }
    let results: Vec<UserHits> = queries
        .par_iter()
        .map(|q| evaluate_user(scorer, q, &cutoffs))
        .collect::<Result<_>>()?;

    let mut sum = vec![0.0; cutoffs.len()];
    let mut sum_new = vec![0.0; cutoffs.len()];
    let (mut users, mut users_new) = (0usize, 0usize);
    let mut hits = vec![0usize; cutoffs.len()];
    let mut new_hits = vec![0usize; cutoffs.len()];
    let mut breakdown = Vec::new();
    for (u, r) in results.iter().enumerate() {
        if r.queries == 0 {
            continue;
        }
        users += 1;
        let mut p_at = BTreeMap::new();
        let mut p_new_at = BTreeMap::new();
        for (c, &n) in cutoffs.iter().enumerate() {
            let p = r.hits[c] as f64 / r.queries as f64;
            sum[c] += p;
            hits[c] += r.hits[c];
            new_hits[c] += r.new_hits[c];
            p_at.insert(n, p);
            if r.new_queries > 0 {
                let pn = r.new_hits[c] as f64 / r.new_queries as f64;
                sum_new[c] += pn;
                p_new_at.insert(n, pn);
            }
        }
        if r.new_queries > 0 {
            users_new += 1;
        }
        if per_user {
            breakdown.push(UserBreakdown {
                user_id: split.train.catalog().users()[u].clone(),
                train_events: split.train.sequence(u as u32).len(),
                test_events: split.test.sequence(u as u32).len(),
                queries: r.queries,
                new_queries: r.new_queries,
                precision_at: p_at,
                precision_new_at: p_new_at,
            });
        }
    }

    let precision_at = cutoffs.iter().zip(&sum).map(|(&n, s)| (n, s / users as f64)).collect();
    let precision_new_at = if users_new == 0 {
        log::warn!("no test query targets a new venue; new-venue precision left empty");
        BTreeMap::new()
    } else {
        cutoffs.iter().zip(&sum_new).map(|(&n, s)| (n, s / users_new as f64)).collect()
    };
    let new_fraction_at = cutoffs
        .iter()
        .enumerate()
        .map(|(c, &n)| (n, if hits[c] == 0 { 0.0 } else { new_hits[c] as f64 / hits[c] as f64 }))
        .collect();
    Ok(EvalReport {
        model_id: model_id.to_string(),
        dataset_id: split.train.catalog().fingerprint_hex(),
        cutoffs,
        precision_at,
        precision_new_at,
        new_fraction_at,
        per_user_breakdown: per_user.then_some(breakdown),
        config,
    })
}

/// Precision@N of the next-venue task.
pub fn precision_at_n<S: Scorer + ?Sized>(scorer: &S, split: &SplitDataset, n: usize) -> Result<f64> {
    let report = evaluate("", scorer, split, &[n], serde_json::Value::Null, false)?;
    Ok(report.precision_at[&n])
}

/// Precision@N restricted to targets absent from the user's training history.
pub fn precision_at_n_new<S: Scorer + ?Sized>(scorer: &S, split: &SplitDataset, n: usize) -> Result<f64> {
    let report = evaluate("", scorer, split, &[n], serde_json::Value::Null, false)?;
    report
        .precision_new_at
        .get(&n)
        .copied()
        .ok_or_else(|| Error::Evaluation("no test query targets a new venue".into()))
}

/// Evaluates several models on one split.
pub fn evaluate_run(
    models: &[(&str, &dyn Scorer)],
    split: &SplitDataset,
    cutoffs: &[usize],
    config: serde_json::Value,
    per_user: bool,
) -> Result<Vec<EvalReport>> {
    models
        .iter()
        .map(|(id, m)| evaluate(id, *m, split, cutoffs, config.clone(), per_user))
        .collect()
}

/// Aligned text table: one row per model, one column per metric and cutoff.
pub fn render_table(reports: &[EvalReport]) -> String {
    let Some(first) = reports.first() else {
        return String::new();
    };
    let mut header = vec!["model".to_string()];
    for prefix in ["P", "Pnew", "NewFrac"] {
        header.extend(first.cutoffs.iter().map(|n| format!("{prefix}@{n}")));
    }
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![r.model_id.clone()];
        for map in [&r.precision_at, &r.precision_new_at, &r.new_fraction_at] {
            row.extend(
                r.cutoffs
                    .iter()
                    .map(|n| map.get(n).map_or_else(|| "-".to_string(), |v| format_sig(*v, 6))),
            );
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, w))| if c == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}

/// Methods-by-metrics layout for machine consumption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub dataset_id: String,
    pub cutoffs: Vec<usize>,
    pub methods: Vec<EvalReport>,
}

impl ComparisonTable {
    pub fn new(reports: Vec<EvalReport>) -> Self {
        ComparisonTable {
            dataset_id: reports.first().map(|r| r.dataset_id.clone()).unwrap_or_default(),
            cutoffs: reports.first().map(|r| r.cutoffs.clone()).unwrap_or_default(),
            methods: reports,
        }
    }
}

/// Tab-separated series, one line per cutoff, for plotting precision
/// against N.
pub fn render_series(reports: &[EvalReport]) -> String {
    let Some(first) = reports.first() else {
        return String::new();
    };
    let mut out = String::from("N");
    for r in reports {
        let _ = write!(out, "\t{0}_P\t{0}_Pnew\t{0}_NewFrac", r.model_id);
    }
    out.push('\n');
    for n in &first.cutoffs {
        let _ = write!(out, "{n}");
        for r in reports {
            for map in [&r.precision_at, &r.precision_new_at, &r.new_fraction_at] {
                match map.get(n) {
                    Some(v) => {
                        let _ = write!(out, "\t{v:e}");
                    }
                    None => out.push_str("\tNA"),
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Settings of the user-by-venue BPR baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfConfig {
    pub dim: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub init_sigma: f64,
}

impl Default for MfConfig {
    fn default() -> Self {
        MfConfig {
            dim: 60,
            lambda: 0.01,
            learning_rate: 0.05,
            epochs: 30,
            seed: 0,
            init_sigma: 0.1,
        }
    }
}

/// Matrix factorization scored by `<P[u], Q[l]>`, ignoring the previous venue
/// and the context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfModel {
    pub dim: usize,
    pub num_users: usize,
    pub num_pois: usize,
    pub user_factors: Vec<f64>,
    pub poi_factors: Vec<f64>,
    pub fingerprint: [u8; 32],
    pub user_ids: Vec<String>,
    pub poi_ids: Vec<String>,
}

impl MfModel {
    pub fn user(&self, u: usize) -> &[f64] {
        &self.user_factors[u * self.dim..(u + 1) * self.dim]
    }

    pub fn poi(&self, l: usize) -> &[f64] {
        &self.poi_factors[l * self.dim..(l + 1) * self.dim]
    }

    pub fn score(&self, u: usize, l: usize) -> f64 {
        dot(self.user(u), self.poi(l))
    }

    /// `ln sigmoid(x_um - x_un) - lambda/2 (|P[u]|^2 + |Q[m]|^2 + |Q[n]|^2)`.
    pub fn pair_objective(&self, u: usize, m: usize, n: usize, lambda: f64) -> f64 {
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        crate::math::ln_sigmoid(self.score(u, m) - self.score(u, n))
            - 0.5 * lambda * (sq(self.user(u)) + sq(self.poi(m)) + sq(self.poi(n)))
    }

    /// Gradient of [`MfModel::pair_objective`] with respect to `P[u]`, `Q[m]`, `Q[n]`.
    pub fn pair_gradient(&self, u: usize, m: usize, n: usize, lambda: f64) -> [Vec<f64>; 3] {
        let delta = 1.0 - sigmoid(self.score(u, m) - self.score(u, n));
        let (pu, qm, qn) = (self.user(u), self.poi(m), self.poi(n));
        [
            (0..self.dim).map(|k| delta * (qm[k] - qn[k]) - lambda * pu[k]).collect(),
            (0..self.dim).map(|k| delta * pu[k] - lambda * qm[k]).collect(),
            (0..self.dim).map(|k| -delta * pu[k] - lambda * qn[k]).collect(),
        ]
    }

    fn step(&mut self, u: usize, m: usize, n: usize, lambda: f64, eta: f64) {
        let [gu, gm, gn] = self.pair_gradient(u, m, n, lambda);
        let d = self.dim;
        for k in 0..d {
            self.user_factors[u * d + k] += eta * gu[k];
            self.poi_factors[m * d + k] += eta * gm[k];
            self.poi_factors[n * d + k] += eta * gn[k];
        }
    }
}

impl Scorer for MfModel {
    fn num_users(&self) -> usize {
        self.num_users
    }

    fn num_pois(&self) -> usize {
        self.num_pois
    }

    fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }

    fn context(&self, _prev_poi: u32, _prev_time: i64) -> Result<ContextVector> {
        Ok(ContextVector { values: Vec::new() })
    }

    fn score_into(&self, user: u32, _prev_poi: u32, _context: &ContextVector, out: &mut [f64]) -> Result<()> {
        if user as usize >= self.num_users {
            return Err(Error::IndexOutOfRange {
                kind: "user",
                index: user as usize,
                size: self.num_users,
            });
        }
        if out.len() != self.num_pois {
            return Err(Error::Mismatch("output buffer length differs from POI count".into()));
        }
        for (l, o) in out.iter_mut().enumerate() {
            *o = self.score(user as usize, l);
        }
        Ok(())
    }
}

/// BPR over (visited, never visited) venue pairs per user; one uniformly
/// drawn negative per training check-in and epoch.
pub fn train_mf_bpr_baseline(train: &Dataset, config: &MfConfig) -> Result<MfModel> {
    if train.provenance() == crate::checkin::Provenance::Test {
        return Err(Error::Config("refusing to train on a test split".into()));
    }
    if config.dim == 0 || !(config.lambda >= 0.0) || !(config.learning_rate > 0.0) {
        return Err(Error::Config("dims and learning rate must be positive, lambda non-negative".into()));
    }
    let catalog = train.catalog();
    let (m, n, d) = (catalog.num_users(), catalog.num_pois(), config.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, config.init_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| normal.sample(&mut rng)).collect() };
    let user_factors = draw(m * d);
    let poi_factors = draw(n * d);
    let mut model = MfModel {
        dim: d,
        num_users: m,
        num_pois: n,
        user_factors,
        poi_factors,
        fingerprint: catalog.fingerprint(),
        user_ids: catalog.users().to_vec(),
        poi_ids: catalog.pois().iter().map(|p| p.id.clone()).collect(),
    };

    let visited: Vec<HashSet<u32>> = train.sequences().iter().map(|s| s.iter().map(|v| v.poi).collect()).collect();
    let mut pairs: Vec<(u32, u32)> = Vec::with_capacity(train.num_checkins());
    for (u, seq) in train.sequences().iter().enumerate() {
        if visited[u].len() >= n {
            continue;
        }
        pairs.extend(seq.iter().map(|v| (u as u32, v.poi)));
    }
    if pairs.is_empty() {
        return Err(Error::Config("no user has an unvisited venue to contrast with".into()));
    }
    for _ in 0..config.epochs {
        pairs.shuffle(&mut rng);
        for &(u, pos) in &pairs {
            let neg = loop {
                let c = rng.random_range(0..n as u32);
                if !visited[u as usize].contains(&c) {
                    break c;
                }
            };
            model.step(u as usize, pos as usize, neg as usize, config.lambda, config.learning_rate);
        }
        if model.user_factors.iter().chain(&model.poi_factors).any(|x| !x.is_finite()) {
            return Err(Error::Diverged {
                epoch: 0,
                reason: "baseline factors became non-finite".into(),
                last_good: None,
            });
        }
    }
    Ok(model)
}
