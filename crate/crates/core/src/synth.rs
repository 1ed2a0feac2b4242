//! Synthetic check-in corpora drawn from a known pattern mixture, and a
//! brute-force ranking oracle.
//!
//! Each walk step reads the context at the current check-in, draws a pattern
//! from the planted gate, then draws the next venue from a softmax over that
//! pattern's scores restricted to the nearest `candidate_pool` venues.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkin::{Catalog, Dataset, Poi, Provenance, Visit};
use crate::error::{Error, Result};
use crate::features::{ContextVector, FeatureSchema, DEFAULT_TIME_BINS};
use crate::model::{GateMode, ModelMeta, ModelParams};
use crate::spatial::DEFAULT_MIN_DISTANCE_KM;

const KM_PER_DEGREE: f64 = 111.194_926_644_558_73;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_pois: usize,
    pub n_categories: usize,
    pub events_per_user: usize,
    pub k_true: usize,
    pub d_true: usize,
    /// Logit gap between the dominant pattern and the others in each time bin.
    pub gate_sharpness: f64,
    /// Hour-of-day resolution of the planted gate; must divide 24.
    pub time_bins: usize,
    pub geo_extent_km: f64,
    pub seed: u64,
    /// Standard deviation of the planted transition factors (`Vli`, `Vil`).
    pub factor_scale: f64,
    /// Standard deviation of the planted user-side factors (`U`, `Vlu`).
    pub user_factor_scale: f64,
    /// How far each user's taste strays from the pattern's shared taste.
    pub taste_spread: f64,
    /// Planted spatial weight, the same for every pattern.
    pub rho: f64,
    pub center_lat: f64,
    pub center_lon: f64,
    pub start_time: i64,
    /// Venues considered at each step, nearest first.
    pub candidate_pool: usize,
    /// Share of users that only produce `light_events` check-ins.
    pub light_user_fraction: f64,
    pub light_events: usize,
    /// When positive, gates are planted per user and this share of users
    /// gets the negated gate.
    pub minority_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 200,
            n_pois: 300,
            n_categories: 4,
            events_per_user: 150,
            k_true: 2,
            d_true: 8,
            gate_sharpness: 4.0,
            time_bins: DEFAULT_TIME_BINS,
            geo_extent_km: 20.0,
            seed: 0,
            factor_scale: 1.0,
            user_factor_scale: 1.0,
            taste_spread: 1.0,
            rho: 1.0,
            center_lat: 34.05,
            center_lon: -118.24,
            start_time: 1_300_000_000,
            candidate_pool: 200,
            light_user_fraction: 0.0,
            light_events: 25,
            minority_fraction: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_users", self.n_users),
            ("n_categories", self.n_categories),
            ("events_per_user", self.events_per_user),
            ("k_true", self.k_true),
            ("d_true", self.d_true),
            ("candidate_pool", self.candidate_pool),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.n_pois < 2 {
            return Err(Error::Config("n_pois must be at least 2".into()));
        }
        if !(self.gate_sharpness >= 0.0) || !(self.geo_extent_km > 0.0) || !(self.factor_scale >= 0.0) || !(self.user_factor_scale >= 0.0) {
            return Err(Error::Config("sharpness, extent and factor scale must be non-negative".into()));
        }
        for (name, f) in [("light_user_fraction", self.light_user_fraction), ("minority_fraction", self.minority_fraction)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    fn is_personalized(&self) -> bool {
        self.minority_fraction > 0.0
    }
}

/// A generated corpus with its ground truth.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub dataset: Dataset,
    pub truth: ModelParams,
    /// Per user and event: the venue had not appeared earlier in the walk.
    pub novelty: Vec<Vec<bool>>,
    /// Per user and step: the pattern that produced the move into event t+1.
    pub patterns: Vec<Vec<usize>>,
    /// Per user: member of the negated-gate cohort.
    pub minority: Vec<bool>,
}

fn padded(prefix: &str, k: usize, n: usize) -> String {
    let width = n.saturating_sub(1).to_string().len();
    format!("{prefix}{k:0width$}")
}

/// Point `(dx, dy)` km east and north of `(lat0, lon0)`, flat-earth approximation.
fn offset_coords(lat0: f64, lon0: f64, dx_km: f64, dy_km: f64) -> (f64, f64) {
    let lat = lat0 + dy_km / KM_PER_DEGREE;
    let lon = lon0 + dx_km / (KM_PER_DEGREE * lat0.to_radians().cos());
    (lat, lon)
}

/// Time-bin ownership: the day's `bins` are cut into `k` contiguous arcs,
/// rotated by `shift` bins, and each arc's pattern dominates it.
fn dominant_pattern(bin: usize, bins: usize, k: usize, shift: usize) -> usize {
    ((bin + shift) % bins) * k / bins
}

pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (m, n, k, d) = (config.n_users, config.n_pois, config.k_true, config.d_true);

    let half = config.geo_extent_km / 2.0;
    let pois: Vec<Poi> = (0..n)
        .map(|p| {
            let dx = rng.random_range(-half..=half);
            let dy = rng.random_range(-half..=half);
            let (lat, lon) = offset_coords(config.center_lat, config.center_lon, dx, dy);
            Poi {
                id: padded("p", p, n),
                lat,
                lon,
                category: Some(rng.random_range(0..config.n_categories as u32)),
            }
        })
        .collect();
    let users: Vec<String> = (0..m).map(|u| padded("u", u, m)).collect();
    let categories: Vec<String> = (0..config.n_categories).map(|c| padded("c", c, config.n_categories)).collect();
    let catalog = Arc::new(Catalog::new(users, pois, categories.clone()));

    let schema = FeatureSchema::new(config.time_bins, 0.0, categories)?;
    let mode = if config.is_personalized() { GateMode::PerUser } else { GateMode::Global };
    let mut truth = ModelParams::zeros(
        k,
        d,
        mode,
        schema,
        1.0,
        DEFAULT_MIN_DISTANCE_KM,
        ModelMeta::from_catalog(&catalog),
    )?;

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for p in &mut truth.patterns {
        let shared: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
        for u in 0..m {
            for (x, s) in p.user_factors.row_mut(u).iter_mut().zip(&shared) {
                *x = config.user_factor_scale * (s + config.taste_spread * normal.sample(&mut rng));
            }
        }
        for (f, scale) in [
            (&mut p.next_user_factors, config.user_factor_scale),
            (&mut p.next_prev_factors, config.factor_scale),
            (&mut p.prev_factors, config.factor_scale),
        ] {
            f.as_mut_slice().iter_mut().for_each(|x| *x = scale * normal.sample(&mut rng));
        }
        p.rho = config.rho;
    }

    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng);
    let n_minority = (config.minority_fraction * m as f64).round() as usize;
    let mut minority = vec![false; m];
    for &u in &order[..n_minority] {
        minority[u] = true;
    }
    order.shuffle(&mut rng);
    let n_light = (config.light_user_fraction * m as f64).round() as usize;
    let mut light = vec![false; m];
    for &u in &order[..n_light] {
        light[u] = true;
    }

    let shift = rng.random_range(0..config.time_bins);
    let half_gap = config.gate_sharpness / 2.0;
    for block in 0..truth.gate.num_blocks() {
        let sign = if minority[block.min(m - 1)] && mode == GateMode::PerUser { -1.0 } else { 1.0 };
        for s in 0..k {
            let w = truth.gate.weights_mut(block, s);
            for (h, x) in w.iter_mut().take(config.time_bins).enumerate() {
                let own = dominant_pattern(h, config.time_bins, k, shift) == s;
                *x = sign * if own { half_gap } else { -half_gap };
            }
        }
    }

    let neighbours = nearest_neighbours(&truth.meta, config.candidate_pool);
    let walks: Vec<(Vec<Visit>, Vec<bool>, Vec<usize>)> = (0..m)
        .into_par_iter()
        .map(|u| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(u as u64 + 1);
            let events = if light[u] { config.light_events.max(1) } else { config.events_per_user };
            walk(&truth, &neighbours, u as u32, events, config.start_time, &mut rng)
        })
        .collect();

    let mut sequences = Vec::with_capacity(m);
    let mut novelty = Vec::with_capacity(m);
    let mut patterns = Vec::with_capacity(m);
    for (seq, nov, pat) in walks {
        sequences.push(seq);
        novelty.push(nov);
        patterns.push(pat);
    }
    let dataset = Dataset::from_sequences(catalog, sequences, Provenance::Full)?;
    Ok(SynthCorpus {
        dataset,
        truth,
        novelty,
        patterns,
        minority,
    })
}

fn nearest_neighbours(meta: &ModelMeta, pool: usize) -> Vec<Vec<(u32, f64)>> {
    let n = meta.pois.len();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut all: Vec<(u32, f64)> = (0..n)
                .filter(|&l| l != i)
                .map(|l| (l as u32, meta.distance_km(i, l)))
                .collect();
            all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            all.truncate(pool);
            all
        })
        .collect()
}

/// Inter-check-in gap in seconds: mostly under 16 hours, occasionally days.
fn draw_gap<R: Rng + ?Sized>(rng: &mut R) -> i64 {
    let hours: f64 = if rng.random_bool(0.85) {
        rng.random_range(0.25..16.0)
    } else {
        16.0 + Exp::new(1.0 / 48.0).expect("positive rate").sample(rng)
    };
    (hours * 3600.0).round() as i64
}

fn draw_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut target = rng.random_range(0.0..total);
    for (j, w) in weights.iter().enumerate() {
        if target < *w {
            return j;
        }
        target -= w;
    }
    weights.len() - 1
}

fn walk(
    truth: &ModelParams,
    neighbours: &[Vec<(u32, f64)>],
    user: u32,
    events: usize,
    start: i64,
    rng: &mut ChaCha8Rng,
) -> (Vec<Visit>, Vec<bool>, Vec<usize>) {
    let n = truth.num_pois();
    let mut seen = vec![false; n];
    let mut visits = Vec::with_capacity(events);
    let mut novelty = Vec::with_capacity(events);
    let mut used = Vec::with_capacity(events.saturating_sub(1));

    let mut time = start + rng.random_range(0..7 * 86_400);
    let mut poi = rng.random_range(0..n as u32);
    let mut weights = Vec::new();
    for t in 0..events {
        visits.push(Visit { poi, timestamp: time });
        novelty.push(!seen[poi as usize]);
        seen[poi as usize] = true;
        if t + 1 == events {
            break;
        }
        let category = truth.meta.pois[poi as usize].category;
        let context = truth.schema.encode(time, category).expect("category in schema");
        let gate = truth.gate_distribution(Some(user), &context).expect("user in range");
        let s = draw_index(&gate.probs, rng);
        used.push(s);

        let cands = &neighbours[poi as usize];
        weights.clear();
        weights.extend(
            cands
                .iter()
                .map(|&(l, dist)| truth.pattern_score_unchecked(s, user as usize, poi as usize, l as usize, dist)),
        );
        let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        weights.iter_mut().for_each(|w| *w = (*w - max).exp());
        poi = cands[draw_index(&weights, rng)].0;
        time += draw_gap(rng);
    }
    (visits, novelty, used)
}

/// Settings for a corpus whose step lengths follow a planted distance law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementConfig {
    pub n_users: usize,
    pub events_per_user: usize,
    pub min_km: f64,
    pub max_km: f64,
    pub seed: u64,
    pub center_lat: f64,
    pub center_lon: f64,
    pub start_time: i64,
}

impl Default for DisplacementConfig {
    fn default() -> Self {
        DisplacementConfig {
            n_users: 100,
            events_per_user: 200,
            min_km: 0.05,
            max_km: 50.0,
            seed: 0,
            center_lat: 40.71,
            center_lon: -74.0,
            start_time: 1_300_000_000,
        }
    }
}

/// Walks whose consecutive check-ins are `d` km apart with `d` drawn from
/// the density proportional to `d^-2` on `[min_km, max_km]`, so that counts
/// in logarithmic distance bins fall off as `d^-1`. Every check-in opens a
/// fresh venue.
pub fn generate_displacement_walks(config: &DisplacementConfig) -> Result<Dataset> {
    if config.n_users == 0 || config.events_per_user < 2 {
        return Err(Error::Config("need at least one user with two events".into()));
    }
    if !(config.min_km > 0.0 && config.max_km > config.min_km) {
        return Err(Error::Config("distance range must satisfy 0 < min < max".into()));
    }
    let (inv_lo, inv_hi) = (1.0 / config.min_km, 1.0 / config.max_km);
    let total = config.n_users * config.events_per_user;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pois = Vec::with_capacity(total);
    let mut sequences = Vec::with_capacity(config.n_users);
    for _ in 0..config.n_users {
        let (mut lat, mut lon) = offset_coords(
            config.center_lat,
            config.center_lon,
            rng.random_range(-20.0..20.0),
            rng.random_range(-20.0..20.0),
        );
        let mut time = config.start_time + rng.random_range(0..86_400);
        let mut seq = Vec::with_capacity(config.events_per_user);
        for _ in 0..config.events_per_user {
            let idx = pois.len();
            pois.push(Poi {
                id: padded("q", idx, total),
                lat,
                lon,
                category: None,
            });
            seq.push(Visit {
                poi: idx as u32,
                timestamp: time,
            });
            let r: f64 = rng.random();
            let dist = 1.0 / (inv_lo - r * (inv_lo - inv_hi));
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            (lat, lon) = offset_coords(lat, lon, dist * theta.cos(), dist * theta.sin());
            time += draw_gap(&mut rng);
        }
        sequences.push(seq);
    }
    let users = (0..config.n_users).map(|u| padded("u", u, config.n_users)).collect();
    let catalog = Arc::new(Catalog::new(users, pois, Vec::new()));
    Dataset::from_sequences(catalog, sequences, Provenance::Full)
}

/// Error-free transformation: `a + b = s + e` exactly.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Error-free product via fused multiply-add.
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// Double-double accumulator.
#[derive(Clone, Copy, Debug, Default)]
struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    fn add(self, x: f64) -> Dd {
        let (s, e) = two_sum(self.hi, x);
        let (hi, lo) = two_sum(s, e + self.lo);
        Dd { hi, lo }
    }

    fn add_dd(self, x: Dd) -> Dd {
        self.add(x.hi).add(x.lo)
    }

    fn add_product(self, a: f64, b: f64) -> Dd {
        let (p, e) = two_prod(a, b);
        self.add(p).add(e)
    }

    fn mul(self, x: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, x.hi);
        let e = e + self.hi * x.lo + self.lo * x.hi;
        let (hi, lo) = two_sum(p, e);
        Dd { hi, lo }
    }

    fn value(self) -> f64 {
        self.hi + self.lo
    }
}

fn oracle_haversine(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = (lat2 - lat1).to_radians();
    let dl = (lon2 - lon1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * 6371.0 * h.sqrt().min(1.0).asin()
}

/// Ranks every venue except `prev_poi` by the gated mixture score, evaluated
/// with plain loops and double-double accumulation. Ties go to the lower
/// index.
pub fn brute_force_rank(model: &ModelParams, user: u32, prev_poi: u32, context: &ContextVector) -> Vec<(u32, f64)> {
    let (u, i) = (user as usize, prev_poi as usize);
    let k = model.num_patterns();
    let block = match model.mode() {
        GateMode::Global => 0,
        GateMode::PerUser => u,
    };

    let mut logits = vec![0.0; k];
    for (s, logit) in logits.iter_mut().enumerate() {
        let mut acc = Dd::default();
        for (j, g) in context.values.iter().enumerate() {
            acc = acc.add_product(model.gate.weights(block, s)[j], *g);
        }
        *logit = acc.value();
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let mut z = Dd::default();
    for e in &exps {
        z = z.add(*e);
    }
    let probs: Vec<f64> = exps.iter().map(|e| e / z.value()).collect();

    let prev = &model.meta.pois[i];
    let mut ranked = Vec::with_capacity(model.num_pois().saturating_sub(1));
    for l in 0..model.num_pois() {
        if l == i {
            continue;
        }
        let next = &model.meta.pois[l];
        let dist = oracle_haversine(prev.lat, prev.lon, next.lat, next.lon);
        let sp = 1.0 / dist.max(model.min_distance_km);
        let mut total = Dd::default();
        for (s, p) in model.patterns.iter().enumerate() {
            let mut x = Dd::default();
            for j in 0..model.dim() {
                x = x.add_product(p.user_factors.row(u)[j], p.next_user_factors.row(l)[j]);
            }
            for j in 0..model.dim() {
                x = x.add_product(p.next_prev_factors.row(l)[j], p.prev_factors.row(i)[j]);
            }
            x = x.add_product(p.rho, sp);
            total = total.add_dd(x.mul(Dd { hi: probs[s], lo: 0.0 }));
        }
        ranked.push((l as u32, total.value()));
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}
