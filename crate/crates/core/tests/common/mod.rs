#![allow(dead_code)]

pub mod dd;

use std::sync::Arc;

use nextpoi::checkin::{Catalog, Dataset, Poi, Provenance, SplitDataset, Visit};
use nextpoi::evaluate::MfModel;
use nextpoi::features::{ContextVector, FeatureSchema};
use nextpoi::model::{GateMode, ModelMeta, ModelParams};
use nextpoi::trainer::BprTriple;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn schema() -> FeatureSchema {
    FeatureSchema::new(6, 0.0, vec!["cafe".into(), "park".into()]).unwrap()
}

/// Venues scattered over a few km with alternating categories.
pub fn meta(m: usize, n: usize, seed: u64) -> ModelMeta {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelMeta {
        user_ids: (0..m).map(|u| format!("u{u:03}")).collect(),
        pois: (0..n)
            .map(|p| Poi {
                id: format!("p{p:03}"),
                lat: 34.0 + rng.random_range(-0.05..0.05),
                lon: -118.2 + rng.random_range(-0.05..0.05),
                category: Some((p % 2) as u32),
            })
            .collect(),
        fingerprint: [7; 32],
        spatial_fit: None,
    }
}

/// Every parameter drawn i.i.d. from `N(0, sigma^2)`.
#[allow(clippy::too_many_arguments)]
pub fn random_model(k: usize, d: usize, mode: GateMode, m: usize, n: usize, lambda: f64, sigma: f64, seed: u64) -> ModelParams {
    let mut model = ModelParams::zeros(k, d, mode, schema(), lambda, 0.01, meta(m, n, seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(1));
    let normal = Normal::new(0.0, sigma).unwrap();
    for p in &mut model.patterns {
        for f in [&mut p.user_factors, &mut p.next_user_factors, &mut p.next_prev_factors, &mut p.prev_factors] {
            f.as_mut_slice().iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        }
        p.rho = normal.sample(&mut rng);
    }
    model
        .gate
        .as_mut_slice()
        .iter_mut()
        .for_each(|x| *x = normal.sample(&mut rng));
    model
}

pub fn context_at(model: &ModelParams, prev: u32, time: i64) -> ContextVector {
    model.schema.encode(time, model.meta.pois[prev as usize].category).unwrap()
}

/// A triple with distinct positive and negative venues.
pub fn random_triple<R: Rng>(model: &ModelParams, rng: &mut R) -> BprTriple {
    let (m, n) = (model.num_users() as u32, model.num_pois() as u32);
    let user = rng.random_range(0..m);
    let prev_poi = rng.random_range(0..n);
    let positive = rng.random_range(0..n);
    let negative = loop {
        let c = rng.random_range(0..n);
        if c != positive {
            break c;
        }
    };
    let time = rng.random_range(1_300_000_000..1_300_000_000 + 14 * 86_400);
    BprTriple {
        user,
        prev_poi,
        positive,
        negative,
        context: context_at(model, prev_poi, time),
        d_pos: model.meta.distance_km(prev_poi as usize, positive as usize),
        d_neg: model.meta.distance_km(prev_poi as usize, negative as usize),
    }
}

// ---- independent reference implementations ----

pub fn naive_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

pub fn oracle_pattern_score(model: &ModelParams, s: usize, u: u32, i: u32, l: u32, d: f64) -> f64 {
    let p = &model.patterns[s];
    naive_dot(p.user_factors.row(u as usize), p.next_user_factors.row(l as usize))
        + naive_dot(p.next_prev_factors.row(l as usize), p.prev_factors.row(i as usize))
        + p.rho / d.max(model.min_distance_km)
}

pub fn oracle_gate_logits(model: &ModelParams, user: u32, ctx: &ContextVector) -> Vec<f64> {
    let block = match model.mode() {
        GateMode::Global => 0,
        GateMode::PerUser => user as usize,
    };
    (0..model.num_patterns())
        .map(|s| naive_dot(model.gate.weights(block, s), &ctx.values))
        .collect()
}

/// Softmax in the textbook form, shifted by the maximum only to avoid overflow.
pub fn oracle_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

pub fn plain_sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn oracle_gaps(model: &ModelParams, t: &BprTriple) -> Vec<f64> {
    (0..model.num_patterns())
        .map(|s| {
            oracle_pattern_score(model, s, t.user, t.prev_poi, t.positive, t.d_pos)
                - oracle_pattern_score(model, s, t.user, t.prev_poi, t.negative, t.d_neg)
        })
        .collect()
}

/// Posterior over patterns as the direct ratio `sigma(gap) p / sum`.
pub fn oracle_gamma(model: &ModelParams, t: &BprTriple) -> Vec<f64> {
    let p = oracle_softmax(&oracle_gate_logits(model, t.user, &t.context));
    let w: Vec<f64> = oracle_gaps(model, t)
        .iter()
        .zip(&p)
        .map(|(g, p)| plain_sigmoid(*g) * p)
        .collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|x| x / z).collect()
}

fn sq(v: &[f64]) -> f64 {
    naive_dot(v, v)
}

/// Per-triple expected objective with the prior restricted to the rows and
/// gate weights the triple touches.
pub fn oracle_q(model: &ModelParams, t: &BprTriple, gamma: &[f64]) -> f64 {
    let p = oracle_softmax(&oracle_gate_logits(model, t.user, &t.context));
    let gaps = oracle_gaps(model, t);
    let block = match model.mode() {
        GateMode::Global => 0,
        GateMode::PerUser => t.user as usize,
    };
    let mut q = 0.0;
    for s in 0..model.num_patterns() {
        let pp = &model.patterns[s];
        let local = sq(pp.user_factors.row(t.user as usize))
            + sq(pp.prev_factors.row(t.prev_poi as usize))
            + sq(pp.next_user_factors.row(t.positive as usize))
            + sq(pp.next_user_factors.row(t.negative as usize))
            + sq(pp.next_prev_factors.row(t.positive as usize))
            + sq(pp.next_prev_factors.row(t.negative as usize))
            + pp.rho * pp.rho
            + sq(model.gate.weights(block, s));
        q += gamma[s] * (plain_sigmoid(gaps[s]).ln() + p[s].ln() - 0.5 * model.lambda_theta * local);
    }
    q
}

/// [`oracle_q`] evaluated in double-double arithmetic, for finite
/// differences whose numerators fall below f64 resolution.
pub fn oracle_q_dd(model: &ModelParams, t: &BprTriple, gamma: &[f64]) -> dd::Dd {
    use dd::Dd;
    let k = model.num_patterns();
    let block = match model.mode() {
        GateMode::Global => 0,
        GateMode::PerUser => t.user as usize,
    };
    let logits: Vec<Dd> = (0..k).map(|s| dd::dot(model.gate.weights(block, s), &t.context.values)).collect();
    let log_norm = logits.iter().fold(Dd::default(), |acc, &l| acc + l.exp()).ln();
    let score = |s: usize, l: u32, d: f64| -> Dd {
        let p = &model.patterns[s];
        dd::dot(p.user_factors.row(t.user as usize), p.next_user_factors.row(l as usize))
            + dd::dot(p.next_prev_factors.row(l as usize), p.prev_factors.row(t.prev_poi as usize))
            + Dd::from(p.rho) / Dd::from(d.max(model.min_distance_km))
    };
    let sq = |v: &[f64]| dd::dot(v, v);
    let mut q = Dd::default();
    for s in 0..k {
        let gap = score(s, t.positive, t.d_pos) - score(s, t.negative, t.d_neg);
        let ln_sigmoid = -(Dd::from(1.0) + (-gap).exp()).ln();
        let pp = &model.patterns[s];
        let local = sq(pp.user_factors.row(t.user as usize))
            + sq(pp.prev_factors.row(t.prev_poi as usize))
            + sq(pp.next_user_factors.row(t.positive as usize))
            + sq(pp.next_user_factors.row(t.negative as usize))
            + sq(pp.next_prev_factors.row(t.positive as usize))
            + sq(pp.next_prev_factors.row(t.negative as usize))
            + Dd::from(pp.rho) * Dd::from(pp.rho)
            + sq(model.gate.weights(block, s));
        let term = ln_sigmoid + logits[s] - log_norm - Dd::from(0.5 * model.lambda_theta) * local;
        q = q + Dd::from(gamma[s]) * term;
    }
    q
}

/// `sum_t ln sum_s sigma(gap) p - lambda/2 ||theta||^2`, summed term by term.
pub fn oracle_log_objective(model: &ModelParams, triples: &[BprTriple]) -> f64 {
    let mut data = 0.0;
    for t in triples {
        let p = oracle_softmax(&oracle_gate_logits(model, t.user, &t.context));
        let gaps = oracle_gaps(model, t);
        let mix: f64 = gaps.iter().zip(&p).map(|(g, p)| plain_sigmoid(*g) * p).sum();
        data += mix.ln();
    }
    let mut norm = sq(model.gate.as_slice());
    for p in &model.patterns {
        norm += sq(p.user_factors.as_slice())
            + sq(p.next_user_factors.as_slice())
            + sq(p.next_prev_factors.as_slice())
            + sq(p.prev_factors.as_slice())
            + p.rho * p.rho;
    }
    data - 0.5 * model.lambda_theta * norm
}

// ---- dataset fixtures ----

/// Venues on a line, 1 km apart, no categories.
pub fn line_catalog(users: usize, pois: usize) -> Arc<Catalog> {
    Arc::new(Catalog::new(
        (0..users).map(|u| format!("u{u}")).collect(),
        (0..pois)
            .map(|p| Poi {
                id: format!("p{p}"),
                lat: 0.0,
                lon: p as f64 / 111.195,
                category: None,
            })
            .collect(),
        Vec::new(),
    ))
}

/// Train and test sequences given as venue indices; timestamps one hour apart.
pub fn split_from(catalog: Arc<Catalog>, train: &[&[u32]], test: &[&[u32]]) -> SplitDataset {
    let to_visits = |seqs: &[&[u32]], start: usize| -> Vec<Vec<Visit>> {
        seqs.iter()
            .map(|s| {
                s.iter()
                    .enumerate()
                    .map(|(k, &poi)| Visit {
                        poi,
                        timestamp: 1_300_000_000 + 3600 * (start + k) as i64,
                    })
                    .collect()
            })
            .collect()
    };
    SplitDataset {
        train: Dataset::from_sequences(Arc::clone(&catalog), to_visits(train, 0), Provenance::Train).unwrap(),
        test: Dataset::from_sequences(catalog, to_visits(test, 1000), Provenance::Test).unwrap(),
        split_fraction: 0.8,
    }
}

/// Tab-separated check-in line.
pub fn line(user: &str, poi: &str, t: i64, lat: f64, lon: f64, cat: &str) -> String {
    format!("{user}\t{poi}\t{t}\t{lat}\t{lon}\t{cat}")
}

/// Every user prefers venues in index order: p0 first, p4 last.
pub fn fixed_order_scorer(catalog: &Catalog) -> MfModel {
    MfModel {
        dim: 1,
        num_users: catalog.num_users(),
        num_pois: catalog.num_pois(),
        user_factors: vec![1.0; catalog.num_users()],
        poi_factors: (0..catalog.num_pois()).map(|l| (catalog.num_pois() - l) as f64).collect(),
        fingerprint: catalog.fingerprint(),
        user_ids: catalog.users().to_vec(),
        poi_ids: catalog.pois().iter().map(|p| p.id.clone()).collect(),
    }
}

// Fixture, venues a..e = p0..p4, candidate order a > b > c > d > e:
//   u0 train [a b]  test [c a]    queries b->c (rank 1, new), c->a (rank 0)
//   u1 train [c]    test [d e d]  c->d (rank 2, new), d->e (rank 3, new), e->d (rank 3, new)
//   u2 train [a e]  test [e]      e->e (target is the previous venue: miss)
pub fn metric_fixture() -> (SplitDataset, MfModel) {
    let catalog = line_catalog(3, 5);
    let split = split_from(catalog.clone(), &[&[0, 1], &[2], &[0, 4]], &[&[2, 0], &[3, 4, 3], &[4]]);
    let model = fixed_order_scorer(&catalog);
    (split, model)
}
