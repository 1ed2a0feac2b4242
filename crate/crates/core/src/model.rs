//! Model parameters and scoring.
//!
//! Each latent pattern `s` scores a move `i -> l` of user `u` as
//!
//! ```text
//! x^s(u, i, l) = <U^s[u], Vlu^s[l]> + <Vli^s[l], Vil^s[i]> + rho^s / max(d(i, l), clamp)
//! ```
//!
//! and the recommendation score mixes the patterns with a softmax gate over
//! the context features: `x(u, i, l) = sum_s x^s(u, i, l) p(s | c)`.
//! The gate weights are shared by all users (global mode) or kept per user.

use serde::{Deserialize, Serialize};

use crate::checkin::{Catalog, Poi};
use crate::error::{Error, Result};
use crate::features::{ContextVector, FeatureSchema};
use crate::math::{dot, softmax_in_place};
use crate::spatial::{haversine_km, spatial_preference, PowerLawFit};

/// Dense row-major matrix of latent factors.
#[derive(Clone, Debug, PartialEq)]
pub struct Factors {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Factors {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Factors {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_vec(rows: usize, dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * dim);
        Factors { rows, dim, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Factor matrices and spatial weight of one latent pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternParams {
    /// Users against next venues, M x D.
    pub user_factors: Factors,
    /// Next venues against users, N x D.
    pub next_user_factors: Factors,
    /// Next venues against previous venues, N x D.
    pub next_prev_factors: Factors,
    /// Previous venues against next venues, N x D.
    pub prev_factors: Factors,
    /// Weight of the distance-decay term.
    pub rho: f64,
}

impl PatternParams {
    pub fn zeros(num_users: usize, num_pois: usize, dim: usize) -> Self {
        PatternParams {
            user_factors: Factors::zeros(num_users, dim),
            next_user_factors: Factors::zeros(num_pois, dim),
            next_prev_factors: Factors::zeros(num_pois, dim),
            prev_factors: Factors::zeros(num_pois, dim),
            rho: 0.0,
        }
    }

    /// Personal plus sequential part of the score, without the spatial term.
    #[inline]
    pub fn latent_score(&self, u: usize, i: usize, l: usize) -> f64 {
        dot(self.user_factors.row(u), self.next_user_factors.row(l))
            + dot(self.next_prev_factors.row(l), self.prev_factors.row(i))
    }

    pub fn squared_norm(&self) -> f64 {
        [
            &self.user_factors,
            &self.next_user_factors,
            &self.next_prev_factors,
            &self.prev_factors,
        ]
        .iter()
        .flat_map(|f| f.as_slice())
        .map(|x| x * x)
        .sum::<f64>()
            + self.rho * self.rho
    }

    pub fn is_finite(&self) -> bool {
        self.rho.is_finite()
            && [
                &self.user_factors,
                &self.next_user_factors,
                &self.next_prev_factors,
                &self.prev_factors,
            ]
            .iter()
            .all(|f| f.as_slice().iter().all(|x| x.is_finite()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateMode {
    /// One set of gate weights for everybody.
    Global,
    /// Separate gate weights for each user.
    PerUser,
}

/// Softmax gate weights, laid out `[user][pattern][feature]`; global mode
/// has a single user block.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    mode: GateMode,
    patterns: usize,
    features: usize,
    blocks: usize,
    alpha: Vec<f64>,
}

impl GateParams {
    pub fn zeros(mode: GateMode, patterns: usize, features: usize, num_users: usize) -> Self {
        let blocks = match mode {
            GateMode::Global => 1,
            GateMode::PerUser => num_users,
        };
        GateParams {
            mode,
            patterns,
            features,
            blocks,
            alpha: vec![0.0; blocks * patterns * features],
        }
    }

    pub fn mode(&self) -> GateMode {
        self.mode
    }

    pub fn num_features(&self) -> usize {
        self.features
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks
    }

    /// Index of the weight block used for `user`.
    pub fn block_of(&self, user: Option<u32>) -> Result<usize> {
        match (self.mode, user) {
            (GateMode::Global, _) => Ok(0),
            (GateMode::PerUser, Some(u)) if (u as usize) < self.blocks => Ok(u as usize),
            (GateMode::PerUser, Some(u)) => Err(Error::IndexOutOfRange {
                kind: "user",
                index: u as usize,
                size: self.blocks,
            }),
            (GateMode::PerUser, None) => Err(Error::Config("per-user gate needs a user".into())),
        }
    }

    #[inline]
    pub fn weights(&self, block: usize, pattern: usize) -> &[f64] {
        let start = (block * self.patterns + pattern) * self.features;
        &self.alpha[start..start + self.features]
    }

    #[inline]
    pub fn weights_mut(&mut self, block: usize, pattern: usize) -> &mut [f64] {
        let start = (block * self.patterns + pattern) * self.features;
        &mut self.alpha[start..start + self.features]
    }

    pub fn block(&self, block: usize) -> &[f64] {
        let n = self.patterns * self.features;
        &self.alpha[block * n..(block + 1) * n]
    }

    pub fn block_mut(&mut self, block: usize) -> &mut [f64] {
        let n = self.patterns * self.features;
        &mut self.alpha[block * n..(block + 1) * n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.alpha
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.alpha
    }

    /// Unnormalized gate logits `sum_j alpha^s_j g_j(c)` for every pattern.
    pub fn logits_into(&self, block: usize, context: &ContextVector, out: &mut [f64]) {
        for (s, o) in out.iter_mut().enumerate().take(self.patterns) {
            *o = context.dot(self.weights(block, s));
        }
    }
}

/// Probabilities of the latent patterns for one context.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternDistribution {
    pub probs: Vec<f64>,
}

/// Everything needed to score without the training data: catalog tables
/// and the fingerprint of the dataset the model was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelMeta {
    pub user_ids: Vec<String>,
    pub pois: Vec<Poi>,
    pub fingerprint: [u8; 32],
    pub spatial_fit: Option<PowerLawFit>,
}

impl ModelMeta {
    pub fn from_catalog(catalog: &Catalog) -> Self {
        ModelMeta {
            user_ids: catalog.users().to_vec(),
            pois: catalog.pois().to_vec(),
            fingerprint: catalog.fingerprint(),
            spatial_fit: None,
        }
    }

    pub fn distance_km(&self, a: usize, b: usize) -> f64 {
        let (p, q) = (&self.pois[a], &self.pois[b]);
        haversine_km(p.lat, p.lon, q.lat, q.lon)
    }

    pub fn user_index(&self, id: &str) -> Option<u32> {
        self.user_ids.iter().position(|u| u == id).map(|p| p as u32)
    }

    pub fn poi_index(&self, id: &str) -> Option<u32> {
        self.pois.iter().position(|p| p.id == id).map(|p| p as u32)
    }
}

/// Full parameter set of the mixture model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub patterns: Vec<PatternParams>,
    pub gate: GateParams,
    pub schema: FeatureSchema,
    pub lambda_theta: f64,
    pub min_distance_km: f64,
    pub meta: ModelMeta,
}

impl ModelParams {
    /// All-zero model of the given shape.
    pub fn zeros(
        num_patterns: usize,
        dim: usize,
        mode: GateMode,
        schema: FeatureSchema,
        lambda_theta: f64,
        min_distance_km: f64,
        meta: ModelMeta,
    ) -> Result<Self> {
        if num_patterns == 0 || dim == 0 {
            return Err(Error::Config("pattern count and latent dimension must be positive".into()));
        }
        if !(lambda_theta > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {lambda_theta}")));
        }
        if !(min_distance_km > 0.0) {
            return Err(Error::Config("distance clamp must be positive".into()));
        }
        let m = meta.user_ids.len();
        let n = meta.pois.len();
        Ok(ModelParams {
            patterns: (0..num_patterns).map(|_| PatternParams::zeros(m, n, dim)).collect(),
            gate: GateParams::zeros(mode, num_patterns, schema.total_features(), m),
            schema,
            lambda_theta,
            min_distance_km,
            meta,
        })
    }

    pub fn num_patterns(&self) -> usize {
        self.patterns.len()
    }

    pub fn dim(&self) -> usize {
        self.patterns[0].user_factors.dim()
    }

    pub fn num_users(&self) -> usize {
        self.meta.user_ids.len()
    }

    pub fn num_pois(&self) -> usize {
        self.meta.pois.len()
    }

    pub fn num_features(&self) -> usize {
        self.schema.total_features()
    }

    pub fn mode(&self) -> GateMode {
        self.gate.mode()
    }

    fn check_user(&self, u: u32) -> Result<()> {
        if (u as usize) < self.num_users() {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                kind: "user",
                index: u as usize,
                size: self.num_users(),
            })
        }
    }

    fn check_poi(&self, p: u32) -> Result<()> {
        if (p as usize) < self.num_pois() {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                kind: "poi",
                index: p as usize,
                size: self.num_pois(),
            })
        }
    }

    fn check_context(&self, context: &ContextVector) -> Result<()> {
        if context.len() == self.num_features() {
            Ok(())
        } else {
            Err(Error::Mismatch(format!(
                "context has {} features, model expects {}",
                context.len(),
                self.num_features()
            )))
        }
    }

    /// Score of the move `i -> l` for user `u` under pattern `s`.
    pub fn pattern_score(&self, s: usize, u: u32, i: u32, l: u32, distance_km: f64) -> Result<f64> {
        if s >= self.num_patterns() {
            return Err(Error::IndexOutOfRange {
                kind: "pattern",
                index: s,
                size: self.num_patterns(),
            });
        }
        self.check_user(u)?;
        self.check_poi(i)?;
        self.check_poi(l)?;
        Ok(self.pattern_score_unchecked(s, u as usize, i as usize, l as usize, distance_km))
    }

    #[inline]
    pub fn pattern_score_unchecked(&self, s: usize, u: usize, i: usize, l: usize, distance_km: f64) -> f64 {
        let p = &self.patterns[s];
        p.latent_score(u, i, l) + p.rho * spatial_preference(distance_km, self.min_distance_km)
    }

    /// Gate logits for one context. `user` is required in per-user mode.
    pub fn gate_logits(&self, user: Option<u32>, context: &ContextVector) -> Result<Vec<f64>> {
        self.check_context(context)?;
        let block = self.gate.block_of(user)?;
        let mut logits = vec![0.0; self.num_patterns()];
        self.gate.logits_into(block, context, &mut logits);
        Ok(logits)
    }

    /// `p(s | c)` for every pattern.
    pub fn gate_distribution(&self, user: Option<u32>, context: &ContextVector) -> Result<PatternDistribution> {
        let mut probs = self.gate_logits(user, context)?;
        softmax_in_place(&mut probs);
        Ok(PatternDistribution { probs })
    }

    /// Mixture score `sum_s x^s p(s | c)`.
    pub fn fused_score(&self, u: u32, i: u32, l: u32, context: &ContextVector, distance_km: f64) -> Result<f64> {
        self.check_user(u)?;
        self.check_poi(i)?;
        self.check_poi(l)?;
        let gate = self.gate_distribution(Some(u), context)?;
        Ok(gate
            .probs
            .iter()
            .enumerate()
            .map(|(s, p)| p * self.pattern_score_unchecked(s, u as usize, i as usize, l as usize, distance_km))
            .sum())
    }

    /// Fused scores of every venue as the next stop after `i`, written into
    /// `out` (length N). Distances come from the stored coordinates.
    pub fn score_all_into(&self, u: u32, i: u32, context: &ContextVector, out: &mut [f64]) -> Result<()> {
        self.check_user(u)?;
        self.check_poi(i)?;
        if out.len() != self.num_pois() {
            return Err(Error::Mismatch("output buffer length differs from POI count".into()));
        }
        let gate = self.gate_distribution(Some(u), context)?;
        let (u, i) = (u as usize, i as usize);
        let prev = &self.meta.pois[i];
        let inv_dist: Vec<f64> = self
            .meta
            .pois
            .iter()
            .map(|p| spatial_preference(haversine_km(prev.lat, prev.lon, p.lat, p.lon), self.min_distance_km))
            .collect();
        out.iter_mut().for_each(|x| *x = 0.0);
        for (s, &w) in gate.probs.iter().enumerate() {
            let p = &self.patterns[s];
            let user = p.user_factors.row(u);
            let prev_row = p.prev_factors.row(i);
            for (l, o) in out.iter_mut().enumerate() {
                let x = dot(user, p.next_user_factors.row(l))
                    + dot(p.next_prev_factors.row(l), prev_row)
                    + p.rho * inv_dist[l];
                *o += w * x;
            }
        }
        Ok(())
    }

    /// Squared L2 norm over every parameter, gate included.
    pub fn squared_norm(&self) -> f64 {
        self.patterns.iter().map(PatternParams::squared_norm).sum::<f64>()
            + self.gate.as_slice().iter().map(|x| x * x).sum::<f64>()
    }

    pub fn is_finite(&self) -> bool {
        self.patterns.iter().all(PatternParams::is_finite) && self.gate.as_slice().iter().all(|x| x.is_finite())
    }
}
