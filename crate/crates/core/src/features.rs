//! Hashed sparse features and the dense weight vector shared by the policy,
//! the process reward model and the test-case generator.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

pub const DEFAULT_DIM: usize = 4096;

/// Deterministic map from a feature key to a weight index (FNV-1a, 64 bit).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureHasher {
    pub kind: HasherKind,
    pub dim: usize,
    pub salt: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HasherKind {
    Fnv1a64,
}

impl FeatureHasher {
    pub fn new(dim: usize, salt: u64) -> Self {
        assert!(dim > 0, "feature dimension must be positive");
        FeatureHasher {
            kind: HasherKind::Fnv1a64,
            dim,
            salt,
        }
    }

    /// Index of the key formed by `parts`. Parts are separated so that
    /// `["ab", "c"]` and `["a", "bc"]` hash differently.
    pub fn index(&self, parts: &[&[u8]]) -> u32 {
        let mut h = FnvHasher::default();
        h.write_u64(self.salt);
        for p in parts {
            h.write_usize(p.len());
            h.write(p);
        }
        (h.finish() % self.dim as u64) as u32
    }
}

impl Default for FeatureHasher {
    fn default() -> Self {
        FeatureHasher::new(DEFAULT_DIM, 0)
    }
}

/// Sparse feature vector. Indices are kept sorted and unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureVec {
    entries: Vec<(u32, f64)>,
}

impl FeatureVec {
    pub fn builder(hasher: &FeatureHasher) -> FeatureBuilder<'_> {
        FeatureBuilder {
            hasher,
            raw: Vec::with_capacity(16),
        }
    }

    pub fn from_entries(mut raw: Vec<(u32, f64)>) -> Self {
        raw.sort_by_key(|&(i, _)| i);
        let mut entries: Vec<(u32, f64)> = Vec::with_capacity(raw.len());
        for (i, v) in raw {
            match entries.last_mut() {
                Some((j, acc)) if *j == i => *acc += v,
                _ => entries.push((i, v)),
            }
        }
        FeatureVec { entries }
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub struct FeatureBuilder<'a> {
    hasher: &'a FeatureHasher,
    raw: Vec<(u32, f64)>,
}

impl FeatureBuilder<'_> {
    pub fn on(&mut self, parts: &[&[u8]]) -> &mut Self {
        self.value(parts, 1.0)
    }

    pub fn value(&mut self, parts: &[&[u8]], v: f64) -> &mut Self {
        let i = self.hasher.index(parts);
        self.raw.push((i, v));
        self
    }

    pub fn build(&mut self) -> FeatureVec {
        FeatureVec::from_entries(std::mem::take(&mut self.raw))
    }
}

/// Dense weights plus the hasher that addresses them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub hasher: FeatureHasher,
    pub weights: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(hasher: FeatureHasher) -> Self {
        ModelParams {
            weights: vec![0.0; hasher.dim],
            hasher,
        }
    }

    /// Weights drawn i.i.d. from `N(0, scale^2)`.
    pub fn random(hasher: FeatureHasher, scale: f64, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, scale).expect("scale must be finite and non-negative");
        let weights = (0..hasher.dim).map(|_| normal.sample(rng)).collect();
        ModelParams { hasher, weights }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn dot(&self, f: &FeatureVec) -> f64 {
        f.entries
            .iter()
            .map(|&(i, v)| self.weights[i as usize] * v)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    /// `weights += scale * direction`.
    pub fn add_scaled(&mut self, direction: &[f64], scale: f64) {
        debug_assert_eq!(direction.len(), self.weights.len());
        for (w, d) in self.weights.iter_mut().zip(direction) {
            *w += scale * d;
        }
    }
}

/// `grad += scale * f` for a sparse `f`.
pub fn accumulate(grad: &mut [f64], f: &FeatureVec, scale: f64) {
    for &(i, v) in &f.entries {
        grad[i as usize] += scale * v;
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(z)` without overflow for large `|z|`.
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Log-probabilities of a softmax over `scores`.
pub fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    scores.iter().map(|s| s - lse).collect()
}

/// Adds `scale * (f_chosen - E_p[f])` to `grad`: the gradient of
/// `scale * ln softmax(w . f)[chosen]`.
pub fn accumulate_log_softmax_grad(
    grad: &mut [f64],
    features: &[FeatureVec],
    probs: &[f64],
    chosen: usize,
    scale: f64,
) {
    accumulate(grad, &features[chosen], scale);
    for (f, &p) in features.iter().zip(probs) {
        accumulate(grad, f, -scale * p);
    }
}

/// One categorical choice: the features of every alternative and the pick.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionPoint {
    pub features: Vec<FeatureVec>,
    pub chosen: usize,
}

impl DecisionPoint {
    pub fn log_probs(&self, params: &ModelParams) -> Vec<f64> {
        let scores: Vec<f64> = self.features.iter().map(|f| params.dot(f)).collect();
        log_softmax(&scores)
    }
}

/// Sum of chosen log-probabilities.
pub fn points_loglik(params: &ModelParams, points: &[DecisionPoint]) -> f64 {
    points.iter().map(|p| p.log_probs(params)[p.chosen]).sum()
}

/// Adds `scale * grad ln p(points)` into `grad` and returns `ln p(points)`.
pub fn points_loglik_grad(
    params: &ModelParams,
    points: &[DecisionPoint],
    scale: f64,
    grad: &mut [f64],
) -> f64 {
    let mut total = 0.0;
    for p in points {
        let lp = p.log_probs(params);
        total += lp[p.chosen];
        let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        accumulate_log_softmax_grad(grad, &p.features, &probs, p.chosen, scale);
    }
    total
}

/// `-ln sigmoid(beta * delta)` and its derivative with respect to `delta`.
pub fn dpo_term(beta: f64, delta: f64) -> (f64, f64) {
    let z = beta * delta;
    (-log_sigmoid(z), -beta * sigmoid(-z))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashing_is_stable_and_separated() {
        let h = FeatureHasher::new(1 << 20, 7);
        assert_eq!(h.index(&[b"ab", b"c"]), h.index(&[b"ab", b"c"]));
        assert_ne!(h.index(&[b"ab", b"c"]), h.index(&[b"a", b"bc"]));
        assert_ne!(
            FeatureHasher::new(1 << 20, 8).index(&[b"x"]),
            h.index(&[b"x"])
        );
    }

    #[test]
    fn builder_merges_duplicates() {
        let h = FeatureHasher::new(16, 0);
        let f = FeatureVec::builder(&h).on(&[b"a"]).on(&[b"a"]).build();
        assert_eq!(f.entries().len(), 1);
        assert_eq!(f.entries()[0].1, 2.0);
    }

    #[test]
    fn stable_sigmoids() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-16);
        assert!(log_sigmoid(800.0) == 0.0 || log_sigmoid(800.0).abs() < 1e-300);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        for z in [-3.0, -0.5, 0.25, 4.0] {
            assert!((sigmoid(z) + sigmoid(-z) - 1.0).abs() < 1e-15);
            assert!((log_sigmoid(z) - sigmoid(z).ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn log_softmax_normalizes() {
        let lp = log_softmax(&[1.0, 2.0, 3.0, -1000.0]);
        let s: f64 = lp.iter().map(|l| l.exp()).sum();
        assert!((s - 1.0).abs() < 1e-15);
        let shifted = log_softmax(&[11.0, 12.0, 13.0, -990.0]);
        for (a, b) in lp.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn params_serialize_as_plain_arrays() {
        let p = ModelParams::zeros(FeatureHasher::new(3, 1));
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(
            json,
            r#"{"hasher":{"kind":"fnv1a64","dim":3,"salt":1},"weights":[0.0,0.0,0.0]}"#
        );
        assert_eq!(serde_json::from_str::<ModelParams>(&json).unwrap(), p);
    }
}
