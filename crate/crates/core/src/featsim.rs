//! Feature-similarity prediction and the dual similarity score.
//!
//! The predictor is a sigmoid-linear regressor over pairwise signals between
//! two texts, fit to the feature Jaccard of labeled pairs. Its output is
//! blended with semantic (embedding cosine) similarity to rank demonstration
//! candidates.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{feature_jaccard, CorpusError, Instance};
use crate::demo::{DemoError, DemoScorer};
use crate::encoding::{cosine, EmbeddingVector, EncodeError, SemanticEncoder};
use crate::hashing::{bucket, fnv1a_parts};
use crate::seeding;

pub const DENSE_FEATURES: [&str; 6] =
    ["cosine", "token_jaccard", "length_ratio", "shared_capitalized", "capitalized_jaccard", "shared_digit"];

pub const DEFAULT_BUCKETS: usize = 4096;

#[derive(Debug, Error)]
pub enum FeatsimError {
    #[error("training pool needs at least 2 instances, got {0}")]
    PoolTooSmall(usize),
    #[error("training loss became non-finite at epoch {epoch}; lower the learning rate")]
    NonFiniteLoss { epoch: usize },
    #[error("epochs and learning rate must be positive")]
    BadSchedule,
    #[error("model has {weights} weights for a {dim}-dimensional featurizer")]
    Untrained { dim: usize, weights: usize },
    #[error("gamma must lie in [0, 1], got {0}")]
    BadGamma(f64),
    #[error("score lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("a non-zero gamma needs a feature-similarity model")]
    MissingModel,
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Pairwise signals: five dense values followed by hashed indicator buckets
/// for capitalized-token pairs. Stored sparsely; the logical vector has
/// `DENSE_FEATURES.len() + buckets` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct PairFeatures {
    dim: usize,
    entries: Vec<(usize, f64)>,
}

impl PairFeatures {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Non-zero entries in ascending index order.
    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn get(&self, index: usize) -> f64 {
        self.entries.iter().find(|(i, _)| *i == index).map_or(0.0, |&(_, v)| v)
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(i, v) in &self.entries {
            out[i] = v;
        }
        out
    }

    pub fn dot(&self, weights: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, v)| weights[i] * v).sum()
    }
}

/// Per-text data needed by the featurizer, computed once per text.
#[derive(Clone, Debug)]
pub struct TextProfile {
    lower: BTreeSet<String>,
    capitalized: BTreeSet<String>,
    digits: BTreeSet<String>,
    len: usize,
    embedding: EmbeddingVector,
}

impl TextProfile {
    pub fn new(text: &str, embedding: EmbeddingVector) -> Self {
        let words: Vec<&str> = text.split_whitespace().collect();
        let is_cap = |w: &&&str| w.chars().next().is_some_and(char::is_uppercase);
        let is_digit = |w: &&&str| w.chars().any(|c| c.is_ascii_digit()) && w.chars().all(|c| c.is_ascii_digit() || c == '.' || c == ',');
        TextProfile {
            lower: words.iter().map(|w| w.to_lowercase()).collect(),
            capitalized: words.iter().filter(is_cap).map(|w| w.to_string()).collect(),
            digits: words.iter().filter(is_digit).map(|w| w.to_string()).collect(),
            len: words.len(),
            embedding,
        }
    }

    pub fn embedding(&self) -> &EmbeddingVector {
        &self.embedding
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairFeaturizer {
    pub buckets: usize,
}

impl Default for PairFeaturizer {
    fn default() -> Self {
        PairFeaturizer { buckets: DEFAULT_BUCKETS }
    }
}

impl PairFeaturizer {
    pub fn dim(&self) -> usize {
        DENSE_FEATURES.len() + self.buckets
    }

    pub fn feature_names(&self) -> Vec<String> {
        DENSE_FEATURES
            .iter()
            .map(|s| s.to_string())
            .chain((0..self.buckets).map(|b| format!("capitalized_pair_{b}")))
            .collect()
    }

    pub fn profile<E: SemanticEncoder + ?Sized>(&self, text: &str, encoder: &E) -> Result<TextProfile, EncodeError> {
        Ok(TextProfile::new(text, encoder.encode(text)?))
    }

    /// Every signal is symmetric in its arguments, so is the vector.
    pub fn featurize_profiles(&self, a: &TextProfile, b: &TextProfile) -> Result<PairFeatures, EncodeError> {
        let union = a.lower.union(&b.lower).count();
        let token_jaccard = if union == 0 { 0.0 } else { a.lower.intersection(&b.lower).count() as f64 / union as f64 };
        let length_ratio = match a.len.max(b.len) {
            0 => 1.0,
            max => a.len.min(b.len) as f64 / max as f64,
        };
        let shared_caps = a.capitalized.intersection(&b.capitalized).count() as f64;
        let cap_union = a.capitalized.union(&b.capitalized).count();
        let cap_jaccard = if cap_union == 0 { 0.0 } else { shared_caps / cap_union as f64 };
        let shared_digit = if a.digits.intersection(&b.digits).next().is_some() { 1.0 } else { 0.0 };
        let dense = [
            cosine(&a.embedding, &b.embedding)?,
            token_jaccard,
            length_ratio,
            shared_caps / (shared_caps + 1.0),
            cap_jaccard,
            shared_digit,
        ];
        let mut entries: Vec<(usize, f64)> =
            dense.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, &v)| (i, v)).collect();
        if self.buckets > 0 {
            let mut hit = BTreeSet::new();
            for x in &a.capitalized {
                for y in &b.capitalized {
                    let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
                    hit.insert(DENSE_FEATURES.len() + bucket(fnv1a_parts(&[lo, hi]), self.buckets));
                }
            }
            // scaled so sentences with many names do not dominate by count alone
            let v = 1.0 / ((a.capitalized.len() * b.capitalized.len()) as f64).sqrt();
            entries.extend(hit.into_iter().map(|i| (i, v)));
        }
        Ok(PairFeatures { dim: self.dim(), entries })
    }

    pub fn featurize<E: SemanticEncoder + ?Sized>(&self, a: &str, b: &str, encoder: &E) -> Result<PairFeatures, EncodeError> {
        self.featurize_profiles(&self.profile(a, encoder)?, &self.profile(b, encoder)?)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatsimTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub featurizer: PairFeaturizer,
}

impl Default for FeatsimTrainConfig {
    fn default() -> Self {
        FeatsimTrainConfig { epochs: 300, learning_rate: 0.5, seed: 0, featurizer: PairFeaturizer::default() }
    }
}

/// Labeled pairs with feature-Jaccard targets.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub dim: usize,
    pub pairs: Vec<(PairFeatures, f64)>,
}

impl TrainingSet {
    /// All unordered pairs of the pool.
    pub fn from_pool<E: SemanticEncoder + ?Sized>(
        pool: &[Instance],
        featurizer: &PairFeaturizer,
        encoder: &E,
    ) -> Result<Self, FeatsimError> {
        if pool.len() < 2 {
            return Err(FeatsimError::PoolTooSmall(pool.len()));
        }
        let texts: Vec<String> = pool.iter().map(Instance::text).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let embeddings = encoder.encode_batch(&refs)?;
        let profiles: Vec<TextProfile> =
            texts.iter().zip(embeddings).map(|(t, e)| TextProfile::new(t, e)).collect();
        let mut pairs = Vec::with_capacity(pool.len() * (pool.len() - 1) / 2);
        for i in 0..pool.len() {
            for j in i + 1..pool.len() {
                let x = featurizer.featurize_profiles(&profiles[i], &profiles[j])?;
                pairs.push((x, feature_jaccard(&pool[i], &pool[j])?));
            }
        }
        Ok(TrainingSet { dim: featurizer.dim(), pairs })
    }

    /// Mean squared error of `sigmoid(w·x + b)`; `params` is the weights followed by the bias.
    pub fn loss(&self, params: &[f64]) -> f64 {
        let (w, b) = params.split_at(self.dim);
        let sum: f64 = self.pairs.iter().map(|(x, y)| (sigmoid(x.dot(w) + b[0]) - y).powi(2)).sum();
        sum / self.pairs.len() as f64
    }

    /// Gradient of [`TrainingSet::loss`] with respect to `params`.
    pub fn gradient(&self, params: &[f64]) -> Vec<f64> {
        let (w, b) = params.split_at(self.dim);
        let mut grad = vec![0.0; self.dim + 1];
        let n = self.pairs.len() as f64;
        for (x, y) in &self.pairs {
            let p = sigmoid(x.dot(w) + b[0]);
            let g = 2.0 * (p - y) * p * (1.0 - p) / n;
            for &(i, v) in x.entries() {
                grad[i] += g * v;
            }
            grad[self.dim] += g;
        }
        grad
    }

    /// Per-parameter mean square of the inputs, used to scale GD steps so rare
    /// indicator buckets move as fast as dense signals.
    fn preconditioner(&self) -> Vec<f64> {
        let mut ms = vec![0.0; self.dim + 1];
        for (x, _) in &self.pairs {
            for &(i, v) in x.entries() {
                ms[i] += v * v;
            }
        }
        let n = self.pairs.len() as f64;
        ms[self.dim] = n;
        ms.iter().map(|s| s / n).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSimilarityModel {
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_names: Vec<String>,
    pub seed: u64,
    pub featurizer: PairFeaturizer,
    pub epochs: usize,
    pub learning_rate: f64,
    pub final_loss: f64,
    /// Training loss before the first update and after every epoch.
    #[serde(default)]
    pub loss_curve: Vec<f64>,
}

pub fn train_featsim<E: SemanticEncoder + ?Sized>(
    pool: &[Instance],
    encoder: &E,
    config: &FeatsimTrainConfig,
) -> Result<FeatureSimilarityModel, FeatsimError> {
    let data = TrainingSet::from_pool(pool, &config.featurizer, encoder)?;
    train_on(&data, config)
}

/// Full-batch, diagonally preconditioned gradient descent from small seeded weights.
pub fn train_on(data: &TrainingSet, config: &FeatsimTrainConfig) -> Result<FeatureSimilarityModel, FeatsimError> {
    if config.epochs == 0 || !(config.learning_rate > 0.0) {
        return Err(FeatsimError::BadSchedule);
    }
    if data.pairs.is_empty() {
        return Err(FeatsimError::PoolTooSmall(data.pairs.len()));
    }
    let mut rng = seeding::rng(config.seed);
    let mut params: Vec<f64> = (0..=data.dim).map(|_| rng.gen_range(-0.01..0.01)).collect();
    let scale: Vec<f64> = data.preconditioner().iter().map(|m| 1.0 / (m + 1e-3)).collect();
    let mut curve = vec![data.loss(&params)];
    for epoch in 1..=config.epochs {
        let grad = data.gradient(&params);
        for ((p, g), s) in params.iter_mut().zip(&grad).zip(&scale) {
            *p -= config.learning_rate * g * s;
        }
        let loss = data.loss(&params);
        if !loss.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(FeatsimError::NonFiniteLoss { epoch });
        }
        curve.push(loss);
    }
    let bias = params.pop().unwrap_or_default();
    Ok(FeatureSimilarityModel {
        dim: data.dim,
        weights: params,
        bias,
        feature_names: config.featurizer.feature_names(),
        seed: config.seed,
        featurizer: config.featurizer,
        epochs: config.epochs,
        learning_rate: config.learning_rate,
        final_loss: *curve.last().unwrap_or(&f64::NAN),
        loss_curve: curve,
    })
}

impl FeatureSimilarityModel {
    fn check(&self) -> Result<(), FeatsimError> {
        if self.weights.len() != self.featurizer.dim() || self.dim != self.featurizer.dim() {
            return Err(FeatsimError::Untrained { dim: self.featurizer.dim(), weights: self.weights.len() });
        }
        Ok(())
    }

    pub fn predict_features(&self, x: &PairFeatures) -> Result<f64, FeatsimError> {
        self.check()?;
        Ok(sigmoid(x.dot(&self.weights) + self.bias).clamp(0.0, 1.0))
    }

    pub fn predict_profiles(&self, a: &TextProfile, b: &TextProfile) -> Result<f64, FeatsimError> {
        self.predict_features(&self.featurizer.featurize_profiles(a, b)?)
    }

    /// S_fe(a, b).
    pub fn predict<E: SemanticEncoder + ?Sized>(&self, a: &str, b: &str, encoder: &E) -> Result<f64, FeatsimError> {
        self.predict_features(&self.featurizer.featurize(a, b, encoder)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    None,
    #[default]
    MinMax,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualSimilarityConfig {
    pub gamma: f64,
    #[serde(default)]
    pub normalization: Normalization,
}

impl Default for DualSimilarityConfig {
    fn default() -> Self {
        DualSimilarityConfig { gamma: 0.5, normalization: Normalization::MinMax }
    }
}

impl DualSimilarityConfig {
    pub fn new(gamma: f64, normalization: Normalization) -> Result<Self, FeatsimError> {
        let config = DualSimilarityConfig { gamma, normalization };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), FeatsimError> {
        if (0.0..=1.0).contains(&self.gamma) {
            Ok(())
        } else {
            Err(FeatsimError::BadGamma(self.gamma))
        }
    }
}

/// γ·s_fe + (1−γ)·s_se for already-normalized scores.
pub fn dual_similarity(config: &DualSimilarityConfig, s_fe: f64, s_se: f64) -> f64 {
    if config.gamma == 1.0 {
        return s_fe;
    }
    if config.gamma == 0.0 {
        return s_se;
    }
    config.gamma * s_fe + (1.0 - config.gamma) * s_se
}

/// Min-max rescaling to [0, 1]; a constant list maps to zeros.
pub fn min_max(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    scores.iter().map(|s| if range > 0.0 { (s - lo) / range } else { 0.0 }).collect()
}

/// Dual scores over a candidate pool, normalizing each component pool-wide first.
pub fn dual_scores(config: &DualSimilarityConfig, s_fe: &[f64], s_se: &[f64]) -> Result<Vec<f64>, FeatsimError> {
    config.validate()?;
    if s_fe.len() != s_se.len() {
        return Err(FeatsimError::LengthMismatch(s_fe.len(), s_se.len()));
    }
    let (fe, se) = match config.normalization {
        Normalization::None => (s_fe.to_vec(), s_se.to_vec()),
        Normalization::MinMax => (min_max(s_fe), min_max(s_se)),
    };
    Ok(fe.iter().zip(&se).map(|(&f, &s)| dual_similarity(config, f, s)).collect())
}

/// Ranks demonstration candidates by dual similarity. Text profiles are
/// memoized, so every pool example is encoded once.
pub struct DualScorer {
    model: Option<Arc<FeatureSimilarityModel>>,
    encoder: Arc<dyn SemanticEncoder>,
    config: DualSimilarityConfig,
    memo: Mutex<HashMap<String, Arc<TextProfile>>>,
}

impl DualScorer {
    pub fn new(
        model: Arc<FeatureSimilarityModel>,
        encoder: Arc<dyn SemanticEncoder>,
        config: DualSimilarityConfig,
    ) -> Result<Self, FeatsimError> {
        config.validate()?;
        model.check()?;
        Ok(DualScorer { model: Some(model), encoder, config, memo: Mutex::new(HashMap::new()) })
    }

    /// Pure semantic ranking (γ = 0); no predictor needed.
    pub fn semantic_only(encoder: Arc<dyn SemanticEncoder>) -> Self {
        DualScorer {
            model: None,
            encoder,
            config: DualSimilarityConfig { gamma: 0.0, normalization: Normalization::MinMax },
            memo: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &DualSimilarityConfig {
        &self.config
    }

    fn profiles(&self, texts: &[String]) -> Result<Vec<Arc<TextProfile>>, FeatsimError> {
        let missing: Vec<&str> = {
            let memo = self.memo.lock().expect("memo lock");
            let mut seen = BTreeSet::new();
            texts.iter().filter(|t| !memo.contains_key(*t) && seen.insert(t.as_str())).map(String::as_str).collect()
        };
        if !missing.is_empty() {
            let embeddings = self.encoder.encode_batch(&missing)?;
            let mut memo = self.memo.lock().expect("memo lock");
            for (t, e) in missing.iter().zip(embeddings) {
                memo.insert(t.to_string(), Arc::new(TextProfile::new(t, e)));
            }
        }
        let memo = self.memo.lock().expect("memo lock");
        Ok(texts.iter().map(|t| Arc::clone(&memo[t])).collect())
    }

    /// Raw (S_fe, S_se) for each candidate, before normalization.
    pub fn components(&self, input: &Instance, candidates: &[&Instance]) -> Result<(Vec<f64>, Vec<f64>), FeatsimError> {
        let mut texts = vec![input.text()];
        texts.extend(candidates.iter().map(|c| c.text()));
        let profiles = self.profiles(&texts)?;
        let (query, rest) = profiles.split_first().expect("input profile");
        let mut fe = Vec::with_capacity(rest.len());
        let mut se = Vec::with_capacity(rest.len());
        for p in rest {
            se.push(cosine(query.embedding(), p.embedding())?);
            fe.push(match (&self.model, self.config.gamma > 0.0) {
                (Some(model), _) => model.predict_profiles(query, p)?,
                (None, false) => 0.0,
                (None, true) => return Err(FeatsimError::MissingModel),
            });
        }
        Ok((fe, se))
    }
}

impl DemoScorer for DualScorer {
    fn score_pool(&self, input: &Instance, candidates: &[&Instance]) -> Result<Vec<f64>, DemoError> {
        let wrap = |e: FeatsimError| DemoError::Scorer(Box::new(e));
        let (fe, se) = self.components(input, candidates).map_err(wrap)?;
        dual_scores(&self.config, &fe, &se).map_err(wrap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::HashedNgramEncoder;
    use proptest::prelude::*;
    use rand::Rng;

    fn enc() -> HashedNgramEncoder {
        HashedNgramEncoder::new(64).unwrap()
    }

    fn inst(id: &str, tokens: &str, tags: &str) -> Instance {
        Instance::parse_labeled(id, tokens, tags).unwrap()
    }

    fn small_pool() -> Vec<Instance> {
        vec![
            inst("a", "Ann met Bob", "B-PER O B-PER"),
            inst("b", "Bob went to Rome", "B-PER O O B-LOC"),
            inst("c", "Rome is in Italy", "B-LOC O O B-LOC"),
            inst("d", "Ann likes Italy", "B-PER O B-LOC"),
            inst("e", "Carl saw Paris", "B-PER O B-LOC"),
            inst("f", "Paris and Rome", "B-LOC O B-LOC"),
        ]
    }

    #[test]
    fn featurize_examples() {
        let f = PairFeaturizer::default();
        let same = f.featurize("Ann met Bob in Rome", "Ann met Bob in Rome", &enc()).unwrap();
        assert_eq!(same.get(1), 1.0);
        let disjoint = f.featurize("alpha beta", "gamma delta", &enc()).unwrap();
        assert_eq!(disjoint.get(1), 0.0);
        let ab = f.featurize("Ann met Bob 42", "Bob saw 42 cats", &enc()).unwrap();
        let ba = f.featurize("Bob saw 42 cats", "Ann met Bob 42", &enc()).unwrap();
        assert_eq!(ab, ba);
        assert_eq!(ab.get(5), 1.0);
        assert_eq!(ab.get(4), 0.5);
        assert_eq!(ab.get(3), 0.5);
        assert_eq!(ab.get(2), 1.0);
        assert_eq!(ab.dim(), 6 + DEFAULT_BUCKETS);
        assert_eq!(ab.to_dense().len(), ab.dim());
    }

    #[test]
    fn two_instances_give_one_pair() {
        let pool = &small_pool()[..2];
        let data = TrainingSet::from_pool(pool, &PairFeaturizer::default(), &enc()).unwrap();
        assert_eq!(data.pairs.len(), 1);
        assert!(matches!(
            TrainingSet::from_pool(&pool[..1], &PairFeaturizer::default(), &enc()),
            Err(FeatsimError::PoolTooSmall(1))
        ));
    }

    #[test]
    fn constant_targets_are_fit() {
        let pool: Vec<Instance> = ["Ann ran", "Bob sat down", "Cid is here now", "Dee"]
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n = s.split_whitespace().count();
                let tags = std::iter::once("B-PER").chain(std::iter::repeat("O").take(n - 1)).collect::<Vec<_>>().join(" ");
                inst(&i.to_string(), s, &tags)
            })
            .collect();
        let model = train_featsim(&pool, &enc(), &FeatsimTrainConfig::default()).unwrap();
        for a in &pool {
            for b in &pool {
                if a.id != b.id {
                    assert!(model.predict(&a.text(), &b.text(), &enc()).unwrap() >= 0.9);
                }
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_monotone() {
        let config = FeatsimTrainConfig { epochs: 100, learning_rate: 0.1, ..Default::default() };
        let a = train_featsim(&small_pool(), &enc(), &config).unwrap();
        let b = train_featsim(&small_pool(), &enc(), &config).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.loss_curve.len(), 101);
        for w in a.loss_curve.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "{} -> {}", w[0], w[1]);
        }
        assert_eq!(a.final_loss, *a.loss_curve.last().unwrap());
    }

    #[test]
    fn divergent_learning_rate_is_reported() {
        let config = FeatsimTrainConfig { epochs: 50, learning_rate: f64::INFINITY, ..Default::default() };
        assert!(matches!(
            train_featsim(&small_pool(), &enc(), &config),
            Err(FeatsimError::NonFiniteLoss { .. })
        ));
        let zero = FeatsimTrainConfig { epochs: 0, ..Default::default() };
        assert!(matches!(train_featsim(&small_pool(), &enc(), &zero), Err(FeatsimError::BadSchedule)));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let f = PairFeaturizer { buckets: 16 };
        let data = TrainingSet::from_pool(&small_pool(), &f, &enc()).unwrap();
        let mut rng = seeding::rng(3);
        for _ in 0..5 {
            let params: Vec<f64> = (0..=data.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let grad = data.gradient(&params);
            for (i, g) in grad.iter().enumerate() {
                let h = 1e-5;
                let mut up = params.clone();
                up[i] += h;
                let mut down = params.clone();
                down[i] -= h;
                let numeric = (data.loss(&up) - data.loss(&down)) / (2.0 * h);
                let denom = g.abs().max(numeric.abs()).max(1e-8);
                assert!((g - numeric).abs() / denom < 1e-4 || (g - numeric).abs() < 1e-10, "param {i}: {g} vs {numeric}");
            }
        }
    }

    #[test]
    fn identity_pair_is_maximal_when_it_dominates_every_signal() {
        let model = train_featsim(&small_pool(), &enc(), &FeatsimTrainConfig::default()).unwrap();
        let pool = small_pool();
        let f = model.featurizer;
        for a in &pool {
            let pa = f.profile(&a.text(), &enc()).unwrap();
            let xa = f.featurize_profiles(&pa, &pa).unwrap().to_dense();
            let self_score = model.predict_profiles(&pa, &pa).unwrap();
            for b in &pool {
                let pb = f.profile(&b.text(), &enc()).unwrap();
                let xb = f.featurize_profiles(&pa, &pb).unwrap().to_dense();
                let dominated = model.weights.iter().zip(xa.iter().zip(&xb)).all(|(w, (ia, ib))| w * (ia - ib) >= 0.0);
                if dominated {
                    assert!(self_score >= model.predict_profiles(&pa, &pb).unwrap());
                }
            }
        }
    }

    #[test]
    fn json_round_trip_and_shape_check() {
        let model = train_featsim(&small_pool(), &enc(), &FeatsimTrainConfig { epochs: 5, ..Default::default() }).unwrap();
        let back = FeatureSimilarityModel::from_json(&model.to_json()).unwrap();
        assert_eq!(back, model);
        let json: serde_json::Value = serde_json::from_str(&model.to_json()).unwrap();
        for key in ["dim", "weights", "bias", "feature_names", "seed"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        let mut broken = model.clone();
        broken.weights.pop();
        assert!(matches!(broken.predict("a", "b", &enc()), Err(FeatsimError::Untrained { .. })));
    }

    #[test]
    fn dual_similarity_examples() {
        let c = DualSimilarityConfig::new(0.5, Normalization::None).unwrap();
        assert!((dual_similarity(&c, 0.8, 0.4) - 0.6).abs() < 1e-12);
        let zero = DualSimilarityConfig::new(0.0, Normalization::None).unwrap();
        assert_eq!(dual_similarity(&zero, 0.8, 0.4), 0.4);
        let one = DualSimilarityConfig::new(1.0, Normalization::None).unwrap();
        assert_eq!(dual_similarity(&one, 0.8, 0.4), 0.8);
        assert!(DualSimilarityConfig::new(1.5, Normalization::None).is_err());
        assert_eq!(min_max(&[2.0, 4.0, 3.0]), vec![0.0, 1.0, 0.5]);
        assert_eq!(min_max(&[1.0, 1.0]), vec![0.0, 0.0]);
        assert!(dual_scores(&c, &[1.0], &[]).is_err());
    }

    #[test]
    fn semantic_only_scorer_uses_cosine_order() {
        let scorer = DualScorer::semantic_only(Arc::new(enc()));
        let pool = small_pool();
        let refs: Vec<&Instance> = pool.iter().collect();
        let input = inst("q", "Bob went to Paris", "B-PER O O B-LOC");
        let scores = scorer.score_pool(&input, &refs).unwrap();
        let raw: Vec<f64> = pool.iter().map(|p| crate::encoding::semantic_similarity(&enc(), &input.text(), &p.text()).unwrap()).collect();
        let argsort = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
            idx
        };
        assert_eq!(argsort(&scores), argsort(&raw));
    }

    proptest! {
        #[test]
        fn prediction_is_bounded_and_symmetric(a in "[A-Za-z0-9 ]{0,30}", b in "[A-Za-z0-9 ]{0,30}") {
            let model = FeatureSimilarityModel {
                dim: 6 + 8,
                weights: (0..14).map(|i| (i as f64 - 6.0) * 0.7).collect(),
                bias: -0.3,
                feature_names: PairFeaturizer { buckets: 8 }.feature_names(),
                seed: 0,
                featurizer: PairFeaturizer { buckets: 8 },
                epochs: 0,
                learning_rate: 0.0,
                final_loss: 0.0,
                loss_curve: vec![],
            };
            let ab = model.predict(&a, &b, &enc()).unwrap();
            let ba = model.predict(&b, &a, &enc()).unwrap();
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, ba);
        }
    }
}
