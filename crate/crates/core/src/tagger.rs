//! The tagging model contract, the reference linear tagger, label-transition
//! estimation, Viterbi decoding and the adversarial training loop.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversarial::{
    apply_label_permutation, permute_examples, sample_label_permutation, AdlConfig, AdversarialError,
};
use crate::corpus::{markups_from_tags, FeatureLabel, FewShotSplit, Instance, Tag};
use crate::demo::{
    demonstrated_input, select_demonstration, DemoError, DemoPool, DemoScorer, DemonstratedInput, Demonstration,
};
use crate::encoding::{cosine, HashedNgramEncoder, SemanticEncoder};
use crate::eval::Counts;
use crate::hashing::{bucket, fnv1a};
use crate::seeding;

#[derive(Debug, Error)]
pub enum TaggerError {
    #[error("label sets of emissions and transitions differ")]
    LabelMismatch,
    #[error("label `{0}` is not in the label set")]
    UnknownLabel(Tag),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(Tag),
    #[error("no input tokens to decode")]
    EmptyInput,
    #[error("transition estimation needs at least one tag sequence")]
    NoSequences,
    #[error("smoothing must be positive and finite, got {0}")]
    BadSmoothing(f64),
    #[error("emission scores must be finite")]
    NonFiniteScores,
    #[error("gold tags ({gold}) and input tokens ({tokens}) differ in length")]
    Misaligned { gold: usize, tokens: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("instance `{0}` has no gold tags")]
    Unlabeled(String),
    #[error("training loss became non-finite at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("bad training schedule: {0}")]
    BadSchedule(&'static str),
    #[error("matrix shape does not match the label set")]
    BadShape,
    #[error(transparent)]
    Demo(#[from] DemoError),
    #[error(transparent)]
    Adversarial(#[from] AdversarialError),
}

/// The BIO label vocabulary: `O`, then `B-f`, `I-f` for each feature in order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Tag>", into = "Vec<Tag>")]
pub struct LabelSet {
    labels: Vec<Tag>,
}

impl LabelSet {
    pub fn from_features(features: &BTreeSet<FeatureLabel>) -> Self {
        let mut labels = vec![Tag::Outside];
        for f in features {
            labels.push(Tag::Begin(f.clone()));
            labels.push(Tag::Inside(f.clone()));
        }
        LabelSet { labels }
    }

    pub fn from_tags(labels: Vec<Tag>) -> Result<Self, TaggerError> {
        let mut seen = BTreeSet::new();
        for t in &labels {
            if !seen.insert(t.clone()) {
                return Err(TaggerError::DuplicateLabel(t.clone()));
            }
        }
        Ok(LabelSet { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn tags(&self) -> &[Tag] {
        &self.labels
    }

    pub fn tag(&self, index: usize) -> &Tag {
        &self.labels[index]
    }

    pub fn index_of(&self, tag: &Tag) -> Option<usize> {
        self.labels.iter().position(|t| t == tag)
    }

    pub fn features(&self) -> BTreeSet<FeatureLabel> {
        self.labels.iter().filter_map(|t| t.feature().cloned()).collect()
    }
}

impl TryFrom<Vec<Tag>> for LabelSet {
    type Error = TaggerError;
    fn try_from(labels: Vec<Tag>) -> Result<Self, TaggerError> {
        LabelSet::from_tags(labels)
    }
}

impl From<LabelSet> for Vec<Tag> {
    fn from(set: LabelSet) -> Self {
        set.labels
    }
}

/// Per-token log-probabilities over the label set.
#[derive(Clone, Debug, PartialEq)]
pub struct EmissionScores {
    labels: LabelSet,
    log_probs: Vec<Vec<f64>>,
}

impl EmissionScores {
    /// Log-softmax of each row of `logits`.
    pub fn from_logits(labels: LabelSet, logits: Vec<Vec<f64>>) -> Result<Self, TaggerError> {
        let mut log_probs = Vec::with_capacity(logits.len());
        for row in logits {
            if row.len() != labels.len() {
                return Err(TaggerError::BadShape);
            }
            if row.iter().any(|z| !z.is_finite()) {
                return Err(TaggerError::NonFiniteScores);
            }
            log_probs.push(log_softmax(&row));
        }
        Ok(EmissionScores { labels, log_probs })
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    pub fn log_prob(&self, token: usize, label: usize) -> f64 {
        self.log_probs[token][label]
    }

    pub fn log_probs(&self) -> &[Vec<f64>] {
        &self.log_probs
    }

    pub fn prob(&self, token: usize, label: usize) -> f64 {
        self.log_probs[token][label].exp()
    }

    pub fn probs(&self, token: usize) -> Vec<f64> {
        self.log_probs[token].iter().map(|l| l.exp()).collect()
    }

    /// Probability of `tag` at `token`, or 0 if the tag is not in the label set.
    pub fn prob_of(&self, token: usize, tag: &Tag) -> f64 {
        self.labels.index_of(tag).map_or(0.0, |l| self.prob(token, l))
    }

    /// Highest-probability label per token, ties to the lower index.
    pub fn argmax(&self) -> Vec<Tag> {
        self.log_probs
            .iter()
            .map(|row| {
                let mut best = 0;
                for (l, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = l;
                    }
                }
                self.labels.tag(best).clone()
            })
            .collect()
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    row.iter().map(|z| z - lse).collect()
}

/// Log transition probabilities over `labels` plus start and end states.
/// State `n` is start and `n + 1` is end, where `n` is the label count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransitionFile", into = "TransitionFile")]
pub struct TransitionMatrix {
    labels: LabelSet,
    log_probs: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct TransitionFile {
    labels: LabelSet,
    /// `null` stands for a forbidden (log 0) transition.
    log_probs: Vec<Vec<Option<f64>>>,
}

impl From<TransitionMatrix> for TransitionFile {
    fn from(m: TransitionMatrix) -> Self {
        let log_probs =
            m.log_probs.iter().map(|row| row.iter().map(|&v| (v != f64::NEG_INFINITY).then_some(v)).collect()).collect();
        TransitionFile { labels: m.labels, log_probs }
    }
}

impl TryFrom<TransitionFile> for TransitionMatrix {
    type Error = TaggerError;
    fn try_from(f: TransitionFile) -> Result<Self, TaggerError> {
        let log_probs = f
            .log_probs
            .into_iter()
            .map(|row| row.into_iter().map(|v| v.unwrap_or(f64::NEG_INFINITY)).collect())
            .collect();
        TransitionMatrix::from_log_probs(f.labels, log_probs)
    }
}

impl TransitionMatrix {
    pub fn from_log_probs(labels: LabelSet, log_probs: Vec<Vec<f64>>) -> Result<Self, TaggerError> {
        let n = labels.len() + 2;
        if log_probs.len() != n || log_probs.iter().any(|r| r.len() != n) {
            return Err(TaggerError::BadShape);
        }
        if log_probs.iter().flatten().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(TaggerError::NonFiniteScores);
        }
        Ok(TransitionMatrix { labels, log_probs })
    }

    pub fn uniform(labels: LabelSet) -> Self {
        let n = labels.len() + 2;
        let v = -(n as f64).ln();
        TransitionMatrix { labels, log_probs: vec![vec![v; n]; n] }
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn start_state(&self) -> usize {
        self.labels.len()
    }

    pub fn end_state(&self) -> usize {
        self.labels.len() + 1
    }

    pub fn log_prob(&self, from: usize, to: usize) -> f64 {
        self.log_probs[from][to]
    }

    pub fn set_log_prob(&mut self, from: usize, to: usize, value: f64) {
        self.log_probs[from][to] = value;
    }

    /// Makes `to` unreachable directly after `from`.
    pub fn forbid(&mut self, from: &Tag, to: &Tag) -> Result<(), TaggerError> {
        let a = self.labels.index_of(from).ok_or_else(|| TaggerError::UnknownLabel(from.clone()))?;
        let b = self.labels.index_of(to).ok_or_else(|| TaggerError::UnknownLabel(to.clone()))?;
        self.log_probs[a][b] = f64::NEG_INFINITY;
        Ok(())
    }

    pub fn row_sum(&self, from: usize) -> f64 {
        self.log_probs[from].iter().map(|v| v.exp()).sum()
    }
}

/// Bigram maximum-likelihood estimates over (start, labels, end) with
/// `smoothing` added to every cell. Empty sequences contribute nothing.
pub fn estimate_transitions<'a, I>(labels: &LabelSet, sequences: I, smoothing: f64) -> Result<TransitionMatrix, TaggerError>
where
    I: IntoIterator<Item = &'a [Tag]>,
{
    if !(smoothing > 0.0 && smoothing.is_finite()) {
        return Err(TaggerError::BadSmoothing(smoothing));
    }
    let n = labels.len() + 2;
    let (start, end) = (labels.len(), labels.len() + 1);
    let mut counts = vec![vec![smoothing; n]; n];
    let mut any = false;
    for seq in sequences {
        any = true;
        if seq.is_empty() {
            continue;
        }
        let mut prev = start;
        for tag in seq {
            let cur = labels.index_of(tag).ok_or_else(|| TaggerError::UnknownLabel(tag.clone()))?;
            counts[prev][cur] += 1.0;
            prev = cur;
        }
        counts[prev][end] += 1.0;
    }
    if !any {
        return Err(TaggerError::NoSequences);
    }
    let log_probs = counts
        .into_iter()
        .map(|row| {
            let total: f64 = row.iter().sum();
            row.into_iter().map(|c| (c / total).ln()).collect()
        })
        .collect();
    Ok(TransitionMatrix { labels: labels.clone(), log_probs })
}

fn tie_threshold(best: f64) -> f64 {
    if best.is_finite() {
        best - 1e-9 * best.abs().max(1.0)
    } else {
        best
    }
}

/// Maximizes the sum of log-emissions and log-transitions, start and end
/// included. Among paths within a relative 1e-9 of the optimum, the
/// lexicographically smallest label-index sequence wins.
pub fn viterbi_indices(emissions: &EmissionScores, transitions: &TransitionMatrix) -> Result<Vec<usize>, TaggerError> {
    if emissions.labels != transitions.labels {
        return Err(TaggerError::LabelMismatch);
    }
    let n = emissions.len();
    if n == 0 {
        return Err(TaggerError::EmptyInput);
    }
    let l = emissions.labels.len();
    let (start, end) = (transitions.start_state(), transitions.end_state());
    let e = &emissions.log_probs;
    let t = &transitions.log_probs;

    // beta[i][a]: best score of tokens i+1.. given label a at token i, end included
    let mut beta = vec![vec![0.0; l]; n];
    for a in 0..l {
        beta[n - 1][a] = t[a][end];
    }
    for i in (0..n - 1).rev() {
        for a in 0..l {
            beta[i][a] = (0..l).map(|b| t[a][b] + e[i + 1][b] + beta[i + 1][b]).fold(f64::NEG_INFINITY, f64::max);
        }
    }
    let best = (0..l).map(|a| t[start][a] + e[0][a] + beta[0][a]).fold(f64::NEG_INFINITY, f64::max);
    let threshold = tie_threshold(best);

    let mut path = Vec::with_capacity(n);
    let mut prefix = 0.0;
    let mut prev = start;
    for i in 0..n {
        let candidates: Vec<f64> = (0..l).map(|a| prefix + t[prev][a] + e[i][a] + beta[i][a]).collect();
        let pick = candidates.iter().position(|&c| c >= threshold).unwrap_or_else(|| {
            // rounding pushed every candidate just under the threshold
            let top = candidates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            candidates.iter().position(|&c| c == top).unwrap_or(0)
        });
        prefix += t[prev][pick] + e[i][pick];
        prev = pick;
        path.push(pick);
    }
    Ok(path)
}

pub fn viterbi_decode(emissions: &EmissionScores, transitions: &TransitionMatrix) -> Result<Vec<Tag>, TaggerError> {
    Ok(viterbi_indices(emissions, transitions)?.into_iter().map(|a| emissions.labels.tag(a).clone()).collect())
}

/// A model producing per-token label distributions for a demonstrated input.
pub trait TaggerModel: Send + Sync {
    fn labels(&self) -> &LabelSet;

    /// One row per input token; demonstration tokens get no rows.
    fn token_scores(&self, input: &DemonstratedInput) -> EmissionScores;
}

impl<M: TaggerModel + ?Sized> TaggerModel for &M {
    fn labels(&self) -> &LabelSet {
        (**self).labels()
    }
    fn token_scores(&self, input: &DemonstratedInput) -> EmissionScores {
        (**self).token_scores(input)
    }
}

pub const DEFAULT_TAGGER_BUCKETS: usize = 1 << 14;
pub const MAX_COPY_SPAN: usize = 3;
const COPY_ENCODER_DIM: usize = 64;

/// Copy-weight slots: B-ℓ from (begin, inside), I-ℓ from (begin, inside), and O
/// from the strongest match over every label.
pub const COPY_WEIGHTS: usize = 5;
const B_BEGIN: usize = 0;
const B_INSIDE: usize = 1;
const I_BEGIN: usize = 2;
const I_INSIDE: usize = 3;
const O_ANY: usize = 4;

/// Extracted features for the input tokens of one demonstrated input.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenFeatures {
    /// Hashed lexical bucket ids per token.
    pub lexical: Vec<Vec<usize>>,
    /// Per token, per feature in label-set order: (begin, inside) copy similarity.
    pub copy: Vec<Vec<[f64; 2]>>,
}

/// Linear softmax tagger over hashed lexical features and demonstration-copy
/// features. Copy weights are shared across features, so what a token's
/// match in the demonstration means is learned once for every label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TaggerFile", into = "TaggerFile")]
pub struct ReferenceTagger {
    labels: LabelSet,
    buckets: usize,
    /// Lexical weights (`bucket * labels + label`) followed by the copy weights.
    params: Vec<f64>,
    /// For each label: `Some((feature position, is_begin))`, or `None` for O.
    #[serde(skip)]
    slots: Vec<Option<(usize, bool)>>,
}

#[derive(Serialize, Deserialize)]
struct TaggerFile {
    format: String,
    labels: LabelSet,
    buckets: usize,
    copy_weights: Vec<f64>,
    /// Non-zero lexical weights as `[index, value]`.
    lexical: Vec<(usize, f64)>,
}

const TAGGER_FORMAT: &str = "demoner-reference-tagger/1";

impl From<ReferenceTagger> for TaggerFile {
    fn from(t: ReferenceTagger) -> Self {
        let split = t.buckets * t.labels.len();
        TaggerFile {
            format: TAGGER_FORMAT.to_string(),
            copy_weights: t.params[split..].to_vec(),
            lexical: t.params[..split].iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, v)| (i, *v)).collect(),
            labels: t.labels,
            buckets: t.buckets,
        }
    }
}

impl TryFrom<TaggerFile> for ReferenceTagger {
    type Error = String;
    fn try_from(f: TaggerFile) -> Result<Self, String> {
        if f.format != TAGGER_FORMAT {
            return Err(format!("unsupported tagger format `{}`", f.format));
        }
        if f.copy_weights.len() != COPY_WEIGHTS {
            return Err(format!("expected {COPY_WEIGHTS} copy weights, found {}", f.copy_weights.len()));
        }
        let mut tagger = ReferenceTagger::new(f.labels, f.buckets);
        let split = tagger.lexical_len();
        for (i, v) in f.lexical {
            if i >= split {
                return Err(format!("lexical weight index {i} out of range"));
            }
            tagger.params[i] = v;
        }
        tagger.params[split..].copy_from_slice(&f.copy_weights);
        Ok(tagger)
    }
}

impl ReferenceTagger {
    /// A zero-weight tagger (uniform predictions).
    pub fn new(labels: LabelSet, buckets: usize) -> Self {
        let buckets = buckets.max(1);
        let features: Vec<FeatureLabel> = labels.features().into_iter().collect();
        let slots = labels
            .tags()
            .iter()
            .map(|t| {
                let pos = |f: &FeatureLabel| features.iter().position(|x| x == f).expect("feature of own label");
                match t {
                    Tag::Outside => None,
                    Tag::Begin(f) => Some((pos(f), true)),
                    Tag::Inside(f) => Some((pos(f), false)),
                }
            })
            .collect();
        let params = vec![0.0; buckets * labels.len() + COPY_WEIGHTS];
        ReferenceTagger { labels, buckets, params, slots }
    }

    pub fn for_features(features: &BTreeSet<FeatureLabel>) -> Self {
        ReferenceTagger::new(LabelSet::from_features(features), DEFAULT_TAGGER_BUCKETS)
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn copy_weights(&self) -> &[f64] {
        &self.params[self.lexical_len()..]
    }

    fn lexical_len(&self) -> usize {
        self.buckets * self.labels.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tagger serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn features(&self, input: &DemonstratedInput) -> TokenFeatures {
        let tokens = input.input.tokens();
        let lexical = (0..tokens.len())
            .map(|i| lexical_features(tokens, i).iter().map(|f| bucket(fnv1a(f.as_bytes()), self.buckets)).collect())
            .collect();
        let features: Vec<FeatureLabel> = self.labels.features().into_iter().collect();
        TokenFeatures { lexical, copy: copy_features(tokens, &input.demo_spans(), &features) }
    }

    fn logits(&self, x: &TokenFeatures) -> Vec<Vec<f64>> {
        let l = self.labels.len();
        let copy = self.copy_weights();
        (0..x.lexical.len())
            .map(|i| {
                let strongest = x.copy[i].iter().flat_map(|c| c.iter().copied()).fold(0.0, f64::max);
                (0..l)
                    .map(|c| {
                        let lex: f64 = x.lexical[i].iter().map(|&b| self.params[b * l + c]).sum();
                        let cp = match self.slots[c] {
                            None => copy[O_ANY] * strongest,
                            Some((f, true)) => copy[B_BEGIN] * x.copy[i][f][0] + copy[B_INSIDE] * x.copy[i][f][1],
                            Some((f, false)) => copy[I_BEGIN] * x.copy[i][f][0] + copy[I_INSIDE] * x.copy[i][f][1],
                        };
                        lex + cp
                    })
                    .collect()
            })
            .collect()
    }

    pub fn scores_from_features(&self, x: &TokenFeatures) -> EmissionScores {
        EmissionScores::from_logits(self.labels.clone(), self.logits(x)).expect("finite weights give finite scores")
    }

    /// Mean token cross-entropy and its sparse gradient `(param index, value)`.
    pub fn loss_and_gradient(&self, input: &DemonstratedInput, gold: &[Tag]) -> Result<(f64, Vec<(usize, f64)>), TaggerError> {
        let x = self.features(input);
        self.loss_and_gradient_from(&x, gold)
    }

    pub fn loss_and_gradient_from(&self, x: &TokenFeatures, gold: &[Tag]) -> Result<(f64, Vec<(usize, f64)>), TaggerError> {
        let n = x.lexical.len();
        if gold.len() != n {
            return Err(TaggerError::Misaligned { gold: gold.len(), tokens: n });
        }
        if n == 0 {
            return Ok((0.0, Vec::new()));
        }
        let gold_idx = gold
            .iter()
            .map(|t| self.labels.index_of(t).ok_or_else(|| TaggerError::UnknownLabel(t.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        let l = self.labels.len();
        let split = self.lexical_len();
        let scores = EmissionScores::from_logits(self.labels.clone(), self.logits(x))?;
        let mut loss = 0.0;
        let mut grad = Vec::new();
        let mut copy_grad = [0.0; COPY_WEIGHTS];
        for i in 0..n {
            loss -= scores.log_prob(i, gold_idx[i]);
            let strongest = x.copy[i].iter().flat_map(|c| c.iter().copied()).fold(0.0, f64::max);
            for c in 0..l {
                let dz = (scores.prob(i, c) - if c == gold_idx[i] { 1.0 } else { 0.0 }) / n as f64;
                for &b in &x.lexical[i] {
                    grad.push((b * l + c, dz));
                }
                match self.slots[c] {
                    None => copy_grad[O_ANY] += dz * strongest,
                    Some((f, true)) => {
                        copy_grad[B_BEGIN] += dz * x.copy[i][f][0];
                        copy_grad[B_INSIDE] += dz * x.copy[i][f][1];
                    }
                    Some((f, false)) => {
                        copy_grad[I_BEGIN] += dz * x.copy[i][f][0];
                        copy_grad[I_INSIDE] += dz * x.copy[i][f][1];
                    }
                }
            }
        }
        grad.extend(copy_grad.iter().enumerate().map(|(k, g)| (split + k, *g)));
        Ok((loss / n as f64, grad))
    }

    fn apply(&mut self, grad: &[(usize, f64)], step: f64) {
        for &(i, g) in grad {
            self.params[i] -= step * g;
        }
    }
}

impl TaggerModel for ReferenceTagger {
    fn labels(&self) -> &LabelSet {
        &self.labels
    }

    fn token_scores(&self, input: &DemonstratedInput) -> EmissionScores {
        self.scores_from_features(&self.features(input))
    }
}

fn shape(word: &str) -> String {
    let mut out = String::new();
    for ch in word.chars() {
        let c = if ch.is_uppercase() {
            'X'
        } else if ch.is_lowercase() {
            'x'
        } else if ch.is_ascii_digit() {
            'd'
        } else {
            ch
        };
        if !out.ends_with(c) {
            out.push(c);
        }
    }
    out
}

fn affix(word: &str, len: usize, prefix: bool) -> String {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() < len {
        return word.to_string();
    }
    if prefix {
        chars[..len].iter().collect()
    } else {
        chars[chars.len() - len..].iter().collect()
    }
}

/// Lexical/context feature strings for token `i`.
pub fn lexical_features(tokens: &[String], i: usize) -> Vec<String> {
    let word = &tokens[i];
    let lower = word.to_lowercase();
    let at = |j: isize| -> String {
        if j < 0 {
            "<s>".to_string()
        } else if j as usize >= tokens.len() {
            "</s>".to_string()
        } else {
            tokens[j as usize].to_lowercase()
        }
    };
    let i = i as isize;
    let mut out = vec![
        "bias".to_string(),
        format!("w={lower}"),
        format!("shape={}", shape(word)),
        format!("p2={}", affix(&lower, 2, true)),
        format!("p3={}", affix(&lower, 3, true)),
        format!("s2={}", affix(&lower, 2, false)),
        format!("s3={}", affix(&lower, 3, false)),
        format!("w-1={}", at(i - 1)),
        format!("w-2={}", at(i - 2)),
        format!("w+1={}", at(i + 1)),
        format!("w+2={}", at(i + 2)),
    ];
    if i == 0 {
        out.push("first".to_string());
    }
    out
}

fn trigrams(text: &str) -> BTreeSet<String> {
    let padded: Vec<char> = format!("#{}#", text.to_lowercase()).chars().collect();
    padded.windows(3).map(|w| w.iter().collect()).collect()
}

struct SpanProfile {
    grams: BTreeSet<String>,
    embedding: crate::encoding::EmbeddingVector,
}

impl SpanProfile {
    fn new(text: &str, encoder: &HashedNgramEncoder) -> Self {
        SpanProfile { grams: trigrams(text), embedding: encoder.encode(text).expect("hashed encoder is infallible") }
    }

    /// 0.5·character-trigram Jaccard + 0.5·embedding cosine.
    fn similarity(&self, other: &SpanProfile) -> f64 {
        let union = self.grams.union(&other.grams).count();
        let jaccard =
            if union == 0 { 0.0 } else { self.grams.intersection(&other.grams).count() as f64 / union as f64 };
        0.5 * jaccard + 0.5 * cosine(&self.embedding, &other.embedding).unwrap_or(0.0)
    }
}

/// For each token and feature ℓ: the best similarity between a local input
/// span (up to three tokens) and any demonstration span annotated ℓ, split by
/// whether the token begins the local span.
pub fn copy_features(tokens: &[String], demo_spans: &[(&str, &FeatureLabel)], features: &[FeatureLabel]) -> Vec<Vec<[f64; 2]>> {
    let n = tokens.len();
    let mut out = vec![vec![[0.0; 2]; features.len()]; n];
    if demo_spans.is_empty() || n == 0 {
        return out;
    }
    let encoder = HashedNgramEncoder::new(COPY_ENCODER_DIM).expect("valid dimension");
    let mut profiles: HashMap<&str, SpanProfile> = HashMap::new();
    let mut demo: Vec<(usize, &str)> = Vec::new();
    for (text, feature) in demo_spans {
        // spans labeled outside the label set cannot be copied
        let Some(f) = features.iter().position(|x| x == *feature) else { continue };
        profiles.entry(text).or_insert_with(|| SpanProfile::new(text, &encoder));
        demo.push((f, text));
    }
    for start in 0..n {
        for end in start + 1..=(start + MAX_COPY_SPAN).min(n) {
            let span = SpanProfile::new(&tokens[start..end].join(" "), &encoder);
            let mut best = vec![0.0f64; features.len()];
            for (f, text) in &demo {
                best[*f] = best[*f].max(span.similarity(&profiles[text]));
            }
            for (f, s) in best.iter().enumerate() {
                out[start][f][0] = out[start][f][0].max(*s);
                for row in out.iter_mut().take(end).skip(start + 1) {
                    row[f][1] = row[f][1].max(*s);
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// `None` trains on the main branch only.
    pub adl: Option<AdlConfig>,
    /// Stop after this many epochs without validation F1 improvement and keep
    /// the best epoch's weights.
    pub patience: Option<usize>,
    pub smoothing: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 30, learning_rate: 0.5, seed: 0, adl: Some(AdlConfig::default()), patience: None, smoothing: 0.01 }
    }
}

pub const SELECTION_STREAM: u64 = 1;
pub const ADVERSARIAL_STREAM: u64 = 2;
pub const ORDER_STREAM: u64 = 3;
pub const VALIDATION_STREAM: u64 = 4;

#[derive(Clone, Debug)]
pub struct TrainingRun {
    pub model: ReferenceTagger,
    pub transitions: TransitionMatrix,
    /// Mean combined loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Validation entity F1 per epoch (empty without early stopping).
    pub validation_f1: Vec<f64>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
}

/// Decodes `input` with one demonstration drawn from `pool`.
pub fn tag_with_demonstration<M: TaggerModel + ?Sized, S: DemoScorer + ?Sized>(
    model: &M,
    transitions: &TransitionMatrix,
    input: &Instance,
    pool: &DemoPool,
    scorer: &S,
    rng: &mut seeding::Rng,
) -> Result<(Vec<Tag>, EmissionScores), TaggerError> {
    let bare = input.without_labels();
    let demo = select_demonstration(pool, &bare, scorer, rng)?;
    let d = demonstrated_input(&bare, &demo)?;
    let scores = model.token_scores(&d);
    let tags = viterbi_decode(&scores, transitions)?;
    Ok((tags, scores))
}

fn validation_f1<S: DemoScorer + ?Sized>(
    model: &ReferenceTagger,
    transitions: &TransitionMatrix,
    validation: &[Instance],
    pool: &DemoPool,
    scorer: &S,
    seed: u64,
) -> Result<f64, TaggerError> {
    let mut rng = seeding::child_rng(seed, VALIDATION_STREAM);
    let mut counts = Counts::default();
    for inst in validation.iter().filter(|i| !i.is_empty()) {
        let (tags, _) = tag_with_demonstration(model, transitions, inst, pool, scorer, &mut rng)?;
        let pred = markups_from_tags(inst.tokens(), &tags).expect("aligned tags");
        counts.add(&Counts::of(inst.markups(), &pred));
    }
    Ok(counts.f1())
}

/// One SGD step per training instance per epoch on the combined loss of the
/// main, example-permuted and label-permuted demonstrated inputs. All three
/// gradients are taken at the same parameters.
pub fn train<S: DemoScorer + ?Sized>(
    model: ReferenceTagger,
    split: &FewShotSplit,
    pool: &DemoPool,
    scorer: &S,
    config: &TrainConfig,
) -> Result<TrainingRun, TaggerError> {
    if config.epochs == 0 {
        return Err(TaggerError::BadSchedule("epochs must be positive"));
    }
    if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
        return Err(TaggerError::BadSchedule("learning rate must be positive and finite"));
    }
    if let Some(adl) = &config.adl {
        adl.validate()?;
    }
    let train: Vec<&Instance> = split.train.iter().filter(|i| !i.is_empty()).collect();
    if train.is_empty() {
        return Err(TaggerError::EmptyTrainingSet);
    }
    let mut golds = Vec::with_capacity(train.len());
    for inst in &train {
        golds.push(inst.tags().ok_or_else(|| TaggerError::Unlabeled(inst.id.clone()))?);
    }
    let transitions = estimate_transitions(&model.labels, golds.iter().copied(), config.smoothing)?;
    let features = model.labels.features();
    let (w_main, w_example, w_label) = config.adl.map_or((1.0, 0.0, 0.0), |a| a.weights());

    let mut selection = seeding::child_rng(config.seed, SELECTION_STREAM);
    let mut adversarial = seeding::child_rng(config.seed, ADVERSARIAL_STREAM);
    let mut ordering = seeding::child_rng(config.seed, ORDER_STREAM);

    let mut model = model;
    let mut best = (f64::NEG_INFINITY, 0usize, model.clone());
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut validation = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut ordering);
        let mut total = 0.0;
        for &k in &order {
            let inst = train[k];
            let gold = golds[k];
            let bare = inst.without_labels();
            let demo = select_demonstration(pool, inst, scorer, &mut selection)?;
            let main = demonstrated_input(&bare, &demo)?;
            let diverged = |e: TaggerError| match e {
                TaggerError::NonFiniteScores => TaggerError::Diverged { epoch },
                e => e,
            };
            let (l_m, g_m) = model.loss_and_gradient(&main, gold).map_err(diverged)?;
            let mut loss = w_main * l_m;
            let mut branches = Vec::new();
            if w_example > 0.0 || w_label > 0.0 {
                let shuffled = demonstrated_input(&bare, &permute_examples(&demo, &mut adversarial))?;
                let pi = sample_label_permutation(&features, &mut adversarial, config.adl.map(|a| a.mode).unwrap_or_default())?;
                let (relabeled, relabeled_gold) = apply_label_permutation(&shuffled, gold, &pi)?;
                let (l_e, g_e) = model.loss_and_gradient(&shuffled, gold).map_err(diverged)?;
                let (l_l, g_l) = model.loss_and_gradient(&relabeled, &relabeled_gold).map_err(diverged)?;
                loss += w_example * l_e + w_label * l_l;
                branches.push((w_example, g_e));
                branches.push((w_label, g_l));
            }
            if !loss.is_finite() {
                return Err(TaggerError::Diverged { epoch });
            }
            model.apply(&g_m, config.learning_rate * w_main);
            for (w, g) in &branches {
                if *w > 0.0 {
                    model.apply(g, config.learning_rate * w);
                }
            }
            total += loss;
        }
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(TaggerError::Diverged { epoch });
        }
        epoch_losses.push(total / train.len() as f64);
        if let Some(patience) = config.patience {
            let f1 = validation_f1(&model, &transitions, &split.validation, pool, scorer, config.seed)?;
            validation.push(f1);
            if f1 > best.0 {
                best = (f1, epoch, model.clone());
            } else if epoch - best.1 >= patience {
                break;
            }
        }
    }
    let (model, best_epoch) = match config.patience {
        Some(_) => (best.2, best.1),
        None => (model, epoch_losses.len()),
    };
    Ok(TrainingRun { model, transitions, epoch_losses, validation_f1: validation, best_epoch })
}

/// Baseline training on bare inputs: the same SGD schedule as [`train`] but
/// with empty demonstrations, so copy weights never receive gradient. `adl`
/// and `patience` are ignored.
pub fn train_without_demonstrations(
    model: ReferenceTagger,
    split: &FewShotSplit,
    config: &TrainConfig,
) -> Result<TrainingRun, TaggerError> {
    if config.epochs == 0 {
        return Err(TaggerError::BadSchedule("epochs must be positive"));
    }
    if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
        return Err(TaggerError::BadSchedule("learning rate must be positive and finite"));
    }
    let train: Vec<&Instance> = split.train.iter().filter(|i| !i.is_empty()).collect();
    if train.is_empty() {
        return Err(TaggerError::EmptyTrainingSet);
    }
    let mut golds = Vec::with_capacity(train.len());
    let mut inputs = Vec::with_capacity(train.len());
    for inst in &train {
        golds.push(inst.tags().ok_or_else(|| TaggerError::Unlabeled(inst.id.clone()))?);
        inputs.push(demonstrated_input(&inst.without_labels(), &Demonstration::default())?);
    }
    let transitions = estimate_transitions(&model.labels, golds.iter().copied(), config.smoothing)?;
    let mut ordering = seeding::child_rng(config.seed, ORDER_STREAM);
    let mut model = model;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut ordering);
        let mut total = 0.0;
        for &k in &order {
            let (loss, grad) = model.loss_and_gradient(&inputs[k], golds[k]).map_err(|e| match e {
                TaggerError::NonFiniteScores => TaggerError::Diverged { epoch },
                e => e,
            })?;
            if !loss.is_finite() {
                return Err(TaggerError::Diverged { epoch });
            }
            model.apply(&grad, config.learning_rate);
            total += loss;
        }
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(TaggerError::Diverged { epoch });
        }
        epoch_losses.push(total / train.len() as f64);
    }
    let best_epoch = epoch_losses.len();
    Ok(TrainingRun { model, transitions, epoch_losses, validation_f1: Vec::new(), best_epoch })
}

/// Decodes `input` with no demonstration attached.
pub fn tag_without_demonstration<M: TaggerModel + ?Sized>(
    model: &M,
    transitions: &TransitionMatrix,
    input: &Instance,
) -> Result<Vec<Tag>, TaggerError> {
    let d = demonstrated_input(&input.without_labels(), &Demonstration::default())?;
    viterbi_decode(&model.token_scores(&d), transitions)
}

/// A trained tagger bundled with its transitions and training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedTagger {
    pub tagger: ReferenceTagger,
    pub transitions: TransitionMatrix,
    #[serde(default)]
    pub config: Option<TrainConfig>,
}

impl SavedTagger {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tagger serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo::{build_pool, DemoEntry, FnScorer};
    use proptest::prelude::*;
    use rand::Rng;

    fn f(name: &str) -> FeatureLabel {
        FeatureLabel::new(name).unwrap()
    }

    fn labels() -> LabelSet {
        LabelSet::from_features(&[f("PER"), f("LOC")].into_iter().collect())
    }

    fn tag(s: &str) -> Tag {
        s.parse().unwrap()
    }

    fn tags(s: &str) -> Vec<Tag> {
        s.split_whitespace().map(tag).collect()
    }

    fn inst(id: &str, tokens: &str, t: &str) -> Instance {
        Instance::parse_labeled(id, tokens, t).unwrap()
    }

    #[test]
    fn label_set_layout() {
        let l = labels();
        let shown: Vec<String> = l.tags().iter().map(ToString::to_string).collect();
        assert_eq!(shown, vec!["O", "B-LOC", "I-LOC", "B-PER", "I-PER"]);
        assert!(LabelSet::from_tags(vec![Tag::Outside, Tag::Outside]).is_err());
        let json = serde_json::to_string(&l).unwrap();
        assert_eq!(serde_json::from_str::<LabelSet>(&json).unwrap(), l);
    }

    #[test]
    fn transition_estimation() {
        let l = labels();
        let seq = tags("B-PER O");
        let m = estimate_transitions(&l, [seq.as_slice()], 1e-12).unwrap();
        let b_per = l.index_of(&tag("B-PER")).unwrap();
        assert!((m.log_prob(b_per, 0).exp() - 1.0).abs() < 1e-9);
        assert!((m.log_prob(m.start_state(), b_per).exp() - 1.0).abs() < 1e-9);
        assert!((m.log_prob(0, m.end_state()).exp() - 1.0).abs() < 1e-9);

        let empty: Vec<Tag> = vec![];
        let u = estimate_transitions(&l, [empty.as_slice()], 0.01).unwrap();
        let first = u.log_prob(0, 0);
        assert!(u.log_probs.iter().flatten().all(|v| (v - first).abs() < 1e-12));

        assert!(matches!(estimate_transitions(&l, std::iter::empty::<&[Tag]>(), 0.01), Err(TaggerError::NoSequences)));
        assert!(matches!(estimate_transitions(&l, [seq.as_slice()], 0.0), Err(TaggerError::BadSmoothing(_))));
    }

    #[test]
    fn single_token_decode_and_forbidden_bigrams() {
        let l = labels();
        let b_per = l.index_of(&tag("B-PER")).unwrap();
        let mut row = vec![0.0; l.len()];
        row[b_per] = 3.0;
        let em = EmissionScores::from_logits(l.clone(), vec![row]).unwrap();
        assert_eq!(viterbi_decode(&em, &TransitionMatrix::uniform(l.clone())).unwrap(), tags("B-PER"));

        let i_loc = l.index_of(&tag("I-LOC")).unwrap();
        let mut rows = vec![vec![0.0; l.len()]; 2];
        rows[0][b_per] = 5.0;
        rows[1][i_loc] = 5.0;
        let em = EmissionScores::from_logits(l.clone(), rows).unwrap();
        let mut tr = TransitionMatrix::uniform(l.clone());
        tr.forbid(&tag("B-PER"), &tag("I-LOC")).unwrap();
        let path = viterbi_decode(&em, &tr).unwrap();
        assert!(!(path[0] == tag("B-PER") && path[1] == tag("I-LOC")));

        let other = LabelSet::from_features(&[f("PER")].into_iter().collect());
        assert!(matches!(viterbi_decode(&em, &TransitionMatrix::uniform(other)), Err(TaggerError::LabelMismatch)));
        let none = EmissionScores::from_logits(l.clone(), vec![]).unwrap();
        assert!(matches!(viterbi_decode(&none, &tr), Err(TaggerError::EmptyInput)));
    }

    #[test]
    fn ties_go_to_the_smallest_index_sequence() {
        let l = labels();
        let em = EmissionScores::from_logits(l.clone(), vec![vec![0.0; l.len()]; 3]).unwrap();
        let path = viterbi_indices(&em, &TransitionMatrix::uniform(l)).unwrap();
        assert_eq!(path, vec![0, 0, 0]);
    }

    #[test]
    fn transitions_json_keeps_forbidden_cells() {
        let mut tr = TransitionMatrix::uniform(labels());
        tr.forbid(&tag("O"), &tag("I-PER")).unwrap();
        let back: TransitionMatrix = serde_json::from_str(&serde_json::to_string(&tr).unwrap()).unwrap();
        assert_eq!(back, tr);
    }

    #[test]
    fn zero_model_is_uniform_and_rows_align() {
        let tagger = ReferenceTagger::new(labels(), 64);
        let input = Instance::unlabeled("q", vec!["Ann".into(), "runs".into(), "home".into()]).unwrap();
        let demo = Demonstration {
            entries: vec![DemoEntry { feature: f("PER"), example: inst("e", "Bob ran far away today", "B-PER O O O O"), pool_index: 0, score: 0.0 }],
        };
        let d = demonstrated_input(&input, &demo).unwrap();
        let scores = tagger.token_scores(&d);
        assert_eq!(scores.len(), 3);
        for i in 0..3 {
            let p = scores.probs(i);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|v| (v - 0.2).abs() < 1e-12));
        }
    }

    #[test]
    fn copy_features_follow_demonstration_labels() {
        let features = vec![f("LOC"), f("PER")];
        let tokens: Vec<String> = "we saw New York".split(' ').map(String::from).collect();
        let copy = copy_features(&tokens, &[("New York", &features[0]), ("Ann", &features[1])], &features);
        assert!((copy[2][0][0] - 1.0).abs() < 1e-9, "begin LOC at New");
        assert!((copy[3][0][1] - 1.0).abs() < 1e-9, "inside LOC at York");
        assert!(copy[2][1][0] < 0.5);
        let swapped = copy_features(&tokens, &[("New York", &features[1]), ("Ann", &features[0])], &features);
        assert!((swapped[2][1][0] - 1.0).abs() < 1e-9);
        assert!(copy_features(&tokens, &[], &features).iter().flatten().all(|c| c == &[0.0, 0.0]));
    }

    #[test]
    fn lexical_features_cover_window() {
        let tokens: Vec<String> = ["Ann", "met", "Bob"].iter().map(|s| s.to_string()).collect();
        let feats = lexical_features(&tokens, 0);
        for expected in ["bias", "w=ann", "shape=Xx", "p2=an", "s3=ann", "w-1=<s>", "w+2=bob", "first"] {
            assert!(feats.contains(&expected.to_string()), "{expected}");
        }
        assert!(!lexical_features(&tokens, 1).contains(&"first".to_string()));
    }

    fn random_tagger(seed: u64, buckets: usize) -> ReferenceTagger {
        let mut t = ReferenceTagger::new(labels(), buckets);
        let mut rng = seeding::rng(seed);
        for p in t.params_mut() {
            *p = rng.gen_range(-1.0..1.0);
        }
        t
    }

    fn sample_input() -> (DemonstratedInput, Vec<Tag>) {
        let input = inst("i", "Ann visited New York", "B-PER O B-LOC I-LOC");
        let demo = Demonstration {
            entries: vec![
                DemoEntry { feature: f("LOC"), example: inst("a", "Bob left New Jersey", "B-PER O B-LOC I-LOC"), pool_index: 0, score: 0.0 },
                DemoEntry { feature: f("PER"), example: inst("b", "Anne slept", "B-PER O"), pool_index: 1, score: 0.0 },
            ],
        };
        (demonstrated_input(&input.without_labels(), &demo).unwrap(), input.tags().unwrap().to_vec())
    }

    #[test]
    fn tagger_gradient_matches_finite_differences() {
        let (d, gold) = sample_input();
        let mut rng = seeding::rng(11);
        for point in 0..3 {
            let t = random_tagger(point, 32);
            let x = t.features(&d);
            let (_, grad) = t.loss_and_gradient_from(&x, &gold).unwrap();
            let mut dense = vec![0.0; t.params().len()];
            for (i, g) in grad {
                dense[i] += g;
            }
            for _ in 0..40 {
                let i = if rng.gen_bool(0.3) { t.params().len() - 1 - rng.gen_range(0..COPY_WEIGHTS) } else { rng.gen_range(0..t.params().len()) };
                let h = 1e-5;
                let mut up = t.clone();
                up.params_mut()[i] += h;
                let mut down = t.clone();
                down.params_mut()[i] -= h;
                let numeric = (up.loss_and_gradient_from(&x, &gold).unwrap().0 - down.loss_and_gradient_from(&x, &gold).unwrap().0) / (2.0 * h);
                let err = (dense[i] - numeric).abs();
                assert!(err < 1e-9 || err / dense[i].abs().max(numeric.abs()) < 1e-4, "param {i}: {} vs {numeric}", dense[i]);
            }
        }
    }

    #[test]
    fn tagger_json_round_trip() {
        let t = random_tagger(5, 16);
        let back = ReferenceTagger::from_json(&t.to_json()).unwrap();
        assert_eq!(back, t);
        let (d, _) = sample_input();
        assert_eq!(back.token_scores(&d), t.token_scores(&d));
        assert!(ReferenceTagger::from_json(&t.to_json().replace(TAGGER_FORMAT, "other")).is_err());
    }

    fn toy_split() -> (FewShotSplit, DemoPool) {
        let train = vec![
            inst("a", "Ann visited Rome", "B-PER O B-LOC"),
            inst("b", "Bob left Paris", "B-PER O B-LOC"),
            inst("c", "Cid saw Oslo", "B-PER O B-LOC"),
            inst("d", "Dee loves Lima", "B-PER O B-LOC"),
        ];
        let features: BTreeSet<FeatureLabel> = [f("PER"), f("LOC")].into_iter().collect();
        let pool = build_pool(train.clone(), &features).unwrap();
        let split = FewShotSplit { train: train.clone(), validation: train, k: 2, feature_set: features };
        (split, pool)
    }

    fn uniform_scorer() -> FnScorer<fn(&Instance, &Instance) -> f64> {
        FnScorer(|_, _| 0.0)
    }

    #[test]
    fn training_is_deterministic_and_loss_falls() {
        let (split, pool) = toy_split();
        let config = TrainConfig { epochs: 8, learning_rate: 0.5, seed: 3, ..Default::default() };
        let model = ReferenceTagger::new(LabelSet::from_features(&split.feature_set), 256);
        let a = train(model.clone(), &split, &pool, &uniform_scorer(), &config).unwrap();
        let b = train(model, &split, &pool, &uniform_scorer(), &config).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        assert!(a.epoch_losses.last().unwrap() < &a.epoch_losses[0]);
    }

    #[test]
    fn alpha_one_equals_plain_demonstration_learning() {
        let (split, pool) = toy_split();
        let model = ReferenceTagger::new(LabelSet::from_features(&split.feature_set), 256);
        let plain = TrainConfig { epochs: 5, adl: None, ..Default::default() };
        let alpha_one = TrainConfig { adl: Some(AdlConfig::new(1.0, 0.4).unwrap()), ..plain.clone() };
        let a = train(model.clone(), &split, &pool, &uniform_scorer(), &plain).unwrap();
        let b = train(model, &split, &pool, &uniform_scorer(), &alpha_one).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }

    #[test]
    fn early_stopping_keeps_best_epoch() {
        let (split, pool) = toy_split();
        let model = ReferenceTagger::new(LabelSet::from_features(&split.feature_set), 256);
        let config = TrainConfig { epochs: 40, patience: Some(2), ..Default::default() };
        let run = train(model, &split, &pool, &uniform_scorer(), &config).unwrap();
        assert!(run.epoch_losses.len() < 40);
        let best = run.validation_f1.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(run.validation_f1[run.best_epoch - 1], best);
    }

    #[test]
    fn overflowing_weights_report_divergence() {
        let (split, pool) = toy_split();
        let model = ReferenceTagger::new(LabelSet::from_features(&split.feature_set), 256);
        let config = TrainConfig { epochs: 5, learning_rate: f64::MAX, ..Default::default() };
        assert!(matches!(train(model.clone(), &split, &pool, &uniform_scorer(), &config), Err(TaggerError::Diverged { .. })));
        assert!(matches!(train_without_demonstrations(model, &split, &config), Err(TaggerError::Diverged { .. })));
    }

    #[test]
    fn bad_schedules_are_rejected() {
        let (split, pool) = toy_split();
        let model = ReferenceTagger::new(LabelSet::from_features(&split.feature_set), 16);
        let zero = TrainConfig { epochs: 0, ..Default::default() };
        assert!(matches!(train(model.clone(), &split, &pool, &uniform_scorer(), &zero), Err(TaggerError::BadSchedule(_))));
        let inf = TrainConfig { learning_rate: f64::INFINITY, ..Default::default() };
        assert!(matches!(train(model, &split, &pool, &uniform_scorer(), &inf), Err(TaggerError::BadSchedule(_))));
    }

    proptest! {
        #[test]
        fn emission_rows_are_normalized(rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 5), 1..6)) {
            let em = EmissionScores::from_logits(labels(), rows).unwrap();
            for i in 0..em.len() {
                prop_assert!((em.probs(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn estimated_rows_sum_to_one(seqs in prop::collection::vec(prop::collection::vec(0usize..5, 0..6), 1..5)) {
            let l = labels();
            let seqs: Vec<Vec<Tag>> = seqs.iter().map(|s| s.iter().map(|&i| l.tag(i).clone()).collect()).collect();
            let m = estimate_transitions(&l, seqs.iter().map(Vec::as_slice), 0.01).unwrap();
            for r in 0..l.len() + 2 {
                prop_assert!((m.row_sum(r) - 1.0).abs() < 1e-9);
            }
        }
    }
}
