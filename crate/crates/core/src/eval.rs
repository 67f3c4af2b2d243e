//! Evaluation: exact-span entity F1, similarity-predictor metrics, and
//! synthetic corpus generation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversarial::{apply_label_permutation, sample_label_permutation, sample_uniform_permutation, PermutationMode};
use crate::corpus::{feature_jaccard, markups_from_tags, repair_bio, Corpus, CorpusError, FeatureLabel, Instance, Markup};
use crate::demo::{demonstrated_input, select_demonstration, DemoPool, DemoScorer};
use crate::inference::{input_seed, Prediction};
use crate::seeding;
use crate::tagger::{viterbi_decode, TaggerError, TaggerModel, TransitionMatrix};

pub const DEFAULT_TRIALS: usize = 10_000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no prediction for instance `{0}`")]
    MissingPrediction(String),
    #[error("{gold} gold instances but {pred} predictions")]
    CountMismatch { gold: usize, pred: usize },
    #[error("instance `{id}`: gold has {gold} tokens, prediction {pred}")]
    LengthMismatch { id: String, gold: usize, pred: usize },
    #[error("no test instance admits a valid {0} pair")]
    NoValidPairs(&'static str),
    #[error("trial count must be positive")]
    NoTrials,
    #[error("correlation undefined: a series has zero variance")]
    ZeroVariance,
    #[error("synthetic spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// True/false positive and false negative span counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    /// Exact match on (start, end, feature).
    pub fn of(gold: &[Markup], pred: &[Markup]) -> Counts {
        let key = |m: &Markup| (m.start, m.end, m.feature.clone());
        let g: BTreeSet<_> = gold.iter().map(key).collect();
        let p: BTreeSet<_> = pred.iter().map(key).collect();
        let tp = g.intersection(&p).count();
        Counts { tp, fp: p.len() - tp, fn_: g.len() - tp }
    }

    pub fn add(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of gold spans.
    pub support: usize,
    pub counts: Counts,
}

impl From<Counts> for FeatureScores {
    fn from(c: Counts) -> Self {
        FeatureScores { precision: c.precision(), recall: c.recall(), f1: c.f1(), support: c.tp + c.fn_, counts: c }
    }
}

/// Micro-averaged span scores with a per-feature breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub counts: Counts,
    pub per_feature: BTreeMap<FeatureLabel, FeatureScores>,
}

impl F1Report {
    pub fn from_counts(total: Counts, per_feature: BTreeMap<FeatureLabel, Counts>) -> Self {
        F1Report {
            precision: total.precision(),
            recall: total.recall(),
            f1: total.f1(),
            support: total.tp + total.fn_,
            counts: total,
            per_feature: per_feature.into_iter().map(|(f, c)| (f, c.into())).collect(),
        }
    }

    /// Aligned-column text table, one row per feature plus the micro total.
    pub fn table(&self) -> String {
        let width = self.per_feature.keys().map(|f| f.as_str().len()).max().unwrap_or(0).max(5);
        let mut out = format!("{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}\n", "label", "precision", "recall", "f1", "support");
        let mut row = |name: &str, p: f64, r: f64, f: f64, s: usize| {
            let _ = writeln!(out, "{name:<width$}  {p:>9.4}  {r:>9.4}  {f:>9.4}  {s:>7}");
        };
        for (feature, s) in &self.per_feature {
            row(feature.as_str(), s.precision, s.recall, s.f1, s.support);
        }
        row("micro", self.precision, self.recall, self.f1, self.support);
        out
    }
}

/// Exact-span micro F1 of `pred` against `gold`, matched by instance id.
pub fn entity_f1(gold: &[Instance], pred: &[Prediction]) -> Result<F1Report, EvalError> {
    if gold.len() != pred.len() {
        return Err(EvalError::CountMismatch { gold: gold.len(), pred: pred.len() });
    }
    let by_id: HashMap<&str, &Prediction> = pred.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut total = Counts::default();
    let mut per_feature: BTreeMap<FeatureLabel, Counts> = BTreeMap::new();
    for g in gold {
        let p = by_id.get(g.id.as_str()).ok_or_else(|| EvalError::MissingPrediction(g.id.clone()))?;
        if p.tokens.len() != g.len() || p.tags.len() != g.len() {
            return Err(EvalError::LengthMismatch { id: g.id.clone(), gold: g.len(), pred: p.tags.len() });
        }
        total.add(&Counts::of(g.markups(), &p.markups));
        let features: BTreeSet<&FeatureLabel> =
            g.markups().iter().chain(&p.markups).map(|m| &m.feature).collect();
        for f in features {
            let only = |ms: &[Markup]| ms.iter().filter(|m| &m.feature == f).cloned().collect::<Vec<_>>();
            per_feature.entry(f.clone()).or_default().add(&Counts::of(&only(g.markups()), &only(&p.markups)));
        }
    }
    Ok(F1Report::from_counts(total, per_feature))
}

/// A similarity function under evaluation.
pub trait PairScore: Sync {
    fn score(&self, a: &Instance, b: &Instance) -> f64;
}

impl<F: Fn(&Instance, &Instance) -> f64 + Sync> PairScore for F {
    fn score(&self, a: &Instance, b: &Instance) -> f64 {
        self(a, b)
    }
}

/// Feature-Jaccard table between every test and pool instance.
struct JaccardTable {
    values: Vec<Vec<f64>>,
}

impl JaccardTable {
    fn new(test: &[Instance], pool: &[Instance]) -> Result<Self, EvalError> {
        let values = test
            .iter()
            .map(|d| pool.iter().map(|x| feature_jaccard(d, x)).collect::<Result<Vec<_>, _>>())
            .collect::<Result<Vec<_>, _>>()?;
        Ok(JaccardTable { values })
    }
}

fn same(a: &Instance, b: &Instance) -> bool {
    a.id == b.id && a.tokens() == b.tokens()
}

fn run_trials<F>(trials: usize, seed: u64, trial: F) -> Vec<bool>
where
    F: Fn(&mut seeding::Rng) -> bool + Sync,
{
    (0..trials).into_par_iter().map(|t| trial(&mut seeding::child_rng(seed, t as u64))).collect()
}

fn fraction(hits: &[bool]) -> f64 {
    hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64
}

/// P(score(d, d_i) > score(d, d_j)) for FJ(d, d_i) > 0 and FJ(d, d_j) = 0.
/// Ties count as failures.
pub fn binary_accuracy<S: PairScore + ?Sized>(
    score: &S,
    test: &[Instance],
    pool: &[Instance],
    trials: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    if trials == 0 {
        return Err(EvalError::NoTrials);
    }
    let table = JaccardTable::new(test, pool)?;
    let candidates: Vec<(usize, Vec<usize>, Vec<usize>)> = (0..test.len())
        .filter_map(|t| {
            let others = |pred: &dyn Fn(f64) -> bool| -> Vec<usize> {
                (0..pool.len()).filter(|&j| !same(&test[t], &pool[j]) && pred(table.values[t][j])).collect()
            };
            let pos = others(&|v| v > 0.0);
            let neg = others(&|v| v == 0.0);
            (!pos.is_empty() && !neg.is_empty()).then_some((t, pos, neg))
        })
        .collect();
    if candidates.is_empty() {
        return Err(EvalError::NoValidPairs("binary"));
    }
    let hits = run_trials(trials, seed, |rng| {
        let (t, pos, neg) = candidates.choose(rng).expect("non-empty");
        let i = *pos.choose(rng).expect("non-empty");
        let j = *neg.choose(rng).expect("non-empty");
        score.score(&test[*t], &pool[i]) > score.score(&test[*t], &pool[j])
    });
    Ok(fraction(&hits))
}

/// P(score order agrees with FJ order) for FJ(d, d_i) > FJ(d, d_j) > 0.
/// Ties count as failures.
pub fn ranking_accuracy<S: PairScore + ?Sized>(
    score: &S,
    test: &[Instance],
    pool: &[Instance],
    trials: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    if trials == 0 {
        return Err(EvalError::NoTrials);
    }
    let table = JaccardTable::new(test, pool)?;
    // per test instance: positive partners grouped by distinct FJ value
    let candidates: Vec<(usize, Vec<Vec<usize>>)> = (0..test.len())
        .filter_map(|t| {
            let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
            for j in 0..pool.len() {
                let v = table.values[t][j];
                if v > 0.0 && !same(&test[t], &pool[j]) {
                    groups.entry(v.to_bits()).or_default().push(j);
                }
            }
            (groups.len() >= 2).then(|| (t, groups.into_values().collect()))
        })
        .collect();
    if candidates.is_empty() {
        return Err(EvalError::NoValidPairs("ranking"));
    }
    let hits = run_trials(trials, seed, |rng| {
        let (t, groups) = candidates.choose(rng).expect("non-empty");
        // uniform over partner pairs with different FJ values
        let total: usize = groups.iter().map(Vec::len).sum();
        let (i, j) = loop {
            let a = rng.gen_range(0..total);
            let b = rng.gen_range(0..total);
            let (ga, ia) = locate(groups, a);
            let (gb, ib) = locate(groups, b);
            if ga != gb {
                break (ia, ib);
            }
        };
        let (hi, lo) = if table.values[*t][i] > table.values[*t][j] { (i, j) } else { (j, i) };
        score.score(&test[*t], &pool[hi]) > score.score(&test[*t], &pool[lo])
    });
    Ok(fraction(&hits))
}

fn locate(groups: &[Vec<usize>], mut k: usize) -> (usize, usize) {
    for (g, members) in groups.iter().enumerate() {
        if k < members.len() {
            return (g, members[k]);
        }
        k -= members.len();
    }
    unreachable!("index within total")
}

/// Sample Pearson correlation between FJ(d, d_i) and score(d, d_i) over random pairs.
pub fn pearson<S: PairScore + ?Sized>(
    score: &S,
    test: &[Instance],
    pool: &[Instance],
    trials: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    if trials < 2 {
        return Err(EvalError::NoTrials);
    }
    let table = JaccardTable::new(test, pool)?;
    if test.is_empty() || pool.is_empty() {
        return Err(EvalError::NoValidPairs("correlation"));
    }
    let pairs: Vec<(f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = seeding::child_rng(seed, t as u64);
            let d = rng.gen_range(0..test.len());
            let x = rng.gen_range(0..pool.len());
            (table.values[d][x], score.score(&test[d], &pool[x]))
        })
        .collect();
    correlation(&pairs)
}

pub fn correlation(pairs: &[(f64, f64)]) -> Result<f64, EvalError> {
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorReport {
    pub binary_accuracy: f64,
    pub ranking_accuracy: f64,
    pub pearson: f64,
    pub trials: usize,
}

impl PredictorReport {
    pub fn table(&self) -> String {
        format!(
            "{:<18}{:>8}\n{:<18}{:>8.4}\n{:<18}{:>8.4}\n{:<18}{:>8.4}\n",
            "trials", self.trials, "binary_accuracy", self.binary_accuracy, "ranking_accuracy", self.ranking_accuracy,
            "pearson", self.pearson
        )
    }
}

pub fn evaluate_predictor<S: PairScore + ?Sized>(
    score: &S,
    test: &[Instance],
    pool: &[Instance],
    trials: usize,
    seed: u64,
) -> Result<PredictorReport, EvalError> {
    Ok(PredictorReport {
        binary_accuracy: binary_accuracy(score, test, pool, trials, seed)?,
        ranking_accuracy: ranking_accuracy(score, test, pool, trials, seed)?,
        pearson: pearson(score, test, pool, trials, seed)?,
        trials,
    })
}

/// Behaviour of a tagger when the demonstration, not the surface form,
/// defines which label each entity gets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutedRuleReport {
    /// Accuracy on gold entity tokens against permuted gold labels.
    pub token_accuracy: f64,
    /// Exact-span F1 against permuted gold labels.
    pub f1: f64,
    /// Share of gold entity tokens whose decoded tag changes when the
    /// demonstration labels are permuted (never to the identity).
    pub flip_rate: f64,
    pub entity_tokens: usize,
}

/// Tags every instance `draws` times. Each draw selects a demonstration,
/// relabels it and the gold tags with a permutation drawn uniformly from all
/// permutations (identity included), and decodes. The flip rate compares the
/// unpermuted decode with one under a non-identity permutation.
pub fn permuted_rule_eval<M, S>(
    model: &M,
    transitions: &TransitionMatrix,
    instances: &[Instance],
    pool: &DemoPool,
    scorer: &S,
    draws: usize,
    seed: u64,
) -> Result<PermutedRuleReport, TaggerError>
where
    M: TaggerModel + ?Sized,
    S: DemoScorer + ?Sized,
{
    let features = model.labels().features();
    let tallies = instances
        .par_iter()
        .filter(|i| !i.is_empty())
        .map(|inst| {
            let gold = inst.tags().ok_or_else(|| TaggerError::Unlabeled(inst.id.clone()))?;
            let bare = inst.without_labels();
            let mut t = (0usize, 0usize, 0usize, Counts::default());
            for draw in 0..draws as u64 {
                let mut rng = seeding::child_rng(input_seed(seed, inst), draw);
                let demo = select_demonstration(pool, &bare, scorer, &mut rng)?;
                let d = demonstrated_input(&bare, &demo)?;
                let pi = sample_uniform_permutation(&features, &mut rng);
                let swap = sample_label_permutation(&features, &mut rng, PermutationMode::Any)?;
                let (dp, gp) = apply_label_permutation(&d, gold, &pi)?;
                let pred = viterbi_decode(&model.token_scores(&dp), transitions)?;
                let plain = viterbi_decode(&model.token_scores(&d), transitions)?;
                let (ds, _) = apply_label_permutation(&d, gold, &swap)?;
                let swapped = viterbi_decode(&model.token_scores(&ds), transitions)?;
                for i in (0..gold.len()).filter(|&i| !gold[i].is_outside()) {
                    t.0 += 1;
                    t.1 += usize::from(pred[i] == gp[i]);
                    t.2 += usize::from(plain[i] != swapped[i]);
                }
                let gold_spans = markups_from_tags(inst.tokens(), &gp).expect("aligned tags");
                let pred_spans = markups_from_tags(inst.tokens(), &repair_bio(&pred)).expect("aligned tags");
                t.3.add(&Counts::of(&gold_spans, &pred_spans));
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>, TaggerError>>()?;
    let (mut total, mut correct, mut flipped, mut counts) = (0, 0, 0, Counts::default());
    for (n, c, f, k) in tallies {
        total += n;
        correct += c;
        flipped += f;
        counts.add(&k);
    }
    let ratio = |x: usize| if total == 0 { 0.0 } else { x as f64 / total as f64 };
    Ok(PermutedRuleReport {
        token_accuracy: ratio(correct),
        f1: counts.f1(),
        flip_rate: ratio(flipped),
        entity_tokens: total,
    })
}

/// Parameters of a synthetic corpus whose feature sets are a function of
/// surface vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Entity strings per feature; multi-word strings become multi-token spans.
    pub vocabularies: BTreeMap<String, Vec<String>>,
    /// Non-entity words (must not overlap any vocabulary).
    pub filler: Vec<String>,
    pub instances: usize,
    /// Filler tokens per sentence, inclusive range.
    pub min_len: usize,
    pub max_len: usize,
    /// Entity slots per sentence; each is filled with probability `entity_rate`.
    pub entity_slots: usize,
    pub entity_rate: f64,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

const FILLER: &[&str] = &[
    "the", "a", "of", "and", "to", "in", "was", "with", "for", "on", "at", "by", "from", "said", "after", "before",
    "then", "this", "that", "new", "old", "report", "meeting", "visit", "week", "today", "later", "again", "still",
    "about", "over", "under", "near", "during", "while", "some", "many", "very", "quite", "soon",
];

impl SyntheticSpec {
    /// Four features with small disjoint vocabularies.
    pub fn vocabulary_determined() -> Self {
        let vocabularies = [
            ("PER", &["Alice", "Bruno", "Chen", "Dmitri", "Elena", "Farid", "Greta", "Hiro"][..]),
            ("LOC", &["Oslo", "Lima", "Quito", "Dakar", "Hanoi", "Perth", "Tromso", "Kyoto"][..]),
            ("ORG", &["Acme", "Globex", "Initech", "Umbrella", "Hooli", "Vandelay", "Stark", "Wayne"][..]),
            ("MISC", &["Esperanto", "Olympics", "Grammy", "Nobel", "Bitcoin", "Linux", "Tesla", "Kindle"][..]),
        ]
        .into_iter()
        .map(|(f, v)| (f.to_string(), words(v)))
        .collect();
        SyntheticSpec {
            vocabularies,
            filler: words(FILLER),
            instances: 600,
            min_len: 5,
            max_len: 10,
            entity_slots: 3,
            entity_rate: 0.6,
        }
    }

    /// Four features whose names share a type-specific infix between prefixes
    /// and suffixes common to all types. Word-edge features say nothing about
    /// the type; only similarity to a labeled span does.
    pub fn infix_families() -> Self {
        const PREFIXES: &[&str] = &["Bar", "Kit", "Mon", "Tul", "Res", "Sav", "Gor", "Lin"];
        const SUFFIXES: &[&str] = &["ela", "ano", "osi", "iru", "ume"];
        let vocabularies = [("PER", "zorv"), ("LOC", "kelm"), ("ORG", "quat"), ("MISC", "dryx")]
            .into_iter()
            .map(|(f, infix)| {
                let names = PREFIXES.iter().flat_map(|p| SUFFIXES.iter().map(move |s| format!("{p}{infix}{s}"))).collect();
                (f.to_string(), names)
            })
            .collect();
        SyntheticSpec {
            vocabularies,
            filler: words(FILLER),
            instances: 600,
            min_len: 5,
            max_len: 10,
            entity_slots: 3,
            entity_rate: 0.6,
        }
    }

    /// Two features whose names form tight spelling families, so a token's
    /// closest demonstration span reliably has the token's own type.
    pub fn permuted_label() -> Self {
        let vocabularies = [
            ("PER", &["Zorvan", "Zorvik", "Zorvel", "Zorvath", "Zorvin", "Zorvex"][..]),
            ("LOC", &["Kelmir", "Kelmor", "Kelmund", "Kelmas", "Kelmet", "Kelmo"][..]),
        ]
        .into_iter()
        .map(|(f, v)| (f.to_string(), words(v)))
        .collect();
        SyntheticSpec {
            vocabularies,
            filler: words(FILLER),
            instances: 400,
            min_len: 4,
            max_len: 8,
            entity_slots: 2,
            entity_rate: 0.8,
        }
    }

    fn validate(&self) -> Result<BTreeMap<FeatureLabel, Vec<Vec<String>>>, EvalError> {
        let bad = |m: &str| Err(EvalError::BadSpec(m.to_string()));
        if self.vocabularies.len() < 2 {
            return bad("at least two features are required");
        }
        if self.filler.is_empty() {
            return bad("filler vocabulary is empty");
        }
        if self.min_len > self.max_len {
            return bad("min_len exceeds max_len");
        }
        if !(0.0..=1.0).contains(&self.entity_rate) {
            return bad("entity_rate must lie in [0, 1]");
        }
        let mut owner: HashMap<&str, &str> = HashMap::new();
        for w in &self.filler {
            owner.insert(w, "filler");
        }
        let mut out = BTreeMap::new();
        for (name, vocab) in &self.vocabularies {
            let feature = FeatureLabel::new(name.as_str())?;
            if vocab.is_empty() {
                return Err(EvalError::BadSpec(format!("vocabulary of `{name}` is empty")));
            }
            let mut entries = Vec::new();
            for entry in vocab {
                let tokens: Vec<String> = entry.split_whitespace().map(str::to_string).collect();
                if tokens.is_empty() {
                    return Err(EvalError::BadSpec(format!("blank entry in vocabulary of `{name}`")));
                }
                for t in &entry.split_whitespace().collect::<Vec<_>>() {
                    if let Some(prev) = owner.insert(t, name) {
                        if prev != name {
                            return Err(EvalError::BadSpec(format!("word `{t}` appears in both `{prev}` and `{name}`")));
                        }
                    }
                }
                entries.push(tokens);
            }
            out.insert(feature, entries);
        }
        Ok(out)
    }
}

/// Sentences of filler words with entities inserted from the per-feature
/// vocabularies. Deterministic under `seed`.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, seed: u64) -> Result<Corpus, EvalError> {
    let vocab = spec.validate()?;
    let features: Vec<&FeatureLabel> = vocab.keys().collect();
    let mut rng = seeding::rng(seed);
    let mut instances = Vec::with_capacity(spec.instances);
    for idx in 0..spec.instances {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let mut pieces: Vec<(Vec<String>, Option<FeatureLabel>)> =
            (0..len).map(|_| (vec![spec.filler.choose(&mut rng).expect("non-empty").clone()], None)).collect();
        for _ in 0..spec.entity_slots {
            if rng.gen_bool(spec.entity_rate) {
                let feature = *features.choose(&mut rng).expect("non-empty");
                let entity = vocab[feature].choose(&mut rng).expect("non-empty").clone();
                let at = rng.gen_range(0..=pieces.len());
                pieces.insert(at, (entity, Some(feature.clone())));
            }
        }
        let mut tokens = Vec::new();
        let mut markups = Vec::new();
        for (words, feature) in pieces {
            let start = tokens.len();
            tokens.extend(words);
            if let Some(f) = feature {
                markups.push(Markup::new(&tokens, start, tokens.len(), f)?);
            }
        }
        if tokens.is_empty() {
            tokens.push(spec.filler.choose(&mut rng).expect("non-empty").clone());
        }
        instances.push(Instance::from_markups(format!("syn{idx}"), tokens, markups)?);
    }
    Ok(Corpus::with_feature_set(instances, vocab.keys().cloned().collect())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{feature_set_of, Tag};
    use crate::hashing::fnv1a_parts;
    use proptest::prelude::*;

    fn f(name: &str) -> FeatureLabel {
        FeatureLabel::new(name).unwrap()
    }

    fn inst(id: &str, tokens: &str, tags: &str) -> Instance {
        Instance::parse_labeled(id, tokens, tags).unwrap()
    }

    fn prediction(gold: &Instance, tags: &str) -> Prediction {
        let tags: Vec<Tag> = tags.split_whitespace().map(|t| t.parse().unwrap()).collect();
        Prediction::new(gold.id.clone(), gold.tokens().to_vec(), tags, vec![])
    }

    #[test]
    fn f1_examples() {
        let gold = inst("g", "Ann x x New York", "B-PER O O B-LOC I-LOC");
        let perfect = entity_f1(&[gold.clone()], &[prediction(&gold, "B-PER O O B-LOC I-LOC")]).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0));

        let empty = entity_f1(&[gold.clone()], &[prediction(&gold, "O O O O O")]).unwrap();
        assert_eq!((empty.precision, empty.recall, empty.f1), (0.0, 0.0, 0.0));

        let partial = entity_f1(&[gold.clone()], &[prediction(&gold, "B-PER O O B-LOC O")]).unwrap();
        assert_eq!(partial.counts, Counts { tp: 1, fp: 1, fn_: 1 });
        assert!((partial.f1 - 0.5).abs() < 1e-12);
        assert_eq!(partial.per_feature[&f("PER")].f1, 1.0);
        assert_eq!(partial.per_feature[&f("LOC")].f1, 0.0);
        assert!(partial.table().contains("micro"));

        let other = inst("h", "x", "O");
        assert!(matches!(entity_f1(&[gold.clone()], &[prediction(&other, "O")]), Err(EvalError::MissingPrediction(_))));
        let mut short = prediction(&gold, "O O O O O");
        short.tags.pop();
        assert!(matches!(entity_f1(&[gold], &[short]), Err(EvalError::LengthMismatch { .. })));
    }

    fn oracle(a: &Instance, b: &Instance) -> f64 {
        feature_jaccard(a, b).unwrap()
    }

    fn corpus() -> Corpus {
        generate_synthetic_corpus(&SyntheticSpec::vocabulary_determined(), 7).unwrap()
    }

    #[test]
    fn predictor_metrics_on_oracles() {
        let c = corpus();
        let (test, pool) = c.instances.split_at(100);
        assert_eq!(binary_accuracy(&oracle, test, pool, 2000, 1).unwrap(), 1.0);
        assert_eq!(ranking_accuracy(&oracle, test, pool, 2000, 1).unwrap(), 1.0);
        assert_eq!(binary_accuracy(&|_: &Instance, _: &Instance| 0.5, test, pool, 500, 1).unwrap(), 0.0);
        assert_eq!(binary_accuracy(&|a: &Instance, b: &Instance| -oracle(a, b), test, pool, 500, 1).unwrap(), 0.0);
        assert!((pearson(&oracle, test, pool, 2000, 1).unwrap() - 1.0).abs() < 1e-9);
        assert!((pearson(&|a: &Instance, b: &Instance| 1.0 - oracle(a, b), test, pool, 2000, 1).unwrap() + 1.0).abs() < 1e-9);
        assert!((pearson(&|a: &Instance, b: &Instance| 3.0 * oracle(a, b) + 2.0, test, pool, 2000, 1).unwrap() - 1.0).abs() < 1e-9);
        assert!(matches!(binary_accuracy(&oracle, test, pool, 0, 1), Err(EvalError::NoTrials)));
    }

    #[test]
    fn random_scores_rank_at_chance() {
        let c = corpus();
        let (test, pool) = c.instances.split_at(100);
        let random = |a: &Instance, b: &Instance| (fnv1a_parts(&[&a.id, &b.id]) % 1_000_003) as f64;
        let acc = ranking_accuracy(&random, test, pool, DEFAULT_TRIALS, 5).unwrap();
        assert!((acc - 0.5).abs() < 0.05, "{acc}");
    }

    #[test]
    fn two_feature_ranking_pairs() {
        let pool = vec![
            inst("a", "Ann", "B-PER"),
            inst("b", "Ann Rome", "B-PER B-LOC"),
            inst("c", "Rome", "B-LOC"),
        ];
        let test = vec![inst("q", "Bob Oslo", "B-PER B-LOC")];
        let values: BTreeSet<u64> = pool.iter().map(|p| oracle(&test[0], p).to_bits()).collect();
        assert_eq!(values, [0.5f64.to_bits(), 1.0f64.to_bits()].into_iter().collect());
        assert_eq!(ranking_accuracy(&oracle, &test, &pool, 200, 3).unwrap(), 1.0);
        let flat = vec![inst("q", "Bob", "B-PER")];
        assert!(matches!(ranking_accuracy(&oracle, &flat, &pool[..1], 10, 3), Err(EvalError::NoValidPairs(_))));
    }

    #[test]
    fn metrics_are_seed_deterministic_and_stable() {
        let c = corpus();
        let (test, pool) = c.instances.split_at(100);
        let noisy = |a: &Instance, b: &Instance| oracle(a, b) + (fnv1a_parts(&[&a.id, &b.id]) % 1000) as f64 / 1500.0;
        let a = binary_accuracy(&noisy, test, pool, 5000, 9).unwrap();
        assert_eq!(a, binary_accuracy(&noisy, test, pool, 5000, 9).unwrap());
        let b = binary_accuracy(&noisy, test, pool, 10_000, 9).unwrap();
        assert!((a - b).abs() < 0.02);
        let r1 = ranking_accuracy(&noisy, test, pool, 5000, 9).unwrap();
        let r2 = ranking_accuracy(&noisy, test, pool, 10_000, 9).unwrap();
        assert!((r1 - r2).abs() < 0.02);
        let p1 = pearson(&noisy, test, pool, 5000, 9).unwrap();
        let p2 = pearson(&noisy, test, pool, 10_000, 9).unwrap();
        assert!((p1 - p2).abs() < 0.02);
    }

    #[test]
    fn zero_variance_is_an_error() {
        assert!(matches!(correlation(&[(1.0, 2.0), (1.0, 3.0)]), Err(EvalError::ZeroVariance)));
    }

    #[test]
    fn synthetic_corpus_properties() {
        let mut spec = SyntheticSpec::permuted_label();
        spec.instances = 100;
        let c = generate_synthetic_corpus(&spec, 1).unwrap();
        assert_eq!(c.len(), 100);
        let lookup: HashMap<&str, &str> =
            spec.vocabularies.iter().flat_map(|(f, v)| v.iter().map(move |w| (w.as_str(), f.as_str()))).collect();
        for i in &c.instances {
            let from_vocab: BTreeSet<FeatureLabel> = i.tokens().iter().filter_map(|t| lookup.get(t.as_str())).map(|f| FeatureLabel::new(*f).unwrap()).collect();
            assert_eq!(from_vocab, feature_set_of(i));
        }
        assert_eq!(generate_synthetic_corpus(&spec, 1).unwrap().instances, c.instances);

        spec.entity_rate = 0.0;
        let nil = generate_synthetic_corpus(&spec, 1).unwrap();
        assert!(nil.instances.iter().all(|i| i.markups().is_empty()));

        let mut broken = SyntheticSpec::permuted_label();
        broken.vocabularies.insert("ORG".into(), vec![]);
        assert!(matches!(generate_synthetic_corpus(&broken, 1), Err(EvalError::BadSpec(_))));
        let mut overlap = SyntheticSpec::permuted_label();
        overlap.vocabularies.get_mut("LOC").unwrap().push("Zorvan".into());
        assert!(generate_synthetic_corpus(&overlap, 1).is_err());
    }

    #[test]
    fn multi_word_entities_become_spans() {
        let mut spec = SyntheticSpec::permuted_label();
        spec.vocabularies.insert("ORG".into(), vec!["Big Corp".into()]);
        spec.instances = 200;
        let c = generate_synthetic_corpus(&spec, 4).unwrap();
        let org: Vec<&Markup> = c.instances.iter().flat_map(|i| i.markups()).filter(|m| m.feature.as_str() == "ORG").collect();
        assert!(!org.is_empty());
        assert!(org.iter().all(|m| m.end - m.start == 2 && m.text == "Big Corp"));
    }

    fn brute_counts(gold: &[Markup], pred: &[Markup]) -> Counts {
        let tp = pred.iter().filter(|p| gold.iter().any(|g| g.start == p.start && g.end == p.end && g.feature == p.feature)).count();
        Counts { tp, fp: pred.len() - tp, fn_: gold.len() - tp }
    }

    proptest! {
        #[test]
        fn counts_match_brute_force(g in prop::collection::vec(0usize..3, 8), p in prop::collection::vec(0usize..3, 8)) {
            let tokens: Vec<String> = (0..8).map(|i| format!("t{i}")).collect();
            let to_tags = |v: &[usize]| -> Vec<Tag> {
                crate::corpus::repair_bio(&v.iter().map(|&x| match x {
                    0 => Tag::Outside,
                    1 => Tag::Begin(f("PER")),
                    _ => Tag::Inside(f("PER")),
                }).collect::<Vec<_>>())
            };
            let gm = crate::corpus::markups_from_tags(&tokens, &to_tags(&g)).unwrap();
            let pm = crate::corpus::markups_from_tags(&tokens, &to_tags(&p)).unwrap();
            prop_assert_eq!(Counts::of(&gm, &pm), brute_counts(&gm, &pm));
        }
    }
}
