//! k-ensemble tagging: decode an input under k sampled demonstrations and vote.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{markups_from_tags, repair_bio, tags_from_markups, FeatureLabel, Instance, Markup, Tag};
use crate::demo::{DemoPool, DemoScorer};
use crate::hashing::fnv1a;
use crate::seeding;
use crate::tagger::{tag_with_demonstration, EmissionScores, LabelSet, TaggerError, TaggerModel, TransitionMatrix};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("ensemble size must be at least 1")]
    EmptyEnsemble,
    #[error("ensemble members disagree on sequence length")]
    RaggedMembers,
    #[error(transparent)]
    Tagger(#[from] TaggerError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VotingMode {
    /// Majority label per token.
    #[default]
    Token,
    /// Spans proposed by a strict majority of members.
    Span,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub k: usize,
    pub seed: u64,
    #[serde(default)]
    pub voting: VotingMode,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig { k: 5, seed: 0, voting: VotingMode::Token }
    }
}

/// One ensemble member's decode and its label distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct MemberOutput {
    pub tags: Vec<Tag>,
    pub scores: EmissionScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub tokens: Vec<String>,
    pub tags: Vec<Tag>,
    pub markups: Vec<Markup>,
    /// Each member's decoded tags, kept for auditing.
    #[serde(default)]
    pub members: Vec<Vec<Tag>>,
}

impl Prediction {
    /// Repairs `tags` to valid BIO and derives the markups.
    pub fn new(id: String, tokens: Vec<String>, tags: Vec<Tag>, members: Vec<Vec<Tag>>) -> Self {
        let tags = repair_bio(&tags);
        let markups = markups_from_tags(&tokens, &tags).expect("tags aligned with tokens");
        Prediction { id, tokens, tags, markups, members }
    }
}

/// Sum of the members' probabilities for `label` at `token`, added in sorted
/// order so the total does not depend on member order.
fn summed_prob(members: &[MemberOutput], token: usize, label: usize) -> f64 {
    let mut ps: Vec<f64> = members.iter().map(|m| m.scores.prob(token, label)).collect();
    ps.sort_by(f64::total_cmp);
    ps.iter().sum()
}

/// Combines member decodes. Token mode: most votes, then highest summed
/// probability, then lowest label index. The result is BIO-repaired.
pub fn vote(labels: &LabelSet, members: &[MemberOutput], mode: VotingMode) -> Result<Vec<Tag>, InferenceError> {
    let first = members.first().ok_or(InferenceError::EmptyEnsemble)?;
    let n = first.tags.len();
    if members.iter().any(|m| m.tags.len() != n || m.scores.len() != n) {
        return Err(InferenceError::RaggedMembers);
    }
    let tags = match mode {
        VotingMode::Token => (0..n)
            .map(|i| {
                let mut votes = vec![0usize; labels.len()];
                for m in members {
                    let l = labels.index_of(&m.tags[i]).ok_or_else(|| TaggerError::UnknownLabel(m.tags[i].clone()))?;
                    votes[l] += 1;
                }
                let top = *votes.iter().max().expect("non-empty label set");
                let mut best: Option<(usize, f64)> = None;
                for (l, v) in votes.iter().enumerate() {
                    if *v != top {
                        continue;
                    }
                    let mass = summed_prob(members, i, l);
                    if best.is_none_or(|(_, m)| mass > m) {
                        best = Some((l, mass));
                    }
                }
                Ok(labels.tag(best.expect("some label has the top count").0).clone())
            })
            .collect::<Result<Vec<_>, InferenceError>>()?,
        VotingMode::Span => span_vote(members, n),
    };
    Ok(repair_bio(&tags))
}

fn span_vote(members: &[MemberOutput], n: usize) -> Vec<Tag> {
    let positions: Vec<String> = (0..n).map(|i| i.to_string()).collect();
    let mut counts: BTreeMap<(usize, usize, FeatureLabel), usize> = BTreeMap::new();
    for m in members {
        let spans = markups_from_tags(&positions, &repair_bio(&m.tags)).expect("aligned");
        for s in spans {
            *counts.entry((s.start, s.end, s.feature)).or_default() += 1;
        }
    }
    let mut winners: Vec<((usize, usize, FeatureLabel), usize)> =
        counts.into_iter().filter(|(_, c)| 2 * c > members.len()).collect();
    // more votes first; the key order (start, end, feature) breaks ties
    winners.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut taken = vec![false; n];
    let mut chosen = Vec::new();
    for ((start, end, feature), _) in winners {
        if taken[start..end].iter().all(|t| !t) {
            taken[start..end].iter_mut().for_each(|t| *t = true);
            chosen.push(Markup::new(&positions, start, end, feature).expect("in range"));
        }
    }
    chosen.sort_by_key(|m| m.start);
    tags_from_markups(n, &chosen).expect("non-overlapping spans")
}

/// Tags `input` under `config.k` demonstrations; member `m` draws its
/// demonstration from the stream derived from `(config.seed, m)`.
pub fn ensemble_tag<M, S>(
    model: &M,
    transitions: &TransitionMatrix,
    input: &Instance,
    pool: &DemoPool,
    scorer: &S,
    config: &EnsembleConfig,
) -> Result<Prediction, InferenceError>
where
    M: TaggerModel + ?Sized,
    S: DemoScorer + ?Sized,
{
    if config.k == 0 {
        return Err(InferenceError::EmptyEnsemble);
    }
    if input.is_empty() {
        return Ok(Prediction::new(input.id.clone(), vec![], vec![], vec![]));
    }
    let members = (0..config.k as u64)
        .into_par_iter()
        .map(|m| {
            let mut rng = seeding::child_rng(config.seed, m);
            let (tags, scores) = tag_with_demonstration(model, transitions, input, pool, scorer, &mut rng)?;
            Ok(MemberOutput { tags, scores })
        })
        .collect::<Result<Vec<_>, TaggerError>>()?;
    let tags = vote(model.labels(), &members, config.voting)?;
    Ok(Prediction::new(input.id.clone(), input.tokens().to_vec(), tags, members.into_iter().map(|m| m.tags).collect()))
}

/// Seed used for one input when tagging a collection: derived from the
/// instance id, so an input's result does not depend on its neighbours.
pub fn input_seed(seed: u64, input: &Instance) -> u64 {
    seeding::derive(seed, fnv1a(input.id.as_bytes()))
}

pub fn tag_all<M, S>(
    model: &M,
    transitions: &TransitionMatrix,
    inputs: &[Instance],
    pool: &DemoPool,
    scorer: &S,
    config: &EnsembleConfig,
) -> Result<Vec<Prediction>, InferenceError>
where
    M: TaggerModel + ?Sized,
    S: DemoScorer + ?Sized,
{
    inputs
        .par_iter()
        .map(|input| {
            let cfg = EnsembleConfig { seed: input_seed(config.seed, input), ..*config };
            ensemble_tag(model, transitions, input, pool, scorer, &cfg)
        })
        .collect()
}

#[derive(Serialize)]
struct JsonLine<'a> {
    id: &'a str,
    tokens: &'a [String],
    tags: &'a [Tag],
    markups: &'a [Markup],
}

/// One JSON object per line: `{"id", "tokens", "tags", "markups"}`.
pub fn predictions_to_jsonl(predictions: &[Prediction]) -> String {
    let mut out = String::new();
    for p in predictions {
        let line = JsonLine { id: &p.id, tokens: &p.tokens, tags: &p.tags, markups: &p.markups };
        out.push_str(&serde_json::to_string(&line).expect("prediction serializes"));
        out.push('\n');
    }
    out
}

/// `token tag` lines, blank line between instances.
pub fn predictions_to_conll(predictions: &[Prediction]) -> String {
    let mut out = String::new();
    for (i, p) in predictions.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for (tok, tag) in p.tokens.iter().zip(&p.tags) {
            out.push_str(&format!("{tok} {tag}\n"));
        }
    }
    out
}
