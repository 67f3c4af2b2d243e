//! The demonstration incorporator.
//!
//! For an input instance and every feature `f`, the candidates carrying `f`
//! are ranked by similarity to the input, the lower-scored half is dropped,
//! and one survivor is drawn at random. The picks are ordered by score,
//! rendered with the template `"<sentence> <span> is [<F>]. ..."` and joined
//! to the input with `[SEP]`.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{feature_set_of, FeatureLabel, Instance};

pub const SEPARATOR: &str = "[SEP]";

pub type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("demonstration pool is empty")]
    EmptyPool,
    #[error("pool example `{0}` is not labeled")]
    Unlabeled(String),
    #[error("no pool example carries feature `{0}`")]
    NoCarriers(FeatureLabel),
    #[error("feature `{0}` is not in the pool")]
    UnknownFeature(FeatureLabel),
    #[error("no candidate left for feature `{0}` after exclusion and filtering")]
    EmptySurvivors(FeatureLabel),
    #[error("demonstration entry `{id}` has no markup for its feature `{feature}`")]
    MissingFeature { id: String, feature: FeatureLabel },
    #[error("scorer returned {got} scores for {expected} candidates")]
    ScoreCount { expected: usize, got: usize },
    #[error("scorer failed: {0}")]
    Scorer(#[source] BoxError),
}

/// Scores pool candidates against an input.
///
/// Scoring the whole candidate list at once lets implementations normalize
/// over the pool.
pub trait DemoScorer: Sync {
    fn score_pool(&self, input: &Instance, candidates: &[&Instance]) -> Result<Vec<f64>, DemoError>;
}

impl<S: DemoScorer + ?Sized> DemoScorer for &S {
    fn score_pool(&self, input: &Instance, candidates: &[&Instance]) -> Result<Vec<f64>, DemoError> {
        (**self).score_pool(input, candidates)
    }
}

/// Adapts a pairwise scoring function.
pub struct FnScorer<F>(pub F);

impl<F> DemoScorer for FnScorer<F>
where
    F: Fn(&Instance, &Instance) -> f64 + Sync,
{
    fn score_pool(&self, input: &Instance, candidates: &[&Instance]) -> Result<Vec<f64>, DemoError> {
        Ok(candidates.iter().map(|c| (self.0)(input, c)).collect())
    }
}

/// The candidate set and its per-feature subsets.
#[derive(Clone, Debug)]
pub struct DemoPool {
    examples: Vec<Instance>,
    per_feature: BTreeMap<FeatureLabel, Vec<usize>>,
    unfiltered: BTreeSet<FeatureLabel>,
}

pub fn build_pool(examples: Vec<Instance>, feature_set: &BTreeSet<FeatureLabel>) -> Result<DemoPool, DemoError> {
    if examples.is_empty() {
        return Err(DemoError::EmptyPool);
    }
    let mut per_feature: BTreeMap<FeatureLabel, Vec<usize>> =
        feature_set.iter().map(|f| (f.clone(), Vec::new())).collect();
    for (j, ex) in examples.iter().enumerate() {
        if !ex.is_labeled() {
            return Err(DemoError::Unlabeled(ex.id.clone()));
        }
        for f in feature_set_of(ex) {
            if let Some(list) = per_feature.get_mut(&f) {
                list.push(j);
            }
        }
    }
    let mut unfiltered = BTreeSet::new();
    for (f, carriers) in &per_feature {
        match carriers.len() {
            0 => return Err(DemoError::NoCarriers(f.clone())),
            1 => {
                log::warn!("feature `{f}` has a single carrier in the demonstration pool; filtering disabled for it");
                unfiltered.insert(f.clone());
            }
            _ => {}
        }
    }
    Ok(DemoPool { examples, per_feature, unfiltered })
}

impl DemoPool {
    pub fn examples(&self) -> &[Instance] {
        &self.examples
    }

    pub fn features(&self) -> impl Iterator<Item = &FeatureLabel> {
        self.per_feature.keys()
    }

    pub fn feature_set(&self) -> BTreeSet<FeatureLabel> {
        self.per_feature.keys().cloned().collect()
    }

    /// Pool positions of the examples carrying `feature`.
    pub fn carriers(&self, feature: &FeatureLabel) -> Option<&[usize]> {
        self.per_feature.get(feature).map(Vec::as_slice)
    }

    pub fn filtering_enabled(&self, feature: &FeatureLabel) -> bool {
        !self.unfiltered.contains(feature)
    }

    /// Pool position of `input` itself, matched by id and tokens.
    pub fn position_of(&self, input: &Instance) -> Option<usize> {
        self.examples.iter().position(|e| e.id == input.id && e.tokens() == input.tokens())
    }

    /// Scores every pool example except the input itself. Entry `j` is `None`
    /// for the excluded position.
    fn score_all<S: DemoScorer + ?Sized>(&self, input: &Instance, scorer: &S) -> Result<Vec<Option<f64>>, DemoError> {
        let own = self.position_of(input);
        let candidates: Vec<&Instance> =
            self.examples.iter().enumerate().filter(|(j, _)| Some(*j) != own).map(|(_, e)| e).collect();
        let scores = scorer.score_pool(input, &candidates)?;
        if scores.len() != candidates.len() {
            return Err(DemoError::ScoreCount { expected: candidates.len(), got: scores.len() });
        }
        let mut it = scores.into_iter();
        Ok((0..self.examples.len()).map(|j| if Some(j) == own { None } else { it.next() }).collect())
    }

    fn ranked(&self, feature: &FeatureLabel, scores: &[Option<f64>]) -> Result<Vec<Ranked>, DemoError> {
        let carriers = self.carriers(feature).ok_or_else(|| DemoError::UnknownFeature(feature.clone()))?;
        let mut ranked: Vec<Ranked> =
            carriers.iter().filter_map(|&index| scores[index].map(|score| Ranked { index, score })).collect();
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
        Ok(ranked)
    }
}

/// A ranked candidate: pool position and score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ranked {
    pub index: usize,
    pub score: f64,
}

/// Ranks `C_f` by decreasing score, ties by ascending pool position. The
/// input itself never appears.
pub fn rank_candidates<S: DemoScorer + ?Sized>(
    pool: &DemoPool,
    feature: &FeatureLabel,
    input: &Instance,
    scorer: &S,
) -> Result<Vec<Ranked>, DemoError> {
    if pool.carriers(feature).is_none() {
        return Err(DemoError::UnknownFeature(feature.clone()));
    }
    let scores = pool.score_all(input, scorer)?;
    pool.ranked(feature, &scores)
}

/// Number of survivors after dropping the ⌊n/2⌋ lowest-ranked candidates.
pub fn survivors(n: usize, filtering: bool) -> usize {
    if filtering {
        n - n / 2
    } else {
        n
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoEntry {
    /// The feature this example was drawn for.
    pub feature: FeatureLabel,
    pub example: Instance,
    pub pool_index: usize,
    pub score: f64,
}

/// Ordered demonstrative examples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub entries: Vec<DemoEntry>,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn select_demonstration<S: DemoScorer + ?Sized, R: Rng + ?Sized>(
    pool: &DemoPool,
    input: &Instance,
    scorer: &S,
    rng: &mut R,
) -> Result<Demonstration, DemoError> {
    let scores = pool.score_all(input, scorer)?;
    let mut entries = Vec::with_capacity(pool.per_feature.len());
    for feature in pool.per_feature.keys() {
        let ranked = pool.ranked(feature, &scores)?;
        let keep = survivors(ranked.len(), pool.filtering_enabled(feature));
        if keep == 0 {
            return Err(DemoError::EmptySurvivors(feature.clone()));
        }
        let pick = ranked[rng.gen_range(0..keep)];
        entries.push(DemoEntry {
            feature: feature.clone(),
            example: pool.examples[pick.index].clone(),
            pool_index: pick.index,
            score: pick.score,
        });
    }
    // stable: equal scores keep feature order
    entries.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(Demonstration { entries })
}

/// Renders one example block: the sentence, then `"<span> is [<F>]."` per markup.
pub fn render_entry(entry: &DemoEntry) -> Result<String, DemoError> {
    let ex = &entry.example;
    if !ex.markups().iter().any(|m| m.feature == entry.feature) {
        return Err(DemoError::MissingFeature { id: ex.id.clone(), feature: entry.feature.clone() });
    }
    let mut out = ex.text();
    for m in ex.markups() {
        out.push_str(&format!(" {} is [{}].", m.text, m.feature));
    }
    Ok(out)
}

/// Template function over a whole demonstration; blocks joined by `" [SEP] "`.
pub fn render_template(demonstration: &Demonstration) -> Result<String, DemoError> {
    let blocks = demonstration.entries.iter().map(render_entry).collect::<Result<Vec<_>, _>>()?;
    Ok(blocks.join(&format!(" {SEPARATOR} ")))
}

/// An input concatenated with a rendered demonstration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemonstratedInput {
    pub input: Instance,
    pub demonstration: Demonstration,
    pub rendered: String,
    /// Byte range of each input token within `rendered`.
    pub token_spans: Vec<Range<usize>>,
}

impl DemonstratedInput {
    /// Every rendered `(span text, feature)` clause, in rendering order.
    pub fn demo_spans(&self) -> Vec<(&str, &FeatureLabel)> {
        self.demonstration
            .entries
            .iter()
            .flat_map(|e| e.example.markups().iter().map(|m| (m.text.as_str(), &m.feature)))
            .collect()
    }

    /// Text of input token `i`, read back from the rendered string.
    pub fn input_token(&self, i: usize) -> &str {
        &self.rendered[self.token_spans[i].clone()]
    }
}

pub fn demonstrated_input(input: &Instance, demonstration: &Demonstration) -> Result<DemonstratedInput, DemoError> {
    let mut rendered = String::new();
    let mut token_spans = Vec::with_capacity(input.len());
    for (i, tok) in input.tokens().iter().enumerate() {
        if i > 0 {
            rendered.push(' ');
        }
        let start = rendered.len();
        rendered.push_str(tok);
        token_spans.push(start..rendered.len());
    }
    if !demonstration.is_empty() {
        rendered.push_str(&format!(" {SEPARATOR} "));
        rendered.push_str(&render_template(demonstration)?);
    }
    Ok(DemonstratedInput { input: input.clone(), demonstration: demonstration.clone(), rendered, token_spans })
}
