//! Labeled and unlabeled instances, BIO2 tags, markups, CoNLL ingestion and
//! few-shot sampling.
//!
//! Tags follow BIO2: every entity starts with `B-`, continues with `I-` of the
//! same feature, and `O` is the NIL label.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding;

/// The reserved NIL label.
pub const NIL: &str = "O";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorpusError {
    #[error("line {line}: malformed line, expected a token and a tag")]
    MalformedLine { line: usize },
    #[error("line {line}: expected {expected} columns, found {found}")]
    ColumnCount { line: usize, expected: usize, found: usize },
    #[error("line {line}: invalid tag `{tag}`")]
    InvalidTag { line: usize, tag: String },
    #[error("line {line}: `{tag}` does not continue an entity of the same feature")]
    IllegalContinuation { line: usize, tag: String },
    #[error("empty document")]
    EmptyDocument,
    #[error("invalid feature label `{0}`")]
    InvalidFeature(String),
    #[error("invalid tag `{0}`")]
    BadTag(String),
    #[error("`{tag}` at position {position} does not continue an entity of the same feature")]
    BadContinuation { position: usize, tag: String },
    #[error("{tokens} tokens but {tags} tags")]
    LengthMismatch { tokens: usize, tags: usize },
    #[error("instance `{0}` has no tokens")]
    EmptyInstance(String),
    #[error("instance `{0}` is not labeled")]
    Unlabeled(String),
    #[error("markup {start}..{end} is out of bounds or overlaps another markup")]
    BadMarkup { start: usize, end: usize },
    #[error("feature `{0}` is not in the corpus feature set")]
    UnknownFeature(String),
    #[error("k must be positive")]
    ZeroShots,
    #[error("feature `{feature}` needs {needed} training instances, only {found} carry it")]
    InsufficientInstances { feature: String, needed: usize, found: usize },
    #[error("validation needs {needed} instances, only {available} are available")]
    InsufficientValidation { needed: usize, available: usize },
}

/// An entity type such as `PER` or `LOC`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FeatureLabel(String);

impl FeatureLabel {
    pub fn new(name: impl Into<String>) -> Result<Self, CorpusError> {
        let name = name.into();
        let valid = !name.is_empty()
            && name != NIL
            && !name.chars().any(|c| c.is_whitespace() || c == '[' || c == ']');
        if valid {
            Ok(Self(name))
        } else {
            Err(CorpusError::InvalidFeature(name))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for FeatureLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for FeatureLabel {
    type Error = CorpusError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<FeatureLabel> for String {
    fn from(value: FeatureLabel) -> Self {
        value.0
    }
}

impl FromStr for FeatureLabel {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

/// A per-token BIO2 label.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Tag {
    Outside,
    Begin(FeatureLabel),
    Inside(FeatureLabel),
}

impl Tag {
    pub fn feature(&self) -> Option<&FeatureLabel> {
        match self {
            Tag::Outside => None,
            Tag::Begin(f) | Tag::Inside(f) => Some(f),
        }
    }

    pub fn is_outside(&self) -> bool {
        matches!(self, Tag::Outside)
    }

    /// Same B/I/O prefix, feature replaced.
    pub fn with_feature(&self, feature: FeatureLabel) -> Tag {
        match self {
            Tag::Outside => Tag::Outside,
            Tag::Begin(_) => Tag::Begin(feature),
            Tag::Inside(_) => Tag::Inside(feature),
        }
    }

    /// Whether `self` may legally follow `prev` under BIO2.
    pub fn may_follow(&self, prev: Option<&Tag>) -> bool {
        match self {
            Tag::Inside(f) => matches!(prev, Some(Tag::Begin(g) | Tag::Inside(g)) if g == f),
            _ => true,
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::Outside => f.write_str(NIL),
            Tag::Begin(l) => write!(f, "B-{l}"),
            Tag::Inside(l) => write!(f, "I-{l}"),
        }
    }
}

impl FromStr for Tag {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == NIL {
            return Ok(Tag::Outside);
        }
        let bad = || CorpusError::BadTag(s.to_string());
        let (prefix, name) = s.split_once('-').ok_or_else(bad)?;
        let feature = FeatureLabel::new(name).map_err(|_| bad())?;
        match prefix {
            "B" => Ok(Tag::Begin(feature)),
            "I" => Ok(Tag::Inside(feature)),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for Tag {
    type Error = CorpusError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<Tag> for String {
    fn from(value: Tag) -> Self {
        value.to_string()
    }
}

/// A labeled span `[start, end)` of an instance.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Markup {
    pub start: usize,
    pub end: usize,
    pub text: String,
    pub feature: FeatureLabel,
}

impl Markup {
    pub fn new(tokens: &[String], start: usize, end: usize, feature: FeatureLabel) -> Result<Self, CorpusError> {
        if start >= end || end > tokens.len() {
            return Err(CorpusError::BadMarkup { start, end });
        }
        Ok(Self { start, end, text: tokens[start..end].join(" "), feature })
    }
}

/// A token sequence with optional gold tags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    tokens: Vec<String>,
    tags: Option<Vec<Tag>>,
    markups: Vec<Markup>,
    /// Extra CoNLL columns between the token and the tag, kept for rendering.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    columns: Vec<Vec<String>>,
}

impl Instance {
    pub fn unlabeled(id: impl Into<String>, tokens: Vec<String>) -> Result<Self, CorpusError> {
        let id = id.into();
        if tokens.is_empty() {
            return Err(CorpusError::EmptyInstance(id));
        }
        Ok(Self { id, tokens, tags: None, markups: Vec::new(), columns: Vec::new() })
    }

    /// Builds a labeled instance; tags must be valid BIO2.
    pub fn labeled(id: impl Into<String>, tokens: Vec<String>, tags: Vec<Tag>) -> Result<Self, CorpusError> {
        let id = id.into();
        if tokens.is_empty() {
            return Err(CorpusError::EmptyInstance(id));
        }
        validate_bio(&tags)?;
        let markups = markups_from_tags(&tokens, &tags)?;
        Ok(Self { id, tokens, tags: Some(tags), markups, columns: Vec::new() })
    }

    pub fn from_markups(id: impl Into<String>, tokens: Vec<String>, markups: Vec<Markup>) -> Result<Self, CorpusError> {
        let tags = tags_from_markups(tokens.len(), &markups)?;
        Self::labeled(id, tokens, tags)
    }

    /// Convenience constructor from whitespace-separated tokens and tags.
    pub fn parse_labeled(id: impl Into<String>, tokens: &str, tags: &str) -> Result<Self, CorpusError> {
        let tokens: Vec<String> = tokens.split_whitespace().map(str::to_string).collect();
        let tags = tags.split_whitespace().map(str::parse).collect::<Result<Vec<Tag>, _>>()?;
        if tokens.len() != tags.len() {
            return Err(CorpusError::LengthMismatch { tokens: tokens.len(), tags: tags.len() });
        }
        Self::labeled(id, tokens, tags)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tags(&self) -> Option<&[Tag]> {
        self.tags.as_deref()
    }

    pub fn markups(&self) -> &[Markup] {
        &self.markups
    }

    pub fn is_labeled(&self) -> bool {
        self.tags.is_some()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens joined by single spaces.
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn extra_columns(&self) -> &[Vec<String>] {
        &self.columns
    }

    /// Copy of this instance without gold labels.
    pub fn without_labels(&self) -> Instance {
        Instance {
            id: self.id.clone(),
            tokens: self.tokens.clone(),
            tags: None,
            markups: Vec::new(),
            columns: self.columns.clone(),
        }
    }

    /// Copy of this instance carrying `tags` (BIO2-validated).
    pub fn with_tags(&self, tags: Vec<Tag>) -> Result<Instance, CorpusError> {
        if tags.len() != self.tokens.len() {
            return Err(CorpusError::LengthMismatch { tokens: self.tokens.len(), tags: tags.len() });
        }
        let mut out = Instance::labeled(self.id.clone(), self.tokens.clone(), tags)?;
        out.columns = self.columns.clone();
        Ok(out)
    }
}

/// Rejects `I-X` that does not follow `B-X` or `I-X`.
pub fn validate_bio(tags: &[Tag]) -> Result<(), CorpusError> {
    let mut prev = None;
    for (position, tag) in tags.iter().enumerate() {
        if !tag.may_follow(prev) {
            return Err(CorpusError::BadContinuation { position, tag: tag.to_string() });
        }
        prev = Some(tag);
    }
    Ok(())
}

/// Rewrites every illegal `I-X` as `B-X`.
pub fn repair_bio(tags: &[Tag]) -> Vec<Tag> {
    let mut out: Vec<Tag> = Vec::with_capacity(tags.len());
    for tag in tags {
        let fixed = match tag {
            Tag::Inside(f) if !tag.may_follow(out.last()) => Tag::Begin(f.clone()),
            _ => tag.clone(),
        };
        out.push(fixed);
    }
    out
}

/// Groups maximal BIO runs into markups. An orphan `I-X` opens a new markup.
pub fn markups_from_tags(tokens: &[String], tags: &[Tag]) -> Result<Vec<Markup>, CorpusError> {
    if tokens.len() != tags.len() {
        return Err(CorpusError::LengthMismatch { tokens: tokens.len(), tags: tags.len() });
    }
    let mut markups = Vec::new();
    let mut open: Option<(usize, &FeatureLabel)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let continues = matches!((tag, open), (Tag::Inside(f), Some((_, g))) if f == g);
        if continues {
            continue;
        }
        if let Some((start, feature)) = open.take() {
            markups.push(Markup::new(tokens, start, i, feature.clone())?);
        }
        if let Tag::Begin(f) | Tag::Inside(f) = tag {
            open = Some((i, f));
        }
    }
    if let Some((start, feature)) = open {
        markups.push(Markup::new(tokens, start, tokens.len(), feature.clone())?);
    }
    Ok(markups)
}

/// Inverse of [`markups_from_tags`] for non-overlapping markups.
pub fn tags_from_markups(len: usize, markups: &[Markup]) -> Result<Vec<Tag>, CorpusError> {
    let mut tags = vec![Tag::Outside; len];
    let mut taken = vec![false; len];
    for m in markups {
        if m.start >= m.end || m.end > len || taken[m.start..m.end].iter().any(|&t| t) {
            return Err(CorpusError::BadMarkup { start: m.start, end: m.end });
        }
        tags[m.start] = Tag::Begin(m.feature.clone());
        for i in m.start..m.end {
            taken[i] = true;
            if i > m.start {
                tags[i] = Tag::Inside(m.feature.clone());
            }
        }
    }
    Ok(tags)
}

/// Distinct features among an instance's markups.
pub fn feature_set_of(instance: &Instance) -> BTreeSet<FeatureLabel> {
    instance.markups.iter().map(|m| m.feature.clone()).collect()
}

/// Intersection over union of two feature sets; 0 when both are empty.
pub fn jaccard_of_sets(a: &BTreeSet<FeatureLabel>, b: &BTreeSet<FeatureLabel>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Feature Jaccard similarity of two labeled instances.
pub fn feature_jaccard(a: &Instance, b: &Instance) -> Result<f64, CorpusError> {
    for inst in [a, b] {
        if !inst.is_labeled() {
            return Err(CorpusError::Unlabeled(inst.id.clone()));
        }
    }
    Ok(jaccard_of_sets(&feature_set_of(a), &feature_set_of(b)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub instances: Vec<Instance>,
    pub feature_set: BTreeSet<FeatureLabel>,
}

impl Corpus {
    /// Feature set is the union of the instances' markup features.
    pub fn new(instances: Vec<Instance>) -> Self {
        let feature_set = instances.iter().flat_map(feature_set_of).collect();
        Self { instances, feature_set }
    }

    /// Corpus with an explicit feature set, which must cover every markup.
    pub fn with_feature_set(instances: Vec<Instance>, feature_set: BTreeSet<FeatureLabel>) -> Result<Self, CorpusError> {
        for inst in &instances {
            for m in inst.markups() {
                if !feature_set.contains(&m.feature) {
                    return Err(CorpusError::UnknownFeature(m.feature.to_string()));
                }
            }
        }
        Ok(Self { instances, feature_set })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ParseMode {
    /// Orphan `I-X` is an error.
    #[default]
    Strict,
    /// Orphan `I-X` is repaired to `B-X`.
    Lenient,
}

pub fn parse_conll(text: &str) -> Result<Corpus, CorpusError> {
    parse_conll_with(text, ParseMode::Strict)
}

/// Parses whitespace-column CoNLL: one token per line, tag in the last column,
/// blank lines between sentences. `-DOCSTART-` lines act as boundaries.
pub fn parse_conll_with(text: &str, mode: ParseMode) -> Result<Corpus, CorpusError> {
    struct Pending {
        tokens: Vec<String>,
        tags: Vec<Tag>,
        columns: Vec<Vec<String>>,
    }
    let mut instances = Vec::new();
    let mut pending = Pending { tokens: Vec::new(), tags: Vec::new(), columns: Vec::new() };
    let mut width: Option<usize> = None;

    let flush = |pending: &mut Pending, instances: &mut Vec<Instance>| -> Result<(), CorpusError> {
        if pending.tokens.is_empty() {
            return Ok(());
        }
        let id = format!("s{}", instances.len());
        let mut inst = Instance::labeled(id, std::mem::take(&mut pending.tokens), std::mem::take(&mut pending.tags))?;
        let columns = std::mem::take(&mut pending.columns);
        if columns.iter().any(|c| !c.is_empty()) {
            inst.columns = columns;
        }
        instances.push(inst);
        Ok(())
    };

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() || fields[0] == "-DOCSTART-" {
            flush(&mut pending, &mut instances)?;
            continue;
        }
        if fields.len() < 2 {
            return Err(CorpusError::MalformedLine { line });
        }
        match width {
            Some(expected) if expected != fields.len() => {
                return Err(CorpusError::ColumnCount { line, expected, found: fields.len() });
            }
            None => width = Some(fields.len()),
            _ => {}
        }
        let tag_str = fields[fields.len() - 1];
        let mut tag: Tag = tag_str
            .parse()
            .map_err(|_| CorpusError::InvalidTag { line, tag: tag_str.to_string() })?;
        if !tag.may_follow(pending.tags.last()) {
            match mode {
                ParseMode::Strict => {
                    return Err(CorpusError::IllegalContinuation { line, tag: tag_str.to_string() });
                }
                ParseMode::Lenient => {
                    tag = Tag::Begin(tag.feature().cloned().expect("only I- tags can be orphaned"));
                }
            }
        }
        pending.tokens.push(fields[0].to_string());
        pending.tags.push(tag);
        pending.columns.push(fields[1..fields.len() - 1].iter().map(|s| s.to_string()).collect());
    }
    flush(&mut pending, &mut instances)?;

    if instances.is_empty() {
        return Err(CorpusError::EmptyDocument);
    }
    Ok(Corpus::new(instances))
}

/// Renders `token [extra columns] tag` lines with one blank line between instances.
pub fn render_conll(corpus: &Corpus) -> Result<String, CorpusError> {
    let mut out = String::new();
    for (i, inst) in corpus.instances.iter().enumerate() {
        let tags = inst.tags().ok_or_else(|| CorpusError::Unlabeled(inst.id.clone()))?;
        if i > 0 {
            out.push('\n');
        }
        for (t, (token, tag)) in inst.tokens.iter().zip(tags).enumerate() {
            out.push_str(token);
            if let Some(cols) = inst.columns.get(t) {
                for c in cols {
                    out.push(' ');
                    out.push_str(c);
                }
            }
            out.push(' ');
            out.push_str(&tag.to_string());
            out.push('\n');
        }
    }
    Ok(out)
}

/// A k-shot training set plus a validation set of `k × |F|` instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub train: Vec<Instance>,
    pub validation: Vec<Instance>,
    pub k: usize,
    pub feature_set: BTreeSet<FeatureLabel>,
}

/// Samples training and validation sets from one corpus; validation never
/// reuses a training pick.
pub fn sample_few_shot(corpus: &Corpus, k: usize, seed: u64) -> Result<FewShotSplit, CorpusError> {
    let mut rng = seeding::rng(seed);
    let order = shuffled_indices(corpus.len(), &mut rng);
    let picks = greedy_picks(corpus, &order, k)?;
    let chosen: BTreeSet<usize> = picks.iter().copied().collect();
    let needed = k * corpus.feature_set.len();
    let remaining: Vec<usize> = order.into_iter().filter(|i| !chosen.contains(i)).collect();
    if remaining.len() < needed {
        return Err(CorpusError::InsufficientValidation { needed, available: remaining.len() });
    }
    Ok(FewShotSplit {
        train: picks.iter().map(|&i| corpus.instances[i].clone()).collect(),
        validation: remaining[..needed].iter().map(|&i| corpus.instances[i].clone()).collect(),
        k,
        feature_set: corpus.feature_set.clone(),
    })
}

/// Samples training instances from `train_source` and validation instances from
/// a separate `validation_source`, irrespective of their features.
pub fn sample_few_shot_from(
    train_source: &Corpus,
    validation_source: &Corpus,
    k: usize,
    seed: u64,
) -> Result<FewShotSplit, CorpusError> {
    let mut rng = seeding::rng(seed);
    let order = shuffled_indices(train_source.len(), &mut rng);
    let picks = greedy_picks(train_source, &order, k)?;
    let needed = k * train_source.feature_set.len();
    let valid_order = shuffled_indices(validation_source.len(), &mut rng);
    if valid_order.len() < needed {
        return Err(CorpusError::InsufficientValidation { needed, available: valid_order.len() });
    }
    Ok(FewShotSplit {
        train: picks.iter().map(|&i| train_source.instances[i].clone()).collect(),
        validation: valid_order[..needed].iter().map(|&i| validation_source.instances[i].clone()).collect(),
        k,
        feature_set: train_source.feature_set.clone(),
    })
}

fn shuffled_indices(n: usize, rng: &mut seeding::Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

// Features in sorted order; an instance already picked for an earlier feature
// counts toward every feature it carries.
fn greedy_picks(corpus: &Corpus, order: &[usize], k: usize) -> Result<Vec<usize>, CorpusError> {
    if k == 0 {
        return Err(CorpusError::ZeroShots);
    }
    let sets: Vec<BTreeSet<FeatureLabel>> = corpus.instances.iter().map(feature_set_of).collect();
    let mut chosen = vec![false; corpus.len()];
    let mut picks: Vec<usize> = Vec::new();
    for feature in &corpus.feature_set {
        let mut count = picks.iter().filter(|&&i| sets[i].contains(feature)).count();
        for &i in order {
            if count >= k {
                break;
            }
            if !chosen[i] && sets[i].contains(feature) {
                chosen[i] = true;
                picks.push(i);
                count += 1;
            }
        }
        if count < k {
            return Err(CorpusError::InsufficientInstances { feature: feature.to_string(), needed: k, found: count });
        }
    }
    Ok(picks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(name: &str) -> FeatureLabel {
        FeatureLabel::new(name).unwrap()
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn tags(s: &str) -> Vec<Tag> {
        s.split_whitespace().map(|t| t.parse().unwrap()).collect()
    }

    const MARY: &str = "Mary B-PER\ntraveled O\nto O\nNew B-LOC\nYork I-LOC\n";

    #[test]
    fn parses_the_mary_sentence() {
        let corpus = parse_conll(MARY).unwrap();
        assert_eq!(corpus.len(), 1);
        let m = corpus.instances[0].markups();
        assert_eq!(m.len(), 2);
        assert_eq!((m[0].text.as_str(), m[0].feature.as_str(), m[0].start, m[0].end), ("Mary", "PER", 0, 1));
        assert_eq!((m[1].text.as_str(), m[1].feature.as_str(), m[1].start, m[1].end), ("New York", "LOC", 3, 5));
        assert_eq!(corpus.feature_set, [f("LOC"), f("PER")].into_iter().collect());
    }

    #[test]
    fn all_nil_and_separators() {
        let corpus = parse_conll("a O\nb O\n").unwrap();
        assert_eq!(corpus.len(), 1);
        assert!(corpus.instances[0].markups().is_empty());
        assert!(corpus.feature_set.is_empty());

        let two = parse_conll("a O\n\n\nb B-PER\n").unwrap();
        assert_eq!(two.len(), 2);
        assert_eq!(two.instances[1].id, "s1");
    }

    #[test]
    fn parse_errors() {
        assert_eq!(parse_conll(""), Err(CorpusError::EmptyDocument));
        assert_eq!(parse_conll("\n\n  \n"), Err(CorpusError::EmptyDocument));
        assert_eq!(parse_conll("a O\nlonely\n"), Err(CorpusError::MalformedLine { line: 2 }));
        assert_eq!(
            parse_conll("a NN O\nb O\n"),
            Err(CorpusError::ColumnCount { line: 2, expected: 3, found: 2 })
        );
        assert_eq!(parse_conll("a X-PER\n"), Err(CorpusError::InvalidTag { line: 1, tag: "X-PER".into() }));
        assert_eq!(
            parse_conll("a O\nb I-PER\n"),
            Err(CorpusError::IllegalContinuation { line: 2, tag: "I-PER".into() })
        );
        assert!(parse_conll("a B-LOC\nb I-PER\n").is_err());
    }

    #[test]
    fn lenient_mode_repairs_orphans() {
        let corpus = parse_conll_with("a O\nb I-PER\nc I-PER\n", ParseMode::Lenient).unwrap();
        assert_eq!(corpus.instances[0].tags().unwrap(), tags("O B-PER I-PER").as_slice());
        assert_eq!(corpus.instances[0].markups()[0].text, "b c");
    }

    #[test]
    fn extra_columns_survive_rendering() {
        let text = "EU NNP B-ORG\nrejects VBZ O\n\nPeter NNP B-PER\n";
        let corpus = parse_conll(text).unwrap();
        assert_eq!(corpus.instances[0].extra_columns()[0], vec!["NNP".to_string()]);
        assert_eq!(render_conll(&corpus).unwrap(), text);
    }

    #[test]
    fn docstart_is_a_boundary() {
        let corpus = parse_conll("-DOCSTART- -X- O\n\nA B-PER\n\n-DOCSTART- -X- O\nB O\n").unwrap();
        assert_eq!(corpus.len(), 2);
    }

    #[test]
    fn render_examples() {
        let corpus = parse_conll(MARY).unwrap();
        assert_eq!(render_conll(&corpus).unwrap(), MARY);
        assert_eq!(render_conll(&Corpus::new(vec![])).unwrap(), "");

        let two = parse_conll("a O\n\nb B-PER\n").unwrap();
        let out = render_conll(&two).unwrap();
        assert_eq!(out.lines().filter(|l| l.is_empty()).count(), 1);

        let unlabeled = Corpus::new(vec![Instance::unlabeled("u", toks("x y")).unwrap()]);
        assert_eq!(render_conll(&unlabeled), Err(CorpusError::Unlabeled("u".into())));
    }

    #[test]
    fn markups_from_tags_examples() {
        let t = toks("Mary traveled to New York");
        let m = markups_from_tags(&t, &tags("B-PER O O B-LOC I-LOC")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!((m[1].start, m[1].end, m[1].text.as_str()), (3, 5, "New York"));

        assert!(markups_from_tags(&toks("a b"), &tags("O O")).unwrap().is_empty());

        let adjacent = markups_from_tags(&toks("a b"), &tags("B-PER B-PER")).unwrap();
        assert_eq!(adjacent.len(), 2);
        assert_eq!((adjacent[0].start, adjacent[0].end), (0, 1));
        assert_eq!((adjacent[1].start, adjacent[1].end), (1, 2));

        assert_eq!(
            markups_from_tags(&toks("a b"), &tags("O")),
            Err(CorpusError::LengthMismatch { tokens: 2, tags: 1 })
        );
    }

    #[test]
    fn tags_from_markups_rejects_overlap() {
        let t = toks("a b c");
        let m1 = Markup::new(&t, 0, 2, f("PER")).unwrap();
        let m2 = Markup::new(&t, 1, 3, f("LOC")).unwrap();
        assert!(tags_from_markups(3, &[m1.clone(), m2]).is_err());
        assert_eq!(tags_from_markups(3, &[m1]).unwrap(), tags("B-PER I-PER O"));
    }

    #[test]
    fn feature_sets_and_jaccard() {
        let mary = Instance::parse_labeled("m", "Mary traveled to New York", "B-PER O O B-LOC I-LOC").unwrap();
        assert_eq!(feature_set_of(&mary), [f("PER"), f("LOC")].into_iter().collect());
        let none = Instance::parse_labeled("n", "a b", "O O").unwrap();
        assert!(feature_set_of(&none).is_empty());
        let pers = Instance::parse_labeled("p", "A b C d E", "B-PER O B-PER O B-PER").unwrap();
        assert_eq!(feature_set_of(&pers).len(), 1);

        let loc_org = Instance::parse_labeled("lo", "Paris IBM", "B-LOC B-ORG").unwrap();
        let per = Instance::parse_labeled("p1", "Ann", "B-PER").unwrap();
        let loc = Instance::parse_labeled("l1", "Rome", "B-LOC").unwrap();
        assert_eq!(feature_jaccard(&mary, &mary).unwrap(), 1.0);
        assert_eq!(feature_jaccard(&per, &loc).unwrap(), 0.0);
        assert_eq!(feature_jaccard(&mary, &loc_org).unwrap(), 1.0 / 3.0);
        assert_eq!(feature_jaccard(&none, &none).unwrap(), 0.0);

        let unl = Instance::unlabeled("u", toks("x")).unwrap();
        assert_eq!(feature_jaccard(&mary, &unl), Err(CorpusError::Unlabeled("u".into())));
    }

    #[test]
    fn feature_label_validation() {
        assert!(FeatureLabel::new("").is_err());
        assert!(FeatureLabel::new("O").is_err());
        assert!(FeatureLabel::new("A B").is_err());
        assert!(FeatureLabel::new("[X]").is_err());
        assert!(FeatureLabel::new("LEGAL-NORM").is_ok());
        assert_eq!("B-LEGAL-NORM".parse::<Tag>().unwrap(), Tag::Begin(f("LEGAL-NORM")));
    }

    #[test]
    fn repair_turns_orphans_into_begins() {
        assert_eq!(repair_bio(&tags("I-PER I-PER O I-LOC B-PER I-LOC")), tags("B-PER I-PER O B-LOC B-PER B-LOC"));
    }

    fn corpus_with(features: &[&str]) -> Corpus {
        let instances = features
            .iter()
            .enumerate()
            .map(|(i, feat)| Instance::parse_labeled(format!("x{i}"), "w v", &format!("B-{feat} O")).unwrap())
            .collect();
        Corpus::new(instances)
    }

    #[test]
    fn few_shot_sizes() {
        let mut names = Vec::new();
        for feat in ["A", "B", "C", "D"] {
            names.extend(std::iter::repeat(feat).take(12));
        }
        let corpus = corpus_with(&names);
        let split = sample_few_shot(&corpus, 5, 11).unwrap();
        assert_eq!(split.validation.len(), 20);
        for feat in &corpus.feature_set {
            let n = split.train.iter().filter(|i| feature_set_of(i).contains(feat)).count();
            assert!(n >= 5);
        }
        let train_ids: BTreeSet<&str> = split.train.iter().map(|i| i.id.as_str()).collect();
        assert!(split.validation.iter().all(|v| !train_ids.contains(v.id.as_str())));
        assert_eq!(split, sample_few_shot(&corpus, 5, 11).unwrap());
    }

    #[test]
    fn few_shot_single_feature() {
        let corpus = corpus_with(&["PER", "PER", "PER"]);
        let split = sample_few_shot(&corpus, 1, 3).unwrap();
        assert_eq!(split.train.len(), 1);
        assert!(feature_set_of(&split.train[0]).contains(&f("PER")));
        assert_eq!(split.validation.len(), 1);
    }

    #[test]
    fn few_shot_errors() {
        let corpus = corpus_with(&["PER", "LOC", "LOC"]);
        assert_eq!(sample_few_shot(&corpus, 0, 1), Err(CorpusError::ZeroShots));
        assert!(matches!(
            sample_few_shot(&corpus, 2, 1),
            Err(CorpusError::InsufficientInstances { ref feature, .. }) if feature == "LOC" || feature == "PER"
        ));
        assert!(matches!(sample_few_shot(&corpus, 1, 1), Err(CorpusError::InsufficientValidation { .. })));
        let valid = corpus_with(&["PER", "PER"]);
        let split = sample_few_shot_from(&corpus, &valid, 1, 1).unwrap();
        assert_eq!(split.validation.len(), 2);
    }
}
