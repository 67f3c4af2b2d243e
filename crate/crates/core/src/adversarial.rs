//! Adversarial demonstrations: example permutation, label permutation and the
//! combined training loss.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{FeatureLabel, Instance, Tag};
use crate::demo::{demonstrated_input, DemoError, Demonstration, DemonstratedInput};

#[derive(Debug, Error)]
pub enum AdversarialError {
    #[error("label permutation needs at least 2 features, got {0}")]
    TooFewFeatures(usize),
    #[error("feature `{0}` is outside the permutation's domain")]
    OutOfDomain(FeatureLabel),
    #[error("mapping is not a bijection over its domain")]
    NotBijective,
    #[error("permutation domains differ")]
    DomainMismatch,
    #[error("alpha and beta must lie in [0, 1], got ({alpha}, {beta})")]
    BadWeights { alpha: f64, beta: f64 },
    #[error("loss values must be finite and non-negative")]
    NonFiniteLoss,
    #[error(transparent)]
    Demo(#[from] DemoError),
}

/// Which label permutations the sampler draws.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PermutationMode {
    /// Uniform over every non-identity permutation.
    #[default]
    Any,
    /// Uniform over transpositions (a single pair swapped).
    Swap,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdlConfig {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub mode: PermutationMode,
}

impl Default for AdlConfig {
    fn default() -> Self {
        AdlConfig { alpha: 0.9, beta: 0.4, mode: PermutationMode::Any }
    }
}

impl AdlConfig {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, AdversarialError> {
        let config = AdlConfig { alpha, beta, mode: PermutationMode::Any };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), AdversarialError> {
        if (0.0..=1.0).contains(&self.alpha) && (0.0..=1.0).contains(&self.beta) {
            Ok(())
        } else {
            Err(AdversarialError::BadWeights { alpha: self.alpha, beta: self.beta })
        }
    }

    /// Weights of the (main, example-permuted, label-permuted) terms.
    pub fn weights(&self) -> (f64, f64, f64) {
        (self.alpha, (1.0 - self.alpha) * (1.0 - self.beta), (1.0 - self.alpha) * self.beta)
    }
}

/// α·l_m + (1−α)·((1−β)·l_e + β·l_l).
pub fn adl_loss(l_m: f64, l_e: f64, l_l: f64, config: &AdlConfig) -> Result<f64, AdversarialError> {
    config.validate()?;
    if [l_m, l_e, l_l].iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(AdversarialError::NonFiniteLoss);
    }
    Ok(config.alpha * l_m + (1.0 - config.alpha) * ((1.0 - config.beta) * l_e + config.beta * l_l))
}

/// Shuffles the entries, rejecting the original order when another exists.
pub fn permute_examples<R: Rng + ?Sized>(demonstration: &Demonstration, rng: &mut R) -> Demonstration {
    let n = demonstration.entries.len();
    if n < 2 {
        return demonstration.clone();
    }
    let identity: Vec<usize> = (0..n).collect();
    let mut order = identity.clone();
    while order == identity {
        order.shuffle(rng);
    }
    Demonstration { entries: order.into_iter().map(|i| demonstration.entries[i].clone()).collect() }
}

/// A bijection over a feature set; the outside tag is always fixed.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabelPermutation {
    mapping: BTreeMap<FeatureLabel, FeatureLabel>,
}

impl LabelPermutation {
    pub fn new(mapping: BTreeMap<FeatureLabel, FeatureLabel>) -> Result<Self, AdversarialError> {
        let image: BTreeSet<&FeatureLabel> = mapping.values().collect();
        let domain: BTreeSet<&FeatureLabel> = mapping.keys().collect();
        if image != domain {
            return Err(AdversarialError::NotBijective);
        }
        Ok(LabelPermutation { mapping })
    }

    pub fn identity(features: &BTreeSet<FeatureLabel>) -> Self {
        LabelPermutation { mapping: features.iter().map(|f| (f.clone(), f.clone())).collect() }
    }

    pub fn domain(&self) -> impl Iterator<Item = &FeatureLabel> {
        self.mapping.keys()
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().all(|(a, b)| a == b)
    }

    pub fn apply(&self, feature: &FeatureLabel) -> Result<FeatureLabel, AdversarialError> {
        self.mapping.get(feature).cloned().ok_or_else(|| AdversarialError::OutOfDomain(feature.clone()))
    }

    pub fn map_tag(&self, tag: &Tag) -> Result<Tag, AdversarialError> {
        match tag.feature() {
            None => Ok(tag.clone()),
            Some(f) => Ok(tag.with_feature(self.apply(f)?)),
        }
    }

    pub fn map_tags(&self, tags: &[Tag]) -> Result<Vec<Tag>, AdversarialError> {
        tags.iter().map(|t| self.map_tag(t)).collect()
    }

    pub fn inverse(&self) -> Self {
        LabelPermutation { mapping: self.mapping.iter().map(|(a, b)| (b.clone(), a.clone())).collect() }
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &LabelPermutation) -> Result<Self, AdversarialError> {
        if self.mapping.keys().ne(first.mapping.keys()) {
            return Err(AdversarialError::DomainMismatch);
        }
        let mapping = first
            .mapping
            .iter()
            .map(|(a, b)| Ok((a.clone(), self.apply(b)?)))
            .collect::<Result<_, AdversarialError>>()?;
        Ok(LabelPermutation { mapping })
    }

    /// Remaps an instance's labels; spans and outside positions are unchanged.
    pub fn map_instance(&self, instance: &Instance) -> Result<Instance, AdversarialError> {
        let Some(tags) = instance.tags() else {
            return Ok(instance.clone());
        };
        let tags = self.map_tags(tags)?;
        Ok(instance.with_tags(tags).expect("relabeling preserves BIO validity"))
    }

    /// Remaps entry features and example annotations on the structured form.
    pub fn map_demonstration(&self, demonstration: &Demonstration) -> Result<Demonstration, AdversarialError> {
        let entries = demonstration
            .entries
            .iter()
            .map(|e| {
                let mut e = e.clone();
                e.feature = self.apply(&e.feature)?;
                e.example = self.map_instance(&e.example)?;
                Ok(e)
            })
            .collect::<Result<_, AdversarialError>>()?;
        Ok(Demonstration { entries })
    }
}

/// Uniform over non-identity permutations of `features` (or over
/// transpositions in [`PermutationMode::Swap`]).
pub fn sample_label_permutation<R: Rng + ?Sized>(
    features: &BTreeSet<FeatureLabel>,
    rng: &mut R,
    mode: PermutationMode,
) -> Result<LabelPermutation, AdversarialError> {
    let domain: Vec<FeatureLabel> = features.iter().cloned().collect();
    let n = domain.len();
    if n < 2 {
        return Err(AdversarialError::TooFewFeatures(n));
    }
    let mut image = domain.clone();
    match mode {
        PermutationMode::Any => {
            while image == domain {
                image.shuffle(rng);
            }
        }
        PermutationMode::Swap => {
            let i = rng.gen_range(0..n);
            let j = (i + rng.gen_range(1..n)) % n;
            image.swap(i, j);
        }
    }
    Ok(LabelPermutation { mapping: domain.into_iter().zip(image).collect() })
}

/// Uniform over all permutations of `features`, identity included. Used to
/// build evaluation sets whose labels are defined by the demonstration.
pub fn sample_uniform_permutation<R: Rng + ?Sized>(features: &BTreeSet<FeatureLabel>, rng: &mut R) -> LabelPermutation {
    let domain: Vec<FeatureLabel> = features.iter().cloned().collect();
    let mut image = domain.clone();
    image.shuffle(rng);
    LabelPermutation { mapping: domain.into_iter().zip(image).collect() }
}

/// Relabels the demonstration and the gold tags with `pi`, then re-renders.
pub fn apply_label_permutation(
    d: &DemonstratedInput,
    gold_tags: &[Tag],
    pi: &LabelPermutation,
) -> Result<(DemonstratedInput, Vec<Tag>), AdversarialError> {
    let demonstration = pi.map_demonstration(&d.demonstration)?;
    let input = pi.map_instance(&d.input)?;
    let tags = pi.map_tags(gold_tags)?;
    Ok((demonstrated_input(&input, &demonstration)?, tags))
}
