use std::collections::BTreeSet;

use demoner_core::adversarial::{apply_label_permutation, sample_label_permutation, PermutationMode};
use demoner_core::corpus::{feature_set_of, parse_conll, render_conll, repair_bio, validate_bio, Corpus, FeatureLabel, Instance, Tag};
use demoner_core::demo::{build_pool, demonstrated_input, select_demonstration, FnScorer};
use demoner_core::eval::{generate_synthetic_corpus, SyntheticSpec};
use demoner_core::seeding;
use demoner_core::tagger::{viterbi_decode, EmissionScores, LabelSet, TransitionMatrix};
use proptest::prelude::*;

const NAMES: [&str; 3] = ["PER", "LOC", "ORG"];

fn tag_of(code: u8) -> Tag {
    let f = FeatureLabel::new(NAMES[(code / 3) as usize % 3]).unwrap();
    match code % 3 {
        0 => Tag::Outside,
        1 => Tag::Begin(f),
        _ => Tag::Inside(f),
    }
}

fn instance(id: usize, codes: &[u8]) -> Instance {
    let tags = repair_bio(&codes.iter().map(|&c| tag_of(c)).collect::<Vec<_>>());
    let tokens = (0..codes.len()).map(|i| format!("tok{id}_{i}")).collect();
    Instance::labeled(format!("i{id}"), tokens, tags).unwrap()
}

fn all_features() -> BTreeSet<FeatureLabel> {
    NAMES.iter().map(|n| FeatureLabel::new(*n).unwrap()).collect()
}

proptest! {
    #[test]
    fn conll_round_trip(sentences in prop::collection::vec(prop::collection::vec(0u8..9, 1..12), 1..8)) {
        let instances: Vec<Instance> = sentences.iter().enumerate().map(|(k, s)| instance(k, s)).collect();
        let corpus = Corpus::with_feature_set(instances, all_features()).unwrap();
        let text = render_conll(&corpus).unwrap();
        let parsed = parse_conll(&text).unwrap();
        prop_assert_eq!(render_conll(&parsed).unwrap(), text);
        for (a, b) in corpus.instances.iter().zip(&parsed.instances) {
            prop_assert_eq!(a.tags(), b.tags());
            prop_assert_eq!(a.markups(), b.markups());
        }
    }

    #[test]
    fn label_swap_round_trips(codes in prop::collection::vec(0u8..9, 1..12), seed in any::<u64>()) {
        let inst = instance(0, &codes);
        let mut rng = seeding::rng(seed);
        let pi = sample_label_permutation(&all_features(), &mut rng, PermutationMode::Any).unwrap();
        prop_assert!(!pi.is_identity());
        let d = demonstrated_input(&inst, &Default::default()).unwrap();
        let (dp, gp) = apply_label_permutation(&d, inst.tags().unwrap(), &pi).unwrap();
        validate_bio(&gp).unwrap();
        // spans stay where they were
        let spans = |t: &[Tag]| t.iter().map(|x| x.is_outside()).collect::<Vec<_>>();
        prop_assert_eq!(spans(&gp), spans(inst.tags().unwrap()));
        let (back, gb) = apply_label_permutation(&dp, &gp, &pi.inverse()).unwrap();
        prop_assert_eq!(back.rendered, d.rendered);
        prop_assert_eq!(gb.as_slice(), inst.tags().unwrap());
    }

    #[test]
    fn selection_covers_every_feature(seed in any::<u64>(), salt in any::<u64>()) {
        let mut spec = SyntheticSpec::vocabulary_determined();
        spec.instances = 60;
        let corpus = generate_synthetic_corpus(&spec, 3).unwrap();
        let pool = build_pool(corpus.instances[..40].to_vec(), &corpus.feature_set).unwrap();
        let scorer = FnScorer(move |a: &Instance, b: &Instance| {
            ((seeding::derive(salt, a.len() as u64 * 97 + b.len() as u64)) % 7) as f64
        });
        let input = &corpus.instances[40 + (seed % 20) as usize];
        let demo = select_demonstration(&pool, input, &scorer, &mut seeding::rng(seed)).unwrap();
        let covered: BTreeSet<FeatureLabel> = demo.entries.iter().map(|e| e.feature.clone()).collect();
        prop_assert_eq!(&covered, &corpus.feature_set);
        for e in &demo.entries {
            prop_assert!(feature_set_of(&e.example).contains(&e.feature));
        }
        prop_assert!(demo.entries.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn viterbi_respects_forbidden_transitions(
        rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 7), 1..8),
    ) {
        let labels = LabelSet::from_features(&all_features());
        let mut transitions = TransitionMatrix::uniform(labels.clone());
        // strict BIO: I-x only after B-x or I-x
        for to in labels.tags() {
            if let Tag::Inside(f) = to {
                for from in labels.tags() {
                    if from.feature() != Some(f) {
                        transitions.forbid(from, to).unwrap();
                    }
                }
                let start = transitions.start_state();
                let idx = labels.index_of(to).unwrap();
                transitions.set_log_prob(start, idx, f64::NEG_INFINITY);
            }
        }
        let path = viterbi_decode(&EmissionScores::from_logits(labels, rows).unwrap(), &transitions).unwrap();
        prop_assert!(validate_bio(&path).is_ok(), "{:?}", path);
    }
}
