//! The stages behind each subcommand, usable without going through argv.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use demoner_core::corpus::{
    parse_conll, render_conll, sample_few_shot, sample_few_shot_from, Corpus, FeatureLabel, FewShotSplit,
    Instance,
};
use demoner_core::demo::{build_pool, DemoPool};
use demoner_core::encoding::{semantic_similarity, SemanticEncoder};
use demoner_core::eval::{
    entity_f1, evaluate_predictor, generate_synthetic_corpus, permuted_rule_eval, F1Report, PredictorReport,
    SyntheticSpec,
};
use demoner_core::featsim::{train_featsim, DualScorer, FeatureSimilarityModel};
use demoner_core::inference::{predictions_to_conll, predictions_to_jsonl, tag_all, Prediction};
use demoner_core::tagger::{train, ReferenceTagger, SavedTagger, TaggerModel, TrainingRun};
use serde::{Deserialize, Serialize};

use crate::config::{require, RunConfig};
use crate::error::CliError;
use crate::manifest::Manifest;

pub const TAGGER_FILE: &str = "tagger.json";
pub const FEATSIM_FILE: &str = "featsim.json";
pub const POOL_FILE: &str = "pool.conll";
pub const LOSSES_FILE: &str = "losses.json";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const TAG_MANIFEST_FILE: &str = "tag-manifest.toml";
pub const PREDICTIONS_CONLL: &str = "predictions.conll";
pub const PREDICTIONS_JSONL: &str = "predictions.jsonl";

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(CliError::io(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(CliError::io(path))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes")
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))
}

pub fn read_corpus(path: &Path) -> Result<Corpus, CliError> {
    parse_conll(&read_text(path)?).map_err(|source| CliError::Corpus { path: path.to_path_buf(), source })
}

/// Reads sentences to tag: labeled CoNLL, or one token per line with no tag
/// column at all.
pub fn read_inputs(path: &Path) -> Result<Corpus, CliError> {
    let text = read_text(path)?;
    let columns: Vec<usize> =
        text.lines().map(|l| l.split_whitespace().count()).filter(|&n| n > 0).collect();
    if columns.is_empty() || !columns.iter().all(|&n| n == 1) {
        return parse_conll(&text).map_err(|source| CliError::Corpus { path: path.to_path_buf(), source });
    }
    let mut instances = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    for line in text.lines().chain(std::iter::once("")) {
        match line.split_whitespace().next() {
            Some(tok) if tok != "-DOCSTART-" => tokens.push(tok.to_string()),
            _ if !tokens.is_empty() => {
                let id = format!("s{}", instances.len());
                instances.push(Instance::unlabeled(id, std::mem::take(&mut tokens))?);
            }
            _ => {}
        }
    }
    Ok(Corpus::new(instances))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub instances: usize,
    pub tokens: usize,
    pub features: usize,
    /// Instances without any markup.
    pub nil_instances: usize,
    pub markups: BTreeMap<FeatureLabel, usize>,
}

impl CorpusSummary {
    pub fn of(corpus: &Corpus) -> Self {
        let mut markups: BTreeMap<FeatureLabel, usize> = corpus.feature_set.iter().map(|f| (f.clone(), 0)).collect();
        for inst in &corpus.instances {
            for m in inst.markups() {
                *markups.entry(m.feature.clone()).or_default() += 1;
            }
        }
        CorpusSummary {
            instances: corpus.len(),
            tokens: corpus.instances.iter().map(Instance::len).sum(),
            features: corpus.feature_set.len(),
            nil_instances: corpus.instances.iter().filter(|i| i.markups().is_empty()).count(),
            markups,
        }
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "instances  {}\ntokens     {}\nfeatures   {}\nnil        {}\n\n{:<12}{:>8}\n",
            self.instances, self.tokens, self.features, self.nil_instances, "feature", "markups"
        );
        for (f, n) in &self.markups {
            out.push_str(&format!("{:<12}{:>8}\n", f.as_str(), n));
        }
        out
    }
}

pub fn cmd_ingest(input: &Path, output: Option<&Path>) -> Result<CorpusSummary, CliError> {
    let summary = CorpusSummary::of(&read_corpus(input)?);
    if let Some(out) = output {
        write_text(out, &to_json(&summary))?;
    }
    Ok(summary)
}

/// Everything produced by one training run.
pub struct Trained {
    pub split: FewShotSplit,
    pub featsim: Arc<FeatureSimilarityModel>,
    pub pool: DemoPool,
    pub run: TrainingRun,
}

impl Trained {
    pub fn scorer(&self, config: &RunConfig, encoder: Arc<dyn SemanticEncoder>) -> Result<DualScorer, CliError> {
        Ok(DualScorer::new(Arc::clone(&self.featsim), encoder, config.dual())?)
    }

    pub fn saved_tagger(&self, config: &RunConfig) -> SavedTagger {
        SavedTagger {
            tagger: self.run.model.clone(),
            transitions: self.run.transitions.clone(),
            config: Some(config.train_config()),
        }
    }
}

/// Few-shot split, predictor training and pool construction: the stages
/// that do not depend on γ, α or β.
pub struct Prepared {
    pub split: FewShotSplit,
    pub featsim: Arc<FeatureSimilarityModel>,
    pub pool: DemoPool,
}

pub fn prepare(
    config: &RunConfig,
    encoder: &dyn SemanticEncoder,
    train_corpus: &Corpus,
    validation_corpus: Option<&Corpus>,
) -> Result<Prepared, CliError> {
    let split = match validation_corpus {
        Some(v) => sample_few_shot_from(train_corpus, v, config.k_shot, config.seeds.split)?,
        None => sample_few_shot(train_corpus, config.k_shot, config.seeds.split)?,
    };
    let featsim = Arc::new(train_featsim(&split.train, encoder, &config.featsim_config())?);
    let pool = build_pool(split.train.clone(), &split.feature_set)?;
    Ok(Prepared { split, featsim, pool })
}

pub fn train_prepared(
    config: &RunConfig,
    encoder: Arc<dyn SemanticEncoder>,
    prepared: Prepared,
) -> Result<Trained, CliError> {
    let scorer = DualScorer::new(Arc::clone(&prepared.featsim), encoder, config.dual())?;
    let model = ReferenceTagger::for_features(&prepared.split.feature_set);
    let run = train(model, &prepared.split, &prepared.pool, &scorer, &config.train_config())?;
    log::info!("trained for {} epochs, final loss {:?}", run.epoch_losses.len(), run.epoch_losses.last());
    Ok(Trained { split: prepared.split, featsim: prepared.featsim, pool: prepared.pool, run })
}

#[derive(Serialize)]
struct Losses<'a> {
    tagger: &'a [f64],
    validation_f1: &'a [f64],
    best_epoch: usize,
    featsim: &'a [f64],
}

fn load_train_corpora(config: &RunConfig) -> Result<(PathBuf, Corpus, Option<(PathBuf, Corpus)>), CliError> {
    let train_path = require(&config.paths.train, "train")?;
    let train_corpus = read_corpus(&train_path)?;
    let validation = match &config.paths.validation {
        Some(p) => Some((p.clone(), read_corpus(p)?)),
        None => None,
    };
    Ok((train_path, train_corpus, validation))
}

/// Trains the predictor and the tagger, then writes models, losses, the
/// demonstration pool and a manifest to `paths.out`.
pub fn cmd_train(config: &RunConfig) -> Result<Trained, CliError> {
    config.validate()?;
    let (train_path, train_corpus, validation) = load_train_corpora(config)?;
    let encoder = config.encoder()?;
    let prepared = prepare(config, &*encoder, &train_corpus, validation.as_ref().map(|v| &v.1))?;
    let trained = train_prepared(config, encoder, prepared)?;

    let out = &config.paths.out;
    create_dir(out)?;
    write_text(&out.join(TAGGER_FILE), &trained.saved_tagger(config).to_json())?;
    write_text(&out.join(FEATSIM_FILE), &trained.featsim.to_json())?;
    let losses = Losses {
        tagger: &trained.run.epoch_losses,
        validation_f1: &trained.run.validation_f1,
        best_epoch: trained.run.best_epoch,
        featsim: &trained.featsim.loss_curve,
    };
    write_text(&out.join(LOSSES_FILE), &to_json(&losses))?;
    let pool = Corpus::with_feature_set(trained.pool.examples().to_vec(), trained.split.feature_set.clone())?;
    write_text(&out.join(POOL_FILE), &render_conll(&pool)?)?;
    let mut inputs = vec![train_path.as_path()];
    if let Some((p, _)) = &validation {
        inputs.push(p);
    }
    Manifest::new("train", config, &inputs)?.write(&out.join(MANIFEST_FILE))?;
    Ok(trained)
}

/// A trained model directory loaded back from disk.
pub struct ModelBundle {
    pub tagger: SavedTagger,
    pub featsim: Arc<FeatureSimilarityModel>,
    pub pool: DemoPool,
}

impl ModelBundle {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let format = |path: PathBuf| move |e: serde_json::Error| CliError::Format { path, message: e.to_string() };
        let tagger_path = dir.join(TAGGER_FILE);
        let tagger = SavedTagger::from_json(&read_text(&tagger_path)?).map_err(format(tagger_path))?;
        let featsim_path = dir.join(FEATSIM_FILE);
        let featsim = FeatureSimilarityModel::from_json(&read_text(&featsim_path)?).map_err(format(featsim_path))?;
        let pool_corpus = read_corpus(&dir.join(POOL_FILE))?;
        let pool = build_pool(pool_corpus.instances, &tagger.tagger.labels().features())?;
        Ok(ModelBundle { tagger, featsim: Arc::new(featsim), pool })
    }

    pub fn scorer(&self, config: &RunConfig, encoder: Arc<dyn SemanticEncoder>) -> Result<DualScorer, CliError> {
        Ok(DualScorer::new(Arc::clone(&self.featsim), encoder, config.dual())?)
    }
}

/// Config for commands that consume a model directory: the training
/// manifest's config unless an explicit one is given.
pub fn model_config(model_dir: &Path) -> Result<RunConfig, CliError> {
    let path = model_dir.join(MANIFEST_FILE);
    if path.exists() {
        Ok(Manifest::load(&path)?.config)
    } else {
        Ok(RunConfig::default())
    }
}

fn check_labels(bundle: &ModelBundle, inputs: &Corpus) -> Result<(), CliError> {
    let known = bundle.tagger.tagger.labels().features();
    match inputs.feature_set.iter().find(|f| !known.contains(*f)) {
        Some(f) => Err(CliError::Data(format!("input label `{f}` is not in the model's label set"))),
        None => Ok(()),
    }
}

pub fn tag_corpus(
    config: &RunConfig,
    bundle: &ModelBundle,
    encoder: Arc<dyn SemanticEncoder>,
    inputs: &Corpus,
) -> Result<Vec<Prediction>, CliError> {
    check_labels(bundle, inputs)?;
    let scorer = bundle.scorer(config, encoder)?;
    let bare: Vec<Instance> = inputs.instances.iter().map(Instance::without_labels).collect();
    let tagger = &bundle.tagger;
    Ok(tag_all(&tagger.tagger, &tagger.transitions, &bare, &bundle.pool, &scorer, &config.ensemble())?)
}

/// Tags `input` with the model in `model_dir` and writes CoNLL and JSON-lines
/// predictions plus a manifest to `paths.out`.
pub fn cmd_tag(config: &RunConfig, model_dir: &Path, input: &Path) -> Result<Vec<Prediction>, CliError> {
    config.validate()?;
    let bundle = ModelBundle::load(model_dir)?;
    let inputs = read_inputs(input)?;
    let predictions = tag_corpus(config, &bundle, config.encoder()?, &inputs)?;
    let out = &config.paths.out;
    create_dir(out)?;
    write_text(&out.join(PREDICTIONS_CONLL), &predictions_to_conll(&predictions))?;
    write_text(&out.join(PREDICTIONS_JSONL), &predictions_to_jsonl(&predictions))?;
    let model_files: Vec<PathBuf> =
        [TAGGER_FILE, FEATSIM_FILE, POOL_FILE].iter().map(|f| model_dir.join(f)).collect();
    let mut hashed: Vec<&Path> = vec![input];
    hashed.extend(model_files.iter().map(PathBuf::as_path));
    Manifest::new("tag", config, &hashed)?.write(&out.join(TAG_MANIFEST_FILE))?;
    Ok(predictions)
}

/// Scores a predictions file (CoNLL) against gold CoNLL.
pub fn cmd_evaluate(gold: &Path, pred: &Path) -> Result<F1Report, CliError> {
    let gold = read_corpus(gold)?;
    let pred_corpus = read_corpus(pred)?;
    let predictions: Vec<Prediction> = pred_corpus
        .instances
        .iter()
        .map(|p| {
            let tags = p.tags().map(<[_]>::to_vec).unwrap_or_default();
            Prediction::new(p.id.clone(), p.tokens().to_vec(), tags, vec![])
        })
        .collect();
    Ok(entity_f1(&gold.instances, &predictions)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatsimEvaluation {
    pub predictor: PredictorReport,
    /// Cosine of the configured encoder alone, for comparison.
    pub semantic: PredictorReport,
}

/// Trains the predictor on the k-shot split and evaluates it on the test file,
/// or on the training corpus minus the split when no test file is set.
pub fn cmd_eval_featsim(config: &RunConfig, trials: usize) -> Result<FeatsimEvaluation, CliError> {
    config.validate()?;
    let (_, train_corpus, _) = load_train_corpora(config)?;
    let split = sample_few_shot(&train_corpus, config.k_shot, config.seeds.split)?;
    let encoder = config.encoder()?;
    let model = train_featsim(&split.train, &*encoder, &config.featsim_config())?;
    let test: Vec<Instance> = match &config.paths.test {
        Some(p) => read_corpus(p)?.instances,
        None => {
            let used: std::collections::HashSet<&str> = split.train.iter().map(|i| i.id.as_str()).collect();
            train_corpus.instances.iter().filter(|i| !used.contains(i.id.as_str())).cloned().collect()
        }
    };
    let fe = |a: &Instance, b: &Instance| model.predict(&a.text(), &b.text(), &*encoder).unwrap_or(f64::NAN);
    let se = |a: &Instance, b: &Instance| semantic_similarity(&*encoder, &a.text(), &b.text()).unwrap_or(f64::NAN);
    let seed = config.seeds.inference;
    let report = FeatsimEvaluation {
        predictor: evaluate_predictor(&fe, &test, &split.train, trials, seed)?,
        semantic: evaluate_predictor(&se, &test, &split.train, trials, seed)?,
    };
    let out = &config.paths.out;
    create_dir(out)?;
    write_text(&out.join("featsim-report.json"), &to_json(&report))?;
    Ok(report)
}

/// Candidate values per hyperparameter. An omitted axis uses the config value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub gamma: Option<Vec<f64>>,
    pub alpha: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
    /// Also score validation instances under random label permutations.
    pub permuted: bool,
    /// Permutation draws per validation instance.
    pub draws: Option<usize>,
}

impl GridSpec {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        toml::from_str(&read_text(path)?).map_err(|e| CliError::Format { path: path.to_path_buf(), message: e.to_string() })
    }

    /// Grid points in gamma-major order.
    pub fn points(&self, config: &RunConfig) -> Result<Vec<(f64, f64, f64)>, CliError> {
        let axis = |v: &Option<Vec<f64>>, default: f64, name: &str| match v {
            Some(v) if v.is_empty() => Err(CliError::Usage(format!("grid axis `{name}` is empty"))),
            Some(v) => Ok(v.clone()),
            None => Ok(vec![default]),
        };
        let gammas = axis(&self.gamma, config.gamma, "gamma")?;
        let alphas = axis(&self.alpha, config.alpha, "alpha")?;
        let betas = axis(&self.beta, config.beta, "beta")?;
        let mut points = Vec::new();
        for &g in &gammas {
            for &a in &alphas {
                for &b in &betas {
                    points.push((g, a, b));
                }
            }
        }
        Ok(points)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Ensemble F1 on the validation set.
    pub validation_f1: f64,
    /// F1 under permuted demonstration labels, when requested.
    pub permuted_f1: Option<f64>,
    /// Selection criterion: the mean of the two F1 values when both exist.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
    /// Index of the best row; ties go to the earliest.
    pub best: usize,
}

impl GridReport {
    pub fn best_row(&self) -> &GridRow {
        &self.rows[self.best]
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:>7}  {:>7}  {:>7}  {:>9}  {:>9}  {:>7}\n", "gamma", "alpha", "beta", "valid_f1", "perm_f1", "score");
        for (i, r) in self.rows.iter().enumerate() {
            let perm = r.permuted_f1.map_or("-".to_string(), |p| format!("{p:.4}"));
            let mark = if i == self.best { " *" } else { "" };
            out.push_str(&format!(
                "{:>7.3}  {:>7.3}  {:>7.3}  {:>9.4}  {:>9}  {:>7.4}{mark}\n",
                r.gamma, r.alpha, r.beta, r.validation_f1, perm, r.score
            ));
        }
        out
    }
}

pub const DEFAULT_GRID_DRAWS: usize = 2;

/// Trains one tagger per grid point on a shared split and predictor, and
/// ranks the points by validation F1.
pub fn cmd_grid_search(config: &RunConfig, grid: &GridSpec) -> Result<GridReport, CliError> {
    config.validate()?;
    let points = grid.points(config)?;
    let (_, train_corpus, validation) = load_train_corpora(config)?;
    let encoder = config.encoder()?;
    let base = prepare(config, &*encoder, &train_corpus, validation.as_ref().map(|v| &v.1))?;
    let mut rows = Vec::with_capacity(points.len());
    for (gamma, alpha, beta) in points {
        let point = RunConfig { gamma, alpha, beta, ..config.clone() };
        point.validate()?;
        let prepared = Prepared { split: base.split.clone(), featsim: Arc::clone(&base.featsim), pool: base.pool.clone() };
        let trained = train_prepared(&point, Arc::clone(&encoder), prepared)?;
        let scorer = trained.scorer(&point, Arc::clone(&encoder))?;
        let validation = &trained.split.validation;
        let bare: Vec<Instance> = validation.iter().map(Instance::without_labels).collect();
        let preds =
            tag_all(&trained.run.model, &trained.run.transitions, &bare, &trained.pool, &scorer, &point.ensemble())?;
        let validation_f1 = entity_f1(validation, &preds)?.f1;
        let permuted_f1 = if grid.permuted {
            let draws = grid.draws.unwrap_or(DEFAULT_GRID_DRAWS);
            let r = permuted_rule_eval(
                &trained.run.model,
                &trained.run.transitions,
                validation,
                &trained.pool,
                &scorer,
                draws,
                point.seeds.inference,
            )?;
            Some(r.f1)
        } else {
            None
        };
        let score = permuted_f1.map_or(validation_f1, |p| (validation_f1 + p) / 2.0);
        log::info!("grid point gamma={gamma} alpha={alpha} beta={beta}: score {score:.4}");
        rows.push(GridRow { gamma, alpha, beta, validation_f1, permuted_f1, score });
    }
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.score > rows[best].score {
            best = i;
        }
    }
    let report = GridReport { rows, best };
    let out = &config.paths.out;
    create_dir(out)?;
    write_text(&out.join("grid.json"), &to_json(&report))?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    VocabularyDetermined,
    PermutedLabel,
    InfixFamilies,
}

impl Preset {
    pub fn spec(self) -> SyntheticSpec {
        match self {
            Preset::VocabularyDetermined => SyntheticSpec::vocabulary_determined(),
            Preset::PermutedLabel => SyntheticSpec::permuted_label(),
            Preset::InfixFamilies => SyntheticSpec::infix_families(),
        }
    }
}

pub fn cmd_gen_synthetic(spec: &SyntheticSpec, seed: u64, output: &Path) -> Result<CorpusSummary, CliError> {
    let corpus = generate_synthetic_corpus(spec, seed)?;
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(output, &render_conll(&corpus)?)?;
    Ok(CorpusSummary::of(&corpus))
}
