//! Commands behind the `rulex` binary: corpus synthesis, EM training,
//! inference with explanations, evaluation and the oracle suites.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rulex_core::datagen::{gen_corpus, SynthConfig, RULES_FILE, VOCAB_FILE};
use rulex_core::document::read_corpus;
use rulex_core::em::{run_em, EmConfig, InferenceMode, IterationDiagnostics, Predictor};
use rulex_core::extractor::ExtractorCheckpoint;
use rulex_core::generator::GeneratorCheckpoint;
use rulex_core::metrics::{
    fact_names, read_predictions, write_predictions, GoldSet, MetricsReport, PredictionRecord, RuleExplanation,
    TripleExplanation,
};
use rulex_core::oracle::{self, OracleReport, Scope};
use rulex_core::rule::{format_rules, parse_rules};
use rulex_core::{AutoregRuleModel, Corpus, Document, ExtractorWeights, Label, RelationVocab, Rule, Triple};

pub const CONFIG_FILE: &str = "config.json";
pub const GENERATOR_FILE: &str = "generator.json";
pub const EXTRACTOR_FILE: &str = "extractor.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const LOCK_FILE: &str = ".lock";

/// Files read and written by the commands. `--out` fills the field that is
/// the running command's output.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Corpus directory: written by `synth`, read by `train`.
    pub corpus: Option<PathBuf>,
    /// Run directory: written by `train`, read by `infer`.
    pub run: Option<PathBuf>,
    /// Documents to predict on.
    pub docs: Option<PathBuf>,
    /// Predictions file: written by `infer`, read by `eval`.
    pub predictions: Option<PathBuf>,
    /// Gold documents for `eval`.
    pub gold: Option<PathBuf>,
    /// Training documents whose facts are excluded from ign F1.
    pub train_facts: Option<PathBuf>,
    /// Rules scored by the logic metric.
    pub rules: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    /// JSON report written by `eval` and `oracle`.
    pub report: Option<PathBuf>,
}

/// Everything a command needs, merged from defaults, a JSON file and flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Copied into `synth.seed` and `em.seed` on resolution.
    pub seed: u64,
    pub threads: Option<usize>,
    pub synth: SynthConfig,
    pub em: EmConfig,
    /// Score every ordered entity pair and base relation instead of the
    /// listed facts.
    pub all_pairs: bool,
    pub oracle_scope: Scope,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: None,
            synth: SynthConfig::default(),
            em: EmConfig::default(),
            all_pairs: false,
            oracle_scope: Scope::All,
            paths: Paths::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Synth,
    Train,
    Infer,
    Eval,
    Oracle,
}

/// Flag values; `None` leaves the file or default value in place.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub inference_mode: Option<InferenceMode>,
    pub out: Option<PathBuf>,
    pub all_pairs: bool,
    pub oracle_scope: Option<Scope>,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Flags over file over defaults. Without `--config`, `infer` starts
    /// from the run directory's saved config.
    pub fn resolve(command: Command, o: &Overrides) -> Result<Self> {
        let mut cfg = match (&o.config, command, &o.paths.run) {
            (Some(path), _, _) => Self::from_file(path)?,
            (None, Command::Infer, Some(run)) if run.join(CONFIG_FILE).exists() => {
                Self::from_file(&run.join(CONFIG_FILE))?
            }
            _ => Self::default(),
        };
        if let Some(seed) = o.seed {
            cfg.seed = seed;
        }
        cfg.synth.seed = cfg.seed;
        cfg.em.seed = cfg.seed;
        if o.threads.is_some() {
            cfg.threads = o.threads;
        }
        if let Some(mode) = o.inference_mode {
            cfg.em.inference_mode = mode;
        }
        if o.all_pairs {
            cfg.all_pairs = true;
        }
        if let Some(scope) = o.oracle_scope {
            cfg.oracle_scope = scope;
        }
        let p = &o.paths;
        let slots = [
            (&mut cfg.paths.corpus, &p.corpus),
            (&mut cfg.paths.run, &p.run),
            (&mut cfg.paths.docs, &p.docs),
            (&mut cfg.paths.predictions, &p.predictions),
            (&mut cfg.paths.gold, &p.gold),
            (&mut cfg.paths.train_facts, &p.train_facts),
            (&mut cfg.paths.rules, &p.rules),
            (&mut cfg.paths.vocab, &p.vocab),
            (&mut cfg.paths.report, &p.report),
        ];
        for (slot, flag) in slots {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        if let Some(out) = &o.out {
            let slot = match command {
                Command::Synth => &mut cfg.paths.corpus,
                Command::Train => &mut cfg.paths.run,
                Command::Infer => &mut cfg.paths.predictions,
                Command::Eval | Command::Oracle => &mut cfg.paths.report,
            };
            *slot = Some(out.clone());
        }
        if cfg.threads == Some(0) {
            bail!("threads must be at least 1");
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref().with_context(|| format!("no {what} path given"))
}

/// Holds `dir/.lock` for as long as it lives.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            bail!("{} is not a directory", dir.display());
        }
        let path = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).with_context(|| {
            format!(
                "{} is locked by another command (remove {} if no command is running)",
                dir.display(),
                path.display()
            )
        })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Creates `dir` if needed; its parent must already exist.
fn output_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        return Ok(());
    }
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        bail!("parent directory {} does not exist", parent.display());
    }
    fs::create_dir(dir).with_context(|| format!("creating {}", dir.display()))
}

fn output_file(path: &Path) -> Result<BufWriter<File>> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        bail!("parent directory {} does not exist", parent.display());
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn read_vocab(path: &Path) -> Result<RelationVocab> {
    let text = fs::read_to_string(path).with_context(|| format!("reading vocabulary {}", path.display()))?;
    RelationVocab::parse(&text).with_context(|| format!("parsing vocabulary {}", path.display()))
}

pub fn read_docs(path: &Path, vocab: &RelationVocab) -> Result<Corpus> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_corpus(BufReader::new(f), vocab).with_context(|| format!("reading {}", path.display()))
}

pub fn read_rules(path: &Path, vocab: &RelationVocab) -> Result<Vec<Rule>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading rules {}", path.display()))?;
    let rules = parse_rules(&text, vocab).with_context(|| format!("parsing rules {}", path.display()))?;
    Ok(rules.into_iter().map(|(r, _)| r).collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = output_file(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Writes the corpus splits, vocabulary, planted rules and config echo.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let out = required(&cfg.paths.corpus, "output corpus directory")?;
    output_dir(out)?;
    let _lock = DirLock::acquire(out)?;
    let corpus = gen_corpus(&cfg.synth).context("generating corpus")?;
    corpus.write_to(out).context("writing corpus")?;
    fs::write(out.join(CONFIG_FILE), cfg.to_json())?;
    Ok(out.to_path_buf())
}

pub struct TrainSummary {
    pub run: PathBuf,
    pub diagnostics: Vec<IterationDiagnostics>,
    pub warm_start_instances: usize,
}

/// Runs EM on `corpus/train.jsonl` and writes the run directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let corpus_dir = required(&cfg.paths.corpus, "corpus directory")?;
    let run = required(&cfg.paths.run, "output run directory")?;
    let vocab_path = cfg.paths.vocab.clone().unwrap_or_else(|| corpus_dir.join(VOCAB_FILE));
    let vocab = read_vocab(&vocab_path)?;
    let train = read_docs(&corpus_dir.join("train.jsonl"), &vocab)?;
    output_dir(run)?;
    let _lock = DirLock::acquire(run)?;
    let outcome = run_em(&train, &vocab, &cfg.em).context("training")?;

    fs::write(run.join(CONFIG_FILE), cfg.to_json())?;
    fs::write(run.join(VOCAB_FILE), vocab.to_file_string())?;
    write_json(&run.join(GENERATOR_FILE), &outcome.generator.to_checkpoint())?;
    write_json(&run.join(EXTRACTOR_FILE), &outcome.weights.to_checkpoint(&vocab))?;
    write_diagnostics(&run.join(DIAGNOSTICS_FILE), &outcome.diagnostics)?;
    let mut dump = String::new();
    for head in vocab.base_ids() {
        let top = outcome.generator.top_rules_scored(head, cfg.em.n, cfg.em.beam_width)?;
        dump.push_str(&format_rules(top.iter().map(|(r, lp)| (r, Some(*lp))), &vocab));
    }
    fs::write(run.join(RULES_FILE), dump)?;
    Ok(TrainSummary {
        run: run.to_path_buf(),
        diagnostics: outcome.diagnostics,
        warm_start_instances: outcome.warm_start_instances,
    })
}

#[derive(Serialize)]
struct DiagnosticsRow {
    iteration: usize,
    #[serde(rename = "L_G")]
    l_g: f64,
    #[serde(rename = "L_R")]
    l_r: f64,
    train_f1: f64,
    fit_initial_loss: f64,
    fit_final_loss: f64,
    fit_steps: usize,
    fit_descent: bool,
    mean_unique_rules: f64,
}

fn write_diagnostics(path: &Path, diagnostics: &[IterationDiagnostics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(output_file(path)?);
    for d in diagnostics {
        w.serialize(DiagnosticsRow {
            iteration: d.iteration,
            l_g: d.l_g,
            l_r: d.l_r,
            train_f1: d.train_f1,
            fit_initial_loss: d.fit_initial_loss,
            fit_final_loss: d.fit_final_loss,
            fit_steps: d.fit_steps,
            fit_descent: d.fit_descent,
            mean_unique_rules: d.mean_unique_rules,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// A trained generator and extractor loaded from a run directory.
pub struct Model {
    pub vocab: RelationVocab,
    pub generator: AutoregRuleModel,
    pub weights: ExtractorWeights,
}

impl Model {
    pub fn load(run: &Path) -> Result<Self> {
        let vocab = read_vocab(&run.join(VOCAB_FILE))?;
        let gen_path = run.join(GENERATOR_FILE);
        let text = fs::read_to_string(&gen_path).with_context(|| format!("reading {}", gen_path.display()))?;
        let ckpt: GeneratorCheckpoint =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", gen_path.display()))?;
        let generator = AutoregRuleModel::from_checkpoint(&ckpt, &vocab)?;
        let ext_path = run.join(EXTRACTOR_FILE);
        let text = fs::read_to_string(&ext_path).with_context(|| format!("reading {}", ext_path.display()))?;
        let ckpt: ExtractorCheckpoint =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", ext_path.display()))?;
        let weights = ExtractorWeights::from_checkpoint(&ckpt, &vocab)
            .with_context(|| format!("loading {}", ext_path.display()))?;
        Ok(Self {
            vocab,
            generator,
            weights,
        })
    }
}

fn candidates(doc: &Document, listed: &[Triple], vocab: &RelationVocab, all_pairs: bool) -> Vec<Triple> {
    if !all_pairs {
        return listed.to_vec();
    }
    let n = doc.num_entities();
    let mut out = Vec::new();
    for r in vocab.base_ids() {
        for h in 0..n {
            for t in 0..n {
                if h != t {
                    out.push(Triple::new(h, r, t));
                }
            }
        }
    }
    out
}

/// Positive predictions of one document, each with its contributing rules.
pub fn predict_doc(
    predictor: &Predictor<'_>,
    doc: &Document,
    queries: &[Triple],
    vocab: &RelationVocab,
) -> Result<PredictionRecord> {
    let mut triples = Vec::new();
    let mut explanations = Vec::new();
    for q in queries {
        let inf = predictor.infer(doc, q)?;
        if inf.label != Label::Positive {
            continue;
        }
        let name = vocab.name(q.rel).to_string();
        triples.push((q.head, name.clone(), q.tail, inf.prob));
        explanations.push(TripleExplanation {
            triple: (q.head, name, q.tail),
            score: inf.score,
            rules: inf
                .contributions
                .into_iter()
                .map(|c| RuleExplanation {
                    rule: c.rule.display(vocab),
                    weight: c.weight,
                    multiplicity: c.multiplicity,
                    grounding: c.grounding,
                    contribution: c.contribution,
                    path: c.path,
                })
                .collect(),
        });
    }
    Ok(PredictionRecord {
        doc_id: doc.doc_id().to_string(),
        triples,
        explanations,
    })
}

pub struct InferSummary {
    pub predictions: PathBuf,
    pub documents: usize,
    pub positives: usize,
}

/// Predicts every candidate query of the documents with the run's model.
pub fn cmd_infer(cfg: &RunConfig) -> Result<InferSummary> {
    let run = required(&cfg.paths.run, "run directory")?;
    let docs_path = required(&cfg.paths.docs, "documents")?;
    let out = required(&cfg.paths.predictions, "output predictions")?;
    let _lock = DirLock::acquire(run)?;
    let model = Model::load(run)?;
    let corpus = read_docs(docs_path, &model.vocab)?;
    let heads: Vec<_> = model.vocab.base_ids().collect();
    let predictor = Predictor::new(&model.generator, &model.weights, &cfg.em, &heads)?;
    let records: Vec<PredictionRecord> = corpus
        .docs()
        .par_iter()
        .map(|doc| {
            let listed: Vec<Triple> = corpus.instances_of(doc.doc_id()).map(|i| i.query).collect();
            let queries = candidates(doc, &listed, &model.vocab, cfg.all_pairs);
            predict_doc(&predictor, doc, &queries, &model.vocab)
                .with_context(|| format!("predicting document {}", doc.doc_id()))
        })
        .collect::<Result<_>>()?;
    let mut w = output_file(out)?;
    write_predictions(&mut w, &records)?;
    w.flush()?;
    Ok(InferSummary {
        predictions: out.to_path_buf(),
        documents: records.len(),
        positives: records.iter().map(|r| r.triples.len()).sum(),
    })
}

/// Scores a predictions file against gold documents.
pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricsReport> {
    let p = &cfg.paths;
    let pred_path = required(&p.predictions, "predictions")?;
    let gold_path = required(&p.gold, "gold documents")?;
    let vocab_path = match (&p.vocab, &p.corpus) {
        (Some(v), _) => v.clone(),
        (None, Some(c)) => c.join(VOCAB_FILE),
        (None, None) => bail!("no vocabulary path given"),
    };
    let vocab = read_vocab(&vocab_path)?;
    let f = File::open(pred_path).with_context(|| format!("opening {}", pred_path.display()))?;
    let pred = read_predictions(BufReader::new(f), &vocab).with_context(|| format!("reading {}", pred_path.display()))?;
    let gold = GoldSet::from_corpus(&read_docs(gold_path, &vocab)?);
    let train_facts = match &p.train_facts {
        Some(path) => fact_names(&read_docs(path, &vocab)?, &vocab),
        None => Default::default(),
    };
    let rules = match &p.rules {
        Some(path) => read_rules(path, &vocab)?,
        None => Vec::new(),
    };
    let report = MetricsReport::evaluate(&pred, &gold, &train_facts, &rules, &vocab)?;
    if let Some(path) = &p.report {
        write_json(path, &report)?;
    }
    Ok(report)
}

/// Runs the oracle suites in the configured scope.
pub fn cmd_oracle(cfg: &RunConfig) -> Result<Vec<OracleReport>> {
    let reports = oracle::run(cfg.oracle_scope, cfg.seed);
    if let Some(path) = &cfg.paths.report {
        write_json(path, &reports)?;
    }
    Ok(reports)
}

pub fn oracle_table(reports: &[OracleReport]) -> String {
    let mut out = format!("{:<14} {:>6} {:>7} {:>8} {:>12}  {}\n", "oracle", "cases", "checks", "failures", "max_error", "result");
    for r in reports {
        out.push_str(&format!(
            "{:<14} {:>6} {:>7} {:>8} {:>12.3e}  {}\n",
            r.name,
            r.cases,
            r.checks,
            r.failures,
            r.max_error,
            if r.passed() { "pass" } else { "FAIL" }
        ));
        if let Some(msg) = &r.first_failure {
            out.push_str(&format!("  first failure: {msg}\n"));
        }
    }
    out
}

/// Sizes rayon's global pool; only the first call has any effect.
pub fn init_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
