//! EM training: the E-step scores sampled rules with a linearized
//! likelihood and normalizes them into a posterior, the M-step refits the
//! generator to that posterior and the extractor to rules drawn from the
//! updated generator.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::document::{Corpus, Document, Label, LabeledInstance, Triple};
use crate::error::{Error, Result};
use crate::extractor::{
    self, fit, ground_rule, ground_value, log_sigmoid, path_bodies, ExtractorWeights, FitConfig,
    FitReport, SharedRules, TrainingExample,
};
use crate::generator::{AutoregRuleModel, GeneratorConfig};
use crate::metrics::Prf;
use crate::rule::Rule;
use crate::seed::{derive_seed, hash_str, rng_for};
use crate::vocab::{RelationId, RelationVocab};

// seed stream tags
const STREAM_ESTEP: u64 = 1;
const STREAM_MSTEP: u64 = 2;
const STREAM_ELBO: u64 = 3;
const STREAM_INFER: u64 = 4;

/// Largest body space that is tabulated for sampling instead of drawn token
/// by token.
const MAX_TABLE: usize = 200_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// A fresh rule set sampled from the generator for every query.
    Sample,
    /// The generator's `n` most probable rules.
    #[default]
    TopRules,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    /// Rule set size.
    pub n: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Stop early when the ELBO moves less than this between iterations.
    pub epsilon: f64,
    pub inference_mode: InferenceMode,
    pub beam_width: usize,
    /// Rule sets drawn per instance for the L_R estimate.
    pub elbo_samples: usize,
    /// Seed the generator with rule bodies that connect positive pairs.
    pub warm_start: bool,
    /// Atoms below this confidence are not followed by the warm start.
    pub warm_start_min_conf: f64,
    pub generator: GeneratorConfig,
    pub fit: FitConfig,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            n: 50,
            iterations: 10,
            seed: 0,
            epsilon: 1e-4,
            inference_mode: InferenceMode::TopRules,
            beam_width: 100,
            elbo_samples: 1,
            warm_start: true,
            warm_start_min_conf: 0.5,
            generator: GeneratorConfig::default(),
            fit: FitConfig::default(),
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("n must be at least 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be at least 1".into()));
        }
        if self.elbo_samples == 0 {
            return Err(Error::InvalidArgument("elbo_samples must be at least 1".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::InvalidArgument("epsilon must be non-negative".into()));
        }
        self.generator.validate()?;
        self.fit.validate()
    }
}

/// `-log 2 + x / 2`, the first-order expansion of `log sigmoid(x)` at 0.
#[inline]
pub fn log_sigmoid_taylor(x: f64) -> f64 {
    -std::f64::consts::LN_2 + 0.5 * x
}

/// `log_prior + (y / 2) * (bias / n + rule_weight * grounding)`.
#[inline]
pub fn h_value(log_prior: f64, y: Label, bias: f64, rule_weight: f64, grounding: f64, n: usize) -> f64 {
    log_prior + 0.5 * y.sign() * (bias / n as f64 + rule_weight * grounding)
}

/// Rule quality used by the E-step.
pub fn rule_score_h(
    instance: &LabeledInstance,
    rule: &Rule,
    gen: &AutoregRuleModel,
    weights: &ExtractorWeights,
    doc: &Document,
    n: usize,
) -> Result<f64> {
    let q = instance.query;
    if rule.head() != q.rel {
        return Err(Error::HeadMismatch {
            expected: q.rel.0,
            found: rule.head().0,
        });
    }
    let lp = gen.rule_log_prob(rule)?;
    let g = ground_value(doc, rule.body(), q.head, q.tail);
    Ok(h_value(lp, instance.label, weights.bias(q.rel), weights.rule_weight(rule), g, n))
}

/// Normalized exponentials, shifted by the maximum.
pub fn softmax(h: &[f64]) -> Vec<f64> {
    let m = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = h.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Approximate posterior over the distinct rules of one instance's sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSample {
    pub instance: usize,
    /// Distinct rules with their counts in the prior sample.
    pub rules: Vec<(Rule, usize)>,
    pub h: Vec<f64>,
    pub weights: Vec<f64>,
    /// Grounding value of each distinct rule on the query.
    pub groundings: Vec<f64>,
}

/// Scores `rules` (all with the query's head) and normalizes over them.
pub fn posterior_over(
    index: usize,
    instance: &LabeledInstance,
    rules: Vec<(Rule, usize)>,
    gen: &AutoregRuleModel,
    weights: &ExtractorWeights,
    doc: &Document,
    n: usize,
) -> Result<PosteriorSample> {
    if rules.is_empty() {
        return Err(Error::InvalidArgument("posterior over an empty rule set".into()));
    }
    let q = instance.query;
    let mut h = Vec::with_capacity(rules.len());
    let mut groundings = Vec::with_capacity(rules.len());
    for (rule, _) in &rules {
        if rule.head() != q.rel {
            return Err(Error::HeadMismatch {
                expected: q.rel.0,
                found: rule.head().0,
            });
        }
        let g = ground_value(doc, rule.body(), q.head, q.tail);
        let lp = gen.rule_log_prob(rule)?;
        h.push(h_value(lp, instance.label, weights.bias(q.rel), weights.rule_weight(rule), g, n));
        groundings.push(g);
    }
    let w = softmax(&h);
    Ok(PosteriorSample {
        instance: index,
        rules,
        h,
        weights: w,
        groundings,
    })
}

/// Draws `n` rules from the prior, merges duplicates and normalizes
/// `exp(H)` over the distinct rules.
pub fn e_step<R: Rng + ?Sized>(
    index: usize,
    instance: &LabeledInstance,
    gen: &AutoregRuleModel,
    weights: &ExtractorWeights,
    doc: &Document,
    n: usize,
    rng: &mut R,
) -> Result<PosteriorSample> {
    let set = gen.sample_ruleset(instance.query.rel, n, rng)?;
    posterior_over(index, instance, set.unique(), gen, weights, doc, n)
}

/// Every body of a head tabulated with its prior, for fast exact sampling.
struct PriorTable {
    rules: Vec<Rule>,
    log_probs: Vec<f64>,
    cdf: Vec<f64>,
}

impl PriorTable {
    fn build(gen: &AutoregRuleModel, head: RelationId) -> Result<Self> {
        // depth-first in rule order; each prefix's conditional is computed once
        // and the log terms are summed in the same order as `log_prob`
        fn rec(
            gen: &AutoregRuleModel,
            head: RelationId,
            body: &mut Vec<RelationId>,
            prefix_lp: f64,
            rules: &mut Vec<Rule>,
            lps: &mut Vec<f64>,
        ) -> Result<()> {
            let p = gen.conditional(head, body);
            if !body.is_empty() {
                lps.push(prefix_lp + p[gen.stop()].ln());
                rules.push(Rule::new(head, body.clone())?);
            }
            if body.len() == gen.max_len() {
                return Ok(());
            }
            for r in 0..gen.num_relations() {
                body.push(RelationId(r as u32));
                rec(gen, head, body, prefix_lp + p[r].ln(), rules, lps)?;
                body.pop();
            }
            Ok(())
        }
        let mut rules = Vec::new();
        let mut log_probs = Vec::new();
        rec(gen, head, &mut Vec::new(), 0.0, &mut rules, &mut log_probs)?;
        let mut acc = 0.0;
        let cdf = log_probs
            .iter()
            .map(|lp| {
                acc += lp.exp();
                acc
            })
            .collect();
        Ok(Self {
            rules,
            log_probs,
            cdf,
        })
    }

    fn log_prob(&self, rule: &Rule) -> Option<f64> {
        self.rules.binary_search(rule).ok().map(|i| self.log_probs[i])
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cdf.last().expect("non-empty table");
        let u = rng.gen::<f64>() * total;
        self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1)
    }
}

fn table_size(gen: &AutoregRuleModel) -> usize {
    let v = gen.num_relations();
    let mut total = 0usize;
    let mut layer = 1usize;
    for _ in 0..gen.max_len() {
        layer = layer.saturating_mul(v);
        total = total.saturating_add(layer);
    }
    total
}

/// Per-head prior tables, when the body space is small enough.
struct Priors {
    tables: BTreeMap<RelationId, PriorTable>,
}

impl Priors {
    fn build(gen: &AutoregRuleModel, heads: &[RelationId]) -> Result<Self> {
        let mut tables = BTreeMap::new();
        if table_size(gen) <= MAX_TABLE {
            let built: Vec<(RelationId, PriorTable)> = heads
                .par_iter()
                .map(|&h| Ok((h, PriorTable::build(gen, h)?)))
                .collect::<Result<_>>()?;
            tables.extend(built);
        }
        Ok(Self { tables })
    }

    fn log_prob(&self, gen: &AutoregRuleModel, rule: &Rule) -> Result<f64> {
        match self.tables.get(&rule.head()).and_then(|t| t.log_prob(rule)) {
            Some(lp) => Ok(lp),
            None => gen.rule_log_prob(rule),
        }
    }

    /// Same distribution as [`e_step`], drawn from the table when present.
    fn e_step<R: Rng + ?Sized>(
        &self,
        index: usize,
        instance: &LabeledInstance,
        gen: &AutoregRuleModel,
        weights: &ExtractorWeights,
        doc: &Document,
        n: usize,
        rng: &mut R,
    ) -> Result<PosteriorSample> {
        let q = instance.query;
        let Some(table) = self.tables.get(&q.rel) else {
            return e_step(index, instance, gen, weights, doc, n, rng);
        };
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for _ in 0..n {
            *counts.entry(table.sample(rng)).or_default() += 1;
        }
        // sorted by rule, matching RuleSet::unique
        let mut picked: Vec<(usize, usize)> = counts.into_iter().collect();
        picked.sort_by(|a, b| table.rules[a.0].cmp(&table.rules[b.0]));
        let bias = weights.bias(q.rel);
        let mut rules = Vec::with_capacity(picked.len());
        let mut h = Vec::with_capacity(picked.len());
        let mut groundings = Vec::with_capacity(picked.len());
        for (i, c) in picked {
            let rule = &table.rules[i];
            let g = ground_value(doc, rule.body(), q.head, q.tail);
            h.push(h_value(table.log_probs[i], instance.label, bias, weights.rule_weight(rule), g, n));
            groundings.push(g);
            rules.push((rule.clone(), c));
        }
        let w = softmax(&h);
        Ok(PosteriorSample {
            instance: index,
            rules,
            h,
            weights: w,
            groundings,
        })
    }
}

fn heads_of(corpus: &Corpus) -> Vec<RelationId> {
    let mut heads: Vec<RelationId> = corpus.instances().iter().map(|i| i.query.rel).collect();
    heads.sort_unstable();
    heads.dedup();
    heads
}

/// E-step over every instance, each with its own seed stream.
pub fn e_step_all(
    corpus: &Corpus,
    gen: &AutoregRuleModel,
    weights: &ExtractorWeights,
    config: &EmConfig,
    iteration: usize,
) -> Result<Vec<PosteriorSample>> {
    let priors = Priors::build(gen, &heads_of(corpus))?;
    e_step_with(&priors, corpus, gen, weights, config, iteration)
}

fn e_step_with(
    priors: &Priors,
    corpus: &Corpus,
    gen: &AutoregRuleModel,
    weights: &ExtractorWeights,
    config: &EmConfig,
    iteration: usize,
) -> Result<Vec<PosteriorSample>> {
    corpus
        .instances()
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let mut rng = rng_for(config.seed, &[STREAM_ESTEP, iteration as u64, i as u64]);
            priors.e_step(i, inst, gen, weights, corpus.doc_of(i), config.n, &mut rng)
        })
        .collect()
}

/// Adds each posterior, weighted, to the generator's counts.
pub fn m_step_generator(posteriors: &[PosteriorSample], corpus: &Corpus, gen: &mut AutoregRuleModel) -> Result<()> {
    if posteriors.is_empty() {
        return Err(Error::InvalidArgument("no posteriors to fit".into()));
    }
    // grouping by head keeps the per-context addition order of instance order
    let mut by_head: BTreeMap<RelationId, Vec<(Rule, f64)>> = BTreeMap::new();
    for p in posteriors {
        let head = corpus.instances()[p.instance].query.rel;
        let slot = by_head.entry(head).or_default();
        slot.extend(p.rules.iter().zip(&p.weights).map(|((r, _), &w)| (r.clone(), w)));
    }
    for (head, pairs) in by_head {
        gen.fit_weighted(head, &pairs)?;
    }
    Ok(())
}

/// Where rule sets come from at training and prediction time.
pub struct RuleSource<'a> {
    gen: &'a AutoregRuleModel,
    mode: InferenceMode,
    n: usize,
    seed: u64,
    top: BTreeMap<RelationId, SharedRules>,
}

impl<'a> RuleSource<'a> {
    pub fn new(gen: &'a AutoregRuleModel, config: &EmConfig, heads: &[RelationId]) -> Result<Self> {
        let mut top = BTreeMap::new();
        if config.inference_mode == InferenceMode::TopRules {
            let sets: Vec<(RelationId, SharedRules)> = heads
                .par_iter()
                .map(|&h| Ok((h, gen.top_rules(h, config.n, config.beam_width)?.unique().into())))
                .collect::<Result<_>>()?;
            top.extend(sets);
        }
        Ok(Self {
            gen,
            mode: config.inference_mode,
            n: config.n,
            seed: config.seed,
            top,
        })
    }

    /// Distinct rules with multiplicities for a query; `stream` separates
    /// sampling contexts.
    pub fn rules(&self, doc_id: &str, query: &Triple, stream: &[u64]) -> Result<SharedRules> {
        match self.mode {
            InferenceMode::TopRules => match self.top.get(&query.rel) {
                Some(set) => Ok(set.clone()),
                None => Ok(self.gen.top_rules(query.rel, self.n, self.n * 2)?.unique().into()),
            },
            InferenceMode::Sample => {
                let mut parts = stream.to_vec();
                parts.extend([hash_str(doc_id), query.head as u64, query.rel.0 as u64, query.tail as u64]);
                let mut rng = rng_for(self.seed, &parts);
                Ok(self.gen.sample_ruleset(query.rel, self.n, &mut rng)?.unique().into())
            }
        }
    }
}

/// Grounds rule sets from the updated generator and refits the extractor.
pub fn m_step_extractor(
    corpus: &Corpus,
    gen: &AutoregRuleModel,
    weights: &ExtractorWeights,
    config: &EmConfig,
    iteration: usize,
) -> Result<(ExtractorWeights, FitReport)> {
    let source = RuleSource::new(gen, config, &heads_of(corpus))?;
    let batch: Vec<TrainingExample> = corpus
        .instances()
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let rules = source.rules(&inst.doc_id, &inst.query, &[STREAM_MSTEP, iteration as u64, i as u64])?;
            TrainingExample::ground(corpus.doc_of(i), inst, rules)
        })
        .collect::<Result<_>>()?;
    fit(&batch, weights, &config.fit)
}

/// Monte-Carlo estimates of the generator objective `L_G` and the extractor
/// objective `L_R`, averaged over instances.
///
/// `L_G` is `n * sum p(rule) log p_theta(rule)` under each posterior; `L_R`
/// is `log sigma(y * score)` for rule sets of size `n` drawn from the posterior.
pub fn elbo(
    corpus: &Corpus,
    posteriors: &[PosteriorSample],
    gen: &AutoregRuleModel,
    weights: &ExtractorWeights,
    n: usize,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let priors = Priors::build(gen, &heads_of(corpus))?;
    elbo_with(&priors, corpus, posteriors, gen, weights, n, samples, seed)
}

#[allow(clippy::too_many_arguments)]
fn elbo_with(
    priors: &Priors,
    corpus: &Corpus,
    posteriors: &[PosteriorSample],
    gen: &AutoregRuleModel,
    weights: &ExtractorWeights,
    n: usize,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if samples == 0 {
        return Err(Error::InvalidArgument("samples must be at least 1".into()));
    }
    if posteriors.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut log_probs: HashMap<&Rule, f64> = HashMap::new();
    for p in posteriors {
        for (rule, _) in &p.rules {
            if !log_probs.contains_key(rule) {
                log_probs.insert(rule, priors.log_prob(gen, rule)?);
            }
        }
    }
    let terms: Vec<(f64, f64)> = posteriors
        .par_iter()
        .map(|p| {
            let inst = &corpus.instances()[p.instance];
            let mut lg = 0.0;
            let mut contrib = Vec::with_capacity(p.rules.len());
            for (((rule, _), &w), &g) in p.rules.iter().zip(&p.weights).zip(&p.groundings) {
                lg += w * log_probs[rule];
                contrib.push(weights.rule_weight(rule) * g);
            }
            let mut cdf = Vec::with_capacity(p.weights.len());
            let mut acc = 0.0;
            for &w in &p.weights {
                acc += w;
                cdf.push(acc);
            }
            let mut rng = rng_for(seed, &[STREAM_ELBO, p.instance as u64]);
            let mut lr = 0.0;
            for _ in 0..samples {
                let mut s = weights.bias(inst.query.rel);
                for _ in 0..n {
                    let u = rng.gen::<f64>() * acc;
                    let k = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
                    s += contrib[k];
                }
                lr += log_sigmoid(inst.label.sign() * s);
            }
            Ok((n as f64 * lg, lr / samples as f64))
        })
        .collect::<Result<_>>()?;
    let m = terms.len() as f64;
    let lg = terms.iter().map(|t| t.0).sum::<f64>() / m;
    let lr = terms.iter().map(|t| t.1).sum::<f64>() / m;
    Ok((lg, lr))
}

/// Seeds the generator with every body that connects a positive pair through
/// confident atoms, each instance contributing total weight 1 split in
/// proportion to the bodies' grounding values.
pub fn warm_start(corpus: &Corpus, gen: &mut AutoregRuleModel, min_conf: f64) -> Result<usize> {
    let max_len = gen.max_len();
    let found: Vec<Option<(RelationId, Vec<(Rule, f64)>)>> = corpus
        .instances()
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            if inst.label != Label::Positive {
                return Ok(None);
            }
            let q = inst.query;
            let bodies = path_bodies(corpus.doc_of(i), q.head, q.tail, max_len, min_conf);
            let total: f64 = bodies.values().sum();
            if total <= 0.0 {
                return Ok(None);
            }
            let pairs = bodies
                .into_iter()
                .map(|(body, v)| Ok((Rule::new(q.rel, body)?, v / total)))
                .collect::<Result<Vec<_>>>()?;
            Ok(Some((q.rel, pairs)))
        })
        .collect::<Result<_>>()?;
    let mut by_head: BTreeMap<RelationId, Vec<(Rule, f64)>> = BTreeMap::new();
    let mut used = 0;
    for (head, pairs) in found.into_iter().flatten() {
        by_head.entry(head).or_default().extend(pairs);
        used += 1;
    }
    for (head, pairs) in by_head {
        gen.fit_weighted(head, &pairs)?;
    }
    Ok(used)
}

/// One rule's share of a prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Contribution {
    pub rule: Rule,
    pub multiplicity: usize,
    pub weight: f64,
    pub grounding: f64,
    /// `weight * multiplicity * grounding`.
    pub contribution: f64,
    pub path: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub label: Label,
    pub prob: f64,
    pub score: f64,
    /// Rules with a positive grounding, largest contribution first.
    pub contributions: Vec<Contribution>,
}

/// Scores queries against a trained generator and extractor.
pub struct Predictor<'a> {
    source: RuleSource<'a>,
    weights: &'a ExtractorWeights,
}

impl<'a> Predictor<'a> {
    pub fn new(
        gen: &'a AutoregRuleModel,
        weights: &'a ExtractorWeights,
        config: &EmConfig,
        heads: &[RelationId],
    ) -> Result<Self> {
        Ok(Self {
            source: RuleSource::new(gen, config, heads)?,
            weights,
        })
    }

    /// Score only, skipping the explanation paths.
    pub fn score(&self, doc: &Document, query: &Triple) -> Result<f64> {
        let rules = self.source.rules(doc.doc_id(), query, &[STREAM_INFER])?;
        let mut score = self.weights.bias(query.rel);
        for (rule, mult) in rules.iter() {
            let w = self.weights.rule_weight(rule);
            if w != 0.0 {
                score += w * *mult as f64 * ground_value(doc, rule.body(), query.head, query.tail);
            }
        }
        Ok(score)
    }

    pub fn infer(&self, doc: &Document, query: &Triple) -> Result<Inference> {
        let rules = self.source.rules(doc.doc_id(), query, &[STREAM_INFER])?;
        let mut score = self.weights.bias(query.rel);
        let mut contributions = Vec::new();
        for (rule, mult) in rules.iter() {
            let g = ground_rule(doc, rule, query.head, query.tail);
            let w = self.weights.rule_weight(rule);
            let c = w * *mult as f64 * g.value;
            score += c;
            if let Some(path) = g.best_path {
                contributions.push(Contribution {
                    rule: rule.clone(),
                    multiplicity: *mult,
                    weight: w,
                    grounding: g.value,
                    contribution: c,
                    path,
                });
            }
        }
        contributions.sort_by(|a, b| b.contribution.total_cmp(&a.contribution).then_with(|| a.rule.cmp(&b.rule)));
        Ok(Inference {
            label: extractor::label_for(score),
            prob: extractor::prob(Label::Positive, score),
            score,
            contributions,
        })
    }
}

/// Predicts one query, building the rule source on the fly.
pub fn infer(
    doc: &Document,
    query: &Triple,
    gen: &AutoregRuleModel,
    weights: &ExtractorWeights,
    config: &EmConfig,
) -> Result<Inference> {
    Predictor::new(gen, weights, config, &[query.rel])?.infer(doc, query)
}

/// Micro F1 of the predicted labels on a corpus's instances.
pub fn instance_f1(corpus: &Corpus, predictor: &Predictor<'_>) -> Result<Prf> {
    let labels: Vec<(Label, Label)> = corpus
        .instances()
        .par_iter()
        .enumerate()
        .map(|(i, inst)| Ok((extractor::label_for(predictor.score(corpus.doc_of(i), &inst.query)?), inst.label)))
        .collect::<Result<_>>()?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in labels {
        match (p, g) {
            (Label::Positive, Label::Positive) => tp += 1,
            (Label::Positive, Label::Negative) => fp += 1,
            (Label::Negative, Label::Positive) => fn_ += 1,
            _ => {}
        }
    }
    Ok(Prf::from_counts(tp, fp, fn_))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    pub l_g: f64,
    pub l_r: f64,
    pub train_f1: f64,
    pub fit_initial_loss: f64,
    pub fit_final_loss: f64,
    pub fit_steps: usize,
    pub fit_descent: bool,
    pub mean_unique_rules: f64,
}

pub struct EmOutcome {
    pub generator: AutoregRuleModel,
    pub weights: ExtractorWeights,
    pub diagnostics: Vec<IterationDiagnostics>,
    pub warm_start_instances: usize,
}

/// Alternates E and M steps for `config.iterations` rounds, stopping early
/// when the ELBO settles.
pub fn run_em(corpus: &Corpus, vocab: &RelationVocab, config: &EmConfig) -> Result<EmOutcome> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("training corpus has no instances".into()));
    }
    let mut gen = AutoregRuleModel::new(vocab, config.generator.clone())?;
    let mut weights = ExtractorWeights::new();
    let warm_start_instances = if config.warm_start {
        warm_start(corpus, &mut gen, config.warm_start_min_conf)?
    } else {
        0
    };
    let heads = heads_of(corpus);
    let mut priors = Priors::build(&gen, &heads)?;
    let mut diagnostics = Vec::new();
    let mut prev_elbo: Option<f64> = None;
    for it in 0..config.iterations {
        let wrap = |e: Error| Error::Iteration {
            iteration: it + 1,
            source: Box::new(e),
        };
        let posteriors = e_step_with(&priors, corpus, &gen, &weights, config, it).map_err(wrap)?;
        m_step_generator(&posteriors, corpus, &mut gen).map_err(wrap)?;
        priors = Priors::build(&gen, &heads).map_err(wrap)?;
        let (w, report) = m_step_extractor(corpus, &gen, &weights, config, it).map_err(wrap)?;
        weights = w;
        let seed = derive_seed(config.seed, &[it as u64]);
        let (l_g, l_r) =
            elbo_with(&priors, corpus, &posteriors, &gen, &weights, config.n, config.elbo_samples, seed)
                .map_err(wrap)?;
        let predictor = Predictor::new(&gen, &weights, config, &heads).map_err(wrap)?;
        let train = instance_f1(corpus, &predictor).map_err(wrap)?;
        let mean_unique =
            posteriors.iter().map(|p| p.rules.len() as f64).sum::<f64>() / posteriors.len() as f64;
        diagnostics.push(IterationDiagnostics {
            iteration: it + 1,
            l_g,
            l_r,
            train_f1: train.f1,
            fit_initial_loss: report.initial_loss,
            fit_final_loss: report.final_loss,
            fit_steps: report.steps.len(),
            fit_descent: report.is_descent(),
            mean_unique_rules: mean_unique,
        });
        let total = l_g + l_r;
        if let Some(prev) = prev_elbo {
            if (total - prev).abs() < config.epsilon {
                break;
            }
        }
        prev_elbo = Some(total);
    }
    Ok(EmOutcome {
        generator: gen,
        weights,
        diagnostics,
        warm_start_instances,
    })
}
