//! Brute-force reference computations and checkers that compare the engine
//! against them on random small cases.
//!
//! Every checker takes the implementation under test as a function, so a
//! deliberately broken variant can be shown to fail.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::document::{Document, EntityId, Label, LabeledInstance, Triple};
use crate::em::{self, PosteriorSample};
use crate::error::{Error, Result};
use crate::extractor::{self, ExtractorWeights, Gradient, GroundingResult, TrainingExample};
use crate::generator::{AutoregRuleModel, GeneratorConfig};
use crate::rule::Rule;
use crate::seed::rng_for;
use crate::vocab::{RelationId, RelationVocab};

pub const GROUNDING_CASES: usize = 1000;
pub const POSTERIOR_CASES: usize = 200;
pub const NORMALIZATION_CASES: usize = 50;
pub const GRADIENT_CASES: usize = 100;

/// Central difference step for the gradient check.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative error of an analytic partial derivative.
pub const FD_TOLERANCE: f64 = 1e-4;
// relative errors are measured against at least this magnitude
const FD_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    All,
    Grounding,
    Posterior,
    Normalization,
    Gradient,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::All => "all",
            Scope::Grounding => "grounding",
            Scope::Posterior => "posterior",
            Scope::Normalization => "normalization",
            Scope::Gradient => "gradient",
        }
    }

    fn includes(self, other: Scope) -> bool {
        self == Scope::All || self == other
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Scope::All, Scope::Grounding, Scope::Posterior, Scope::Normalization, Scope::Gradient]
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown oracle scope {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub name: String,
    pub cases: usize,
    /// Individual comparisons made across all cases.
    pub checks: usize,
    pub failures: usize,
    /// Largest discrepancy seen, in the checker's own measure.
    pub max_error: f64,
    pub first_failure: Option<String>,
}

impl OracleReport {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            cases: 0,
            checks: 0,
            failures: 0,
            max_error: 0.0,
            first_failure: None,
        }
    }

    pub fn passed(&self) -> bool {
        self.cases > 0 && self.failures == 0
    }

    fn check(&mut self, ok: bool, error: f64, what: impl FnOnce() -> String) {
        self.checks += 1;
        if error.is_nan() {
            self.max_error = f64::NAN;
        } else if error > self.max_error {
            self.max_error = error;
        }
        if !ok {
            self.failures += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(what());
            }
        }
    }

    fn fail(&mut self, what: String) {
        self.check(false, f64::NAN, || what);
    }
}

/// Runs the checkers in `scope` against the engine's own functions.
pub fn run(scope: Scope, seed: u64) -> Vec<OracleReport> {
    let mut out = Vec::new();
    if scope.includes(Scope::Grounding) {
        out.push(check_grounding(GROUNDING_CASES, seed, extractor::ground_rule));
    }
    if scope.includes(Scope::Posterior) {
        out.push(check_posterior(POSTERIOR_CASES, seed, em::posterior_over));
    }
    if scope.includes(Scope::Normalization) {
        out.push(check_normalization(NORMALIZATION_CASES, seed, |g, h, b| g.log_prob(h, b)));
    }
    if scope.includes(Scope::Gradient) {
        out.push(check_gradient(GRADIENT_CASES, seed, extractor::loss_and_grad));
    }
    out
}

/// Base atoms of a random document, kept apart from its indexed form.
#[derive(Clone, Debug)]
pub struct RawDoc {
    pub num_entities: usize,
    pub atoms: BTreeMap<Triple, f64>,
}

impl RawDoc {
    /// Confidence of `(a, r, b)` read straight from the base atoms, following
    /// inverse relations by hand.
    pub fn conf(&self, vocab: &RelationVocab, a: EntityId, r: RelationId, b: EntityId) -> f64 {
        let get = |x: EntityId, rel: RelationId, y: EntityId| self.atoms.get(&Triple::new(x, rel, y)).copied();
        let found = if !vocab.is_base(r) {
            get(b, vocab.inverse(r), a)
        } else if vocab.inverse(r) == r {
            get(a, r, b).or_else(|| get(b, r, a))
        } else {
            get(a, r, b)
        };
        found.unwrap_or(0.0)
    }

    pub fn to_document(&self, vocab: &RelationVocab) -> Result<Document> {
        let names = (0..self.num_entities).map(|i| format!("e{i}")).collect();
        Document::ingest("oracle", names, self.atoms.iter().map(|(t, c)| (*t, *c)), [], vocab)
    }
}

/// Random sparse base atoms over `vocab`; self-inverse relations get one
/// orientation per pair.
pub fn random_raw_doc(rng: &mut ChaCha8Rng, vocab: &RelationVocab, max_entities: usize, density: f64) -> RawDoc {
    let n = rng.gen_range(1..=max_entities);
    let mut atoms = BTreeMap::new();
    for r in vocab.base_ids() {
        let symmetric = vocab.inverse(r) == r;
        for a in 0..n {
            for b in 0..n {
                if symmetric && b < a {
                    continue;
                }
                if rng.gen::<f64>() >= density {
                    continue;
                }
                let c = match rng.gen_range(0..10) {
                    0 => 1.0,
                    1 => 0.0,
                    _ => rng.gen::<f64>(),
                };
                atoms.insert(Triple::new(a, r, b), c);
            }
        }
    }
    RawDoc { num_entities: n, atoms }
}

/// Max over every entity sequence `h, e1, ..., t` of the product of atom
/// confidences, by exhaustive enumeration. `None` when no sequence has a
/// positive product.
pub fn brute_force_grounding(
    raw: &RawDoc,
    vocab: &RelationVocab,
    body: &[RelationId],
    h: EntityId,
    t: EntityId,
) -> Option<f64> {
    let n = raw.num_entities;
    let inner = body.len() - 1;
    let mut seq = vec![0usize; inner];
    let mut best: Option<f64> = None;
    loop {
        let mut prod = 1.0;
        let mut prev = h;
        for (i, &r) in body.iter().enumerate() {
            let next = if i < inner { seq[i] } else { t };
            prod *= raw.conf(vocab, prev, r, next);
            prev = next;
        }
        if prod > 0.0 && best.is_none_or(|b| prod > b) {
            best = Some(prod);
        }
        // odometer over the intermediate entities
        let mut k = 0;
        while k < inner {
            seq[k] += 1;
            if seq[k] < n {
                break;
            }
            seq[k] = 0;
            k += 1;
        }
        if k == inner {
            return best;
        }
    }
}

fn oracle_vocab() -> RelationVocab {
    let self_inverse: BTreeSet<String> = ["s".to_string()].into();
    RelationVocab::build(&["p", "q", "s"], &self_inverse).expect("static vocabulary")
}

fn random_body(rng: &mut ChaCha8Rng, symbols: usize, max_len: usize) -> Vec<RelationId> {
    let len = rng.gen_range(1..=max_len);
    (0..len).map(|_| RelationId(rng.gen_range(0..symbols) as u32)).collect()
}

/// Grounding DP against exhaustive enumeration on documents of at most six
/// entities and rules of length at most three. Values must agree exactly and
/// a returned path must attain the value.
pub fn check_grounding<F>(cases: usize, seed: u64, ground: F) -> OracleReport
where
    F: Fn(&Document, &Rule, EntityId, EntityId) -> GroundingResult,
{
    let vocab = oracle_vocab();
    let mut report = OracleReport::new("grounding");
    let mut rng = rng_for(seed, &[0x6772_6f75]);
    for case in 0..cases {
        let raw = random_raw_doc(&mut rng, &vocab, 6, 0.3);
        let doc = match raw.to_document(&vocab) {
            Ok(d) => d,
            Err(e) => {
                report.fail(format!("case {case}: {e}"));
                continue;
            }
        };
        let head = RelationId(rng.gen_range(0..vocab.base_count()) as u32);
        let rule = Rule::new(head, random_body(&mut rng, vocab.len(), 3)).expect("non-empty body");
        let h = rng.gen_range(0..raw.num_entities);
        let t = rng.gen_range(0..raw.num_entities);
        report.cases += 1;
        let expected = brute_force_grounding(&raw, &vocab, rule.body(), h, t);
        let got = ground(&doc, &rule, h, t);
        let value_ok = got.value == expected.unwrap_or(0.0);
        let attain_ok = got.best_path.is_some() == expected.is_some();
        let err = (got.value - expected.unwrap_or(0.0)).abs();
        report.check(value_ok && attain_ok, err, || {
            format!(
                "case {case}: rule {} from {h} to {t}: got {} ({}), enumeration {:?}",
                rule.display(&vocab),
                got.value,
                if got.best_path.is_some() { "attained" } else { "none" },
                expected
            )
        });
        if let Some(path) = &got.best_path {
            let ends = path.len() == rule.len() + 1 && path[0] == h && path[rule.len()] == t;
            let prod = ends.then(|| {
                rule.body()
                    .iter()
                    .enumerate()
                    .fold(1.0, |acc, (i, &r)| acc * raw.conf(&vocab, path[i], r, path[i + 1]))
            });
            report.check(prod == Some(got.value), 0.0, || {
                format!("case {case}: path {path:?} does not attain {}", got.value)
            });
        }
    }
    report
}

/// Every body of length `1..=max_len` over `symbols` tokens.
pub fn all_bodies(symbols: usize, max_len: usize) -> Vec<Vec<RelationId>> {
    let mut out = Vec::new();
    let mut layer: Vec<Vec<RelationId>> = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::with_capacity(layer.len() * symbols);
        for prefix in &layer {
            for r in 0..symbols {
                let mut b = prefix.clone();
                b.push(RelationId(r as u32));
                next.push(b);
            }
        }
        out.extend(next.iter().cloned());
        layer = next;
    }
    out
}

/// `exp(H_i) / sum_j exp(H_j)`, written as `1 / sum_j exp(H_j - H_i)`.
pub fn reference_softmax(h: &[f64]) -> Vec<f64> {
    h.iter()
        .map(|&hi| 1.0 / h.iter().map(|&hj| (hj - hi).exp()).sum::<f64>())
        .collect()
}

fn random_generator(rng: &mut ChaCha8Rng, vocab: &RelationVocab, config: GeneratorConfig) -> AutoregRuleModel {
    let mut gen = AutoregRuleModel::new(vocab, config).expect("valid generator config");
    for _ in 0..3 {
        let head = RelationId(rng.gen_range(0..vocab.base_count()) as u32);
        let k = rng.gen_range(1..=8);
        let pairs: Vec<(Rule, f64)> = (0..k)
            .map(|_| {
                let body = random_body(rng, vocab.len(), gen.max_len());
                (Rule::new(head, body).expect("non-empty body"), rng.gen::<f64>() * 5.0)
            })
            .collect();
        gen.fit_weighted(head, &pairs).expect("valid fit");
    }
    gen
}

/// Posterior weights over the full rule space (four relations, bodies of
/// length at most two) against a separately coded `softmax(H)`, and their
/// invariance under shifting every `H` by a constant.
pub fn check_posterior<F>(cases: usize, seed: u64, posterior: F) -> OracleReport
where
    F: Fn(
        usize,
        &LabeledInstance,
        Vec<(Rule, usize)>,
        &AutoregRuleModel,
        &ExtractorWeights,
        &Document,
        usize,
    ) -> Result<PosteriorSample>,
{
    const TOL: f64 = 1e-12;
    let names = ["a", "b", "c", "d"];
    let self_inverse: BTreeSet<String> = names.iter().map(|s| s.to_string()).collect();
    let vocab = RelationVocab::build(&names, &self_inverse).expect("static vocabulary");
    let config = GeneratorConfig {
        max_len: 2,
        ..GeneratorConfig::default()
    };
    let bodies = all_bodies(vocab.len(), 2);
    let mut report = OracleReport::new("posterior");
    let mut rng = rng_for(seed, &[0x706f_7374]);
    for case in 0..cases {
        let gen = random_generator(&mut rng, &vocab, config.clone());
        let raw = random_raw_doc(&mut rng, &vocab, 5, 0.4);
        let doc = match raw.to_document(&vocab) {
            Ok(d) => d,
            Err(e) => {
                report.fail(format!("case {case}: {e}"));
                continue;
            }
        };
        let head = RelationId(rng.gen_range(0..4));
        let query = Triple::new(rng.gen_range(0..raw.num_entities), head, rng.gen_range(0..raw.num_entities));
        let label = if rng.gen_bool(0.5) { Label::Positive } else { Label::Negative };
        let instance = LabeledInstance {
            doc_id: "oracle".into(),
            query,
            label,
        };
        let n = rng.gen_range(1..=60);
        let rules: Vec<(Rule, usize)> = bodies
            .iter()
            .map(|b| (Rule::new(head, b.clone()).expect("non-empty body"), 1))
            .collect();
        let mut weights = ExtractorWeights::new();
        weights.set_bias(head, rng.gen_range(-3.0..3.0)).expect("finite");
        for (rule, _) in &rules {
            if rng.gen_bool(0.6) {
                weights.set_rule_weight(rule.clone(), rng.gen_range(-4.0..4.0)).expect("finite");
            }
        }
        report.cases += 1;
        let sample = match posterior(case, &instance, rules.clone(), &gen, &weights, &doc, n) {
            Ok(s) => s,
            Err(e) => {
                report.fail(format!("case {case}: {e}"));
                continue;
            }
        };
        if sample.weights.len() != rules.len() || sample.h.len() != rules.len() {
            report.fail(format!(
                "case {case}: {} weights for {} rules",
                sample.weights.len(),
                rules.len()
            ));
            continue;
        }
        let y = label.sign();
        let h: Vec<f64> = rules
            .iter()
            .map(|(rule, _)| {
                let lp = gen.rule_log_prob(rule).expect("rule in vocabulary");
                let g = brute_force_grounding(&raw, &vocab, rule.body(), query.head, query.tail).unwrap_or(0.0);
                lp + y / 2.0 * (weights.bias(head) / n as f64 + weights.rule_weight(rule) * g)
            })
            .collect();
        for (i, (&got, &want)) in sample.h.iter().zip(&h).enumerate() {
            let err = (got - want).abs() / (1.0 + want.abs());
            report.check(err <= TOL, err, || format!("case {case}: H of rule {i} is {got}, expected {want}"));
        }
        let total: f64 = sample.weights.iter().sum();
        report.check((total - 1.0).abs() <= TOL, (total - 1.0).abs(), || {
            format!("case {case}: weights sum to {total}")
        });
        for c in [-5.0, 0.0, 7.0] {
            let shifted: Vec<f64> = h.iter().map(|x| x + c).collect();
            let reference = reference_softmax(&shifted);
            let engine = em::softmax(&shifted);
            for i in 0..rules.len() {
                let err = (sample.weights[i] - reference[i]).abs();
                report.check(err <= TOL, err, || {
                    format!(
                        "case {case}, shift {c}: weight {i} is {}, reference {}",
                        sample.weights[i], reference[i]
                    )
                });
                let err = (engine[i] - sample.weights[i]).abs();
                report.check(err <= TOL, err, || {
                    format!("case {case}, shift {c}: softmax moved weight {i} by {err}")
                });
            }
        }
    }
    report
}

/// The generator's probabilities over every rule of a head sum to one, on
/// random small vocabularies and configurations, before and after each of
/// three weighted fits.
pub fn check_normalization<F>(cases: usize, seed: u64, log_prob: F) -> OracleReport
where
    F: Fn(&AutoregRuleModel, RelationId, &[RelationId]) -> Result<f64>,
{
    const TOL: f64 = 1e-6;
    let mut report = OracleReport::new("normalization");
    let mut rng = rng_for(seed, &[0x6e6f_726d]);
    for case in 0..cases {
        let base = rng.gen_range(1..=3);
        let names: Vec<String> = (0..base).map(|i| format!("r{i}")).collect();
        let self_inverse: BTreeSet<String> = names.iter().filter(|_| rng.gen_bool(0.5)).cloned().collect();
        let vocab = RelationVocab::build(&names, &self_inverse).expect("valid names");
        let order = rng.gen_range(0..=2);
        let mut lambdas: Vec<f64> = (0..=order).map(|_| rng.gen::<f64>() + 0.01).collect();
        let sum: f64 = lambdas.iter().sum();
        lambdas.iter_mut().for_each(|l| *l /= sum);
        let config = GeneratorConfig {
            order,
            alpha: rng.gen_range(0.01..1.0),
            lambdas,
            max_len: rng.gen_range(1..=3),
        };
        let mut gen = match AutoregRuleModel::new(&vocab, config.clone()) {
            Ok(g) => g,
            Err(e) => {
                report.fail(format!("case {case}: {e}"));
                continue;
            }
        };
        report.cases += 1;
        let bodies = all_bodies(vocab.len(), config.max_len);
        for round in 0..=3 {
            if round > 0 {
                let head = RelationId(rng.gen_range(0..base) as u32);
                let pairs: Vec<(Rule, f64)> = (0..rng.gen_range(1..=10))
                    .map(|_| {
                        let body = random_body(&mut rng, vocab.len(), config.max_len);
                        (Rule::new(head, body).expect("non-empty body"), rng.gen::<f64>() * 10.0)
                    })
                    .collect();
                if let Err(e) = gen.fit_weighted(head, &pairs) {
                    report.fail(format!("case {case}: fit {round}: {e}"));
                    break;
                }
            }
            for head in vocab.base_ids() {
                let mut total = 0.0;
                for body in &bodies {
                    match log_prob(&gen, head, body) {
                        Ok(lp) => total += lp.exp(),
                        Err(e) => {
                            total = f64::NAN;
                            report.fail(format!("case {case}: {e}"));
                            break;
                        }
                    }
                }
                let err = (total - 1.0).abs();
                report.check(err <= TOL, err, || {
                    format!("case {case}, after {round} fits: head {head} sums to {total}")
                });
            }
        }
    }
    report
}

/// Negative log-likelihood plus `l2 / 2` times the squared norm of every
/// parameter the batch touches, coded directly from the scores.
pub fn reference_loss(batch: &[TrainingExample], weights: &ExtractorWeights, l2: f64) -> f64 {
    let mut loss = 0.0;
    let mut biases = BTreeSet::new();
    let mut rules = BTreeSet::new();
    for ex in batch {
        let mut s = weights.bias(ex.relation());
        for (rule, coef) in ex.features() {
            s += weights.rule_weight(rule) * coef;
            rules.insert(rule.clone());
        }
        biases.insert(ex.relation());
        let m = -ex.label().sign() * s;
        // log(1 + e^m)
        loss += m.max(0.0) + (-m.abs()).exp().ln_1p();
    }
    let norm: f64 = biases.iter().map(|&r| weights.bias(r).powi(2)).sum::<f64>()
        + rules.iter().map(|r| weights.rule_weight(r).powi(2)).sum::<f64>();
    loss + 0.5 * l2 * norm
}

fn random_batch(rng: &mut ChaCha8Rng, vocab: &RelationVocab) -> Vec<TrainingExample> {
    let mut shared: BTreeMap<RelationId, Vec<Arc<[(Rule, usize)]>>> = BTreeMap::new();
    (0..rng.gen_range(1..=8))
        .map(|_| {
            let rel = RelationId(rng.gen_range(0..vocab.base_count()) as u32);
            let pool = shared.entry(rel).or_default();
            let rules = if !pool.is_empty() && rng.gen_bool(0.4) {
                pool[rng.gen_range(0..pool.len())].clone()
            } else {
                let distinct: BTreeMap<Rule, usize> = (0..rng.gen_range(0..=4))
                    .map(|_| {
                        let body = random_body(rng, vocab.len(), 3);
                        (Rule::new(rel, body).expect("non-empty body"), rng.gen_range(1..=3))
                    })
                    .collect();
                let rules: Arc<[(Rule, usize)]> = distinct.into_iter().collect::<Vec<_>>().into();
                pool.push(rules.clone());
                rules
            };
            let groundings = rules
                .iter()
                .map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen::<f64>() })
                .collect();
            let label = if rng.gen_bool(0.5) { Label::Positive } else { Label::Negative };
            let instance = LabeledInstance {
                doc_id: "oracle".into(),
                query: Triple::new(0, rel, 1),
                label,
            };
            TrainingExample::from_shared(&instance, rules, groundings).expect("consistent example")
        })
        .collect()
}

fn away_from_zero(rng: &mut ChaCha8Rng) -> f64 {
    let m = rng.gen_range(0.1..2.0);
    if rng.gen_bool(0.5) {
        m
    } else {
        -m
    }
}

/// Analytic loss and gradient against [`reference_loss`] and its central
/// finite differences, coordinate by coordinate.
pub fn check_gradient<F>(cases: usize, seed: u64, loss_and_grad: F) -> OracleReport
where
    F: Fn(&[TrainingExample], &ExtractorWeights, f64) -> (f64, Gradient),
{
    let vocab = oracle_vocab();
    let mut report = OracleReport::new("gradient");
    let mut rng = rng_for(seed, &[0x6772_6164]);
    for case in 0..cases {
        let batch = random_batch(&mut rng, &vocab);
        let mut weights = ExtractorWeights::new();
        let mut biases = BTreeSet::new();
        let mut rules = BTreeSet::new();
        for ex in &batch {
            biases.insert(ex.relation());
            rules.extend(ex.features().map(|(r, _)| r.clone()));
        }
        for &r in &biases {
            weights.set_bias(r, away_from_zero(&mut rng)).expect("finite");
        }
        for r in &rules {
            weights.set_rule_weight(r.clone(), away_from_zero(&mut rng)).expect("finite");
        }
        let l2 = match rng.gen_range(0..3) {
            0 => 0.0,
            1 => 1e-4,
            _ => rng.gen::<f64>(),
        };
        report.cases += 1;
        let (loss, grad) = loss_and_grad(&batch, &weights, l2);
        let want = reference_loss(&batch, &weights, l2);
        let err = (loss - want).abs() / (1.0 + want.abs());
        report.check(err <= 1e-12, err, || format!("case {case}: loss {loss}, reference {want}"));
        let keys_ok = grad.bias.keys().copied().collect::<BTreeSet<_>>() == biases
            && grad.rule_weight.keys().cloned().collect::<BTreeSet<_>>() == rules;
        report.check(keys_ok, 0.0, || format!("case {case}: gradient covers the wrong parameters"));

        let mut compare = |analytic: f64, plus: ExtractorWeights, minus: ExtractorWeights, name: String| {
            let fd = (reference_loss(&batch, &plus, l2) - reference_loss(&batch, &minus, l2)) / (2.0 * FD_STEP);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(FD_FLOOR);
            report.check(rel <= FD_TOLERANCE, rel, || {
                format!("case {case}: d/d{name} analytic {analytic}, finite difference {fd}")
            });
        };
        for &r in &biases {
            let w = weights.bias(r);
            let (mut plus, mut minus) = (weights.clone(), weights.clone());
            plus.set_bias(r, w + FD_STEP).expect("finite");
            minus.set_bias(r, w - FD_STEP).expect("finite");
            let analytic = grad.bias.get(&r).copied().unwrap_or(0.0);
            compare(analytic, plus, minus, format!("bias[{}]", vocab.name(r)));
        }
        for rule in &rules {
            let w = weights.rule_weight(rule);
            let (mut plus, mut minus) = (weights.clone(), weights.clone());
            plus.set_rule_weight(rule.clone(), w + FD_STEP).expect("finite");
            minus.set_rule_weight(rule.clone(), w - FD_STEP).expect("finite");
            let analytic = grad.rule_weight.get(rule).copied().unwrap_or(0.0);
            compare(analytic, plus, minus, format!("w[{}]", rule.display(&vocab)));
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::{ground_rule, ground_value, loss_and_grad};

    #[test]
    fn engine_passes_every_oracle() {
        for report in run(Scope::All, 7) {
            assert!(report.passed(), "{report:?}");
            assert!(report.checks >= report.cases);
        }
    }

    #[test]
    fn value_only_grounding_matches_enumeration() {
        let report = check_grounding(300, 3, |doc, rule, h, t| {
            let value = ground_value(doc, rule.body(), h, t);
            let mut g = ground_rule(doc, rule, h, t);
            g.value = value;
            g
        });
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn off_by_one_grounding_is_caught() {
        // drops the last atom of every body longer than one
        let report = check_grounding(GROUNDING_CASES, 0, |doc, rule, h, t| {
            let body = &rule.body()[..rule.len().max(2) - 1];
            ground_rule(doc, &Rule::new(rule.head(), body.to_vec()).unwrap(), h, t)
        });
        assert!(!report.passed());
        assert!(report.first_failure.is_some());
    }

    #[test]
    fn wrong_slot_count_in_posterior_is_caught() {
        let report = check_posterior(20, 0, |i, inst, rules, gen, w, doc, n| {
            em::posterior_over(i, inst, rules, gen, w, doc, n + 1)
        });
        assert!(!report.passed());
    }

    #[test]
    fn unnormalized_generator_is_caught() {
        let report = check_normalization(10, 0, |g, h, b| {
            // forgets the STOP factor
            let mut lp = 0.0;
            for i in 0..b.len() {
                lp += g.conditional(h, &b[..i])[b[i].index()].ln();
            }
            Ok(lp)
        });
        assert!(!report.passed());
    }

    #[test]
    fn missing_regularizer_gradient_is_caught() {
        let report = check_gradient(GRADIENT_CASES, 0, |batch, w, l2| {
            let (loss, _) = loss_and_grad(batch, w, l2);
            (loss, loss_and_grad(batch, w, 0.0).1)
        });
        assert!(!report.passed());
    }

    #[test]
    fn brute_force_on_a_known_graph() {
        let vocab = oracle_vocab();
        let p = RelationId(0);
        let raw = RawDoc {
            num_entities: 4,
            atoms: [
                (Triple::new(0, p, 1), 0.7),
                (Triple::new(1, RelationId(1), 3), 0.5),
                (Triple::new(0, p, 2), 0.6),
                (Triple::new(2, RelationId(1), 3), 0.8),
            ]
            .into(),
        };
        let got = brute_force_grounding(&raw, &vocab, &[p, RelationId(1)], 0, 3).unwrap();
        assert!((got - 0.48).abs() < 1e-12);
        let back = brute_force_grounding(&raw, &vocab, &[vocab.inverse(RelationId(1)), vocab.inverse(p)], 3, 0);
        assert_eq!(back, Some(got));
        assert_eq!(brute_force_grounding(&raw, &vocab, &[p], 1, 0), None);
    }

    #[test]
    fn reference_softmax_is_shift_free() {
        let h = [-1.0, 0.5, 3.0];
        let a = reference_softmax(&h);
        let b = reference_softmax(&h.map(|x| x + 7.0));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert_eq!(all_bodies(4, 2).len(), 20);
        assert_eq!("gradient".parse::<Scope>().unwrap(), Scope::Gradient);
        assert!("dp".parse::<Scope>().is_err());
    }
}
