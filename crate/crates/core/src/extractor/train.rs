//! Logistic loss over rule groundings and a step-halving gradient descent.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ground_value, log_sigmoid, sigmoid, ExtractorWeights};
use crate::document::{Document, Label, LabeledInstance};
use crate::error::{Error, Result};
use crate::rule::{Rule, RuleSet};
use crate::vocab::RelationId;

const MAX_HALVINGS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            epochs: 5,
            l2: 1e-4,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::InvalidArgument(format!("l2 must be non-negative, got {}", self.l2)));
        }
        Ok(())
    }
}

/// Distinct rules of a rule set with their multiplicities, shareable
/// between examples that use the same set.
pub type SharedRules = Arc<[(Rule, usize)]>;

/// One labeled query with its rule set already grounded.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    label: Label,
    relation: RelationId,
    rules: SharedRules,
    groundings: Vec<f64>,
}

impl TrainingExample {
    /// `groundings` lines up with `ruleset.unique()`.
    pub fn new(instance: &LabeledInstance, ruleset: &RuleSet, groundings: &[f64]) -> Result<Self> {
        if ruleset.head() != instance.query.rel {
            return Err(Error::HeadMismatch {
                expected: instance.query.rel.0,
                found: ruleset.head().0,
            });
        }
        Self::from_shared(instance, ruleset.unique().into(), groundings.to_vec())
    }

    /// `rules` must all carry the query relation as head.
    pub fn from_shared(instance: &LabeledInstance, rules: SharedRules, groundings: Vec<f64>) -> Result<Self> {
        let rel = instance.query.rel;
        if let Some((bad, _)) = rules.iter().find(|(r, _)| r.head() != rel) {
            return Err(Error::HeadMismatch {
                expected: rel.0,
                found: bad.head().0,
            });
        }
        if rules.len() != groundings.len() {
            return Err(Error::InvalidArgument(format!(
                "{} groundings for {} distinct rules",
                groundings.len(),
                rules.len()
            )));
        }
        if let Some(g) = groundings.iter().find(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("grounding value {g}")));
        }
        Ok(Self {
            label: instance.label,
            relation: rel,
            rules,
            groundings,
        })
    }

    /// Grounds every distinct rule of `rules` on `doc`.
    pub fn ground(doc: &Document, instance: &LabeledInstance, rules: SharedRules) -> Result<Self> {
        let q = instance.query;
        let groundings = rules
            .iter()
            .map(|(rule, _)| ground_value(doc, rule.body(), q.head, q.tail))
            .collect();
        Self::from_shared(instance, rules, groundings)
    }

    /// An example that only touches the relation bias.
    pub fn bias_only(instance: &LabeledInstance) -> Self {
        Self {
            label: instance.label,
            relation: instance.query.rel,
            rules: Arc::from(Vec::new()),
            groundings: Vec::new(),
        }
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn relation(&self) -> RelationId {
        self.relation
    }

    /// Each distinct rule with coefficient `multiplicity * grounding`.
    pub fn features(&self) -> impl Iterator<Item = (&Rule, f64)> + '_ {
        self.rules
            .iter()
            .zip(&self.groundings)
            .map(|((rule, mult), g)| (rule, *mult as f64 * g))
    }

    pub fn score(&self, weights: &ExtractorWeights) -> f64 {
        let mut s = weights.bias(self.relation);
        for (rule, coef) in self.features() {
            s += weights.rule_weight(rule) * coef;
        }
        s
    }
}

/// Partial derivatives for every parameter the batch touches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradient {
    pub bias: BTreeMap<RelationId, f64>,
    pub rule_weight: BTreeMap<Rule, f64>,
}

impl Gradient {
    pub fn norm(&self) -> f64 {
        self.bias
            .values()
            .chain(self.rule_weight.values())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum ParamKey {
    Bias(RelationId),
    Rule(Rule),
}

struct Row {
    y: f64,
    bias: usize,
    feats: Vec<(usize, f64)>,
}

struct Block {
    relation: RelationId,
    params: Vec<usize>,
    rows: Vec<Row>,
}

/// The batch in index form, split into independent per-relation blocks.
struct Compiled {
    keys: Vec<ParamKey>,
    blocks: Vec<Block>,
}

impl Compiled {
    fn new(batch: &[TrainingExample]) -> Self {
        let mut index: BTreeMap<ParamKey, usize> = BTreeMap::new();
        let mut keys = Vec::new();
        let mut intern = |k: ParamKey, keys: &mut Vec<ParamKey>| -> usize {
            *index.entry(k.clone()).or_insert_with(|| {
                keys.push(k);
                keys.len() - 1
            })
        };
        // rule sets shared between examples are interned once
        let mut shared: HashMap<usize, Vec<usize>> = HashMap::new();
        let mut blocks: BTreeMap<RelationId, (Block, BTreeSet<usize>)> = BTreeMap::new();
        for ex in batch {
            let bias = intern(ParamKey::Bias(ex.relation), &mut keys);
            let ids = shared
                .entry(ex.rules.as_ptr() as usize)
                .or_insert_with(|| {
                    ex.rules
                        .iter()
                        .map(|(rule, _)| intern(ParamKey::Rule(rule.clone()), &mut keys))
                        .collect()
                })
                .clone();
            let (block, params) = blocks.entry(ex.relation).or_insert_with(|| {
                (
                    Block {
                        relation: ex.relation,
                        params: Vec::new(),
                        rows: Vec::new(),
                    },
                    BTreeSet::new(),
                )
            });
            params.insert(bias);
            params.extend(ids.iter().copied());
            let feats = ids
                .iter()
                .zip(ex.features())
                .filter(|(_, (_, c))| *c != 0.0)
                .map(|(&j, (_, c))| (j, c))
                .collect();
            block.rows.push(Row {
                y: ex.label.sign(),
                bias,
                feats,
            });
        }
        let blocks = blocks
            .into_values()
            .map(|(mut block, params)| {
                block.params = params.into_iter().collect();
                block
            })
            .collect();
        Self { keys, blocks }
    }

    fn theta(&self, weights: &ExtractorWeights) -> Vec<f64> {
        self.keys
            .iter()
            .map(|k| match k {
                ParamKey::Bias(r) => weights.bias(*r),
                ParamKey::Rule(rule) => weights.rule_weight(rule),
            })
            .collect()
    }

    fn write_back(&self, theta: &[f64], weights: &mut ExtractorWeights) -> Result<()> {
        for (k, &w) in self.keys.iter().zip(theta) {
            match k {
                ParamKey::Bias(r) => weights.set_bias(*r, w)?,
                ParamKey::Rule(rule) => weights.set_rule_weight(rule.clone(), w)?,
            }
        }
        Ok(())
    }
}

impl Block {
    fn loss(&self, theta: &[f64], l2: f64) -> f64 {
        let mut loss = 0.0;
        for row in &self.rows {
            let s = row_score(row, theta);
            loss -= log_sigmoid(row.y * s);
        }
        let reg: f64 = self.params.iter().map(|&j| theta[j] * theta[j]).sum();
        loss + 0.5 * l2 * reg
    }

    /// Adds this block's gradient into `grad` and returns its loss.
    fn loss_and_grad(&self, theta: &[f64], l2: f64, grad: &mut [f64]) -> f64 {
        let mut loss = 0.0;
        for row in &self.rows {
            let s = row_score(row, theta);
            loss -= log_sigmoid(row.y * s);
            // d/ds of -log sigma(y s)
            let g = -row.y * sigmoid(-row.y * s);
            grad[row.bias] += g;
            for &(j, c) in &row.feats {
                grad[j] += g * c;
            }
        }
        let mut reg = 0.0;
        for &j in &self.params {
            reg += theta[j] * theta[j];
            grad[j] += l2 * theta[j];
        }
        loss + 0.5 * l2 * reg
    }
}

#[inline]
fn row_score(row: &Row, theta: &[f64]) -> f64 {
    let mut s = theta[row.bias];
    for &(j, c) in &row.feats {
        s += theta[j] * c;
    }
    s
}

/// Sum of `-log sigma(y s)` plus `l2 / 2` times the squared norm of the
/// touched weights, and its gradient over those weights.
pub fn loss_and_grad(
    batch: &[TrainingExample],
    weights: &ExtractorWeights,
    l2: f64,
) -> (f64, Gradient) {
    let compiled = Compiled::new(batch);
    let theta = compiled.theta(weights);
    let mut grad = vec![0.0; theta.len()];
    let loss: f64 = compiled
        .blocks
        .iter()
        .map(|b| b.loss_and_grad(&theta, l2, &mut grad))
        .sum();
    let mut out = Gradient::default();
    for (k, g) in compiled.keys.into_iter().zip(grad) {
        match k {
            ParamKey::Bias(r) => {
                out.bias.insert(r, g);
            }
            ParamKey::Rule(rule) => {
                out.rule_weight.insert(rule, g);
            }
        }
    }
    (loss, out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitStep {
    pub relation: RelationId,
    pub epoch: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    pub step_size: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FitReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Accepted steps, in order.
    pub steps: Vec<FitStep>,
    /// Relations whose descent stalled at float resolution.
    pub stalled: Vec<RelationId>,
}

impl FitReport {
    /// Every accepted step lowered its block loss and the total did not rise.
    pub fn is_descent(&self) -> bool {
        self.final_loss <= self.initial_loss && self.steps.iter().all(|s| s.loss_after < s.loss_before)
    }
}

/// Full-batch gradient descent for `config.epochs` steps.
///
/// The loss separates by query relation, so each relation is descended on its
/// own with a step that halves (up to 20 times) until the loss goes down.
pub fn fit(
    batch: &[TrainingExample],
    weights: &ExtractorWeights,
    config: &FitConfig,
) -> Result<(ExtractorWeights, FitReport)> {
    config.validate()?;
    let compiled = Compiled::new(batch);
    let mut theta = compiled.theta(weights);
    if theta.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite("initial extractor weight".into()));
    }
    let mut report = FitReport::default();
    let mut grad = vec![0.0; theta.len()];
    let mut trial = theta.clone();
    for block in &compiled.blocks {
        let start = block.loss(&theta, config.l2);
        report.initial_loss += start;
        let mut loss = start;
        for epoch in 0..config.epochs {
            for &j in &block.params {
                grad[j] = 0.0;
            }
            block.loss_and_grad(&theta, config.l2, &mut grad);
            let grad_norm = block.params.iter().map(|&j| grad[j] * grad[j]).sum::<f64>().sqrt();
            if grad_norm == 0.0 {
                break;
            }
            let mut eta = config.lr;
            let mut accepted = false;
            let mut trial_loss = f64::NAN;
            for _ in 0..=MAX_HALVINGS {
                for &j in &block.params {
                    trial[j] = theta[j] - eta * grad[j];
                }
                trial_loss = block.loss(&trial, config.l2);
                if trial_loss < loss {
                    accepted = true;
                    break;
                }
                eta *= 0.5;
            }
            if !accepted {
                if (trial_loss - loss).abs() <= 1e-9 * (1.0 + loss.abs()) {
                    report.stalled.push(block.relation);
                    break;
                }
                return Err(Error::Diverged {
                    relation: block.relation.0,
                    epoch,
                    loss,
                    grad_norm,
                    trial_loss,
                });
            }
            for &j in &block.params {
                theta[j] = trial[j];
            }
            report.steps.push(FitStep {
                relation: block.relation,
                epoch,
                loss_before: loss,
                loss_after: trial_loss,
                step_size: eta,
            });
            loss = trial_loss;
        }
        report.final_loss += loss;
    }
    let mut out = weights.clone();
    compiled.write_back(&theta, &mut out)?;
    Ok((out, report))
}
