//! Relation extractor: rules are grounded on the document with the product
//! t-norm, combined into a weighted disjunction score, and squashed into a
//! label probability by a sigmoid.

mod grounding;
mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use grounding::{ground_from, ground_rule, ground_value, path_bodies, GroundingResult};
pub use train::{
    fit, loss_and_grad, FitConfig, FitReport, FitStep, Gradient, SharedRules, TrainingExample,
};

use crate::document::{Document, Label, Triple};
use crate::error::{Error, Result};
use crate::rule::{Rule, RuleSet};
use crate::vocab::{RelationId, RelationVocab};

/// Learnable scalars: a bias per query relation and a weight per
/// (relation, rule). Missing entries read as 0.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExtractorWeights {
    bias: BTreeMap<RelationId, f64>,
    // keyed by rule; the rule head is the relation
    rule_weight: BTreeMap<Rule, f64>,
}

impl ExtractorWeights {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn bias(&self, r: RelationId) -> f64 {
        self.bias.get(&r).copied().unwrap_or(0.0)
    }

    #[inline]
    pub fn rule_weight(&self, rule: &Rule) -> f64 {
        self.rule_weight.get(rule).copied().unwrap_or(0.0)
    }

    pub fn set_bias(&mut self, r: RelationId, w: f64) -> Result<()> {
        if !w.is_finite() {
            return Err(Error::NonFinite(format!("bias for relation {r}")));
        }
        self.bias.insert(r, w);
        Ok(())
    }

    pub fn set_rule_weight(&mut self, rule: Rule, w: f64) -> Result<()> {
        if !w.is_finite() {
            return Err(Error::NonFinite("rule weight".into()));
        }
        self.rule_weight.insert(rule, w);
        Ok(())
    }

    pub fn biases(&self) -> &BTreeMap<RelationId, f64> {
        &self.bias
    }

    pub fn rule_weights(&self) -> &BTreeMap<Rule, f64> {
        &self.rule_weight
    }

    pub fn to_checkpoint(&self, vocab: &RelationVocab) -> ExtractorCheckpoint {
        ExtractorCheckpoint {
            bias: self
                .bias
                .iter()
                .map(|(r, w)| (vocab.name(*r).to_string(), *w))
                .collect(),
            rule_weight: self
                .rule_weight
                .iter()
                .map(|(rule, w)| (rule.display(vocab), *w))
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &ExtractorCheckpoint, vocab: &RelationVocab) -> Result<Self> {
        let mut weights = Self::new();
        for (name, &w) in &ckpt.bias {
            weights.set_bias(vocab.resolve(name)?, w)?;
        }
        for (text, &w) in &ckpt.rule_weight {
            let (rule, _) = Rule::parse(text, vocab)?;
            weights.set_rule_weight(rule, w)?;
        }
        Ok(weights)
    }
}

/// JSON form of [`ExtractorWeights`]: relation names and rule strings as keys.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractorCheckpoint {
    pub bias: BTreeMap<String, f64>,
    pub rule_weight: BTreeMap<String, f64>,
}

fn check_heads(query: &Triple, ruleset: &RuleSet) -> Result<()> {
    if ruleset.head() != query.rel {
        return Err(Error::HeadMismatch {
            expected: query.rel.0,
            found: ruleset.head().0,
        });
    }
    Ok(())
}

/// `bias[r] + sum over rules (with multiplicity) of weight * grounding`.
pub fn score(
    doc: &Document,
    query: &Triple,
    ruleset: &RuleSet,
    weights: &ExtractorWeights,
) -> Result<f64> {
    check_heads(query, ruleset)?;
    let mut s = weights.bias(query.rel);
    for (rule, mult) in ruleset.unique() {
        let w = weights.rule_weight(&rule);
        if w == 0.0 {
            continue;
        }
        s += w * mult as f64 * ground_value(doc, rule.body(), query.head, query.tail);
    }
    Ok(s)
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Probability of label `y` given score `s`.
#[inline]
pub fn prob(y: Label, s: f64) -> f64 {
    sigmoid(y.sign() * s)
}

/// Positive iff the score is strictly positive; returns P(+1) alongside.
pub fn predict(
    doc: &Document,
    query: &Triple,
    ruleset: &RuleSet,
    weights: &ExtractorWeights,
) -> Result<(Label, f64)> {
    let s = score(doc, query, ruleset, weights)?;
    Ok((label_for(s), prob(Label::Positive, s)))
}

#[inline]
pub fn label_for(score: f64) -> Label {
    if score > 0.0 {
        Label::Positive
    } else {
        Label::Negative
    }
}
