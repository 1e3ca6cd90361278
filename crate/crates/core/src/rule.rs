//! Conjunctive chain rules `head(e0, el) <- r1(e0, e1) & ... & rl(el-1, el)`
//! and the multisets of them that form a latent rule set.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::vocab::{RelationId, RelationVocab};

/// Default maximum rule body length.
pub const DEFAULT_MAX_RULE_LEN: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Rule {
    head: RelationId,
    body: Vec<RelationId>,
}

impl Rule {
    pub fn new(head: RelationId, body: Vec<RelationId>) -> Result<Self> {
        if body.is_empty() {
            return Err(Error::InvalidRule("rule body must not be empty".into()));
        }
        Ok(Self { head, body })
    }

    /// `head <- head`, which routes the backbone's direct confidence into the score.
    pub fn identity(head: RelationId) -> Self {
        Self {
            head,
            body: vec![head],
        }
    }

    #[inline]
    pub fn head(&self) -> RelationId {
        self.head
    }

    #[inline]
    pub fn body(&self) -> &[RelationId] {
        &self.body
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.body.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.body.is_empty()
    }

    pub fn validate(&self, vocab: &RelationVocab, max_len: usize) -> Result<()> {
        vocab.check(self.head)?;
        if self.body.len() > max_len {
            return Err(Error::InvalidRule(format!(
                "body length {} exceeds the maximum of {max_len}",
                self.body.len()
            )));
        }
        for &r in &self.body {
            vocab.check(r)?;
        }
        Ok(())
    }

    /// Renders `head <- r1 & r2`.
    pub fn display(&self, vocab: &RelationVocab) -> String {
        let mut out = String::new();
        out.push_str(vocab.name(self.head));
        out.push_str(" <-");
        for (i, &r) in self.body.iter().enumerate() {
            if i > 0 {
                out.push_str(" &");
            }
            let _ = write!(out, " {}", vocab.name(r));
        }
        out
    }

    /// Parses one line of the rule text format, `head <- r1 & r2 [weight]`.
    /// A missing weight reads as 0.
    pub fn parse(line: &str, vocab: &RelationVocab) -> Result<(Rule, f64)> {
        let (head, rest) = line
            .split_once("<-")
            .ok_or_else(|| Error::InvalidRule(format!("missing `<-` in `{line}`")))?;
        let head = vocab.resolve(head.trim())?;
        let mut parts: Vec<&str> = rest.split('&').map(str::trim).collect();
        let mut weight = 0.0;
        if let Some(last) = parts.last_mut() {
            let mut tokens = last.split_whitespace();
            let name = tokens.next().unwrap_or("");
            if let Some(w) = tokens.next() {
                weight = w
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidRule(format!("bad weight `{w}` in `{line}`")))?;
                if !weight.is_finite() {
                    return Err(Error::InvalidRule(format!("non-finite weight in `{line}`")));
                }
            }
            if tokens.next().is_some() {
                return Err(Error::InvalidRule(format!("trailing tokens in `{line}`")));
            }
            *last = name;
        }
        let mut body = Vec::with_capacity(parts.len());
        for name in parts {
            if name.is_empty() {
                return Err(Error::InvalidRule(format!("empty body atom in `{line}`")));
            }
            body.push(vocab.resolve(name)?);
        }
        Ok((Rule::new(head, body)?, weight))
    }
}

/// Parses a whole rule file; blank lines and `#` comments are skipped.
pub fn parse_rules(text: &str, vocab: &RelationVocab) -> Result<Vec<(Rule, f64)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parsed = Rule::parse(line, vocab).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        out.push(parsed);
    }
    Ok(out)
}

/// Renders rules one per line, with the weight when given.
pub fn format_rules<'a>(
    rules: impl IntoIterator<Item = (&'a Rule, Option<f64>)>,
    vocab: &RelationVocab,
) -> String {
    let mut out = String::new();
    for (rule, weight) in rules {
        out.push_str(&rule.display(vocab));
        if let Some(w) = weight {
            let _ = write!(out, " {w}");
        }
        out.push('\n');
    }
    out
}

/// A multiset of rules sharing one head relation. Duplicates are kept.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RuleSet {
    rules: Vec<Rule>,
}

impl RuleSet {
    pub fn new(rules: Vec<Rule>) -> Result<Self> {
        let Some(first) = rules.first() else {
            return Err(Error::InvalidArgument("rule set must not be empty".into()));
        };
        let head = first.head();
        if let Some(bad) = rules.iter().find(|r| r.head() != head) {
            return Err(Error::HeadMismatch {
                expected: head.0,
                found: bad.head().0,
            });
        }
        Ok(Self { rules })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.rules.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn head(&self) -> RelationId {
        self.rules[0].head()
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    /// Distinct rules with multiplicities, in rule order.
    pub fn unique(&self) -> Vec<(Rule, usize)> {
        let mut counts: BTreeMap<&Rule, usize> = BTreeMap::new();
        for r in &self.rules {
            *counts.entry(r).or_default() += 1;
        }
        counts.into_iter().map(|(r, c)| (r.clone(), c)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn vocab() -> RelationVocab {
        RelationVocab::build(&["father", "spouse", "mother"], &BTreeSet::from(["spouse".into()]))
            .unwrap()
    }

    #[test]
    fn parses_with_and_without_weight() {
        let v = vocab();
        let (rule, w) = Rule::parse("mother <- father & spouse", &v).unwrap();
        assert_eq!(rule.display(&v), "mother <- father & spouse");
        assert_eq!(w, 0.0);
        let (rule, w) = Rule::parse("mother<-father⁻¹&spouse 1.5", &v).unwrap();
        assert_eq!(rule.body()[0], v.id("father⁻¹").unwrap());
        assert_eq!(w, 1.5);
        let (rule2, _) = Rule::parse("mother <- father^-1 & spouse", &v).unwrap();
        assert_eq!(rule, rule2);
    }

    #[test]
    fn rejects_malformed_lines() {
        let v = vocab();
        for bad in [
            "mother father",
            "mother <-",
            "mother <- & father",
            "mother <- uncle",
            "mother <- father 1 2",
            "mother <- father x",
        ] {
            assert!(Rule::parse(bad, &v).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn validate_checks_length() {
        let v = vocab();
        let r = RelationId(0);
        let long = Rule::new(r, vec![r; 4]).unwrap();
        assert!(long.validate(&v, 3).is_err());
        assert!(long.validate(&v, 4).is_ok());
        assert!(Rule::new(r, vec![]).is_err());
    }

    #[test]
    fn ruleset_multiplicities_sum_to_size() {
        let a = Rule::new(RelationId(2), vec![RelationId(0)]).unwrap();
        let b = Rule::new(RelationId(2), vec![RelationId(1), RelationId(0)]).unwrap();
        let set = RuleSet::new(vec![a.clone(), b.clone(), a.clone()]).unwrap();
        let unique = set.unique();
        assert_eq!(unique, vec![(a, 2), (b, 1)]);
        assert_eq!(unique.iter().map(|(_, c)| c).sum::<usize>(), 3);
    }

    #[test]
    fn ruleset_rejects_mixed_heads() {
        let a = Rule::identity(RelationId(0));
        let b = Rule::identity(RelationId(1));
        assert!(matches!(RuleSet::new(vec![a, b]), Err(Error::HeadMismatch { .. })));
        assert!(RuleSet::new(vec![]).is_err());
    }

    proptest! {
        #[test]
        fn text_format_round_trips(head in 0u32..5, body in prop::collection::vec(0u32..5, 1..=3)) {
            let v = vocab();
            let rule = Rule::new(RelationId(head), body.into_iter().map(RelationId).collect()).unwrap();
            let (parsed, _) = Rule::parse(&rule.display(&v), &v).unwrap();
            prop_assert_eq!(parsed, rule);
        }
    }
}
