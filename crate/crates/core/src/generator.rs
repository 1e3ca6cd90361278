//! Autoregressive rule generator.
//!
//! Rule bodies are generated token by token conditioned on the head relation,
//! the position in the body and the last `order` body tokens. Each context
//! keeps weighted counts over relation ids plus STOP; the next-token
//! distribution interpolates additively smoothed estimates from the longest
//! context down to the (head, position) context with fixed weights. STOP is masked at the first position and forced once the
//! body reaches the maximum length, so every body has length in `1..=max_len`.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rule::{Rule, RuleSet, DEFAULT_MAX_RULE_LEN};
use crate::vocab::{RelationId, RelationVocab};

const MAX_ORDER: usize = 6;
const MAX_LEN: usize = 255;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Number of previous body tokens in the longest context.
    pub order: usize,
    /// Additive smoothing per symbol.
    pub alpha: f64,
    /// Interpolation weights for context depths `order, order-1, ..., 0`.
    pub lambdas: Vec<f64>,
    pub max_len: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            order: 2,
            alpha: 0.1,
            lambdas: vec![0.6, 0.3, 0.1],
            max_len: DEFAULT_MAX_RULE_LEN,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.order > MAX_ORDER {
            return Err(Error::InvalidArgument(format!(
                "generator order {} exceeds {MAX_ORDER}",
                self.order
            )));
        }
        if self.lambdas.len() != self.order + 1 {
            return Err(Error::InvalidArgument(format!(
                "expected {} interpolation weights, got {}",
                self.order + 1,
                self.lambdas.len()
            )));
        }
        if self.lambdas.iter().any(|&l| !l.is_finite() || l < 0.0) {
            return Err(Error::InvalidArgument(
                "interpolation weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = self.lambdas.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "interpolation weights sum to {total}, not 1"
            )));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidArgument("smoothing must be positive".into()));
        }
        if self.max_len == 0 || self.max_len > MAX_LEN {
            return Err(Error::InvalidArgument(format!(
                "max rule length must lie in 1..={MAX_LEN}"
            )));
        }
        Ok(())
    }
}

type ContextKey = u128;

/// Packs (depth, body position, head, last `depth` tokens) into one key.
fn context_key(head: RelationId, position: usize, suffix: &[RelationId]) -> ContextKey {
    let mut key = suffix.len() as u128 | (position as u128) << 8 | (head.0 as u128) << 16;
    for (i, r) in suffix.iter().enumerate() {
        key |= (r.0 as u128) << (32 + 16 * i);
    }
    key
}

#[derive(Clone, Debug)]
pub struct AutoregRuleModel {
    relation_names: Vec<String>,
    config: GeneratorConfig,
    // per context: counts over relations then STOP, followed by their total
    counts: HashMap<ContextKey, Vec<f64>>,
}

impl AutoregRuleModel {
    /// A model with empty counts: every context is uniform up to the STOP masks.
    pub fn new(vocab: &RelationVocab, config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        if vocab.len() >= u16::MAX as usize {
            return Err(Error::InvalidArgument("vocabulary too large for the generator".into()));
        }
        Ok(Self {
            relation_names: vocab.names().to_vec(),
            config,
            counts: HashMap::new(),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn max_len(&self) -> usize {
        self.config.max_len
    }

    pub fn num_relations(&self) -> usize {
        self.relation_names.len()
    }

    /// Index of STOP in distributions returned by [`Self::conditional`].
    pub fn stop(&self) -> usize {
        self.relation_names.len()
    }

    fn num_symbols(&self) -> usize {
        self.relation_names.len() + 1
    }

    fn check_head(&self, head: RelationId) -> Result<()> {
        if head.index() < self.num_relations() {
            Ok(())
        } else {
            Err(Error::RelationOutOfRange {
                id: head.0,
                len: self.num_relations(),
            })
        }
    }

    fn check_body(&self, body: &[RelationId]) -> Result<()> {
        if body.is_empty() || body.len() > self.config.max_len {
            return Err(Error::InvalidRule(format!(
                "body length {} outside 1..={}",
                body.len(),
                self.config.max_len
            )));
        }
        for &r in body {
            self.check_head(r)?;
        }
        Ok(())
    }

    /// Writes P(next | head, prefix) over relations and STOP into `out`.
    pub fn conditional_into(&self, head: RelationId, prefix: &[RelationId], out: &mut [f64]) {
        let v = self.num_symbols();
        debug_assert_eq!(out.len(), v);
        let stop = self.stop();
        let n = prefix.len();
        out.fill(0.0);
        if n >= self.config.max_len {
            out[stop] = 1.0;
            return;
        }
        let alpha = self.config.alpha;
        let order = self.config.order;
        for (d, &lambda) in self.config.lambdas.iter().enumerate() {
            if lambda == 0.0 {
                continue;
            }
            let depth = (order - d).min(n);
            let key = context_key(head, n, &prefix[n - depth..]);
            match self.counts.get(&key) {
                Some(c) => {
                    let denom = c[v] + alpha * v as f64;
                    for (o, &x) in out.iter_mut().zip(c) {
                        *o += lambda * (x + alpha) / denom;
                    }
                }
                None => {
                    let p = lambda / v as f64;
                    out.iter_mut().for_each(|o| *o += p);
                }
            }
        }
        if n == 0 {
            out[stop] = 0.0;
        }
        let total: f64 = out.iter().sum();
        out.iter_mut().for_each(|o| *o /= total);
    }

    pub fn conditional(&self, head: RelationId, prefix: &[RelationId]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_symbols()];
        self.conditional_into(head, prefix, &mut out);
        out
    }

    /// Log-probability of generating `body` followed by STOP under `head`.
    pub fn log_prob(&self, head: RelationId, body: &[RelationId]) -> Result<f64> {
        self.check_head(head)?;
        self.check_body(body)?;
        Ok(self.log_prob_unchecked(head, body))
    }

    pub fn rule_log_prob(&self, rule: &Rule) -> Result<f64> {
        self.log_prob(rule.head(), rule.body())
    }

    fn log_prob_unchecked(&self, head: RelationId, body: &[RelationId]) -> f64 {
        let mut buf = vec![0.0; self.num_symbols()];
        let mut lp = 0.0;
        for i in 0..body.len() {
            self.conditional_into(head, &body[..i], &mut buf);
            lp += buf[body[i].index()].ln();
        }
        self.conditional_into(head, body, &mut buf);
        lp + buf[self.stop()].ln()
    }

    /// Draws one rule token by token.
    pub fn sample_rule<R: Rng + ?Sized>(&self, head: RelationId, rng: &mut R) -> Rule {
        let stop = self.stop();
        let mut buf = vec![0.0; self.num_symbols()];
        let mut body = Vec::with_capacity(self.config.max_len);
        loop {
            self.conditional_into(head, &body, &mut buf);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &p) in buf.iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                acc += p;
                pick = Some(i);
                if u < acc {
                    break;
                }
            }
            let next = pick.expect("conditional has positive mass");
            if next == stop {
                break;
            }
            body.push(RelationId(next as u32));
        }
        Rule::new(head, body).expect("STOP is masked at the first position")
    }

    /// `n` independent draws.
    pub fn sample_ruleset<R: Rng + ?Sized>(
        &self,
        head: RelationId,
        n: usize,
        rng: &mut R,
    ) -> Result<RuleSet> {
        self.check_head(head)?;
        if n == 0 {
            return Err(Error::InvalidArgument("rule set size must be at least 1".into()));
        }
        RuleSet::new((0..n).map(|_| self.sample_rule(head, rng)).collect())
    }

    /// The `n` most probable distinct rules found by beam search, ordered by
    /// decreasing log-probability with ties broken by body order. When fewer
    /// than `n` distinct rules exist the best one is repeated to fill the set.
    pub fn top_rules(&self, head: RelationId, n: usize, beam: usize) -> Result<RuleSet> {
        let scored = self.top_rules_scored(head, n, beam)?;
        let best = scored[0].0.clone();
        let mut rules: Vec<Rule> = scored.into_iter().map(|(r, _)| r).collect();
        while rules.len() < n {
            rules.push(best.clone());
        }
        RuleSet::new(rules)
    }

    /// Distinct rules from the beam search with their log-probabilities.
    pub fn top_rules_scored(
        &self,
        head: RelationId,
        n: usize,
        beam: usize,
    ) -> Result<Vec<(Rule, f64)>> {
        self.check_head(head)?;
        if n == 0 {
            return Err(Error::InvalidArgument("rule set size must be at least 1".into()));
        }
        let beam = beam.max(n);
        let stop = self.stop();
        let mut buf = vec![0.0; self.num_symbols()];
        let mut frontier: Vec<(Vec<RelationId>, f64)> = vec![(Vec::new(), 0.0)];
        let mut complete: Vec<(Vec<RelationId>, f64)> = Vec::new();
        for _ in 0..self.config.max_len {
            let mut next: Vec<(Vec<RelationId>, f64)> = Vec::new();
            for (prefix, lp) in &frontier {
                self.conditional_into(head, prefix, &mut buf);
                for r in 0..self.num_relations() {
                    let mut body = prefix.clone();
                    body.push(RelationId(r as u32));
                    next.push((body, lp + buf[r].ln()));
                }
            }
            for (body, lp) in &next {
                self.conditional_into(head, body, &mut buf);
                complete.push((body.clone(), lp + buf[stop].ln()));
            }
            next.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            next.truncate(beam);
            frontier = next;
        }
        complete.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        complete.truncate(n);
        complete
            .into_iter()
            .map(|(body, lp)| Ok((Rule::new(head, body)?, lp)))
            .collect()
    }

    /// Adds `weight` to the count of every (context, next-token) event of
    /// each rule, STOP included. The STOP forced at the maximum length carries
    /// no information and is not counted.
    pub fn fit_weighted(&mut self, head: RelationId, weighted: &[(Rule, f64)]) -> Result<()> {
        self.check_head(head)?;
        let mut any_positive = false;
        for (rule, w) in weighted {
            if !w.is_finite() || *w < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "rule weight must be finite and non-negative, got {w}"
                )));
            }
            if rule.head() != head {
                return Err(Error::HeadMismatch {
                    expected: head.0,
                    found: rule.head().0,
                });
            }
            self.check_body(rule.body())?;
            any_positive |= *w > 0.0;
        }
        if !any_positive {
            return Err(Error::ZeroWeights);
        }
        let v = self.num_symbols();
        let stop = self.stop();
        for (rule, w) in weighted {
            if *w == 0.0 {
                continue;
            }
            let body = rule.body();
            let events = body.len().min(self.config.max_len - 1) + 1;
            for i in 0..events {
                let next = if i < body.len() { body[i].index() } else { stop };
                for depth in 0..=self.config.order.min(i) {
                    let key = context_key(head, i, &body[i - depth..i]);
                    let c = self.counts.entry(key).or_insert_with(|| vec![0.0; v + 1]);
                    c[next] += w;
                    c[v] += w;
                }
            }
        }
        Ok(())
    }

    /// Serializes counts keyed by `head|position|t1,t2` context strings.
    pub fn to_checkpoint(&self) -> GeneratorCheckpoint {
        let v = self.num_symbols();
        let mut counts = BTreeMap::new();
        for (&key, c) in &self.counts {
            let len = (key & 0xff) as usize;
            let position = (key >> 8) & 0xff;
            let head = ((key >> 16) & 0xffff) as usize;
            let tokens: Vec<&str> = (0..len)
                .map(|i| self.relation_names[((key >> (32 + 16 * i)) & 0xffff) as usize].as_str())
                .collect();
            let name = format!("{}|{position}|{}", self.relation_names[head], tokens.join(","));
            counts.insert(name, c[..v].to_vec());
        }
        GeneratorCheckpoint {
            relations: self.relation_names.clone(),
            config: self.config.clone(),
            counts,
        }
    }

    pub fn from_checkpoint(ckpt: &GeneratorCheckpoint, vocab: &RelationVocab) -> Result<Self> {
        if ckpt.relations != vocab.names() {
            return Err(Error::InvalidArgument(
                "generator checkpoint was built for a different vocabulary".into(),
            ));
        }
        let mut model = Self::new(vocab, ckpt.config.clone())?;
        let v = model.num_symbols();
        for (ctx, c) in &ckpt.counts {
            let bad = || Error::InvalidArgument(format!("bad context `{ctx}`"));
            let mut fields = ctx.splitn(3, '|');
            let (Some(head), Some(position), Some(rest)) = (fields.next(), fields.next(), fields.next())
            else {
                return Err(bad());
            };
            let head = vocab.resolve(head)?;
            let position: usize = position.parse().map_err(|_| bad())?;
            let suffix = if rest.is_empty() {
                Vec::new()
            } else {
                rest.split(',').map(|n| vocab.resolve(n)).collect::<Result<Vec<_>>>()?
            };
            if suffix.len() > model.config.order.min(position)
                || position >= model.config.max_len
                || c.len() != v
            {
                return Err(Error::InvalidArgument(format!("bad context entry `{ctx}`")));
            }
            if c.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::NonFinite(format!("counts for context `{ctx}`")));
            }
            let mut row = c.clone();
            row.push(c.iter().sum());
            model.counts.insert(context_key(head, position, &suffix), row);
        }
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorCheckpoint {
    pub relations: Vec<String>,
    pub config: GeneratorConfig,
    pub counts: BTreeMap<String, Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn self_inverse_vocab(n: usize) -> RelationVocab {
        let names: Vec<String> = (0..n).map(|i| format!("r{i}")).collect();
        let all: BTreeSet<String> = names.iter().cloned().collect();
        RelationVocab::build(&names, &all).unwrap()
    }

    fn rel(i: u32) -> RelationId {
        RelationId(i)
    }

    fn all_bodies(nrel: usize, max_len: usize) -> Vec<Vec<RelationId>> {
        let mut out = Vec::new();
        let mut layer: Vec<Vec<RelationId>> = vec![vec![]];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for p in &layer {
                for r in 0..nrel {
                    let mut b = p.clone();
                    b.push(rel(r as u32));
                    next.push(b);
                }
            }
            out.extend(next.iter().cloned());
            layer = next;
        }
        out
    }

    #[test]
    fn uniform_length_one_log_prob() {
        let model = AutoregRuleModel::new(&self_inverse_vocab(4), GeneratorConfig::default()).unwrap();
        let lp = model.log_prob(rel(0), &[rel(1)]).unwrap();
        assert!((lp - ((0.25f64).ln() + (0.2f64).ln())).abs() < 1e-12);
        assert!((lp + 2.9957).abs() < 1e-4);
    }

    #[test]
    fn stop_is_forced_at_max_len() {
        let model = AutoregRuleModel::new(&self_inverse_vocab(4), GeneratorConfig::default()).unwrap();
        let body = [rel(1), rel(2), rel(3)];
        let p = model.conditional(rel(0), &body);
        assert_eq!(p[model.stop()], 1.0);
        let lp = model.log_prob(rel(0), &body).unwrap();
        let expected = (0.25f64).ln() + 2.0 * (0.2f64).ln();
        assert!((lp - expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_bodies() {
        let model = AutoregRuleModel::new(&self_inverse_vocab(4), GeneratorConfig::default()).unwrap();
        assert!(model.log_prob(rel(0), &[]).is_err());
        assert!(model.log_prob(rel(0), &[rel(0); 4]).is_err());
        assert!(model.log_prob(rel(0), &[rel(7)]).is_err());
    }

    #[test]
    fn conditionals_are_normalized_and_positive() {
        let vocab = self_inverse_vocab(5);
        let mut model = AutoregRuleModel::new(&vocab, GeneratorConfig::default()).unwrap();
        let rules = vec![
            (Rule::new(rel(0), vec![rel(1), rel(2)]).unwrap(), 2.0),
            (Rule::new(rel(0), vec![rel(3)]).unwrap(), 0.5),
            (Rule::new(rel(0), vec![rel(1), rel(2), rel(4)]).unwrap(), 1.0),
        ];
        model.fit_weighted(rel(0), &rules).unwrap();
        let mut prefixes = vec![vec![]];
        prefixes.extend(all_bodies(5, 2));
        for prefix in prefixes {
            let p = model.conditional(rel(0), &prefix);
            let total: f64 = p.iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
            for (i, &x) in p.iter().enumerate() {
                if prefix.is_empty() && i == model.stop() {
                    assert_eq!(x, 0.0);
                } else {
                    assert!(x > 0.0);
                }
            }
        }
    }

    #[test]
    fn probabilities_sum_to_one_over_all_rules() {
        let vocab = self_inverse_vocab(4);
        let mut model = AutoregRuleModel::new(&vocab, GeneratorConfig::default()).unwrap();
        let sum = |m: &AutoregRuleModel| -> f64 {
            all_bodies(4, 3)
                .iter()
                .map(|b| m.log_prob(rel(1), b).unwrap().exp())
                .sum()
        };
        assert!((sum(&model) - 1.0).abs() < 1e-9);
        model
            .fit_weighted(rel(1), &[(Rule::new(rel(1), vec![rel(2), rel(0)]).unwrap(), 3.0)])
            .unwrap();
        assert!((sum(&model) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_model_always_samples_the_same_rule() {
        let vocab = self_inverse_vocab(3);
        let config = GeneratorConfig {
            alpha: 1e-300,
            lambdas: vec![1.0, 0.0, 0.0],
            max_len: 2,
            ..GeneratorConfig::default()
        };
        let mut model = AutoregRuleModel::new(&vocab, config).unwrap();
        let rule = Rule::new(rel(0), vec![rel(2)]).unwrap();
        model.fit_weighted(rel(0), &[(rule.clone(), 1.0)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            assert_eq!(model.sample_rule(rel(0), &mut rng), rule);
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let model = AutoregRuleModel::new(&self_inverse_vocab(6), GeneratorConfig::default()).unwrap();
        let a = model.sample_ruleset(rel(2), 50, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = model.sample_ruleset(rel(2), 50, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        assert_eq!(a.unique().iter().map(|(_, c)| c).sum::<usize>(), 50);
        let one = model.sample_ruleset(rel(2), 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(one.len(), 1);
        assert!(model.sample_ruleset(rel(2), 0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn sampled_lengths_follow_the_truncated_geometric_law() {
        // Uniform model over 4 relations, max length 3: first token never
        // stops, later positions stop with probability 1/5.
        let model = AutoregRuleModel::new(&self_inverse_vocab(4), GeneratorConfig::default()).unwrap();
        let q = 1.0 / 5.0;
        let law = [q, (1.0 - q) * q, (1.0 - q) * (1.0 - q)];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 100_000;
        let mut hist = [0usize; 3];
        for _ in 0..draws {
            hist[model.sample_rule(rel(0), &mut rng).len() - 1] += 1;
        }
        for (h, p) in hist.iter().zip(law) {
            assert!((*h as f64 / draws as f64 - p).abs() < 0.01, "{hist:?} vs {law:?}");
        }
    }

    #[test]
    fn top_rules_orders_by_log_prob_then_body() {
        let vocab = self_inverse_vocab(2);
        let config = GeneratorConfig {
            max_len: 1,
            ..GeneratorConfig::default()
        };
        let model = AutoregRuleModel::new(&vocab, config).unwrap();
        let top = model.top_rules(rel(0), 2, 2).unwrap();
        let bodies: Vec<&[RelationId]> = top.rules().iter().map(|r| r.body()).collect();
        assert_eq!(bodies, vec![&[rel(0)][..], &[rel(1)][..]]);
    }

    #[test]
    fn top_rules_pads_with_the_best_rule() {
        let vocab = self_inverse_vocab(2);
        let config = GeneratorConfig {
            max_len: 1,
            ..GeneratorConfig::default()
        };
        let mut model = AutoregRuleModel::new(&vocab, config).unwrap();
        model
            .fit_weighted(rel(0), &[(Rule::new(rel(0), vec![rel(1)]).unwrap(), 5.0)])
            .unwrap();
        let top = model.top_rules(rel(0), 4, 4).unwrap();
        assert_eq!(top.len(), 4);
        let best = Rule::new(rel(0), vec![rel(1)]).unwrap();
        assert_eq!(top.rules()[0], best);
        assert_eq!(top.rules()[1], Rule::new(rel(0), vec![rel(0)]).unwrap());
        assert_eq!(&top.rules()[2..], &[best.clone(), best]);
    }

    #[test]
    fn top_rules_log_probs_are_non_increasing_and_exact() {
        let vocab = self_inverse_vocab(4);
        let mut model = AutoregRuleModel::new(&vocab, GeneratorConfig::default()).unwrap();
        model
            .fit_weighted(
                rel(3),
                &[
                    (Rule::new(rel(3), vec![rel(0), rel(1)]).unwrap(), 4.0),
                    (Rule::new(rel(3), vec![rel(2), rel(1), rel(1)]).unwrap(), 2.0),
                    (Rule::new(rel(3), vec![rel(3)]).unwrap(), 1.0),
                ],
            )
            .unwrap();
        let scored = model.top_rules_scored(rel(3), 20, 40).unwrap();
        assert_eq!(scored.len(), 20);
        for w in scored.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
        for (rule, lp) in &scored {
            assert_eq!(*lp, model.rule_log_prob(rule).unwrap());
        }
        // Exhaustive check: beam width covering every prefix finds the true top 20.
        let mut all: Vec<(Vec<RelationId>, f64)> = all_bodies(4, 3)
            .into_iter()
            .map(|b| {
                let lp = model.log_prob(rel(3), &b).unwrap();
                (b, lp)
            })
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let wide = model.top_rules_scored(rel(3), 20, 1000).unwrap();
        let got: Vec<&[RelationId]> = wide.iter().map(|(r, _)| r.body()).collect();
        let want: Vec<&[RelationId]> = all[..20].iter().map(|(b, _)| b.as_slice()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn fitting_a_rule_raises_its_probability() {
        let vocab = self_inverse_vocab(4);
        let config = GeneratorConfig {
            alpha: 1e-9,
            ..GeneratorConfig::default()
        };
        let mut model = AutoregRuleModel::new(&vocab, config).unwrap();
        let rule = Rule::new(rel(0), vec![rel(2), rel(1)]).unwrap();
        let before = model.rule_log_prob(&rule).unwrap();
        model.fit_weighted(rel(0), &[(rule.clone(), 1.0)]).unwrap();
        assert!(model.rule_log_prob(&rule).unwrap() > before);
    }

    #[test]
    fn first_token_ratio_follows_weights() {
        let vocab = self_inverse_vocab(4);
        let config = GeneratorConfig {
            alpha: 1e-9,
            ..GeneratorConfig::default()
        };
        let mut model = AutoregRuleModel::new(&vocab, config).unwrap();
        let a = Rule::new(rel(0), vec![rel(1)]).unwrap();
        let b = Rule::new(rel(0), vec![rel(2)]).unwrap();
        model.fit_weighted(rel(0), &[(a, 0.9), (b, 0.1)]).unwrap();
        let p = model.conditional(rel(0), &[]);
        assert!((p[1] / p[2] - 9.0).abs() < 1e-6);
    }

    #[test]
    fn zero_weight_rules_contribute_nothing() {
        let vocab = self_inverse_vocab(4);
        let a = Rule::new(rel(0), vec![rel(1), rel(3)]).unwrap();
        let b = Rule::new(rel(0), vec![rel(2)]).unwrap();
        let mut m1 = AutoregRuleModel::new(&vocab, GeneratorConfig::default()).unwrap();
        let mut m2 = m1.clone();
        m1.fit_weighted(rel(0), &[(a.clone(), 1.0), (b, 0.0)]).unwrap();
        m2.fit_weighted(rel(0), &[(a, 1.0)]).unwrap();
        assert_eq!(m1.to_checkpoint(), m2.to_checkpoint());
    }

    #[test]
    fn fit_rejects_bad_input() {
        let vocab = self_inverse_vocab(4);
        let mut model = AutoregRuleModel::new(&vocab, GeneratorConfig::default()).unwrap();
        let a = Rule::new(rel(0), vec![rel(1)]).unwrap();
        assert!(matches!(
            model.fit_weighted(rel(0), &[(a.clone(), 0.0)]),
            Err(Error::ZeroWeights)
        ));
        assert!(model.fit_weighted(rel(0), &[(a.clone(), f64::NAN)]).is_err());
        assert!(model.fit_weighted(rel(0), &[(a.clone(), -1.0)]).is_err());
        assert!(model.fit_weighted(rel(1), &[(a, 1.0)]).is_err());
    }

    #[test]
    fn own_distribution_is_a_fixpoint_for_single_token_rules() {
        // With length-1 rules every event lives in the head-only context, so
        // refitting a fresh model on a distribution's expected counts
        // reproduces that distribution up to the smoothing mass.
        let vocab = self_inverse_vocab(4);
        let config = GeneratorConfig {
            alpha: 1e-8,
            max_len: 1,
            ..GeneratorConfig::default()
        };
        let mut model = AutoregRuleModel::new(&vocab, config.clone()).unwrap();
        model
            .fit_weighted(
                rel(0),
                &[
                    (Rule::new(rel(0), vec![rel(1)]).unwrap(), 3.0),
                    (Rule::new(rel(0), vec![rel(2)]).unwrap(), 1.0),
                ],
            )
            .unwrap();
        let expected: Vec<(Rule, f64)> = (0..4)
            .map(|r| {
                let rule = Rule::new(rel(0), vec![rel(r)]).unwrap();
                let p = model.rule_log_prob(&rule).unwrap().exp();
                (rule, 1000.0 * p)
            })
            .collect();
        let mut refit = AutoregRuleModel::new(&vocab, config).unwrap();
        refit.fit_weighted(rel(0), &expected).unwrap();
        for (rule, _) in &expected {
            let a = model.rule_log_prob(rule).unwrap().exp();
            let b = refit.rule_log_prob(rule).unwrap().exp();
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let vocab = RelationVocab::build(&["a", "b"], &BTreeSet::new()).unwrap();
        let mut model = AutoregRuleModel::new(&vocab, GeneratorConfig::default()).unwrap();
        model
            .fit_weighted(rel(0), &[(Rule::new(rel(0), vec![rel(3), rel(1)]).unwrap(), 0.75)])
            .unwrap();
        let json = serde_json::to_string(&model.to_checkpoint()).unwrap();
        assert!(json.contains("\"a|1|b⁻¹\""), "{json}");
        let ckpt: GeneratorCheckpoint = serde_json::from_str(&json).unwrap();
        let back = AutoregRuleModel::from_checkpoint(&ckpt, &vocab).unwrap();
        for b in all_bodies(4, 3) {
            assert_eq!(model.log_prob(rel(0), &b).unwrap(), back.log_prob(rel(0), &b).unwrap());
        }
        let other = RelationVocab::build(&["a", "c"], &BTreeSet::new()).unwrap();
        assert!(AutoregRuleModel::from_checkpoint(&ckpt, &other).is_err());
    }
}
