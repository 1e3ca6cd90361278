//! Synthetic corpora with planted rules, noisy backbone confidences and
//! hidden rule-derived facts.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::document::{write_corpus, Corpus, Document, EntityId, Label, LabeledInstance, Triple};
use crate::error::{Error, Result};
use crate::rule::{format_rules, Rule, DEFAULT_MAX_RULE_LEN};
use crate::seed::rng_for;
use crate::vocab::{RelationId, RelationVocab};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const RULES_FILE: &str = "rules.txt";
pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub relations: usize,
    pub self_inverse: BTreeSet<String>,
    /// Planted rules in the rule text format, over relations `r0, r1, ...`.
    pub planted_rules: Vec<String>,
    pub docs: usize,
    /// Inclusive range of entities per document.
    pub entities: (usize, usize),
    /// Inclusive range of randomly sampled facts per document.
    pub base_facts: (usize, usize),
    /// Inclusive range of body chains laid down per planted rule and document.
    pub chains_per_rule: (usize, usize),
    /// Distinct entity names shared across documents.
    pub entity_pool: usize,
    pub p_flip: f64,
    pub jitter: f64,
    pub p_hide: f64,
    /// Negative instances per positive.
    pub negative_ratio: usize,
    /// Train, dev and test fractions.
    pub split: (f64, f64, f64),
    pub max_rule_len: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            relations: 10,
            self_inverse: BTreeSet::new(),
            planted_rules: vec![
                "r7 <- r0 & r1".into(),
                "r8 <- r2 & r3^-1".into(),
                "r9 <- r4 & r5 & r6".into(),
            ],
            docs: 300,
            entities: (8, 12),
            base_facts: (6, 10),
            chains_per_rule: (3, 4),
            entity_pool: 200,
            p_flip: 0.05,
            jitter: 0.2,
            p_hide: 0.5,
            negative_ratio: 4,
            split: (2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0),
            max_rule_len: DEFAULT_MAX_RULE_LEN,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn vocab(&self) -> Result<RelationVocab> {
        let names: Vec<String> = (0..self.relations).map(|i| format!("r{i}")).collect();
        RelationVocab::build(&names, &self.self_inverse)
    }

    /// Checks the configuration and parses the planted rules.
    pub fn validate(&self) -> Result<(RelationVocab, Vec<Rule>)> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.relations == 0 {
            return bad("at least one relation is required".into());
        }
        for (name, p) in [("p_flip", self.p_flip), ("jitter", self.jitter), ("p_hide", self.p_hide)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.jitter >= 0.5 {
            return bad("jitter must stay below 0.5 so true and false atoms separate".into());
        }
        let (a, b, c) = self.split;
        if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions must be in [0, 1] and sum to 1, got {a}, {b}, {c}"));
        }
        for (name, (lo, hi)) in [
            ("entities", self.entities),
            ("base_facts", self.base_facts),
            ("chains_per_rule", self.chains_per_rule),
        ] {
            if lo > hi {
                return bad(format!("{name} range is empty: {lo}..={hi}"));
            }
        }
        if self.entities.0 < 2 {
            return bad("documents need at least two entities".into());
        }
        if self.entity_pool < self.entities.1 {
            return bad(format!(
                "entity pool of {} cannot fill documents of {} entities",
                self.entity_pool, self.entities.1
            ));
        }
        if self.docs == 0 {
            return bad("docs must be positive".into());
        }
        let vocab = self.vocab()?;
        let mut rules = Vec::new();
        for text in &self.planted_rules {
            let (rule, _) = Rule::parse(text, &vocab)?;
            rule.validate(&vocab, self.max_rule_len)?;
            if !vocab.is_base(rule.head()) {
                return bad(format!("planted rule `{text}` must have a base head"));
            }
            if rule.len() + 1 > self.entities.0 && self.chains_per_rule.1 > 0 {
                return bad(format!("rule `{text}` needs more entities than the smallest document has"));
            }
            rules.push(rule);
        }
        Ok((vocab, rules))
    }

    /// Document counts for the three splits.
    pub fn split_counts(&self) -> [usize; 3] {
        let n = self.docs as f64;
        let a = (self.split.0 * n).round() as usize;
        let b = ((self.split.0 + self.split.1) * n).round() as usize;
        let a = a.min(self.docs);
        let b = b.clamp(a, self.docs);
        [a, b - a, self.docs - b]
    }
}

pub struct SynthCorpus {
    pub vocab: RelationVocab,
    pub planted: Vec<Rule>,
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

impl SynthCorpus {
    pub fn split(&self, name: &str) -> Option<&Corpus> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    /// Writes `vocab.txt`, `rules.txt` and one JSONL file per split.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(VOCAB_FILE), self.vocab.to_file_string())?;
        fs::write(
            dir.join(RULES_FILE),
            format_rules(self.planted.iter().map(|r| (r, None)), &self.vocab),
        )?;
        for name in SPLITS {
            let corpus = self.split(name).expect("known split");
            let mut w = BufWriter::new(fs::File::create(dir.join(format!("{name}.jsonl")))?);
            write_corpus(&mut w, corpus, &self.vocab)?;
            w.flush()?;
        }
        Ok(())
    }
}

struct DocGen<'a> {
    config: &'a SynthConfig,
    vocab: &'a RelationVocab,
    rules: &'a [Rule],
}

/// Orients self-inverse atoms so each unordered pair has one key.
fn canonical(t: Triple, vocab: &RelationVocab) -> Triple {
    if vocab.inverse(t.rel) == t.rel && t.head > t.tail {
        Triple::new(t.tail, t.rel, t.head)
    } else {
        t
    }
}

/// Base-relation form of an atom, flipping inverse relations.
fn to_base(t: Triple, vocab: &RelationVocab) -> Triple {
    if vocab.is_base(t.rel) {
        t
    } else {
        t.inverse(vocab)
    }
}

impl DocGen<'_> {
    fn range(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
        rng.gen_range(lo..=hi)
    }

    fn random_fact(&self, rng: &mut ChaCha8Rng, n: usize) -> Triple {
        let h = rng.gen_range(0..n);
        let mut t = rng.gen_range(0..n - 1);
        if t >= h {
            t += 1;
        }
        let r = RelationId(rng.gen_range(0..self.vocab.base_count()) as u32);
        canonical(Triple::new(h, r, t), self.vocab)
    }

    /// Every binding of `rule` over `facts` (read with inverses), as
    /// `(e0, el)` endpoint pairs.
    fn bindings(&self, rule: &Rule, facts: &BTreeSet<Triple>) -> BTreeSet<(EntityId, EntityId)> {
        let mut adj: BTreeMap<(EntityId, RelationId), Vec<EntityId>> = BTreeMap::new();
        for &f in facts {
            for x in [f, f.inverse(self.vocab)] {
                adj.entry((x.head, x.rel)).or_default().push(x.tail);
            }
        }
        let starts: BTreeSet<EntityId> = adj.keys().map(|k| k.0).collect();
        let mut out = BTreeSet::new();
        for e0 in starts {
            let mut frontier = BTreeSet::from([e0]);
            for &r in rule.body() {
                let mut next = BTreeSet::new();
                for e in frontier {
                    if let Some(ts) = adj.get(&(e, r)) {
                        next.extend(ts.iter().copied());
                    }
                }
                frontier = next;
            }
            for el in frontier {
                if el != e0 {
                    out.insert((e0, el));
                }
            }
        }
        out
    }

    fn generate(&self, index: usize) -> Result<(Document, Vec<LabeledInstance>)> {
        let c = self.config;
        let v = self.vocab;
        let mut rng = rng_for(c.seed, &[index as u64]);
        let n = Self::range(&mut rng, c.entities);
        let mut names: Vec<usize> = sample_indices(&mut rng, c.entity_pool, n).into_vec();
        names.sort_unstable();
        let width = c.entity_pool.saturating_sub(1).to_string().len().max(3);
        let entities: Vec<String> = names.iter().map(|i| format!("E{i:0width$}")).collect();

        let mut base: BTreeSet<Triple> = BTreeSet::new();
        let k = Self::range(&mut rng, c.base_facts);
        let max_facts = n * (n - 1) * v.base_count();
        for _ in 0..k.min(max_facts) {
            for _ in 0..64 {
                if base.insert(self.random_fact(&mut rng, n)) {
                    break;
                }
            }
        }
        for rule in self.rules {
            let chains = Self::range(&mut rng, c.chains_per_rule);
            for _ in 0..chains {
                let path = sample_indices(&mut rng, n, rule.len() + 1).into_vec();
                for (i, &r) in rule.body().iter().enumerate() {
                    let atom = Triple::new(path[i], r, path[i + 1]);
                    base.insert(canonical(to_base(atom, v), v));
                }
            }
        }

        // one sweep per rule over the sampled facts
        let mut derived: BTreeSet<Triple> = BTreeSet::new();
        for rule in self.rules {
            for (e0, el) in self.bindings(rule, &base) {
                let f = canonical(Triple::new(e0, rule.head(), el), v);
                if !base.contains(&f) {
                    derived.insert(f);
                }
            }
        }

        let mut conf: BTreeMap<Triple, f64> = BTreeMap::new();
        let true_conf = |rng: &mut ChaCha8Rng| -> f64 {
            let j = rng.gen::<f64>() * c.jitter;
            if rng.gen::<f64>() < c.p_flip {
                j
            } else {
                1.0 - j
            }
        };
        for &f in &base {
            conf.insert(f, true_conf(&mut rng));
        }
        for &f in &derived {
            let hidden = rng.gen::<f64>() < c.p_hide;
            let x = true_conf(&mut rng);
            if !hidden {
                conf.insert(f, x);
            }
        }

        let gold: BTreeSet<Triple> = base.union(&derived).copied().collect();
        let mut positives: BTreeSet<Triple> = BTreeSet::new();
        for &f in &gold {
            positives.insert(f);
            positives.insert(canonical(f, v));
            if v.inverse(f.rel) == f.rel {
                positives.insert(Triple::new(f.tail, f.rel, f.head));
            }
        }
        let wanted = positives.len() * c.negative_ratio;
        let mut negatives: BTreeSet<Triple> = BTreeSet::new();
        let mut tries = 0;
        while negatives.len() < wanted && tries < wanted * 20 + 100 {
            tries += 1;
            let t = self.random_fact(&mut rng, n);
            let mirror = Triple::new(t.tail, t.rel, t.head);
            if positives.contains(&t) || negatives.contains(&t) {
                continue;
            }
            if v.inverse(t.rel) == t.rel && positives.contains(&mirror) {
                continue;
            }
            negatives.insert(t);
            if v.inverse(t.rel) == t.rel && negatives.len() < wanted {
                negatives.insert(mirror);
            }
            let j = rng.gen::<f64>() * c.jitter;
            let x = if rng.gen::<f64>() < c.p_flip { 1.0 - j } else { j };
            conf.insert(canonical(t, v), x);
        }

        let doc_id = format!("doc{index:05}");
        let atoms = conf.into_iter().filter(|(_, x)| *x > 0.0);
        let doc = Document::ingest(doc_id.clone(), entities, atoms, positives.iter().copied(), v)?;
        let mut instances = Vec::with_capacity(positives.len() + negatives.len());
        for (set, label) in [(&positives, Label::Positive), (&negatives, Label::Negative)] {
            for &t in set {
                instances.push(LabeledInstance {
                    doc_id: doc_id.clone(),
                    query: t,
                    label,
                });
            }
        }
        Ok((doc, instances))
    }
}

fn assemble(parts: Vec<(Document, Vec<LabeledInstance>)>) -> Result<Corpus> {
    let mut docs = Vec::with_capacity(parts.len());
    let mut instances = Vec::new();
    for (d, i) in parts {
        docs.push(d);
        instances.extend(i);
    }
    Corpus::new(docs, instances)
}

/// Generates the three splits. Each document draws from its own seed
/// stream, so the output does not depend on the thread count.
pub fn gen_corpus(config: &SynthConfig) -> Result<SynthCorpus> {
    let (vocab, planted) = config.validate()?;
    let gen = DocGen {
        config,
        vocab: &vocab,
        rules: &planted,
    };
    let mut docs: Vec<(Document, Vec<LabeledInstance>)> = (0..config.docs)
        .into_par_iter()
        .map(|i| gen.generate(i))
        .collect::<Result<_>>()?;
    let [a, b, _] = config.split_counts();
    let test = docs.split_off(a + b);
    let dev = docs.split_off(a);
    Ok(SynthCorpus {
        train: assemble(docs)?,
        dev: assemble(dev)?,
        test: assemble(test)?,
        vocab,
        planted,
    })
}
