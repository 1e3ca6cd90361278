//! Micro-averaged F1, ign F1 and the logic consistency score.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::document::{Corpus, EntityId, Triple};
use crate::error::{Error, Result};
use crate::rule::Rule;
use crate::vocab::{RelationId, RelationVocab};

/// `(head name, relation name, tail name)`.
pub type NameTriple = (String, String, String);

/// Predicted positive triples per document, with their probabilities.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictionSet {
    docs: BTreeMap<String, BTreeMap<Triple, f64>>,
}

impl PredictionSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a document with no predictions yet.
    pub fn touch(&mut self, doc_id: &str) {
        self.docs.entry(doc_id.to_string()).or_default();
    }

    pub fn insert(&mut self, doc_id: &str, triple: Triple, prob: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&prob) {
            return Err(Error::InvalidArgument(format!(
                "probability {prob} for {triple} in `{doc_id}` is outside [0, 1]"
            )));
        }
        let doc = self.docs.entry(doc_id.to_string()).or_default();
        if doc.insert(triple, prob).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate predicted triple {triple} in `{doc_id}`"
            )));
        }
        Ok(())
    }

    pub fn docs(&self) -> &BTreeMap<String, BTreeMap<Triple, f64>> {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GoldDoc {
    pub entities: Vec<String>,
    pub facts: BTreeSet<Triple>,
}

/// Gold fact sets with the entity names needed for ign F1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GoldSet {
    pub docs: BTreeMap<String, GoldDoc>,
}

impl GoldSet {
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let docs = corpus
            .docs()
            .iter()
            .map(|d| {
                (
                    d.doc_id().to_string(),
                    GoldDoc {
                        entities: d.entities().to_vec(),
                        facts: d.gold_facts().clone(),
                    },
                )
            })
            .collect();
        Self { docs }
    }
}

/// Name-level gold facts of a corpus, used to filter ign F1.
pub fn fact_names(corpus: &Corpus, vocab: &RelationVocab) -> BTreeSet<NameTriple> {
    let mut out = BTreeSet::new();
    for d in corpus.docs() {
        for f in d.gold_facts() {
            out.insert(name_triple(d.entities(), f, vocab));
        }
    }
    out
}

fn name_triple(entities: &[String], t: &Triple, vocab: &RelationVocab) -> NameTriple {
    (
        entities[t.head].clone(),
        vocab.name(t.rel).to_string(),
        entities[t.tail].clone(),
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }
}

fn check_docs(pred: &PredictionSet, gold: &GoldSet) -> Result<()> {
    for id in pred.docs.keys() {
        if !gold.docs.contains_key(id) {
            return Err(Error::UnknownDocument(id.clone()));
        }
    }
    Ok(())
}

fn count(
    pred: &PredictionSet,
    gold: &GoldSet,
    keep: impl Fn(&GoldDoc, &Triple) -> bool,
) -> Result<Prf> {
    check_docs(pred, gold)?;
    let empty = BTreeMap::new();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (id, g) in &gold.docs {
        let p = pred.docs.get(id).unwrap_or(&empty);
        for t in p.keys().filter(|t| keep(g, t)) {
            if g.facts.contains(t) {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        fn_ += g.facts.iter().filter(|t| keep(g, t) && !p.contains_key(t)).count();
    }
    Ok(Prf::from_counts(tp, fp, fn_))
}

/// Micro-averaged precision, recall and F1 over all documents.
pub fn f1(pred: &PredictionSet, gold: &GoldSet) -> Result<Prf> {
    count(pred, gold, |_, _| true)
}

/// F1 after dropping every triple whose names occur in `train_facts`, from
/// both predictions and gold.
pub fn ign_f1(
    pred: &PredictionSet,
    gold: &GoldSet,
    train_facts: &BTreeSet<NameTriple>,
    vocab: &RelationVocab,
) -> Result<Prf> {
    for (id, p) in &pred.docs {
        if let Some(g) = gold.docs.get(id) {
            for t in p.keys() {
                if t.head >= g.entities.len() || t.tail >= g.entities.len() {
                    return Err(Error::EntityOutOfRange {
                        doc: id.clone(),
                        id: t.head.max(t.tail),
                        len: g.entities.len(),
                    });
                }
            }
        }
    }
    count(pred, gold, |g, t| !train_facts.contains(&name_triple(&g.entities, t, vocab)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogicScore {
    pub score: f64,
    /// Bindings whose body atoms are all predicted.
    pub bindings: usize,
    /// Of those, bindings whose head atom is predicted too.
    pub satisfied: usize,
    /// No binding exists; the score is reported as 1.
    pub vacuous: bool,
}

/// Precision of `rules` on the predictions.
///
/// Predictions are read as closed under inverses, so a body atom `r⁻¹(a, b)`
/// is satisfied by a predicted `r(b, a)`. Bindings whose endpoints coincide
/// are skipped since their head would be a self-loop.
pub fn logic_score(pred: &PredictionSet, rules: &[Rule], vocab: &RelationVocab) -> LogicScore {
    let (mut bindings, mut satisfied) = (0usize, 0usize);
    for p in pred.docs.values() {
        let mut closed: BTreeSet<Triple> = BTreeSet::new();
        let mut adj: BTreeMap<(EntityId, RelationId), Vec<EntityId>> = BTreeMap::new();
        for t in p.keys() {
            for x in [*t, t.inverse(vocab)] {
                if closed.insert(x) {
                    adj.entry((x.head, x.rel)).or_default().push(x.tail);
                }
            }
        }
        let starts: BTreeSet<EntityId> = closed.iter().map(|t| t.head).collect();
        for rule in rules {
            for &e0 in &starts {
                let mut frontier = vec![e0];
                for &r in rule.body() {
                    let mut next = Vec::new();
                    for e in frontier {
                        if let Some(ts) = adj.get(&(e, r)) {
                            next.extend_from_slice(ts);
                        }
                    }
                    frontier = next;
                }
                // one entry per binding, since paths are distinct sequences
                for el in frontier {
                    if el == e0 {
                        continue;
                    }
                    bindings += 1;
                    if closed.contains(&Triple::new(e0, rule.head(), el)) {
                        satisfied += 1;
                    }
                }
            }
        }
    }
    if bindings == 0 {
        LogicScore {
            score: 1.0,
            bindings,
            satisfied,
            vacuous: true,
        }
    } else {
        LogicScore {
            score: satisfied as f64 / bindings as f64,
            bindings,
            satisfied,
            vacuous: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f1: Prf,
    pub ign_f1: Prf,
    pub logic: LogicScore,
    pub predictions: usize,
    pub gold_facts: usize,
}

impl MetricsReport {
    pub fn evaluate(
        pred: &PredictionSet,
        gold: &GoldSet,
        train_facts: &BTreeSet<NameTriple>,
        rules: &[Rule],
        vocab: &RelationVocab,
    ) -> Result<Self> {
        Ok(Self {
            f1: f1(pred, gold)?,
            ign_f1: ign_f1(pred, gold, train_facts, vocab)?,
            logic: logic_score(pred, rules, vocab),
            predictions: pred.len(),
            gold_facts: gold.docs.values().map(|d| d.facts.len()).sum(),
        })
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<8} {:>9} {:>9} {:>9} {:>6} {:>6} {:>6}", "metric", "precision", "recall", "f1", "tp", "fp", "fn");
        for (name, m) in [("f1", &self.f1), ("ign_f1", &self.ign_f1)] {
            let _ = writeln!(
                out,
                "{:<8} {:>9.4} {:>9.4} {:>9.4} {:>6} {:>6} {:>6}",
                name, m.precision, m.recall, m.f1, m.tp, m.fp, m.fn_
            );
        }
        let _ = writeln!(
            out,
            "{:<8} {:>9.4} {:>9} {:>9} {:>6} {:>6}{}",
            "logic",
            self.logic.score,
            "",
            "",
            self.logic.satisfied,
            self.logic.bindings,
            if self.logic.vacuous { "  (vacuous)" } else { "" }
        );
        out
    }
}

/// One rule's share of a prediction's score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleExplanation {
    pub rule: String,
    pub weight: f64,
    pub multiplicity: usize,
    pub grounding: f64,
    pub contribution: f64,
    pub path: Vec<EntityId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripleExplanation {
    pub triple: (EntityId, String, EntityId),
    pub score: f64,
    pub rules: Vec<RuleExplanation>,
}

/// One line of the predictions JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub doc_id: String,
    pub triples: Vec<(EntityId, String, EntityId, f64)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub explanations: Vec<TripleExplanation>,
}

pub fn read_predictions<R: BufRead>(reader: R, vocab: &RelationVocab) -> Result<PredictionSet> {
    let mut set = PredictionSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        set.touch(&rec.doc_id);
        for (h, r, t, p) in rec.triples {
            let r = vocab.resolve(&r).map_err(|e| Error::parse(i + 1, e.to_string()))?;
            set.insert(&rec.doc_id, Triple::new(h, r, t), p)
                .map_err(|e| Error::parse(i + 1, e.to_string()))?;
        }
    }
    Ok(set)
}

pub fn write_predictions<W: Write>(mut writer: W, records: &[PredictionRecord]) -> Result<()> {
    for rec in records {
        serde_json::to_writer(&mut writer, rec)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> RelationVocab {
        RelationVocab::build(&["r", "r1", "r2"], &BTreeSet::new()).unwrap()
    }

    fn t(h: usize, r: u32, tl: usize) -> Triple {
        Triple::new(h, RelationId(r), tl)
    }

    fn gold(facts: &[Triple]) -> GoldSet {
        let mut docs = BTreeMap::new();
        docs.insert(
            "d".to_string(),
            GoldDoc {
                entities: (0..6).map(|i| format!("E{i}")).collect(),
                facts: facts.iter().copied().collect(),
            },
        );
        GoldSet { docs }
    }

    fn preds(ts: &[Triple]) -> PredictionSet {
        let mut p = PredictionSet::new();
        p.touch("d");
        for &x in ts {
            p.insert("d", x, 0.9).unwrap();
        }
        p
    }

    #[test]
    fn f1_cases() {
        let facts = [t(0, 0, 1), t(1, 0, 2), t(2, 1, 3), t(3, 2, 4)];
        let g = gold(&facts);
        let m = f1(&preds(&facts), &g).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        let m = f1(&preds(&[]), &g).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        let m = f1(&preds(&[facts[0], facts[1], t(4, 0, 5)]), &g).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (2, 1, 2));
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.recall, 0.5);
        assert!((m.f1 - 4.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn unknown_document_is_rejected() {
        let mut p = PredictionSet::new();
        p.insert("other", t(0, 0, 1), 0.7).unwrap();
        assert!(matches!(f1(&p, &gold(&[])), Err(Error::UnknownDocument(_))));
    }

    #[test]
    fn prediction_set_rejects_bad_entries() {
        let mut p = PredictionSet::new();
        assert!(p.insert("d", t(0, 0, 1), 1.5).is_err());
        p.insert("d", t(0, 0, 1), 0.5).unwrap();
        assert!(p.insert("d", t(0, 0, 1), 0.6).is_err());
    }

    #[test]
    fn ign_f1_cases() {
        let v = vocab();
        let facts = [t(0, 0, 1), t(1, 0, 2), t(2, 1, 3)];
        let g = gold(&facts);
        let p = preds(&facts);
        assert_eq!(ign_f1(&p, &g, &BTreeSet::new(), &v).unwrap(), f1(&p, &g).unwrap());
        let all: BTreeSet<NameTriple> = facts
            .iter()
            .map(|f| name_triple(&g.docs["d"].entities, f, &v))
            .collect();
        let m = ign_f1(&p, &g, &all, &v).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        let one: BTreeSet<NameTriple> =
            [("E0".to_string(), "r".to_string(), "E1".to_string())].into();
        let m = ign_f1(&p, &g, &one, &v).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.tp), (1.0, 1.0, 1.0, 2));
    }

    fn chain_rule() -> Rule {
        Rule::new(RelationId(0), vec![RelationId(1), RelationId(2)]).unwrap()
    }

    #[test]
    fn logic_cases() {
        let v = vocab();
        let rules = [chain_rule()];
        let s = logic_score(&preds(&[t(0, 1, 1), t(1, 2, 2), t(0, 0, 2)]), &rules, &v);
        assert_eq!((s.score, s.bindings, s.vacuous), (1.0, 1, false));
        let s = logic_score(&preds(&[t(0, 1, 1), t(1, 2, 2)]), &rules, &v);
        assert_eq!(s.score, 0.0);
        let s = logic_score(
            &preds(&[
                t(0, 1, 1),
                t(1, 2, 2),
                t(1, 2, 3),
                t(4, 1, 5),
                t(5, 2, 3),
                t(0, 0, 2),
                t(4, 0, 3),
            ]),
            &rules,
            &v,
        );
        assert_eq!((s.bindings, s.satisfied), (3, 2));
        assert!((s.score - 2.0 / 3.0).abs() < 1e-15);
        let s = logic_score(&preds(&[t(0, 0, 1)]), &rules, &v);
        assert_eq!((s.score, s.vacuous), (1.0, true));
    }

    #[test]
    fn logic_reads_inverse_atoms() {
        let v = vocab();
        let inv = Rule::new(RelationId(0), vec![RelationId(1), v.inverse(RelationId(2))]).unwrap();
        let s = logic_score(&preds(&[t(0, 1, 1), t(2, 2, 1), t(0, 0, 2)]), &[inv], &v);
        assert_eq!((s.bindings, s.satisfied), (1, 1));
    }

    #[test]
    fn predictions_round_trip() {
        let v = vocab();
        let recs = vec![PredictionRecord {
            doc_id: "d".into(),
            triples: vec![(0, "r1".into(), 1, 0.75)],
            explanations: vec![],
        }];
        let mut buf = Vec::new();
        write_predictions(&mut buf, &recs).unwrap();
        let p = read_predictions(buf.as_slice(), &v).unwrap();
        assert_eq!(p.docs()["d"][&t(0, 1, 1)], 0.75);
        let bad = b"{\"doc_id\":\"d\",\"triples\":[[0,\"zz\",1,0.5]]}\n";
        assert!(matches!(read_predictions(&bad[..], &v), Err(Error::Parse { line: 1, .. })));
    }

    fn arb_triples() -> impl Strategy<Value = BTreeSet<Triple>> {
        prop::collection::btree_set((0usize..5, 0u32..3, 0usize..5), 0..14)
            .prop_map(|s| s.into_iter().map(|(h, r, tl)| t(h, r, tl)).collect())
    }

    proptest! {
        #[test]
        fn f1_is_monotone(g in arb_triples(), p in arb_triples(), extra in (0usize..5, 0u32..3, 0usize..5)) {
            let gs = gold(&g.iter().copied().collect::<Vec<_>>());
            let base = f1(&preds(&p.iter().copied().collect::<Vec<_>>()), &gs).unwrap();
            let x = t(extra.0, extra.1, extra.2);
            if !p.contains(&x) {
                let mut more: Vec<Triple> = p.iter().copied().collect();
                more.push(x);
                let m = f1(&preds(&more), &gs).unwrap();
                if g.contains(&x) {
                    prop_assert!(m.recall >= base.recall);
                } else {
                    prop_assert!(m.precision <= base.precision);
                }
            }
        }

        #[test]
        fn closed_predictions_score_one(p in arb_triples()) {
            let v = vocab();
            let rules = [chain_rule()];
            let mut set: BTreeSet<Triple> = p;
            loop {
                let cur = preds(&set.iter().copied().collect::<Vec<_>>());
                let mut added = false;
                for a in set.clone() {
                    for b in set.clone() {
                        if a.rel == RelationId(1) && b.rel == RelationId(2) && a.tail == b.head && a.head != b.tail {
                            added |= set.insert(t(a.head, 0, b.tail));
                        }
                    }
                }
                if !added {
                    prop_assert_eq!(logic_score(&cur, &rules, &v).score, 1.0);
                    break;
                }
            }
        }

        #[test]
        fn disjoint_train_facts_leave_f1_unchanged(g in arb_triples(), p in arb_triples()) {
            let v = vocab();
            let gs = gold(&g.iter().copied().collect::<Vec<_>>());
            let ps = preds(&p.iter().copied().collect::<Vec<_>>());
            let train: BTreeSet<NameTriple> = [("X".to_string(), "r".to_string(), "Y".to_string())].into();
            prop_assert_eq!(ign_f1(&ps, &gs, &train, &v).unwrap(), f1(&ps, &gs).unwrap());
        }
    }
}
