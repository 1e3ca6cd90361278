//! Documents as sparse entity-confidence graphs, labeled queries, and the
//! JSONL interchange format.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{RelationId, RelationVocab};

/// Document-local entity index.
pub type EntityId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: EntityId,
    pub rel: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, rel: RelationId, tail: EntityId) -> Self {
        Self { head, rel, tail }
    }

    pub fn inverse(self, vocab: &RelationVocab) -> Self {
        Self::new(self.tail, vocab.inverse(self.rel), self.head)
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.rel.0, self.tail)
    }
}

#[derive(Clone, Debug)]
pub struct Document {
    doc_id: String,
    entities: Vec<String>,
    num_relations: usize,
    atoms: BTreeMap<Triple, f64>,
    gold_facts: BTreeSet<Triple>,
    // out-edges per (entity, relation), sorted by tail
    adjacency: Vec<Vec<(EntityId, f64)>>,
}

impl Document {
    /// Validates ids and confidences. Repeated atoms must agree exactly.
    /// Inverse atoms are not added; see [`close_inverses`].
    pub fn new(
        doc_id: impl Into<String>,
        entities: Vec<String>,
        atoms: impl IntoIterator<Item = (Triple, f64)>,
        gold_facts: impl IntoIterator<Item = Triple>,
        vocab: &RelationVocab,
    ) -> Result<Self> {
        let doc_id = doc_id.into();
        let n = entities.len();
        let check = |t: &Triple| -> Result<()> {
            for id in [t.head, t.tail] {
                if id >= n {
                    return Err(Error::EntityOutOfRange {
                        doc: doc_id.clone(),
                        id,
                        len: n,
                    });
                }
            }
            vocab.check(t.rel)
        };
        let mut store = BTreeMap::new();
        for (triple, conf) in atoms {
            check(&triple)?;
            if !(0.0..=1.0).contains(&conf) {
                return Err(Error::ConfidenceOutOfRange {
                    doc: doc_id.clone(),
                    triple: triple.to_string(),
                    value: conf,
                });
            }
            if let Some(prev) = store.insert(triple, conf) {
                if prev != conf {
                    return Err(Error::InverseConflict {
                        doc: doc_id.clone(),
                        triple: triple.to_string(),
                        existing: prev,
                        incoming: conf,
                    });
                }
            }
        }
        let mut gold = BTreeSet::new();
        for t in gold_facts {
            check(&t)?;
            gold.insert(t);
        }
        Ok(Self::assemble(doc_id, entities, vocab.len(), store, gold))
    }

    fn assemble(
        doc_id: String,
        entities: Vec<String>,
        num_relations: usize,
        atoms: BTreeMap<Triple, f64>,
        gold_facts: BTreeSet<Triple>,
    ) -> Self {
        let mut adjacency = vec![Vec::new(); entities.len() * num_relations];
        for (t, &c) in &atoms {
            if c > 0.0 {
                adjacency[t.head * num_relations + t.rel.index()].push((t.tail, c));
            }
        }
        Self {
            doc_id,
            entities,
            num_relations,
            atoms,
            gold_facts,
            adjacency,
        }
    }

    /// Builds and inverse-closes in one step; the usual ingestion path.
    pub fn ingest(
        doc_id: impl Into<String>,
        entities: Vec<String>,
        atoms: impl IntoIterator<Item = (Triple, f64)>,
        gold_facts: impl IntoIterator<Item = Triple>,
        vocab: &RelationVocab,
    ) -> Result<Self> {
        let doc = Self::new(doc_id, entities, atoms, gold_facts, vocab)?;
        close_inverses(&doc, vocab)
    }

    pub fn doc_id(&self) -> &str {
        &self.doc_id
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn atoms(&self) -> &BTreeMap<Triple, f64> {
        &self.atoms
    }

    pub fn gold_facts(&self) -> &BTreeSet<Triple> {
        &self.gold_facts
    }

    /// Stored confidence, 0 for absent atoms.
    pub fn atom_conf(&self, h: EntityId, r: RelationId, t: EntityId) -> Result<f64> {
        for id in [h, t] {
            if id >= self.entities.len() {
                return Err(Error::EntityOutOfRange {
                    doc: self.doc_id.clone(),
                    id,
                    len: self.entities.len(),
                });
            }
        }
        if r.index() >= self.num_relations {
            return Err(Error::RelationOutOfRange {
                id: r.0,
                len: self.num_relations,
            });
        }
        Ok(self.conf(h, r, t))
    }

    /// Unchecked lookup for hot paths; ids must be valid.
    #[inline]
    pub fn conf(&self, h: EntityId, r: RelationId, t: EntityId) -> f64 {
        self.atoms.get(&Triple::new(h, r, t)).copied().unwrap_or(0.0)
    }

    /// Positive-confidence out-edges of `e` along `r`, sorted by tail.
    #[inline]
    pub fn out_edges(&self, e: EntityId, r: RelationId) -> &[(EntityId, f64)] {
        &self.adjacency[e * self.num_relations + r.index()]
    }

    pub fn is_closed(&self, vocab: &RelationVocab) -> bool {
        self.atoms
            .iter()
            .all(|(t, &c)| self.atoms.get(&t.inverse(vocab)) == Some(&c))
    }
}

/// Adds `(t, r⁻¹, h) = c` for every stored `(h, r, t) = c`. Idempotent.
/// A pre-existing inverse that disagrees by more than 1e-9 is an error.
pub fn close_inverses(doc: &Document, vocab: &RelationVocab) -> Result<Document> {
    let mut atoms = doc.atoms.clone();
    for (&t, &c) in &doc.atoms {
        let inv = t.inverse(vocab);
        match atoms.get(&inv) {
            Some(&existing) if (existing - c).abs() > 1e-9 => {
                return Err(Error::InverseConflict {
                    doc: doc.doc_id.clone(),
                    triple: inv.to_string(),
                    existing,
                    incoming: c,
                });
            }
            Some(_) => {}
            None => {
                atoms.insert(inv, c);
            }
        }
    }
    Ok(Document::assemble(
        doc.doc_id.clone(),
        doc.entities.clone(),
        doc.num_relations,
        atoms,
        doc.gold_facts.clone(),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn from_int(v: i64) -> Option<Self> {
        match v {
            1 => Some(Label::Positive),
            -1 => Some(Label::Negative),
            _ => None,
        }
    }

    #[inline]
    pub fn sign(self) -> f64 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => -1.0,
        }
    }

    pub fn as_int(self) -> i8 {
        match self {
            Label::Positive => 1,
            Label::Negative => -1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledInstance {
    pub doc_id: String,
    pub query: Triple,
    pub label: Label,
}

/// Documents plus their labeled queries, in file order.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    docs: Vec<Document>,
    instances: Vec<LabeledInstance>,
    instance_docs: Vec<usize>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(docs: Vec<Document>, instances: Vec<LabeledInstance>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, d) in docs.iter().enumerate() {
            if index.insert(d.doc_id.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate document id `{}`",
                    d.doc_id
                )));
            }
        }
        let mut instance_docs = Vec::with_capacity(instances.len());
        for inst in &instances {
            let &d = index
                .get(&inst.doc_id)
                .ok_or_else(|| Error::UnknownDocument(inst.doc_id.clone()))?;
            let doc = &docs[d];
            for id in [inst.query.head, inst.query.tail] {
                if id >= doc.num_entities() {
                    return Err(Error::EntityOutOfRange {
                        doc: doc.doc_id.clone(),
                        id,
                        len: doc.num_entities(),
                    });
                }
            }
            instance_docs.push(d);
        }
        Ok(Self {
            docs,
            instances,
            instance_docs,
            index,
        })
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn instances(&self) -> &[LabeledInstance] {
        &self.instances
    }

    pub fn doc(&self, doc_id: &str) -> Option<&Document> {
        self.index.get(doc_id).map(|&i| &self.docs[i])
    }

    /// The document an instance refers to.
    #[inline]
    pub fn doc_of(&self, instance: usize) -> &Document {
        &self.docs[self.instance_docs[instance]]
    }

    /// Instances belonging to one document, in file order.
    pub fn instances_of<'a>(
        &'a self,
        doc_id: &'a str,
    ) -> impl Iterator<Item = &'a LabeledInstance> + 'a {
        self.instances.iter().filter(move |i| i.doc_id == doc_id)
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// One line of the document JSONL format.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DocRecord {
    pub doc_id: String,
    pub entities: Vec<String>,
    #[serde(default)]
    pub atoms: Vec<(usize, String, usize, f64)>,
    #[serde(default)]
    pub facts: Vec<(usize, String, usize, i64)>,
}

impl DocRecord {
    pub fn into_parts(
        self,
        vocab: &RelationVocab,
    ) -> Result<(Document, Vec<LabeledInstance>)> {
        let mut atoms = Vec::with_capacity(self.atoms.len());
        for (h, r, t, c) in &self.atoms {
            atoms.push((Triple::new(*h, vocab.resolve(r)?, *t), *c));
        }
        let mut gold = Vec::new();
        let mut instances = Vec::with_capacity(self.facts.len());
        for (h, r, t, label) in &self.facts {
            let label = Label::from_int(*label).ok_or_else(|| {
                Error::InvalidArgument(format!("fact label must be 1 or -1, got {label}"))
            })?;
            let triple = Triple::new(*h, vocab.resolve(r)?, *t);
            if label == Label::Positive {
                gold.push(triple);
            }
            instances.push(LabeledInstance {
                doc_id: self.doc_id.clone(),
                query: triple,
                label,
            });
        }
        let doc = Document::ingest(self.doc_id, self.entities, atoms, gold, vocab)?;
        Ok((doc, instances))
    }

    /// Writes base-relation atoms only; ingestion restores the inverses.
    pub fn from_parts(
        doc: &Document,
        instances: &[&LabeledInstance],
        vocab: &RelationVocab,
    ) -> Self {
        let atoms = doc
            .atoms()
            .iter()
            .filter(|(t, _)| vocab.is_base(t.rel))
            .map(|(t, &c)| (t.head, vocab.name(t.rel).to_string(), t.tail, c))
            .collect();
        let facts = instances
            .iter()
            .map(|i| {
                (
                    i.query.head,
                    vocab.name(i.query.rel).to_string(),
                    i.query.tail,
                    i.label.as_int() as i64,
                )
            })
            .collect();
        Self {
            doc_id: doc.doc_id().to_string(),
            entities: doc.entities().to_vec(),
            atoms,
            facts,
        }
    }
}

/// Reads a document JSONL stream. Errors carry the 1-based line number.
pub fn read_corpus<R: BufRead>(reader: R, vocab: &RelationVocab) -> Result<Corpus> {
    let mut docs = Vec::new();
    let mut instances = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DocRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        let (doc, inst) = record
            .into_parts(vocab)
            .map_err(|e| Error::parse(i + 1, e.to_string()))?;
        docs.push(doc);
        instances.extend(inst);
    }
    Corpus::new(docs, instances)
}

pub fn write_corpus<W: Write>(mut writer: W, corpus: &Corpus, vocab: &RelationVocab) -> Result<()> {
    for doc in corpus.docs() {
        let inst: Vec<&LabeledInstance> = corpus.instances_of(doc.doc_id()).collect();
        let record = DocRecord::from_parts(doc, &inst, vocab);
        serde_json::to_writer(&mut writer, &record)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> RelationVocab {
        RelationVocab::build(&["father", "r"], &BTreeSet::new()).unwrap()
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("e{i}")).collect()
    }

    #[test]
    fn closure_adds_inverse_atoms() {
        let v = vocab();
        let father = v.id("father").unwrap();
        let doc = Document::new("d", names(2), [(Triple::new(0, father, 1), 0.7)], [], &v).unwrap();
        let closed = close_inverses(&doc, &v).unwrap();
        assert_eq!(closed.atom_conf(1, v.inverse(father), 0).unwrap(), 0.7);
        assert_eq!(closed.atom_conf(0, father, 1).unwrap(), 0.7);
        assert!(closed.is_closed(&v));
    }

    #[test]
    fn closure_is_idempotent() {
        let v = vocab();
        let father = v.id("father").unwrap();
        let doc = Document::ingest("d", names(3), [(Triple::new(0, father, 1), 0.7)], [], &v).unwrap();
        let again = close_inverses(&doc, &v).unwrap();
        assert_eq!(doc.atoms(), again.atoms());
    }

    #[test]
    fn contradicting_inverse_is_rejected() {
        let v = vocab();
        let r = v.id("r").unwrap();
        let doc = Document::new(
            "d",
            names(2),
            [(Triple::new(0, r, 1), 0.7), (Triple::new(1, v.inverse(r), 0), 0.2)],
            [],
            &v,
        )
        .unwrap();
        let err = close_inverses(&doc, &v).unwrap_err();
        assert!(matches!(err, Error::InverseConflict { .. }), "{err}");
    }

    #[test]
    fn lookups_default_to_zero_and_check_ranges() {
        let v = vocab();
        let r = v.id("r").unwrap();
        let doc = Document::ingest("d", names(3), [(Triple::new(0, r, 1), 0.7)], [], &v).unwrap();
        assert_eq!(doc.atom_conf(0, r, 1).unwrap(), 0.7);
        assert_eq!(doc.atom_conf(1, r, 2).unwrap(), 0.0);
        assert!(doc.atom_conf(3, r, 0).is_err());
        assert!(doc.atom_conf(0, RelationId(9), 1).is_err());
    }

    #[test]
    fn construction_rejects_bad_confidence() {
        let v = vocab();
        let r = v.id("r").unwrap();
        assert!(Document::new("d", names(2), [(Triple::new(0, r, 1), 1.5)], [], &v).is_err());
        assert!(Document::new("d", names(2), [(Triple::new(0, r, 2), 0.5)], [], &v).is_err());
    }

    #[test]
    fn jsonl_reports_line_numbers() {
        let v = vocab();
        let text = "{\"doc_id\":\"a\",\"entities\":[\"x\",\"y\"],\"atoms\":[[0,\"r\",1,0.5]],\"facts\":[[0,\"r\",1,1]]}\n\
                    {\"doc_id\":\"b\",\"entities\":[\"x\"],\"atoms\":[[0,\"nope\",0,0.5]]}\n";
        let err = read_corpus(text.as_bytes(), &v).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn jsonl_round_trip() {
        let v = vocab();
        let text = "{\"doc_id\":\"a\",\"entities\":[\"x\",\"y\"],\"atoms\":[[0,\"r\",1,0.5],[1,\"father\",0,1.0]],\"facts\":[[0,\"r\",1,1],[1,\"r\",0,-1]]}\n";
        let corpus = read_corpus(text.as_bytes(), &v).unwrap();
        assert_eq!(corpus.instances().len(), 2);
        let doc = corpus.doc("a").unwrap();
        assert_eq!(doc.gold_facts().len(), 1);
        assert_eq!(doc.atom_conf(0, v.id("father⁻¹").unwrap(), 1).unwrap(), 1.0);
        let mut out = Vec::new();
        write_corpus(&mut out, &corpus, &v).unwrap();
        let again = read_corpus(out.as_slice(), &v).unwrap();
        assert_eq!(again.doc("a").unwrap().atoms(), doc.atoms());
        assert_eq!(again.instances(), corpus.instances());
    }

    proptest! {
        #[test]
        fn closed_documents_stay_in_range(
            atoms in prop::collection::btree_map((0usize..5, 0u32..2, 0usize..5), 0.0f64..=1.0, 0..20)
        ) {
            let v = vocab();
            let atoms: Vec<_> = atoms
                .into_iter()
                .map(|((h, r, t), c)| (Triple::new(h, RelationId(r), t), c))
                .collect();
            let doc = Document::ingest("d", names(5), atoms, [], &v).unwrap();
            prop_assert!(doc.is_closed(&v));
            let twice = close_inverses(&doc, &v).unwrap();
            prop_assert_eq!(twice.atoms(), doc.atoms());
            for h in 0..5 {
                for r in v.ids() {
                    for t in 0..5 {
                        let c = doc.atom_conf(h, r, t).unwrap();
                        prop_assert!((0.0..=1.0).contains(&c));
                    }
                }
            }
        }
    }
}
