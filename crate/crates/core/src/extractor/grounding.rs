//! Max-product grounding of rule bodies on a document graph.

use std::collections::BTreeMap;

use crate::document::{Document, EntityId};
use crate::rule::Rule;
use crate::vocab::RelationId;

#[derive(Clone, Debug, PartialEq)]
pub struct GroundingResult {
    /// Best product of atom confidences over all grounding paths, 0 if none.
    pub value: f64,
    /// Entity sequence `h, e1, ..., t` attaining `value`.
    pub best_path: Option<Vec<EntityId>>,
}

impl GroundingResult {
    pub fn none() -> Self {
        Self {
            value: 0.0,
            best_path: None,
        }
    }
}

/// max over entity sequences `h = e0, ..., el = t` of the product of
/// `conf(e(i-1), ri, ei)`, by dynamic programming over body positions.
///
/// Entity ids must be valid for `doc`. Ties between equally good
/// predecessors keep the smallest entity id.
pub fn ground_rule(doc: &Document, rule: &Rule, h: EntityId, t: EntityId) -> GroundingResult {
    let n = doc.num_entities();
    assert!(h < n && t < n, "entity id out of range");
    let mut cur = vec![0.0; n];
    cur[h] = 1.0;
    let mut back: Vec<Vec<EntityId>> = Vec::with_capacity(rule.len());
    for &r in rule.body() {
        let mut next = vec![0.0; n];
        let mut bp = vec![usize::MAX; n];
        for (e, &v) in cur.iter().enumerate() {
            if v <= 0.0 {
                continue;
            }
            for &(e2, c) in doc.out_edges(e, r) {
                let cand = v * c;
                if cand > next[e2] {
                    next[e2] = cand;
                    bp[e2] = e;
                }
            }
        }
        back.push(bp);
        cur = next;
    }
    let value = cur[t];
    if value <= 0.0 {
        return GroundingResult::none();
    }
    let mut path = vec![t];
    let mut e = t;
    for bp in back.iter().rev() {
        e = bp[e];
        path.push(e);
    }
    path.reverse();
    debug_assert_eq!(path[0], h);
    GroundingResult {
        value,
        best_path: Some(path),
    }
}

/// The value of [`ground_rule`] without the path. Small documents run on
/// stack buffers.
pub fn ground_value(doc: &Document, body: &[RelationId], h: EntityId, t: EntityId) -> f64 {
    const STACK: usize = 32;
    let n = doc.num_entities();
    assert!(h < n && t < n, "entity id out of range");
    if n <= STACK {
        let mut a = [0.0; STACK];
        let mut b = [0.0; STACK];
        value_dp(doc, body, h, t, &mut a[..n], &mut b[..n])
    } else {
        value_dp(doc, body, h, t, &mut vec![0.0; n], &mut vec![0.0; n])
    }
}

fn value_dp<'a>(
    doc: &Document,
    body: &[RelationId],
    h: EntityId,
    t: EntityId,
    mut cur: &'a mut [f64],
    mut next: &'a mut [f64],
) -> f64 {
    cur[h] = 1.0;
    for &r in body {
        next.fill(0.0);
        let mut any = false;
        for (e, &v) in cur.iter().enumerate() {
            if v <= 0.0 {
                continue;
            }
            for &(e2, c) in doc.out_edges(e, r) {
                let cand = v * c;
                if cand > next[e2] {
                    next[e2] = cand;
                    any = true;
                }
            }
        }
        if !any {
            return 0.0;
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur[t]
}

/// Grounding values from `h` to every entity, for batch scoring.
pub fn ground_from(doc: &Document, body: &[RelationId], h: EntityId) -> Vec<f64> {
    let n = doc.num_entities();
    let mut cur = vec![0.0; n];
    cur[h] = 1.0;
    for &r in body {
        let mut next = vec![0.0; n];
        for (e, &v) in cur.iter().enumerate() {
            if v <= 0.0 {
                continue;
            }
            for &(e2, c) in doc.out_edges(e, r) {
                let cand = v * c;
                if cand > next[e2] {
                    next[e2] = cand;
                }
            }
        }
        cur = next;
    }
    cur
}

/// Every body of length `1..=max_len` with a simple positive-confidence path
/// from `h` to `t`, mapped to its best path product over simple paths. Atoms
/// below `min_conf` are not followed and no entity is visited twice.
pub fn path_bodies(
    doc: &Document,
    h: EntityId,
    t: EntityId,
    max_len: usize,
    min_conf: f64,
) -> BTreeMap<Vec<RelationId>, f64> {
    fn walk(
        doc: &Document,
        at: EntityId,
        t: EntityId,
        left: usize,
        min_conf: f64,
        visited: &mut [bool],
        body: &mut Vec<RelationId>,
        value: f64,
        out: &mut BTreeMap<Vec<RelationId>, f64>,
    ) {
        if left == 0 {
            return;
        }
        for r in 0..doc.num_relations() {
            let r = RelationId(r as u32);
            for &(e2, c) in doc.out_edges(at, r) {
                if c < min_conf || visited[e2] {
                    continue;
                }
                let v = value * c;
                body.push(r);
                if e2 == t {
                    let slot = out.entry(body.clone()).or_insert(0.0);
                    if v > *slot {
                        *slot = v;
                    }
                } else {
                    visited[e2] = true;
                    walk(doc, e2, t, left - 1, min_conf, visited, body, v, out);
                    visited[e2] = false;
                }
                body.pop();
            }
        }
    }
    let mut out = BTreeMap::new();
    let mut visited = vec![false; doc.num_entities()];
    visited[h] = true;
    walk(doc, h, t, max_len, min_conf, &mut visited, &mut Vec::new(), 1.0, &mut out);
    out
}
