//! Relation vocabulary with materialized inverse relations.
//!
//! Base relations keep the ids they were given in; each relation that is not
//! declared self-inverse gets an inverse appended after all base relations,
//! named `X⁻¹`. The generator's STOP symbol sits one past the last relation id.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Suffix used to name materialized inverse relations.
pub const INVERSE_SUFFIX: &str = "⁻¹";
/// ASCII spelling accepted on input for [`INVERSE_SUFFIX`].
pub const INVERSE_SUFFIX_ASCII: &str = "^-1";
/// Vocabulary-file suffix marking a self-inverse relation.
pub const SELF_INVERSE_MARK: &str = "#self";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub u32);

impl RelationId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationVocab {
    names: Vec<String>,
    inverse_of: Vec<RelationId>,
    base_count: usize,
    index: HashMap<String, RelationId>,
}

fn check_name(name: &str) -> Result<()> {
    let reserved = ['|', ',', '&', '#', '[', ']', '"'];
    if name.is_empty()
        || name.chars().any(|c| c.is_whitespace() || reserved.contains(&c))
        || name.contains("<-")
        || name.ends_with(INVERSE_SUFFIX)
        || name.ends_with(INVERSE_SUFFIX_ASCII)
    {
        return Err(Error::InvalidRelationName(name.to_string()));
    }
    Ok(())
}

impl RelationVocab {
    /// Builds a vocabulary from base relation names, appending an inverse for
    /// every name not listed in `self_inverse`.
    pub fn build<S: AsRef<str>>(names: &[S], self_inverse: &BTreeSet<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidArgument(
                "relation vocabulary must not be empty".into(),
            ));
        }
        let mut index = HashMap::new();
        let mut all: Vec<String> = Vec::with_capacity(names.len() * 2);
        for name in names {
            let name = name.as_ref();
            check_name(name)?;
            if index
                .insert(name.to_string(), RelationId(all.len() as u32))
                .is_some()
            {
                return Err(Error::DuplicateRelation(name.to_string()));
            }
            all.push(name.to_string());
        }
        for name in self_inverse {
            if !index.contains_key(name) {
                return Err(Error::UnknownRelation(name.clone()));
            }
        }
        let base_count = all.len();
        let mut inverse_of: Vec<RelationId> = (0..base_count as u32).map(RelationId).collect();
        for base in 0..base_count {
            if self_inverse.contains(&all[base]) {
                continue;
            }
            let inv = RelationId(all.len() as u32);
            let inv_name = format!("{}{INVERSE_SUFFIX}", all[base]);
            index.insert(inv_name.clone(), inv);
            all.push(inv_name);
            inverse_of[base] = inv;
            inverse_of.push(RelationId(base as u32));
        }
        Ok(Self {
            names: all,
            inverse_of,
            base_count,
            index,
        })
    }

    /// Parses the vocabulary file format: one name per line, `#self` suffix
    /// for self-inverse relations, blank lines and `#` comments ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut names = Vec::new();
        let mut self_inverse = BTreeSet::new();
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.strip_suffix(SELF_INVERSE_MARK) {
                Some(name) => {
                    let name = name.trim().to_string();
                    self_inverse.insert(name.clone());
                    names.push(name);
                }
                None => names.push(line.to_string()),
            }
        }
        Self::build(&names, &self_inverse)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for r in self.base_ids() {
            out.push_str(self.name(r));
            if self.inverse(r) == r {
                out.push_str(SELF_INVERSE_MARK);
            }
            out.push('\n');
        }
        out
    }

    /// Number of relation ids, inverses included.
    #[inline]
    pub fn len(&self) -> usize {
        self.names.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Number of relations given at construction.
    #[inline]
    pub fn base_count(&self) -> usize {
        self.base_count
    }

    /// Symbol index of the STOP token in generator distributions.
    #[inline]
    pub fn stop(&self) -> usize {
        self.names.len()
    }

    #[inline]
    pub fn inverse(&self, r: RelationId) -> RelationId {
        self.inverse_of[r.index()]
    }

    #[inline]
    pub fn is_base(&self, r: RelationId) -> bool {
        r.index() < self.base_count
    }

    #[inline]
    pub fn contains(&self, r: RelationId) -> bool {
        r.index() < self.names.len()
    }

    pub fn check(&self, r: RelationId) -> Result<()> {
        if self.contains(r) {
            Ok(())
        } else {
            Err(Error::RelationOutOfRange {
                id: r.0,
                len: self.len(),
            })
        }
    }

    pub fn name(&self, r: RelationId) -> &str {
        &self.names[r.index()]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<RelationId> {
        if let Some(&r) = self.index.get(name) {
            return Some(r);
        }
        name.strip_suffix(INVERSE_SUFFIX_ASCII)
            .and_then(|base| self.index.get(&format!("{base}{INVERSE_SUFFIX}")))
            .copied()
    }

    pub fn resolve(&self, name: &str) -> Result<RelationId> {
        self.id(name)
            .ok_or_else(|| Error::UnknownRelation(name.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = RelationId> + '_ {
        (0..self.names.len() as u32).map(RelationId)
    }

    pub fn base_ids(&self) -> impl Iterator<Item = RelationId> + '_ {
        (0..self.base_count as u32).map(RelationId)
    }
}
