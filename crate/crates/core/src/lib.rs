//! Document-level relation extraction with latent logic rules.
//!
//! A rule generator proposes chain rules for each query relation, a relation
//! extractor grounds them on a document's confidence graph, and EM trains the
//! two against each other.

pub mod datagen;
pub mod document;
pub mod em;
pub mod error;
pub mod extractor;
pub mod generator;
pub mod metrics;
pub mod oracle;
pub mod rule;
pub mod seed;
pub mod vocab;

pub use document::{Corpus, Document, EntityId, Label, LabeledInstance, Triple};
pub use error::{Error, Result};
pub use extractor::{ExtractorWeights, FitConfig, GroundingResult};
pub use generator::{AutoregRuleModel, GeneratorConfig};
pub use rule::{Rule, RuleSet};
pub use vocab::{RelationId, RelationVocab};
