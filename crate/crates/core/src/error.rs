use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate relation name `{0}`")]
    DuplicateRelation(String),

    #[error("invalid relation name `{0}`")]
    InvalidRelationName(String),

    #[error("unknown relation `{0}`")]
    UnknownRelation(String),

    #[error("relation id {id} out of range for a vocabulary of {len}")]
    RelationOutOfRange { id: u32, len: usize },

    #[error("entity id {id} out of range for document `{doc}` with {len} entities")]
    EntityOutOfRange { doc: String, id: usize, len: usize },

    #[error("confidence {value} for {triple} in document `{doc}` is outside [0, 1]")]
    ConfidenceOutOfRange { doc: String, triple: String, value: f64 },

    #[error("conflicting confidences for {triple} in document `{doc}`: {existing} vs {incoming}")]
    InverseConflict {
        doc: String,
        triple: String,
        existing: f64,
        incoming: f64,
    },

    #[error("invalid rule: {0}")]
    InvalidRule(String),

    #[error("rule head {found} does not match query relation {expected}")]
    HeadMismatch { expected: u32, found: u32 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("all rule weights are zero")]
    ZeroWeights,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(
        "extractor diverged for relation {relation} at epoch {epoch}: \
         loss {loss}, gradient norm {grad_norm}, trial loss {trial_loss}"
    )]
    Diverged {
        relation: u32,
        epoch: usize,
        loss: f64,
        grad_norm: f64,
        trial_loss: f64,
    },

    #[error("unknown document `{0}`")]
    UnknownDocument(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("EM iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
