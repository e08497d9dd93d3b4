//! Generation backends behind one handle: a trainable desk policy and a
//! generation-only remote endpoint.

mod desk;
mod prompt;
mod remote;

pub use desk::{
    log_softmax, split_words, Completion, DeskConfig, DeskPolicy, PromptContext, Vocab, CLOSE, DESK_FORMAT_VERSION,
    EOS, EOS_TOKEN, MAX_VOCAB, OPEN, UNK, UNK_TOKEN,
};
pub use prompt::{build_prompt, PromptTemplate, TemplateError, PROFILES_SLOT, QUERY_SLOT};
pub use remote::{RemoteCfg, RemoteClient, DEFAULT_API_KEY_ENV};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid vocabulary: {0}")]
    BadVocab(String),
    #[error("invalid policy configuration: {0}")]
    BadConfig(String),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("gradient contains non-finite values")]
    NonFiniteGrad,
    #[error("{0} is not supported by the remote backend")]
    Unsupported(&'static str),
    #[error("remote endpoint returned status {status}: {body}")]
    Remote { status: u16, body: String },
    #[error("remote request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One sample from any backend. Token ids and log-probabilities exist only
/// for the desk policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub text: String,
    pub tokens: Option<Vec<u32>>,
    pub logprobs: Option<Vec<f64>>,
}

impl From<Completion> for Sampled {
    fn from(c: Completion) -> Self {
        Sampled {
            text: c.text,
            tokens: Some(c.tokens),
            logprobs: Some(c.logprobs),
        }
    }
}

#[derive(Debug, Clone)]
pub enum PolicyHandle {
    Desk(DeskPolicy),
    Remote(RemoteClient),
}

impl PolicyHandle {
    pub fn is_trainable(&self) -> bool {
        matches!(self, PolicyHandle::Desk(_))
    }

    pub fn desk(&self) -> Result<&DeskPolicy, PolicyError> {
        match self {
            PolicyHandle::Desk(p) => Ok(p),
            PolicyHandle::Remote(_) => Err(PolicyError::Unsupported("training")),
        }
    }

    pub fn desk_mut(&mut self) -> Result<&mut DeskPolicy, PolicyError> {
        match self {
            PolicyHandle::Desk(p) => Ok(p),
            PolicyHandle::Remote(_) => Err(PolicyError::Unsupported("training")),
        }
    }

    /// `n` completions of at most `max_tokens` tokens. The remote backend
    /// issues `n` requests; with temperature 0 they may be identical.
    pub fn sample(&self, prompt: &str, n: usize, max_tokens: usize, seed: u64) -> Result<Vec<Sampled>, PolicyError> {
        match self {
            PolicyHandle::Desk(p) => Ok(p.sample(prompt, n, max_tokens, seed)?.into_iter().map(Sampled::from).collect()),
            PolicyHandle::Remote(c) => {
                if n == 0 || max_tokens == 0 {
                    return Err(PolicyError::BadConfig("n and max_tokens must be >= 1".into()));
                }
                let prompts = vec![prompt.to_string(); n];
                c.complete_many(&prompts, max_tokens)
                    .into_iter()
                    .map(|r| {
                        r.map(|text| Sampled {
                            text,
                            tokens: None,
                            logprobs: None,
                        })
                    })
                    .collect()
            }
        }
    }

    /// Deterministic decoding: greedy for the desk policy, one request for
    /// the remote backend.
    pub fn generate(&self, prompt: &str, max_tokens: usize) -> Result<String, PolicyError> {
        match self {
            PolicyHandle::Desk(p) => Ok(p.greedy(prompt, max_tokens)?.text),
            PolicyHandle::Remote(c) => c.complete(prompt, max_tokens),
        }
    }

    pub fn logprob(&self, prompt: &str, completion: &[u32]) -> Result<Vec<f64>, PolicyError> {
        match self {
            PolicyHandle::Desk(p) => p.logprob(prompt, completion),
            PolicyHandle::Remote(_) => Err(PolicyError::Unsupported("logprob")),
        }
    }

    pub fn apply_gradient(&mut self, grad: &[f64], lr: f64) -> Result<(), PolicyError> {
        match self {
            PolicyHandle::Desk(p) => p.apply_gradient(grad, lr),
            PolicyHandle::Remote(_) => Err(PolicyError::Unsupported("apply_gradient")),
        }
    }
}
