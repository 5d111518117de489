use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use dashmap::DashMap;
use serde::{Deserialize, Serialize};

use qac_core::archive::ModelArchive;
use qac_core::complete::{beam_search_with, BeamConfig, WeightCache};
use qac_core::corpus::{encode_query, TokenId, UserId, Vocabulary};
use qac_core::model::{sequence_nll, Parameters, UserEmbeddings};
use qac_core::train::{online_update, AdadeltaConfig, AdadeltaState};

/// Largest number of completions a request may ask for.
pub const MAX_TOP_N: usize = 10;

/// Row of a session's private one-row embedding table.
const SESSION_ROW: UserId = UserId(1);

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown user {0}")]
    UnknownUser(u32),
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Core(#[from] qac_core::Error),
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub beam: BeamConfig,
    pub online: AdadeltaConfig,
    /// Selections buffered per user before they are applied; 1 applies
    /// every selection immediately.
    pub defer_updates: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            beam: BeamConfig::default(),
            online: AdadeltaConfig::default(),
            defer_updates: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCompletion {
    pub text: String,
    pub logprob: f32,
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectOutcome {
    /// Updates applied by this selection (0 while buffered).
    pub applied: usize,
    pub version: u64,
}

/// Online state of one user.
#[derive(Debug)]
struct Session {
    table: UserEmbeddings,
    ada: AdadeltaState,
    /// Incremented once per applied update.
    version: u64,
    pending: Vec<Vec<TokenId>>,
}

/// Loaded model plus per-user online state.
///
/// Shared parameters are never mutated after construction. Each user's
/// session sits behind its own lock, so selections for one user are applied
/// in order while other users proceed independently.
#[derive(Debug)]
pub struct Engine {
    params: Parameters,
    vocab: Vocabulary,
    base: UserEmbeddings,
    user_keys: BTreeMap<String, UserId>,
    sessions: DashMap<UserId, Arc<Mutex<Session>>>,
    next_id: AtomicU32,
    cache: WeightCache,
    config: EngineConfig,
}

fn lock(session: &Mutex<Session>) -> MutexGuard<'_, Session> {
    session
        .lock()
        .unwrap_or_else(|poisoned| poisoned.into_inner())
}

impl Engine {
    pub fn new(archive: ModelArchive, config: EngineConfig) -> Result<Self> {
        config.beam.validate(archive.params.config.vocab_size)?;
        if config.defer_updates == 0 {
            return Err(ServiceError::BadRequest(
                "defer_updates must be at least 1".into(),
            ));
        }
        archive.users.row(UserId::RARE)?;
        let next = archive.users.len() as u32 + 1;
        Ok(Self {
            params: archive.params,
            vocab: archive.vocab,
            base: archive.users,
            user_keys: archive.user_keys,
            sessions: DashMap::new(),
            next_id: AtomicU32::new(next),
            cache: WeightCache::new(),
            config,
        })
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// Adapted-weight computations performed so far.
    pub fn adaptations(&self) -> u64 {
        self.cache.computations()
    }

    /// Id of a training user by log key.
    pub fn user_for_key(&self, key: &str) -> Option<UserId> {
        self.user_keys.get(key).copied()
    }

    /// Users known to the engine, trained and created.
    pub fn user_count(&self) -> usize {
        self.next_id.load(Ordering::SeqCst) as usize - 1
    }

    fn new_session(&self, row: UserId) -> Result<Session> {
        let mut table = UserEmbeddings::zeros(0, self.base.dim());
        table.push(self.base.row(row)?)?;
        let mut ada = AdadeltaState::new(self.config.online);
        ada.reset(SESSION_ROW, table.dim());
        Ok(Session {
            table,
            ada,
            version: 0,
            pending: Vec::new(),
        })
    }

    /// Adds a user initialised from the rare-user embedding.
    pub fn create_user(&self) -> Result<UserId> {
        let id = UserId(self.next_id.fetch_add(1, Ordering::SeqCst));
        let session = self.new_session(UserId::RARE)?;
        self.sessions.insert(id, Arc::new(Mutex::new(session)));
        Ok(id)
    }

    fn session(&self, user: UserId) -> Result<Arc<Mutex<Session>>> {
        if let Some(s) = self.sessions.get(&user) {
            return Ok(s.clone());
        }
        // trained users get a session on first use
        if user.0 == 0 || !self.base.contains(user) {
            return Err(ServiceError::UnknownUser(user.0));
        }
        let session = self.new_session(user)?;
        Ok(self
            .sessions
            .entry(user)
            .or_insert_with(|| Arc::new(Mutex::new(session)))
            .clone())
    }

    /// Ranked completions of `prefix` for `user`, at most `top_n` of them.
    pub fn complete(
        &self,
        user: UserId,
        prefix: &str,
        top_n: usize,
    ) -> Result<Vec<RankedCompletion>> {
        if prefix.is_empty() {
            return Err(ServiceError::BadRequest("prefix is empty".into()));
        }
        if !(1..=MAX_TOP_N).contains(&top_n) {
            return Err(ServiceError::BadRequest(format!(
                "top_n must lie in 1..={MAX_TOP_N}"
            )));
        }
        let session = self.session(user)?;
        let (row, version) = {
            let s = lock(&session);
            (s.table.row(SESSION_ROW)?.to_owned(), s.version)
        };
        let weights = self
            .cache
            .get_or_compute(&self.params, user, version, row.view())?;
        let ranked = beam_search_with(
            &self.params,
            &weights,
            &self.vocab,
            prefix,
            &self.config.beam,
        )?;
        Ok(ranked
            .into_iter()
            .take(top_n)
            .enumerate()
            .map(|(i, c)| RankedCompletion {
                text: c.text,
                logprob: c.logprob as f32,
                rank: i + 1,
            })
            .collect())
    }

    /// Records that `user` selected `query` and updates their embedding.
    pub fn select(&self, user: UserId, query: &str) -> Result<SelectOutcome> {
        if query.is_empty() {
            return Err(ServiceError::BadRequest("query is empty".into()));
        }
        let session = self.session(user)?;
        let mut s = lock(&session);
        s.pending.push(encode_query(&self.vocab, query, None));
        if s.pending.len() < self.config.defer_updates {
            return Ok(SelectOutcome {
                applied: 0,
                version: s.version,
            });
        }
        let pending = std::mem::take(&mut s.pending);
        let Session { table, ada, .. } = &mut *s;
        for tokens in &pending {
            online_update(&self.params, table, ada, SESSION_ROW, tokens)?;
        }
        s.version += pending.len() as u64;
        self.cache.invalidate(user, s.version);
        Ok(SelectOutcome {
            applied: pending.len(),
            version: s.version,
        })
    }

    /// Summed NLL (nats) of `query` under the user's current embedding.
    pub fn nll(&self, user: UserId, query: &str) -> Result<f64> {
        if query.is_empty() {
            return Err(ServiceError::BadRequest("query is empty".into()));
        }
        let session = self.session(user)?;
        let table = lock(&session).table.clone();
        let tokens = encode_query(&self.vocab, query, None);
        Ok(sequence_nll(&self.params, &table, SESSION_ROW, &tokens)?)
    }
}
