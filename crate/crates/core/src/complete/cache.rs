use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};

use dashmap::DashMap;
use ndarray::ArrayView1;

use crate::corpus::UserId;
use crate::error::Result;
use crate::model::{
    adapted_recurrent_weights, AdaptedWeights, Parameters, UserEmbeddings, Variant,
};

/// Per-user adapted weights keyed by `(user, embedding version)`.
///
/// An entry is computed at most once; bumping a user's version (after an
/// online update) makes the next lookup recompute. The unadapted variant
/// shares one entry for every user and never counts as a computation.
#[derive(Debug, Default)]
pub struct WeightCache {
    entries: DashMap<(UserId, u64), Arc<AdaptedWeights>>,
    shared: OnceLock<Arc<AdaptedWeights>>,
    computations: AtomicU64,
}

impl WeightCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of adaptation computations performed so far.
    pub fn computations(&self) -> u64 {
        self.computations.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get_or_compute(
        &self,
        params: &Parameters,
        user: UserId,
        version: u64,
        u: ArrayView1<f64>,
    ) -> Result<Arc<AdaptedWeights>> {
        if params.config.variant == Variant::Unadapted {
            return Ok(self
                .shared
                .get_or_init(|| {
                    Arc::new(AdaptedWeights {
                        weights: params.recurrent.clone(),
                        bias: params.bias.clone(),
                    })
                })
                .clone());
        }
        let entry = self.entries.entry((user, version)).or_try_insert_with(|| {
            self.computations.fetch_add(1, Ordering::SeqCst);
            adapted_recurrent_weights(params, u, params.config.variant).map(Arc::new)
        })?;
        Ok(entry.value().clone())
    }

    /// Drops every entry of `user` older than `current_version`.
    pub fn invalidate(&self, user: UserId, current_version: u64) {
        self.entries
            .retain(|&(u, v), _| u != user || v >= current_version);
    }

    pub fn clear(&self) {
        self.entries.clear();
    }
}

/// Cached `(W_eff, b_eff)` for a user at a given embedding version.
pub fn precompute_user_weights(
    cache: &WeightCache,
    params: &Parameters,
    users: &UserEmbeddings,
    user: UserId,
    version: u64,
) -> Result<Arc<AdaptedWeights>> {
    let u = users.row(user)?;
    cache.get_or_compute(params, user, version, u)
}
