//! Token KV storage and the active/frozen residency ledger.
//!
//! Every token ever inserted stays in the ledger for the lifetime of a
//! session. Freezing moves a token's KV pair from the active tier into a
//! [`FrozenTier`] and restoring moves it back untouched; only the RR recovery
//! level may shorten the ledger, and only by rewinding its newest tokens.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, PolicyError, Result};
use crate::scheduler::ProtectedSet;

/// Dimensions of one token's KV payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvShape {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl KvShape {
    pub const fn new(layers: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            layers,
            heads,
            head_dim,
        }
    }

    /// Shape with no payload, used when replaying score traces.
    pub const fn empty() -> Self {
        Self::new(0, 0, 0)
    }

    /// Scalars per tensor (keys or values) of one token.
    pub const fn len(&self) -> usize {
        self.layers * self.heads * self.head_dim
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scalars per layer (all heads).
    pub const fn layer_len(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn layer_range(&self, layer: usize) -> core::ops::Range<usize> {
        let n = self.layer_len();
        layer * n..(layer + 1) * n
    }
}

/// Keys and values of one token, layer-major: `[layer][head][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvPair {
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
}

impl KvPair {
    pub fn zeros(shape: KvShape) -> Self {
        Self {
            keys: alloc::vec![0.0; shape.len()],
            values: alloc::vec![0.0; shape.len()],
        }
    }

    pub fn layer_keys(&self, shape: KvShape, layer: usize) -> &[f64] {
        &self.keys[shape.layer_range(layer)]
    }

    pub fn layer_values(&self, shape: KvShape, layer: usize) -> &[f64] {
        &self.values[shape.layer_range(layer)]
    }

    fn check(&self, shape: KvShape) -> Result<()> {
        if self.keys.len() != shape.len() || self.values.len() != shape.len() {
            return Err(Error::Input(format!(
                "kv payload has {}/{} scalars, shape expects {}",
                self.keys.len(),
                self.values.len(),
                shape.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Residency {
    Active,
    Frozen,
}

/// Bookkeeping for one context token. The KV payload itself lives in the
/// tier the token currently resides in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenRecord {
    pub position: usize,
    pub token: u32,
    pub residency: Residency,
    /// Remaining frozen steps; zero while active.
    pub freeze_timer: u64,
    /// Duration assigned by the most recent freeze.
    pub assigned_duration: u64,
    /// Step of the most recent freeze, if the token is frozen.
    pub frozen_at: Option<u64>,
    /// Steps at which the token was flagged, strictly increasing. Entries
    /// older than the history window are pruned.
    pub detection_log: Vec<u64>,
}

/// Storage for frozen KV pairs.
pub trait FrozenTier {
    fn stash(&mut self, position: usize, kv: KvPair) -> Result<()>;
    fn fetch(&mut self, position: usize) -> Result<KvPair>;
    /// Reads a stored pair without removing it.
    fn peek(&self, position: usize) -> Result<KvPair>;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// In-process frozen tier.
#[derive(Debug, Clone, Default)]
pub struct MemoryTier {
    entries: BTreeMap<usize, KvPair>,
}

impl FrozenTier for MemoryTier {
    fn stash(&mut self, position: usize, kv: KvPair) -> Result<()> {
        if self.entries.insert(position, kv).is_some() {
            return Err(Error::Tier(format!("position {position} stored twice")));
        }
        Ok(())
    }

    fn fetch(&mut self, position: usize) -> Result<KvPair> {
        self.entries
            .remove(&position)
            .ok_or_else(|| Error::Tier(format!("position {position} not stored")))
    }

    fn peek(&self, position: usize) -> Result<KvPair> {
        self.entries
            .get(&position)
            .cloned()
            .ok_or_else(|| Error::Tier(format!("position {position} not stored")))
    }

    fn len(&self) -> usize {
        self.entries.len()
    }
}

/// A token moved back to the active tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Restored {
    pub position: usize,
    pub frozen_at: u64,
    pub assigned_duration: u64,
}

/// The partition of all tokens into the active and frozen tiers.
#[derive(Debug, Clone)]
pub struct CacheLedger<T = MemoryTier> {
    shape: KvShape,
    window_size: usize,
    pinned_prefix: usize,
    tokens: Vec<TokenRecord>,
    hot: Vec<Option<KvPair>>,
    frozen: BTreeSet<usize>,
    tier: T,
    step: u64,
}

impl CacheLedger<MemoryTier> {
    pub fn new(shape: KvShape, window_size: usize, pinned_prefix: usize) -> Self {
        Self::with_tier(shape, window_size, pinned_prefix, MemoryTier::default())
    }
}

impl<T: FrozenTier> CacheLedger<T> {
    pub fn with_tier(shape: KvShape, window_size: usize, pinned_prefix: usize, tier: T) -> Self {
        Self {
            shape,
            window_size,
            pinned_prefix,
            tokens: Vec::new(),
            hot: Vec::new(),
            frozen: BTreeSet::new(),
            tier,
            step: 0,
        }
    }

    pub fn shape(&self) -> KvShape {
        self.shape
    }

    pub fn tier(&self) -> &T {
        &self.tier
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.tokens.len() - self.frozen.len()
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.len()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Moves the ledger clock forward to `step`.
    pub fn advance_to(&mut self, step: u64) -> Result<()> {
        if step <= self.step && !(step == 0 && self.step == 0) {
            return Err(Error::Invariant(format!(
                "step {step} does not follow step {}",
                self.step
            )));
        }
        self.step = step;
        Ok(())
    }

    pub fn protected(&self) -> ProtectedSet {
        ProtectedSet::new(self.len(), self.window_size, self.pinned_prefix)
    }

    pub fn record(&self, position: usize) -> Option<&TokenRecord> {
        self.tokens.get(position)
    }

    pub fn records(&self) -> &[TokenRecord] {
        &self.tokens
    }

    pub(crate) fn record_mut(&mut self, position: usize) -> Result<&mut TokenRecord> {
        self.tokens
            .get_mut(position)
            .ok_or(Error::Policy(PolicyError::UnknownPosition(position)))
    }

    /// Appends a new active token and returns its position.
    pub fn insert_token(&mut self, token: u32, kv: KvPair) -> Result<usize> {
        kv.check(self.shape)?;
        let position = self.tokens.len();
        self.tokens.push(TokenRecord {
            position,
            token,
            residency: Residency::Active,
            freeze_timer: 0,
            assigned_duration: 0,
            frozen_at: None,
            detection_log: Vec::new(),
        });
        self.hot.push(Some(kv));
        Ok(position)
    }

    /// Moves an active, unprotected token into the frozen tier for
    /// `duration` ticks.
    pub fn freeze(&mut self, position: usize, duration: u64) -> Result<()> {
        let protected = self.protected();
        let step = self.step;
        let record = self.record_mut(position)?;
        if record.residency == Residency::Frozen {
            return Err(PolicyError::AlreadyFrozen(position).into());
        }
        if protected.contains(position) {
            return Err(PolicyError::Protected(position).into());
        }
        if duration == 0 {
            return Err(PolicyError::ZeroDuration(position).into());
        }
        let kv = self.hot[position]
            .take()
            .ok_or_else(|| Error::Invariant(format!("active token {position} has no kv")))?;
        if let Err(e) = self.tier.stash(position, kv.clone()) {
            self.hot[position] = Some(kv);
            return Err(e);
        }
        let record = &mut self.tokens[position];
        record.residency = Residency::Frozen;
        record.freeze_timer = duration;
        record.assigned_duration = duration;
        record.frozen_at = Some(step);
        self.frozen.insert(position);
        Ok(())
    }

    /// Decrements every frozen timer and restores the tokens that reach zero.
    /// Returns the restored tokens in ascending position order.
    pub fn tick_and_restore(&mut self) -> Result<Vec<Restored>> {
        let mut due = Vec::new();
        for &p in &self.frozen {
            let record = &mut self.tokens[p];
            record.freeze_timer = record.freeze_timer.saturating_sub(1);
            if record.freeze_timer == 0 {
                due.push(p);
            }
        }
        due.into_iter().map(|p| self.restore(p)).collect()
    }

    /// Restores a frozen token regardless of its timer.
    pub fn restore(&mut self, position: usize) -> Result<Restored> {
        let record = self.record_mut(position)?;
        if record.residency != Residency::Frozen {
            return Err(PolicyError::NotFrozen(position).into());
        }
        let kv = self.tier.fetch(position)?;
        let record = &mut self.tokens[position];
        let restored = Restored {
            position,
            frozen_at: record.frozen_at.unwrap_or(self.step),
            assigned_duration: record.assigned_duration,
        };
        record.residency = Residency::Active;
        record.freeze_timer = 0;
        record.frozen_at = None;
        self.hot[position] = Some(kv);
        self.frozen.remove(&position);
        Ok(restored)
    }

    /// Active tokens in ascending position order.
    pub fn active_view(&self) -> impl Iterator<Item = (usize, &KvPair)> + '_ {
        self.hot
            .iter()
            .enumerate()
            .filter_map(|(p, kv)| kv.as_ref().map(|kv| (p, kv)))
    }

    pub fn active_positions(&self) -> Vec<usize> {
        self.active_view().map(|(p, _)| p).collect()
    }

    pub fn frozen_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.frozen.iter().copied()
    }

    pub fn residency(&self, position: usize) -> Option<Residency> {
        self.tokens.get(position).map(|r| r.residency)
    }

    /// A copy of a token's KV pair from whichever tier holds it.
    pub fn kv_snapshot(&self, position: usize) -> Result<KvPair> {
        match self.hot.get(position) {
            Some(Some(kv)) => Ok(kv.clone()),
            Some(None) => self.tier.peek(position),
            None => Err(PolicyError::UnknownPosition(position).into()),
        }
    }

    /// Token ids in position order.
    pub fn token_ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|r| r.token).collect()
    }

    /// Empties every detection log.
    pub fn clear_detections(&mut self) {
        for r in &mut self.tokens {
            r.detection_log.clear();
        }
    }

    /// Drops the newest tokens so that `len` remain. Every token must be
    /// active, otherwise the sliding window could move back over frozen
    /// tokens.
    pub fn truncate(&mut self, len: usize) -> Result<()> {
        if !self.frozen.is_empty() {
            return Err(Error::Invariant(format!(
                "rewind with {} frozen tokens",
                self.frozen.len()
            )));
        }
        self.tokens.truncate(len);
        self.hot.truncate(len);
        Ok(())
    }

    /// Checks conservation and the per-record residency invariants.
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |msg: alloc::string::String| Err(Error::Invariant(msg));
        if self.active_count() + self.frozen_count() != self.len() {
            return fail(format!(
                "active {} + frozen {} != total {}",
                self.active_count(),
                self.frozen_count(),
                self.len()
            ));
        }
        if self.tier.len() != self.frozen.len() {
            return fail(format!(
                "tier holds {} entries for {} frozen tokens",
                self.tier.len(),
                self.frozen.len()
            ));
        }
        let protected = self.protected();
        for (p, r) in self.tokens.iter().enumerate() {
            let hot = self.hot[p].is_some();
            match r.residency {
                Residency::Active if !hot || r.freeze_timer != 0 => {
                    return fail(format!("active token {p} is inconsistent"))
                }
                Residency::Frozen if hot || r.freeze_timer == 0 || !self.frozen.contains(&p) => {
                    return fail(format!("frozen token {p} is inconsistent"))
                }
                Residency::Frozen if protected.contains(p) && p >= protected.window_start() => {
                    return fail(format!("frozen token {p} inside the sliding window"))
                }
                _ => {}
            }
            if r.detection_log.windows(2).any(|w| w[0] >= w[1]) {
                return fail(format!("detection log of token {p} is not increasing"));
            }
        }
        Ok(())
    }
}
