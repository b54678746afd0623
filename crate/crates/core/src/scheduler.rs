//! Sublinear freeze scheduling.
//!
//! A token flagged as low-importance accumulates detections; the number of
//! detections inside the last `history_window` steps, `c`, sets the freeze
//! duration `floor(sqrt(c) / k)`. The first few detections therefore do not
//! freeze at all, repeated ones escalate slowly, and with a bounded window the
//! duration can never exceed `floor(sqrt(W) / k)`.

use alloc::vec::Vec;
use core::ops::Range;

use num_bigint::BigUint;

use crate::cache::TokenRecord;
use crate::error::{Error, PolicyError, Result};
use crate::relevance::ScaleMode;

/// History window value meaning "count every detection ever made".
pub const UNBOUNDED_HISTORY: u64 = u64::MAX;

/// Knobs of the freeze policy.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PolicyParams {
    /// Most recent tokens that are never frozen (K).
    pub window_size: usize,
    /// Relevance threshold; scores strictly below it are flagged.
    pub tau: f64,
    /// Divisor `k` of the duration schedule.
    pub softness: f64,
    /// Steps over which detections are counted (W). [`UNBOUNDED_HISTORY`] disables expiry.
    #[cfg_attr(feature = "serde", serde(with = "history_serde"))]
    pub history_window: u64,
    /// Leading positions that are never frozen.
    pub pinned_prefix: usize,
    pub scale_mode: ScaleMode,
}

/// Writes the unbounded sentinel as `"inf"`; reads an integer or `"inf"`.
#[cfg(feature = "serde")]
mod history_serde {
    use super::UNBOUNDED_HISTORY;
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(w: &u64, s: S) -> Result<S::Ok, S::Error> {
        if *w == UNBOUNDED_HISTORY {
            s.serialize_str("inf")
        } else {
            s.serialize_u64(*w)
        }
    }

    struct Window;

    impl Visitor<'_> for Window {
        type Value = u64;

        fn expecting(&self, f: &mut core::fmt::Formatter) -> core::fmt::Result {
            f.write_str("a step count or \"inf\"")
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<u64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<u64, E> {
            u64::try_from(v).map_err(|_| E::custom("history_window must be >= 1"))
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<u64, E> {
            match v {
                "inf" | "unbounded" => Ok(UNBOUNDED_HISTORY),
                _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
            }
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        d.deserialize_any(Window)
    }
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self {
            window_size: 32,
            tau: 0.50,
            softness: 2.0,
            history_window: 128,
            pinned_prefix: 0,
            scale_mode: ScaleMode::Scaled,
        }
    }
}

impl PolicyParams {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 {
            return Err(Error::config("window_size", "must be at least 1"));
        }
        if self.tau.is_nan() {
            return Err(Error::config("tau", "must be a number"));
        }
        if !(self.softness.is_finite() && self.softness > 0.0) {
            return Err(Error::config("softness", "must be finite and > 0"));
        }
        if self.history_window == 0 {
            return Err(Error::config("history_window", "must be at least 1"));
        }
        Ok(())
    }

    /// Largest duration the schedule can assign, `floor(sqrt(W) / k)`.
    /// `None` when the history window is unbounded.
    pub fn max_duration(&self) -> Option<u64> {
        (self.history_window != UNBOUNDED_HISTORY)
            .then(|| freeze_duration(self.history_window, self.softness))
    }
}

/// `floor(sqrt(count) / softness)`, computed exactly.
///
/// Every finite positive `f64` is `m * 2^e` with odd `m`. For `e >= 0` the
/// divisor is an integer and the result is `isqrt(count) / k`. Otherwise the
/// result is `isqrt(count * 4^s) / m` with `s = -e`, evaluated in `u128`
/// when it fits and with big integers when it does not.
pub fn freeze_duration(count: u64, softness: f64) -> u64 {
    debug_assert!(softness.is_finite() && softness > 0.0);
    if count == 0 {
        return 0;
    }
    let (mant, exp) = decompose(softness);
    if exp >= 0 {
        let root = count.isqrt();
        // root < 2^32, so any divisor at or above 2^32 yields zero.
        if exp >= 32 || (mant as u128) << exp > u64::MAX as u128 {
            return 0;
        }
        return root / (mant << exp);
    }
    let shift = exp.unsigned_abs();
    if u128::from(count).leading_zeros() >= 2 * shift {
        let scaled = u128::from(count) << (2 * shift);
        return saturate(scaled.isqrt() / u128::from(mant));
    }
    let scaled = BigUint::from(count) << (2 * shift as usize);
    let quotient = scaled.sqrt() / BigUint::from(mant);
    u64::try_from(quotient).unwrap_or(u64::MAX)
}

fn saturate(v: u128) -> u64 {
    u64::try_from(v).unwrap_or(u64::MAX)
}

/// Splits a finite positive double into `(odd mantissa, exponent)`.
fn decompose(x: f64) -> (u64, i32) {
    let bits = x.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1u64 << 52) - 1);
    let (mut mant, mut exp) = if biased == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), biased - 1075)
    };
    let tz = mant.trailing_zeros();
    mant >>= tz;
    exp += tz as i32;
    (mant, exp)
}

/// Appends a detection at `step` and returns the sliding count `c`: the
/// number of logged detections with `step' > step - history_window`.
///
/// Entries that have left the window are dropped from the log; steps only
/// move forward, so they can never count again.
pub fn record_detection(record: &mut TokenRecord, step: u64, history_window: u64) -> Result<u64> {
    if let Some(&last) = record.detection_log.last() {
        if step <= last {
            return Err(PolicyError::StaleDetection {
                position: record.position,
                step,
                last,
            }
            .into());
        }
    }
    record.detection_log.push(step);
    if history_window != UNBOUNDED_HISTORY && step >= history_window {
        let cutoff = step - history_window;
        let expired = record.detection_log.partition_point(|&s| s <= cutoff);
        record.detection_log.drain(..expired);
    }
    Ok(record.detection_log.len() as u64)
}

/// Sliding detection count at `step` without recording anything.
pub fn detection_count(record: &TokenRecord, step: u64, history_window: u64) -> u64 {
    if history_window == UNBOUNDED_HISTORY || step < history_window {
        return record.detection_log.iter().filter(|&&s| s <= step).count() as u64;
    }
    let cutoff = step - history_window;
    record
        .detection_log
        .iter()
        .filter(|&&s| s > cutoff && s <= step)
        .count() as u64
}

/// Positions that may not be frozen: the pinned prefix and the most recent
/// `window_size` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProtectedSet {
    total: usize,
    pinned_end: usize,
    window_start: usize,
}

impl ProtectedSet {
    pub fn new(total: usize, window_size: usize, pinned_prefix: usize) -> Self {
        Self {
            total,
            pinned_end: pinned_prefix.min(total),
            window_start: total.saturating_sub(window_size),
        }
    }

    pub fn contains(&self, position: usize) -> bool {
        position < self.total && (position < self.pinned_end || position >= self.window_start)
    }

    /// First position of the sliding window.
    pub fn window_start(&self) -> usize {
        self.window_start
    }

    /// Positions that are eligible for freezing.
    pub fn eligible(&self) -> Range<usize> {
        self.pinned_end.min(self.window_start)..self.window_start
    }

    /// Protected positions in ascending order.
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.total).filter(move |&p| self.contains(p))
    }

    pub fn len(&self) -> usize {
        self.total - self.eligible().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Protected set for a context of `total_tokens` under `params`.
pub fn protected_set(total_tokens: usize, params: &PolicyParams) -> ProtectedSet {
    ProtectedSet::new(total_tokens, params.window_size, params.pinned_prefix)
}

/// Freeze durations `d = 0..=max` for `c = 0..=max_count`; used by the
/// schedule table of the CLI.
pub fn schedule_table(max_count: u64, softness: f64) -> Vec<(u64, u64)> {
    (0..=max_count)
        .map(|c| (c, freeze_duration(c, softness)))
        .collect()
}
