//! Periodic re-identification of each client's network condition group.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::federation::ClientId;
use crate::trace::{group_of, GroupId, NetworkType, TransportMode};

/// Re-identification period used when the config does not set one.
pub const DEFAULT_PERIOD_S: f64 = 30.0;

#[derive(Debug, Error, PartialEq)]
pub enum DiscriminatorError {
    #[error("empty condition schedule")]
    EmptySchedule,
    #[error("period must be positive, got {0}")]
    BadPeriod(f64),
    #[error("condition schedule is not sorted by time")]
    Unsorted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientCondition {
    pub client: ClientId,
    pub network_type: NetworkType,
    pub transport_mode: TransportMode,
    /// seconds
    pub observed_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupChange {
    pub client: ClientId,
    pub from: GroupId,
    pub to: GroupId,
    /// seconds
    pub at: f64,
}

pub fn classify(condition: &ClientCondition) -> GroupId {
    group_of(condition.network_type, condition.transport_mode)
}

/// Samples the schedule at `0, period, 2·period, …` up to the last scheduled
/// time (or `horizon`, if later) and reports every sample whose group
/// differs from the previous sample's. Changes that revert before the next
/// sample point are never seen.
pub fn poll(
    schedule: &[ClientCondition],
    period: f64,
    horizon: f64,
) -> Result<Vec<GroupChange>, DiscriminatorError> {
    if !(period > 0.0 && period.is_finite()) {
        return Err(DiscriminatorError::BadPeriod(period));
    }
    if schedule.is_empty() {
        return Err(DiscriminatorError::EmptySchedule);
    }
    if schedule.windows(2).any(|w| w[1].observed_at < w[0].observed_at) {
        return Err(DiscriminatorError::Unsorted);
    }
    let end = horizon.max(schedule[schedule.len() - 1].observed_at);
    let mut changes = Vec::new();
    let mut prev: Option<GroupId> = None;
    let mut k = 0u64;
    loop {
        let t = k as f64 * period;
        if t > end {
            break;
        }
        // the condition in force at t; before the first entry, the first entry
        let idx = schedule.partition_point(|c| c.observed_at <= t).saturating_sub(1);
        let cond = &schedule[idx];
        let g = classify(cond);
        if let Some(p) = prev {
            if p != g {
                changes.push(GroupChange {
                    client: cond.client.clone(),
                    from: p,
                    to: g,
                    at: t,
                });
            }
        }
        prev = Some(g);
        k += 1;
    }
    Ok(changes)
}
