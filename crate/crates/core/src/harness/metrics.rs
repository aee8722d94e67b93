//! Convergence detection, efficiency ratios and anchor-normalized QoE.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::env::QoeSummary;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvergenceRule {
    /// trailing smoothing window, epochs
    pub window: usize,
    /// the plateau band is the top `fraction` of the floor-to-plateau range
    pub fraction: f64,
    /// consecutive epochs the smoothed reward must stay in the band
    pub sustain: usize,
}

impl Default for ConvergenceRule {
    fn default() -> Self {
        ConvergenceRule {
            window: 20,
            fraction: 0.05,
            sustain: 10,
        }
    }
}

impl ConvergenceRule {
    fn validate(&self) -> Result<()> {
        if self.window == 0 || self.sustain == 0 || !(self.fraction > 0.0 && self.fraction < 1.0) {
            return Err(Error::Config(format!("invalid convergence rule {self:?}")));
        }
        Ok(())
    }
}

/// Trailing mean over `window` epochs; element `i` covers epochs
/// `i+1 ..= i+window` (1-based), so the first value belongs to epoch `window`.
pub fn smooth(rewards: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || rewards.len() < window {
        return Vec::new();
    }
    rewards
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceDetail {
    pub plateau: f64,
    pub floor: f64,
    pub threshold: f64,
    /// 1-based epoch, if the band is ever held for `sustain` epochs
    pub epoch: Option<usize>,
}

pub fn convergence_detail(rewards: &[f64], rule: &ConvergenceRule) -> Result<ConvergenceDetail> {
    rule.validate()?;
    if rewards.len() < rule.window + rule.sustain {
        return Err(Error::Config(format!(
            "reward series of {} epochs is shorter than window + sustain = {}",
            rewards.len(),
            rule.window + rule.sustain
        )));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::Config("reward series contains non-finite values".into()));
    }
    let s = smooth(rewards, rule.window);
    let tail = ((0.2 * s.len() as f64).ceil() as usize).max(1);
    let plateau = s[s.len() - tail..].iter().sum::<f64>() / tail as f64;
    let floor = s.iter().copied().fold(f64::INFINITY, f64::min);
    let threshold = floor + (1.0 - rule.fraction) * (plateau - floor);
    let mut run = 0usize;
    let mut epoch = None;
    for (i, &v) in s.iter().enumerate() {
        if v >= threshold {
            run += 1;
            if run == rule.sustain {
                let first = i + 1 - rule.sustain;
                epoch = Some(first + rule.window);
                break;
            }
        } else {
            run = 0;
        }
    }
    Ok(ConvergenceDetail {
        plateau,
        floor,
        threshold,
        epoch,
    })
}

/// First 1-based epoch at which the smoothed reward enters the plateau band
/// and stays there for `sustain` epochs.
pub fn convergence_epoch(rewards: &[f64], rule: &ConvergenceRule) -> Result<Option<usize>> {
    convergence_detail(rewards, rule).map(|d| d.epoch)
}

fn positive(x: f64, name: &str) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {x}")))
    }
}

/// Fractional reduction of training time: `(base − new) / base`.
pub fn efficiency_gain(t_base: f64, t_new: f64) -> Result<f64> {
    positive(t_base, "baseline time")?;
    positive(t_new, "new time")?;
    Ok((t_base - t_new) / t_base)
}

/// Speed-up in percent: `100 · (base − new) / new`.
pub fn speedup_percent(t_base: f64, t_new: f64) -> Result<f64> {
    positive(t_base, "baseline time")?;
    positive(t_new, "new time")?;
    Ok(100.0 * (t_base - t_new) / t_new)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Ratio,
    /// Anchor value was zero; `normalized` holds `value − anchor`.
    AbsDiff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QoeRow {
    pub scheme: String,
    pub metric: &'static str,
    pub value: f64,
    pub anchor: f64,
    pub normalized: f64,
    pub mode: Normalization,
}

/// Divides each scheme's mean bitrate, stall rate and mean delay by the
/// anchor scheme's. A zero anchor metric falls back to an absolute
/// difference, flagged in `mode`.
pub fn qoe_report(runs: &[(String, QoeSummary)], anchor: &str) -> Result<Vec<QoeRow>> {
    let base = runs
        .iter()
        .find(|(name, _)| name == anchor)
        .map(|(_, q)| *q)
        .ok_or_else(|| Error::Config(format!("anchor scheme {anchor:?} not among the runs")))?;
    let metrics: [(&'static str, fn(&QoeSummary) -> f64); 3] = [
        ("bitrate", |q| q.mean_bitrate),
        ("stall_rate", |q| q.stall_rate),
        ("delay", |q| q.mean_delay),
    ];
    let mut rows = Vec::new();
    for (name, q) in runs {
        for (metric, get) in metrics {
            let (value, anchor) = (get(q), get(&base));
            let (normalized, mode) = if anchor == 0.0 {
                (value - anchor, Normalization::AbsDiff)
            } else {
                (value / anchor, Normalization::Ratio)
            };
            rows.push(QoeRow {
                scheme: name.clone(),
                metric,
                value,
                anchor,
                normalized,
                mode,
            });
        }
    }
    Ok(rows)
}

pub fn qoe_report_csv(rows: &[QoeRow]) -> String {
    let mut out = String::from("scheme,metric,value,anchor,normalized,mode\n");
    for r in rows {
        let mode = match r.mode {
            Normalization::Ratio => "ratio",
            Normalization::AbsDiff => "abs_diff",
        };
        writeln!(out, "{},{},{},{},{},{}", r.scheme, r.metric, r.value, r.anchor, r.normalized, mode).unwrap();
    }
    out
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}
