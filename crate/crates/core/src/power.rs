//! Hidden-layer switching-power side channel.
//!
//! The oracle leaks, for each consecutive pair of queries, how many hidden
//! neurons went from 0 to 1: `P = (π_curr − π_prev)·π_currᵀ`. The surrogate
//! reproduces this with the same expression over `a = σ(2s)`, which is
//! differentiable and collapses to the exact count when every `|s|` is large.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{HiddenState, MlpModel};
use crate::numerics::{sigmoid, SeededRng};

/// Number of hidden neurons that switched 0→1 between two queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SwitchCount(pub u32);

impl SwitchCount {
    pub fn value(self) -> u32 {
        self.0
    }
}

/// One switch count per consecutive query pair.
pub type PowerTrace = Vec<SwitchCount>;

/// Exact `Σ_j (curr_j − prev_j)·curr_j` over binary states.
pub fn switch_count(prev: &HiddenState, curr: &HiddenState) -> Result<SwitchCount> {
    if prev.len() != curr.len() {
        return Err(Error::Dimension {
            context: "switch_count",
            expected: prev.len(),
            found: curr.len(),
        });
    }
    let total: i64 = prev
        .bits()
        .iter()
        .zip(curr.bits())
        .map(|(&p, &c)| (i64::from(c) - i64::from(p)) * i64::from(c))
        .sum();
    Ok(SwitchCount(total as u32))
}

/// Relaxed switch count `Σ_j (a_curr − a_prev)·a_curr` with `a = σ(2s)`.
pub fn soft_switch_count(s_prev: &[f64], s_curr: &[f64]) -> f64 {
    assert_eq!(s_prev.len(), s_curr.len(), "soft_switch_count lengths");
    s_prev
        .iter()
        .zip(s_curr)
        .map(|(&sp, &sc)| {
            let (ap, ac) = (sigmoid(2.0 * sp), sigmoid(2.0 * sc));
            (ac - ap) * ac
        })
        .sum()
}

/// Gradient of [`soft_switch_count`] with respect to `(s_prev, s_curr)`.
pub fn soft_switch_count_grad(s_prev: &[f64], s_curr: &[f64]) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(s_prev.len(), s_curr.len(), "soft_switch_count lengths");
    let mut d_prev = Vec::with_capacity(s_prev.len());
    let mut d_curr = Vec::with_capacity(s_curr.len());
    for (&sp, &sc) in s_prev.iter().zip(s_curr) {
        let (ap, ac) = (sigmoid(2.0 * sp), sigmoid(2.0 * sc));
        // da/ds = 2a(1 − a)
        d_prev.push(-ac * 2.0 * ap * (1.0 - ap));
        d_curr.push((2.0 * ac - ap) * 2.0 * ac * (1.0 - ac));
    }
    (d_prev, d_curr)
}

/// The oracle's leakage for a query stream: one exact count per consecutive pair.
pub fn power_trace<Q: AsRef<[f64]>>(model: &MlpModel, queries: &[Q]) -> Result<PowerTrace> {
    if queries.len() < 2 {
        return Err(Error::Argument(format!(
            "a power trace needs at least 2 queries, got {}",
            queries.len()
        )));
    }
    let states: Vec<HiddenState> = queries
        .iter()
        .map(|q| model.forward(q.as_ref()).state())
        .collect();
    states
        .windows(2)
        .map(|w| switch_count(&w[0], &w[1]))
        .collect()
}

/// Optional measurement noise on leaked counts. Disabled by default.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LeakageNoise {
    pub std: f64,
}

impl LeakageNoise {
    pub fn is_enabled(&self) -> bool {
        self.std > 0.0
    }

    /// The observed (real-valued) power for an exact count.
    pub fn observe(&self, count: SwitchCount, rng: &mut SeededRng) -> f64 {
        let exact = f64::from(count.0);
        if self.is_enabled() {
            exact + rng.normal(0.0, self.std)
        } else {
            exact
        }
    }
}

/// One decimal count per line.
pub fn format_power_trace(trace: &[SwitchCount]) -> String {
    let mut out = String::with_capacity(trace.len() * 3);
    for c in trace {
        writeln!(out, "{}", c.0).expect("writing to a String");
    }
    out
}

pub fn write_power_trace(path: impl AsRef<Path>, trace: &[SwitchCount]) -> Result<()> {
    crate::write_atomic(path.as_ref(), format_power_trace(trace).as_bytes())
}

pub fn parse_power_trace(text: &str) -> Result<PowerTrace> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<u32>()
                .map(SwitchCount)
                .map_err(|e| Error::Argument(format!("bad power count {l:?}: {e}")))
        })
        .collect()
}
