//! Latency reports with nearest-rank percentiles.

use crate::error::{Error, Result};

/// Nearest-rank percentile: the value at 1-based index `ceil(q * N)` of
/// the sorted samples.
pub fn nearest_rank(sorted: &[u64], q: f64) -> Result<u64> {
    if sorted.is_empty() {
        return Err(Error::UndefinedMetric("percentile of empty sample".into()));
    }
    debug_assert!(sorted.windows(2).all(|w| w[0] <= w[1]));
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(sorted.len()) - 1])
}

/// Measured latency distribution for one load run.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub offered_qps: f64,
    pub achieved_qps: f64,
    pub completed: usize,
    pub rejected: usize,
    pub p50_ns: u64,
    pub p90_ns: u64,
    pub p99_ns: u64,
    /// False when the run could not produce a usable measurement
    /// (no traffic, connection failure, ...).
    pub valid: bool,
}

impl LatencyReport {
    pub fn invalid(offered_qps: f64) -> LatencyReport {
        LatencyReport {
            offered_qps,
            achieved_qps: 0.0,
            completed: 0,
            rejected: 0,
            p50_ns: 0,
            p90_ns: 0,
            p99_ns: 0,
            valid: false,
        }
    }

    /// Build from raw per-request latencies (ns) over `duration_s`.
    pub fn from_samples(
        offered_qps: f64,
        mut latencies_ns: Vec<u64>,
        rejected: usize,
        duration_s: f64,
    ) -> LatencyReport {
        if latencies_ns.is_empty() {
            let mut r = LatencyReport::invalid(offered_qps);
            r.rejected = rejected;
            return r;
        }
        latencies_ns.sort_unstable();
        let completed = latencies_ns.len();
        LatencyReport {
            offered_qps,
            achieved_qps: completed as f64 / duration_s,
            completed,
            rejected,
            p50_ns: nearest_rank(&latencies_ns, 0.50).unwrap(),
            p90_ns: nearest_rank(&latencies_ns, 0.90).unwrap(),
            p99_ns: nearest_rank(&latencies_ns, 0.99).unwrap(),
            valid: true,
        }
    }

    pub fn p99_ms(&self) -> f64 {
        self.p99_ns as f64 / 1e6
    }

    /// CSV row used by the loadgen report (`ns` values printed as
    /// integers, so reports are byte-stable under a simulated clock).
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.offered_qps,
            self.achieved_qps,
            self.completed,
            self.rejected,
            self.p50_ns,
            self.p90_ns,
            self.p99_ns,
            self.valid
        )
    }

    pub fn csv_header() -> &'static str {
        "offered_qps,achieved_qps,completed,rejected,p50_ns,p90_ns,p99_ns,valid"
    }
}
