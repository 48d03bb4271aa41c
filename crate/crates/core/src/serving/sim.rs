//! Discrete-event simulation of the serving path.
//!
//! Models the exact production-shaped topology the threaded server runs:
//! arrivals enter the batcher's bounded queue; dispatched batches flow
//! through a two-stage pipeline (stage A: preprocessing, stage B:
//! backbone) connected by bounded buffers, so stage A of batch k+1
//! overlaps stage B of batch k. Per-stage time follows the synthetic
//! cost model `fixed + per_item * n`, standing in for heterogeneous
//! hardware. Virtual time is u64 nanoseconds; runs are bit-reproducible
//! from the seed, which makes loadgen reports byte-stable.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::batcher::{Batch, Batcher, BatcherConfig, Pending, NS_PER_MS};
use super::percentile::LatencyReport;

/// Synthetic per-stage cost: `fixed_ms + per_item_ms * n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageCost {
    pub fixed_ms: f64,
    pub per_item_ms: f64,
}

impl StageCost {
    pub fn zero() -> StageCost {
        StageCost { fixed_ms: 0.0, per_item_ms: 0.0 }
    }

    pub fn ns(&self, n_items: usize) -> u64 {
        ((self.fixed_ms + self.per_item_ms * n_items as f64) * NS_PER_MS as f64).round() as u64
    }

    /// Parse the CLI form `fixed,per_item` (milliseconds).
    pub fn parse(s: &str) -> Result<StageCost> {
        let (f, p) = s
            .split_once(',')
            .ok_or_else(|| Error::config(format!("stage cost {s:?} must be fixed,per_item")))?;
        Ok(StageCost {
            fixed_ms: f.trim().parse().map_err(|_| Error::config(format!("bad fixed cost {f}")))?,
            per_item_ms: p
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("bad per-item cost {p}")))?,
        })
    }
}

/// Capacity of each inter-stage buffer (dispatch -> A, A -> B).
const STAGE_BUFFER: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Arrival,
    BatcherDeadline,
    StageADone,
    StageBDone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct EventKey {
    at_ns: u64,
    seq: u64,
    kind: EventKind,
}

/// One simulated request arrival.
#[derive(Debug, Clone)]
pub struct SimArrival {
    pub id: u64,
    pub at_ns: u64,
    pub n_items: usize,
}

/// Completion record for one request.
#[derive(Debug, Clone, PartialEq)]
pub struct SimCompletion {
    pub id: u64,
    pub arrived_ns: u64,
    pub done_ns: u64,
    pub batch_items: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub completions: Vec<SimCompletion>,
    pub rejected: Vec<u64>,
    /// Virtual time at which the last work finished.
    pub drained_at_ns: u64,
}

struct PipelineState {
    a_queue: VecDeque<Batch<()>>,
    a_busy: Option<Batch<()>>,
    a_parked: Option<Batch<()>>, // finished A but B buffer was full
    b_queue: VecDeque<Batch<()>>,
    b_busy: Option<Batch<()>>,
}

/// Run the batching pipeline over a fixed arrival schedule until every
/// request completes or is rejected.
pub fn simulate(
    arrivals: &[SimArrival],
    batcher_cfg: &BatcherConfig,
    stage_a: StageCost,
    stage_b: StageCost,
) -> Result<SimOutcome> {
    let mut batcher: Batcher<()> = Batcher::new(batcher_cfg.clone())?;
    let mut events: BinaryHeap<Reverse<EventKey>> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut push_event = |events: &mut BinaryHeap<Reverse<EventKey>>, at_ns: u64, kind: EventKind| {
        seq += 1;
        events.push(Reverse(EventKey { at_ns, seq, kind }));
    };

    let mut pending_arrivals: VecDeque<SimArrival> = arrivals.iter().cloned().collect();
    debug_assert!(arrivals.windows(2).all(|w| w[0].at_ns <= w[1].at_ns));
    if let Some(a) = pending_arrivals.front() {
        push_event(&mut events, a.at_ns, EventKind::Arrival);
    }

    let mut st = PipelineState {
        a_queue: VecDeque::new(),
        a_busy: None,
        a_parked: None,
        b_queue: VecDeque::new(),
        b_busy: None,
    };
    let mut completions = Vec::new();
    let mut rejected = Vec::new();
    let mut deadline_scheduled: Option<u64> = None;
    let mut drained_at = 0u64;

    while let Some(Reverse(ev)) = events.pop() {
        let now = ev.at_ns;
        drained_at = drained_at.max(now);
        match ev.kind {
            EventKind::Arrival => {
                let a = pending_arrivals.pop_front().expect("scheduled arrival");
                debug_assert_eq!(a.at_ns, now);
                let req = Pending { id: a.id, n_items: a.n_items, arrived_ns: now, payload: () };
                if batcher.push(req).is_err() {
                    rejected.push(a.id);
                }
                if let Some(next) = pending_arrivals.front() {
                    push_event(&mut events, next.at_ns, EventKind::Arrival);
                }
            }
            EventKind::BatcherDeadline => {
                deadline_scheduled = None;
            }
            EventKind::StageADone => {
                let batch = st.a_busy.take().expect("stage A busy");
                if st.b_queue.len() < STAGE_BUFFER {
                    st.b_queue.push_back(batch);
                } else {
                    st.a_parked = Some(batch);
                }
            }
            EventKind::StageBDone => {
                let batch = st.b_busy.take().expect("stage B busy");
                let n = batch.n_items();
                for r in batch.requests {
                    completions.push(SimCompletion {
                        id: r.id,
                        arrived_ns: r.arrived_ns,
                        done_ns: now,
                        batch_items: n,
                    });
                }
                // B freed a buffer slot; un-park stage A's handoff
                if st.a_parked.is_some() && st.b_queue.len() < STAGE_BUFFER {
                    st.b_queue.push_back(st.a_parked.take().unwrap());
                }
            }
        }

        // drain batcher into the pipeline as far as buffers allow
        while st.a_queue.len() < STAGE_BUFFER {
            match batcher.try_dispatch(now) {
                Some(batch) => st.a_queue.push_back(batch),
                None => break,
            }
        }
        // start stage A (blocked while a finished batch is parked)
        if st.a_busy.is_none() && st.a_parked.is_none() {
            if let Some(batch) = st.a_queue.pop_front() {
                let done = now + stage_a.ns(batch.n_items());
                st.a_busy = Some(batch);
                push_event(&mut events, done, EventKind::StageADone);
            }
        }
        // start stage B
        if st.b_busy.is_none() {
            if let Some(batch) = st.b_queue.pop_front() {
                let done = now + stage_b.ns(batch.n_items());
                st.b_busy = Some(batch);
                push_event(&mut events, done, EventKind::StageBDone);
            }
        }
        // keep a timeout wakeup armed for whatever is still queued; a
        // deadline already in the past needs no event — dispatch is then
        // blocked on buffer space, and the next stage-done event re-pumps
        if let Some(d) = batcher.deadline_ns() {
            if d > now && deadline_scheduled.map(|cur| d < cur).unwrap_or(true) {
                push_event(&mut events, d, EventKind::BatcherDeadline);
                deadline_scheduled = Some(d);
            }
        }
    }
    completions.sort_by_key(|c| (c.done_ns, c.id));
    Ok(SimOutcome { completions, rejected, drained_at_ns: drained_at })
}

/// Open-loop Poisson arrival schedule at `qps` for `duration_s`.
pub fn poisson_arrivals(qps: f64, duration_s: f64, items_per_request: usize, seed: u64) -> Vec<SimArrival> {
    let mut rng = Rng::stream(seed, "loadgen/arrivals");
    let mut out = Vec::new();
    let horizon = (duration_s * 1e9) as u64;
    let mut t = 0.0f64;
    let mut id = 0u64;
    loop {
        let u = loop {
            let u = rng.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        t += -u.ln() / qps * 1e9;
        let at_ns = t as u64;
        if at_ns >= horizon {
            break;
        }
        out.push(SimArrival { id, at_ns, n_items: items_per_request });
        id += 1;
    }
    out
}

/// Configuration of a simulated load run.
#[derive(Debug, Clone)]
pub struct SimLoadConfig {
    pub duration_s: f64,
    pub items_per_request: usize,
    pub stage_a: StageCost,
    pub stage_b: StageCost,
    pub max_batch_items: usize,
    pub queue_capacity: usize,
    pub seed: u64,
}

/// Run an open-loop simulated load test and report latencies.
pub fn loadgen_sim(qps: f64, batch_timeout_ms: f64, cfg: &SimLoadConfig) -> Result<LatencyReport> {
    if qps <= 0.0 {
        return Ok(LatencyReport::invalid(qps));
    }
    let arrivals = poisson_arrivals(qps, cfg.duration_s, cfg.items_per_request, cfg.seed);
    if arrivals.is_empty() {
        return Ok(LatencyReport::invalid(qps));
    }
    let batcher_cfg = BatcherConfig::from_ms(batch_timeout_ms, cfg.max_batch_items, cfg.queue_capacity);
    let outcome = simulate(&arrivals, &batcher_cfg, cfg.stage_a, cfg.stage_b)?;
    let latencies: Vec<u64> = outcome
        .completions
        .iter()
        .map(|c| c.done_ns - c.arrived_ns)
        .collect();
    Ok(LatencyReport::from_samples(
        qps,
        latencies,
        outcome.rejected.len(),
        cfg.duration_s,
    ))
}

/// One row of the timeout-sweep table.
#[derive(Debug, Clone, PartialEq)]
pub struct QpsRow {
    pub timeout_ms: f64,
    pub peak_qps: f64,
    /// Peak divided by the no-batching baseline's peak.
    pub ratio_vs_baseline: f64,
    /// False when even minimal load violates the bound.
    pub feasible: bool,
}

/// For each timeout, binary-search the highest offered QPS whose p99
/// stays within `latency_bound_ms`. The first row (timeout 0) runs with
/// `max_batch_items = 1` — strict no-batching passthrough — and is the
/// ratio baseline, mirroring the sweep-table layout.
pub fn peak_qps_search(
    latency_bound_ms: f64,
    timeouts_ms: &[f64],
    cfg: &SimLoadConfig,
) -> Result<Vec<QpsRow>> {
    if timeouts_ms.is_empty() {
        return Err(Error::contract("timeout sweep needs at least one value"));
    }
    if latency_bound_ms <= 0.0 {
        return Err(Error::contract("latency bound must be positive"));
    }
    let bound_ns = (latency_bound_ms * NS_PER_MS as f64) as u64;
    let mut rows: Vec<QpsRow> = Vec::new();
    let mut baseline: Option<f64> = None;
    for (i, &timeout) in timeouts_ms.iter().enumerate() {
        let no_batching = i == 0;
        let mut run_cfg = cfg.clone();
        if no_batching {
            run_cfg.max_batch_items = 1;
        }
        let timeout = if no_batching { 0.0 } else { timeout };
        let p99_ok = |qps: f64| -> Result<bool> {
            let r = loadgen_sim(qps, timeout, &run_cfg)?;
            Ok(r.valid && r.rejected == 0 && r.p99_ns <= bound_ns)
        };

        // minimal-load feasibility probe
        let minimal = 1.0;
        if !p99_ok(minimal)? {
            rows.push(QpsRow {
                timeout_ms: timeout,
                peak_qps: 0.0,
                ratio_vs_baseline: 0.0,
                feasible: false,
            });
            if no_batching {
                baseline = Some(0.0);
            }
            continue;
        }
        // geometric growth to bracket the peak
        let mut lo = minimal;
        let mut hi = minimal;
        for _ in 0..30 {
            hi *= 2.0;
            if !p99_ok(hi)? {
                break;
            }
            lo = hi;
        }
        // bisect to 2% relative resolution
        while hi - lo > 0.02 * hi {
            let mid = 0.5 * (lo + hi);
            if p99_ok(mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let peak = lo;
        if no_batching {
            baseline = Some(peak);
        }
        let base = baseline.expect("first row sets the baseline");
        rows.push(QpsRow {
            timeout_ms: timeout,
            peak_qps: peak,
            ratio_vs_baseline: if base > 0.0 { peak / base } else { f64::INFINITY },
            feasible: true,
        });
    }
    Ok(rows)
}

pub fn qps_table_csv(rows: &[QpsRow]) -> String {
    let mut out = String::from("timeout_ms,peak_qps,ratio_vs_baseline,feasible\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.1},{:.3},{}\n",
            r.timeout_ms, r.peak_qps, r.ratio_vs_baseline, r.feasible
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ms(x: u64) -> u64 {
        x * NS_PER_MS
    }

    // Two batches, stage delays A=B=5ms: second completes ~15ms, not 20ms.
    #[test]
    fn pipeline_overlaps_stages() {
        let arrivals = vec![
            SimArrival { id: 1, at_ns: 0, n_items: 1 },
            SimArrival { id: 2, at_ns: 0, n_items: 1 },
        ];
        let cfg = BatcherConfig::from_ms(0.0, 1, 64);
        let out = simulate(
            &arrivals,
            &cfg,
            StageCost { fixed_ms: 5.0, per_item_ms: 0.0 },
            StageCost { fixed_ms: 5.0, per_item_ms: 0.0 },
        )
        .unwrap();
        assert_eq!(out.completions.len(), 2);
        assert_eq!(out.completions[0].done_ns, ms(10));
        assert_eq!(out.completions[1].done_ns, ms(15));
    }

    // k back-to-back batches finish at (k+1) * 5ms, vs 2k * 5ms serial.
    #[test]
    fn pipeline_k_batches_completion_time() {
        for k in [3usize, 8, 16] {
            let arrivals: Vec<SimArrival> = (0..k)
                .map(|i| SimArrival { id: i as u64, at_ns: 0, n_items: 1 })
                .collect();
            let cfg = BatcherConfig::from_ms(0.0, 1, 1024);
            let out = simulate(
                &arrivals,
                &cfg,
                StageCost { fixed_ms: 5.0, per_item_ms: 0.0 },
                StageCost { fixed_ms: 5.0, per_item_ms: 0.0 },
            )
            .unwrap();
            let last = out.completions.iter().map(|c| c.done_ns).max().unwrap();
            assert_eq!(last, ms(5 * (k as u64 + 1)), "k={k}");
        }
    }

    // Simulated-clock trace: 3 requests inside the window then silence
    // form a single batch at t0 + timeout.
    #[test]
    fn batch_forms_at_timeout_in_sim() {
        let arrivals = vec![
            SimArrival { id: 1, at_ns: ms(1), n_items: 1 },
            SimArrival { id: 2, at_ns: ms(3), n_items: 1 },
            SimArrival { id: 3, at_ns: ms(5), n_items: 1 },
        ];
        let cfg = BatcherConfig::from_ms(10.0, 8, 64);
        let out = simulate(&arrivals, &cfg, StageCost::zero(), StageCost::zero()).unwrap();
        // all three complete at t = 1ms + 10ms (zero stage cost)
        assert!(out.completions.iter().all(|c| c.done_ns == ms(11)));
        assert_eq!(out.completions[0].batch_items, 3);
    }

    #[test]
    fn sim_rejects_past_capacity() {
        let arrivals: Vec<SimArrival> = (0..10)
            .map(|i| SimArrival { id: i, at_ns: 0, n_items: 1 })
            .collect();
        // tiny queue, huge timeout: nothing drains before overflow
        let cfg = BatcherConfig::from_ms(1000.0, 1000, 4);
        let out = simulate(&arrivals, &cfg, StageCost::zero(), StageCost::zero()).unwrap();
        assert_eq!(out.rejected.len(), 6);
        assert_eq!(out.completions.len(), 4);
    }

    #[test]
    fn poisson_rate_roughly_matches() {
        let arr = poisson_arrivals(1000.0, 5.0, 1, 42);
        let rate = arr.len() as f64 / 5.0;
        assert!((rate - 1000.0).abs() < 60.0, "rate {rate}");
        assert!(arr.windows(2).all(|w| w[0].at_ns <= w[1].at_ns));
    }

    #[test]
    fn loadgen_sim_deterministic_and_byte_stable() {
        let cfg = SimLoadConfig {
            duration_s: 2.0,
            items_per_request: 1,
            stage_a: StageCost { fixed_ms: 1.0, per_item_ms: 0.05 },
            stage_b: StageCost { fixed_ms: 1.0, per_item_ms: 0.05 },
            max_batch_items: 64,
            queue_capacity: 256,
            seed: 11,
        };
        let a = loadgen_sim(200.0, 5.0, &cfg).unwrap();
        let b = loadgen_sim(200.0, 5.0, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.csv_row(), b.csv_row());
        assert!(a.valid);
    }

    #[test]
    fn zero_traffic_flagged() {
        let cfg = SimLoadConfig {
            duration_s: 1.0,
            items_per_request: 1,
            stage_a: StageCost::zero(),
            stage_b: StageCost::zero(),
            max_batch_items: 8,
            queue_capacity: 64,
            seed: 1,
        };
        assert!(!loadgen_sim(0.0, 5.0, &cfg).unwrap().valid);
    }

    // With no fixed cost there is nothing to amortize: batching gains ~1x.
    #[test]
    fn no_fixed_cost_no_batching_benefit() {
        let cfg = SimLoadConfig {
            duration_s: 3.0,
            items_per_request: 1,
            stage_a: StageCost { fixed_ms: 0.0, per_item_ms: 0.2 },
            stage_b: StageCost { fixed_ms: 0.0, per_item_ms: 0.2 },
            max_batch_items: 256,
            queue_capacity: 4096,
            seed: 5,
        };
        let rows = peak_qps_search(50.0, &[0.0, 5.0], &cfg).unwrap();
        assert!(rows[1].ratio_vs_baseline < 1.3, "{:?}", rows);
    }

    // Throughput n / (F + c n) rises with batch size when F dominates:
    // batching must beat the passthrough baseline clearly.
    #[test]
    fn fixed_cost_amortization_boosts_peak() {
        let cfg = SimLoadConfig {
            duration_s: 3.0,
            items_per_request: 1,
            stage_a: StageCost { fixed_ms: 5.0, per_item_ms: 0.1 },
            stage_b: StageCost { fixed_ms: 5.0, per_item_ms: 0.1 },
            max_batch_items: 256,
            queue_capacity: 4096,
            seed: 5,
        };
        let rows = peak_qps_search(50.0, &[0.0, 10.0], &cfg).unwrap();
        assert!(rows[0].feasible && rows[1].feasible);
        assert!(
            rows[1].ratio_vs_baseline >= 2.0,
            "batching ratio {:.2}",
            rows[1].ratio_vs_baseline
        );
    }

    #[test]
    fn infeasible_bound_reports_zero_peak() {
        let cfg = SimLoadConfig {
            duration_s: 1.0,
            items_per_request: 1,
            stage_a: StageCost { fixed_ms: 60.0, per_item_ms: 0.0 },
            stage_b: StageCost { fixed_ms: 60.0, per_item_ms: 0.0 },
            max_batch_items: 8,
            queue_capacity: 64,
            seed: 2,
        };
        let rows = peak_qps_search(50.0, &[0.0], &cfg).unwrap();
        assert!(!rows[0].feasible);
        assert_eq!(rows[0].peak_qps, 0.0);
    }
}
