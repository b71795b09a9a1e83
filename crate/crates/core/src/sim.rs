//! Discrete-event serving simulator.
//!
//! Poisson arrivals feed a message queue; a trigger policy decides when the
//! batch scheduler runs over the queue snapshot, and the resulting batches
//! execute back-to-back on a single simulated runtime, each taking one cost
//! lookup at its padded length and size. Runs are deterministic under a
//! fixed seed: arrival times and request lengths draw from two separate
//! streams of one seeded generator.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

use crate::cost::CostProvider;
use crate::scheduler::{
    dp_schedule, naive_schedule, nobatch_schedule, should_trigger, BatchPlan, Request, RequestId,
    ScheduleError, TriggerPolicy,
};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("workload rate must be positive")]
    NonPositiveRate,
    #[error("length range is empty: lo {lo} > hi {hi}")]
    EmptyLengthRange { lo: usize, hi: usize },
    #[error("length range must start at 1 or above")]
    ZeroLength,
    #[error("duration must be positive")]
    NonPositiveDuration,
    #[error("max_batch must be at least 1")]
    ZeroMaxBatch,
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("no stable rate found at or above the search floor")]
    NoStableRate,
}

/// Arrival process description: Poisson arrivals at `rate`, lengths uniform
/// in `[len_lo, len_hi]`, over `duration` simulated seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub rate: f64,
    pub len_lo: usize,
    pub len_hi: usize,
    pub duration: f64,
    pub seed: u64,
}

impl Workload {
    fn validate(&self) -> Result<(), SimError> {
        if !(self.rate > 0.0) {
            return Err(SimError::NonPositiveRate);
        }
        if self.len_lo > self.len_hi {
            return Err(SimError::EmptyLengthRange { lo: self.len_lo, hi: self.len_hi });
        }
        if self.len_lo == 0 {
            return Err(SimError::ZeroLength);
        }
        if !(self.duration > 0.0) {
            return Err(SimError::NonPositiveDuration);
        }
        Ok(())
    }

    /// Generates the arrival trace. Stream 0 of the seeded generator drives
    /// inter-arrival times, stream 1 drives lengths, so the same seed yields
    /// the same trace regardless of how the simulation consumes it.
    pub fn generate(&self) -> Result<Vec<Request>, SimError> {
        self.validate()?;
        let mut arrivals_rng = ChaCha8Rng::seed_from_u64(self.seed);
        arrivals_rng.set_stream(0);
        let mut lengths_rng = ChaCha8Rng::seed_from_u64(self.seed);
        lengths_rng.set_stream(1);
        let exp = Exp::new(self.rate).expect("positive rate");
        let mut requests = Vec::new();
        let mut t = 0.0f64;
        let mut id: RequestId = 0;
        loop {
            t += exp.sample(&mut arrivals_rng);
            if t > self.duration {
                break;
            }
            let seq_len = lengths_rng.random_range(self.len_lo..=self.len_hi);
            requests.push(Request::new(id, seq_len, t));
            id += 1;
        }
        Ok(requests)
    }
}

/// Which scheduler plans each trigger's snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulerAlgo {
    Dp,
    Naive,
    NoBatch,
}

impl SchedulerAlgo {
    fn plan(&self, requests: &[Request], costs: &CostProvider) -> Result<BatchPlan, ScheduleError> {
        match self {
            SchedulerAlgo::Dp => dp_schedule(requests, costs),
            SchedulerAlgo::Naive => naive_schedule(requests, costs),
            SchedulerAlgo::NoBatch => nobatch_schedule(requests, costs),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub policy: TriggerPolicy,
    pub algo: SchedulerAlgo,
    /// Cap on how many queued requests one trigger may take. Keeps every
    /// cost lookup within the provider's covered batch sizes.
    pub max_batch: usize,
}

/// One timestamped event of a serving run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent {
    pub time: f64,
    pub kind: SimEventKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimEventKind {
    Arrival { request_id: RequestId, seq_len: usize },
    BatchStart { size: usize, padded_len: usize },
    BatchEnd { size: usize, padded_len: usize },
}

/// Per-request service record.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestTrace {
    pub request_id: RequestId,
    pub seq_len: usize,
    pub arrival: f64,
    pub start: f64,
    pub end: f64,
}

/// Timestamped log of a run; all reported metrics derive from it.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub events: Vec<SimEvent>,
    pub completed: Vec<RequestTrace>,
    pub arrivals: u64,
    pub duration: f64,
    /// Queue length after each event, as (time, length) steps.
    pub queue_series: Vec<(f64, usize)>,
}

/// Throughput and latency summary of a run. Only responses completed inside
/// the measurement window count.
#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub arrivals: u64,
    pub responses: u64,
    pub dropped: u64,
    pub request_throughput: f64,
    pub serving_throughput: f64,
    pub latency_avg: f64,
    pub latency_min: f64,
    pub latency_max: f64,
    pub final_queue_len: usize,
}

impl SimTrace {
    pub fn report(&self) -> SimReport {
        let in_window: Vec<&RequestTrace> =
            self.completed.iter().filter(|r| r.end <= self.duration).collect();
        let responses = in_window.len() as u64;
        let latencies: Vec<f64> = in_window.iter().map(|r| r.end - r.arrival).collect();
        let (avg, min, max) = if latencies.is_empty() {
            (0.0, 0.0, 0.0)
        } else {
            let sum: f64 = latencies.iter().sum();
            (
                sum / latencies.len() as f64,
                latencies.iter().cloned().fold(f64::INFINITY, f64::min),
                latencies.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            )
        };
        SimReport {
            arrivals: self.arrivals,
            responses,
            dropped: 0,
            request_throughput: self.arrivals as f64 / self.duration,
            serving_throughput: responses as f64 / self.duration,
            latency_avg: avg,
            latency_min: min,
            latency_max: max,
            final_queue_len: self.queue_series.last().map_or(0, |&(_, l)| l),
        }
    }

    /// Mean queue length over `[from, to)`, integrating the step series.
    pub fn mean_queue_len(&self, from: f64, to: f64) -> f64 {
        if to <= from {
            return 0.0;
        }
        let mut area = 0.0f64;
        let mut level = 0usize;
        let mut t = from;
        for &(time, len) in &self.queue_series {
            if time <= from {
                level = len;
                continue;
            }
            if time >= to {
                break;
            }
            area += level as f64 * (time - t);
            t = time;
            level = len;
        }
        area += level as f64 * (to - t);
        area / (to - from)
    }

    /// Queue-growth divergence: the mean queue length over the last quarter
    /// of the window substantially exceeds the quarter before it.
    pub fn queue_diverged(&self) -> bool {
        let d = self.duration;
        let mid = self.mean_queue_len(0.5 * d, 0.75 * d);
        let tail = self.mean_queue_len(0.75 * d, d);
        tail > 1.5 * mid + 10.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Pending {
    Arrival(usize),
    RuntimeFree,
    Check,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapEntry {
    time: f64,
    seq: u64,
    what: Pending,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on (time, insertion order): FIFO among simultaneous events.
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Runs the event loop and returns the full trace.
pub fn simulate(
    workload: &Workload,
    cfg: &SimConfig,
    costs: &CostProvider,
) -> Result<SimTrace, SimError> {
    if cfg.max_batch == 0 {
        return Err(SimError::ZeroMaxBatch);
    }
    let requests = workload.generate()?;
    let arrivals = requests.len() as u64;

    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    for (i, r) in requests.iter().enumerate() {
        push(&mut heap, &mut seq, r.arrival_time, Pending::Arrival(i));
    }

    let mut queue: VecDeque<Request> = VecDeque::new();
    let mut runtime_idle = true;
    let mut completed: Vec<RequestTrace> = Vec::new();
    let mut in_flight = 0u64;
    let mut arrived = 0u64;
    let mut events = Vec::new();
    let mut queue_series = Vec::new();

    while let Some(entry) = heap.pop() {
        if entry.time > workload.duration {
            break;
        }
        let now = entry.time;
        match entry.what {
            Pending::Arrival(i) => {
                let r = requests[i].clone();
                events.push(SimEvent {
                    time: now,
                    kind: SimEventKind::Arrival { request_id: r.request_id, seq_len: r.seq_len },
                });
                queue.push_back(r);
                arrived += 1;
            }
            Pending::RuntimeFree => runtime_idle = true,
            Pending::Check => {}
        }

        // Conservation: every arrival so far is answered, running, or queued.
        debug_assert_eq!(completed.len() as u64 + in_flight + queue.len() as u64, arrived);

        if runtime_idle && !queue.is_empty() {
            let head_arrival = queue.front().expect("non-empty").arrival_time;
            let estimate = pending_estimate(&queue, cfg.max_batch, costs)?;
            if should_trigger(&cfg.policy, head_arrival, now, estimate, queue.len(), true) {
                let take = queue.len().min(cfg.max_batch);
                let snapshot: Vec<Request> = queue.drain(..take).collect();
                in_flight += snapshot.len() as u64;
                let plan = cfg.algo.plan(&snapshot, costs)?;
                let by_id = |id: RequestId| {
                    snapshot.iter().find(|r| r.request_id == id).expect("planned id in snapshot")
                };
                let mut t = now;
                for batch in &plan.batches {
                    let exec = costs.lookup(batch.padded_len, batch.size()).map_err(ScheduleError::Cost)?;
                    events.push(SimEvent {
                        time: t,
                        kind: SimEventKind::BatchStart { size: batch.size(), padded_len: batch.padded_len },
                    });
                    let end = t + exec;
                    for &id in &batch.request_ids {
                        let r = by_id(id);
                        completed.push(RequestTrace {
                            request_id: id,
                            seq_len: r.seq_len,
                            arrival: r.arrival_time,
                            start: t,
                            end,
                        });
                    }
                    in_flight -= batch.size() as u64;
                    events.push(SimEvent {
                        time: end,
                        kind: SimEventKind::BatchEnd { size: batch.size(), padded_len: batch.padded_len },
                    });
                    t = end;
                }
                runtime_idle = false;
                push(&mut heap, &mut seq, t, Pending::RuntimeFree);
            } else {
                // Lazy policy is waiting; wake up when its timeout or the
                // half-constraint rule will fire.
                let elapsed = now - head_arrival;
                let mut wake = f64::INFINITY;
                if let crate::scheduler::TriggerKind::Lazy { timeout, .. } = cfg.policy.kind {
                    wake = wake.min(head_arrival + timeout);
                }
                let slack = cfg.policy.latency_constraint / 2.0 - elapsed - estimate;
                if slack.is_finite() {
                    wake = wake.min(now + slack.max(0.0));
                }
                if wake.is_finite() {
                    let wake = if wake > now { wake } else { now + 1e-9 };
                    if wake <= workload.duration {
                        push(&mut heap, &mut seq, wake, Pending::Check);
                    }
                }
            }
        }

        queue_series.push((now, queue.len()));
    }

    completed.sort_by(|a, b| {
        a.end.total_cmp(&b.end).then_with(|| a.request_id.cmp(&b.request_id))
    });
    // Batch events are logged when planned, ahead of arrivals popped later;
    // restore time order (stable, so simultaneous events keep log order).
    events.sort_by(|a, b| a.time.total_cmp(&b.time));
    Ok(SimTrace { events, completed, arrivals, duration: workload.duration, queue_series })
}

fn push(heap: &mut BinaryHeap<HeapEntry>, seq: &mut u64, time: f64, what: Pending) {
    heap.push(HeapEntry { time, seq: *seq, what });
    *seq += 1;
}

/// Estimated time to execute the current queue contents as one batch, used
/// by the half-constraint early trigger.
fn pending_estimate(
    queue: &VecDeque<Request>,
    max_batch: usize,
    costs: &CostProvider,
) -> Result<f64, SimError> {
    let count = queue.len().min(max_batch);
    let max_len = queue.iter().take(count).map(|r| r.seq_len).max().unwrap_or(1);
    Ok(costs
        .lookup(max_len, count)
        .map_err(ScheduleError::Cost)?)
}

/// Convenience wrapper returning just the summary report.
pub fn run_sim(
    workload: &Workload,
    cfg: &SimConfig,
    costs: &CostProvider,
) -> Result<SimReport, SimError> {
    Ok(simulate(workload, cfg, costs)?.report())
}

/// Whether a run kept up with its arrival rate: the serving throughput
/// tracked the request throughput and the queue did not diverge.
pub fn is_stable(trace: &SimTrace) -> bool {
    let report = trace.report();
    report.serving_throughput >= 0.98 * report.request_throughput && !trace.queue_diverged()
}

/// Largest arrival rate (requests/second) the configuration sustains,
/// found by doubling until unstable and then bisecting. The workload's
/// `rate` field seeds the search floor; seed and length range are reused
/// for every probe, so the search is deterministic.
pub fn find_critical_point(
    workload: &Workload,
    cfg: &SimConfig,
    costs: &CostProvider,
) -> Result<f64, SimError> {
    let probe = |rate: f64| -> Result<bool, SimError> {
        let w = Workload { rate, ..workload.clone() };
        Ok(is_stable(&simulate(&w, cfg, costs)?))
    };
    let mut lo = workload.rate.max(1e-6);
    if !probe(lo)? {
        return Err(SimError::NoStableRate);
    }
    let mut hi = lo * 2.0;
    let mut doublings = 0;
    while probe(hi)? {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > 30 {
            return Ok(lo);
        }
    }
    while hi / lo > 1.01 {
        let mid = (lo + hi) / 2.0;
        if probe(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// `request_id,seq_len,arrival,start,end` CSV rows for every completed
/// request.
pub fn trace_to_csv(trace: &SimTrace) -> String {
    let mut out = String::from("request_id,seq_len,arrival,start,end\n");
    for r in &trace.completed {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.request_id, r.seq_len, r.arrival, r.start, r.end
        ));
    }
    out
}

impl SimReport {
    pub fn to_key_value(&self) -> String {
        format!(
            "arrivals={}\nresponses={}\ndropped={}\nrequest_throughput_rps={}\nserving_throughput_rps={}\nlatency_avg_s={}\nlatency_min_s={}\nlatency_max_s={}\nfinal_queue_len={}\n",
            self.arrivals,
            self.responses,
            self.dropped,
            self.request_throughput,
            self.serving_throughput,
            self.latency_avg,
            self.latency_min,
            self.latency_max,
            self.final_queue_len
        )
    }
}
