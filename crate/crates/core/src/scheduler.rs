//! Sequence-length-aware batch scheduler.
//!
//! Pending requests are sorted by length and partitioned into contiguous
//! batches; each batch is padded to its longest member and costs one latency
//! lookup at `(padded length, batch size)`. The dynamic program finds the
//! partition minimizing total execution time in O(n^2); `naive` (everything
//! in one batch) and `nobatch` (every request alone) are the baselines.

use thiserror::Error;

use crate::cost::{CostError, CostProvider, Latency};

pub type RequestId = u64;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("cannot schedule an empty request list")]
    Empty,
    #[error("request {request_id} has seq_len 0")]
    ZeroLength { request_id: RequestId },
    #[error(transparent)]
    Cost(#[from] CostError),
}

/// One inference request.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub request_id: RequestId,
    pub seq_len: usize,
    pub arrival_time: f64,
}

impl Request {
    pub fn new(request_id: RequestId, seq_len: usize, arrival_time: f64) -> Self {
        Self { request_id, seq_len, arrival_time }
    }
}

/// A scheduled batch: member request ids and the length everything is padded to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub request_ids: Vec<RequestId>,
    pub padded_len: usize,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.request_ids.len()
    }
}

/// An ordered partition of the requests into batches, shortest padded length
/// first, with the predicted total execution time.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub batches: Vec<Batch>,
    pub predicted_cost: Latency,
}

/// Sorts ascending by seq_len; ties fall back to arrival time then id, so
/// equal-length requests keep FIFO order.
fn sorted_requests(requests: &[Request]) -> Result<Vec<&Request>, ScheduleError> {
    if requests.is_empty() {
        return Err(ScheduleError::Empty);
    }
    for r in requests {
        if r.seq_len == 0 {
            return Err(ScheduleError::ZeroLength { request_id: r.request_id });
        }
    }
    let mut sorted: Vec<&Request> = requests.iter().collect();
    sorted.sort_by(|a, b| {
        a.seq_len
            .cmp(&b.seq_len)
            .then_with(|| a.arrival_time.total_cmp(&b.arrival_time))
            .then_with(|| a.request_id.cmp(&b.request_id))
    });
    Ok(sorted)
}

/// Batch execution time under the cost oracle: one inference at the padded
/// length and batch size.
fn batch_cost(costs: &CostProvider, padded_len: usize, size: usize) -> Result<Latency, ScheduleError> {
    Ok(costs.lookup(padded_len, size)?)
}

/// Optimal contiguous partition of the length-sorted requests by dynamic
/// programming over batch start positions.
///
/// `states[i]` is the cheapest way to execute the first `i` sorted requests;
/// a batch ending at position `i` is padded to `sorted[i-1].seq_len`, the
/// longest member. O(n^2) time and at most n^2 cost lookups.
pub fn dp_schedule(requests: &[Request], costs: &CostProvider) -> Result<BatchPlan, ScheduleError> {
    let sorted = sorted_requests(requests)?;
    let n = sorted.len();
    let mut states = vec![0.0f64; n + 1];
    let mut start_idx = vec![0usize; n + 1];

    for i in 1..=n {
        let len_i = sorted[i - 1].seq_len;
        // Batch of just request i.
        let mut best = states[i - 1] + batch_cost(costs, len_i, 1)?;
        let mut best_start = i - 1;
        // Grow the batch backwards over shorter requests.
        for j in (1..i).rev() {
            let size = i - j + 1;
            let tmp = states[j - 1] + batch_cost(costs, len_i, size)?;
            if tmp < best {
                best = tmp;
                best_start = j - 1;
            }
        }
        states[i] = best;
        start_idx[i] = best_start;
    }

    let mut batches = Vec::new();
    let mut i = n;
    while i > 0 {
        let start = start_idx[i];
        let members = &sorted[start..i];
        batches.push(Batch {
            request_ids: members.iter().map(|r| r.request_id).collect(),
            padded_len: members.last().expect("batch is non-empty").seq_len,
        });
        i = start;
    }
    batches.reverse();
    Ok(BatchPlan { batches, predicted_cost: states[n] })
}

/// Baseline: everything currently pending goes into a single batch padded to
/// the global maximum length.
pub fn naive_schedule(requests: &[Request], costs: &CostProvider) -> Result<BatchPlan, ScheduleError> {
    let sorted = sorted_requests(requests)?;
    let padded_len = sorted.last().expect("non-empty").seq_len;
    let cost = batch_cost(costs, padded_len, sorted.len())?;
    Ok(BatchPlan {
        batches: vec![Batch {
            request_ids: sorted.iter().map(|r| r.request_id).collect(),
            padded_len,
        }],
        predicted_cost: cost,
    })
}

/// Baseline: no batching; every request executes alone, shortest first.
pub fn nobatch_schedule(requests: &[Request], costs: &CostProvider) -> Result<BatchPlan, ScheduleError> {
    let sorted = sorted_requests(requests)?;
    let mut batches = Vec::with_capacity(sorted.len());
    let mut total = 0.0;
    for r in &sorted {
        total += batch_cost(costs, r.seq_len, 1)?;
        batches.push(Batch { request_ids: vec![r.request_id], padded_len: r.seq_len });
    }
    Ok(BatchPlan { batches, predicted_cost: total })
}

/// When to invoke the scheduler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TriggerKind {
    /// Run whenever the runtime is idle and anything is pending.
    Hungry,
    /// Wait for a full batch or a timeout.
    Lazy { timeout: f64, max_batch: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriggerPolicy {
    pub kind: TriggerKind,
    /// Service latency objective; the scheduler force-triggers once the
    /// queue head's elapsed wait plus the pending execution estimate exceeds
    /// half of it.
    pub latency_constraint: f64,
}

impl TriggerPolicy {
    pub fn hungry(latency_constraint: f64) -> Self {
        Self { kind: TriggerKind::Hungry, latency_constraint }
    }

    pub fn lazy(timeout: f64, max_batch: usize, latency_constraint: f64) -> Self {
        Self { kind: TriggerKind::Lazy { timeout, max_batch }, latency_constraint }
    }
}

/// Parses request CSV rows `id,seq_len,arrival`. A header row, blank lines,
/// and `#` comments are skipped.
pub fn requests_from_csv_str(text: &str) -> Result<Vec<Request>, String> {
    let mut requests = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty()
            || trimmed.starts_with('#')
            || trimmed.starts_with("id,")
            || trimmed.starts_with("request_id,")
        {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 3 {
            return Err(format!("line {line}: expected 3 fields, got {}", fields.len()));
        }
        let request_id = fields[0]
            .trim()
            .parse::<RequestId>()
            .map_err(|_| format!("line {line}: bad request id {:?}", fields[0]))?;
        let seq_len = fields[1]
            .trim()
            .parse::<usize>()
            .map_err(|_| format!("line {line}: bad seq_len {:?}", fields[1]))?;
        let arrival_time = fields[2]
            .trim()
            .parse::<f64>()
            .map_err(|_| format!("line {line}: bad arrival time {:?}", fields[2]))?;
        requests.push(Request { request_id, seq_len, arrival_time });
    }
    Ok(requests)
}

/// Emits a plan as `batch_idx,request_id,padded_len` CSV rows with a header.
pub fn plan_to_csv(plan: &BatchPlan) -> String {
    let mut out = String::from("batch_idx,request_id,padded_len\n");
    for (idx, batch) in plan.batches.iter().enumerate() {
        for &id in &batch.request_ids {
            out.push_str(&format!("{idx},{id},{}\n", batch.padded_len));
        }
    }
    out
}

/// Decides whether to start the batch scheduler now.
pub fn should_trigger(
    policy: &TriggerPolicy,
    queue_head_arrival: f64,
    now: f64,
    pending_estimated_exec: f64,
    queue_len: usize,
    runtime_idle: bool,
) -> bool {
    if queue_len == 0 {
        return false;
    }
    let elapsed = now - queue_head_arrival;
    // Early trigger guarding the latency objective, regardless of policy.
    if elapsed + pending_estimated_exec > policy.latency_constraint / 2.0 {
        return true;
    }
    match policy.kind {
        TriggerKind::Hungry => runtime_idle,
        TriggerKind::Lazy { timeout, max_batch } => queue_len >= max_batch || elapsed >= timeout,
    }
}
