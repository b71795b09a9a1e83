//! Sequence-length-aware chunked memory planner and its baselines.
//!
//! The main planner packs variable-dimension intermediate tensors into a
//! reusable pool of fixed chunks, using the computation graph's tensor
//! lifetimes to overlap tensors that never coexist. Two baselines are
//! provided for comparison: a single-arena greedy-by-size offset planner
//! (GSOC) and a simulated caching device allocator that trades footprint
//! for allocation speed.

use std::collections::{BTreeMap, HashSet};

use thiserror::Error;

use crate::graph::{TensorId, TensorUsageRecord};

pub type ChunkId = usize;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("duplicate tensor_id {0}")]
    DuplicateTensor(TensorId),
    #[error("invalid record {tensor_id}: {reason}")]
    InvalidRecord { tensor_id: TensorId, reason: String },
    #[error("invalid planner config: {0}")]
    InvalidConfig(String),
    #[error("malformed trace at event {index}: {reason}")]
    MalformedTrace { index: usize, reason: String },
}

/// A violation found by [`verify_plan`].
#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlanViolation {
    #[error("tensor {0} has no assignment")]
    Unassigned(TensorId),
    #[error("tensor {tensor_id} assigned to unknown chunk {chunk_id}")]
    UnknownChunk { tensor_id: TensorId, chunk_id: ChunkId },
    #[error("tensor {tensor_id} exceeds chunk {chunk_id}: offset {offset} + size {size} > {chunk_size}")]
    OutOfBounds { tensor_id: TensorId, chunk_id: ChunkId, offset: u64, size: u64, chunk_size: u64 },
    #[error("live tensors {a} and {b} overlap in chunk {chunk_id}")]
    ByteOverlap { a: TensorId, b: TensorId, chunk_id: ChunkId },
}

/// A tensor resident in a chunk. Gap search needs the live interval and the
/// size alongside the `(tensor_id, offset)` assignment pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkResident {
    pub tensor_id: TensorId,
    pub offset: u64,
    pub size: u64,
    pub first_op: usize,
    pub last_op: usize,
}

/// A fixed block of device memory holding tensor assignments at byte offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub chunk_id: ChunkId,
    pub size: u64,
    residents: Vec<ChunkResident>, // sorted by offset
}

impl Chunk {
    pub fn new(chunk_id: ChunkId, size: u64) -> Self {
        Self { chunk_id, size, residents: Vec::new() }
    }

    pub fn residents(&self) -> &[ChunkResident] {
        &self.residents
    }

    /// `(tensor_id, offset)` pairs in offset order.
    pub fn assignments(&self) -> impl Iterator<Item = (&str, u64)> {
        self.residents.iter().map(|r| (r.tensor_id.as_str(), r.offset))
    }

    /// Highest used byte: max over residents of offset + size.
    pub fn high_water(&self) -> u64 {
        self.residents.iter().map(|r| r.offset + r.size).max().unwrap_or(0)
    }

    fn insert(&mut self, record: &TensorUsageRecord, offset: u64) {
        let resident = ChunkResident {
            tensor_id: record.tensor_id.clone(),
            offset,
            size: record.size,
            first_op: record.first_op,
            last_op: record.last_op,
        };
        let pos = self.residents.partition_point(|r| r.offset <= offset);
        self.residents.insert(pos, resident);
    }
}

/// Chunk list plus per-tensor chunk/offset assignments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryPlan {
    pub chunks: Vec<Chunk>,
    pub assigned_chunk: BTreeMap<TensorId, ChunkId>,
    pub assigned_offset: BTreeMap<TensorId, u64>,
}

impl MemoryPlan {
    /// Device bytes held by the plan's chunks.
    pub fn device_footprint(&self) -> u64 {
        self.chunks.iter().map(|c| c.size).sum()
    }

    /// Sum over chunks of the highest used byte; for a single-arena plan this
    /// is the packing height.
    pub fn packed_high_water(&self) -> u64 {
        self.chunks.iter().map(Chunk::high_water).sum()
    }

    fn chunk(&self, id: ChunkId) -> Option<&Chunk> {
        self.chunks.iter().find(|c| c.chunk_id == id)
    }
}

/// When a chunk goes unused by the current plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReleasePolicy {
    /// Release it right away.
    Immediate,
    /// Keep it around for up to `n` consecutive unused inferences.
    IdleLimit(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerConfig {
    pub default_chunk_size: u64,
    pub k_scale: f64,
    pub release_policy: ReleasePolicy,
    /// Byte alignment for assigned offsets. Candidate offsets are rounded up.
    pub alignment: u64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            default_chunk_size: 2 * 1024 * 1024,
            k_scale: 1.2,
            release_policy: ReleasePolicy::Immediate,
            alignment: 32,
        }
    }
}

impl PlannerConfig {
    fn validate(&self) -> Result<(), PlanError> {
        if self.default_chunk_size == 0 {
            return Err(PlanError::InvalidConfig("default_chunk_size must be > 0".into()));
        }
        if !(self.k_scale >= 1.0) {
            return Err(PlanError::InvalidConfig("k_scale must be >= 1".into()));
        }
        if self.alignment == 0 {
            return Err(PlanError::InvalidConfig("alignment must be > 0".into()));
        }
        Ok(())
    }
}

/// Device allocation/free accounting over a planning session.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AllocStats {
    pub peak_footprint: u64,
    pub bytes_allocated: u64,
    pub bytes_freed: u64,
    pub device_alloc_calls: u64,
    pub device_free_calls: u64,
}

impl AllocStats {
    fn on_alloc(&mut self, size: u64, live: u64) {
        self.bytes_allocated += size;
        self.device_alloc_calls += 1;
        self.peak_footprint = self.peak_footprint.max(live);
    }

    fn on_free(&mut self, size: u64) {
        self.bytes_freed += size;
        self.device_free_calls += 1;
    }

    pub fn to_key_value(&self) -> String {
        format!(
            "peak_footprint_bytes={}\nbytes_allocated={}\nbytes_freed={}\ndevice_alloc_calls={}\ndevice_free_calls={}\n",
            self.peak_footprint,
            self.bytes_allocated,
            self.bytes_freed,
            self.device_alloc_calls,
            self.device_free_calls
        )
    }
}

fn align_up(offset: u64, alignment: u64) -> u64 {
    offset.div_ceil(alignment) * alignment
}

/// Finds the lowest-fitting gap for `t` inside `chunk`, or `None` if it does
/// not fit.
///
/// Residents are scanned in offset order; only residents whose live interval
/// intersects `t`'s constrain placement, and non-overlapping residents do not
/// advance the scan cursor. Among gaps between overlapping residents the
/// smallest one that fits wins; the tail region after the last overlapping
/// resident is used only when no interior gap fits.
pub fn find_gap_from_chunk(
    t: &TensorUsageRecord,
    chunk: &Chunk,
    alignment: u64,
) -> Option<u64> {
    let mut prev_offset = 0u64;
    let mut smallest_gap = u64::MAX;
    let mut best: Option<u64> = None;
    for x in &chunk.residents {
        let overlaps =
            t.first_op.max(x.first_op) <= t.last_op.min(x.last_op);
        if overlaps {
            let candidate = align_up(prev_offset, alignment);
            if x.offset >= candidate {
                let gap = x.offset - candidate;
                if gap >= t.size && gap < smallest_gap {
                    smallest_gap = gap;
                    best = Some(candidate);
                }
            }
            prev_offset = prev_offset.max(x.offset + x.size);
        }
    }
    if best.is_none() {
        let candidate = align_up(prev_offset, alignment);
        if chunk.size >= candidate && chunk.size - candidate >= t.size {
            best = Some(candidate);
        }
    }
    best
}

fn sorted_for_planning(records: &[TensorUsageRecord]) -> Result<Vec<&TensorUsageRecord>, PlanError> {
    let mut seen = HashSet::new();
    for r in records {
        if r.first_op > r.last_op || r.size == 0 {
            return Err(PlanError::InvalidRecord {
                tensor_id: r.tensor_id.clone(),
                reason: "lifetime must satisfy first_op <= last_op and size > 0".into(),
            });
        }
        if !seen.insert(r.tensor_id.as_str()) {
            return Err(PlanError::DuplicateTensor(r.tensor_id.clone()));
        }
    }
    let mut order: Vec<&TensorUsageRecord> = records.iter().collect();
    // Non-increasing size; ties broken by ascending tensor_id for determinism.
    order.sort_by(|a, b| b.size.cmp(&a.size).then_with(|| a.tensor_id.cmp(&b.tensor_id)));
    Ok(order)
}

/// Plans `records` into chunks, reusing `prior_chunks` from the previous
/// inference where gaps fit and appending new chunks of size
/// `max(default_chunk_size, size * k_scale)` otherwise.
///
/// Prior residents are dropped on entry (the previous inference's tensors are
/// dead); only the chunk sizes carry over. Chunks left without assignments
/// are released per the config's release policy, and every chunk creation or
/// release is accounted as a device alloc/free in the returned stats.
pub fn mem_allocate(
    records: &[TensorUsageRecord],
    prior_chunks: Vec<Chunk>,
    cfg: &PlannerConfig,
) -> Result<(MemoryPlan, AllocStats), PlanError> {
    cfg.validate()?;
    let order = sorted_for_planning(records)?;

    let mut chunks: Vec<Chunk> = prior_chunks
        .into_iter()
        .enumerate()
        .map(|(i, c)| Chunk::new(i, c.size))
        .collect();
    let mut live: u64 = chunks.iter().map(|c| c.size).sum();
    let mut stats = AllocStats { peak_footprint: live, ..AllocStats::default() };
    let mut assigned_chunk = BTreeMap::new();
    let mut assigned_offset = BTreeMap::new();

    for t in order {
        let mut placed = false;
        for chunk in &mut chunks {
            if let Some(offset) = find_gap_from_chunk(t, chunk, cfg.alignment) {
                chunk.insert(t, offset);
                assigned_chunk.insert(t.tensor_id.clone(), chunk.chunk_id);
                assigned_offset.insert(t.tensor_id.clone(), offset);
                placed = true;
                break;
            }
        }
        if !placed {
            let scaled = (t.size as f64 * cfg.k_scale).ceil() as u64;
            let size = cfg.default_chunk_size.max(scaled);
            let mut chunk = Chunk::new(chunks.len(), size);
            chunk.insert(t, 0);
            assigned_chunk.insert(t.tensor_id.clone(), chunk.chunk_id);
            assigned_offset.insert(t.tensor_id.clone(), 0);
            live += size;
            stats.on_alloc(size, live);
            chunks.push(chunk);
        }
    }

    let release_unused = matches!(cfg.release_policy, ReleasePolicy::Immediate)
        || matches!(cfg.release_policy, ReleasePolicy::IdleLimit(0));
    let mut kept = Vec::new();
    for chunk in chunks {
        if chunk.residents.is_empty() && release_unused {
            stats.on_free(chunk.size);
        } else {
            kept.push(chunk);
        }
    }

    Ok((MemoryPlan { chunks: kept, assigned_chunk, assigned_offset }, stats))
}

/// GSOC baseline: greedy-by-size offset assignment into one unbounded arena,
/// using the same gap rule. The returned plan has a single chunk sized to the
/// final high-water mark.
pub fn plan_gsoc(records: &[TensorUsageRecord], alignment: u64) -> Result<MemoryPlan, PlanError> {
    if alignment == 0 {
        return Err(PlanError::InvalidConfig("alignment must be > 0".into()));
    }
    let order = sorted_for_planning(records)?;
    let mut arena = Chunk::new(0, u64::MAX);
    let mut assigned_chunk = BTreeMap::new();
    let mut assigned_offset = BTreeMap::new();
    for t in order {
        let offset = find_gap_from_chunk(t, &arena, alignment)
            .expect("unbounded arena always has a tail gap");
        arena.insert(t, offset);
        assigned_chunk.insert(t.tensor_id.clone(), 0);
        assigned_offset.insert(t.tensor_id.clone(), offset);
    }
    arena.size = arena.high_water();
    Ok(MemoryPlan { chunks: vec![arena], assigned_chunk, assigned_offset })
}

/// Checks a plan against its records: every record assigned exactly once to
/// an existing chunk, contained in it, and byte-disjoint from every
/// lifetime-overlapping tensor in the same chunk. Pairwise, O(n^2).
pub fn verify_plan(records: &[TensorUsageRecord], plan: &MemoryPlan) -> Result<(), PlanViolation> {
    for r in records {
        let chunk_id = *plan
            .assigned_chunk
            .get(&r.tensor_id)
            .ok_or_else(|| PlanViolation::Unassigned(r.tensor_id.clone()))?;
        let offset = *plan
            .assigned_offset
            .get(&r.tensor_id)
            .ok_or_else(|| PlanViolation::Unassigned(r.tensor_id.clone()))?;
        let chunk = plan.chunk(chunk_id).ok_or(PlanViolation::UnknownChunk {
            tensor_id: r.tensor_id.clone(),
            chunk_id,
        })?;
        if offset + r.size > chunk.size {
            return Err(PlanViolation::OutOfBounds {
                tensor_id: r.tensor_id.clone(),
                chunk_id,
                offset,
                size: r.size,
                chunk_size: chunk.size,
            });
        }
    }
    for (i, a) in records.iter().enumerate() {
        for b in &records[i + 1..] {
            if plan.assigned_chunk[&a.tensor_id] != plan.assigned_chunk[&b.tensor_id] {
                continue;
            }
            if !a.overlaps(b) {
                continue;
            }
            let (oa, ob) = (plan.assigned_offset[&a.tensor_id], plan.assigned_offset[&b.tensor_id]);
            let disjoint = oa + a.size <= ob || ob + b.size <= oa;
            if !disjoint {
                return Err(PlanViolation::ByteOverlap {
                    a: a.tensor_id.clone(),
                    b: b.tensor_id.clone(),
                    chunk_id: plan.assigned_chunk[&a.tensor_id],
                });
            }
        }
    }
    Ok(())
}

/// A serving-side planning session: keeps the chunk pool and cumulative
/// stats across inferences. Confine one session to one serving thread.
#[derive(Debug)]
pub struct PlannerSession {
    cfg: PlannerConfig,
    chunk_sizes: Vec<u64>,
    idle_counts: Vec<usize>,
    stats: AllocStats,
}

impl PlannerSession {
    pub fn new(cfg: PlannerConfig) -> Result<Self, PlanError> {
        cfg.validate()?;
        Ok(Self { cfg, chunk_sizes: Vec::new(), idle_counts: Vec::new(), stats: AllocStats::default() })
    }

    /// Plans one inference's records against the pooled chunks.
    pub fn plan(&mut self, records: &[TensorUsageRecord]) -> Result<MemoryPlan, PlanError> {
        let prior: Vec<Chunk> =
            self.chunk_sizes.iter().enumerate().map(|(i, &s)| Chunk::new(i, s)).collect();
        let prior_count = prior.len();
        // Run the allocation itself without releases; the session applies its
        // own idle-based policy below.
        let keep_all = PlannerConfig {
            release_policy: ReleasePolicy::IdleLimit(usize::MAX),
            ..self.cfg.clone()
        };
        let (plan, call_stats) = mem_allocate(records, prior, &keep_all)?;

        self.stats.bytes_allocated += call_stats.bytes_allocated;
        self.stats.device_alloc_calls += call_stats.device_alloc_calls;
        let live_after_alloc: u64 = plan.chunks.iter().map(|c| c.size).sum();
        self.stats.peak_footprint = self.stats.peak_footprint.max(live_after_alloc);

        let idle_limit = match self.cfg.release_policy {
            ReleasePolicy::Immediate => 0,
            ReleasePolicy::IdleLimit(n) => n,
        };
        let mut sizes = Vec::new();
        let mut idles = Vec::new();
        let mut released_plan_chunks = HashSet::new();
        for chunk in &plan.chunks {
            let used = !chunk.residents.is_empty();
            let prev_idle =
                if chunk.chunk_id < prior_count { self.idle_counts[chunk.chunk_id] } else { 0 };
            let idle = if used { 0 } else { prev_idle + 1 };
            if !used && idle > idle_limit {
                self.stats.on_free(chunk.size);
                released_plan_chunks.insert(chunk.chunk_id);
            } else {
                sizes.push(chunk.size);
                idles.push(idle);
            }
        }
        self.chunk_sizes = sizes;
        self.idle_counts = idles;

        let chunks =
            plan.chunks.into_iter().filter(|c| !released_plan_chunks.contains(&c.chunk_id)).collect();
        Ok(MemoryPlan { chunks, ..plan })
    }

    /// Device bytes currently held by the pool.
    pub fn footprint(&self) -> u64 {
        self.chunk_sizes.iter().sum()
    }

    pub fn stats(&self) -> &AllocStats {
        &self.stats
    }

    /// Releases every pooled chunk.
    pub fn drain(&mut self) {
        for &s in &self.chunk_sizes {
            self.stats.on_free(s);
        }
        self.chunk_sizes.clear();
        self.idle_counts.clear();
    }
}

/// One event of a device-allocator trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceEvent {
    Alloc { tensor_id: TensorId, size: u64 },
    Free { tensor_id: TensorId },
}

/// Expands usage records into the alloc/free event sequence a graph executor
/// would issue: allocate each tensor when its producer runs, free it after
/// its last consumer. `tag` namespaces ids so traces of several inferences
/// can be concatenated.
pub fn alloc_free_trace(records: &[TensorUsageRecord], tag: &str) -> Vec<TraceEvent> {
    let max_op = records.iter().map(|r| r.last_op).max().unwrap_or(0);
    let mut events = Vec::with_capacity(records.len() * 2);
    for op in 0..=max_op {
        for r in records.iter().filter(|r| r.first_op == op) {
            events.push(TraceEvent::Alloc { tensor_id: format!("{tag}{}", r.tensor_id), size: r.size });
        }
        for r in records.iter().filter(|r| r.last_op == op) {
            events.push(TraceEvent::Free { tensor_id: format!("{tag}{}", r.tensor_id) });
        }
    }
    events
}

#[derive(Debug, Clone, PartialEq)]
pub struct CachingConfig {
    /// Block sizes are rounded up to a multiple of this.
    pub granularity: u64,
    /// Device bytes the cache may hold before frees go back to the device.
    pub cap: u64,
}

impl Default for CachingConfig {
    fn default() -> Self {
        Self { granularity: 1, cap: u64::MAX }
    }
}

/// Simulated caching device allocator: freed blocks are kept in a size-keyed
/// cache and reassigned best-fit to later allocations instead of being
/// returned to the device.
#[derive(Debug)]
pub struct CachingAllocator {
    cfg: CachingConfig,
    live: BTreeMap<TensorId, u64>,
    cached: BTreeMap<u64, usize>, // block size -> count
    cached_bytes: u64,
    footprint: u64,
    stats: AllocStats,
}

impl CachingAllocator {
    pub fn new(cfg: CachingConfig) -> Self {
        Self {
            cfg,
            live: BTreeMap::new(),
            cached: BTreeMap::new(),
            cached_bytes: 0,
            footprint: 0,
            stats: AllocStats::default(),
        }
    }

    pub fn alloc(&mut self, tensor_id: &str, size: u64) -> Result<(), PlanError> {
        if self.live.contains_key(tensor_id) {
            return Err(PlanError::MalformedTrace {
                index: 0,
                reason: format!("alloc of live tensor {tensor_id}"),
            });
        }
        let rounded = align_up(size.max(1), self.cfg.granularity);
        // Best fit: smallest cached block that is large enough.
        let reuse = self.cached.range(rounded..).next().map(|(&s, _)| s);
        let block = match reuse {
            Some(block) => {
                let count = self.cached.get_mut(&block).unwrap();
                *count -= 1;
                if *count == 0 {
                    self.cached.remove(&block);
                }
                self.cached_bytes -= block;
                block
            }
            None => {
                self.footprint += rounded;
                self.stats.on_alloc(rounded, self.footprint);
                rounded
            }
        };
        self.live.insert(tensor_id.to_string(), block);
        Ok(())
    }

    pub fn free(&mut self, tensor_id: &str) -> Result<(), PlanError> {
        let block = self.live.remove(tensor_id).ok_or_else(|| PlanError::MalformedTrace {
            index: 0,
            reason: format!("free of unknown tensor {tensor_id}"),
        })?;
        if self.cached_bytes + block > self.cfg.cap {
            self.footprint -= block;
            self.stats.on_free(block);
        } else {
            *self.cached.entry(block).or_insert(0) += 1;
            self.cached_bytes += block;
        }
        Ok(())
    }

    /// Device bytes currently held (live blocks plus cache).
    pub fn footprint(&self) -> u64 {
        self.footprint
    }

    pub fn stats(&self) -> &AllocStats {
        &self.stats
    }
}

/// Replays a trace through [`CachingAllocator`] and reports the stats.
pub fn caching_allocator_sim(
    trace: &[TraceEvent],
    cfg: &CachingConfig,
) -> Result<AllocStats, PlanError> {
    let mut alloc = CachingAllocator::new(cfg.clone());
    for (index, ev) in trace.iter().enumerate() {
        let res = match ev {
            TraceEvent::Alloc { tensor_id, size } => alloc.alloc(tensor_id, *size),
            TraceEvent::Free { tensor_id } => alloc.free(tensor_id),
        };
        res.map_err(|e| match e {
            PlanError::MalformedTrace { reason, .. } => PlanError::MalformedTrace { index, reason },
            other => other,
        })?;
    }
    Ok(alloc.stats().clone())
}

/// Emits the plan as `tensor_id,chunk_id,offset` CSV rows with a header.
pub fn plan_to_csv(plan: &MemoryPlan) -> String {
    let mut out = String::from("tensor_id,chunk_id,offset\n");
    for (tensor_id, chunk_id) in &plan.assigned_chunk {
        out.push_str(&format!("{tensor_id},{chunk_id},{}\n", plan.assigned_offset[tensor_id]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, first: usize, last: usize, size: u64) -> TensorUsageRecord {
        TensorUsageRecord::new(id, first, last, size)
    }

    fn chunk_with(size: u64, residents: &[(&str, usize, usize, u64, u64)]) -> Chunk {
        let mut c = Chunk::new(0, size);
        for &(id, first, last, rsize, offset) in residents {
            c.insert(&rec(id, first, last, rsize), offset);
        }
        c
    }

    #[test]
    fn gap_search_ignores_disjoint_residents() {
        // Resident dies before t is born, so t can take offset 0.
        let chunk = chunk_with(100, &[("x", 0, 1, 50, 0)]);
        assert_eq!(find_gap_from_chunk(&rec("t", 2, 3, 10), &chunk, 1), Some(0));
    }

    #[test]
    fn gap_search_places_after_overlapping_resident() {
        let chunk = chunk_with(100, &[("x", 0, 5, 50, 0)]);
        assert_eq!(find_gap_from_chunk(&rec("t", 2, 3, 10), &chunk, 1), Some(50));
    }

    #[test]
    fn gap_search_rejects_when_tail_too_small() {
        let chunk = chunk_with(55, &[("x", 0, 5, 50, 0)]);
        assert_eq!(find_gap_from_chunk(&rec("t", 2, 3, 10), &chunk, 1), None);
    }

    #[test]
    fn gap_search_prefers_smallest_fitting_gap() {
        // Two overlapping residents leave a 16-byte interior gap before a
        // large tail; the interior gap must win.
        let chunk = chunk_with(1000, &[("a", 0, 9, 8, 0), ("b", 0, 9, 8, 24)]);
        assert_eq!(find_gap_from_chunk(&rec("t", 0, 9, 10), &chunk, 1), Some(8));
        // A tensor too big for the interior gap falls through to the tail.
        assert_eq!(find_gap_from_chunk(&rec("u", 0, 9, 20), &chunk, 1), Some(32));
    }

    #[test]
    fn gap_search_honors_alignment() {
        let chunk = chunk_with(1000, &[("a", 0, 9, 10, 0)]);
        assert_eq!(find_gap_from_chunk(&rec("t", 0, 9, 10), &chunk, 32), Some(32));
    }

    #[test]
    fn empty_records_release_prior_chunks_under_immediate_policy() {
        let cfg = PlannerConfig::default();
        let prior = vec![Chunk::new(0, 1024), Chunk::new(1, 2048)];
        let (plan, stats) = mem_allocate(&[], prior, &cfg).unwrap();
        assert!(plan.chunks.is_empty());
        assert!(plan.assigned_chunk.is_empty());
        assert_eq!(stats.device_free_calls, 2);
        assert_eq!(stats.bytes_freed, 3072);
    }

    #[test]
    fn single_megabyte_record_gets_default_two_megabyte_chunk() {
        let cfg = PlannerConfig { alignment: 1, ..PlannerConfig::default() };
        let records = [rec("t", 0, 1, 1024 * 1024)];
        let (plan, stats) = mem_allocate(&records, Vec::new(), &cfg).unwrap();
        assert_eq!(plan.chunks.len(), 1);
        assert_eq!(plan.chunks[0].size, 2 * 1024 * 1024);
        assert_eq!(plan.assigned_offset["t"], 0);
        assert_eq!(stats.device_alloc_calls, 1);
    }

    #[test]
    fn oversized_record_scales_chunk_by_k() {
        let cfg = PlannerConfig { alignment: 1, ..PlannerConfig::default() };
        let size = 10 * 1024 * 1024;
        let (plan, _) = mem_allocate(&[rec("big", 0, 0, size)], Vec::new(), &cfg).unwrap();
        assert_eq!(plan.chunks[0].size, (size as f64 * 1.2).ceil() as u64);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let cfg = PlannerConfig::default();
        let records = [rec("t", 0, 1, 8), rec("t", 2, 3, 8)];
        assert_eq!(
            mem_allocate(&records, Vec::new(), &cfg).unwrap_err(),
            PlanError::DuplicateTensor("t".into())
        );
    }

    #[test]
    fn replanning_identical_records_needs_no_device_allocs() {
        let cfg = PlannerConfig::default();
        let records: Vec<_> = (0..10).map(|i| rec(&format!("t{i}"), i, i + 2, 4096 * (i as u64 + 1))).collect();
        let (plan1, stats1) = mem_allocate(&records, Vec::new(), &cfg).unwrap();
        assert!(stats1.device_alloc_calls > 0);
        let (plan2, stats2) = mem_allocate(&records, plan1.chunks.clone(), &cfg).unwrap();
        assert_eq!(stats2.device_alloc_calls, 0);
        assert_eq!(stats2.device_free_calls, 0);
        assert_eq!(plan1.assigned_offset, plan2.assigned_offset);
    }

    #[test]
    fn longer_sequence_allocates_an_extra_chunk_on_reuse() {
        use crate::graph::{build_encoder_graph, ModelConfig};
        let cfg = PlannerConfig::default();
        let bert = ModelConfig::bert_base();
        let g200 = build_encoder_graph(&bert, 1, 200).unwrap();
        let g240 = build_encoder_graph(&bert, 1, 240).unwrap();
        let (plan200, _) = mem_allocate(g200.usage_records(), Vec::new(), &cfg).unwrap();
        let (plan240, _) = mem_allocate(g240.usage_records(), plan200.chunks.clone(), &cfg).unwrap();
        assert!(
            plan240.chunks.len() > plan200.chunks.len(),
            "expected more chunks at 240 ({}) than at 200 ({})",
            plan240.chunks.len(),
            plan200.chunks.len()
        );
        verify_plan(g240.usage_records(), &plan240).unwrap();
    }

    #[test]
    fn plans_are_deterministic() {
        let records: Vec<_> =
            (0..20).map(|i| rec(&format!("t{i}"), i % 5, i % 5 + 3, 100 + (i as u64 % 3) * 50)).collect();
        let cfg = PlannerConfig::default();
        let (a, _) = mem_allocate(&records, Vec::new(), &cfg).unwrap();
        let (b, _) = mem_allocate(&records, Vec::new(), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(plan_gsoc(&records, 1).unwrap(), plan_gsoc(&records, 1).unwrap());
    }

    #[test]
    fn gsoc_overlapping_pair_needs_sum_disjoint_pair_reuses() {
        let overlapping = [rec("a", 0, 3, 8), rec("b", 1, 2, 8)];
        let plan = plan_gsoc(&overlapping, 1).unwrap();
        assert_eq!(plan.packed_high_water(), 16);
        let disjoint = [rec("a", 0, 1, 8), rec("b", 2, 3, 8)];
        let plan = plan_gsoc(&disjoint, 1).unwrap();
        assert_eq!(plan.packed_high_water(), 8);
        verify_plan(&disjoint, &plan).unwrap();
    }

    #[test]
    fn verifier_flags_byte_overlap() {
        let records = [rec("a", 0, 3, 8), rec("b", 1, 2, 8)];
        let mut chunk = Chunk::new(0, 64);
        chunk.insert(&records[0], 0);
        chunk.insert(&records[1], 4); // overlaps a's [0, 8)
        let plan = MemoryPlan {
            chunks: vec![chunk],
            assigned_chunk: [("a".into(), 0), ("b".into(), 0)].into(),
            assigned_offset: [("a".into(), 0), ("b".into(), 4)].into(),
        };
        assert!(matches!(
            verify_plan(&records, &plan),
            Err(PlanViolation::ByteOverlap { .. })
        ));
    }

    #[test]
    fn caching_keeps_single_freed_block() {
        let cfg = CachingConfig::default();
        let trace = vec![
            TraceEvent::Alloc { tensor_id: "t".into(), size: 4096 },
            TraceEvent::Free { tensor_id: "t".into() },
        ];
        let stats = caching_allocator_sim(&trace, &cfg).unwrap();
        assert_eq!(stats.peak_footprint, 4096);
        assert_eq!(stats.device_alloc_calls, 1);
        assert_eq!(stats.device_free_calls, 0);
    }

    #[test]
    fn caching_footprint_peaks_at_longest_request() {
        // Request sizes rise then fall. Every new size grows the cache; after
        // the largest request the footprint never moves again because all
        // later requests are served from cached blocks.
        let mut alloc = CachingAllocator::new(CachingConfig::default());
        let sizes = [100u64, 400, 900, 400, 100];
        let mut series = Vec::new();
        for (i, &s) in sizes.iter().enumerate() {
            let id = format!("r{i}");
            alloc.alloc(&id, s).unwrap();
            alloc.free(&id).unwrap();
            series.push(alloc.footprint());
        }
        assert_eq!(series, vec![100, 500, 1400, 1400, 1400]);
        assert_eq!(alloc.stats().device_alloc_calls, 3);
        assert_eq!(alloc.stats().device_free_calls, 0);
        assert_eq!(alloc.stats().peak_footprint, 1400);
    }

    #[test]
    fn malformed_traces_rejected() {
        let cfg = CachingConfig::default();
        let double_free = vec![
            TraceEvent::Alloc { tensor_id: "t".into(), size: 16 },
            TraceEvent::Free { tensor_id: "t".into() },
            TraceEvent::Free { tensor_id: "t".into() },
        ];
        assert!(matches!(
            caching_allocator_sim(&double_free, &cfg),
            Err(PlanError::MalformedTrace { index: 2, .. })
        ));
        let free_first = vec![TraceEvent::Free { tensor_id: "t".into() }];
        assert!(matches!(
            caching_allocator_sim(&free_first, &cfg),
            Err(PlanError::MalformedTrace { index: 0, .. })
        ));
    }

    #[test]
    fn session_idle_limit_delays_release() {
        let cfg = PlannerConfig {
            release_policy: ReleasePolicy::IdleLimit(2),
            alignment: 1,
            ..PlannerConfig::default()
        };
        let mut session = PlannerSession::new(cfg).unwrap();
        let big: Vec<_> = (0..4).map(|i| rec(&format!("t{i}"), 0, 3, 3 * 1024 * 1024)).collect();
        let small = [rec("s", 0, 1, 1024)];
        session.plan(&big).unwrap();
        let peak = session.footprint();
        session.plan(&small).unwrap(); // idle 1: kept
        assert_eq!(session.footprint(), peak);
        session.plan(&small).unwrap(); // idle 2: kept
        assert_eq!(session.footprint(), peak);
        session.plan(&small).unwrap(); // idle 3: released
        assert!(session.footprint() < peak);
    }

    #[test]
    fn session_immediate_policy_shrinks_on_shorter_request() {
        use crate::graph::{build_encoder_graph, ModelConfig};
        let mut session = PlannerSession::new(PlannerConfig::default()).unwrap();
        let bert = ModelConfig::bert_base();
        let long = build_encoder_graph(&bert, 1, 400).unwrap();
        let short = build_encoder_graph(&bert, 1, 20).unwrap();
        session.plan(long.usage_records()).unwrap();
        let after_long = session.footprint();
        session.plan(short.usage_records()).unwrap();
        assert!(session.footprint() < after_long);
    }

    #[test]
    fn trace_expansion_orders_allocs_before_frees() {
        let records = [rec("a", 0, 1, 8), rec("b", 1, 2, 8)];
        let trace = alloc_free_trace(&records, "x_");
        assert_eq!(
            trace,
            vec![
                TraceEvent::Alloc { tensor_id: "x_a".into(), size: 8 },
                TraceEvent::Alloc { tensor_id: "x_b".into(), size: 8 },
                TraceEvent::Free { tensor_id: "x_a".into() },
                TraceEvent::Free { tensor_id: "x_b".into() },
            ]
        );
        caching_allocator_sim(&trace, &CachingConfig::default()).unwrap();
    }
}
