//! Latency oracle for the batch scheduler.
//!
//! A cost provider answers "how long does one inference at (sequence length,
//! batch size) take". Three kinds are supported: an analytic model linear in
//! GEMM FLOPs with a fixed launch overhead, an exact measured table filled by
//! a warm-up sweep, and bilinear interpolation over a sampled table grid.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::graph::{flops_split, ModelConfig};

/// Latency in seconds.
pub type Latency = f64;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("no cost entry for seq_len={seq_len} batch={batch}")]
    MissingEntry { seq_len: usize, batch: usize },
    #[error("query seq_len={seq_len} batch={batch} outside table hull")]
    OutOfHull { seq_len: usize, batch: usize },
    #[error("invalid coefficients: {0}")]
    InvalidCoeffs(String),
    #[error("interpolation requires a full rectangular grid; missing (seq_len={seq_len}, batch={batch})")]
    IncompleteGrid { seq_len: usize, batch: usize },
    #[error("table is empty")]
    EmptyTable,
    #[error("malformed cost table at line {line}: {reason}")]
    MalformedTable { line: usize, reason: String },
    #[error("latency must be positive, got {latency} at seq_len={seq_len} batch={batch}")]
    NonPositiveLatency { seq_len: usize, batch: usize, latency: f64 },
}

/// Occurs when a warm-up sweep cannot finish; carries what was measured.
#[derive(Debug, Error)]
#[error("warm-up failed at seq_len={seq_len} batch={batch} after {} entries: {source}", partial.len())]
pub struct WarmupError {
    pub seq_len: usize,
    pub batch: usize,
    pub partial: CostTable,
    #[source]
    pub source: CostError,
}

/// Latency lookup keyed by (sequence length, batch size).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostTable {
    entries: BTreeMap<(usize, usize), Latency>,
}

impl CostTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, seq_len: usize, batch: usize, latency: Latency) -> Result<(), CostError> {
        if !(latency > 0.0) {
            return Err(CostError::NonPositiveLatency { seq_len, batch, latency });
        }
        self.entries.insert((seq_len, batch), latency);
        Ok(())
    }

    pub fn get(&self, seq_len: usize, batch: usize) -> Option<Latency> {
        self.entries.get(&(seq_len, batch)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, Latency)> + '_ {
        self.entries.iter().map(|(&(s, b), &v)| (s, b, v))
    }

    /// Sorted distinct sequence lengths covered.
    pub fn seq_lens(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.entries.keys().map(|&(s, _)| s).collect();
        v.dedup();
        v
    }

    /// Sorted distinct batch sizes covered.
    pub fn batches(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.entries.keys().map(|&(_, b)| b).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Overwrites an entry with an observed latency (lazy refresh from live
    /// serving measurements). Single-writer: callers must serialize with
    /// concurrent readers.
    pub fn observe(&mut self, seq_len: usize, batch: usize, latency: Latency) -> Result<(), CostError> {
        self.insert(seq_len, batch, latency)
    }

    /// Key pairs where latency decreases as seq_len grows at fixed batch.
    /// Measured tables may contain noise; callers should warn, not fail.
    pub fn monotonicity_violations(&self) -> Vec<((usize, usize), (usize, usize))> {
        let mut violations = Vec::new();
        for b in self.batches() {
            let mut prev: Option<(usize, Latency)> = None;
            for (&(s, kb), &v) in &self.entries {
                if kb != b {
                    continue;
                }
                if let Some((ps, pv)) = prev {
                    if v < pv {
                        violations.push(((ps, b), (s, b)));
                    }
                }
                prev = Some((s, v));
            }
        }
        violations
    }

    /// Full-precision CSV; floats round-trip bit-exactly through
    /// [`CostTable::from_csv_str`].
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("seq_len,batch,latency_s\n");
        for (&(s, b), &v) in &self.entries {
            out.push_str(&format!("{s},{b},{v}\n"));
        }
        out
    }

    pub fn from_csv_str(text: &str) -> Result<Self, CostError> {
        let mut table = Self::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') || trimmed == "seq_len,batch,latency_s" {
                continue;
            }
            let fields: Vec<&str> = trimmed.split(',').collect();
            if fields.len() != 3 {
                return Err(CostError::MalformedTable {
                    line,
                    reason: format!("expected 3 fields, got {}", fields.len()),
                });
            }
            let seq_len = fields[0].parse::<usize>().map_err(|_| CostError::MalformedTable {
                line,
                reason: format!("bad seq_len: {}", fields[0]),
            })?;
            let batch = fields[1].parse::<usize>().map_err(|_| CostError::MalformedTable {
                line,
                reason: format!("bad batch: {}", fields[1]),
            })?;
            let latency = fields[2].parse::<f64>().map_err(|_| CostError::MalformedTable {
                line,
                reason: format!("bad latency: {}", fields[2]),
            })?;
            table.insert(seq_len, batch, latency)?;
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv_string())
    }

    pub fn load(path: &Path) -> Result<Self, CostError> {
        let text = std::fs::read_to_string(path).map_err(|e| CostError::MalformedTable {
            line: 0,
            reason: format!("{}: {e}", path.display()),
        })?;
        Self::from_csv_str(&text)
    }

    fn require_full_grid(&self) -> Result<(), CostError> {
        if self.is_empty() {
            return Err(CostError::EmptyTable);
        }
        for &s in &self.seq_lens() {
            for &b in &self.batches() {
                if self.get(s, b).is_none() {
                    return Err(CostError::IncompleteGrid { seq_len: s, batch: b });
                }
            }
        }
        Ok(())
    }
}

/// Analytic model coefficients: seconds per FLOP for the length-linear and
/// length-quadratic GEMM components, plus a fixed per-inference overhead
/// modeling kernel-launch cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostCoeffs {
    pub per_linear_flop: f64,
    pub per_quadratic_flop: f64,
    pub overhead: f64,
}

impl CostCoeffs {
    pub fn new(per_linear_flop: f64, per_quadratic_flop: f64, overhead: f64) -> Result<Self, CostError> {
        if per_linear_flop < 0.0 || per_quadratic_flop < 0.0 {
            return Err(CostError::InvalidCoeffs("per-flop coefficients must be non-negative".into()));
        }
        if !(overhead > 0.0) {
            return Err(CostError::InvalidCoeffs("overhead must be positive".into()));
        }
        Ok(Self { per_linear_flop, per_quadratic_flop, overhead })
    }
}

/// Analytic latency of one inference: linear in the model's GEMM FLOPs with a
/// fixed overhead floor.
pub fn analytic_cost(
    config: &ModelConfig,
    coeffs: &CostCoeffs,
    seq_len: usize,
    batch: usize,
) -> Latency {
    let (linear, quadratic) = flops_split(config, batch, seq_len);
    coeffs.per_linear_flop * linear as f64
        + coeffs.per_quadratic_flop * quadratic as f64
        + coeffs.overhead
}

/// The scheduler's latency oracle.
#[derive(Debug, Clone, PartialEq)]
pub enum CostProvider {
    Analytic { config: ModelConfig, coeffs: CostCoeffs },
    Table(CostTable),
    /// Exact on covered keys, bilinear between them, clamped at the hull.
    Interpolated(CostTable),
}

impl CostProvider {
    pub fn analytic(config: ModelConfig, coeffs: CostCoeffs) -> Self {
        Self::Analytic { config, coeffs }
    }

    pub fn table(table: CostTable) -> Self {
        Self::Table(table)
    }

    pub fn interpolated(table: CostTable) -> Result<Self, CostError> {
        table.require_full_grid()?;
        Ok(Self::Interpolated(table))
    }

    /// Latency for (seq_len, batch). Exact table kind errors on any key it
    /// does not cover; the interpolated kind clamps out-of-hull queries.
    pub fn lookup(&self, seq_len: usize, batch: usize) -> Result<Latency, CostError> {
        self.lookup_clamped(seq_len, batch).map(|(v, _)| v)
    }

    /// Like [`CostProvider::lookup`], also reporting whether the query was
    /// clamped to the table hull.
    pub fn lookup_clamped(&self, seq_len: usize, batch: usize) -> Result<(Latency, bool), CostError> {
        match self {
            CostProvider::Analytic { config, coeffs } => {
                Ok((analytic_cost(config, coeffs, seq_len, batch), false))
            }
            CostProvider::Table(table) => table
                .get(seq_len, batch)
                .map(|v| (v, false))
                .ok_or(CostError::MissingEntry { seq_len, batch }),
            CostProvider::Interpolated(table) => {
                if let Some(v) = table.get(seq_len, batch) {
                    return Ok((v, false));
                }
                bilinear(table, seq_len, batch)
            }
        }
    }
}

/// Locates `x` in the sorted grid: the bracketing pair and whether `x` had to
/// be clamped into the grid range.
fn bracket(grid: &[usize], x: usize) -> (usize, usize, f64, bool) {
    let lo = grid[0];
    let hi = grid[grid.len() - 1];
    if x <= lo {
        return (lo, lo, 0.0, x < lo);
    }
    if x >= hi {
        return (hi, hi, 0.0, x > hi);
    }
    let idx = grid.partition_point(|&g| g <= x);
    let (a, b) = (grid[idx - 1], grid[idx]);
    let t = (x - a) as f64 / (b - a) as f64;
    (a, b, t, false)
}

fn bilinear(table: &CostTable, seq_len: usize, batch: usize) -> Result<(Latency, bool), CostError> {
    let seqs = table.seq_lens();
    let batches = table.batches();
    if seqs.is_empty() {
        return Err(CostError::EmptyTable);
    }
    let (s0, s1, ts, clamped_s) = bracket(&seqs, seq_len);
    let (b0, b1, tb, clamped_b) = bracket(&batches, batch);
    let v = |s, b| table.get(s, b).ok_or(CostError::IncompleteGrid { seq_len: s, batch: b });
    let v00 = v(s0, b0)?;
    let v10 = v(s1, b0)?;
    let v01 = v(s0, b1)?;
    let v11 = v(s1, b1)?;
    let low = v00 + (v10 - v00) * ts;
    let high = v01 + (v11 - v01) * ts;
    Ok((low + (high - low) * tb, clamped_s || clamped_b))
}

/// Runs the executor over the Cartesian product of the grids and collects a
/// table. On executor failure the partially built table is reported.
pub fn warmup(
    executor: &CostProvider,
    seq_lens: &[usize],
    batches: &[usize],
) -> Result<CostTable, WarmupError> {
    let mut table = CostTable::new();
    for &s in seq_lens {
        for &b in batches {
            match executor.lookup(s, b).and_then(|v| table.insert(s, b, v)) {
                Ok(()) => {}
                Err(source) => {
                    return Err(WarmupError { seq_len: s, batch: b, partial: table, source })
                }
            }
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::flops;

    fn bert() -> ModelConfig {
        ModelConfig::bert_base()
    }

    #[test]
    fn overhead_only_model_is_constant() {
        let coeffs = CostCoeffs::new(0.0, 0.0, 1.0).unwrap();
        for (s, b) in [(1, 1), (40, 1), (500, 20)] {
            assert_eq!(analytic_cost(&bert(), &coeffs, s, b), 1.0);
        }
    }

    #[test]
    fn analytic_cost_is_linear_in_batch_above_overhead() {
        let coeffs = CostCoeffs::new(2e-13, 5e-13, 1e-3).unwrap();
        let c = coeffs.overhead;
        for s in [10, 40, 333] {
            for b in [1, 3, 7] {
                let one = analytic_cost(&bert(), &coeffs, s, b);
                let two = analytic_cost(&bert(), &coeffs, s, 2 * b);
                assert!((two - c - 2.0 * (one - c)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn analytic_cost_matches_flop_enumeration_at_seq_40() {
        // a = b, so the split collapses to total FLOPs; the graph enumeration
        // is the independent route.
        let coeffs = CostCoeffs::new(1e-12, 1e-12, 1e-3).unwrap();
        let g = crate::graph::build_encoder_graph(&bert(), 1, 40).unwrap();
        let expected = 1e-3 + g.gemm_flops() as f64 * 1e-12;
        let got = analytic_cost(&bert(), &coeffs, 40, 1);
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 7.85e-3).abs() / 7.85e-3 < 0.005, "got {got}");
        assert_eq!(g.gemm_flops(), flops(&bert(), 1, 40));
    }

    #[test]
    fn coefficient_validation() {
        assert!(CostCoeffs::new(-1.0, 0.0, 1.0).is_err());
        assert!(CostCoeffs::new(0.0, 0.0, 0.0).is_err());
        assert!(CostCoeffs::new(0.0, 0.0, 1e-9).is_ok());
    }

    #[test]
    fn warmup_covers_cartesian_product() {
        let provider = CostProvider::analytic(bert(), CostCoeffs::new(1e-13, 1e-13, 1e-3).unwrap());
        let single = warmup(&provider, &[10], &[1]).unwrap();
        assert_eq!(single.len(), 1);
        let table = warmup(&provider, &[10, 100, 500], &[1, 8, 20]).unwrap();
        assert_eq!(table.len(), 9);
        for (s, b, v) in table.iter() {
            assert_eq!(v, provider.lookup(s, b).unwrap());
        }
    }

    #[test]
    fn warmup_reports_partial_table_on_failure() {
        let mut sparse = CostTable::new();
        sparse.insert(10, 1, 0.5).unwrap();
        sparse.insert(20, 1, 0.6).unwrap();
        let executor = CostProvider::table(sparse);
        let err = warmup(&executor, &[10, 20, 30], &[1]).unwrap_err();
        assert_eq!((err.seq_len, err.batch), (30, 1));
        assert_eq!(err.partial.len(), 2);
    }

    #[test]
    fn table_round_trips_bit_exactly() {
        let provider =
            CostProvider::analytic(bert(), CostCoeffs::new(1.37e-13, 2.9e-13, 1.1e-3).unwrap());
        let table = warmup(&provider, &[7, 40, 481], &[1, 3, 17]).unwrap();
        let reloaded = CostTable::from_csv_str(&table.to_csv_string()).unwrap();
        assert_eq!(table, reloaded);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.csv");
        table.save(&path).unwrap();
        assert_eq!(CostTable::load(&path).unwrap(), table);
    }

    #[test]
    fn covered_keys_return_exact_values() {
        let mut table = CostTable::new();
        table.insert(10, 1, 0.125).unwrap();
        table.insert(20, 1, 0.25).unwrap();
        let exact = CostProvider::table(table.clone());
        assert_eq!(exact.lookup(10, 1).unwrap(), 0.125);
        assert_eq!(
            exact.lookup(15, 1).unwrap_err(),
            CostError::MissingEntry { seq_len: 15, batch: 1 }
        );
        let interp = CostProvider::interpolated(table).unwrap();
        assert_eq!(interp.lookup(20, 1).unwrap(), 0.25);
    }

    #[test]
    fn bilinear_reproduces_functions_linear_in_each_key() {
        let f = |s: usize, b: usize| 2.0 + 0.5 * s as f64 + 3.0 * b as f64 + 0.01 * (s * b) as f64;
        let mut table = CostTable::new();
        for s in [10, 30, 90] {
            for b in [1, 5, 9] {
                table.insert(s, b, f(s, b)).unwrap();
            }
        }
        let interp = CostProvider::interpolated(table).unwrap();
        for (s, b) in [(20, 3), (60, 7), (11, 2), (89, 8)] {
            let (v, clamped) = interp.lookup_clamped(s, b).unwrap();
            assert!(!clamped);
            assert!((v - f(s, b)).abs() < 1e-9, "at ({s},{b}): {v} vs {}", f(s, b));
        }
    }

    #[test]
    fn quadratic_model_interpolation_error_is_bounded_and_reported() {
        let coeffs = CostCoeffs::new(1e-13, 1e-13, 1e-3).unwrap();
        let provider = CostProvider::analytic(bert(), coeffs);
        let table = warmup(&provider, &[10, 100, 500], &[1, 8, 20]).unwrap();
        let interp = CostProvider::interpolated(table).unwrap();
        let mut worst: f64 = 0.0;
        for (s, b) in [(55, 4), (300, 14), (40, 1)] {
            let truth = provider.lookup(s, b).unwrap();
            let est = interp.lookup(s, b).unwrap();
            worst = worst.max((est - truth).abs() / truth);
        }
        // The quadratic attention term makes bilinear overestimate between
        // samples; record the observed error.
        println!("bilinear-vs-quadratic max relative error: {worst:.4}");
        assert!(worst < 0.5, "interpolation error unexpectedly large: {worst}");
    }

    #[test]
    fn interpolated_clamps_out_of_hull_queries() {
        let mut table = CostTable::new();
        for s in [10, 20] {
            for b in [1, 2] {
                table.insert(s, b, (s * b) as f64).unwrap();
            }
        }
        let interp = CostProvider::interpolated(table.clone()).unwrap();
        let (v, clamped) = interp.lookup_clamped(5, 1).unwrap();
        assert!(clamped);
        assert_eq!(v, 10.0);
        let (v, clamped) = interp.lookup_clamped(25, 3).unwrap();
        assert!(clamped);
        assert_eq!(v, 40.0);
        // The exact-table kind refuses the same queries.
        let exact = CostProvider::table(table);
        assert!(exact.lookup(5, 1).is_err());
    }

    #[test]
    fn incomplete_grids_are_rejected_for_interpolation() {
        let mut table = CostTable::new();
        table.insert(10, 1, 1.0).unwrap();
        table.insert(20, 2, 2.0).unwrap();
        assert_eq!(
            CostProvider::interpolated(table).unwrap_err(),
            CostError::IncompleteGrid { seq_len: 10, batch: 2 }
        );
    }

    #[test]
    fn observe_overwrites_lazily() {
        let mut table = CostTable::new();
        table.insert(10, 1, 1.0).unwrap();
        table.observe(10, 1, 0.8).unwrap();
        assert_eq!(table.get(10, 1), Some(0.8));
    }

    #[test]
    fn monotonicity_violations_detected() {
        let mut table = CostTable::new();
        table.insert(10, 1, 2.0).unwrap();
        table.insert(20, 1, 1.5).unwrap();
        table.insert(30, 1, 3.0).unwrap();
        assert_eq!(table.monotonicity_violations(), vec![((10, 1), (20, 1))]);
    }
}
