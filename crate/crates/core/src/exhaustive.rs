//! Exhaustive reference searches for small instances.
//!
//! These provide ground truth for the planner and the scheduler on inputs
//! small enough to enumerate. They share no code with the production
//! algorithms they check.

use crate::graph::TensorUsageRecord;

/// Minimum arena height over all packings of the records, by trying every
/// placement order with lowest-feasible offsets.
///
/// For interval packing, some optimal packing can be normalized so that each
/// tensor rests at offset 0 or directly on top of a lifetime-overlapping
/// tensor, and placing tensors in ascending order of their offsets in that
/// packing with the lowest-feasible rule reproduces a packing at least as
/// good. Trying all n! orders therefore reaches the optimum; candidate
/// offsets are {0} plus the end of every placed overlapping tensor.
/// Intended for n <= 6.
pub fn optimal_footprint(records: &[TensorUsageRecord]) -> u64 {
    assert!(records.len() <= 8, "exhaustive search is for tiny instances");
    if records.is_empty() {
        return 0;
    }
    let idx: Vec<usize> = (0..records.len()).collect();
    let mut best = u64::MAX;
    permute(&idx, &mut Vec::new(), &mut |order| {
        let mut offsets: Vec<(usize, u64)> = Vec::with_capacity(order.len());
        let mut height = 0u64;
        for &i in order {
            let t = &records[i];
            let mut candidates: Vec<u64> = vec![0];
            candidates.extend(
                offsets
                    .iter()
                    .filter(|&&(j, _)| t.overlaps(&records[j]))
                    .map(|&(j, off)| off + records[j].size),
            );
            candidates.sort_unstable();
            let offset = candidates
                .into_iter()
                .find(|&c| {
                    offsets.iter().all(|&(j, off)| {
                        !t.overlaps(&records[j])
                            || c + t.size <= off
                            || off + records[j].size <= c
                    })
                })
                .expect("zero or a stack top is always feasible");
            offsets.push((i, offset));
            height = height.max(offset + t.size);
        }
        best = best.min(height);
    });
    best
}

fn permute(remaining: &[usize], prefix: &mut Vec<usize>, visit: &mut impl FnMut(&[usize])) {
    if remaining.is_empty() {
        visit(prefix);
        return;
    }
    for (k, &v) in remaining.iter().enumerate() {
        let mut rest = remaining.to_vec();
        rest.remove(k);
        prefix.push(v);
        permute(&rest, prefix, visit);
        prefix.pop();
    }
}

/// Minimum total cost over all 2^(n-1) contiguous partitions of
/// `sorted_lens`, where a segment costs `cost(max_len, count)`. Returns the
/// cost and the segment sizes of one optimal partition.
pub fn optimal_contiguous_partition(
    sorted_lens: &[usize],
    cost: &mut impl FnMut(usize, usize) -> f64,
) -> (f64, Vec<usize>) {
    let n = sorted_lens.len();
    assert!(n >= 1 && n <= 20, "enumeration is for small instances");
    let mut best = f64::INFINITY;
    let mut best_sizes = Vec::new();
    // Bit i of the mask marks a boundary after element i.
    for mask in 0u32..(1 << (n - 1)) {
        let mut total = 0.0;
        let mut sizes = Vec::new();
        let mut start = 0usize;
        for i in 0..n {
            let boundary = i == n - 1 || mask & (1 << i) != 0;
            if boundary {
                let count = i - start + 1;
                total += cost(sorted_lens[i], count);
                sizes.push(count);
                start = i + 1;
            }
        }
        if total < best {
            best = total;
            best_sizes = sizes;
        }
    }
    (best, best_sizes)
}
