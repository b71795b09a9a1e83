//! Property tests pinning the DP scheduler to the exhaustive partition
//! optimum and to its dominance and partition-validity guarantees.

use proptest::prelude::*;

use seqserve_core::cost::{CostProvider, CostTable};
use seqserve_core::exhaustive::optimal_contiguous_partition;
use seqserve_core::scheduler::{
    dp_schedule, naive_schedule, nobatch_schedule, Request, RequestId,
};

/// Random cost table over the given lengths, monotone non-decreasing in both
/// keys. Values are dyadic rationals (multiples of 1/1024) so every partial
/// sum is exact in f64 and DP totals can be compared to the oracle exactly.
fn monotone_table(lens: &[usize], max_batch: usize, seed: &mut u64) -> CostTable {
    let mut next = || {
        *seed ^= *seed << 13;
        *seed ^= *seed >> 7;
        *seed ^= *seed << 17;
        (*seed >> 54) as f64 / 1024.0 // 0 .. 1023/1024
    };
    let mut sorted: Vec<usize> = lens.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut table = CostTable::new();
    let mut prev_row = vec![0.0f64; max_batch + 1];
    for &len in &sorted {
        let mut row = vec![0.0f64; max_batch + 1];
        for b in 1..=max_batch {
            let above = prev_row[b];
            let left = row[b - 1];
            row[b] = above.max(left) + next() + 1.0 / 1024.0;
            table.insert(len, b, row[b]).unwrap();
        }
        prev_row = row;
    }
    table
}

fn requests_from_lens(lens: &[usize]) -> Vec<Request> {
    lens.iter()
        .enumerate()
        .map(|(i, &l)| Request::new(i as RequestId, l, i as f64 * 1e-3))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn dp_equals_exhaustive_partition_minimum(
        lens in prop::collection::vec(1usize..=500, 1..=12),
        seed in 1u64..,
    ) {
        let mut seed = seed;
        let costs = CostProvider::table(monotone_table(&lens, lens.len(), &mut seed));
        let requests = requests_from_lens(&lens);
        let plan = dp_schedule(&requests, &costs).unwrap();

        let mut sorted = lens.clone();
        sorted.sort_unstable();
        let mut cost_fn = |max_len: usize, count: usize| {
            costs.lookup(max_len, count).unwrap()
        };
        let (oracle_cost, _) = optimal_contiguous_partition(&sorted, &mut cost_fn);
        prop_assert_eq!(plan.predicted_cost, oracle_cost);

        // Plan cost recomputed from its own batches must match exactly.
        let recomputed: f64 = plan
            .batches
            .iter()
            .map(|b| costs.lookup(b.padded_len, b.size()).unwrap())
            .sum();
        prop_assert_eq!(recomputed, plan.predicted_cost);
    }

    #[test]
    fn dp_dominates_baselines_and_partitions_validly(
        lens in prop::collection::vec(1usize..=500, 1..=12),
        seed in 1u64..,
    ) {
        let mut seed = seed;
        let costs = CostProvider::table(monotone_table(&lens, lens.len(), &mut seed));
        let requests = requests_from_lens(&lens);
        let dp = dp_schedule(&requests, &costs).unwrap();
        let naive = naive_schedule(&requests, &costs).unwrap();
        let nobatch = nobatch_schedule(&requests, &costs).unwrap();
        prop_assert!(dp.predicted_cost <= naive.predicted_cost);
        prop_assert!(dp.predicted_cost <= nobatch.predicted_cost);

        // Batches are contiguous over the sorted order and cover every
        // request exactly once, padded to their longest member.
        let mut order: Vec<&Request> = requests.iter().collect();
        order.sort_by(|a, b| {
            a.seq_len
                .cmp(&b.seq_len)
                .then(a.arrival_time.total_cmp(&b.arrival_time))
                .then(a.request_id.cmp(&b.request_id))
        });
        let flattened: Vec<RequestId> =
            dp.batches.iter().flat_map(|b| b.request_ids.clone()).collect();
        let expected: Vec<RequestId> = order.iter().map(|r| r.request_id).collect();
        prop_assert_eq!(flattened, expected);
        for batch in &dp.batches {
            let max_len = batch
                .request_ids
                .iter()
                .map(|&id| requests[id as usize].seq_len)
                .max()
                .unwrap();
            prop_assert_eq!(batch.padded_len, max_len);
        }
    }
}
