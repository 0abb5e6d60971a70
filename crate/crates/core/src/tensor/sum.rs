/// Sums `values` in a canonical order (ascending by `total_cmp`).
///
/// The result depends only on the multiset of inputs, so reductions across
/// agents or tokens stay bit-identical when those are permuted.
pub fn canonical_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}
