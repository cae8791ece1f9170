//! Shared inputs for the benchmarks.

use ranlen::data::{synth_pairs, PairedSample};
use ranlen::masks::{sample_circle, RegionMask};

/// One synthetic pair and a circle mask of the given size.
pub fn sample(size: usize, seed: u64) -> (PairedSample, RegionMask) {
    let s = synth_pairs(1, size, size, seed).expect("valid size").remove(0);
    let (m, _) = sample_circle(size, size, seed).expect("valid size");
    (s, m)
}
