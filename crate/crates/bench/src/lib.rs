//! Shared fixtures for the benchmarks.

use energy_field::synth::gaussian_head;
use energy_field::{HeadTensors, SynthSpec};

/// Seeded Gaussian head used by every benchmark group.
pub fn head(len: usize, d_h: usize) -> HeadTensors {
    gaussian_head(&SynthSpec::gaussian(len, d_h, 0x5eed)).expect("valid fixture shape")
}
