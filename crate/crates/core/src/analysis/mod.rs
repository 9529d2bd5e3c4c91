//! z-domain and memory diagnostics: transfer functions, impulse and frequency responses,
//! dominant-pole memory maps and the inference-cost model.

mod flops;
mod memory;
mod transfer;

pub use flops::{flop_report, reduction, FlopModel, FlopReport};
pub use memory::{horizon, memory_horizon, to_pgm, GroupSelection, Markers, MemoryMap, RHO_CAP, TAU_FLOOR};
pub use transfer::{
    angle_frequency, bin_frequency, dft, dominant_bin, eval_h, impulse_response, log_envelope_slope,
    TransferFunction, POLE_TOLERANCE,
};
