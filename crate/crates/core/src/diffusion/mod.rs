//! Masked and uniform discrete diffusion: schedules, noising kernels, the
//! learned forward policy, trajectories and exact marginals for small spaces.

mod exact;
pub mod policy;
mod sampler;
mod schedule;
mod uniform;

pub use exact::{
    exact_initial_distribution, exact_terminal_distribution, propagate_uniform, reference_transition,
    uniform_noising_marginal,
};
pub use sampler::{ln_choose, DiffusionSampler, Process, Trajectory};
pub use schedule::MaskingSchedule;
pub use uniform::UniformKernel;

/// Mask symbol; real symbols are `0..C`.
pub const MASK: u8 = u8::MAX;
