//! Two-link arm with Stribeck friction and a hidden friction memory.

mod friction;
mod integrator;
mod model;
mod params;
mod reference;
mod rollout;

pub use friction::{memory_derivative, memory_step_rk4, sign0, stribeck_force, stribeck_scalar};
pub use integrator::{acceleration, step_rk4, step_rk4_bounded, PlantState, DEFAULT_BLOWUP_BOUND};
pub use model::{
    coriolis_matrix, gravity_vector, hanging_configuration, kinetic_energy, mass_matrix,
    mass_matrix_dot, potential_energy,
};
pub use params::{FrictionParams, PlantParams, PAYLOAD_MAX};
pub use reference::{MultisineReference, MultisineSpec, RefSample, Reference, ReferenceSpec};
pub use rollout::{
    advance, reset_state, rollout, simulate_from, ControlLaw, ControlOutput, RolloutConfig,
    StepContext, StepRecord, Trajectory,
};
