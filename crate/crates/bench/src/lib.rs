//! Shared setup for the benchmarks: a balanced initial state on a given grid.

use std::sync::Arc;

use eady_core::init::{self, PerturbationParams};
use eady_core::{Constants, Mesh, RunParams, Spaces, State};

pub struct Setup {
    pub spaces: Arc<Spaces>,
    pub constants: Constants,
    pub params: RunParams,
    pub state: State,
}

/// Control constants and a balanced state on an `nx × nz` grid with k = 2.
pub fn setup(nx: usize, nz: usize) -> Setup {
    let constants = Constants::default();
    let params = RunParams { nx, nz, ..RunParams::default() };
    let mesh = Mesh::new(nx, nz, constants.half_width, constants.height).expect("mesh");
    let spaces = Arc::new(Spaces::new(mesh, params.degree).expect("spaces"));
    let state = init::initialise(&spaces, &constants, &PerturbationParams::standard(&constants)).expect("initial state");
    Setup { spaces, constants, params, state }
}
