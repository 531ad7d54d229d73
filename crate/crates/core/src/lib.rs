//! Vertical-slice Euler-Boussinesq model of nonlinear Eady waves on
//! compatible finite element spaces.

pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod forms;
pub mod init;
pub mod linalg;
pub mod mesh;
pub mod quadrature;
pub mod spaces;
pub mod stepper;

pub use diagnostics::{DiagnosticRecord, Diagnostics};
pub use error::{Error, Result};
pub use experiment::{Event, Experiment, Outcome};
pub use forms::Constants;
pub use init::PerturbationParams;
pub use mesh::{Facet, Mesh, Side};
pub use spaces::{Family, Field, FunctionSpace, SpaceId, Spaces};
pub use stepper::{RunParams, State, Stepper};
