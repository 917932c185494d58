//! Representation-theoretic substrate: layouts, rotations, real spherical
//! harmonics, Wigner D-matrices and sphere quadrature.

pub mod grid;
pub mod layout;
pub mod rotation;
pub mod sh;
pub mod wigner;

pub use grid::{analysis, make_grid, synthesis, SphereGrid};
pub use layout::{RepLayout, SphericalCoeffs};
pub use rotation::{random_rotation, Rotation};
pub use sh::{cartesian_to_sh, real_sh_all, real_sh_eval, sh_to_cartesian};
pub use wigner::{rotate_coeffs, wigner_block_diag, wigner_d, wigner_d_limited, WignerD, DEFAULT_L_MAX};
