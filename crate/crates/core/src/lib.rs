//! Exact computation engine for quantum cohomology of blowups.
//!
//! Given a smooth projective `X` and a smooth center `Z` of codimension
//! `r >= 2` (desk-scale families: projective spaces, points, lines), this
//! crate reconstructs the genus-zero Gromov-Witten invariants of the blowup
//! `Bl_Z X` from those of `X` and `Z`. The route goes through closed-form
//! initial conditions for the mirror maps, a block fundamental solution for
//! the direct sum of the quantum D-modules of `X` and `r - 1` copies of the
//! one of `Z`, a Birkhoff factorization recovering the decomposition
//! isomorphism, and mirror-map ODEs. An independent WDVV solver provides the
//! verification oracle.
//!
//! All arithmetic is exact over a cyclotomic extension of the rationals.

pub mod coeff;
pub mod cohring;
pub mod fourier;
pub mod gwdata;
pub mod par;
pub mod qdm;
pub mod reconstruct;
pub mod series;

mod error;

pub use error::{Error, Result};
