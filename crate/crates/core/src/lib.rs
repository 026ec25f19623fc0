#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod cgo;
pub mod dtn;
pub mod faddeev;
pub mod forward;
pub mod io;
pub mod mesh;
pub mod phantom;
pub mod pipeline;
pub mod scattering;
pub mod sigma;
pub mod sphere;

pub use error::{CgoError, Result};
