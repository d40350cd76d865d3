//! Sequential locally optimal experimental design for nonlinear parametric
//! models, with a binary vapor-liquid-equilibrium case study.

pub mod assessment;
pub mod batch;
pub mod campaign;
pub mod criteria;
pub mod dual;
pub mod estimation;
pub mod io;
pub mod error;
pub mod linalg;
pub mod model;
pub mod reference;
pub mod solver;
pub mod vle;

pub use error::{Error, Result};

// Guide chapters, compiled so their snippets stay current.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/model.md")]
    struct Model;
    #[doc = include_str!("../../../book/src/estimation.md")]
    struct Estimation;
    #[doc = include_str!("../../../book/src/criteria.md")]
    struct Criteria;
    #[doc = include_str!("../../../book/src/solver.md")]
    struct Solver;
    #[doc = include_str!("../../../book/src/batch.md")]
    struct Batch;
    #[doc = include_str!("../../../book/src/campaign.md")]
    struct Campaign;
    #[doc = include_str!("../../../book/src/assessment.md")]
    struct Assessment;
}
