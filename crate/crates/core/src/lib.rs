//! Desk-scale laboratory for representation-level knowledge editing.
//!
//! A toy decoder-only transformer is edited by rewriting selected hidden
//! representations with low-rank subspace operators: a linear form that
//! applies one update to every selected representation, and a gated form
//! that weights each subspace basis per input. The crate trains these
//! operators with a teacher-forcing loss plus load-balancing and locality
//! regularizers, scores edits by reliability / generality / locality /
//! portability under single, continual, and batched protocols, and
//! numerically verifies the editing-locality trade-off bound for the linear
//! operator, inequality by inequality.

pub mod editing;
pub mod error;
pub mod evaluation;
pub mod interventions;
pub mod knowledge;
pub mod numerics;
pub mod objectives;
pub mod theory;
pub mod tinylm;

pub use error::{Error, Result};
