//! Extraction of FFR and iFR measurements from Portuguese coronary
//! angiography reports, with synthetic corpora, scripted models, constrained
//! decoding, and a three-stage evaluation of the results.

pub mod baseline;
pub mod constrained;
pub mod model;
pub mod corpus;
pub mod eval;
pub mod postprocess;
pub mod prompting;
pub mod record;
pub mod runner;

pub use record::{FixedDecimal, PhysIndex, PhysiologyRecord, Slot, Vessel};
