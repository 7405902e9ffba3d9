//! Simulation-based adaptation of motorway speed prediction models.
//!
//! When an incident distress signal arrives, a fleet of what-if
//! microsimulations is launched over the unobserved incident parameters
//! (demand level, block position, blocked lanes). The synthetic data they
//! produce is used to fit an incident-conditions model that replaces the
//! ordinary-conditions model for the duration of the incident.

pub mod corridor;
pub mod error;
pub mod features;
pub mod metrics;
pub mod microsim;
pub mod models;
pub mod orchestrator;

pub use error::{Error, Result};
