//! Smart-city atomic services: an NGSI context broker subset, data-model
//! validation, JSON/NGSI/NGSI-LD transformers, an NGSI to GTFS/GTFS-RT bridge,
//! an earliest-arrival transit router, a per-entity time-series estimator, a
//! deterministic synthetic city generator and a scenario harness.

pub mod broker;
pub mod clock;
pub mod data_models;
pub mod estimator;
pub mod feedgen;
pub mod gtfs;
pub mod harness;
pub mod net;
pub mod ngsi;
pub mod routing;
pub mod transformers;

pub use broker::{Broker, BrokerError, ContextBroker, Query};
pub use clock::{Clock, SimClock, SystemClock};
pub use ngsi::{Attribute, NgsiEntity};
