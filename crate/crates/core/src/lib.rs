//! Software model of an MQ135/DHT11 CO2 monitor and the telemetry backend
//! it reports to.
//!
//! - [`sensor`]: MQ135 transfer function, correction, calibration, DHT11 quantization
//! - [`alerting`]: high-CO2 alarm state machine and LCD frames
//! - [`sim`]: virtual devices running the firmware loop against a scenario
//! - [`ingest`]: ThingSpeak-compatible update/feed service and per-channel alert log
//! - [`storage`]: append-only JSON-lines channel store

pub mod alerting;
pub mod ingest;
pub mod sensor;
pub mod sim;
pub mod storage;
pub mod timefmt;
