//! Detection, classification, augmentation and evaluation of rodent
//! ultrasonic vocalizations.

pub mod audio;
pub mod callsim;
pub mod classifier;
pub mod cli;
pub mod datastore;
pub mod detection;
pub mod metrics;
pub mod pipeline;
pub mod server;
pub mod spectrogram;
pub mod synthgen;
