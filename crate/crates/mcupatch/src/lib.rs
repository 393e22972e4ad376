//! File formats, reports and the command-line front end for
//! [`mcupatch_core`].

pub mod cli;
pub mod fitness_table;
pub mod network_file;
pub mod report;
pub mod weights_file;

pub use network_file::{load_network, network_to_json, parse_network, resolve_network, save_network};
