#![allow(dead_code)]

use std::path::Path;

use tracewave::pipeline::{profiles_by_name, simulate_devices};
use tracewave::{Config, Service};
use tracewave_core::capture::serialize_capture;
use tracewave_core::simulate::{bundled_site, SurveyConfig};

pub const KEY: [u8; 32] = [0x5a; 32];
pub const KEY_HEX: &str = "5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a";

pub const ALL_HANDSETS: [&str; 7] = [
    "Galaxy S4",
    "HTC One X",
    "Galaxy S6",
    "Galaxy A11",
    "iPhone SE",
    "iPhone X",
    "PinePhone",
];

/// Corridor capture of the named handsets surveying the same days.
pub fn capture(handsets: &[&str], trajectories: usize, seed: u64, background: bool) -> String {
    let (map, routers) = bundled_site("corridor").unwrap();
    let names: Vec<String> = handsets.iter().map(|s| s.to_string()).collect();
    let base = SurveyConfig {
        seed,
        n_trajectories: trajectories,
        background,
        ..SurveyConfig::default()
    };
    let records = simulate_devices(&map, &routers, &base, &profiles_by_name(&names).unwrap()).unwrap();
    serialize_capture(&records)
}

pub fn config(dir: &Path) -> Config {
    Config {
        store: dir.join("store.log"),
        ..Config::default()
    }
}

pub fn open(dir: &Path) -> Service {
    Service::open(config(dir), &KEY).unwrap()
}
