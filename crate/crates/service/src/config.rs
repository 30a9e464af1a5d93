//! Flat `key = value` configuration. `#` starts a comment line.

use std::path::{Path, PathBuf};

use tracewave_core::tracing::{DEFAULT_MAX_DISTANCE, DEFAULT_TIME_RESOLUTION_S};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("reading config: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub store: PathBuf,
    /// Checkpoints used at ingest, at most one per site.
    pub model_checkpoints: Vec<PathBuf>,
    /// Captures with ground truth that back the k-NN fallback.
    pub survey_captures: Vec<PathBuf>,
    /// Extra sites next to the bundled ones, as (map, routers) pairs.
    pub sites: Vec<(PathBuf, PathBuf)>,
    pub bind: String,
    pub bearer_token: Option<String>,
    pub static_dir: Option<PathBuf>,
    pub max_distance: f64,
    pub time_resolution_s: f64,
    /// Silence longer than this splits a device's samples into separate paths.
    pub path_gap_s: f64,
    pub window: usize,
    pub knn_k: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            store: PathBuf::from("tracewave.store"),
            model_checkpoints: Vec::new(),
            survey_captures: Vec::new(),
            sites: Vec::new(),
            bind: "127.0.0.1:8080".into(),
            bearer_token: None,
            static_dir: None,
            max_distance: DEFAULT_MAX_DISTANCE,
            time_resolution_s: DEFAULT_TIME_RESOLUTION_S,
            path_gap_s: 600.0,
            window: 20,
            knn_k: 3,
        }
    }
}

fn list(v: &str) -> Vec<PathBuf> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(PathBuf::from)
        .collect()
}

impl Config {
    /// Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Config, ConfigError> {
        let mut cfg = Config::default();
        let mut site_maps = Vec::new();
        let mut site_routers = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            let err = |msg: String| ConfigError::Parse { line, msg };
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{s}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| -> Result<f64, ConfigError> {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite() && *x > 0.0)
                    .ok_or_else(|| err(format!("{k} must be a positive number")))
            };
            let count = |v: &str| -> Result<usize, ConfigError> {
                v.parse::<usize>()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| err(format!("{k} must be a positive integer")))
            };
            let abs = |p: PathBuf| if p.is_relative() { base.join(p) } else { p };
            match k {
                "store" => cfg.store = abs(PathBuf::from(v)),
                "model_checkpoint" => cfg.model_checkpoints = list(v).into_iter().map(abs).collect(),
                "survey_capture" => cfg.survey_captures = list(v).into_iter().map(abs).collect(),
                "site_map" => site_maps = list(v).into_iter().map(abs).collect(),
                "routers" => site_routers = list(v).into_iter().map(abs).collect(),
                "bind" => cfg.bind = v.to_string(),
                "bearer_token" => cfg.bearer_token = Some(v.to_string()).filter(|t| !t.is_empty()),
                "static_dir" => cfg.static_dir = Some(abs(PathBuf::from(v))),
                "max_distance" => cfg.max_distance = num(v)?,
                "time_resolution_s" => cfg.time_resolution_s = num(v)?,
                "path_gap_s" => cfg.path_gap_s = num(v)?,
                "window" => cfg.window = count(v)?,
                "knn_k" => cfg.knn_k = count(v)?,
                _ => return Err(err(format!("unknown key `{k}`"))),
            }
        }
        if site_maps.len() != site_routers.len() {
            return Err(ConfigError::Parse {
                line: 0,
                msg: "site_map and routers must list the same number of files".into(),
            });
        }
        cfg.sites = site_maps.into_iter().zip(site_routers).collect();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Config::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}
