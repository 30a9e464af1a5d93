//! Offline building blocks shared by the CLI and the acceptance harness.

use std::time::Instant;

use tracewave_core::capture::{sort_chronological, PacketRecord};
use tracewave_core::features::{FeatureFrame, FeatureLayout, FeatureSet};
use tracewave_core::localize::{
    evaluate, generate_trajectories, knn_predict, LocalizationMetrics, LocalizeError, Localizer, PositionNorm,
    TrainConfig, TrainReport, TrajectoryPoint, DEFAULT_TRAJECTORY_LEN,
};
use tracewave_core::simulate::{
    reference_profiles, run_survey, DeviceProfile, RouterSpec, SimError, SiteMap, SurveyConfig,
};

/// Looks up reference handsets by name, case-insensitively.
pub fn profiles_by_name(names: &[String]) -> Result<Vec<DeviceProfile>, String> {
    let all = reference_profiles();
    names
        .iter()
        .map(|n| {
            all.iter()
                .find(|p| p.name.eq_ignore_ascii_case(n.trim()))
                .cloned()
                .ok_or_else(|| {
                    let known: Vec<&str> = all.iter().map(|p| p.name.as_str()).collect();
                    format!("unknown handset `{n}`; known: {}", known.join(", "))
                })
        })
        .collect()
}

/// One survey per handset over the same days, merged into one
/// chronological capture.
pub fn simulate_devices(
    map: &SiteMap,
    routers: &[RouterSpec],
    base: &SurveyConfig,
    profiles: &[DeviceProfile],
) -> Result<Vec<PacketRecord>, SimError> {
    let mut records = Vec::new();
    for (i, p) in profiles.iter().enumerate() {
        let cfg = SurveyConfig {
            profile: p.clone(),
            seed: base.seed.wrapping_add((i as u64).wrapping_mul(0x2545_f491_4f6c_dd1d)),
            ..base.clone()
        };
        let set = run_survey(map, routers, &cfg)?;
        records.extend(set.trajectories.into_iter().flat_map(|t| t.records));
    }
    Ok(sort_chronological(records))
}

/// Feature families fed to the localizer, from a comma list of
/// `wifi_rssi`, `sqi`, `ble`, `tof`.
pub fn parse_feature_set(s: &str) -> Result<FeatureSet, String> {
    let mut set = FeatureSet {
        wifi_rssi: false,
        sqi: false,
        ble: false,
        tof: false,
    };
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "wifi_rssi" => set.wifi_rssi = true,
            "sqi" => set.sqi = true,
            "ble" => set.ble = true,
            "tof" => set.tof = true,
            _ => return Err(format!("unknown feature family `{part}`")),
        }
    }
    Ok(set)
}

#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub n_trajectories: usize,
    pub trajectory_len: usize,
    pub generation_seed: u64,
    pub model_seed: u64,
    pub train: TrainConfig,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            n_trajectories: 2_000,
            trajectory_len: DEFAULT_TRAJECTORY_LEN,
            generation_seed: 7,
            model_seed: 3,
            train: TrainConfig::default(),
        }
    }
}

/// Generates synthetic trajectories from survey points and trains a fresh
/// localizer on them.
pub fn train_localizer(
    site_id: &str,
    layout: &FeatureLayout,
    survey: &[TrajectoryPoint],
    plan: &TrainPlan,
) -> Result<(Localizer, TrainReport), LocalizeError> {
    let trajectories = generate_trajectories(survey, plan.n_trajectories, plan.trajectory_len, plan.generation_seed)?;
    let norm = PositionNorm::fit(survey.iter().map(|p| p.pos_m));
    let mut loc = Localizer::new(site_id, layout.clone(), norm, plan.model_seed);
    let report = loc.train(&trajectories, &plan.train)?;
    Ok((loc, report))
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub bilstm: LocalizationMetrics,
    pub knn: LocalizationMetrics,
    /// Mean BiLSTM inference time per frame, µs.
    pub test_us: f64,
}

/// Scores a localizer and the 3-NN baseline on held-out points.
pub fn compare_on(
    loc: &Localizer,
    survey: &[TrajectoryPoint],
    test: &[TrajectoryPoint],
    window: usize,
) -> Result<Comparison, LocalizeError> {
    let frames: Vec<FeatureFrame> = test.iter().map(|p| p.frame.clone()).collect();
    let truth: Vec<(f64, f64)> = test.iter().map(|p| p.pos_m).collect();
    let t = Instant::now();
    let pred = loc.predict(&frames, window)?;
    let test_us = t.elapsed().as_secs_f64() * 1e6 / frames.len().max(1) as f64;
    Ok(Comparison {
        bilstm: evaluate(&pred, &truth)?,
        knn: evaluate(&knn_predict(survey, &loc.layout, &frames, 3)?, &truth)?,
        test_us,
    })
}
