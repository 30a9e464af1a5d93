use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use tracewave_core::features::*;
use tracewave_core::localize::*;
use tracewave_core::simulate::*;

const ANCHORS: [(f64, f64); 4] = [(0.0, 0.0), (10.0, 0.0), (0.0, 5.0), (10.0, 5.0)];

fn toy_layout() -> FeatureLayout {
    FeatureLayout::new(
        (0..4)
            .map(|i| Column {
                router_id: format!("A{i}"),
                kind: FeatureKind::WifiRssi,
            })
            .collect(),
    )
}

/// Grid of points with noiseless log-distance RSSI to four anchors.
fn toy_survey(step: f64) -> Vec<TrajectoryPoint> {
    let mut out = Vec::new();
    let (nx, ny) = ((10.0 / step) as usize, (5.0 / step) as usize);
    for j in 0..=ny {
        for i in 0..=nx {
            let p = (i as f64 * step, j as f64 * step);
            let values: Vec<f64> = ANCHORS
                .iter()
                .map(|a| -40.0 - 30.0 * (p.0 - a.0).hypot(p.1 - a.1).max(0.1).log10())
                .collect();
            let t = out.len() as i64 * 1_000_000_000;
            out.push(TrajectoryPoint {
                t_ns: t,
                pos_m: p,
                frame: FeatureFrame {
                    t_ns: t,
                    mask: vec![true; values.len()],
                    values,
                },
            });
        }
    }
    out
}

fn ks_statistic(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// Direct rejection sampler with its own generator.
fn oracle_steps(pts: &[(f64, f64)], steps: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(steps);
    let mut cur = rng.random_range(0..pts.len());
    let mut since_start = 0;
    while out.len() < steps {
        if since_start == 19 {
            cur = rng.random_range(0..pts.len());
            since_start = 0;
        }
        loop {
            let c = rng.random_range(0..pts.len());
            let k: f64 = StandardNormal.sample(&mut rng);
            let d = (pts[c].0 - pts[cur].0).hypot(pts[c].1 - pts[cur].1);
            if d > 0.0 && d < k.abs() {
                out.push(d);
                cur = c;
                break;
            }
        }
        since_start += 1;
    }
    out
}

#[test]
fn step_lengths_match_rejection_oracle() {
    let survey = toy_survey(0.5);
    let trajs = generate_trajectories(&survey, 527, 20, 99).unwrap();
    let steps: Vec<f64> = trajs
        .iter()
        .flat_map(|t| {
            t.points
                .windows(2)
                .map(|w| (w[0].pos_m.0 - w[1].pos_m.0).hypot(w[0].pos_m.1 - w[1].pos_m.1))
        })
        .collect();
    assert!(steps.len() >= 10_000);
    let pts: Vec<(f64, f64)> = survey.iter().map(|p| p.pos_m).collect();
    let oracle = oracle_steps(&pts, steps.len(), 12345);
    let d = ks_statistic(steps, oracle);
    assert!(d < 0.05, "KS statistic {d}");
}

fn toy_localizer(seed: u64, survey: &[TrajectoryPoint]) -> Localizer {
    Localizer::new(
        "toy",
        toy_layout(),
        PositionNorm::fit(survey.iter().map(|p| p.pos_m)),
        seed,
    )
}

#[test]
fn overfits_a_single_trajectory() {
    let survey = toy_survey(0.5);
    let one = generate_trajectories(&survey, 1, 20, 5).unwrap().remove(0);
    let data = vec![one.clone(); 256];
    let mut loc = toy_localizer(1, &survey);
    let cfg = TrainConfig {
        epochs: 200,
        lr: 3e-3,
        batch: 64,
        seed: 2,
    };
    loc.train(&data, &cfg).unwrap();
    let frames: Vec<FeatureFrame> = one.points.iter().map(|p| p.frame.clone()).collect();
    let truth: Vec<(f64, f64)> = one.points.iter().map(|p| p.pos_m).collect();
    let m = evaluate(&loc.predict(&frames, 20).unwrap(), &truth).unwrap();
    assert!(m.rmse_m < 0.1, "rmse {}", m.rmse_m);
}

#[test]
fn training_is_deterministic_and_loss_decreases() {
    let survey = toy_survey(0.5);
    let data = generate_trajectories(&survey, 256, 20, 8).unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        seed: 4,
        ..TrainConfig::default()
    };
    let mut a = toy_localizer(3, &survey);
    let ra = a.train(&data, &cfg).unwrap();
    let mut b = toy_localizer(3, &survey);
    let rb = b.train(&data, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra.loss_curve, rb.loss_curve);
    let s = smooth(&ra.loss_curve, 5);
    assert!(s.windows(2).all(|w| w[1] <= w[0]), "{s:?}");
}

#[test]
fn zero_learning_rate_keeps_loss_constant() {
    let survey = toy_survey(1.0);
    let data = generate_trajectories(&survey, 100, 20, 1).unwrap();
    let mut loc = toy_localizer(6, &survey);
    let before = loc.clone();
    let cfg = TrainConfig {
        epochs: 4,
        lr: 0.0,
        ..TrainConfig::default()
    };
    let r = loc.train(&data, &cfg).unwrap();
    assert_eq!(loc, before);
    for l in &r.loss_curve {
        assert!((l - r.loss_curve[0]).abs() <= 1e-12 * r.loss_curve[0]);
    }
}

#[test]
fn knn_on_noiseless_corridor() {
    let (map, routers) = bundled_site("corridor").unwrap();
    let cfg = SurveyConfig {
        channel: ChannelModel {
            shadow_sigma_db: 0.0,
            ftm_jitter_sigma_ns: 0.0,
            ..ChannelModel::default()
        },
        seed: 2,
        ..SurveyConfig::default()
    };
    let set = run_survey(&map, &routers, &cfg).unwrap();
    let layout = FeatureLayout::for_routers(
        &routers,
        FeatureSet {
            wifi_rssi: true,
            sqi: false,
            ble: false,
            tof: true,
        },
    );
    let survey: Vec<TrajectoryPoint> = set.trajectories[..2]
        .iter()
        .flat_map(|t| survey_points(&t.records, &layout))
        .collect();
    let test = survey_points(&set.trajectories[2].records, &layout);
    let frames: Vec<FeatureFrame> = test.iter().map(|p| p.frame.clone()).collect();
    let truth: Vec<(f64, f64)> = test.iter().map(|p| p.pos_m).collect();
    let m = evaluate(&knn_predict(&survey, &layout, &frames, 3).unwrap(), &truth).unwrap();
    assert!(m.rmse_m < 1.0, "rmse {}", m.rmse_m);
}

#[test]
fn checkpoint_preserves_predictions() {
    let survey = toy_survey(1.0);
    let loc = toy_localizer(10, &survey);
    let back = Localizer::from_bytes(&loc.to_bytes()).unwrap();
    let frames: Vec<FeatureFrame> = survey.iter().map(|p| p.frame.clone()).collect();
    assert_eq!(loc.predict(&frames, 20).unwrap(), back.predict(&frames, 20).unwrap());
}

proptest! {
    #[test]
    fn rmse_at_least_mae(pairs in prop::collection::vec(((-50.0f64..50.0, -50.0f64..50.0), (-50.0f64..50.0, -50.0f64..50.0)), 1..100)) {
        let (pred, truth): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let m = evaluate(&pred, &truth).unwrap();
        prop_assert!(m.rmse_m + 1e-12 >= m.mae_m && m.mae_m >= 0.0);
    }
}
