//! Sequence localization: synthetic training trajectories, the BiLSTM
//! regressor, a k-nearest-neighbour fingerprint baseline and error metrics.

mod bilstm;
mod checkpoint;

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::capture::PacketRecord;
use crate::features::{slot_positions, synchronize, FeatureFrame, FeatureKind, FeatureLayout};

pub use bilstm::{tensor_names, tensor_shapes, Adam, BatchGrad, BilstmModel, N_TENSORS};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, CHECKPOINT_MAGIC};

/// Rejected candidates after which trajectory generation gives up.
pub const MAX_REJECTIONS: usize = 1_000_000;
pub const DEFAULT_TRAJECTORY_LEN: usize = 20;
pub const DEFAULT_TRAJECTORIES: usize = 20_000;
pub const METRICS_HEADER: &str = "location,method,aps,rmse_m,mae_m,train_s,test_us";

#[derive(Debug, Error, PartialEq)]
pub enum LocalizeError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("no survey points")]
    EmptySurvey,
    #[error("trajectory generation stalled after {0} rejected candidates")]
    Stall(usize),
    #[error("length mismatch: {0} predictions vs {1} ground-truth points")]
    LengthMismatch(usize, usize),
    #[error("no training trajectories")]
    NoTrajectories,
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// A surveyed position with its synchronized feature frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub t_ns: i64,
    pub pos_m: (f64, f64),
    pub frame: FeatureFrame,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
    /// The `k` draw that accepted each step; `k_draws[i]` admits
    /// `points[i] → points[i + 1]`.
    pub k_draws: Vec<f64>,
}

/// Joins a device's frames with the ground-truth position of each slot.
/// Frames in slots without truth are dropped.
pub fn survey_points(records: &[PacketRecord], layout: &FeatureLayout) -> Vec<TrajectoryPoint> {
    let truth = slot_positions(records);
    synchronize(records, layout)
        .into_iter()
        .filter_map(|frame| {
            truth.get(&frame.t_ns).map(|&pos_m| TrajectoryPoint {
                t_ns: frame.t_ns,
                pos_m,
                frame,
            })
        })
        .collect()
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Random walks over survey points: from the current point, draw a
/// candidate uniformly and `k ~ N(0, 1 m)`; accept when the candidate is at
/// a different position closer than `|k|`.
pub fn generate_trajectories(
    survey: &[TrajectoryPoint],
    n: usize,
    len: usize,
    seed: u64,
) -> Result<Vec<Trajectory>, LocalizeError> {
    if survey.is_empty() {
        return Err(LocalizeError::EmptySurvey);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut cur = rng.random_range(0..survey.len());
        let mut points = vec![survey[cur].clone()];
        let mut k_draws = Vec::with_capacity(len.saturating_sub(1));
        while points.len() < len {
            let mut rejected = 0;
            loop {
                let cand = rng.random_range(0..survey.len());
                let k: f64 = StandardNormal.sample(&mut rng);
                let d = dist(survey[cand].pos_m, survey[cur].pos_m);
                if d > 0.0 && d < k.abs() {
                    cur = cand;
                    k_draws.push(k);
                    break;
                }
                rejected += 1;
                if rejected >= MAX_REJECTIONS {
                    return Err(LocalizeError::Stall(rejected));
                }
            }
            points.push(survey[cur].clone());
        }
        out.push(Trajectory { points, k_draws });
    }
    Ok(out)
}

/// Maps a raw feature value into roughly `[0, 1]`.
pub fn normalize_feature(kind: FeatureKind, v: f64) -> f64 {
    match kind {
        FeatureKind::WifiRssi | FeatureKind::BleRssi | FeatureKind::BleTx => (v + 101.0) / 101.0,
        FeatureKind::Sqi => (v + 101.0) / 201.0,
        FeatureKind::Tof => v / 200.0,
        FeatureKind::WifiLoss | FeatureKind::BleLoss => v / 121.0,
    }
}

pub fn normalize_frame(layout: &FeatureLayout, frame: &FeatureFrame) -> Vec<f64> {
    layout
        .columns()
        .iter()
        .zip(&frame.values)
        .map(|(c, &v)| normalize_feature(c.kind, v))
        .collect()
}

/// k-NN fingerprint baseline. Distances are Euclidean over normalized
/// values, restricted to the entries the query actually measured (all
/// entries when it measured none). Ties keep survey order.
pub fn knn_predict(
    survey: &[TrajectoryPoint],
    layout: &FeatureLayout,
    frames: &[FeatureFrame],
    k: usize,
) -> Result<Vec<(f64, f64)>, LocalizeError> {
    if survey.is_empty() {
        return Err(LocalizeError::EmptySurvey);
    }
    let k = k.clamp(1, survey.len());
    let norm: Vec<Vec<f64>> = survey.iter().map(|p| normalize_frame(layout, &p.frame)).collect();
    let mut out = Vec::with_capacity(frames.len());
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(survey.len());
    for f in frames {
        if f.values.len() != layout.len() {
            return Err(LocalizeError::Dimension {
                expected: layout.len(),
                got: f.values.len(),
            });
        }
        let q = normalize_frame(layout, f);
        let any = f.mask.iter().any(|&m| m);
        scored.clear();
        for (i, s) in norm.iter().enumerate() {
            let d2: f64 = q
                .iter()
                .zip(s)
                .zip(&f.mask)
                .filter(|(_, &m)| m || !any)
                .map(|((a, b), _)| (a - b) * (a - b))
                .sum();
            scored.push((d2, i));
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let (sx, sy) = scored[..k].iter().fold((0.0, 0.0), |acc, &(_, i)| {
            (acc.0 + survey[i].pos_m.0, acc.1 + survey[i].pos_m.1)
        });
        out.push((sx / k as f64, sy / k as f64));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMetrics {
    pub rmse_m: f64,
    pub mae_m: f64,
    pub errors_m: Vec<f64>,
}

pub fn evaluate(pred: &[(f64, f64)], truth: &[(f64, f64)]) -> Result<LocalizationMetrics, LocalizeError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(LocalizeError::LengthMismatch(pred.len(), truth.len()));
    }
    let errors_m: Vec<f64> = pred.iter().zip(truth).map(|(&p, &t)| dist(p, t)).collect();
    let n = errors_m.len() as f64;
    Ok(LocalizationMetrics {
        rmse_m: (errors_m.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        mae_m: errors_m.iter().sum::<f64>() / n,
        errors_m,
    })
}

/// One row of the metrics report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub location: String,
    pub method: String,
    pub aps: usize,
    pub rmse_m: f64,
    pub mae_m: f64,
    pub train_s: f64,
    pub test_us: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.4},{:.4},{:.3},{:.1}\n",
            r.location, r.method, r.aps, r.rmse_m, r.mae_m, r.train_s, r.test_us
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 1e-3,
            batch: 64,
            seed: 0,
        }
    }
}

/// Affine map between metres and the network's output space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionNorm {
    pub mean: (f64, f64),
    pub scale: f64,
}

impl PositionNorm {
    pub fn fit(points: impl Iterator<Item = (f64, f64)>) -> Self {
        let pts: Vec<(f64, f64)> = points.collect();
        let n = pts.len().max(1) as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let var = pts.iter().map(|p| (p.0 - mx).powi(2) + (p.1 - my).powi(2)).sum::<f64>() / n;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        PositionNorm { mean: (mx, my), scale }
    }

    pub fn to_model(&self, p: (f64, f64)) -> (f64, f64) {
        ((p.0 - self.mean.0) / self.scale, (p.1 - self.mean.1) / self.scale)
    }

    pub fn to_metres(&self, p: (f64, f64)) -> (f64, f64) {
        (p.0 * self.scale + self.mean.0, p.1 * self.scale + self.mean.1)
    }
}

/// A trained per-site model together with everything needed to feed it.
#[derive(Debug, Clone, PartialEq)]
pub struct Localizer {
    pub site_id: String,
    pub layout: FeatureLayout,
    pub position_norm: PositionNorm,
    pub model: BilstmModel,
}

pub struct TrainReport {
    /// Mean per-sequence training loss of each epoch (normalized units).
    pub loss_curve: Vec<f64>,
    pub train_s: f64,
}

fn batch_tensors(localizer: &Localizer, trajectories: &[&Trajectory], t_len: usize) -> (Array2<f64>, Array2<f64>) {
    let batch = trajectories.len();
    let f = localizer.layout.len();
    let mut x = Array2::zeros((t_len * batch, f));
    let mut y = Array2::zeros((t_len * batch, 2));
    for (b, tr) in trajectories.iter().enumerate() {
        for (t, p) in tr.points.iter().enumerate() {
            let r = t * batch + b;
            for (j, v) in normalize_frame(&localizer.layout, &p.frame).into_iter().enumerate() {
                x[[r, j]] = v;
            }
            let (px, py) = localizer.position_norm.to_model(p.pos_m);
            y[[r, 0]] = px;
            y[[r, 1]] = py;
        }
    }
    (x, y)
}

impl Localizer {
    pub fn new(site_id: impl Into<String>, layout: FeatureLayout, position_norm: PositionNorm, seed: u64) -> Self {
        let model = BilstmModel::new(layout.len(), seed);
        Localizer {
            site_id: site_id.into(),
            layout,
            position_norm,
            model,
        }
    }

    /// Adam on mean squared position error. Trajectories must share one
    /// length; each epoch visits them in a seed-determined order.
    pub fn train(&mut self, trajectories: &[Trajectory], cfg: &TrainConfig) -> Result<TrainReport, LocalizeError> {
        let start = Instant::now();
        let Some(first) = trajectories.first() else {
            return Err(LocalizeError::NoTrajectories);
        };
        let t_len = first.points.len();
        for tr in trajectories {
            if tr.points.len() != t_len {
                return Err(LocalizeError::Dimension {
                    expected: t_len,
                    got: tr.points.len(),
                });
            }
            if let Some(p) = tr.points.iter().find(|p| p.frame.values.len() != self.layout.len()) {
                return Err(LocalizeError::Dimension {
                    expected: self.layout.len(),
                    got: p.frame.values.len(),
                });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adam = Adam::new(&self.model, cfg.lr);
        let mut order: Vec<usize> = (0..trajectories.len()).collect();
        let mut per_traj = vec![0.0; trajectories.len()];
        let mut loss_curve = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch.max(1)) {
                let refs: Vec<&Trajectory> = chunk.iter().map(|&i| &trajectories[i]).collect();
                let (x, y) = batch_tensors(self, &refs, t_len);
                let g = self.model.loss_and_grad(&x, &y, t_len, chunk.len())?;
                if !g.loss.is_finite() {
                    return Err(LocalizeError::Diverged { epoch });
                }
                for (&i, &l) in chunk.iter().zip(&g.per_sequence) {
                    per_traj[i] = l;
                }
                adam.update(&mut self.model, &g.grads);
            }
            let loss = per_traj.iter().sum::<f64>() / per_traj.len() as f64;
            loss_curve.push(loss);
        }
        Ok(TrainReport {
            loss_curve,
            train_s: start.elapsed().as_secs_f64(),
        })
    }

    /// Predicts one position per frame. Long sequences are cut into windows
    /// of `window` frames; a short tail is predicted as part of the last
    /// full window.
    pub fn predict(&self, frames: &[FeatureFrame], window: usize) -> Result<Vec<(f64, f64)>, LocalizeError> {
        let window = window.max(1);
        let norm: Vec<Vec<f64>> = frames
            .iter()
            .map(|f| {
                if f.values.len() != self.layout.len() {
                    Err(LocalizeError::Dimension {
                        expected: self.layout.len(),
                        got: f.values.len(),
                    })
                } else {
                    Ok(normalize_frame(&self.layout, f))
                }
            })
            .collect::<Result<_, _>>()?;
        let mut out = Vec::with_capacity(frames.len());
        let mut start = 0;
        while start < norm.len() {
            let end = (start + window).min(norm.len());
            let lo = end.saturating_sub(window).min(start);
            let pred = self.model.forward(&norm[lo..end])?;
            out.extend(pred[start - lo..].iter().map(|&p| self.position_norm.to_metres(p)));
            start = end;
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_checkpoint(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LocalizeError> {
        decode_checkpoint(bytes)
    }
}

/// Loss curve smoothed with a trailing moving average of `window` epochs.
pub fn smooth(curve: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..curve.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            curve[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}
