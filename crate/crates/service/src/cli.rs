//! `tracewave` command line.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use tracewave_core::capture::{classify_devices, filter_mobile, parse_capture, MacAddr, PacketRecord};
use tracewave_core::features::{apply_path_loss, estimate_wifi_tx_power, export_frames, synchronize, FeatureLayout};
use tracewave_core::localize::{metrics_csv, survey_points, Localizer, MetricsRow, TrainConfig};
use tracewave_core::macclust::{bucket_report, cluster, fingerprints_by_mac, MacBucket};
use tracewave_core::simulate::{
    bundled_site, load_site_map, parse_routers, run_survey, ChannelModel, RouterSpec, SiteMap, SurveyConfig,
};
use tracewave_core::tracing::{build_contact_graph, contact_report, format_traces, parse_traces, TraceRecord};

use crate::config::Config;
use crate::pipeline::{compare_on, parse_feature_set, profiles_by_name, simulate_devices, train_localizer, TrainPlan};
use crate::service::{contacts_from_traces, load_config, Service, Window};

#[derive(Parser, Debug)]
#[command(name = "tracewave", version, about = "Passive indoor contact tracing")]
pub struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct SiteArgs {
    /// Bundled site: corridor or room.
    #[arg(long, default_value = "corridor")]
    pub site: String,
    /// Site map file; overrides --site together with --routers.
    #[arg(long, requires = "routers")]
    pub map: Option<PathBuf>,
    #[arg(long, requires = "map")]
    pub routers: Option<PathBuf>,
}

impl SiteArgs {
    fn load(&self) -> anyhow::Result<(SiteMap, Vec<RouterSpec>)> {
        match (&self.map, &self.routers) {
            (Some(m), Some(r)) => {
                let map = load_site_map(m)?;
                let text = std::fs::read_to_string(r).with_context(|| r.display().to_string())?;
                let routers = parse_routers(&text, Some(&map))?;
                Ok((map, routers))
            }
            _ => bundled_site(&self.site).ok_or_else(|| anyhow!("no bundled site `{}`", self.site)),
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a site survey and write its capture CSV.
    Simulate {
        #[command(flatten)]
        site: SiteArgs,
        #[arg(long, default_value_t = 3)]
        trajectories: usize,
        /// Comma-separated reference handsets, one survey each.
        #[arg(long, default_value = "Galaxy A11")]
        profiles: String,
        #[arg(long, default_value_t = 4.0)]
        sigma_db: f64,
        #[arg(long, default_value_t = 1.0)]
        ftm_jitter_ns: f64,
        #[arg(long, default_value_t = 3.0)]
        exponent: f64,
        #[arg(long, default_value_t = 1.0)]
        response_rate: f64,
        #[arg(long)]
        start_ns: Option<i64>,
        /// Also emit router beacons.
        #[arg(long)]
        background: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Store captures through the full pipeline.
    Ingest { captures: Vec<PathBuf> },
    /// Group a capture's mobile MACs by fingerprint.
    Cluster {
        capture: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synchronized feature frames of a capture.
    Extract {
        capture: PathBuf,
        #[command(flatten)]
        site: SiteArgs,
        /// Comma list of wifi_rssi, sqi, ble, tof.
        #[arg(long, default_value = "wifi_rssi,sqi,ble,tof")]
        features: String,
        /// Only the device bucket containing this MAC.
        #[arg(long)]
        mac: Option<MacAddr>,
        /// Replace RSSI columns with path loss.
        #[arg(long)]
        path_loss: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a BiLSTM localizer from a survey and save a checkpoint.
    Train {
        #[command(flatten)]
        site: SiteArgs,
        /// Survey capture with ground truth; simulated from --seed if absent,
        /// holding out its last trajectory for testing.
        #[arg(long)]
        survey: Option<PathBuf>,
        /// Held-out capture with ground truth.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, default_value = "wifi_rssi,sqi,ble,tof")]
        features: String,
        #[arg(long, default_value_t = 2_000)]
        trajectories: usize,
        #[arg(long, default_value_t = 20)]
        len: usize,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long)]
        out: PathBuf,
        /// Metrics CSV destination; printed when absent.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Predict positions for every device in a capture.
    Localize {
        capture: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 20)]
        window: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Contact report of one key, from a traces CSV or the store.
    Trace {
        /// Traces CSV; the configured store is read when absent.
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long, required_unless_present = "export")]
        key: Option<String>,
        /// Window start, seconds.
        #[arg(long)]
        start: Option<f64>,
        #[arg(long)]
        end: Option<f64>,
        #[arg(long)]
        max_distance: Option<f64>,
        #[arg(long)]
        resolution_s: Option<f64>,
        /// Also print the contact graph to this depth.
        #[arg(long, default_value_t = 0)]
        graph_depth: usize,
        /// Write the traces instead of a report.
        #[arg(long)]
        export: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API and console.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| p.display().to_string()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn mobile_records(path: &Path) -> anyhow::Result<Vec<PacketRecord>> {
    let records = parse_capture(path).with_context(|| path.display().to_string())?;
    Ok(filter_mobile(&records, &classify_devices(&records)))
}

/// Fingerprint clusters followed by singletons for MACs without model info.
fn device_buckets(records: &[PacketRecord]) -> anyhow::Result<Vec<MacBucket>> {
    let (prints, unprintable) = fingerprints_by_mac(records);
    let mut buckets = cluster(&prints)?;
    buckets.extend(unprintable.into_iter().map(MacBucket::singleton));
    Ok(buckets)
}

fn only(records: &[PacketRecord], macs: &BTreeSet<MacAddr>) -> Vec<PacketRecord> {
    records.iter().filter(|r| macs.contains(&r.src_mac)).cloned().collect()
}

pub fn run<I, T>(args: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::parse_from(args);
    let config = || load_config(cli.config.as_deref());
    match cli.command {
        Command::Simulate {
            site,
            trajectories,
            profiles,
            sigma_db,
            ftm_jitter_ns,
            exponent,
            response_rate,
            start_ns,
            background,
            out,
        } => {
            let (map, routers) = site.load()?;
            let names: Vec<String> = profiles.split(',').map(str::to_string).collect();
            let profiles = profiles_by_name(&names).map_err(|e| anyhow!(e))?;
            let defaults = SurveyConfig::default();
            let base = SurveyConfig {
                channel: ChannelModel {
                    shadow_sigma_db: sigma_db,
                    ftm_jitter_sigma_ns: ftm_jitter_ns,
                    exponent_n: exponent,
                    response_rate,
                    ..ChannelModel::default()
                },
                seed: cli.seed,
                n_trajectories: trajectories,
                start_ns: start_ns.unwrap_or(defaults.start_ns),
                background,
                ..defaults
            };
            let records = simulate_devices(&map, &routers, &base, &profiles)?;
            emit(out.as_deref(), &tracewave_core::capture::serialize_capture(&records))
        }
        Command::Ingest { captures } => {
            let svc = Service::open_env(config()?)?;
            for p in captures {
                let bytes = std::fs::read(&p).with_context(|| p.display().to_string())?;
                let (summary, fresh) = svc.ingest(&bytes)?;
                if !fresh {
                    log::info!("{} was already ingested as job {}", p.display(), summary.job_id);
                }
                println!("{}", serde_json::to_string(&summary)?);
            }
            Ok(())
        }
        Command::Cluster { capture, out } => {
            let buckets = device_buckets(&mobile_records(&capture)?)?;
            emit(out.as_deref(), &bucket_report(&buckets))
        }
        Command::Extract {
            capture,
            site,
            features,
            mac,
            path_loss,
            out,
        } => {
            let (_, routers) = site.load()?;
            let set = parse_feature_set(&features).map_err(|e| anyhow!(e))?;
            let layout = FeatureLayout::for_routers(&routers, set);
            let mut records = mobile_records(&capture)?;
            if let Some(mac) = mac {
                let bucket = device_buckets(&records)?
                    .into_iter()
                    .find(|b| b.contains(&mac))
                    .ok_or_else(|| anyhow!("no mobile device with MAC {mac}"))?;
                records = only(&records, &bucket.macs);
            }
            let frames = synchronize(&records, &layout);
            let text = if path_loss {
                let tx = estimate_wifi_tx_power("device", &records).ok();
                let (pl_layout, pl_frames) = apply_path_loss(&frames, &layout, tx.as_ref());
                export_frames(&pl_frames, &pl_layout)
            } else {
                export_frames(&frames, &layout)
            };
            emit(out.as_deref(), &text)
        }
        Command::Train {
            site,
            survey,
            test,
            features,
            trajectories,
            len,
            epochs,
            lr,
            batch,
            out,
            metrics,
        } => {
            let (map, routers) = site.load()?;
            let set = parse_feature_set(&features).map_err(|e| anyhow!(e))?;
            let layout = FeatureLayout::for_routers(&routers, set);
            let (train_pts, test_pts) = match survey {
                Some(p) => {
                    let train = survey_points(&mobile_records(&p)?, &layout);
                    let test = match &test {
                        Some(t) => survey_points(&mobile_records(t)?, &layout),
                        None => Vec::new(),
                    };
                    (train, test)
                }
                None => {
                    let cfg = SurveyConfig {
                        seed: cli.seed,
                        ..SurveyConfig::default()
                    };
                    let set = run_survey(&map, &routers, &cfg)?;
                    let (last, rest) = set.trajectories.split_last().ok_or_else(|| anyhow!("empty survey"))?;
                    let train = rest.iter().flat_map(|t| survey_points(&t.records, &layout)).collect();
                    (train, survey_points(&last.records, &layout))
                }
            };
            let plan = TrainPlan {
                n_trajectories: trajectories,
                trajectory_len: len,
                generation_seed: cli.seed.wrapping_add(7),
                model_seed: cli.seed.wrapping_add(3),
                train: TrainConfig {
                    epochs,
                    lr,
                    batch,
                    seed: cli.seed,
                },
            };
            let (loc, report) = train_localizer(&map.site_id, &layout, &train_pts, &plan)?;
            std::fs::write(&out, loc.to_bytes()).with_context(|| out.display().to_string())?;
            log::info!(
                "trained {} epochs in {:.1} s, final loss {:.5}",
                report.loss_curve.len(),
                report.train_s,
                report.loss_curve.last().copied().unwrap_or(f64::NAN)
            );
            if test_pts.is_empty() {
                return Ok(());
            }
            let cmp = compare_on(&loc, &train_pts, &test_pts, len)?;
            let row = |method: &str, m: &tracewave_core::localize::LocalizationMetrics, train_s, test_us| MetricsRow {
                location: map.site_id.clone(),
                method: method.into(),
                aps: routers.len(),
                rmse_m: m.rmse_m,
                mae_m: m.mae_m,
                train_s,
                test_us,
            };
            let rows = [
                row("bilstm", &cmp.bilstm, report.train_s, cmp.test_us),
                row("knn3", &cmp.knn, 0.0, 0.0),
            ];
            emit(metrics.as_deref(), &metrics_csv(&rows))
        }
        Command::Localize {
            capture,
            model,
            window,
            out,
        } => {
            let bytes = std::fs::read(&model).with_context(|| model.display().to_string())?;
            let loc = Localizer::from_bytes(&bytes)?;
            let records = mobile_records(&capture)?;
            let mut text = String::from("bucket_id,t_ns,x_m,y_m\n");
            for (id, b) in device_buckets(&records)?.iter().enumerate() {
                let frames = synchronize(&only(&records, &b.macs), &loc.layout);
                for (f, (x, y)) in frames.iter().zip(loc.predict(&frames, window)?) {
                    let _ = writeln!(text, "{id},{},{x:.4},{y:.4}", f.t_ns);
                }
            }
            emit(out.as_deref(), &text)
        }
        Command::Trace {
            traces,
            key,
            start,
            end,
            max_distance,
            resolution_s,
            graph_depth,
            export,
            out,
        } => {
            let cfg: Config = config()?;
            let window = Window {
                start_s: start,
                end_s: end,
            };
            let traces: Vec<TraceRecord> = match &traces {
                Some(p) => {
                    let text = std::fs::read_to_string(p).with_context(|| p.display().to_string())?;
                    parse_traces(&text)?
                }
                None => Service::open_env(cfg.clone())?.export_traces(window)?,
            };
            if export {
                return emit(out.as_deref(), &format_traces(&traces));
            }
            let key = key.expect("clap enforces --key");
            let max_distance = max_distance.unwrap_or(cfg.max_distance);
            let resolution = resolution_s.unwrap_or(cfg.time_resolution_s);
            let rows = contacts_from_traces(&traces, &key, window, max_distance, resolution);
            let mut text = contact_report(&rows);
            if graph_depth > 0 {
                let keys: BTreeSet<String> = traces.iter().map(|t| t.key.clone()).collect();
                let all: Vec<_> = keys
                    .iter()
                    .flat_map(|k| contacts_from_traces(&traces, k, window, max_distance, resolution))
                    .collect();
                let graph = build_contact_graph(&BTreeSet::from([key]), &all, graph_depth);
                text.push_str("\nfrom,to,site_id,contact_duration\n");
                for e in &graph.edges {
                    let _ = writeln!(
                        text,
                        "{},{},{},{}",
                        e.from, e.to, e.history.site_id, e.history.contact_duration
                    );
                }
            }
            emit(out.as_deref(), &text)
        }
        Command::Serve { bind, static_dir } => {
            let mut cfg = config()?;
            if let Some(d) = static_dir {
                cfg.static_dir = Some(d);
            }
            let bind = bind.unwrap_or_else(|| cfg.bind.clone());
            let svc = Arc::new(Service::open_env(cfg)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::http::serve(svc, &bind))?;
            Ok(())
        }
    }
}
