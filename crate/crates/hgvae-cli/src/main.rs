//! Command-line front end: synthesize data, train either model, generate
//! motions, impute occlusions, score degradation grids, render result
//! curves, and inspect checkpoints.
//!
//! Exit codes: 0 success, 2 usage (clap), 3 I/O, 4 file format,
//! 5 invalid argument or shape, 6 non-finite numerics.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use hgvae::checkpoint::{self, Checkpoint};
use hgvae::config::{model_config_from_kv, model_config_to_kv, KvMap, TrainConfig};
use hgvae::data::{
    self, compute_feature_means, prepare, read_dataset, synthesize_motions, write_dataset,
    MotionDataset, SkeletonSpec,
};
use hgvae::dct::DctBasis;
use hgvae::impute::{
    anomaly_curve, curve_csv, make_mask, map_impute, masked_mse, mean_impute, ImputeConfig,
};
use hgvae::metrics::{plot_svg, Series};
use hgvae::model::{HgVae, ScoreObjective};
use hgvae::tensor::Real;
use hgvae::train::train;
use hgvae::{baseline::BaselineVae, Error};

#[derive(Parser)]
#[command(
    name = "hgvae",
    version,
    about = "hierarchical graph-convolutional VAE for motion data"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    Hgvae,
    VaeBaseline,
}

#[derive(Clone, Copy, ValueEnum)]
enum Objective {
    LogJoint,
    Elbo,
    PosteriorDensity,
}

impl From<Objective> for ScoreObjective {
    fn from(o: Objective) -> Self {
        match o {
            Objective::LogJoint => ScoreObjective::LogJoint,
            Objective::Elbo => ScoreObjective::Elbo,
            Objective::PosteriorDensity => ScoreObjective::PosteriorDensity,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    Score,
    MseReduction,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a labeled motion dataset (HGMD file).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 50)]
        timepoints: usize,
        /// Skeleton definition file (defaults to the built-in 18-joint figure).
        #[arg(long)]
        skeleton: Option<PathBuf>,
    },
    /// Train a model on an HGMD dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// key = value config file (training schedule and model shape).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model to train; a `model` key in the config file is used when
        /// the flag is absent.
        #[arg(long, value_enum)]
        model: Option<ModelKind>,
        #[arg(long)]
        out_checkpoint: PathBuf,
        /// Per-epoch CSV log path.
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        clip_norm: Option<f64>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Train with class conditioning (one-hot on the top latent).
        #[arg(long)]
        conditional: bool,
    },
    /// Sample motions from a trained hierarchical checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output HGMD file of generated sequences.
        #[arg(long)]
        out: PathBuf,
    },
    /// Occlude, mean-impute and MAP-impute a dataset; per-datapoint CSV.
    Impute {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Number of occluded (node, timepoint) cells per datapoint.
        #[arg(long)]
        occlusions: usize,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        /// Ascent learning rate (default 1.0 hierarchical, 100.0 baseline).
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_csv: PathBuf,
        #[arg(long, value_enum, default_value_t = Objective::LogJoint)]
        objective: Objective,
        /// Dataset supplying the imputation means (defaults to --data).
        #[arg(long)]
        means_data: Option<PathBuf>,
        #[arg(long, default_value_t = 800)]
        batch_size: usize,
    },
    /// Score a dataset across an occlusion grid; aggregated CSV.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated occlusion counts.
        #[arg(long, default_value = "0,13,27,135,270,1350")]
        occlusion_grid: String,
        #[arg(long)]
        out_csv: PathBuf,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Objective::LogJoint)]
        objective: Objective,
        #[arg(long)]
        means_data: Option<PathBuf>,
        #[arg(long, default_value_t = 800)]
        batch_size: usize,
    },
    /// Render an SVG curve from a score or impute CSV.
    Eval {
        #[arg(long)]
        pred_csv: PathBuf,
        #[arg(long)]
        out_svg: PathBuf,
        #[arg(long, value_enum, default_value_t = PlotKind::Score)]
        plot: PlotKind,
    },
    /// Print a checkpoint's config and parameter count.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io(_) => 3,
        Error::BadMagic { .. } | Error::BadVersion { .. } | Error::Truncated(_) | Error::Parse(_) => 4,
        Error::InvalidArgument(_) | Error::ShapeMismatch { .. } => 5,
        Error::NonFinite(_) => 6,
        Error::Context { source, .. } => exit_code_for(source),
    }
}

/// Default seed: HGVAE_SEED when set, else 0. Flags win over both.
fn env_seed() -> Result<u64, Error> {
    match std::env::var("HGVAE_SEED") {
        Ok(v) => v
            .parse()
            .map_err(|_| Error::Parse(format!("HGVAE_SEED: cannot parse {v:?}"))),
        Err(_) => Ok(0),
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64, Error> {
    match flag {
        Some(s) => Ok(s),
        None => env_seed(),
    }
}

/// Config snapshot + seed + versions, written next to every output.
fn write_manifest(out: &Path, command: &str, seed: u64, extra: &KvMap) -> Result<(), Error> {
    let mut kv = extra.clone();
    kv.set("command", command);
    kv.set("seed", seed);
    kv.set("tool_version", env!("CARGO_PKG_VERSION"));
    kv.set("hgmd_version", 1);
    kv.set("checkpoint_version", 1);
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest");
    std::fs::write(out.with_file_name(name), kv.to_text())?;
    Ok(())
}

fn load_prepared(path: &Path) -> Result<(MotionDataset, DctBasis, data::PreparedDataset), Error> {
    let ds = read_dataset(path)?;
    let basis = DctBasis::new(ds.timepoints)?;
    let prep = prepare(&ds, &basis)?;
    Ok((ds, basis, prep))
}

fn means_from(
    flag: &Option<PathBuf>,
    fallback: &data::PreparedDataset,
) -> Result<hgvae::Tensor, Error> {
    match flag {
        Some(p) => {
            let (_d, _b, mp) = load_prepared(p)?;
            compute_feature_means(&mp.inputs)
        }
        None => compute_feature_means(&fallback.inputs),
    }
}

fn default_lr(model: &Checkpoint) -> Real {
    match model {
        Checkpoint::Hierarchical(_) => 1.0,
        Checkpoint::Baseline(_) => 100.0,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Command::Synth {
            out,
            count,
            classes,
            seed,
            timepoints,
            skeleton,
        } => {
            let seed = resolve_seed(seed)?;
            let spec = match &skeleton {
                Some(p) => SkeletonSpec::parse(&std::fs::read_to_string(p)?)?,
                None => SkeletonSpec::default_18(),
            };
            let ds = synthesize_motions(&spec, count, classes, timepoints, seed)?;
            write_dataset(&out, &ds)?;
            let mut kv = KvMap::new();
            kv.set("count", count);
            kv.set("classes", classes);
            kv.set("timepoints", timepoints);
            kv.set("joints", spec.joint_count());
            write_manifest(&out, "synth", seed, &kv)?;
            println!(
                "wrote {count} sequences ({} joints x 3 x {timepoints}, {classes} classes) to {}",
                spec.joint_count(),
                out.display()
            );
            Ok(())
        }

        Command::Train {
            data,
            config,
            model,
            out_checkpoint,
            log,
            epochs,
            batch_size,
            learning_rate,
            seed,
            clip_norm,
            checkpoint_every,
            conditional,
        } => {
            let kv = match &config {
                Some(p) => KvMap::parse(&std::fs::read_to_string(p)?)?,
                None => KvMap::new(),
            };
            let mut tc = TrainConfig::from_kv(&kv)?;
            if let Some(v) = epochs {
                tc.epochs = v;
            }
            if let Some(v) = batch_size {
                tc.batch_size = v;
            }
            if let Some(v) = learning_rate {
                tc.learning_rate = v as Real;
            }
            if let Some(v) = clip_norm {
                tc.clip_norm = v as Real;
            }
            if let Some(v) = checkpoint_every {
                tc.checkpoint_every = v;
            }
            match seed {
                Some(s) => tc.seed = s,
                None if !kv.contains("seed") => tc.seed = env_seed()?,
                None => {}
            }
            tc.validate()?;

            let model_kind = match model {
                Some(m) => m,
                None => match kv.raw("model") {
                    Some("vae-baseline") => ModelKind::VaeBaseline,
                    Some("hgvae") | None => ModelKind::Hgvae,
                    Some(other) => {
                        return Err(Error::Parse(format!("config: unknown model {other:?}")))
                    }
                },
            };

            let (ds, _basis, prep) = load_prepared(&data)?;
            let (log_csv, mut snapshot) = match model_kind {
                ModelKind::Hgvae => {
                    let mut mc = model_config_from_kv(&kv)?;
                    mc.obs_nodes = ds.node_count();
                    mc.obs_features = ds.timepoints;
                    if conditional {
                        let classes = ds
                            .labels
                            .as_ref()
                            .and_then(|l| l.iter().max().copied())
                            .map(|m| m + 1)
                            .ok_or_else(|| {
                                Error::InvalidArgument(
                                    "--conditional requires a labeled dataset".into(),
                                )
                            })?;
                        mc.condition_classes = Some(classes);
                    }
                    mc.validate()?;
                    let mut m = HgVae::init(mc, tc.seed)?;
                    let ckpt = out_checkpoint.clone();
                    let mut save_cb =
                        |_e: usize, m: &HgVae| checkpoint::save_hgvae(&ckpt, m);
                    let tl = train(&mut m, &prep, &tc, Some(&mut save_cb))?;
                    checkpoint::save_hgvae(&out_checkpoint, &m)?;
                    let mut snap = model_config_to_kv(m.config());
                    snap.set("model", "hgvae");
                    (tl.to_csv(), snap)
                }
                ModelKind::VaeBaseline => {
                    let input_dim = ds.node_count() * ds.timepoints;
                    let bc = hgvae::baseline::BaselineConfig {
                        input_dim,
                        hidden: kv
                            .get_list("hidden")?
                            .unwrap_or(hgvae::baseline::BaselineConfig::default().hidden),
                        latent: kv.get_or("latent", 50)?,
                    };
                    let mut m = BaselineVae::init(bc, tc.seed)?;
                    let ckpt = out_checkpoint.clone();
                    let mut save_cb =
                        |_e: usize, m: &BaselineVae| checkpoint::save_baseline(&ckpt, m);
                    let tl = train(&mut m, &prep, &tc, Some(&mut save_cb))?;
                    checkpoint::save_baseline(&out_checkpoint, &m)?;
                    let mut snap = m.config().to_kv();
                    snap.set("model", "vae-baseline");
                    (tl.to_csv(), snap)
                }
            };
            std::fs::write(&log, &log_csv)?;
            snapshot.merge(&tc.to_kv());
            snapshot.set("data", data.display());
            write_manifest(&out_checkpoint, "train", tc.seed, &snapshot)?;
            write_manifest(&log, "train", tc.seed, &snapshot)?;
            println!(
                "trained {} epochs; checkpoint {}, log {}",
                tc.epochs,
                out_checkpoint.display(),
                log.display()
            );
            Ok(())
        }

        Command::Generate {
            checkpoint: ckpt,
            count,
            temperature,
            class,
            seed,
            out,
        } => {
            let seed = resolve_seed(seed)?;
            let model = checkpoint::load(&ckpt)?;
            let Checkpoint::Hierarchical(model) = model else {
                return Err(Error::InvalidArgument(
                    "generate requires a hierarchical (hgvae) checkpoint".into(),
                ));
            };
            let basis = DctBasis::new(model.config().obs_features)?;
            let mut rng = hgvae::seeded_rng(seed);
            let motions = model.generate(&basis, count, temperature as Real, class, &mut rng)?;
            let sequences: Vec<_> = motions
                .iter()
                .map(data::unflatten_nodes)
                .collect::<Result<_, _>>()?;
            let labels = class.map(|c| vec![c; count]);
            let ds = MotionDataset::new(sequences, labels, "generated")?;
            write_dataset(&out, &ds)?;
            let mut kv = KvMap::new();
            kv.set("count", count);
            kv.set("temperature", temperature);
            if let Some(c) = class {
                kv.set("class", c);
            }
            kv.set("checkpoint", ckpt.display());
            write_manifest(&out, "generate", seed, &kv)?;
            println!("wrote {count} generated sequences to {}", out.display());
            Ok(())
        }

        Command::Impute {
            checkpoint: ckpt,
            data,
            occlusions,
            steps,
            lr,
            seed,
            out_csv,
            objective,
            means_data,
            batch_size,
        } => {
            let seed = resolve_seed(seed)?;
            let model = checkpoint::load(&ckpt)?;
            let (_ds, basis, prep) = load_prepared(&data)?;
            let means = means_from(&means_data, &prep)?;
            let (nodes, timepoints) = (prep.inputs[0].shape()[0], prep.inputs[0].shape()[1]);
            let cfg = ImputeConfig {
                max_steps: steps,
                learning_rate: lr.map(|v| v as Real).unwrap_or(default_lr(&model)),
                objective: objective.into(),
                batch_size,
            };

            let masks: Vec<_> = (0..prep.len())
                .map(|i| make_mask(nodes, timepoints, occlusions, seed ^ i as u64))
                .collect::<Result<_, _>>()?;
            let degraded: Vec<_> = prep
                .inputs
                .iter()
                .zip(&masks)
                .map(|(x, m)| mean_impute(x, m, &means))
                .collect::<Result<_, _>>()?;
            let result = match &model {
                Checkpoint::Hierarchical(m) => {
                    map_impute(m, &basis, &degraded, &masks, prep.labels.as_deref(), &cfg)?
                }
                Checkpoint::Baseline(m) => {
                    map_impute(m, &basis, &degraded, &masks, prep.labels.as_deref(), &cfg)?
                }
            };

            let mut csv = String::from("datapoint,count,method,score,masked_mse\n");
            for i in 0..prep.len() {
                let gt = &prep.inputs[i];
                let deg_mse = masked_mse(&degraded[i], gt, &masks[i]);
                let map_mse = masked_mse(&result.imputed[i], gt, &masks[i]);
                csv.push_str(&format!(
                    "{i},{occlusions},degraded,{:.10e},{:.10e}\n",
                    result.init_scores[i], deg_mse
                ));
                csv.push_str(&format!(
                    "{i},{occlusions},map,{:.10e},{:.10e}\n",
                    result.best_scores[i], map_mse
                ));
            }
            std::fs::write(&out_csv, &csv)?;
            let mut kv = KvMap::new();
            kv.set("occlusions", occlusions);
            kv.set("steps", steps);
            kv.set("learning_rate", cfg.learning_rate);
            kv.set("checkpoint", ckpt.display());
            kv.set("data", data.display());
            write_manifest(&out_csv, "impute", seed, &kv)?;
            if result.warning_nonfinite {
                eprintln!("warning: ascent hit a non-finite score; kept best iterates so far");
            }
            println!("wrote per-datapoint imputation report to {}", out_csv.display());
            Ok(())
        }

        Command::Score {
            checkpoint: ckpt,
            data,
            occlusion_grid,
            out_csv,
            steps,
            lr,
            seed,
            objective,
            means_data,
            batch_size,
        } => {
            let seed = resolve_seed(seed)?;
            let model = checkpoint::load(&ckpt)?;
            let (_ds, basis, prep) = load_prepared(&data)?;
            let means = means_from(&means_data, &prep)?;
            let counts: Vec<usize> = occlusion_grid
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| Error::Parse(format!("bad occlusion grid entry {p:?}")))
                })
                .collect::<Result<_, _>>()?;
            let cfg = ImputeConfig {
                max_steps: steps,
                learning_rate: lr.map(|v| v as Real).unwrap_or(default_lr(&model)),
                objective: objective.into(),
                batch_size,
            };
            let rows = match &model {
                Checkpoint::Hierarchical(m) => anomaly_curve(
                    m,
                    &basis,
                    &prep.inputs,
                    prep.labels.as_deref(),
                    &means,
                    &counts,
                    &cfg,
                    seed,
                )?,
                Checkpoint::Baseline(m) => anomaly_curve(
                    m,
                    &basis,
                    &prep.inputs,
                    prep.labels.as_deref(),
                    &means,
                    &counts,
                    &cfg,
                    seed,
                )?,
            };
            std::fs::write(&out_csv, curve_csv(&rows))?;
            let mut kv = KvMap::new();
            kv.set("occlusion_grid", &occlusion_grid);
            kv.set("steps", steps);
            kv.set("checkpoint", ckpt.display());
            write_manifest(&out_csv, "score", seed, &kv)?;
            println!("wrote score grid to {}", out_csv.display());
            Ok(())
        }

        Command::Eval {
            pred_csv,
            out_svg,
            plot,
        } => {
            let text = std::fs::read_to_string(&pred_csv)?;
            let svg = render_eval(&text, plot)?;
            std::fs::write(&out_svg, svg)?;
            let mut kv = KvMap::new();
            kv.set("pred_csv", pred_csv.display());
            write_manifest(&out_svg, "eval", 0, &kv)?;
            println!("wrote {}", out_svg.display());
            Ok(())
        }

        Command::Inspect { checkpoint: ckpt } => {
            let model = checkpoint::load(&ckpt)?;
            println!("model: {}", model.kind_name());
            print!("{}", model.config_text());
            if let Checkpoint::Hierarchical(m) = &model {
                let shapes: Vec<String> = m
                    .config()
                    .latent_nodes
                    .iter()
                    .zip(&m.config().latent_features)
                    .map(|(n, f)| format!("({n}x{f})"))
                    .collect();
                println!("latent_shapes = {}", shapes.join(","));
            }
            println!("parameter_count = {}", model.parameter_count());
            Ok(())
        }
    }
}

/// Build the requested curve from either CSV schema (the aggregated
/// score grid, or the per-datapoint impute report).
fn render_eval(text: &str, plot: PlotKind) -> Result<String, Error> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("eval: empty CSV".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let idx = |name: &str| cols.iter().position(|&c| c == name);

    let (ci, mi, score_col, mse_col) = if let (Some(c), Some(m), Some(s)) =
        (idx("count"), idx("method"), idx("mean_score"))
    {
        (c, m, s, idx("mean_mse"))
    } else if let (Some(c), Some(m), Some(s)) = (idx("count"), idx("method"), idx("score")) {
        (c, m, s, idx("masked_mse"))
    } else {
        return Err(Error::Parse(format!(
            "eval: unrecognized CSV header {header:?}"
        )));
    };

    let mut agg: std::collections::BTreeMap<(usize, String), (Vec<f64>, Vec<f64>)> =
        std::collections::BTreeMap::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let count: usize = f[ci]
            .parse()
            .map_err(|_| Error::Parse(format!("eval: bad count in {line:?}")))?;
        let score: f64 = f[score_col]
            .parse()
            .map_err(|_| Error::Parse(format!("eval: bad score in {line:?}")))?;
        let entry = agg.entry((count, f[mi].to_string())).or_default();
        entry.0.push(score);
        if let Some(mc) = mse_col {
            entry.1.push(
                f[mc]
                    .parse()
                    .map_err(|_| Error::Parse(format!("eval: bad mse in {line:?}")))?,
            );
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;

    match plot {
        PlotKind::Score => {
            let mut by_method: std::collections::BTreeMap<String, Vec<(f64, f64)>> =
                std::collections::BTreeMap::new();
            for ((count, method), (scores, _)) in &agg {
                by_method
                    .entry(method.clone())
                    .or_default()
                    .push((*count as f64, mean(scores)));
            }
            let series: Vec<Series> = by_method
                .into_iter()
                .map(|(name, points)| Series { name, points })
                .collect();
            Ok(plot_svg(
                "mean score vs occluded cells",
                "occluded cells",
                "mean score",
                &series,
            ))
        }
        PlotKind::MseReduction => {
            let counts: std::collections::BTreeSet<usize> =
                agg.keys().map(|(c, _)| *c).filter(|&c| c > 0).collect();
            let mut points = Vec::new();
            for count in counts {
                let map = agg.get(&(count, "map".to_string()));
                let deg = agg.get(&(count, "degraded".to_string()));
                if let (Some((_, m)), Some((_, d))) = (map, deg) {
                    if !m.is_empty() && !d.is_empty() && mean(d) > 0.0 {
                        points.push((count as f64, 100.0 * (mean(m) - mean(d)) / mean(d)));
                    }
                }
            }
            if points.is_empty() {
                return Err(Error::Parse(
                    "eval: CSV lacks map/degraded MSE data for an MSE-reduction plot".into(),
                ));
            }
            Ok(plot_svg(
                "MSE change of MAP vs mean imputation",
                "occluded cells",
                "% change in masked-cell MSE",
                &[Series {
                    name: "map vs mean".into(),
                    points,
                }],
            ))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
