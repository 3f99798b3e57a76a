use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use dglr::data::{generate_synthetic_with_truth, DEFAULT_HORIZON};
use dglr::{
    evaluate as evaluate_predictions, load_checkpoint, load_csv, load_predictions_csv,
    save_checkpoint, save_csv, save_predictions_csv, train_with, Ablation, CoordinateSystem,
    CsvOptions, EvalReport, LossBreakdown, LossWeights, SensorDataset, SyntheticSpec, TrainConfig,
    TrainOutcome,
};
use serde::Serialize;

use crate::manifest::{self, ManifestBuilder};
use crate::{EvaluateArgs, ForecastArgs, GenSynthArgs, TrainArgs};

/// 3 for numeric failures (divergence, non-finite values), 2 for
/// everything else: bad flags, unreadable or inconsistent inputs.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|c| {
        c.downcast_ref::<dglr::Error>()
            .or_else(|| c.downcast_ref::<dglr::TrainFailure>().map(|f| &f.error))
            .is_some_and(dglr::Error::is_numeric)
    });
    if numeric {
        3
    } else {
        2
    }
}

/// Runs `body` and writes the manifest whether or not it succeeded.
fn with_manifest(
    mut m: ManifestBuilder,
    body: impl FnOnce(&mut ManifestBuilder) -> Result<()>,
) -> Result<()> {
    let result = body(&mut m);
    let written = m.finish(result.as_ref().err());
    result?;
    written.context("writing manifest")?;
    Ok(())
}

fn coordinate_system(locations: &Path) -> Result<CoordinateSystem> {
    let text = std::fs::read_to_string(locations)
        .with_context(|| format!("reading {}", locations.display()))?;
    let header = text.lines().next().unwrap_or_default();
    let planar = header.split(',').any(|h| h.trim() == "x");
    Ok(if planar {
        CoordinateSystem::Planar
    } else {
        CoordinateSystem::Geodetic
    })
}

fn load_dataset(dir: &Path, horizon: usize) -> Result<SensorDataset> {
    let locations = dir.join("locations.csv");
    let observations = dir.join("observations.csv");
    for p in [&locations, &observations] {
        if !p.is_file() {
            bail!("missing input file {}", p.display());
        }
    }
    let options = CsvOptions {
        coordinate_system: coordinate_system(&locations)?,
        horizon,
    };
    load_csv(&locations, &observations, &options).context("loading dataset")
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn gen_synth(args: &GenSynthArgs) -> Result<()> {
    let defaults = SyntheticSpec::default();
    let spec = SyntheticSpec {
        nodes: args.n,
        steps: args.t,
        features: args.d,
        clusters: args.clusters,
        noise: args.noise.unwrap_or(defaults.noise),
        feature_noise: args.feature_noise.unwrap_or(defaults.feature_noise),
        anomaly: args.anomaly.unwrap_or(defaults.anomaly),
        misspecified_graph: args.misspecified,
        horizon: DEFAULT_HORIZON.min(args.t.saturating_sub(1)).max(1),
        ..defaults
    };
    let mut m = ManifestBuilder::start("gen-synth", &args.out);
    m.config(&spec).seed(args.seed);
    with_manifest(m, |_| {
        let (data, truth) = generate_synthetic_with_truth(&spec, args.seed)?;
        save_csv(&data, &args.out)?;
        write_json(&args.out.join("truth.json"), &truth.clusters)?;
        eprintln!(
            "wrote {} locations × {} steps to {}",
            data.num_locations(),
            data.num_time_steps(),
            args.out.display()
        );
        Ok(())
    })
}

/// Defaults, then the config file, then explicit flags.
fn effective_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut config = match &args.config {
        None => TrainConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let is_json = path
                .extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("json"));
            if is_json {
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing {}", path.display()))?
            } else {
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
        }
    };
    if let Some(v) = args.k {
        config.embedding_dim = v;
    }
    if let Some(v) = args.w {
        config.window = v;
    }
    if let Some(v) = args.lr {
        config.learning_rate = v;
    }
    if let Some(v) = args.epochs {
        config.epochs_per_outer_iter = v;
    }
    if let Some(v) = args.outer_iters {
        config.outer_iters = v;
    }
    if let Some(v) = args.ablation {
        config.ablation = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    config.validate()?;
    Ok(config)
}

#[derive(Serialize)]
struct RunMeta {
    ablation: Ablation,
    epochs: usize,
    train_end: usize,
    horizon: usize,
    weights: LossWeights,
    final_losses: Option<LossBreakdown>,
    /// Metrics over the held-out steps, when they carry labels.
    test: Option<EvalReport>,
}

fn test_report(outcome: &TrainOutcome, data: &SensorDataset) -> Result<Option<EvalReport>> {
    let predictions = dglr::forecast_test(&outcome.model, data)?;
    match evaluate_predictions(
        &predictions,
        &data.labels,
        &data.label_mask,
        predictions.steps(),
    ) {
        Ok(r) => Ok(Some(r)),
        Err(dglr::Error::NoLabels(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Trains one variant into `dir`. Partial artifacts are kept on failure.
fn train_one(
    data: &SensorDataset,
    config: &TrainConfig,
    dir: &Path,
    dump_graph: bool,
) -> Result<RunMeta> {
    std::fs::create_dir_all(dir)?;
    let checkpoints = dir.join("checkpoints");
    let start = Instant::now();
    let result = train_with(data, config, |model, log| {
        std::fs::create_dir_all(&checkpoints)?;
        save_checkpoint(
            model,
            checkpoints.join(format!("epoch_{:05}.json", model.epoch)),
        )?;
        if let Some(last) = log.last() {
            eprintln!(
                "[{}] epoch {:>5}  total {:.6}  stsm {:.6}",
                config.ablation, last.epoch, last.losses.total, last.losses.stsm
            );
        }
        Ok(())
    });
    let outcome = match result {
        Ok(o) => o,
        Err(failure) => {
            failure.log.save_csv(dir.join("loss_log.csv"))?;
            if let Some(m) = &failure.last_good {
                save_checkpoint(m, dir.join("checkpoint_last_good.json"))?;
            }
            return Err(anyhow::Error::new(failure).context(format!("variant {}", config.ablation)));
        }
    };
    eprintln!(
        "[{}] trained in {:.1}s",
        config.ablation,
        start.elapsed().as_secs_f64()
    );
    outcome.log.save_csv(dir.join("loss_log.csv"))?;
    save_checkpoint(&outcome.model, dir.join("checkpoint.json"))?;
    if dump_graph {
        for (k, g) in outcome.graph_history.iter().enumerate() {
            g.dump(dir.join("graphs").join(format!("outer_{k:02}")))?;
        }
    }
    let meta = RunMeta {
        ablation: config.ablation,
        epochs: outcome.model.epoch,
        train_end: data.train_end,
        horizon: data.horizon(),
        weights: outcome.weights,
        final_losses: outcome.log.last().map(|r| r.losses),
        test: test_report(&outcome, data)?,
    };
    write_json(&dir.join("meta.json"), &meta)?;
    Ok(meta)
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |v| format!("{v:.6}"))
}

fn write_sweep_summary(dir: &Path, rows: &[(Ablation, RunMeta)]) -> Result<()> {
    let mut csv = String::from("variant,rmse,smape_percent,pearson,final_total\n");
    println!(
        "{:<8} {:>10} {:>10} {:>10}",
        "variant", "RMSE", "SMAPE%", "Corr"
    );
    for (ablation, meta) in rows {
        let t = meta.test.as_ref();
        let (rmse, smape, corr) = (
            t.map(|r| r.mean_rmse),
            t.map(|r| r.mean_smape_percent),
            t.and_then(|r| r.mean_pearson),
        );
        csv.push_str(&format!(
            "{ablation},{},{},{},{}\n",
            fmt_metric(rmse),
            fmt_metric(smape),
            fmt_metric(corr),
            fmt_metric(meta.final_losses.map(|l| l.total))
        ));
        println!(
            "{:<8} {:>10} {:>10} {:>10}",
            ablation.name(),
            fmt_metric(rmse),
            fmt_metric(smape),
            fmt_metric(corr)
        );
    }
    std::fs::write(dir.join("ablation_summary.csv"), csv)?;
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let config = effective_config(args)?;
    let data = load_dataset(&args.data, args.horizon)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let mut m = ManifestBuilder::start("train", &args.out);
    m.config(serde_json::json!({
        "train": &config,
        "horizon": args.horizon,
        "sweep_ablation": args.sweep_ablation,
        "dump_graph": args.dump_graph,
    }))
    .input(&args.data.join("locations.csv"))
    .input(&args.data.join("observations.csv"))
    .seed(config.seed);
    if let Some(c) = &args.config {
        m.input(c);
    }
    with_manifest(m, |_| {
        if args.sweep_ablation {
            let mut rows = Vec::new();
            for ablation in Ablation::ALL {
                let c = TrainConfig {
                    ablation,
                    ..config.clone()
                };
                let meta = train_one(&data, &c, &args.out.join(ablation.name()), args.dump_graph)?;
                rows.push((ablation, meta));
            }
            write_sweep_summary(&args.out, &rows)
        } else {
            let meta = train_one(&data, &config, &args.out, args.dump_graph)?;
            if let Some(r) = &meta.test {
                println!(
                    "test RMSE {:.6}  SMAPE {:.3}%  Corr {}",
                    r.mean_rmse,
                    r.mean_smape_percent,
                    fmt_metric(r.mean_pearson)
                );
            }
            Ok(())
        }
    })
}

pub fn forecast(args: &ForecastArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint).context("loading checkpoint")?;
    let data = load_dataset(&args.data, 1)?
        .with_train_end(model.train_end)
        .context("dataset is too short for the checkpoint's training interval")?;
    let horizon = args
        .horizon
        .unwrap_or(data.num_time_steps() - model.train_end);
    let mut m = ManifestBuilder::start("forecast", &args.out);
    m.config(serde_json::json!({ "horizon": horizon }))
        .input(&args.checkpoint)
        .input(&args.data.join("locations.csv"))
        .input(&args.data.join("observations.csv"))
        .seed(model.seed);
    with_manifest(m, |_| {
        let predictions = dglr::forecast(&model, &data, horizon)?;
        std::fs::create_dir_all(&args.out)?;
        save_predictions_csv(&predictions, args.out.join("predictions.csv"))?;
        eprintln!(
            "predicted steps {:?} for {} locations",
            predictions.steps(),
            predictions.values.ncols()
        );
        Ok(())
    })
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let predictions = load_predictions_csv(&args.predictions).context("loading predictions")?;
    let data = load_dataset(&args.data, 1)?;
    if predictions.values.ncols() != data.num_locations() {
        return Err(dglr::Error::DimensionMismatch {
            what: "locations".into(),
            expected: data.num_locations(),
            actual: predictions.values.ncols(),
        }
        .into());
    }
    let mut m = ManifestBuilder::start("evaluate", &args.out);
    m.config(serde_json::json!({ "plot_data": args.plot_data }))
        .input(&args.predictions)
        .input(&args.data.join("observations.csv"));
    with_manifest(m, |_| {
        let steps = predictions.steps();
        if steps.end > data.num_time_steps() {
            bail!(
                "predictions reach step {}, dataset has {} steps",
                steps.end - 1,
                data.num_time_steps()
            );
        }
        let report =
            evaluate_predictions(&predictions, &data.labels, &data.label_mask, steps.clone())?;
        std::fs::create_dir_all(&args.out)?;
        report.save_csv(args.out.join("report.csv"))?;
        report.save_json(args.out.join("report.json"))?;
        if args.plot_data {
            write_plot_data(&args.out.join("plot_data.csv"), &predictions, &data, steps)?;
        }
        println!(
            "RMSE {:.6}  SMAPE {:.3}%  Corr {}  ({} cells)",
            report.mean_rmse,
            report.mean_smape_percent,
            fmt_metric(report.mean_pearson),
            report.count
        );
        Ok(())
    })
}

/// `location_id,time,actual,predicted`; unlabeled steps leave `actual`
/// empty.
fn write_plot_data(
    path: &Path,
    predictions: &dglr::Predictions,
    data: &SensorDataset,
    steps: std::ops::Range<usize>,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "location_id,time,actual,predicted")?;
    for i in 0..data.num_locations() {
        for t in steps.clone() {
            let p = predictions.get(t, i).expect("steps within predictions");
            let actual = if data.label_mask[[t, i]] {
                data.labels[[t, i]].to_string()
            } else {
                String::new()
            };
            writeln!(w, "{i},{t},{actual},{p}")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn verify(path: &Path) -> Result<()> {
    let m = manifest::verify(path).map_err(|e| anyhow!("{e:#}"))?;
    println!(
        "{} artifacts verified ({} run, status {})",
        m.artifacts.len(),
        m.command,
        m.status
    );
    Ok(())
}
