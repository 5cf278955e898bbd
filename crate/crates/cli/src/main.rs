//! `ustd` command-line front end.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use ndarray::{Array3, Axis};

use ustd::data::io::{write_coords, write_edge_list};
use ustd::data::{synthesize_graph_signal, write_signals};
use ustd::pipeline::experiment::{
    baseline_reports, build_model, evaluate, load_task_data, pretrain_encoder, timing_comparison, Ablation,
};
use ustd::pipeline::metrics::MetricReport;
use ustd::pipeline::model::Segment;
use ustd::pipeline::persist::{load_model, load_pretrainer, save_model, save_pretrainer};
use ustd::pipeline::train::train_denoiser;
use ustd::{rng_from_seed, RunConfig, Task, UstdError};

#[derive(Parser, Debug)]
#[command(name = "ustd", version, about = "Probabilistic forecasting and kriging on sensor graphs")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, env = "USTD_SEED")]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic graph and signal set.
    Synth {
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Masked-autoencoder pre-training of the encoder.
    Pretrain {
        #[arg(long, value_parser = parse_task)]
        task: Option<Task>,
        #[arg(long)]
        mask_ratio: Option<f64>,
        /// Train a plain autoencoder without masking.
        #[arg(long, conflicts_with = "mask_ratio")]
        no_mask: bool,
        #[arg(long)]
        graph_sample_rate: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from the existing encoder checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Train the denoiser on a pre-trained encoder.
    Train {
        #[arg(long, value_parser = parse_task)]
        task: Task,
        /// Encoder checkpoint; defaults to `<out>/encoder.ckpt`.
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        freeze_encoder: bool,
        #[arg(long, default_value = "full")]
        ablation: String,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sample the test segment and write metrics and plots.
    Evaluate {
        #[arg(long, value_parser = parse_task)]
        task: Option<Task>,
        /// Model checkpoint; defaults to `<out>/model-<task>.ckpt`.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        compare_baselines: bool,
        /// Node id to draw a fan chart for; repeatable.
        #[arg(long = "fan-chart")]
        fan_chart: Vec<String>,
        #[arg(long)]
        max_windows: Option<usize>,
        /// Also write point estimates in the signals container format.
        #[arg(long)]
        export_predictions: bool,
    },
    /// Time sampling with the gated denoiser against full attention.
    Bench {
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
    },
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    s.parse().map_err(|e: UstdError| e.to_string())
}

type Result<T> = ustd::Result<T>;

/// Built-in defaults, then the config file, then flags.
fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.common.out {
        cfg.out_dir = out.clone();
    }
    match &cli.command {
        Command::Synth { nodes, steps } => {
            set(&mut cfg.synth.n_nodes, *nodes);
            set(&mut cfg.synth.t_total, *steps);
        }
        Command::Pretrain {
            task,
            mask_ratio,
            no_mask,
            graph_sample_rate,
            steps,
            ..
        } => {
            set(&mut cfg.task, *task);
            if *no_mask {
                cfg.pretrain.mask_ratio = None;
            } else if mask_ratio.is_some() {
                cfg.pretrain.mask_ratio = *mask_ratio;
            }
            set(&mut cfg.pretrain.graph_sample_rate, *graph_sample_rate);
            set(&mut cfg.pretrain.steps, *steps);
        }
        Command::Train {
            task,
            freeze_encoder,
            steps,
            ..
        } => {
            cfg.task = *task;
            cfg.train.freeze_encoder |= *freeze_encoder;
            set(&mut cfg.train.max_steps, *steps);
        }
        Command::Evaluate {
            task,
            samples,
            compare_baselines,
            fan_chart,
            max_windows,
            ..
        } => {
            set(&mut cfg.task, *task);
            set(&mut cfg.eval.n_samples, *samples);
            cfg.eval.compare_baselines |= *compare_baselines;
            if !fan_chart.is_empty() {
                cfg.eval.fan_chart_nodes = fan_chart.clone();
            }
            if max_windows.is_some() {
                cfg.eval.max_windows = *max_windows;
            }
        }
        Command::Bench { nodes, trials, samples } => {
            set(&mut cfg.bench.nodes, *nodes);
            set(&mut cfg.bench.trials, *trials);
            set(&mut cfg.bench.n_samples, *samples);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn set<T: Copy>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn encoder_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("encoder.ckpt")
}

fn model_path(cfg: &RunConfig, task: Task) -> PathBuf {
    cfg.out_dir.join(format!("model-{task}.ckpt"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| UstdError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let mut rng = rng_from_seed(cfg.seed);
    let out = synthesize_graph_signal(&cfg.synth, &mut rng)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let signals = cfg.out_dir.join("signals.bin");
    write_signals(&signals, &out.series.values, &out.series.meta)?;
    write_edge_list(&cfg.out_dir.join("edges.csv"), &out.graph)?;
    write_coords(&cfg.out_dir.join("coords.csv"), &out.graph)?;
    let meta = serde_json::to_string_pretty(&out.series.meta).map_err(|e| UstdError::Format(e.to_string()))?;
    println!("wrote {} ({} nodes x {} steps)", signals.display(), out.series.n_nodes(), out.series.len());
    println!("{meta}");
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, resume: bool) -> Result<()> {
    let mut rng = rng_from_seed(cfg.seed);
    let path = encoder_path(cfg);
    let (previous, partition) = if resume {
        let (pre, meta) = load_pretrainer(&path)?;
        if meta.task != cfg.task {
            return Err(UstdError::Config(format!("cannot resume a {} encoder for {}", meta.task, cfg.task)));
        }
        info!("resuming pre-training at step {}", pre.step);
        (Some(pre), Some(meta.split))
    } else {
        (None, None)
    };
    let data = load_task_data(cfg, cfg.task, partition, &mut rng)?;
    let pre = pretrain_encoder(&data, cfg, previous, &mut rng)?;
    fs::create_dir_all(&cfg.out_dir)?;
    save_pretrainer(&path, &pre, cfg.task, &data.split, cfg, cfg.seed)?;
    let curve: String = pre
        .loss_history
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{}\t{l}\n", i + 1))
        .collect();
    write(&cfg.out_dir.join("pretrain_loss.tsv"), &format!("step\tmasked_mae\n{curve}"))?;
    println!(
        "encoder checkpoint {} (tau={}, step {}, final masked MAE {:.4})",
        path.display(),
        cfg.encoder.tau()?,
        pre.step,
        pre.loss_history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, encoder: Option<PathBuf>, ablation: Ablation) -> Result<()> {
    let mut rng = rng_from_seed(cfg.seed);
    let (enc, partition) = if ablation == Ablation::NoEncoder {
        (None, None)
    } else {
        let path = encoder.unwrap_or_else(|| encoder_path(cfg));
        if !path.exists() {
            return Err(UstdError::Config(format!(
                "encoder checkpoint {} not found; run `ustd pretrain` first",
                path.display()
            )));
        }
        let (pre, meta) = load_pretrainer(&path)?;
        if meta.task != cfg.task {
            return Err(UstdError::Config(format!(
                "encoder was pre-trained for {} but {} was requested",
                meta.task, cfg.task
            )));
        }
        (Some(pre.encoder), Some(meta.split))
    };
    let data = load_task_data(cfg, cfg.task, partition, &mut rng)?;
    let mut model = build_model(&data, enc, cfg, ablation, &mut rng)?;
    let mut run = train_denoiser(&mut model, &data, &cfg.train, cfg.data.train_stride, &mut rng)?;
    run.seed = Some(cfg.seed);
    fs::create_dir_all(&cfg.out_dir)?;
    let path = model_path(cfg, cfg.task);
    save_model(&path, &model, &data.split, &data.normalizer, cfg, cfg.seed)?;
    run.checkpoints.push(path.clone());
    let json = serde_json::to_string_pretty(&run).map_err(|e| UstdError::Format(e.to_string()))?;
    write(&cfg.out_dir.join(format!("train-{}.json", cfg.task)), &json)?;
    println!(
        "model checkpoint {} ({} steps, best validation loss {:.4} vs zero predictor {:.4})",
        path.display(),
        run.step,
        run.best_val,
        run.zero_predictor_val
    );
    Ok(())
}

struct EvalOptions {
    model: Option<PathBuf>,
    export_predictions: bool,
}

fn cmd_evaluate(cfg: &RunConfig, opts: EvalOptions) -> Result<()> {
    let path = opts.model.unwrap_or_else(|| model_path(cfg, cfg.task));
    if !path.exists() {
        return Err(UstdError::Config(format!(
            "model checkpoint {} not found; run `ustd train` first",
            path.display()
        )));
    }
    let (model, meta) = load_model(&path, Some(cfg.task))?;
    let mut rng = rng_from_seed(cfg.seed);
    let data = load_task_data(cfg, cfg.task, Some(meta.split.clone()), &mut rng)?;
    if meta.normalizer.as_ref() != Some(&data.normalizer) {
        return Err(UstdError::Config("dataset differs from the one the model was trained on".into()));
    }
    let name = if model.denoiser.config.kind == ustd::DenoiserKind::FullAttention {
        "full-attention"
    } else {
        "ustd"
    };
    let ev = evaluate(&model, &data, name, Segment::Test, &cfg.eval, cfg.data.eval_stride, &mut rng)?;
    let mut reports = vec![ev.report.clone()];
    if cfg.eval.compare_baselines {
        reports.extend(baseline_reports(&data, Segment::Test, &cfg.eval, cfg.data.eval_stride, &mut rng)?);
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let tag = cfg.task.to_string();
    let mut text = String::new();
    for r in &reports {
        text.push_str(&r.to_key_value());
        text.push('\n');
    }
    for line in cfg.to_toml_string()?.lines() {
        text.push_str(&format!("# {line}\n"));
    }
    write(&cfg.out_dir.join(format!("report-{tag}.txt")), &text)?;
    let table: String = std::iter::once(MetricReport::table_header().to_string())
        .chain(reports.iter().map(|r| r.table_row()))
        .map(|l| l + "\n")
        .collect();
    write(&cfg.out_dir.join(format!("metrics-{tag}.tsv")), &table)?;
    let mut horizon = String::from("step\tmae\trmse\n");
    for (i, (m, r)) in ev.report.per_horizon_mae.iter().zip(&ev.report.per_horizon_rmse).enumerate() {
        horizon.push_str(&format!("{}\t{m}\t{r}\n", i + 1));
    }
    write(&cfg.out_dir.join(format!("horizon-{tag}.tsv")), &horizon)?;
    print!("{table}");

    let target_nodes: Vec<usize> = match cfg.task {
        Task::Forecast => (0..data.graph.n_nodes()).collect(),
        Task::Krige => data.split.unobserved.clone(),
    };
    for id in &cfg.eval.fan_chart_nodes {
        let node = data
            .graph
            .node_ids()
            .iter()
            .position(|n| n == id)
            .ok_or_else(|| UstdError::Config(format!("unknown node id '{id}'")))?;
        let row = target_nodes.iter().position(|&n| n == node).ok_or_else(|| {
            UstdError::Config(format!("node '{id}' is observed; fan charts need a predicted node"))
        })?;
        let mut series = plot::FanSeries {
            lower: Vec::new(),
            upper: Vec::new(),
            median: Vec::new(),
            truth: Vec::new(),
        };
        for (w, set) in ev.windows.iter().zip(&ev.samples).take(8) {
            let truth = data.raw_target(w);
            for step in 0..truth.dim().1 {
                let draws: Vec<f64> = set.samples.iter().map(|s| s[[row, step, 0]]).collect();
                series.lower.push(draws.iter().copied().fold(f64::INFINITY, f64::min));
                series.upper.push(draws.iter().copied().fold(f64::NEG_INFINITY, f64::max));
                series.median.push(set.point_estimate[[row, step, 0]]);
                series.truth.push(truth[[row, step, 0]]);
            }
        }
        let file = cfg.out_dir.join(format!("fan-{tag}-{id}.png"));
        plot::save(&series, &file)?;
        println!("fan chart {}", file.display());
    }

    if opts.export_predictions {
        let views: Vec<_> = ev.samples.iter().map(|s| s.point_estimate.view()).collect();
        let joined: Array3<f64> = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| UstdError::Shape(e.to_string()))?;
        let mut meta = data.raw.meta.clone();
        meta.generator = Some(serde_json::json!({
            "predictions": tag,
            "window_starts": ev.windows.iter().map(|w| w.target_start).collect::<Vec<_>>(),
        }));
        write_signals(&cfg.out_dir.join(format!("predictions-{tag}.bin")), &joined, &meta)?;
    }
    Ok(())
}

fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    let report = timing_comparison(cfg, cfg.seed)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let text = report.to_text();
    write(&cfg.out_dir.join("bench.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    if cli.common.print_config {
        print!("{}", cfg.to_toml_string()?);
        return Ok(());
    }
    match cli.command {
        Command::Synth { .. } => cmd_synth(&cfg),
        Command::Pretrain { resume, .. } => cmd_pretrain(&cfg, resume),
        Command::Train { encoder, ablation, .. } => cmd_train(&cfg, encoder, ablation.parse()?),
        Command::Evaluate {
            model,
            export_predictions,
            ..
        } => cmd_evaluate(
            &cfg,
            EvalOptions {
                model,
                export_predictions,
            },
        ),
        Command::Bench { .. } => cmd_bench(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
