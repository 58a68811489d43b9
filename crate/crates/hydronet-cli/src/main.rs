//! `hydronet` — the full pipeline as one binary.
//!
//! Subcommands: `simulate` (synthetic panel + labels), `analyze` (ACF and
//! edge-attribute correlations), `train`, `evaluate` (model vs naive
//! baselines), `forecast`, `detect` (residual anomaly events), and
//! `gradcheck` (finite-difference audit of every differentiable op).
//! Every run is driven by one TOML config plus overriding flags; all
//! randomness descends from the single global seed. Errors print one
//! machine-parsable line and exit 2 (config), 3 (data), or 4 (numerical).

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use hydronet_core::dataset::{
    acf, apply_normalizer, chronological_split, edge_corr_matrix, fit_normalizer, load_panel,
    make_windows, save_panel, DataError, TimeSeriesPanel, Window, CHANNELS, CHANNEL_NAMES,
};
use hydronet_core::eval::{
    detect_anomalies, evaluate, evaluate_persistence, fit_residual_stats,
    rolling_one_step_forecast, score_pairs, seasonal_naive_forecast, EvalError, MetricReport,
};
use hydronet_core::graph::{load_graph_csv, GraphError, PipeEdge, PipeGraph, EDGE_ATTR_NAMES};
use hydronet_core::model::{BoundParams, HydroNet, ModelError};
use hydronet_core::sim::{generate_dataset, save_anomalies, SimError};
use hydronet_core::tensor::{finite_diff_check, Tape, Tensor, TensorError};
use hydronet_core::train::{load_checkpoint, save_checkpoint, train, TrainError};

#[derive(Parser)]
#[command(name = "hydronet", version, about = "Sewer-network forecasting pipeline")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed, overriding the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the full effective config as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic measurement panel and its anomaly labels.
    Simulate {
        /// Steps to generate.
        #[arg(long)]
        duration: Option<usize>,
    },
    /// Report autocorrelation and edge-attribute correlations of a panel.
    Analyze {
        /// Highest autocorrelation lag.
        #[arg(long)]
        max_lag: Option<usize>,
    },
    /// Train a model on the configured panel and save a checkpoint.
    Train {
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Score a checkpoint against naive baselines on the test split.
    Evaluate {
        /// Seasonal-naive period in steps.
        #[arg(long)]
        period: Option<usize>,
    },
    /// Forecast the horizon following step `at` in physical units.
    Forecast {
        /// First forecasted step (default: one past the panel's end).
        #[arg(long)]
        at: Option<usize>,
    },
    /// Flag anomaly events from forecast residuals.
    Detect {
        /// |z| threshold.
        #[arg(long)]
        threshold: Option<f64>,
        /// Minimum event length in steps.
        #[arg(long)]
        min_duration: Option<usize>,
        /// Clean panel for residual statistics (default: the main panel).
        #[arg(long)]
        clean_panel: Option<PathBuf>,
    },
    /// Finite-difference audit of every differentiable operation.
    Gradcheck,
}

/// Errors classed by exit code.
enum CliError {
    Config(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Numerical(_) => "numerical",
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidSplit(_) => CliError::Config(e.to_string()),
            DataError::NaNValue { .. } | DataError::ZeroVariance(_) => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidConfig(_) | SimError::UnknownTarget(_) => {
                CliError::Config(e.to_string())
            }
            SimError::FlowExceedsCapacity { .. } | SimError::NonConvergence(_) => {
                CliError::Numerical(e.to_string())
            }
            SimError::Data(d) => d.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => CliError::Config(e.to_string()),
            ModelError::Graph(g) => g.into(),
            ModelError::Tensor(t) => t.into(),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) => CliError::Config(e.to_string()),
            TrainError::NonFiniteGradient(_) => CliError::Numerical(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Tensor(t) => t.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::ZeroResidualVariance { .. } => CliError::Numerical(e.to_string()),
            EvalError::Train(t) => t.into(),
            EvalError::Model(m) => m.into(),
            EvalError::Tensor(t) => t.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.message().replace(['\n', '"'], " ");
            eprintln!("error kind={} code={} msg=\"{}\"", e.kind(), e.code(), msg);
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(CliError::Config)?,
        None => RunConfig::default(),
    };
    config.resolve(cli.seed, cli.out);

    // Fold subcommand flags into the config before echoing or running.
    if let Some(command) = &cli.command {
        match command {
            Command::Simulate { duration } => {
                if let Some(d) = duration {
                    config.sim.duration = *d;
                }
            }
            Command::Analyze { max_lag } => {
                if let Some(l) = max_lag {
                    config.analyze.max_lag = *l;
                }
            }
            Command::Train {
                max_epochs,
                batch_size,
            } => {
                if let Some(e) = max_epochs {
                    config.train.max_epochs = *e;
                    // A shortened run implies a shortened patience.
                    config.train.patience = config.train.patience.min(*e);
                }
                if let Some(b) = batch_size {
                    config.train.batch_size = *b;
                }
            }
            Command::Evaluate { period } => {
                if let Some(p) = period {
                    config.detect.period = *p;
                }
            }
            Command::Detect {
                threshold,
                min_duration,
                ..
            } => {
                if let Some(k) = threshold {
                    config.detect.threshold = *k;
                }
                if let Some(m) = min_duration {
                    config.detect.min_duration = *m;
                }
            }
            Command::Forecast { .. } | Command::Gradcheck => {}
        }
    }

    if cli.print_config {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CliError::Config(
            "no subcommand given (see --help)".into(),
        ));
    };

    match command {
        Command::Simulate { .. } => cmd_simulate(&config),
        Command::Analyze { .. } => cmd_analyze(&config),
        Command::Train { .. } => cmd_train(&config),
        Command::Evaluate { .. } => cmd_evaluate(&config),
        Command::Forecast { at } => cmd_forecast(&config, at),
        Command::Detect { clean_panel, .. } => cmd_detect(&config, clean_panel),
        Command::Gradcheck => cmd_gradcheck(),
    }
}

fn load_graph(config: &RunConfig) -> Result<PipeGraph, CliError> {
    Ok(load_graph_csv(&config.paths.nodes, &config.paths.edges)?)
}

fn ensure_out_dir(config: &RunConfig) -> Result<(), CliError> {
    Ok(fs::create_dir_all(&config.paths.out_dir)?)
}

fn cmd_simulate(config: &RunConfig) -> Result<(), CliError> {
    let graph = load_graph(config)?;
    let panel = generate_dataset(&graph, &config.sim, &config.anomalies)?;
    ensure_out_dir(config)?;
    let panel_path = config.paths.panel_path();
    save_panel(&panel, &panel_path)?;
    let labels_path = config.paths.labels_path();
    save_anomalies(&config.anomalies, &labels_path)?;
    println!(
        "wrote {} ({} steps × {} nodes) and {} ({} labels)",
        panel_path.display(),
        panel.len(),
        panel.node_count(),
        labels_path.display(),
        config.anomalies.len()
    );
    Ok(())
}

fn cmd_analyze(config: &RunConfig) -> Result<(), CliError> {
    let graph = load_graph(config)?;
    let panel = load_panel(&config.paths.panel_path(), &graph)?;
    ensure_out_dir(config)?;

    let max_lag = config.analyze.max_lag.min(panel.len().saturating_sub(1));
    let acf_path = config.paths.out_file("acf.csv");
    let mut w = csv::Writer::from_path(&acf_path).map_err(|e| CliError::Data(e.to_string()))?;
    w.write_record(["node", "channel", "lag", "acf"])
        .map_err(|e| CliError::Data(e.to_string()))?;
    for (i, node) in panel.node_order().iter().enumerate() {
        for c in 0..CHANNELS {
            let series = panel.series(i, c);
            let values = acf(&series, max_lag)?;
            for (lag, v) in values.iter().enumerate() {
                w.write_record([
                    node.to_string(),
                    CHANNEL_NAMES[c].to_string(),
                    lag.to_string(),
                    format!("{v}"),
                ])
                .map_err(|e| CliError::Data(e.to_string()))?;
            }
        }
    }
    w.flush()?;

    let corr = edge_corr_matrix(&graph)?;
    let corr_path = config.paths.out_file("edge_corr.csv");
    let mut w = csv::Writer::from_path(&corr_path).map_err(|e| CliError::Data(e.to_string()))?;
    let mut header = vec!["attr".to_string()];
    header.extend(EDGE_ATTR_NAMES.iter().map(|s| s.to_string()));
    w.write_record(&header)
        .map_err(|e| CliError::Data(e.to_string()))?;
    for (i, name) in EDGE_ATTR_NAMES.iter().enumerate() {
        let mut row = vec![name.to_string()];
        for j in 0..EDGE_ATTR_NAMES.len() {
            row.push(format!("{}", corr.get(&[i, j])));
        }
        w.write_record(&row)
            .map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush()?;
    println!(
        "wrote {} (lags 0..={max_lag}) and {}",
        acf_path.display(),
        corr_path.display()
    );
    Ok(())
}

/// Split, normalize, and window a panel; returns physical-unit splits too.
struct Prepared {
    norm: hydronet_core::dataset::NormStats,
    train_windows: Vec<Window>,
    val_windows: Vec<Window>,
    /// Test windows in physical units, for denormalized scoring.
    test_windows_raw: Vec<Window>,
    /// Absolute panel step where the test split begins.
    test_begin: usize,
}

fn prepare(config: &RunConfig, panel: &TimeSeriesPanel) -> Result<Prepared, CliError> {
    let (train_p, val_p, test_p) = chronological_split(panel, &config.split, Some(&config.window))?;
    let norm = fit_normalizer(&train_p, config.per_node_norm)?;
    let train_n = apply_normalizer(&train_p, &norm);
    let val_n = apply_normalizer(&val_p, &norm);
    Ok(Prepared {
        train_windows: make_windows(&train_n, &config.window)?,
        val_windows: make_windows(&val_n, &config.window)?,
        test_windows_raw: make_windows(&test_p, &config.window)?,
        test_begin: train_p.len() + val_p.len(),
        norm,
    })
}

fn cmd_train(config: &RunConfig) -> Result<(), CliError> {
    let graph = load_graph(config)?;
    let panel = load_panel(&config.paths.panel_path(), &graph)?;
    let prepared = prepare(config, &panel)?;
    let (ckpt, history) = train(
        &graph,
        &prepared.train_windows,
        &prepared.val_windows,
        &prepared.norm,
        &config.model,
        &config.train,
    )?;
    ensure_out_dir(config)?;
    let ckpt_path = config.paths.checkpoint_path();
    save_checkpoint(&ckpt, &ckpt_path)?;
    let history_path = config.paths.out_file("history.csv");
    let mut text = String::from("epoch,train_loss,val_loss\n");
    for e in &history {
        writeln!(text, "{},{},{}", e.epoch, e.train_loss, e.val_loss).expect("string write");
    }
    fs::write(&history_path, text)?;
    println!(
        "trained {} epochs; best val loss {:.6} at epoch {}; wrote {} and {}",
        history.len(),
        ckpt.best_val_loss,
        ckpt.epoch,
        ckpt_path.display(),
        history_path.display()
    );
    Ok(())
}

fn format_mape(m: Option<f64>) -> String {
    match m {
        Some(v) => format!("{v:.6}"),
        None => "-".into(),
    }
}

fn report_rows(source: &str, report: &MetricReport) -> Vec<[String; 6]> {
    [(&report.depth, "depth"), (&report.flow, "flow")]
        .iter()
        .map(|(ch, name)| {
            [
                source.to_string(),
                name.to_string(),
                format!("{:.6}", ch.mae),
                format!("{:.6}", ch.rmse),
                format_mape(ch.mape),
                ch.mape_excluded.to_string(),
            ]
        })
        .collect()
}

fn cmd_evaluate(config: &RunConfig) -> Result<(), CliError> {
    let graph = load_graph(config)?;
    let panel = load_panel(&config.paths.panel_path(), &graph)?;
    let ckpt = load_checkpoint(&config.paths.checkpoint_path())?;
    let prepared = prepare(config, &panel)?;

    let model_report = evaluate(&ckpt, &prepared.test_windows_raw, &graph)?;
    let persistence_report = evaluate_persistence(&prepared.test_windows_raw)?;

    // Seasonal-naive reads true history from the full panel; windows whose
    // origin lacks a period of history are skipped.
    let mut seasonal_pairs = Vec::new();
    for w in &prepared.test_windows_raw {
        let origin = prepared.test_begin + w.start + config.window.lookback;
        match seasonal_naive_forecast(&panel, origin, config.detect.period, config.window.horizon)
        {
            Ok(p) => seasonal_pairs.push((p, &w.target)),
            Err(EvalError::InsufficientHistory { .. }) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    let seasonal_report = if seasonal_pairs.is_empty() {
        None
    } else {
        Some(score_pairs(seasonal_pairs.iter().map(|(p, t)| (p, *t)))?)
    };

    let mut rows = report_rows("hydronet", &model_report);
    rows.extend(report_rows("persistence", &persistence_report));
    if let Some(r) = &seasonal_report {
        rows.extend(report_rows("seasonal", r));
    }

    ensure_out_dir(config)?;
    let metrics_path = config.paths.out_file("metrics.csv");
    let mut text = String::from("source,channel,mae,rmse,mape,mape_excluded\n");
    for row in &rows {
        writeln!(text, "{}", row.join(",")).expect("string write");
    }
    fs::write(&metrics_path, &text)?;

    println!(
        "{:<12} {:<7} {:>10} {:>10} {:>10} {:>9}",
        "source", "channel", "mae", "rmse", "mape", "excluded"
    );
    for row in &rows {
        println!(
            "{:<12} {:<7} {:>10} {:>10} {:>10} {:>9}",
            row[0], row[1], row[2], row[3], row[4], row[5]
        );
    }
    println!("wrote {}", metrics_path.display());
    Ok(())
}

fn cmd_forecast(config: &RunConfig, at: Option<usize>) -> Result<(), CliError> {
    let graph = load_graph(config)?;
    let panel = load_panel(&config.paths.panel_path(), &graph)?;
    let ckpt = load_checkpoint(&config.paths.checkpoint_path())?;
    ckpt.verify_graph(&graph)?;
    let l = ckpt.model_config.lookback;
    let at = at.unwrap_or(panel.len());
    if at < l || at > panel.len() {
        return Err(CliError::Config(format!(
            "--at {at} needs {l} history steps inside the {}-step panel",
            panel.len()
        )));
    }

    let n = panel.node_count();
    let row = n * CHANNELS;
    let mut window = Tensor::zeros(&[l, n, CHANNELS]);
    window
        .data_mut()
        .copy_from_slice(&panel.values().data()[(at - l) * row..at * row]);
    let model = HydroNet::new(ckpt.model_config.clone(), &graph)?;
    let x = ckpt.norm.normalize_tensor(&window);
    let y = model.forward(&x, &ckpt.params)?;
    let forecast = ckpt.norm.denormalize_tensor(&y);

    ensure_out_dir(config)?;
    let path = config.paths.out_file("forecast.csv");
    let mut text = String::from("step,node,depth,flow\n");
    for k in 0..ckpt.model_config.horizon {
        for (i, node) in panel.node_order().iter().enumerate() {
            writeln!(
                text,
                "{},{},{},{}",
                at + k,
                node,
                forecast.get(&[k, i, 0]),
                forecast.get(&[k, i, 1])
            )
            .expect("string write");
        }
    }
    fs::write(&path, text)?;
    println!(
        "wrote {} ({} steps × {} nodes from step {at})",
        path.display(),
        ckpt.model_config.horizon,
        n
    );
    Ok(())
}

fn cmd_detect(config: &RunConfig, clean_panel: Option<PathBuf>) -> Result<(), CliError> {
    let graph = load_graph(config)?;
    let panel = load_panel(&config.paths.panel_path(), &graph)?;
    let ckpt = load_checkpoint(&config.paths.checkpoint_path())?;
    ckpt.verify_graph(&graph)?;
    let model = HydroNet::new(ckpt.model_config.clone(), &graph)?;
    let l = ckpt.model_config.lookback;

    // Residual moments come from the clean panel's validation slice.
    let clean = match &clean_panel {
        Some(p) => load_panel(p, &graph)?,
        None => panel.clone(),
    };
    let (train_p, val_p, _) = chronological_split(&clean, &config.split, Some(&config.window))?;
    let val_begin = train_p.len();
    let context = clean.slice(val_begin - l, val_begin + val_p.len());
    let (val_forecast, offset) =
        rolling_one_step_forecast(&model, &ckpt.params, &ckpt.norm, &context, l)?;
    let stats = fit_residual_stats(&context, &val_forecast, offset)?;

    let (scan_forecast, scan_offset) =
        rolling_one_step_forecast(&model, &ckpt.params, &ckpt.norm, &panel, l)?;
    let events = detect_anomalies(
        &panel,
        &scan_forecast,
        scan_offset,
        &stats,
        config.detect.threshold,
        config.detect.min_duration,
    )?;

    ensure_out_dir(config)?;
    let path = config.paths.out_file("events.csv");
    let mut text = String::from("node,channel,start,end,peak_z\n");
    for e in &events {
        writeln!(
            text,
            "{},{},{},{},{}",
            e.node, e.channel, e.start, e.end, e.peak_z
        )
        .expect("string write");
    }
    fs::write(&path, text)?;
    for e in &events {
        println!(
            "event node={} channel={} steps={}..{} peak_z={:.2}",
            e.node, e.channel, e.start, e.end, e.peak_z
        );
    }
    println!("wrote {} ({} events)", path.display(), events.len());
    Ok(())
}

/// Deterministic pseudo-random fill that stays clear of relu/abs kinks.
fn probe(shape: &[usize], salt: u64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    let mut state = salt.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    for v in t.data_mut() {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        let u = (state >> 11) as f64 / (1u64 << 53) as f64; // [0,1)
        let mag = 0.05 + 0.9 * u;
        *v = if state & 1 == 0 { mag } else { -mag };
    }
    t
}

fn demo_chain() -> PipeGraph {
    let edge = |from: &str, to: &str, d: f64, s: f64| PipeEdge {
        from: from.into(),
        to: to.into(),
        length: 300.0 + d * 100.0,
        roughness: 0.011 + s,
        diameter: d,
        slope: s,
        gis_length: 310.0 + d * 90.0,
        max_flow: 2.0 + d,
        max_velocity: 3.0 + s * 10.0,
        max_over_full_flow: 0.5 + s,
        max_over_full_depth: 0.4 + s,
    };
    hydronet_core::graph::build_graph(
        vec!["A".into(), "B".into(), "C".into()],
        vec![edge("A", "B", 1.0, 0.01), edge("B", "C", 1.5, 0.02)],
        "C".into(),
    )
    .expect("demo chain is valid")
}

fn cmd_gradcheck() -> Result<(), CliError> {
    const TOLERANCE: f64 = 1e-4;
    let mut rows: Vec<(&'static str, f64)> = Vec::new();

    let mut check = |name: &'static str,
                     inputs: Vec<Tensor>,
                     f: &dyn Fn(&mut Tape, &[hydronet_core::tensor::TapeId]) -> hydronet_core::tensor::TapeId| {
        let report = finite_diff_check(&inputs, 1e-6, f);
        rows.push((name, report.max_rel_error));
    };

    check("matmul", vec![probe(&[3, 4], 1), probe(&[4, 2], 2)], &|tape, ids| {
        let y = tape.matmul(ids[0], ids[1]).unwrap();
        let sq = tape.mul(y, y).unwrap();
        tape.mean(sq)
    });
    check(
        "conv1d",
        vec![probe(&[6, 2, 3], 3), probe(&[2, 3, 2], 4), probe(&[2], 5)],
        &|tape, ids| {
            let y = tape.conv1d(ids[0], ids[1], ids[2]).unwrap();
            let sq = tape.mul(y, y).unwrap();
            tape.mean(sq)
        },
    );
    check("add", vec![probe(&[4, 3], 6), probe(&[3], 7)], &|tape, ids| {
        let y = tape.add(ids[0], ids[1]).unwrap();
        let sq = tape.mul(y, y).unwrap();
        tape.mean(sq)
    });
    check("sub", vec![probe(&[4, 3], 8), probe(&[4, 3], 9)], &|tape, ids| {
        let y = tape.sub(ids[0], ids[1]).unwrap();
        let sq = tape.mul(y, y).unwrap();
        tape.mean(sq)
    });
    check("mul", vec![probe(&[4, 3], 10), probe(&[3], 11)], &|tape, ids| {
        let y = tape.mul(ids[0], ids[1]).unwrap();
        tape.mean(y)
    });
    check("sigmoid", vec![probe(&[5], 12)], &|tape, ids| {
        let y = tape.sigmoid(ids[0]);
        let sq = tape.mul(y, y).unwrap();
        tape.mean(sq)
    });
    check("tanh", vec![probe(&[5], 13)], &|tape, ids| {
        let y = tape.tanh(ids[0]);
        let sq = tape.mul(y, y).unwrap();
        tape.mean(sq)
    });
    check("relu", vec![probe(&[6], 14)], &|tape, ids| {
        let y = tape.relu(ids[0]);
        let sq = tape.mul(y, y).unwrap();
        tape.mean(sq)
    });
    check("abs", vec![probe(&[6], 15)], &|tape, ids| {
        let y = tape.abs(ids[0]);
        let sq = tape.mul(y, y).unwrap();
        tape.mean(sq)
    });
    check(
        "concat",
        vec![probe(&[3, 2], 16), probe(&[3, 4], 17)],
        &|tape, ids| {
            let y = tape.concat(&[ids[0], ids[1]], 1).unwrap();
            let sq = tape.mul(y, y).unwrap();
            tape.mean(sq)
        },
    );
    check("scatter_sum", vec![probe(&[4, 3], 18)], &|tape, ids| {
        let y = tape.scatter_sum(ids[0], &[0, 2, 1, 0], 3).unwrap();
        let sq = tape.mul(y, y).unwrap();
        tape.mean(sq)
    });
    check("gather_rows", vec![probe(&[3, 4], 19)], &|tape, ids| {
        let y = tape.gather_rows(ids[0], &[2, 0, 2, 1]).unwrap();
        let sq = tape.mul(y, y).unwrap();
        tape.mean(sq)
    });
    check("reshape", vec![probe(&[2, 6], 20)], &|tape, ids| {
        let y = tape.reshape(ids[0], vec![3, 4]).unwrap();
        let sq = tape.mul(y, y).unwrap();
        tape.mean(sq)
    });
    check("permute", vec![probe(&[2, 3, 4], 21)], &|tape, ids| {
        let y = tape.permute(ids[0], &[2, 0, 1]).unwrap();
        let sq = tape.mul(y, y).unwrap();
        tape.mean(sq)
    });
    check("sum", vec![probe(&[7], 22)], &|tape, ids| tape.sum(ids[0]));
    check("scale", vec![probe(&[7], 23)], &|tape, ids| {
        let y = tape.scale(ids[0], 1.7);
        let sq = tape.mul(y, y).unwrap();
        tape.mean(sq)
    });
    check("mean", vec![probe(&[2, 3], 24)], &|tape, ids| {
        let sq = tape.mul(ids[0], ids[0]).unwrap();
        tape.mean(sq)
    });

    // Full model: every parameter plus the input window, through the
    // training loss. The loss is scaled down so the finite-difference
    // rounding floor stays below the tolerance for vanishing gradients.
    let graph = demo_chain();
    let model_config = hydronet_core::model::HydroNetConfig {
        lookback: 6,
        horizon: 3,
        hidden_channels: 4,
        edge_embed_dim: 3,
        temporal_kernel: 2,
        blocks: 2,
        bidirectional: false,
        seed: 7,
    };
    let params = hydronet_core::model::init_params(&model_config).map_err(CliError::from)?;
    let model = HydroNet::new(model_config, &graph).map_err(CliError::from)?;
    let window = probe(&[6, 3, CHANNELS], 25);
    let target = probe(&[3, 3, CHANNELS], 26);
    let mut inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    inputs.push(window);
    let n_params = params.len();
    let report = finite_diff_check(&inputs, 1e-6, |tape, ids| {
        let bound = BoundParams::new(&params, &ids[..n_params]);
        let out = model.forward_on_tape(tape, ids[n_params], &bound).unwrap();
        let t = tape.constant(target.clone());
        let diff = tape.sub(out, t).unwrap();
        let sq = tape.mul(diff, diff).unwrap();
        let m = tape.mean(sq);
        tape.scale(m, 1e-3)
    });
    rows.push(("hydronet", report.max_rel_error));

    let mut failed = Vec::new();
    println!("{:<12} {:>14} {:>6}", "op", "max_rel_error", "status");
    for (name, err) in &rows {
        let ok = *err < TOLERANCE;
        println!(
            "{:<12} {:>14.3e} {:>6}",
            name,
            err,
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            failed.push(*name);
        }
    }
    if failed.is_empty() {
        println!("all {} checks below {TOLERANCE:<.0e}", rows.len());
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "gradcheck failed for {}",
            failed.join(", ")
        )))
    }
}
