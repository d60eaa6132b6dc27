//! Command-line pipeline: synthesize or ingest session data, build the
//! attributed graph, train, evaluate, and run the robustness harnesses.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, missing input files),
//! 2 data or runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use attrgau::backbone::{BackboneParams, EncodeConfig};
use attrgau::data::{
    load_events, preprocess, save_events, subsample_train, synth_generate, DatasetBundle,
    PreprocessOptions, SynthConfig,
};
use attrgau::eval::{
    attribute_proximity_mrr, grouped_metrics, inject_noise, write_plot_data, AttributeLevel,
    MetricsReport, ScoringModel,
};
use attrgau::graph::{load_attribute_records, save_attribute_records, AttributedGraph};
use attrgau::trainer::{ablation_switches, fit, ModelVariant, TrainConfig};

/// Environment variable holding the default data directory; relative
/// paths are resolved against it when set.
const DATA_DIR_ENV: &str = "ATTRGAU_DATA_DIR";

#[derive(Parser)]
#[command(
    name = "attrgau",
    about = "Attribute-aware graph enhancement for session-based recommendation",
    long_about = "Pipeline for session-based recommendation with a bipartite attributed \
                  item/attribute graph. File formats:\n\
                  - events: TSV `session_id<TAB>timestamp_ms<TAB>item_id`, `#` comments\n\
                  - attributes: header `#items=<n> parents=<n> leaves=<n>`, then TSV \
                  `item<TAB>parent<TAB>leaf`\n\
                  - bundle / graph / params: versioned binary caches produced by the \
                  preprocess, build-graph, and train commands\n\
                  Relative paths resolve against $ATTRGAU_DATA_DIR when it is set. All \
                  randomness derives from --seed through named sub-streams (init, dropout, \
                  shuffle, contrast, noise, synth, subsample)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted attribute structure.
    Synth(SynthArgs),
    /// Parse raw events and attributes into a preprocessed bundle cache.
    Preprocess(PreprocessArgs),
    /// Build the normalized attributed-graph cache from a bundle.
    BuildGraph(BuildGraphArgs),
    /// Train a model and write a parameter checkpoint plus a report.
    Train(TrainArgs),
    /// Score the test split of a bundle with a trained checkpoint.
    Evaluate(EvaluateArgs),
    /// Attribute-proximity analysis of the test sessions.
    AnalyzeAttributes(AnalyzeArgs),
    /// Sparsity robustness: retrain on training-data fractions.
    Robustness(RobustnessArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Catalog size.
    #[arg(long, default_value_t = 200)]
    items: usize,
    /// Number of parent attributes.
    #[arg(long, default_value_t = 4)]
    parents: usize,
    /// Number of leaf attributes.
    #[arg(long, default_value_t = 10)]
    leaves: usize,
    /// Number of sessions to generate.
    #[arg(long, default_value_t = 5000)]
    sessions: usize,
    /// Probability that the next item shares the current item's leaf.
    #[arg(long, default_value_t = 0.9)]
    coherence: f64,
    /// Shortest generated session.
    #[arg(long, default_value_t = 2)]
    min_len: usize,
    /// Longest generated session.
    #[arg(long, default_value_t = 6)]
    max_len: usize,
    /// Zipf exponent of the item popularity profile (0 = uniform).
    #[arg(long, default_value_t = 0.8)]
    popularity: f64,
    /// Rotate the popularity ranking for sessions past this fraction of
    /// the stream (models catalog drift).
    #[arg(long)]
    popularity_shift_at: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for events.tsv and attributes.tsv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Events file (TSV).
    #[arg(long)]
    events: PathBuf,
    /// Attributes file with the size header.
    #[arg(long)]
    attributes: PathBuf,
    /// Items occurring fewer times than this are dropped.
    #[arg(long, default_value_t = 5)]
    min_item_count: usize,
    /// Split events into sessions on gaps above this many minutes.
    #[arg(long)]
    session_gap_minutes: Option<i64>,
    /// Explicit test cutoff (epoch milliseconds); sessions starting at or
    /// after it become test data.
    #[arg(long)]
    test_cutoff_ms: Option<i64>,
    /// Fraction of most recent sessions used as test data when no
    /// explicit cutoff is given.
    #[arg(long, default_value_t = 0.1)]
    test_fraction: f64,
    /// Output bundle cache path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildGraphArgs {
    /// Preprocessed bundle cache.
    #[arg(long)]
    bundle: PathBuf,
    /// Propagation depth L.
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Output graph cache path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Preprocessed bundle cache.
    #[arg(long)]
    bundle: PathBuf,
    /// Graph cache (required for the enhanced variant).
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Flat key=value config file; command-line overrides win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides as key=value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Random seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation variant: full, wo-ccr, wo-align, wo-uniform.
    #[arg(long, default_value = "full")]
    variant: String,
    /// Train on this fraction of training sessions.
    #[arg(long)]
    fraction: Option<f64>,
    /// Output checkpoint path.
    #[arg(long)]
    out_params: PathBuf,
    /// Output report path.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Graph cache; omit to score through the raw channel only.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Trained checkpoint.
    #[arg(long)]
    params: PathBuf,
    /// Inject this ratio of noise items into test prefixes first.
    #[arg(long)]
    noise_ratio: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Break metrics into this many popularity groups.
    #[arg(long)]
    groups: Option<usize>,
    /// Write the per-group plot data (x = group, y = MRR@5) here.
    #[arg(long)]
    plot_out: Option<PathBuf>,
    /// GGNN propagation steps (must match training).
    #[arg(long, default_value_t = 1)]
    ggnn_steps: usize,
    /// Session truncation length (must match training).
    #[arg(long, default_value_t = 50)]
    max_session_len: usize,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Attribute level: parent, leaf, or both.
    #[arg(long, default_value = "both")]
    level: String,
}

#[derive(Args)]
struct RobustnessArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    /// Comma-separated training fractions, e.g. 0.25,0.5,0.75.
    #[arg(long, default_value = "0.25,0.5,0.75")]
    fractions: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sweep propagation depths instead of data fractions, e.g. 1,2,3,4.
    #[arg(long)]
    sweep_layers: Option<String>,
    /// Output directory for reports and plot data.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders --help/--version through the same path.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

enum CliError {
    /// Bad invocation: unreadable input paths, malformed flag values.
    Usage(String),
    /// Data or runtime failure inside the pipeline.
    Runtime(attrgau::Error),
}

impl From<attrgau::Error> for CliError {
    fn from(e: attrgau::Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult = Result<(), CliError>;

/// Resolve a path against $ATTRGAU_DATA_DIR when it is relative.
fn resolve(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir).join(path),
        _ => path.to_path_buf(),
    }
}

/// Inputs must exist up front; a missing input is a usage error.
fn require_input(path: &Path) -> Result<PathBuf, CliError> {
    let resolved = resolve(path);
    if !resolved.is_file() {
        return Err(CliError::Usage(format!(
            "input file '{}' does not exist",
            resolved.display()
        )));
    }
    Ok(resolved)
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Preprocess(args) => cmd_preprocess(args),
        Command::BuildGraph(args) => cmd_build_graph(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::AnalyzeAttributes(args) => cmd_analyze(args),
        Command::Robustness(args) => cmd_robustness(args),
    }
}

fn cmd_synth(args: SynthArgs) -> CliResult {
    let config = SynthConfig {
        num_items: args.items,
        num_parents: args.parents,
        num_leaves: args.leaves,
        num_sessions: args.sessions,
        coherence: args.coherence,
        min_session_len: args.min_len,
        max_session_len: args.max_len,
        popularity_exponent: args.popularity,
        popularity_shift_at: args.popularity_shift_at,
    };
    let (events, records) = synth_generate(&config, args.seed)?;
    let out = resolve(&args.out);
    std::fs::create_dir_all(&out).map_err(attrgau::Error::from)?;
    let events_path = out.join("events.tsv");
    let attrs_path = out.join("attributes.tsv");
    save_events(&events_path, &events)?;
    save_attribute_records(&attrs_path, &records)?;
    println!(
        "wrote {} events to {} and {} attribute triples to {}",
        events.len(),
        events_path.display(),
        records.triples.len(),
        attrs_path.display()
    );
    Ok(())
}

fn cmd_preprocess(args: PreprocessArgs) -> CliResult {
    let events_path = require_input(&args.events)?;
    let attrs_path = require_input(&args.attributes)?;
    let events = load_events(&events_path)?;
    let records = load_attribute_records(&attrs_path)?;
    let opts = PreprocessOptions {
        min_item_count: args.min_item_count,
        session_gap_ms: args.session_gap_minutes.map(|m| m * 60_000),
        test_cutoff_ms: args.test_cutoff_ms,
        test_fraction: args.test_fraction,
    };
    let bundle = preprocess(&events, &records, &opts)?;
    let out = resolve(&args.out);
    bundle.save(&out)?;
    let s = &bundle.stats;
    println!(
        "bundle: {} train sessions ({} examples), {} test sessions ({} examples), \
         {} items, {} parents, {} leaves, avg len {:.2}, {} attribute triples dropped",
        s.train_sessions,
        s.train_examples,
        s.test_sessions,
        s.test_examples,
        s.num_items,
        s.num_parents,
        s.num_leaves,
        s.avg_session_len,
        s.dropped_triples
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_build_graph(args: BuildGraphArgs) -> CliResult {
    let bundle_path = require_input(&args.bundle)?;
    let bundle = DatasetBundle::load(&bundle_path)?;
    let graph = AttributedGraph::build(&bundle.records, args.layers)?;
    let out = resolve(&args.out);
    graph.save(&out)?;
    println!(
        "graph: {} nodes ({} items, {} parents, {} leaves), {} propagation entries, L={}",
        graph.node_count(),
        graph.num_items,
        graph.num_parents,
        graph.num_leaves,
        graph.norm_adjacency.nnz(),
        graph.num_layers
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn parse_override(spec: &str) -> Result<(&str, &str), CliError> {
    spec.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| CliError::Usage(format!("override '{spec}' is not KEY=VALUE")))
}

fn load_train_config(
    config_path: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
    variant: &str,
) -> Result<TrainConfig, CliError> {
    let mut config = match config_path {
        Some(path) => {
            let path = require_input(path)?;
            TrainConfig::from_file(&path)?
        }
        None => TrainConfig::default(),
    };
    for spec in overrides {
        let (key, value) = parse_override(spec)?;
        config
            .apply_kv(key, value)
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let ablation = match variant {
        "full" => "full",
        "wo-ccr" => "w/o L_ccr",
        "wo-align" => "w/o L_align",
        "wo-uniform" => "w/o L_uniform",
        other => {
            return Err(CliError::Usage(format!(
                "unknown variant '{other}' (expected full, wo-ccr, wo-align, wo-uniform)"
            )))
        }
    };
    let config = ablation_switches(config, ablation)?;
    config.validate()?;
    Ok(config)
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let bundle_path = require_input(&args.bundle)?;
    let mut bundle = DatasetBundle::load(&bundle_path)?;
    let config = load_train_config(
        args.config.as_deref(),
        &args.overrides,
        args.seed,
        &args.variant,
    )?;
    if let Some(fraction) = args.fraction {
        bundle = subsample_train(&bundle, fraction, config.seed)?;
    }
    let graph = match (&config.variant, &args.graph) {
        (ModelVariant::Enhanced, Some(path)) => Some(AttributedGraph::load(require_input(path)?)?),
        (ModelVariant::Enhanced, None) => {
            return Err(CliError::Usage(
                "enhanced training requires --graph; pass --set variant=vanilla to train without"
                    .into(),
            ))
        }
        (ModelVariant::Vanilla, _) => None,
    };

    let (params, report) = fit(&bundle, graph.as_ref(), &config)?;
    let params_path = resolve(&args.out_params);
    let report_path = resolve(&args.report);
    params.save(&params_path)?;
    report.save(&report_path)?;
    for line in report.canonical_lines() {
        println!("{line}");
    }
    eprintln!("# wall_clock_s={:.3}", report.wall_clock_seconds);
    println!(
        "wrote {} and {}",
        params_path.display(),
        report_path.display()
    );
    Ok(())
}

fn print_metrics(label: &str, m: &MetricsReport) {
    println!(
        "{label} examples={} hr5={:.4} mrr5={:.4} hr10={:.4} mrr10={:.4}",
        m.example_count, m.hr5, m.mrr5, m.hr10, m.mrr10
    );
    if let Some(groups) = &m.per_group {
        for g in groups {
            println!(
                "group={} examples={} hr5={:.4} mrr5={:.4} hr10={:.4} mrr10={:.4}",
                g.group, g.example_count, g.hr5, g.mrr5, g.hr10, g.mrr10
            );
        }
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> CliResult {
    let bundle = DatasetBundle::load(require_input(&args.bundle)?)?;
    let params = BackboneParams::load(require_input(&args.params)?)?;
    let graph = match &args.graph {
        Some(path) => Some(AttributedGraph::load(require_input(path)?)?),
        None => None,
    };
    let examples = match args.noise_ratio {
        Some(ratio) => inject_noise(&bundle.test, ratio, args.seed, bundle.num_items())?,
        None => bundle.test.clone(),
    };
    let scoring = ScoringModel {
        params: &params,
        graph: graph.as_ref(),
        encode: EncodeConfig {
            ggnn_steps: args.ggnn_steps,
            max_session_len: args.max_session_len,
            ..EncodeConfig::default()
        },
    };
    let report = match args.groups {
        Some(groups) => {
            let scores = scoring.score_examples(&examples)?;
            let counts = bundle.train_interaction_counts();
            grouped_metrics(&scores, &examples, &counts, groups)?
        }
        None => scoring.evaluate(&examples)?,
    };
    print_metrics("test", &report);
    if let (Some(plot_path), Some(groups)) = (&args.plot_out, &report.per_group) {
        let points: Vec<(f64, f64)> = groups.iter().map(|g| (g.group as f64, g.mrr5)).collect();
        let path = resolve(plot_path);
        let mut w =
            std::io::BufWriter::new(std::fs::File::create(&path).map_err(attrgau::Error::from)?);
        write_plot_data(&mut w, "group", "mrr5", &points)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> CliResult {
    let bundle = DatasetBundle::load(require_input(&args.bundle)?)?;
    let levels: Vec<(&str, AttributeLevel)> = match args.level.as_str() {
        "parent" => vec![("parent", AttributeLevel::Parent)],
        "leaf" => vec![("leaf", AttributeLevel::Leaf)],
        "both" => vec![
            ("parent", AttributeLevel::Parent),
            ("leaf", AttributeLevel::Leaf),
        ],
        other => {
            return Err(CliError::Usage(format!(
                "unknown level '{other}' (expected parent, leaf, both)"
            )))
        }
    };
    for (name, level) in levels {
        let mrr = attribute_proximity_mrr(&bundle.test, &bundle.records, level);
        println!("proximity_mrr level={name} value={mrr:.4}");
    }
    Ok(())
}

fn cmd_robustness(args: RobustnessArgs) -> CliResult {
    let bundle = DatasetBundle::load(require_input(&args.bundle)?)?;
    let graph = AttributedGraph::load(require_input(&args.graph)?)?;
    let base_config =
        load_train_config(args.config.as_deref(), &args.overrides, args.seed, "full")?;
    let out = resolve(&args.out);
    std::fs::create_dir_all(&out).map_err(attrgau::Error::from)?;

    if let Some(layer_spec) = &args.sweep_layers {
        // Depth sweep: retrain at each L and plot test MRR@5 against L.
        let mut points = Vec::new();
        for part in layer_spec.split(',') {
            let layers: usize = part
                .trim()
                .parse()
                .map_err(|e| CliError::Usage(format!("bad layer count '{part}': {e}")))?;
            let graph = AttributedGraph::build(&bundle.records, layers)?;
            let mut config = base_config.clone();
            config.num_layers = layers;
            let (_, report) = fit(&bundle, Some(&graph), &config)?;
            let report_path = out.join(format!("report_layers{layers}.txt"));
            report.save(&report_path)?;
            println!(
                "layers={} best_mrr5={:.4} epochs={}",
                layers,
                report.best_mrr5,
                report.epochs.len()
            );
            points.push((layers as f64, report.best_mrr5));
        }
        let plot_path = out.join("depth_sweep.tsv");
        let mut w = std::io::BufWriter::new(
            std::fs::File::create(&plot_path).map_err(attrgau::Error::from)?,
        );
        write_plot_data(&mut w, "layers", "mrr5", &points)?;
        println!("wrote {}", plot_path.display());
        return Ok(());
    }

    // Sparsity protocol: for each fraction, train the enhanced model and
    // the vanilla baseline on the same subsample and report the gain.
    let mut points = Vec::new();
    for part in args.fractions.split(',') {
        let fraction: f64 = part
            .trim()
            .parse()
            .map_err(|e| CliError::Usage(format!("bad fraction '{part}': {e}")))?;
        let sub = subsample_train(&bundle, fraction, base_config.seed)?;

        let enhanced_cfg = base_config.clone();
        let (_, enhanced) = fit(&sub, Some(&graph), &enhanced_cfg)?;
        enhanced.save(out.join(format!("report_f{fraction}_enhanced.txt")))?;

        let vanilla_cfg = TrainConfig {
            variant: ModelVariant::Vanilla,
            ..base_config.clone()
        };
        let (_, vanilla) = fit(&sub, None, &vanilla_cfg)?;
        vanilla.save(out.join(format!("report_f{fraction}_vanilla.txt")))?;

        let gain = if vanilla.best_mrr5 > 0.0 {
            100.0 * (enhanced.best_mrr5 - vanilla.best_mrr5) / vanilla.best_mrr5
        } else {
            0.0
        };
        println!(
            "fraction={} enhanced_mrr5={:.4} vanilla_mrr5={:.4} gain_pct={:.2}",
            fraction, enhanced.best_mrr5, vanilla.best_mrr5, gain
        );
        points.push((fraction, gain));
    }
    let plot_path = out.join("sparsity_gain.tsv");
    let mut w =
        std::io::BufWriter::new(std::fs::File::create(&plot_path).map_err(attrgau::Error::from)?);
    write_plot_data(&mut w, "fraction", "mrr5_gain_pct", &points)?;
    println!("wrote {}", plot_path.display());
    Ok(())
}
