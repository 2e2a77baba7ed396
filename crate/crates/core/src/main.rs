use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use gicl::encoder;
use gicl::graph::{load_bundle, synth_sbm, write_bundle, write_split_file, LoadOptions, SbmParams, SplitSpec, TagGraph};
use gicl::pipeline::{
    evaluate_accuracy, file_hash, read_report_rows, run_strategy, run_sweep, write_report, write_sweep_csv,
    InferSetup, PurifyMode, RunConfig, RunManifest, Strategy, SweepAxis,
};
use gicl::prompt::PromptTemplate;
use gicl::scorer::stub::{load_fixture, StubReply, StubServer};
use gicl::scorer::{ScoreCache, Scorer, ScorerKind, ScoringContext};
use gicl::trainer::{self, TrainedModel, PARAMS_FILE};
use gicl::{Error, Result};

#[derive(Parser)]
#[command(name = "gicl", version, about = "Train a graph retriever from language-model feedback and pick in-context examples")]
struct Cli {
    /// Run every parallel stage on one thread (reproducible output).
    #[arg(long, global = true)]
    single_thread: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a bundle and write its label split if it has none.
    Prepare {
        dir: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        label_fraction: f64,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        /// Replace an existing splits.json.
        #[arg(long)]
        force: bool,
    },
    /// Write a stochastic block model bundle.
    Synth {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 0.05)]
        pin: f64,
        #[arg(long, default_value_t = 0.005)]
        pout: f64,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 0.6)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the retriever and save the model.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Collect one round of feedback and write it as JSONL.
    Feedback {
        #[command(flatten)]
        run: RunArgs,
        /// Use this model's parameters instead of a fresh initialization.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Classify the test nodes with a trained retriever.
    Infer {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "askgnn")]
        strategy: Strategy,
    },
    /// Classify the test nodes with a baseline strategy.
    Baseline {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        strategy: Strategy,
        /// Needed by mv_askgnn and npg.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Recompute the summary of a report CSV.
    Eval {
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and evaluate over a range of beta or k_icl values.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Serve canned or echoed completions on a local port.
    StubServer {
        #[arg(long, default_value = "127.0.0.1:8089")]
        addr: String,
        /// JSONL rules; unmatched prompts get the echo reply.
        #[arg(long)]
        fixture: Option<PathBuf>,
        #[arg(long, default_value_t = -1.0)]
        echo_logprob: f64,
        #[arg(long, default_value = "")]
        echo_text: String,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// JSON run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Score cache file (default: <out>/score_cache.jsonl).
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    directed: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    k_feedback: Option<usize>,
    #[arg(long)]
    k_icl: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    label_fraction: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Built-in template name or template file.
    #[arg(long)]
    template: Option<String>,
    /// none, minority[:N] or llm:N.
    #[arg(long)]
    purify: Option<PurifyMode>,
    #[arg(long)]
    test_limit: Option<usize>,
    /// oracle or http.
    #[arg(long)]
    scorer: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model_name: Option<String>,
}

impl Overrides {
    fn apply(&self, c: &mut RunConfig) -> Result<()> {
        let t = &mut c.train;
        set(&mut t.seed, self.seed);
        set(&mut t.beta, self.beta);
        set(&mut t.epochs, self.epochs);
        set(&mut t.rounds, self.rounds);
        set(&mut t.k_feedback, self.k_feedback);
        set(&mut t.lr, self.lr);
        set(&mut t.hidden_dim, self.hidden_dim);
        set(&mut t.n_layers, self.layers);
        set(&mut c.k_icl, self.k_icl);
        set(&mut c.label_fraction, self.label_fraction);
        set(&mut c.split_seed, self.split_seed);
        set(&mut c.template, self.template.clone());
        set(&mut c.purify, self.purify);
        if self.test_limit.is_some() {
            c.test_limit = self.test_limit;
        }
        if let Some(kind) = &self.scorer {
            c.scorer.kind = match kind.as_str() {
                "oracle" => ScorerKind::Oracle,
                "http" => ScorerKind::Http,
                other => return Err(Error::InvalidArgument(format!("unknown scorer {other:?}"))),
            };
        }
        set(&mut c.scorer.endpoint, self.endpoint.clone());
        set(&mut c.scorer.model, self.model_name.clone());
        Ok(())
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Inputs shared by every run command.
struct Session {
    args: RunArgs,
    config: RunConfig,
    graph: TagGraph,
    split: SplitSpec,
    template: PromptTemplate,
    scorer: Arc<dyn Scorer>,
    single_thread: bool,
}

impl Session {
    fn open(args: &RunArgs, single_thread: bool) -> Result<Self> {
        let mut config = match &args.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        args.overrides.apply(&mut config)?;
        config.train.validate()?;
        let graph = load_bundle(&args.bundle, LoadOptions { directed: args.directed })?;
        let split = config.split(&graph, Some(&args.bundle))?;
        let template = PromptTemplate::resolve(&config.template)?;
        let scorer = config.scorer.build(&graph)?;
        std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
        Ok(Self {
            args: args.clone(),
            config,
            graph,
            split,
            template,
            scorer,
            single_thread,
        })
    }

    fn manifest(&self, command: &str) -> RunManifest {
        RunManifest::new(
            command,
            &self.config,
            &self.graph.content_hash(),
            self.template.hash(),
            self.scorer.scorer_id(),
        )
    }

    fn cache(&self) -> Result<ScoreCache> {
        let path = self.args.cache.clone().unwrap_or_else(|| self.args.out.join("score_cache.jsonl"));
        ScoreCache::open(path)
    }

    fn scoring<'a>(&'a self, cache: &'a ScoreCache) -> Result<ScoringContext<'a>> {
        let mut ctx = ScoringContext::new(&self.graph, self.scorer.as_ref(), &self.template, cache, self.single_thread)?;
        ctx.render = self.config.render_options();
        Ok(ctx)
    }

    fn infer_setup(&self) -> InferSetup<'_> {
        InferSetup {
            graph: &self.graph,
            split: &self.split,
            scorer: self.scorer.as_ref(),
            template: &self.template,
            render: self.config.render_options(),
            k_icl: self.config.k_icl,
            purify: self.config.purify,
            seed: self.config.train.seed,
            single_thread: self.single_thread,
        }
    }
}

/// Writes pretty JSON to stdout; a closed pipe (e.g. `| head`) is not an error.
fn print_json(v: impl serde::Serialize) {
    use std::io::Write;
    let text = serde_json::to_string_pretty(&v).expect("json value");
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn cmd_train(s: &Session) -> Result<()> {
    let cache = s.cache()?;
    let ctx = s.scoring(&cache)?;
    let model = trainer::train(&s.graph, &s.split, &ctx, &s.config.train)?;
    model.save(&s.args.out)?;
    for set in &model.feedback {
        set.write_jsonl(&s.graph, &s.args.out.join(format!("feedback-round{}.jsonl", set.round)))?;
    }
    let mut manifest = s.manifest("train");
    manifest.model_hash = Some(file_hash(&s.args.out.join(PARAMS_FILE))?);
    let path = s.args.out.join("manifest.json");
    manifest.save(&path)?;
    let last = model.log.last();
    print_json(json!({
        "model": s.args.out,
        "manifest_hash": manifest.hash(),
        "epochs": model.log.len(),
        "final_loss": last.map(|r| r.loss_total),
        "feedback_coverage": model.feedback.iter().map(|f| f.coverage()).collect::<Vec<_>>(),
        "scorer_calls": s.scorer.call_count(),
    }));
    Ok(())
}

fn cmd_feedback(s: &Session, model: Option<&Path>) -> Result<()> {
    let cache = s.cache()?;
    let ctx = s.scoring(&cache)?;
    let enc = s.config.train.encoder_config(&s.graph);
    let (params, enc) = match model {
        Some(dir) => {
            let m = TrainedModel::load(dir, &s.graph)?;
            (m.params, m.encoder)
        }
        None => (encoder::init_params(&enc, s.config.train.seed)?, enc),
    };
    let input = encoder::EncoderInput::new(&s.graph);
    let set = trainer::collect_feedback_round(&input, &s.split, &params, &enc, &ctx, &s.config.train, 1)?;
    let mut manifest = s.manifest("feedback");
    if let Some(dir) = model {
        manifest.model_hash = Some(file_hash(&dir.join(PARAMS_FILE))?);
    }
    let path = s.args.out.join(format!("feedback-{}.jsonl", manifest.short_hash()));
    set.write_jsonl(&s.graph, &path)?;
    manifest.save(&s.args.out.join(format!("manifest-{}.json", manifest.short_hash())))?;
    print_json(json!({
        "feedback": path,
        "scored_pairs": set.scored_pairs,
        "unscored_pairs": set.unscored_pairs,
        "coverage": set.coverage(),
        "mean_utility": set.mean_utility(),
        "scorer_calls": s.scorer.call_count(),
    }));
    Ok(())
}

fn cmd_eval_strategy(s: &Session, strategy: Strategy, model_dir: Option<&Path>) -> Result<()> {
    let model = model_dir.map(|d| TrainedModel::load(d, &s.graph)).transpose()?;
    let rows = run_strategy(&s.infer_setup(), strategy, model.as_ref())?;
    let mut manifest = s.manifest(if model.is_some() && strategy == Strategy::AskGnn { "infer" } else { "baseline" });
    manifest.strategy = Some(strategy.name().to_string());
    if let Some(dir) = model_dir {
        manifest.model_hash = Some(file_hash(&dir.join(PARAMS_FILE))?);
    }
    let (paths, summary) = write_report(&s.args.out, &manifest, &rows)?;
    print_json(json!({
        "report": paths.rows,
        "summary": paths.summary,
        "accuracy": summary.accuracy,
        "n": summary.n,
        "unparsed": summary.unparsed,
        "manifest_hash": summary.manifest_hash,
        "scorer_calls": s.scorer.call_count(),
    }));
    Ok(())
}

fn cmd_sweep(s: &Session, axis: SweepAxis, values: &[f64]) -> Result<()> {
    let cache = s.cache()?;
    let ctx = s.scoring(&cache)?;
    let rows = run_sweep(&s.graph, &s.split, &ctx, &s.infer_setup(), &s.config, axis, values)?;
    let mut manifest = s.manifest("sweep");
    manifest.strategy = Some(format!("{axis:?}={values:?}"));
    let path = write_sweep_csv(&rows, &s.args.out, &format!("sweep-{}", manifest.short_hash()))?;
    manifest.save(&s.args.out.join(format!("manifest-{}.json", manifest.short_hash())))?;
    print_json(json!({ "sweep": path, "rows": rows }));
    Ok(())
}

fn cmd_eval(report: &Path) -> Result<()> {
    let rows = read_report_rows(report)?;
    let summary_path = report.with_extension("summary.json");
    let hash = std::fs::read(&summary_path)
        .ok()
        .and_then(|b| serde_json::from_slice::<serde_json::Value>(&b).ok())
        .and_then(|v| v.get("manifest_hash").and_then(|h| h.as_str()).map(String::from))
        .unwrap_or_default();
    let summary = evaluate_accuracy(&rows, &hash)?;
    print_json(&summary);
    Ok(())
}

fn cmd_prepare(dir: &Path, fraction: f64, seed: u64, force: bool) -> Result<()> {
    let graph = load_bundle(dir, LoadOptions::default())?;
    let existing = gicl::graph::load_split_file(dir, &graph)?;
    let split = match existing {
        Some(s) if !force => s,
        _ => {
            let s = gicl::graph::sample_label_fraction(&graph, fraction, seed)?;
            write_split_file(dir, &graph, &s)?;
            s
        }
    };
    print_json(json!({
        "nodes": graph.n_nodes(),
        "edges": graph.edge_list().len(),
        "classes": graph.n_classes(),
        "feature_dim": graph.feature_dim(),
        "labeled": split.labeled_ids().len(),
        "test": split.test_ids().len(),
        "bundle_hash": graph.content_hash(),
    }));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let st = cli.single_thread;
    if st {
        // retrieval and other data-parallel helpers use the global pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    match cli.command {
        Command::Prepare {
            dir,
            label_fraction,
            split_seed,
            force,
        } => cmd_prepare(&dir, label_fraction, split_seed, force),
        Command::Synth {
            n,
            classes,
            pin,
            pout,
            dim,
            noise,
            seed,
            out,
        } => {
            let g = synth_sbm(&SbmParams {
                n_nodes: n,
                n_classes: classes,
                p_in: pin,
                p_out: pout,
                dim,
                noise,
                seed,
            })?;
            write_bundle(&g, &out)?;
            print_json(json!({ "bundle": out, "nodes": g.n_nodes(), "bundle_hash": g.content_hash() }));
            Ok(())
        }
        Command::Train { run } => cmd_train(&Session::open(&run, st)?),
        Command::Feedback { run, model } => cmd_feedback(&Session::open(&run, st)?, model.as_deref()),
        Command::Infer { run, model, strategy } => cmd_eval_strategy(&Session::open(&run, st)?, strategy, Some(&model)),
        Command::Baseline { run, strategy, model } => {
            cmd_eval_strategy(&Session::open(&run, st)?, strategy, model.as_deref())
        }
        Command::Eval { report } => cmd_eval(&report),
        Command::Sweep { run, axis, values } => cmd_sweep(&Session::open(&run, st)?, axis, &values),
        Command::StubServer {
            addr,
            fixture,
            echo_logprob,
            echo_text,
        } => {
            let rules = fixture.as_deref().map(load_fixture).transpose()?.unwrap_or_default();
            let fallback = StubReply::Echo {
                logprob: echo_logprob,
                text: echo_text,
            };
            let server = StubServer::start(&addr, rules, fallback)?;
            eprintln!("serving completions at {}/v1/completions", server.endpoint());
            server.wait();
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
