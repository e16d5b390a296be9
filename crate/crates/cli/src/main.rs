//! `nri`: dataset generation, training, evaluation, prediction and gradient
//! checks for neural relational inference.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use nri_core::config::RunConfig;
use nri_core::evalsuite::{
    baseline_corr_path, baseline_static, burn_in_split, dynamic_reeval_predict, empty_graph_test,
    evaluate_checkpoint, horizon_mse, run_variant, EvalReport, ReportRow, Variant,
};
use nri_core::graphops::InteractionGraph;
use nri_core::model::edge_types;
use nri_core::noise::Stream;
use nri_core::sim::{generate_dataset, read_dataset, write_dataset, SPLITS};
use nri_core::tensorfile::{self, Tensor};
use nri_core::train::{eval_edges, split_time, train_run, Checkpoint, MANIFEST_FILE};
use nri_core::{Array, Error, NriModel, Objective, Result};

const RESOLVED_CONFIG: &str = "config.resolved.txt";
const DATA_MANIFEST: &str = "manifest.txt";
const THREADS_ENV: &str = "NRI_THREADS";

#[derive(Parser)]
#[command(
    name = "nri",
    version,
    about = "Neural relational inference on simulated particle systems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (`key = value` lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        load_config(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate train/valid/test trajectories into a directory.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes best/ and last/ checkpoints and curve.csv.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from out/last when present.
        #[arg(long)]
        resume: bool,
    },
    /// Edge accuracy and multi-step MSE on the test split, plus baselines.
    Eval {
        /// Training output directory, or a checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report directory (defaults to <checkpoint>/eval).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Configuration for baselines; defaults to the run's resolved echo.
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Repeat the last observed frame.
        #[arg(long = "static")]
        static_baseline: bool,
        /// Threshold on trajectory correlations.
        #[arg(long)]
        corr_path: bool,
        /// Train and evaluate a decoder on the fully connected graph.
        #[arg(long)]
        full_graph: bool,
        /// Train and evaluate a decoder on the ground-truth graph.
        #[arg(long)]
        true_graph: bool,
        /// Train and evaluate an encoder on ground-truth labels.
        #[arg(long)]
        supervised: bool,
        /// Fraction of pairs classified as non-edges on uncoupled simulations.
        #[arg(long)]
        empty_graph_test: bool,
        #[arg(long, default_value_t = 1000)]
        empty_count: usize,
    },
    /// Self-conditioned continuation of one trajectory.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Tensor file of shape [N, T, F] or [S, N, T, F].
        #[arg(long)]
        input: PathBuf,
        /// Trajectory to use from a 4-d input.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        steps: i64,
        #[arg(long)]
        out: PathBuf,
        /// Re-run the encoder on a sliding window at every step.
        #[arg(long)]
        dynamic: bool,
        /// Also write the inferred discrete graph.
        #[arg(long)]
        dump_edges: bool,
        /// Ground-truth graph file ([S, N, N] or [N, N]) for true-graph decoders.
        #[arg(long)]
        graphs: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// Deliberately break one primitive's backward rule (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => {
            fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => String::new(),
    };
    RunConfig::parse_with_overrides(&text, overrides)
}

fn ensure_empty_or_forced(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() && !force {
        return Err(Error::Config(format!(
            "{} is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn cmd_generate(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    ensure_empty_or_forced(out, force)?;
    info!(
        "generating {:?} trajectories of {}",
        cfg.counts,
        cfg.system.kind().name()
    );
    let data = generate_dataset(&cfg.system, cfg.counts, cfg.seed)?;
    write_dataset(out, &data)?;
    let mut m = String::new();
    writeln!(m, "format = nri-dataset-1").unwrap();
    writeln!(m, "system = {}", cfg.system.kind().name()).unwrap();
    writeln!(m, "seed = {}", cfg.seed).unwrap();
    writeln!(m, "system_hash = {}", cfg.system_hash()).unwrap();
    for name in SPLITS {
        let s = data.split(name).unwrap();
        writeln!(m, "{name}_states = {:?}", s.states.shape()).unwrap();
        writeln!(
            m,
            "{name}_graphs = [{}, {}, {}]",
            s.len(),
            s.n_objects(),
            s.n_objects()
        )
        .unwrap();
    }
    tensorfile::write_atomic(&out.join(DATA_MANIFEST), m.as_bytes())?;
    tensorfile::write_atomic(&out.join(RESOLVED_CONFIG), cfg.resolved().as_bytes())?;
    println!(
        "wrote {} trajectories to {}",
        cfg.counts.0 + cfg.counts.1 + cfg.counts.2,
        out.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, data_dir: &Path, out: &Path, resume: bool) -> Result<()> {
    let data = read_dataset(data_dir)?;
    let model = NriModel::new(cfg.model.clone())?;
    fs::create_dir_all(out)?;
    tensorfile::write_atomic(&out.join(RESOLVED_CONFIG), cfg.resolved().as_bytes())?;
    let t = &cfg.train;
    info!(
        "lr = {}, batch_size = {}, tau = {}, epochs = {}",
        t.adam.lr, t.batch_size, t.tau, t.epochs
    );
    let train_cfg = nri_core::TrainConfig {
        checkpoint_dir: Some(out.to_path_buf()),
        resume,
        ..t.clone()
    };
    let outcome = train_run(&model, &data, &train_cfg)?;
    println!(
        "trained {} epochs; best epoch {} with validation metric {:.6e}",
        outcome.curve.len(),
        outcome.best.epoch,
        outcome.best.val_metric
    );
    Ok(())
}

/// Resolves a training output directory or a checkpoint directory to
/// `(checkpoint dir, run dir)`.
fn locate_checkpoint(path: &Path) -> Result<(PathBuf, PathBuf)> {
    if path.join(MANIFEST_FILE).exists() {
        let run = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((path.to_path_buf(), run))
    } else if path.join("best").join(MANIFEST_FILE).exists() {
        Ok((path.join("best"), path.to_path_buf()))
    } else {
        Err(Error::Data(format!(
            "no checkpoint found at {}",
            path.display()
        )))
    }
}

/// Configuration for a checkpoint: explicit `--config`, else the echo next
/// to the checkpoint, else defaults; `--set` overrides apply in every case.
fn config_for_run(run_dir: &Path, args: &ConfigArgs) -> Result<RunConfig> {
    if args.config.is_some() {
        return args.load();
    }
    let echo = run_dir.join(RESOLVED_CONFIG);
    load_config(echo.exists().then_some(echo.as_path()), &args.overrides)
}

struct EvalFlags {
    static_baseline: bool,
    corr_path: bool,
    full_graph: bool,
    true_graph: bool,
    supervised: bool,
    empty_graph_test: bool,
    empty_count: usize,
}

fn cmd_eval(
    ckpt_path: &Path,
    data_dir: &Path,
    out: Option<&Path>,
    cfg_args: &ConfigArgs,
    flags: &EvalFlags,
) -> Result<()> {
    let (ckpt_dir, run_dir) = locate_checkpoint(ckpt_path)?;
    let ckpt = Checkpoint::load(&ckpt_dir)?;
    let cfg = config_for_run(&run_dir, cfg_args)?;
    let data = read_dataset(data_dir)?;
    let test = &data.test;
    if test.n_objects() != ckpt.model.n_objects {
        return Err(Error::Data(format!(
            "checkpoint models {} objects but the dataset has {}",
            ckpt.model.n_objects,
            test.n_objects()
        )));
    }
    let (burn_in, horizons) = (cfg.burn_in, cfg.horizons.clone());
    let chunk = cfg.train.batch_size;
    let main_name = match ckpt.objective {
        Objective::Elbo => "NRI (learned)",
        Objective::Decoder(nri_core::train::FixedGraph::Full) => "NRI (full graph)",
        Objective::Decoder(nri_core::train::FixedGraph::Truth) => "NRI (true graph)",
        Objective::Supervised => "Supervised",
    };
    let (mut main_row, acc) =
        evaluate_checkpoint(&ckpt, main_name, test, burn_in, &horizons, chunk)?;
    main_row.note = format!("epoch {}", ckpt.epoch);
    let k = acc
        .as_ref()
        .map_or_else(|| cfg.k_types(), |a| a.confusion.len());
    let mut report = EvalReport {
        system: cfg.system.kind().name().to_string(),
        n_objects: test.n_objects(),
        k_types: k,
        checkpoint: ckpt_dir.display().to_string(),
        rows: vec![main_row],
        confusion: acc.as_ref().map(|a| a.confusion.clone()),
    };

    if flags.static_baseline {
        let (prefix, future) = burn_in_split(&test.states, burn_in, &horizons)?;
        let pred = baseline_static(&prefix, future.shape()[2]);
        let mse = horizon_mse(&pred, &future, &horizons)?;
        report.rows.push(ReportRow {
            name: "Static".into(),
            accuracy: None,
            mse,
            note: String::new(),
        });
    }
    if flags.corr_path {
        let r = baseline_corr_path(&[&data.train, &data.valid], &test.truncate_frames(burn_in))?;
        let note = format!(
            "{} correlation > {:.4}",
            if r.absolute { "absolute" } else { "signed" },
            r.threshold
        );
        report.rows.push(ReportRow {
            name: "Corr. (path)".into(),
            accuracy: Some(r.accuracy),
            mse: vec![],
            note,
        });
    }
    for (on, variant) in [
        (flags.full_graph, Variant::FullGraph),
        (flags.true_graph, Variant::TrueGraph),
        (flags.supervised, Variant::Supervised),
    ] {
        if on {
            info!("training baseline {}", variant.name());
            report.rows.push(run_variant(
                variant, &cfg.model, &data, &cfg.train, burn_in, &horizons,
            )?);
        }
    }
    if flags.empty_graph_test {
        let Some(acc) = &acc else {
            return Err(Error::Config(
                "the empty-graph test needs a checkpoint with an encoder".into(),
            ));
        };
        let rate = empty_graph_test(
            &ckpt,
            &cfg.system,
            &acc.permutation,
            flags.empty_count,
            Stream::new(cfg.seed).split("empty"),
            chunk,
        )?;
        report.rows.push(ReportRow {
            name: "Empty-graph test".into(),
            accuracy: Some(rate),
            mse: vec![],
            note: format!(
                "{} uncoupled simulations; pairs classified as non-edges",
                flags.empty_count
            ),
        });
    }

    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dir.join("eval"));
    fs::create_dir_all(&out)?;
    tensorfile::write_atomic(&out.join("report.csv"), report.to_csv().as_bytes())?;
    tensorfile::write_atomic(&out.join("mse.csv"), report.mse_csv().as_bytes())?;
    let table = report.to_table();
    tensorfile::write_atomic(&out.join("report.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn load_trajectory(path: &Path, index: usize) -> Result<Array> {
    let a = tensorfile::load(path)?.to_array()?;
    match a.rank() {
        3 => {
            let shape = [&[1][..], a.shape()].concat();
            a.reshape(&shape)
        }
        4 => {
            if index >= a.shape()[0] {
                return Err(Error::Data(format!(
                    "index {index} but the file holds {} trajectories",
                    a.shape()[0]
                )));
            }
            Ok(a.outer_range(index, index + 1))
        }
        r => Err(Error::Data(format!(
            "expected a rank 3 or 4 trajectory tensor, got rank {r}"
        ))),
    }
}

fn load_graph(path: &Path, index: usize, n: usize) -> Result<InteractionGraph> {
    let t = tensorfile::load(path)?;
    let m = t.as_i32()?;
    let per = n * n;
    let off = if t.shape.len() == 3 { index * per } else { 0 };
    let slice = m
        .get(off..off + per)
        .ok_or_else(|| Error::Data("graph index out of range".into()))?;
    InteractionGraph::from_matrix(n, slice)
}

fn graph_tensor(graphs: &[InteractionGraph]) -> Result<Tensor> {
    let n = graphs[0].n;
    let data: Vec<i32> = graphs.iter().flat_map(|g| g.to_matrix()).collect();
    Tensor::i32(vec![graphs.len(), n, n], data)
}

fn predictions_csv(pred: &Array) -> String {
    // pred is [N, steps, F]
    let s = pred.shape();
    let (n, steps, f) = (s[0], s[1], s[2]);
    let mut out = String::from("object,t");
    for j in 0..f {
        write!(out, ",f{j}").unwrap();
    }
    out.push('\n');
    for i in 0..n {
        for t in 0..steps {
            write!(out, "{i},{}", t + 1).unwrap();
            for j in 0..f {
                write!(out, ",{:e}", pred.get(&[i, t, j])).unwrap();
            }
            out.push('\n');
        }
    }
    out
}

struct PredictArgs<'a> {
    checkpoint: &'a Path,
    input: &'a Path,
    index: usize,
    steps: i64,
    out: &'a Path,
    dynamic: bool,
    dump_edges: bool,
    graphs: Option<&'a Path>,
    cfg: &'a ConfigArgs,
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    if a.steps <= 0 {
        return Err(Error::Contract(format!(
            "steps must be positive, got {}",
            a.steps
        )));
    }
    let steps = a.steps as usize;
    let (ckpt_dir, run_dir) = locate_checkpoint(a.checkpoint)?;
    let ckpt = Checkpoint::load(&ckpt_dir)?;
    let cfg = config_for_run(&run_dir, a.cfg)?;
    let model = NriModel::new(ckpt.model.clone())?;
    let traj = load_trajectory(a.input, a.index)?;
    let (n, t, f) = (traj.shape()[1], traj.shape()[2], traj.shape()[3]);
    if n != ckpt.model.n_objects {
        return Err(Error::Data(format!(
            "checkpoint models {} objects, input has {n}",
            ckpt.model.n_objects
        )));
    }
    let burn_in = cfg.burn_in;
    if t < burn_in {
        return Err(Error::Contract(format!(
            "input has {t} frames; at least {burn_in} are required"
        )));
    }
    // The first `burn_in` frames are observed; the rest (if any) is truth.
    let (prefix, _) = split_time(&traj, burn_in);
    fs::create_dir_all(a.out)?;
    let (pred, edges) = if a.dynamic {
        if model.cfg.encoder.is_none() {
            return Err(Error::Config("dynamic prediction needs an encoder".into()));
        }
        let window = cfg.dynamic_window.min(burn_in);
        let d = dynamic_reeval_predict(&model, &ckpt.store, &prefix, steps, window, 1)?;
        println!(
            "edge flip rate between consecutive steps: {:.4}",
            d.flip_rate
        );
        (d.predictions, d.edges)
    } else {
        let graphs = match a.graphs {
            Some(p) => vec![load_graph(p, a.index, n)?],
            None => vec![],
        };
        let z = eval_edges(&model, &ckpt.store, ckpt.objective, &prefix, &graphs, 1)?;
        (
            model.infer_future(&ckpt.store, &prefix, &z, steps, 1)?,
            vec![z],
        )
    };
    let pred = pred.reshape(&[n, steps, f])?;
    tensorfile::save(&a.out.join("predictions.nrit"), &Tensor::from_array(&pred))?;
    tensorfile::write_atomic(
        &a.out.join("predictions.csv"),
        predictions_csv(&pred).as_bytes(),
    )?;
    if a.dump_edges {
        let graphs: Vec<InteractionGraph> = edges
            .iter()
            .map(|z| InteractionGraph {
                n,
                edge_types: edge_types(z),
            })
            .collect();
        tensorfile::save(&a.out.join("edges.nrit"), &graph_tensor(&graphs)?)?;
    }
    println!(
        "predicted {steps} steps for {n} objects into {}",
        a.out.display()
    );
    Ok(())
}

fn cmd_gradcheck(corrupt: Option<&str>) -> Result<bool> {
    let corrupt: Option<&'static str> = match corrupt {
        None => None,
        Some(name) => Some(
            nri_core::gradsuite::PRIMITIVES
                .iter()
                .copied()
                .find(|p| *p == name)
                .ok_or_else(|| Error::Config(format!("unknown primitive {name:?}")))?,
        ),
    };
    let results = nri_core::gradsuite::run_suite(corrupt)?;
    let mut ok = true;
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        ok &= r.passed();
        println!(
            "{:<34} max rel. error {:>10.3e}  ({} scalars)  {verdict}",
            r.name, r.max_rel_error, r.checked
        );
    }
    println!(
        "{}",
        if ok {
            "all gradient checks passed"
        } else {
            "gradient check FAILED"
        }
    );
    Ok(ok)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) => 2,
        Error::Data(_) | Error::Io(_) | Error::Dimension { .. } => 3,
        Error::Numerical(_) | Error::Domain { .. } => 4,
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a thread count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    configure_threads()?;
    match cli.command {
        Command::Generate { cfg, out, force } => cmd_generate(&cfg.load()?, &out, force)?,
        Command::Train {
            cfg,
            data,
            out,
            resume,
        } => cmd_train(&cfg.load()?, &data, &out, resume)?,
        Command::Eval {
            checkpoint,
            data,
            out,
            cfg,
            static_baseline,
            corr_path,
            full_graph,
            true_graph,
            supervised,
            empty_graph_test,
            empty_count,
        } => {
            let flags = EvalFlags {
                static_baseline,
                corr_path,
                full_graph,
                true_graph,
                supervised,
                empty_graph_test,
                empty_count,
            };
            cmd_eval(&checkpoint, &data, out.as_deref(), &cfg, &flags)?
        }
        Command::Predict {
            checkpoint,
            input,
            index,
            steps,
            out,
            dynamic,
            dump_edges,
            graphs,
            cfg,
        } => cmd_predict(&PredictArgs {
            checkpoint: &checkpoint,
            input: &input,
            index,
            steps,
            out: &out,
            dynamic,
            dump_edges,
            graphs: graphs.as_deref(),
            cfg: &cfg,
        })?,
        Command::Gradcheck { corrupt } => {
            if !cmd_gradcheck(corrupt.as_deref())? {
                return Ok(ExitCode::from(4));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
