//! Batch command-line surface for the jfa toolkit.
//!
//! Exit codes: 0 success, 1 validation/precondition failure, 2 I/O
//! failure, 3 numerical failure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use jfa_core::adapt::assemble_joint_system;
use jfa_core::data::{
    export_adapted, load_dataset_dir, load_model, save_model, synth_generate, write_dataset,
    SynthConfig,
};
use jfa_core::learn::{train, TrainConfig};
use jfa_core::modelselect::{select_omega, GridSpec};
use jfa_core::zsr::{evaluate, predict_batch, MetricsReport, PredictionResult};
use jfa_core::{ClassId, Dataset, Error, InstanceId, OmegaParams, Result, WeightModel};

#[derive(Parser)]
#[command(
    name = "jfa",
    version,
    about = "Zero-shot recognition with jointly adapted source/target features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic zero-shot dataset (three text files)
    Synth(SynthArgs),
    /// Train the weight matrix on the seen classes of a dataset
    Train(TrainArgs),
    /// Score unseen-class instances with a trained model
    Predict(PredictArgs),
    /// Compute accuracy and per-class precision/recall for predictions
    Eval(EvalArgs),
    /// Grid search over the penalty weights with cross-validation
    Gridsearch(GridArgs),
    /// Print definiteness diagnostics of a model's joint system
    Diagnose(DiagnoseArgs),
    /// Export original and adapted features against one class
    Export(ExportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Total number of classes
    #[arg(long)]
    classes: usize,
    /// How many of the classes are held out as unseen
    #[arg(long)]
    unseen: usize,
    /// Source attribute dimension
    #[arg(long)]
    ds: usize,
    /// Target feature dimension
    #[arg(long)]
    dt: usize,
    #[arg(long = "per-class")]
    per_class: usize,
    /// Std of per-instance additive noise
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Std of within-class scatter
    #[arg(long, default_value_t = 0.02)]
    spread: f64,
    /// Std of the per-class perturbation of the ground-truth map
    #[arg(long = "map-noise", default_value_t = 0.0)]
    map_noise: f64,
    #[arg(long = "attribute-scale", default_value_t = 1.0)]
    attribute_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for classes.tsv, instances.tsv, split.txt
    #[arg(long)]
    out: PathBuf,
}

/// Syntactically parsed `--omega` value; range checks happen at use
/// site so that they surface as validation failures (exit 1), not as
/// usage errors.
#[derive(Clone, Copy)]
struct RawOmega([f64; 4]);

#[derive(Clone, Copy)]
struct RawOmegaExp([i32; 4]);

#[derive(Args)]
struct OmegaArgs {
    /// Penalty weights as w1,w2,w3,w4
    #[arg(long, value_parser = parse_omega, conflicts_with = "omega_exp")]
    omega: Option<RawOmega>,
    /// Penalty weights as powers of ten: e1,e2,e3,e4
    #[arg(long = "omega-exp", value_parser = parse_omega_exp)]
    omega_exp: Option<RawOmegaExp>,
}

impl OmegaArgs {
    fn resolve(&self) -> Result<OmegaParams> {
        if let Some(RawOmega(v)) = self.omega {
            return OmegaParams::new(v[0], v[1], v[2], v[3]);
        }
        if let Some(RawOmegaExp(e)) = self.omega_exp {
            return OmegaParams::new(
                10f64.powi(e[0]),
                10f64.powi(e[1]),
                10f64.powi(e[2]),
                10f64.powi(e[3]),
            );
        }
        Err(Error::Invalid(
            "provide the penalty weights via --omega or --omega-exp".into(),
        ))
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    omega: OmegaArgs,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 6)]
    outer: usize,
    #[arg(long, default_value_t = 30)]
    inner: usize,
    /// Initial learning rate; defaults to a data-scaled value
    #[arg(long = "step-size")]
    step_size: Option<f64>,
    #[arg(long = "pd-margin", default_value_t = 0.05)]
    pd_margin: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model output path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Predictions file produced by `jfa predict`
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = -5, allow_negative_numbers = true)]
    lo: i32,
    #[arg(long, default_value_t = 5, allow_negative_numbers = true)]
    hi: i32,
    #[arg(long, default_value_t = 10.0)]
    base: f64,
    #[arg(long, default_value_t = 4)]
    folds: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 2)]
    outer: usize,
    #[arg(long, default_value_t = 15)]
    inner: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluate every candidate, skipping the eigenvalue-range filter
    #[arg(long = "no-prefilter", default_value_t = false)]
    no_prefilter: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    model: PathBuf,
    /// Write the diagnostics here as well as to stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Class to adapt every instance against
    #[arg(long)]
    class: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_omega(s: &str) -> std::result::Result<RawOmega, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 4 {
        return Err(format!("expected four comma-separated weights, got {}", parts.len()));
    }
    let mut vals = [0.0f64; 4];
    for (i, p) in parts.iter().enumerate() {
        vals[i] = p.trim().parse().map_err(|e| format!("bad weight '{p}': {e}"))?;
    }
    Ok(RawOmega(vals))
}

fn parse_omega_exp(s: &str) -> std::result::Result<RawOmegaExp, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 4 {
        return Err(format!("expected four comma-separated exponents, got {}", parts.len()));
    }
    let mut vals = [0i32; 4];
    for (i, p) in parts.iter().enumerate() {
        vals[i] = p.trim().parse().map_err(|e| format!("bad exponent '{p}': {e}"))?;
    }
    Ok(RawOmegaExp(vals))
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => 2,
        Error::NotPositiveDefinite { .. } | Error::Numerical(_) => 3,
        _ => 1,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Train(args) => run_train(args),
        Command::Predict(args) => run_predict(args),
        Command::Eval(args) => run_eval(args),
        Command::Gridsearch(args) => run_gridsearch(args),
        Command::Diagnose(args) => run_diagnose(args),
        Command::Export(args) => run_export(args),
    }
}

fn run_synth(args: SynthArgs) -> Result<()> {
    if args.unseen >= args.classes {
        return Err(Error::Invalid(format!(
            "--unseen {} must be smaller than --classes {}",
            args.unseen, args.classes
        )));
    }
    let config = SynthConfig {
        n_seen: args.classes - args.unseen,
        n_unseen: args.unseen,
        attr_dim: args.ds,
        feat_dim: args.dt,
        instances_per_class: args.per_class,
        attribute_scale: args.attribute_scale,
        map_noise: args.map_noise,
        feature_noise: args.noise,
        intra_class_spread: args.spread,
        seed: args.seed,
    };
    let out = synth_generate(&config)?;
    write_dataset(&out.dataset, &args.out)?;
    println!(
        "wrote {} classes ({} seen / {} unseen) and {} instances to {}",
        args.classes,
        config.n_seen,
        config.n_unseen,
        out.dataset.instances().len(),
        args.out.display()
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let omega = args.omega.resolve()?;
    let data = load_dataset_dir(&args.data)?;
    let config = TrainConfig {
        lambda: args.lambda,
        outer_iters: args.outer,
        inner_iters: args.inner,
        step_size: args.step_size,
        pd_margin: args.pd_margin,
        seed: args.seed,
    };
    let (model, state) = train(&data, &omega, &config)?;
    for d in &state.diagnostics {
        println!(
            "round {}: objective {:.6} delta_w {:.6} eig_min {:.6} eig_max {:.6} pd {} dominant {}",
            d.round, d.objective, d.delta_w, d.eig_min, d.eig_max, d.is_pd, d.is_diag_dominant
        );
    }
    let (final_round, final_obj) = *state.objective_trace.last().expect("nonempty trace");
    println!(
        "best objective {final_obj:.6} (recorded as round {final_round}), converged {}",
        state.converged
    );
    save_model(&model, &args.out)?;
    println!("model written to {}", args.out.display());
    Ok(())
}

fn check_model_dims(model: &WeightModel, data: &Dataset) -> Result<()> {
    if model.feat_dim() != data.feat_dim() || model.attr_dim() != data.attr_dim() {
        return Err(Error::Dimension(format!(
            "model dims ({}, {}) do not match dataset dims ({}, {})",
            model.feat_dim(),
            model.attr_dim(),
            data.feat_dim(),
            data.attr_dim()
        )));
    }
    Ok(())
}

fn run_predict(args: PredictArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let data = load_dataset_dir(&args.data)?;
    check_model_dims(&model, &data)?;
    let unseen = data.unseen_classes();
    if unseen.is_empty() {
        return Err(Error::Invalid("dataset has no unseen classes".into()));
    }
    let system = assemble_joint_system(&model.weights, &model.omega)?;
    let test = data.test_instances();
    let predictions = predict_batch(&model, &system, &unseen, &test)?;

    let mut out = String::from("# instance_id\tpredicted_class\tscores\n");
    for p in &predictions {
        let scores = p
            .scores
            .iter()
            .map(|(c, s)| format!("{c}:{s}"))
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(out, "{}\t{}\t{}", p.instance, p.predicted, scores);
    }
    std::fs::write(&args.out, out).map_err(|e| Error::Io {
        path: args.out.display().to_string(),
        source: e,
    })?;
    println!(
        "wrote {} predictions over {} unseen classes to {}",
        predictions.len(),
        unseen.len(),
        args.out.display()
    );
    Ok(())
}

fn parse_predictions(path: &Path) -> Result<Vec<PredictionResult>> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let (id, predicted) = match (parts.next(), parts.next()) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: "expected <instance_id><TAB><class_id>".into(),
                })
            }
        };
        let instance: InstanceId = id.parse().map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: format!("bad instance id: {e}"),
        })?;
        let predicted: ClassId = predicted.parse().map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: format!("bad class id: {e}"),
        })?;
        out.push(PredictionResult {
            instance,
            predicted,
            scores: vec![],
        });
    }
    Ok(out)
}

fn metrics_text(m: &MetricsReport) -> String {
    let mut out = String::from("# metric\tmean\tstd\n");
    let _ = writeln!(out, "accuracy\t{}\t{}", m.accuracy.mean, m.accuracy.std);
    let _ = writeln!(
        out,
        "macro_precision\t{}\t{}",
        m.macro_precision.mean, m.macro_precision.std
    );
    let _ = writeln!(
        out,
        "macro_recall\t{}\t{}",
        m.macro_recall.mean, m.macro_recall.std
    );
    out.push_str("# class\tprecision\trecall\tpredicted\ttruth\tcorrect\tflags\n");
    for c in &m.per_class {
        let mut flags = Vec::new();
        if !c.precision_defined {
            flags.push("precision_undefined");
        }
        if !c.recall_defined {
            flags.push("recall_undefined");
        }
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            c.class,
            c.precision,
            c.recall,
            c.predicted_count,
            c.truth_count,
            c.correct,
            if flags.is_empty() { "-".to_string() } else { flags.join(",") }
        );
    }
    out
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let predictions = parse_predictions(&args.pred)?;
    let data = load_dataset_dir(&args.data)?;
    let truth: BTreeMap<InstanceId, ClassId> = data
        .instances()
        .iter()
        .map(|x| (x.id, x.label.expect("dataset instances are labeled")))
        .collect();
    let metrics = evaluate(&predictions, &truth)?;
    std::fs::write(&args.out, metrics_text(&metrics)).map_err(|e| Error::Io {
        path: args.out.display().to_string(),
        source: e,
    })?;
    println!(
        "accuracy {:.4} over {} predictions; metrics written to {}",
        metrics.accuracy.mean,
        predictions.len(),
        args.out.display()
    );
    Ok(())
}

fn run_gridsearch(args: GridArgs) -> Result<()> {
    if args.workers == 0 {
        return Err(Error::Invalid("--workers must be >= 1".into()));
    }
    let data = load_dataset_dir(&args.data)?;
    let spec = GridSpec {
        exponent_lo: args.lo,
        exponent_hi: args.hi,
        base: args.base,
    };
    let config = TrainConfig {
        lambda: args.lambda,
        outer_iters: args.outer,
        inner_iters: args.inner,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.workers)
        .build()
        .map_err(|e| Error::Invalid(format!("cannot build worker pool: {e}")))?;
    let report = pool.install(|| select_omega(&data, &spec, &config, args.folds, !args.no_prefilter))?;
    std::fs::write(&args.out, report.to_tsv()).map_err(|e| Error::Io {
        path: args.out.display().to_string(),
        source: e,
    })?;
    let evaluated = report.candidates.iter().filter(|c| !c.skipped).count();
    match report.best {
        Some(best) => println!(
            "best omega {best} out of {} candidates ({} evaluated, {} skipped) in {:.2?}",
            report.candidates.len(),
            evaluated,
            report.candidates.len() - evaluated,
            report.elapsed
        ),
        None => println!(
            "no candidate survived the prefilter ({} skipped) in {:.2?}; \
             rerun with --no-prefilter to evaluate them anyway",
            report.candidates.len(),
            report.elapsed
        ),
    }
    println!("report written to {}", args.out.display());
    Ok(())
}

fn run_diagnose(args: DiagnoseArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let system = assemble_joint_system(&model.weights, &model.omega)?;
    let mut out = String::new();
    let _ = writeln!(out, "feat_dim\t{}", system.feat_dim());
    let _ = writeln!(out, "attr_dim\t{}", system.attr_dim());
    let _ = writeln!(out, "delta_w\t{}", system.delta_w());
    let _ = writeln!(out, "eig_min\t{}", system.eig_min());
    let _ = writeln!(out, "eig_max\t{}", system.eig_max());
    let _ = writeln!(out, "is_pd\t{}", system.is_pd());
    let _ = writeln!(out, "is_diag_dominant\t{}", system.is_diag_dominant());
    let _ = writeln!(
        out,
        "eig_min_in_unit_band\t{}",
        system.eig_min() > 0.0 && system.eig_min() <= 1.0
    );
    let _ = writeln!(
        out,
        "eig_max_in_preferred_band\t{}",
        system.eig_max() > 1e3 && system.eig_max() <= 1e4
    );
    print!("{out}");
    if let Some(path) = &args.out {
        std::fs::write(path, &out).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    Ok(())
}

fn run_export(args: ExportArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let data = load_dataset_dir(&args.data)?;
    check_model_dims(&model, &data)?;
    export_adapted(&model, &data, ClassId(args.class), &args.out)?;
    println!(
        "wrote adapted features against class {} to {}",
        args.class,
        args.out.display()
    );
    Ok(())
}
