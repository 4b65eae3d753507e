use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tcrf::config::ExperimentConfig;
use tcrf::container::{load_model, save_model};
use tcrf::dataset::{color_png, index_png, load_dataset, write_atomic, Dataset, Scene};
use tcrf::evaluation::{compare_runs, format_table, metrics_csv, ConfusionMatrix, Verdict};
use tcrf::pipeline::{evaluate, infer_scene, split_for, synthesize_to, train, Evaluation};
use tcrf::training::{Mode, TcrfModel};
use tcrf::{Error, Layer};

#[derive(Parser)]
#[command(name = "tcrf", version, about = "Two-layer CRF labeling of scenes with occluded objects")]
struct Cli {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// tcrf, or crf for independent layers; overrides the config.
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset root; overrides the config.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled suite in dataset layout.
    Synth {
        /// Number of scenes; overrides the config.
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Fit potentials and tune θ; writes model.tcrf and trace.csv.
    Train,
    /// Label scenes; writes index maps and color renderings.
    Infer(ModelArgs),
    /// Metrics of a model on the test split.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        /// Second model to compare against the first.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    model: PathBuf,
    /// Scene ids; default is the test split.
    #[arg(long, value_delimiter = ',')]
    scenes: Vec<String>,
    /// Use every scene in the dataset.
    #[arg(long, conflicts_with = "scenes")]
    all: bool,
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::MissingClass { .. } => 1,
            Error::Data { .. } | Error::Io { .. } | Error::Image { .. } | Error::Format(_) => 2,
            Error::Domain(_) | Error::NonFinite(_) | Error::TooLarge(_) => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: &Cli) -> Outcome<()> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(mode) = cli.mode {
        config.mode = mode;
    }
    if let Some(root) = &cli.dataset {
        config.dataset.root = root.clone();
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    match &cli.command {
        Command::Synth { scenes } => cmd_synth(&config, scenes.unwrap_or(config.synth.scenes), &out),
        Command::Train => cmd_train(&config, &out),
        Command::Infer(args) => cmd_infer(&config, args, &out),
        Command::Eval { model, compare } => cmd_eval(&config, model, compare.as_deref(), &out),
    }
}

fn open_dataset(config: &ExperimentConfig, site_size: usize) -> Outcome<Dataset> {
    let root = &config.dataset.root;
    if !root.join("manifest.toml").is_file() {
        return Err(Failure {
            code: 1,
            message: format!("no dataset manifest under {}", root.display()),
        });
    }
    Ok(load_dataset(root, site_size)?)
}

fn cmd_synth(config: &ExperimentConfig, n: usize, out: &Path) -> Outcome<()> {
    let ds = synthesize_to(out, &config.synth.recipe, n, config.seed, config.dataset.fractions)?;
    let mean = ds.manifest.scenes.iter().filter_map(|s| s.occlusion_fraction).sum::<f64>() / n as f64;
    println!("wrote {n} scenes to {} (mean occlusion {:.1}%)", out.display(), 100.0 * mean);
    Ok(())
}

fn cmd_train(config: &ExperimentConfig, out: &Path) -> Outcome<()> {
    let ds = open_dataset(config, config.site_size)?;
    let result = train(config, &ds)?;
    let path = out.join("model.tcrf");
    save_model(&path, &result.model)?;
    write_atomic(&out.join("trace.csv"), result.trace.to_csv().as_bytes())?;
    let t = &result.trace.entries;
    println!(
        "{} model: {} train / {} tune / {} test scenes",
        result.model.mode,
        result.plan.train.len(),
        result.plan.tune.len(),
        result.plan.test.len()
    );
    if let (Some(first), Some(last)) = (t.first(), t.last()) {
        println!(
            "powell: omega {} -> {} over {} cycles, {} evaluations",
            first.value, last.value, last.cycle, last.evaluations
        );
    }
    let theta: Vec<String> = result.model.theta.0.iter().map(|v| format!("{v:.4}")).collect();
    println!("theta = [{}]", theta.join(", "));
    println!("wrote {}", path.display());
    Ok(())
}

fn select_scenes<'a>(config: &ExperimentConfig, ds: &'a Dataset, args: &ModelArgs) -> Outcome<Vec<&'a Scene>> {
    let ids: Vec<String> = if args.all {
        ds.scenes.iter().map(|s| s.id.clone()).collect()
    } else if !args.scenes.is_empty() {
        args.scenes.clone()
    } else {
        split_for(config, ds)?.test
    };
    Ok(ids
        .iter()
        .map(|id| ds.scene(id).ok_or_else(|| Error::config(format!("no scene `{id}` in the dataset"))))
        .collect::<Result<Vec<_>, _>>()?)
}

fn cmd_infer(config: &ExperimentConfig, args: &ModelArgs, out: &Path) -> Outcome<()> {
    let model = load_model(&args.model)?;
    let ds = open_dataset(config, model.site_size)?;
    let scenes = select_scenes(config, &ds, args)?;
    // fail on channel mismatch before any scene is processed
    for s in &scenes {
        let missing = model.features.missing_channels(&s.data);
        if !missing.is_empty() {
            return Err(Error::data(&s.id, format!("model needs missing channels: {}", missing.join(", "))).into());
        }
    }
    let mut total = Evaluation::new(model.domain.n_base(), model.domain.n_occlusion());
    let mut labeled = 0;
    for s in scenes {
        let inf = infer_scene(&model, &s.id, &s.data)?;
        let dir = out.join(&s.id);
        for layer in [Layer::Base, Layer::Occlusion] {
            let grid = inf.labeling.layer(layer);
            write_atomic(&dir.join(format!("{layer}.png")), &index_png(grid)?)?;
            write_atomic(&dir.join(format!("{layer}_color.png")), &color_png(grid, model.domain.palette(layer))?)?;
        }
        let mut line = format!(
            "{}: {} iterations, delta {:.2e}{}, score {:.3}",
            s.id,
            inf.iterations,
            inf.last_delta,
            if inf.converged { "" } else { " (not converged)" },
            inf.score
        );
        if let Some(reference) = s.node_labels() {
            let mut e = Evaluation::new(model.domain.n_base(), model.domain.n_occlusion());
            e.add(&reference, &inf.labeling)?;
            let _ = write!(line, ", OA base {:.1}% occlusion {:.1}%", pct(&e.base), pct(&e.occlusion));
            total.merge(&e)?;
            labeled += 1;
        }
        println!("{line}");
    }
    if labeled > 0 {
        println!(
            "overall on {labeled} labeled scenes: OA base {:.1}% occlusion {:.1}%",
            pct(&total.base),
            pct(&total.occlusion)
        );
    }
    Ok(())
}

fn pct(m: &ConfusionMatrix) -> f64 {
    100.0 * m.trace() as f64 / m.total().max(1) as f64
}

fn evaluate_model(config: &ExperimentConfig, args: &ModelArgs, model: &TcrfModel) -> Outcome<Evaluation> {
    let ds = open_dataset(config, model.site_size)?;
    let scenes = select_scenes(config, &ds, args)?;
    Ok(evaluate(model, &scenes)?.0)
}

fn cmd_eval(config: &ExperimentConfig, args: &ModelArgs, compare: Option<&Path>, out: &Path) -> Outcome<()> {
    let model = load_model(&args.model)?;
    let eval = evaluate_model(config, args, &model)?;
    let base = eval.base.metrics()?;
    let occ = eval.occlusion.metrics()?;
    let names = |l: Layer| model.domain.classes(l).to_vec();
    let (nb, no) = (names(Layer::Base), names(Layer::Occlusion));
    let mut report = String::new();
    match compare {
        None => {
            let _ = writeln!(report, "base layer\n{}", format_table(&nb, &[("", &base)]));
            let _ = writeln!(report, "occlusion layer\n{}", format_table(&no, &[("", &occ)]));
            let _ = writeln!(report, "{}", confusion_text(&eval.base, &nb));
            let _ = writeln!(report, "{}", confusion_text(&eval.occlusion, &no));
            if eval.base_occluded.total() > 0 {
                let _ = writeln!(report, "base OA at occluded sites: {:.1}%", pct(&eval.base_occluded));
            }
        }
        Some(other_path) => {
            let other = load_model(other_path)?;
            let other_eval = evaluate_model(config, args, &other)?;
            let (a, b) = (model.mode.to_string(), other.mode.to_string());
            for (layer, ea, eb, cls) in [
                (Layer::Base, &eval.base, &other_eval.base, &nb),
                (Layer::Occlusion, &eval.occlusion, &other_eval.occlusion, &no),
            ] {
                let (ma, mb) = (ea.metrics()?, eb.metrics()?);
                let cmp = compare_runs(ea, eb)?;
                let _ = writeln!(report, "{layer} layer\n{}", format_table(cls, &[(&a, &ma), (&b, &mb)]));
                let verdict = match cmp.overall_winner {
                    Verdict::A => "first model",
                    Verdict::B => "second model",
                    Verdict::Tie => "tie",
                    Verdict::Undefined => "undefined",
                };
                let _ = writeln!(report, "OA delta (second - first): {:+.2} points, better: {verdict}\n", 100.0 * cmp.delta.overall_accuracy);
            }
        }
    }
    print!("{report}");
    write_atomic(&out.join("report.txt"), report.as_bytes())?;
    let csv = metrics_csv(&[(&base, &nb), (&occ, &no)]);
    write_atomic(&out.join("metrics.csv"), csv.as_bytes())?;
    Ok(())
}

fn confusion_text(m: &ConfusionMatrix, names: &[String]) -> String {
    let width = names.iter().map(|n| n.len()).max().unwrap_or(0).max(9);
    let mut s = format!("{} confusion (rows: reference)\n{:width$}", m.layer(), "");
    for n in names {
        let _ = write!(s, " {n:>width$}");
    }
    s.push('\n');
    for (r, rn) in names.iter().enumerate() {
        let _ = write!(s, "{rn:width$}");
        for c in 0..names.len() {
            let _ = write!(s, " {:>width$}", m.get(r, c));
        }
        s.push('\n');
    }
    s
}
