mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use linecolor::checkpoint::Checkpoint;
use linecolor::datasmith::{
    build_dataset, build_eval_sequences, parse_exclusions, sequences_from_tsv, sequences_to_tsv, FrameList,
    SequenceOptions, ShotIndex, FRAMES_FILE, SEQUENCES_FILE, SHOTS_FILE,
};
use linecolor::evaluator::{
    benchmark_time, evaluate, Colorizer, EvalCase, EvalReport, GeneratorColorizer, IdentityOracle, ReportMeta,
    SequenceFrames, TimingReport,
};
use linecolor::generator::Generator;
use linecolor::trainer::{ManifestSource, PairSource, RunOptions, Trainer};
use linecolor::{synthetic, ColorImage, Error, SketchImage};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "linecolor", version, about = "Reference-guided line-art colorization")]
struct Cli {
    /// TOML run configuration; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Segment a frame directory into shots and write sketches, pairs and
    /// evaluation sequences.
    BuildDataset(BuildArgs),
    /// Train a generator on a pair manifest.
    Train(TrainArgs),
    /// Colorize sketches from one colored reference frame.
    Colorize(ColorizeArgs),
    /// Score a checkpoint on the evaluation sequences of a dataset.
    Evaluate(EvaluateArgs),
    /// Time single-frame colorization.
    Benchmark(BenchmarkArgs),
}

#[derive(Args, Debug)]
struct BuildArgs {
    /// Directory of numbered PNG frames.
    #[arg(long)]
    frames: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    shot_threshold: Option<f64>,
    /// Shot ids to leave out of the evaluation sequences.
    #[arg(long)]
    exclusions: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    /// Train the variant without correlation matching.
    #[arg(long)]
    ablation: bool,
}

#[derive(Args, Debug)]
struct ColorizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sketch of the colored reference frame.
    #[arg(long)]
    ref_sketch: PathBuf,
    /// Colored reference frame.
    #[arg(long)]
    ref_color: PathBuf,
    /// Output directory; each output keeps its sketch's file name.
    #[arg(long)]
    out: PathBuf,
    /// Use each output as the reference for the next sketch.
    #[arg(long)]
    chain: bool,
    /// Sketches to colorize, in order.
    #[arg(required = true)]
    sketches: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Generator checkpoint; repeat to compare several.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    /// Include the ground-truth oracle.
    #[arg(long)]
    identity: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Dataset directory written by build-dataset.
    #[arg(long)]
    dataset: PathBuf,
    /// Directory for report.csv and report.txt.
    #[arg(long)]
    out: PathBuf,
    /// Feed each prediction back in as the next reference.
    #[arg(long)]
    chain: bool,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Square input size.
    #[arg(long, default_value_t = 256)]
    resolution: usize,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Write timing.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure with its exit status: 2 for bad input or configuration, 1 for
/// everything that went wrong while working.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Validation(_) | Error::Checkpoint(_) | Error::Dimension(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn runtime(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn require_file(path: &Path, what: &str) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} not found", path.display())))
    }
}

fn write_file(path: &Path, text: &str) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn read_file(path: &Path) -> std::result::Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn load_generator(path: &Path) -> std::result::Result<Generator, Failure> {
    require_file(path, "checkpoint")?;
    Ok(Checkpoint::load(path)?.to_generator()?)
}

fn model_label(g: &Generator, path: &Path) -> String {
    let kind = if g.config().ablation_no_cmft { "no-cmft" } else { "full" };
    let stem = path.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
    format!("{kind}:{stem}")
}

fn build_dataset_cmd(cfg: &RunConfig, args: &BuildArgs) -> CmdResult {
    if !args.frames.is_dir() {
        return Err(usage(format!("frames directory {} not found", args.frames.display())));
    }
    let mut ds = cfg.datasmith.clone();
    ds.stride = args.stride.unwrap_or(ds.stride);
    ds.width = args.width.unwrap_or(ds.width);
    ds.shot_threshold = args.shot_threshold.unwrap_or(ds.shot_threshold);
    ds.validate()?;
    let exclusions = match &args.exclusions {
        Some(p) => parse_exclusions(&read_file(p)?)?,
        None => Default::default(),
    };

    fs::create_dir_all(&args.out).map_err(|e| runtime(format!("cannot create {}: {e}", args.out.display())))?;
    let summary = build_dataset(&args.frames, &args.out, &ds)?;

    let mut sequences = Vec::new();
    for &stride in &cfg.eval.strides {
        let opts = SequenceOptions {
            stride,
            seed: cfg.seed,
            unchanged_threshold: cfg.eval.unchanged_threshold,
            exclusions: exclusions.clone(),
        };
        let frames = &summary.frames;
        sequences.extend(build_eval_sequences(&summary.shots, &opts, |i| {
            ColorImage::load_png(&args.out.join(&frames.color[i]))
        })?);
    }
    write_file(&args.out.join(SEQUENCES_FILE), &sequences_to_tsv(&sequences))?;

    println!(
        "{} frames, {} shots, {} pairs, {} evaluation sequences",
        summary.frames.len(),
        summary.shots.len(),
        summary.manifest.records.len(),
        sequences.len()
    );
    println!("manifest: {}", summary.manifest_path.display());
    Ok(())
}

fn train_cmd(cfg: &RunConfig, args: &TrainArgs) -> CmdResult {
    require_file(&args.manifest, "manifest")?;
    let mut tc = cfg.train_config();
    tc.max_iterations = args.max_iterations.or(tc.max_iterations);
    tc.epochs = args.epochs.unwrap_or(tc.epochs);
    tc.resolution = args.resolution.unwrap_or(tc.resolution);
    tc.learning_rate = args.learning_rate.unwrap_or(tc.learning_rate);
    tc.batch_size = args.batch_size.unwrap_or(tc.batch_size);
    tc.checkpoint_interval = args.checkpoint_interval.unwrap_or(tc.checkpoint_interval);
    tc.generator.ablation_no_cmft |= args.ablation;
    tc.validate()?;

    let source = ManifestSource::open(&args.manifest)?;
    if source.is_empty() {
        return Err(usage(format!("manifest {} lists no pairs", args.manifest.display())));
    }
    let mut trainer = match &args.resume {
        Some(p) => {
            require_file(p, "checkpoint")?;
            let t = Trainer::resume(tc, &Checkpoint::load(p)?)?;
            log::info!("resuming at iteration {}", t.iteration());
            t
        }
        None => Trainer::new(tc)?,
    };
    let opts = RunOptions {
        checkpoint_dir: Some(args.out.clone()),
        log_path: Some(args.out.join("train.jsonl")),
        progress_every: Some(cfg.train.progress_every),
    };
    let outcome = trainer.run(&source, &opts)?;
    if let Some(last) = outcome.history.last() {
        println!(
            "trained to iteration {} (last loss {:.5}, {:.1}s)",
            outcome.iterations, last.total, last.wall_time
        );
    } else {
        println!("nothing to do: already at iteration {}", outcome.iterations);
    }
    for p in &outcome.checkpoints {
        println!("checkpoint: {}", p.display());
    }
    Ok(())
}

fn colorize_cmd(args: &ColorizeArgs) -> CmdResult {
    for (p, what) in [(&args.ref_sketch, "reference sketch"), (&args.ref_color, "reference color")] {
        require_file(p, what)?;
    }
    for p in &args.sketches {
        require_file(p, "sketch")?;
    }
    let g = load_generator(&args.checkpoint)?;
    let mut ref_sketch = SketchImage::load_png(&args.ref_sketch)?;
    let mut ref_color = ColorImage::load_png(&args.ref_color)?;
    fs::create_dir_all(&args.out).map_err(|e| runtime(format!("cannot create {}: {e}", args.out.display())))?;
    for p in &args.sketches {
        let sketch = SketchImage::load_png(p)?;
        let out = g.forward(&ref_sketch, &ref_color, &sketch)?;
        let name = p.file_name().expect("sketch paths name files");
        let dest = args.out.join(name);
        out.save_png(&dest)?;
        println!("{}", dest.display());
        if args.chain {
            ref_sketch = sketch;
            ref_color = out;
        }
    }
    Ok(())
}

fn models(args: &ModelArgs) -> std::result::Result<Vec<(String, Option<Generator>)>, Failure> {
    if args.checkpoint.is_empty() && !args.identity {
        return Err(usage("give at least one --checkpoint or --identity"));
    }
    let mut out = Vec::new();
    if args.identity {
        out.push(("identity".to_string(), None));
    }
    for p in &args.checkpoint {
        let g = load_generator(p)?;
        out.push((model_label(&g, p), Some(g)));
    }
    Ok(out)
}

fn with_colorizer<T>(label: &str, g: &Option<Generator>, f: impl FnOnce(&dyn Colorizer) -> T) -> T {
    match g {
        Some(g) => f(&GeneratorColorizer {
            label: label.to_string(),
            generator: g,
        }),
        None => f(&IdentityOracle),
    }
}

fn load_sequences(cfg: &RunConfig, dir: &Path) -> std::result::Result<Vec<SequenceFrames>, Failure> {
    for f in [FRAMES_FILE, SHOTS_FILE, SEQUENCES_FILE] {
        require_file(&dir.join(f), "dataset file")?;
    }
    let list = FrameList::from_tsv(&read_file(&dir.join(FRAMES_FILE))?)?;
    let shots = ShotIndex::from_tsv(&read_file(&dir.join(SHOTS_FILE))?)?;
    let seqs = sequences_from_tsv(&read_file(&dir.join(SEQUENCES_FILE))?)?;
    let resize = |c: ColorImage, s: SketchImage| -> linecolor::Result<(ColorImage, SketchImage)> {
        match cfg.eval.resolution {
            Some(r) => Ok((c.resize(r, r)?, s.resize(r, r)?)),
            None => Ok((c, s)),
        }
    };
    let mut out = Vec::new();
    for seq in seqs.into_iter().filter(|s| cfg.eval.strides.contains(&s.stride)) {
        let idx = [seq.reference, seq.successors[0], seq.successors[1], seq.successors[2], seq.successors[3]];
        let shot = shots
            .shots()
            .get(seq.shot)
            .ok_or_else(|| usage(format!("sequence refers to unknown shot {}", seq.shot)))?;
        if idx.iter().any(|&i| i < shot.start || i >= shot.end || i >= list.len()) {
            return Err(usage(format!("sequence {seq:?} leaves its shot")));
        }
        let mut colors = Vec::new();
        let mut sketches = Vec::new();
        for i in idx {
            let (c, s) = resize(
                ColorImage::load_png(&dir.join(&list.color[i]))?,
                SketchImage::load_png(&dir.join(&list.sketch[i]))?,
            )?;
            colors.push(c);
            sketches.push(s);
        }
        out.push(SequenceFrames {
            sequence: seq,
            colors: colors.try_into().expect("five frames"),
            sketches: sketches.try_into().expect("five frames"),
        });
    }
    Ok(out)
}

fn evaluate_cmd(cfg: &RunConfig, args: &EvaluateArgs) -> CmdResult {
    let models = models(&args.model)?;
    let sequences = load_sequences(cfg, &args.dataset)?;
    if sequences.is_empty() {
        return Err(usage("the dataset has no evaluation sequences for the configured strides"));
    }
    let chain = args.chain || cfg.eval.chain;
    let mut report = EvalReport {
        meta: ReportMeta {
            checkpoint: args
                .model
                .checkpoint
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(";"),
            dataset: args.dataset.display().to_string(),
            seed: cfg.seed,
        },
        rows: Vec::new(),
    };
    for (label, g) in &models {
        report.merge(with_colorizer(label, g, |c| evaluate(c, &sequences, chain))?);
    }
    write_file(&args.out.join("report.csv"), &report.to_csv())?;
    let table = report.to_table();
    write_file(&args.out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn benchmark_cmd(cfg: &RunConfig, args: &BenchmarkArgs) -> CmdResult {
    let side = args.resolution;
    if side == 0 || side % 8 != 0 {
        return Err(usage(format!("resolution {side} is not a positive multiple of 8")));
    }
    let repeats = args.repeats.unwrap_or(cfg.eval.repeats);
    let warmup = args.warmup.unwrap_or(cfg.eval.warmup);
    let n = args.frames.unwrap_or(2).max(1);
    let models = models(&args.model)?;
    let colors = synthetic::clip(cfg.seed, &[n + 1], side, side, 3, side as f32 / 32.0);
    let params = cfg.datasmith.lineart;
    let sketches: Vec<SketchImage> = colors.iter().map(|c| linecolor::datasmith::synthesize_lineart(c, &params)).collect();
    let cases: Vec<EvalCase<'_>> = (1..=n)
        .map(|i| EvalCase {
            prev_sketch: &sketches[0],
            prev_color: &colors[0],
            next_sketch: &sketches[i],
            target: &colors[i],
        })
        .collect();
    let mut reports: Vec<TimingReport> = Vec::new();
    for (label, g) in &models {
        reports.push(with_colorizer(label, g, |c| benchmark_time(c, &cases, warmup, repeats))?);
    }
    let mut csv = String::from("method,seconds_per_frame,spread,hardware\n");
    for r in &reports {
        println!(
            "{:<24} {:.4} s/frame (spread {:.1}%)",
            r.method,
            r.seconds_per_frame,
            100.0 * r.spread()
        );
        csv.push_str(&format!(
            "{},{:.6},{:.4},\"{}\"\n",
            r.method,
            r.seconds_per_frame,
            r.spread(),
            r.hardware.replace('"', "'")
        ));
    }
    if let Some(r) = reports.first() {
        println!("hardware: {}", r.hardware);
    }
    if let Some(out) = &args.out {
        write_file(&out.join("timing.csv"), &csv)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    match &cli.command {
        Command::BuildDataset(a) => build_dataset_cmd(&cfg, a),
        Command::Train(a) => train_cmd(&cfg, a),
        Command::Colorize(a) => colorize_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(&cfg, a),
        Command::Benchmark(a) => benchmark_cmd(&cfg, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
